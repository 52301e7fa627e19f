fn main() {
    pitvqa::cli::main()
}
