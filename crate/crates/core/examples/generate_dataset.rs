//! Generates a small synthetic corpus, prints its statistics and a few
//! question/answer pairs, and writes it to a directory.

use pitvqa::data::taxonomy::Taxonomy;
use pitvqa::data::{corpus_stats, generate, io, GenConfig};
use pitvqa::Result;

fn main() -> Result<()> {
    let cfg = GenConfig {
        seed: 7,
        procedures: 5,
        frames_per_procedure: 30,
        train_fraction: 0.8,
    };
    let g = generate(&cfg)?;
    let stats = corpus_stats(&g.states, &g.corpus.samples);
    println!(
        "{}",
        serde_json::to_string_pretty(&stats).expect("serializable")
    );

    let tax = Taxonomy::build();
    for s in g.corpus.samples.iter().take(8) {
        println!(
            "[{}] {} -> {}",
            s.category,
            s.question,
            tax.entry(s.answer)?.1
        );
    }

    let dir = std::env::temp_dir().join("pitvqa-example-corpus");
    io::write_dataset(&dir, &g.corpus)?;
    let back = io::read_dataset(&dir)?;
    println!(
        "wrote {} ({} samples read back)",
        dir.display(),
        back.samples.len()
    );
    Ok(())
}
