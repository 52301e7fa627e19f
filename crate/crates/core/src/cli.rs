//! Command-line front end.
//!
//! Configuration resolves as profile defaults < `--config` file < flags.
//! The file is one flat JSON object whose keys are the fields of
//! [`ModelConfig`] and [`TrainConfig`]; `seed` and `use_eb` set both, `lr`
//! is accepted for `learning_rate`, and `profile` picks the defaults.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use crate::ablation::ablation_run;
use crate::checkpoint::{self, Checkpoint};
use crate::data::{self, vocab::Vocabulary, GenConfig, Split};
use crate::error::{Error, Result};
use crate::gradsuite::run_suite;
use crate::metrics::{validate_report_json, MetricsReport};
use crate::model::{ModelConfig, PitVqaNet, Profile};
use crate::train::{evaluate, loss_log_csv, Dataset, TrainConfig, Trainer};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
const DEFAULT_OUT: &str = "pitvqa-out";

#[derive(Parser, Debug)]
#[command(
    name = "pitvqa",
    version,
    about = "Synthetic pituitary-surgery VQA: data, training, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus (frames + manifest) and print its statistics.
    GenData(GenArgs),
    /// Train a model on a generated corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a corpus.
    Eval(EvalArgs),
    /// Run the central-difference gradient suite; exits 1 if any error exceeds 1e-4.
    Gradcheck(GradArgs),
    /// Train matched-seed models with and without the excitation block.
    Ablate(AblateArgs),
    /// Render a metrics JSON file as a text or CSV table.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct OutArg {
    /// Output directory for every artifact of the run.
    #[arg(long, env = "PITVQA_OUT", default_value = DEFAULT_OUT)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Flat JSON config file (keys of the model and training configs).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Architecture defaults.
    #[arg(long, value_enum)]
    pub profile: Option<ProfileArg>,
    /// Learning rate; overrides the config file.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Number of optimisation steps; overrides `max_steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Batch size; overrides the config file.
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProfileArg {
    Desk,
    PaperFaithful,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::PaperFaithful => Profile::PaperFaithful,
        }
    }
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of synthetic procedures.
    #[arg(long, default_value_t = 25)]
    pub procedures: usize,
    /// Frames per procedure.
    #[arg(long, default_value_t = 40)]
    pub frames: usize,
    /// Fraction of procedures assigned to the training split.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Corpus directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Checkpoint every N steps (0 disables); overrides `eval_every`.
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Continue from a checkpoint; its model config must match the resolved one.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Corpus directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint file to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split to evaluate.
    #[arg(long, default_value = "val")]
    pub split: String,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug)]
pub struct GradArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Corpus directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Metrics JSON written by `eval`, `train` or `ablate`.
    #[arg(long)]
    pub metrics: PathBuf,
    /// Table format.
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    #[command(flatten)]
    pub out: OutArg,
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub profile: Profile,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Resolved {
    /// Flat JSON object; loading it back through [`resolve`] reproduces
    /// this configuration.
    pub fn to_flat_json(&self) -> Value {
        let mut flat = Map::new();
        flat.insert("profile".into(), Value::String(self.profile.to_string()));
        for part in [
            serde_json::to_value(&self.model).expect("serializable"),
            serde_json::to_value(&self.train).expect("serializable"),
        ] {
            if let Value::Object(m) = part {
                flat.extend(m);
            }
        }
        Value::Object(flat)
    }
}

fn set_key<T: serde::de::DeserializeOwned + serde::Serialize>(
    target: &mut T,
    key: &str,
    v: &Value,
) -> Result<()> {
    let mut obj = serde_json::to_value(&*target).expect("serializable");
    obj.as_object_mut()
        .expect("struct")
        .insert(key.to_string(), v.clone());
    *target = serde_json::from_value(obj)
        .map_err(|e| Error::Config(format!("key {key:?}: invalid value {v} ({e})")))?;
    Ok(())
}

/// Applies a flat JSON object of overrides.
pub fn apply_flat(
    model: &mut ModelConfig,
    train: &mut TrainConfig,
    obj: &Map<String, Value>,
) -> Result<()> {
    let model_keys: Vec<String> = match serde_json::to_value(&*model).expect("serializable") {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => unreachable!(),
    };
    let train_keys: Vec<String> = match serde_json::to_value(&*train).expect("serializable") {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => unreachable!(),
    };
    for (raw, v) in obj {
        if raw == "profile" {
            continue;
        }
        let key = if raw == "lr" {
            "learning_rate"
        } else {
            raw.as_str()
        };
        let in_model = model_keys.iter().any(|k| k == key);
        let in_train = train_keys.iter().any(|k| k == key);
        if !in_model && !in_train {
            return Err(Error::Config(format!("unknown config key {raw:?}")));
        }
        if in_model {
            set_key(model, key, v).map_err(|_| type_error(raw, v))?;
        }
        if in_train {
            set_key(train, key, v).map_err(|_| type_error(raw, v))?;
        }
    }
    Ok(())
}

fn type_error(key: &str, v: &Value) -> Error {
    Error::Config(format!("key {key:?} has an invalid value {v}"))
}

/// Parses a flat JSON config file. An empty file is an empty object.
pub fn load_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(Map::new());
    }
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(m)) => {
            if let Some((k, _)) = m.iter().find(|(_, v)| v.is_object() || v.is_array()) {
                return Err(Error::Config(format!(
                    "key {k:?}: nested values are not allowed"
                )));
            }
            Ok(m)
        }
        Ok(_) => Err(Error::Config(format!(
            "{} must hold a JSON object",
            path.display()
        ))),
        Err(e) => Err(Error::Config(format!("{}: {e}", path.display()))),
    }
}

/// Defaults < file < flags, then validation.
pub fn resolve(args: &ConfigArgs) -> Result<Resolved> {
    let file = match &args.config {
        Some(p) => load_config_file(p)?,
        None => Map::new(),
    };
    let profile = match (args.profile, file.get("profile")) {
        (Some(p), _) => p.into(),
        (None, Some(Value::String(s))) => s.parse()?,
        (None, Some(v)) => return Err(type_error("profile", v)),
        (None, None) => Profile::Desk,
    };
    let mut model = ModelConfig::from_profile(profile);
    let mut train = TrainConfig::default();
    apply_flat(&mut model, &mut train, &file)?;
    if let Some(s) = args.seed {
        model.seed = s;
        train.seed = s;
    }
    if let Some(lr) = args.lr {
        train.learning_rate = lr;
    }
    if let Some(n) = args.steps {
        train.max_steps = n;
    }
    if let Some(b) = args.batch_size {
        train.batch_size = b;
    }
    if model.use_eb != train.use_eb {
        return Err(Error::Config(
            "use_eb must agree between model and training".into(),
        ));
    }
    model.validate()?;
    train.validate()?;
    Ok(Resolved {
        profile,
        model,
        train,
    })
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_resolved(dir: &Path, r: &Resolved) -> Result<()> {
    ensure_dir(dir)?;
    write_json(&dir.join(RESOLVED_CONFIG), &r.to_flat_json())
}

fn load_split(dir: &Path, split: Split, cfg: &ModelConfig) -> Result<Dataset> {
    let corpus = data::io::read_dataset(dir)?;
    let idx = corpus.indices(split);
    if idx.is_empty() {
        return Err(Error::Contract(format!(
            "{} has no {split} samples",
            dir.display()
        )));
    }
    Dataset::from_corpus(&corpus, &idx, &Vocabulary::from_template_bank(), cfg)
}

fn load_splits(dir: &Path, cfg: &ModelConfig) -> Result<(Dataset, Dataset)> {
    let corpus = data::io::read_dataset(dir)?;
    let vocab = Vocabulary::from_template_bank();
    let train = Dataset::from_corpus(&corpus, &corpus.indices(Split::Train), &vocab, cfg)?;
    let val = Dataset::from_corpus(&corpus, &corpus.indices(Split::Val), &vocab, cfg)?;
    if train.is_empty() {
        return Err(Error::Contract("empty training split".into()));
    }
    Ok((train, val))
}

fn summary(r: &MetricsReport) -> String {
    format!(
        "accuracy {:.4}  balanced_accuracy {:.4}  macro_fscore {:.4}",
        r.accuracy, r.balanced_accuracy, r.macro_fscore
    )
}

fn gen_data(a: &GenArgs) -> Result<()> {
    let cfg = GenConfig {
        seed: a.seed,
        procedures: a.procedures,
        frames_per_procedure: a.frames,
        train_fraction: a.train_fraction,
    };
    let out = &a.out.out;
    let stats = data::generate_to_dir(&cfg, out)?;
    write_json(&out.join(RESOLVED_CONFIG), &cfg)?;
    write_json(&out.join("stats.json"), &stats)?;
    println!(
        "{} procedures ({} train / {} val), {} frames, {} samples, {:.3} QA/frame, question words {}..={}, answer consistency {:.4}",
        stats.procedures,
        stats.train_procedures,
        stats.val_procedures,
        stats.frames,
        stats.samples,
        stats.mean_qa_per_frame,
        stats.min_question_words,
        stats.max_question_words,
        stats.answer_consistency
    );
    for (cat, size) in &stats.category_sizes {
        println!(
            "  {:<15} {size:>3} classes, {:>3} observed, {:>6} samples",
            cat.to_string(),
            stats.observed_classes[cat],
            stats.samples_per_category[cat]
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn ckpt_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:06}.pvqc"))
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut r = resolve(&a.cfg)?;
    if let Some(e) = a.eval_every {
        r.train.eval_every = e;
    }
    let out = &a.out.out;
    write_resolved(out, &r)?;
    let (train_data, val_data) = load_splits(&a.data, &r.model)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = checkpoint::load_matching(p, &r.model)?;
            let mut t = ck.into_trainer()?;
            t.cfg = r.train.clone();
            t
        }
        None => Trainer::new(PitVqaNet::new(r.model.clone())?, r.train.clone())?,
    };
    println!(
        "training {} parameters on {} samples for {} steps (from step {})",
        trainer.net.params().numel(),
        train_data.len(),
        r.train.max_steps,
        trainer.step
    );
    let every = (r.train.max_steps / 20).max(1);
    while trainer.step < trainer.cfg.max_steps {
        let s = trainer.train_step(&train_data)?;
        if s.step % every == 0 || trainer.step == trainer.cfg.max_steps {
            println!(
                "step {:>6}  loss {:.5}  batch acc {:.3}",
                s.step, s.loss, s.batch_accuracy
            );
        }
        if trainer.cfg.eval_every > 0 && trainer.step % trainer.cfg.eval_every == 0 {
            checkpoint::save(
                &ckpt_path(out, trainer.step),
                &Checkpoint::from_trainer(&trainer),
            )?;
        }
    }
    let log_path = out.join("loss_log.csv");
    fs::write(&log_path, loss_log_csv(&trainer.log)).map_err(|e| Error::io(&log_path, e))?;
    checkpoint::save(&out.join("final.pvqc"), &Checkpoint::from_trainer(&trainer))?;
    if !val_data.is_empty() {
        let rep = evaluate(&trainer.net, &val_data)?;
        write_json(&out.join("metrics_val.json"), &rep)?;
        println!("val: {}", summary(&rep));
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let ck = checkpoint::load(&a.checkpoint)?;
    let net = PitVqaNet::from_parts(ck.model, ck.params, ck.buffers)?;
    let data = load_split(&a.data, split, net.config())?;
    let rep = evaluate(&net, &data)?;
    let out = &a.out.out;
    ensure_dir(out)?;
    write_json(&out.join(format!("metrics_{split}.json")), &rep)?;
    println!("{split} ({} samples): {}", data.len(), summary(&rep));
    Ok(())
}

fn gradcheck(a: &GradArgs) -> Result<bool> {
    let r = resolve(&a.cfg)?;
    write_resolved(&a.out.out, &r)?;
    let checks = run_suite(&r.model)?;
    for c in &checks {
        println!(
            "{:<40} max rel error {:.3e}  [{}]  {}",
            c.layer,
            c.max_rel_error,
            c.mode,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    write_json(&a.out.out.join("gradcheck.json"), &checks)?;
    Ok(checks.iter().all(|c| c.passed()))
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let r = resolve(&a.cfg)?;
    let out = &a.out.out;
    write_resolved(out, &r)?;
    let (train_data, val_data) = load_splits(&a.data, &r.model)?;
    let eval_data = if val_data.is_empty() {
        &train_data
    } else {
        &val_data
    };
    let rep = ablation_run(&r.model, &r.train, &train_data, eval_data)?;
    write_json(&out.join("metrics_eb_on.json"), &rep.eb_on)?;
    write_json(&out.join("metrics_eb_off.json"), &rep.eb_off)?;
    write_json(&out.join("ablation.json"), &rep)?;
    print!("{}", rep.delta_table());
    println!("wrote {}", out.display());
    Ok(())
}

/// Renders a metrics report as a table.
pub fn render_report(r: &MetricsReport, format: Format) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    match format {
        Format::Text => {
            let _ = writeln!(s, "{}", summary(r));
            let _ = writeln!(s, "macro_recall {:.4}", r.macro_recall);
            let _ = writeln!(
                s,
                "{:<16} {:>8} {:>10} {:>10} {:>10}",
                "category", "samples", "accuracy", "b.acc", "macro_f"
            );
            for (k, c) in &r.per_category {
                let _ = writeln!(
                    s,
                    "{k:<16} {:>8} {:>10.4} {:>10.4} {:>10.4}",
                    c.samples, c.accuracy, c.balanced_accuracy, c.macro_fscore
                );
            }
            let _ = writeln!(
                s,
                "{:>5} {:<22} {:>8} {:>8} {:>9} {:>8}",
                "class", "name", "support", "recall", "precision", "f1"
            );
            for c in r.per_class.iter().filter(|c| c.support > 0) {
                let _ = writeln!(
                    s,
                    "{:>5} {:<22} {:>8} {:>8.4} {:>9.4} {:>8.4}",
                    c.class, c.name, c.support, c.recall, c.precision, c.f1
                );
            }
        }
        Format::Csv => {
            let _ = writeln!(s, "class,name,support,recall,precision,f1");
            for c in &r.per_class {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    c.class, c.name, c.support, c.recall, c.precision, c.f1
                );
            }
        }
    }
    s
}

fn report(a: &ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.metrics).map_err(|e| Error::io(&a.metrics, e))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", a.metrics.display())))?;
    validate_report_json(&v)?;
    let r: MetricsReport = serde_json::from_value(v).map_err(|e| Error::Format(e.to_string()))?;
    let table = render_report(&r, a.format);
    print!("{table}");
    let out = &a.out.out;
    ensure_dir(out)?;
    let name = match a.format {
        Format::Text => "report.txt",
        Format::Csv => "report.csv",
    };
    fs::write(out.join(name), table).map_err(|e| Error::io(out.join(name), e))
}

/// Parses `args` and runs the subcommand. Returns the process exit code:
/// 0 on success, 1 on runtime failure, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a).and_then(|ok| {
            if ok {
                Ok(())
            } else {
                Err(Error::Contract(
                    "gradient check exceeded tolerance 1e-4".into(),
                ))
            }
        }),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn main() -> ! {
    std::process::exit(run(std::env::args_os()))
}
