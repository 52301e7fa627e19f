//! Matched-seed training with and without the excitation block, plus the
//! neutralised-block identity check.

use pitvqa::ablation::ablation_run;
use pitvqa::data::vocab::Vocabulary;
use pitvqa::data::{generate, GenConfig, Split};
use pitvqa::model::ModelConfig;
use pitvqa::train::{Dataset, TrainConfig};
use pitvqa::Result;

fn main() -> Result<()> {
    let model = ModelConfig::desk();
    let g = generate(&GenConfig {
        seed: 7,
        procedures: 5,
        frames_per_procedure: 20,
        train_fraction: 0.8,
    })?;
    let vocab = Vocabulary::from_template_bank();
    let train = Dataset::from_corpus(&g.corpus, &g.corpus.indices(Split::Train), &vocab, &model)?;
    let val = Dataset::from_corpus(&g.corpus, &g.corpus.indices(Split::Val), &vocab, &model)?;
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        max_steps: 60,
        seed: 7,
        ..TrainConfig::default()
    };
    let report = ablation_run(&model, &cfg, &train, &val)?;
    print!("{}", report.delta_table());
    println!(
        "step-0 loss: with EB {:.4}, without EB {:.4}",
        report.step0_loss_eb_on.unwrap_or(f64::NAN),
        report.step0_loss_eb_off.unwrap_or(f64::NAN)
    );
    Ok(())
}
