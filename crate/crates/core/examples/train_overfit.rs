//! Memorises 64 training samples with the desk profile at lr 1e-3.

use pitvqa::data::vocab::Vocabulary;
use pitvqa::data::{generate, GenConfig, Split};
use pitvqa::model::{ModelConfig, PitVqaNet};
use pitvqa::train::{evaluate, Dataset, TrainConfig, Trainer};
use pitvqa::Result;

fn main() -> Result<()> {
    let model = ModelConfig::desk();
    let g = generate(&GenConfig {
        seed: 3,
        procedures: 4,
        frames_per_procedure: 40,
        train_fraction: 0.75,
    })?;
    let idx: Vec<usize> = g
        .corpus
        .indices(Split::Train)
        .into_iter()
        .take(64)
        .collect();
    let data = Dataset::from_corpus(&g.corpus, &idx, &Vocabulary::from_template_bank(), &model)?;

    let cfg = TrainConfig {
        learning_rate: 1e-3,
        max_steps: 300,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(PitVqaNet::new(model)?, cfg)?;
    while trainer.step < trainer.cfg.max_steps {
        let s = trainer.train_step(&data)?;
        if s.step % 25 == 0 {
            let acc = evaluate(&trainer.net, &data)?.accuracy;
            println!(
                "step {:>4}  loss {:.4}  train accuracy (eval mode) {acc:.3}",
                s.step, s.loss
            );
        }
    }
    println!(
        "final train accuracy {:.3}",
        evaluate(&trainer.net, &data)?.accuracy
    );
    Ok(())
}
