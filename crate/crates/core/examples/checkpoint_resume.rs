//! Saves a checkpoint mid-run, resumes from it, and compares the losses
//! with an uninterrupted run.

use pitvqa::checkpoint::{self, Checkpoint};
use pitvqa::data::vocab::Vocabulary;
use pitvqa::data::{generate, GenConfig, Split};
use pitvqa::model::{ModelConfig, PitVqaNet};
use pitvqa::train::{Dataset, TrainConfig, Trainer};
use pitvqa::Result;

fn main() -> Result<()> {
    let model = ModelConfig::desk();
    let g = generate(&GenConfig {
        procedures: 3,
        frames_per_procedure: 10,
        ..GenConfig::default()
    })?;
    let data = Dataset::from_corpus(
        &g.corpus,
        &g.corpus.indices(Split::Train),
        &Vocabulary::from_template_bank(),
        &model,
    )?;
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        max_steps: 8,
        ..TrainConfig::default()
    };

    let mut full = Trainer::new(PitVqaNet::new(model.clone())?, cfg.clone())?;
    full.run(&data, |_| Ok(()))?;

    let mut first = Trainer::new(PitVqaNet::new(model)?, cfg)?;
    for _ in 0..4 {
        first.train_step(&data)?;
    }
    let path = std::env::temp_dir().join("pitvqa-example.pvqc");
    checkpoint::save(&path, &Checkpoint::from_trainer(&first))?;
    let mut resumed = checkpoint::load(&path)?.into_trainer()?;
    resumed.run(&data, |_| Ok(()))?;

    for r in &resumed.log {
        let reference = full.log[r.step as usize].loss;
        println!(
            "step {}  unbroken {:.15}  resumed {:.15}  |diff| {:.1e}",
            r.step,
            reference,
            r.loss,
            (reference - r.loss).abs()
        );
    }
    let bytes = std::fs::read(&path).map_err(|e| pitvqa::Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let again = Checkpoint::from_bytes(&bytes, &path)?.to_bytes()?;
    println!("save -> load -> save byte-identical: {}", again == bytes);
    Ok(())
}
