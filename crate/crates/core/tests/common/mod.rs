//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use pitvqa::data::vocab::Vocabulary;
use pitvqa::data::{generate, GenConfig, Split};
use pitvqa::model::ModelConfig;
use pitvqa::train::Dataset;

/// Desk dimensions cut down to one block per stage and 16×16 patches.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_img_layers: 1,
        n_text_layers: 1,
        n_decoder_layers: 1,
        patch_size: 16,
        ..ModelConfig::desk()
    }
}

/// Train and validation datasets of a freshly generated corpus.
pub fn datasets(model: &ModelConfig, gen: &GenConfig) -> (Dataset, Dataset) {
    let g = generate(gen).unwrap();
    let vocab = Vocabulary::from_template_bank();
    let train = Dataset::from_corpus(&g.corpus, &g.corpus.indices(Split::Train), &vocab, model).unwrap();
    let val = Dataset::from_corpus(&g.corpus, &g.corpus.indices(Split::Val), &vocab, model).unwrap();
    (train, val)
}

pub fn small_corpus(seed: u64) -> GenConfig {
    GenConfig {
        seed,
        procedures: 4,
        frames_per_procedure: 6,
        train_fraction: 0.75,
    }
}
