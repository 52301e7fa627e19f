//! Synthetic corpus: workflow states, rendered frames, templated QA pairs.

pub mod io;
pub mod qa;
pub mod render;
pub mod split;
pub mod taxonomy;
pub mod vocab;
pub mod workflow;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use qa::{generate_qa, word_count};
use render::{render_frame, FrameImage};
use taxonomy::{Category, Taxonomy};
use workflow::{frame_stream, sample_procedure, FrameState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Path relative to the dataset root.
    pub path: String,
    pub procedure_id: u32,
    pub image: FrameImage,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VqaSample {
    /// Index into [`Corpus::frames`].
    pub frame: usize,
    pub question: String,
    pub answer: usize,
    pub category: Category,
    pub split: Split,
    pub procedure_id: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub frames: Vec<Frame>,
    pub samples: Vec<VqaSample>,
}

impl Corpus {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    pub fn procedures(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.procedure_id).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub procedures: usize,
    pub frames_per_procedure: usize,
    pub train_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            procedures: 25,
            frames_per_procedure: 40,
            train_fraction: 0.8,
        }
    }
}

/// Summary statistics of a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub procedures: usize,
    pub frames: usize,
    pub samples: usize,
    pub mean_qa_per_frame: f64,
    pub min_question_words: usize,
    pub max_question_words: usize,
    /// Taxonomy size per category.
    pub category_sizes: BTreeMap<Category, usize>,
    /// Distinct answers observed per category.
    pub observed_classes: BTreeMap<Category, usize>,
    pub samples_per_category: BTreeMap<Category, usize>,
    /// Fraction of samples whose answer matches an independent re-derivation
    /// from the frame state.
    pub answer_consistency: f64,
    pub train_procedures: usize,
    pub val_procedures: usize,
}

/// In-memory corpus together with the latent state of every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub corpus: Corpus,
    pub states: Vec<FrameState>,
}

/// Emits frames of every procedure in order, calling `sink` per frame.
fn generate_with<F>(cfg: &GenConfig, mut sink: F) -> Result<(Vec<FrameState>, Vec<VqaSample>)>
where
    F: FnMut(&str, &FrameState, FrameImage) -> Result<()>,
{
    if cfg.frames_per_procedure == 0 || cfg.procedures == 0 {
        return Err(Error::Param(
            "procedures and frames per procedure must be ≥ 1".into(),
        ));
    }
    let tax = Taxonomy::build();
    let ids: Vec<u32> = (0..cfg.procedures as u32).collect();
    let train: BTreeSet<u32> = if cfg.procedures >= 2 {
        split::split_procedures(&ids, cfg.train_fraction, cfg.seed)?
            .0
            .into_iter()
            .collect()
    } else {
        ids.iter().copied().collect()
    };
    let mut states = Vec::new();
    let mut samples = Vec::new();
    for &pid in &ids {
        let split = if train.contains(&pid) {
            Split::Train
        } else {
            Split::Val
        };
        for state in sample_procedure(cfg.seed, pid, cfg.frames_per_procedure) {
            let path = io::frame_path(pid, state.frame_index);
            let image = render_frame(&state, cfg.seed);
            let mut rng = frame_stream(cfg.seed, pid, state.frame_index).split("qa");
            for qa in generate_qa(&state, &tax, &mut rng) {
                samples.push(VqaSample {
                    frame: states.len(),
                    question: qa.question,
                    answer: qa.answer,
                    category: qa.category,
                    split,
                    procedure_id: pid,
                });
            }
            sink(&path, &state, image)?;
            states.push(state);
        }
    }
    Ok((states, samples))
}

/// Generates a corpus in memory.
pub fn generate(cfg: &GenConfig) -> Result<Generated> {
    let mut frames = Vec::new();
    let (states, samples) = generate_with(cfg, |path, state, image| {
        frames.push(Frame {
            path: path.to_string(),
            procedure_id: state.procedure_id,
            image,
        });
        Ok(())
    })?;
    Ok(Generated {
        corpus: Corpus { frames, samples },
        states,
    })
}

/// Generates a corpus straight to disk without holding images in memory.
pub fn generate_to_dir(cfg: &GenConfig, dir: &Path) -> Result<CorpusStats> {
    let frames_dir = dir.join(io::FRAMES_DIR);
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let mut paths = Vec::new();
    let (states, samples) = generate_with(cfg, |path, _, image| {
        io::write_frame(&dir.join(path), &image)?;
        paths.push(path.to_string());
        Ok(())
    })?;
    let records: Vec<io::Record> = samples
        .iter()
        .map(|s| s.to_record(&paths[s.frame]))
        .collect();
    io::write_manifest(dir, &records)?;
    Ok(corpus_stats(&states, &samples))
}

pub fn corpus_stats(states: &[FrameState], samples: &[VqaSample]) -> CorpusStats {
    let tax = Taxonomy::build();
    let mut observed: BTreeMap<Category, BTreeSet<usize>> = BTreeMap::new();
    let mut per_cat: BTreeMap<Category, usize> = BTreeMap::new();
    let mut consistent = 0usize;
    let (mut lo, mut hi) = (usize::MAX, 0usize);
    for s in samples {
        observed.entry(s.category).or_default().insert(s.answer);
        *per_cat.entry(s.category).or_default() += 1;
        let n = word_count(&s.question);
        lo = lo.min(n);
        hi = hi.max(n);
        if qa::expected_answer(&s.question, &states[s.frame], &tax) == Some(s.answer)
            && tax.category_of(s.answer).ok() == Some(s.category)
        {
            consistent += 1;
        }
    }
    let split_count = |sp: Split| {
        samples
            .iter()
            .filter(|s| s.split == sp)
            .map(|s| s.procedure_id)
            .collect::<BTreeSet<_>>()
            .len()
    };
    CorpusStats {
        procedures: states
            .iter()
            .map(|s| s.procedure_id)
            .collect::<BTreeSet<_>>()
            .len(),
        frames: states.len(),
        samples: samples.len(),
        mean_qa_per_frame: samples.len() as f64 / states.len().max(1) as f64,
        min_question_words: if samples.is_empty() { 0 } else { lo },
        max_question_words: hi,
        category_sizes: Category::ALL.iter().map(|&c| (c, tax.size(c))).collect(),
        observed_classes: observed.into_iter().map(|(c, s)| (c, s.len())).collect(),
        samples_per_category: per_cat,
        answer_consistency: consistent as f64 / samples.len().max(1) as f64,
        train_procedures: split_count(Split::Train),
        val_procedures: split_count(Split::Val),
    }
}
