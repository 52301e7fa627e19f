//! Cross-entropy training with Adam, batching and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::data::render::FrameImage;
use crate::data::vocab::Vocabulary;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{ModelConfig, ModelInput, PitVqaNet};
use crate::params::ParamStore;
use crate::rng::{derive_seed, derive_seed_str, RngStream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Checkpoint interval in steps; 0 disables periodic checkpoints.
    pub eval_every: u64,
    pub use_eb: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 16,
            max_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: 0,
            use_eb: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be ≥ 2, got {}", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)".into());
        }
        if self.eps <= 0.0 {
            return fail(format!("eps must be > 0, got {}", self.eps));
        }
        Ok(())
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (name, p) in params.iter() {
            m.insert(name, p.zeros_like());
            v.insert(name, p.zeros_like());
        }
        AdamState { t: 0, m, v }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are
/// treated as having a zero gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads.named() {
        let p = params
            .get(name)
            .map_err(|_| Error::Contract(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "gradient shape {:?} does not match parameter {name} {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let g = grads.by_name(&name);
        let theta = params.get_mut(&name)?;
        if !state.m.contains(&name) {
            state.m.insert(name.clone(), theta.zeros_like());
            state.v.insert(name.clone(), theta.zeros_like());
        }
        let m = state.m.get_mut(&name)?;
        let v = state.v.get_mut(&name)?;
        if m.shape() != theta.shape() || v.shape() != theta.shape() {
            return Err(Error::Contract(format!(
                "optimizer state shape mismatch for {name}"
            )));
        }
        let (md, vd, td) = (m.data_mut(), v.data_mut(), theta.data_mut());
        for i in 0..td.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            td[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// A tokenised sample pointing at its frame image.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: usize,
    pub ids: Vec<usize>,
    pub pad: Vec<bool>,
    pub answer: usize,
}

/// Tokenised samples plus the frames they reference. Frames stay in
/// single precision and are widened per batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<FrameImage>,
    pub examples: Vec<Example>,
}

impl Dataset {
    /// Selects `indices` of `corpus` and tokenises their questions.
    pub fn from_corpus(
        corpus: &Corpus,
        indices: &[usize],
        vocab: &Vocabulary,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        if vocab.len() > cfg.vocab_size {
            return Err(Error::Config(format!(
                "vocab_size {} is smaller than the vocabulary ({})",
                cfg.vocab_size,
                vocab.len()
            )));
        }
        let mut images = Vec::new();
        let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
        let mut examples = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = corpus
                .samples
                .get(i)
                .ok_or_else(|| Error::index("dataset", format!("sample {i} out of range")))?;
            let image = *remap.entry(s.frame).or_insert_with(|| {
                images.push(corpus.frames[s.frame].image.clone());
                images.len() - 1
            });
            let (ids, pad) = vocab.tokenize(&s.question, cfg.max_question_len);
            examples.push(Example {
                image,
                ids,
                pad,
                answer: s.answer,
            });
        }
        Ok(Dataset { images, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.answer).collect()
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            images: self.images.clone(),
            examples: self.examples[..n.min(self.len())].to_vec(),
        }
    }

    pub fn batch(&self, cfg: &ModelConfig, idx: &[usize]) -> Result<(ModelInput, Vec<usize>)> {
        let ex: Vec<&Example> = idx.iter().map(|&i| &self.examples[i]).collect();
        let tensors: Vec<Tensor> = ex.iter().map(|e| self.images[e.image].to_tensor()).collect();
        let images: Vec<&Tensor> = tensors.iter().collect();
        let ids: Vec<&[usize]> = ex.iter().map(|e| e.ids.as_slice()).collect();
        let pad: Vec<&[bool]> = ex.iter().map(|e| e.pad.as_slice()).collect();
        let input = ModelInput::from_parts(cfg, &images, &ids, &pad)?;
        Ok((input, ex.iter().map(|e| e.answer).collect()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for r in log {
        let _ = writeln!(s, "{},{:e},{:e}", r.step, r.loss, r.lr);
    }
    s
}

/// Index of the largest entry in each row of `[B, C]` logits.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[logits.rank() - 1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Eval-mode predictions for every example.
pub fn predict(net: &PitVqaNet, data: &Dataset, chunk: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let (input, _) = data.batch(net.config(), part)?;
        out.extend(argmax_rows(&net.logits(&input)?));
    }
    Ok(out)
}

/// Eval-mode metrics over a dataset.
pub fn evaluate(net: &PitVqaNet, data: &Dataset) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Contract(
            "cannot evaluate an empty sample set".into(),
        ));
    }
    let pred = predict(net, data, 64)?;
    MetricsReport::from_predictions(&data.labels(), &pred, net.config().n_classes)
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    RngStream::new(derive_seed(derive_seed_str(seed, "shuffle"), &[epoch])).shuffle(&mut p);
    p
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub batch_accuracy: f64,
}

/// Resumable single-owner training loop.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: PitVqaNet,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    pub step: u64,
    pub rng: RngStream,
    pub log: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(net: PitVqaNet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(net.params());
        let rng = RngStream::new(derive_seed_str(cfg.seed, "dropout"));
        Ok(Trainer {
            net,
            adam,
            cfg,
            step: 0,
            rng,
            log: Vec::new(),
        })
    }

    /// Batch indices used at the current step.
    pub fn batch_indices(&self, n: usize) -> Result<Vec<usize>> {
        if n < 2 {
            return Err(Error::Contract(format!(
                "training needs at least 2 samples, got {n}"
            )));
        }
        let b = self.cfg.batch_size.min(n);
        let per_epoch = (n / b) as u64;
        let epoch = self.step / per_epoch;
        let pos = (self.step % per_epoch) as usize;
        let perm = epoch_permutation(self.cfg.seed, epoch, n);
        Ok(perm[pos * b..(pos + 1) * b].to_vec())
    }

    pub fn train_step(&mut self, data: &Dataset) -> Result<StepReport> {
        let idx = self.batch_indices(data.len())?;
        let (input, targets) = data.batch(self.net.config(), &idx)?;
        let out = self.net.train_step(&input, &targets, &mut self.rng)?;
        adam_step(self.net.params_mut(), &out.grads, &mut self.adam, &self.cfg)?;
        if let Some(stats) = &out.bn_stats {
            self.net.update_running_stats(stats)?;
        }
        let pred = argmax_rows(&out.logits);
        let correct = pred.iter().zip(&targets).filter(|(a, b)| a == b).count();
        let report = StepReport {
            step: self.step,
            loss: out.loss,
            batch_accuracy: correct as f64 / targets.len() as f64,
        };
        self.log.push(LossRecord {
            step: self.step,
            loss: out.loss,
            lr: self.cfg.learning_rate,
        });
        self.step += 1;
        Ok(report)
    }

    /// Runs until `max_steps`, invoking `on_checkpoint` every `eval_every`
    /// steps.
    pub fn run<F>(&mut self, data: &Dataset, mut on_checkpoint: F) -> Result<()>
    where
        F: FnMut(&Trainer) -> Result<()>,
    {
        if data.is_empty() && self.step < self.cfg.max_steps {
            return Err(Error::Contract("empty training split".into()));
        }
        while self.step < self.cfg.max_steps {
            self.train_step(data)?;
            if self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0 {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }
}
