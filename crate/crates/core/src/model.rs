//! The three-stage VQA classifier: patch image encoder, image-grounded text
//! encoder, causal decoder stack, optional excitation block, pooled head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{
    self, block_specs, decoder_block, encoder_block, grounded_block_specs, grounded_encoder_block,
    BlockParams, GroundedBlockParams, LayerNormParams, Linear, MaskSpec,
};
use crate::autograd::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{linear_specs, norm_specs, Bound, Init, ParamSpec, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const RUNNING_MEAN: &str = "eb.bn.running_mean";
pub const RUNNING_VAR: &str = "eb.bn.running_var";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Desk,
    PaperFaithful,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::PaperFaithful => "paper-faithful",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper-faithful" => Ok(Profile::PaperFaithful),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected desk or paper-faithful)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_img_layers: usize,
    pub n_text_layers: usize,
    pub n_decoder_layers: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub n_channels: usize,
    pub max_question_len: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub dropout_p: f64,
    pub use_eb: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_img_layers: 2,
            n_text_layers: 2,
            n_decoder_layers: 2,
            image_size: 64,
            patch_size: 8,
            n_channels: 3,
            max_question_len: 16,
            vocab_size: 128,
            n_classes: 59,
            dropout_p: 0.1,
            use_eb: true,
            seed: 0,
        }
    }

    /// Desk dimensions with a 12-block decoder.
    pub fn paper_faithful() -> Self {
        ModelConfig {
            n_decoder_layers: 12,
            ..Self::desk()
        }
    }

    pub fn from_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::PaperFaithful => Self::paper_faithful(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size ({}) must be divisible by patch_size ({})",
                self.image_size, self.patch_size
            ));
        }
        if self.n_classes < 2 {
            return fail(format!("n_classes ({}) must be at least 2", self.n_classes));
        }
        if self.n_channels == 0 || self.max_question_len == 0 || self.vocab_size < 2 {
            return fail("n_channels, max_question_len must be > 0 and vocab_size ≥ 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p ({}) must lie in [0, 1)", self.dropout_p));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.n_channels * self.patch_size * self.patch_size
    }

    /// Every trainable parameter, in declaration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.d_model;
        let mut v = linear_specs("img.patch", self.patch_dim(), d, true);
        v.push(ParamSpec::new(
            "img.pos",
            [self.n_patches(), d],
            Init::Normal,
        ));
        for i in 0..self.n_img_layers {
            v.extend(block_specs(&format!("img.blocks.{i}"), d));
        }
        v.push(ParamSpec::new(
            "txt.tok",
            [self.vocab_size, d],
            Init::Normal,
        ));
        v.push(ParamSpec::new(
            "txt.pos",
            [self.max_question_len, d],
            Init::Normal,
        ));
        for i in 0..self.n_text_layers {
            v.extend(grounded_block_specs(&format!("txt.blocks.{i}"), d));
        }
        v.push(ParamSpec::new(
            "dec.pos",
            [self.max_question_len, d],
            Init::Normal,
        ));
        for i in 0..self.n_decoder_layers {
            v.extend(block_specs(&format!("dec.blocks.{i}"), d));
        }
        v.extend(norm_specs("dec.ln_f", d));
        if self.use_eb {
            v.extend(linear_specs("eb.feat", d, d, true));
            v.extend(linear_specs("eb.gate", d, d, true));
            v.extend(norm_specs("eb.bn", d));
        }
        v.extend(linear_specs("head", d, self.n_classes, true));
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }
}

/// Cuts a `[C, H, W]` image into non-overlapping `p × p` patches.
///
/// Patches are ordered row-major over the grid; each row of the result is
/// the patch flattened channel-major (`c, y, x`).
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(Error::shape(
            "patchify",
            format!("image {s:?} cannot be cut into {patch}×{patch} patches"),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / patch, w / patch);
    let dim = c * patch * patch;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * dim);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for y in 0..patch {
                    let row = ch * h * w + (py * patch + y) * w + px * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new([gh * gw, dim], out)
}

/// Batch norm behaviour of the excitation block.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Model inputs for a batch of `B` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// `[B, N, patch_dim]`.
    pub patches: Tensor,
    /// `B · max_question_len` token ids.
    pub ids: Vec<usize>,
    /// `B · max_question_len` flags, `true` on real tokens.
    pub pad: Vec<bool>,
}

impl ModelInput {
    pub fn batch(&self) -> usize {
        self.patches.shape()[0]
    }

    /// Assembles a batch from per-sample images and token rows.
    pub fn from_parts(
        cfg: &ModelConfig,
        images: &[&Tensor],
        ids: &[&[usize]],
        pad: &[&[bool]],
    ) -> Result<Self> {
        if images.len() != ids.len() || ids.len() != pad.len() || images.is_empty() {
            return Err(Error::shape(
                "model_input",
                "mismatched or empty batch parts",
            ));
        }
        let patches: Vec<Tensor> = images
            .iter()
            .map(|im| patchify(im, cfg.patch_size))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = patches.iter().collect();
        let mut all_ids = Vec::new();
        let mut all_pad = Vec::new();
        for (i, p) in ids.iter().zip(pad) {
            if i.len() != cfg.max_question_len || p.len() != cfg.max_question_len {
                return Err(Error::shape(
                    "model_input",
                    format!("token rows must have length {}", cfg.max_question_len),
                ));
            }
            all_ids.extend_from_slice(i);
            all_pad.extend_from_slice(p);
        }
        Ok(ModelInput {
            patches: Tensor::stack(&refs)?,
            ids: all_ids,
            pad: all_pad,
        })
    }
}

/// A forward pass's tape-level stages over bound parameters.
pub struct Graph<'a> {
    pub cfg: &'a ModelConfig,
    pub p: &'a Bound,
}

impl<'a> Graph<'a> {
    pub fn new(cfg: &'a ModelConfig, p: &'a Bound) -> Self {
        Graph { cfg, p }
    }

    /// `[B, N, patch_dim]` → `[B, N, d]`.
    pub fn encode_image(&self, tape: &mut Tape, patches: Var) -> Result<Var> {
        let proj = Linear::bind(self.p, "img.patch")?;
        let x = attention::linear(tape, patches, &proj)?;
        let mut x = tape.add(x, self.p.get("img.pos")?)?;
        for i in 0..self.cfg.n_img_layers {
            let b = BlockParams::bind(self.p, &format!("img.blocks.{i}"), self.cfg.n_heads)?;
            x = encoder_block(tape, x, &b, &MaskSpec::None)?;
        }
        Ok(x)
    }

    /// Token ids + padding flags + image features → `[B, L, d]`.
    pub fn encode_text(
        &self,
        tape: &mut Tape,
        ids: &[usize],
        pad: &[bool],
        img: Var,
    ) -> Result<Var> {
        let l = self.cfg.max_question_len;
        let d = self.cfg.d_model;
        if ids.len() % l != 0 || ids.len() != pad.len() || ids.is_empty() {
            return Err(Error::shape(
                "encode_grounded_text",
                format!("{} ids / {} flags for rows of {l}", ids.len(), pad.len()),
            ));
        }
        let b = ids.len() / l;
        let e = tape.embedding(self.p.get("txt.tok")?, ids)?;
        let e = tape.reshape(e, [b, l, d])?;
        let mut x = tape.add(e, self.p.get("txt.pos")?)?;
        let mask = MaskSpec::Padding(pad.to_vec());
        for i in 0..self.cfg.n_text_layers {
            let gp =
                GroundedBlockParams::bind(self.p, &format!("txt.blocks.{i}"), self.cfg.n_heads)?;
            x = grounded_encoder_block(tape, x, img, &gp, &mask)?;
        }
        Ok(x)
    }

    /// Grounded embeddings + decoder positions → causal blocks → final LN.
    pub fn decode(&self, tape: &mut Tape, grounded: Var) -> Result<Var> {
        let l = tape.value(grounded).shape()[tape.value(grounded).rank() - 2];
        let pos = self.p.get("dec.pos")?;
        let pos = if l == self.cfg.max_question_len {
            pos
        } else {
            let t = tape.value(pos).slice_rows(0, l)?;
            tape.constant(t)
        };
        let mut x = tape.add(grounded, pos)?;
        for i in 0..self.cfg.n_decoder_layers {
            let b = BlockParams::bind(self.p, &format!("dec.blocks.{i}"), self.cfg.n_heads)?;
            x = decoder_block(tape, x, &b)?;
        }
        attention::layer_norm(tape, x, &LayerNormParams::bind(self.p, "dec.ln_f")?)
    }

    /// `BN(feat ⊙ sigmoid(gate))` over the flattened `(B·L, d)` view.
    pub fn excitation(
        &self,
        tape: &mut Tape,
        h: Var,
        mode: BnMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = tape.value(h).shape().to_vec();
        let d = *shape.last().unwrap_or(&0);
        let rows = tape.value(h).numel() / d.max(1);
        let flat = tape.reshape(h, [rows, d])?;
        let feat = attention::linear(tape, flat, &Linear::bind(self.p, "eb.feat")?)?;
        let gate = attention::linear(tape, flat, &Linear::bind(self.p, "eb.gate")?)?;
        let gate = tape.sigmoid(gate)?;
        let m = tape.mul(feat, gate)?;
        let (gamma, beta) = (self.p.get("eb.bn.gamma")?, self.p.get("eb.bn.beta")?);
        let (y, stats) = match mode {
            BnMode::Train => {
                let (y, s) = tape.batch_norm_train(m, gamma, beta, BN_EPS)?;
                (y, Some(s))
            }
            BnMode::Eval { mean, var } => (
                tape.batch_norm_eval(m, gamma, beta, mean, var, BN_EPS)?,
                None,
            ),
        };
        Ok((tape.reshape(y, shape)?, stats))
    }

    /// Mean-pool over positions, dropout, linear → logits `[.., n_classes]`.
    pub fn classify(
        &self,
        tape: &mut Tape,
        h: Var,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<Var> {
        let axis = tape.value(h).rank() - 2;
        let pooled = tape.mean(h, axis)?;
        let dropped = tape.dropout(pooled, self.cfg.dropout_p, training, rng)?;
        if tape.value(dropped).rank() == 1 {
            let d = tape.value(dropped).numel();
            let row = tape.reshape(dropped, [1, d])?;
            let out = attention::linear(tape, row, &Linear::bind(self.p, "head")?)?;
            return tape.reshape(out, [self.cfg.n_classes]);
        }
        attention::linear(tape, dropped, &Linear::bind(self.p, "head")?)
    }

    /// Full composition up to logits `[B, n_classes]`.
    pub fn logits(
        &self,
        tape: &mut Tape,
        input: &ModelInput,
        training: bool,
        bn: BnMode,
        rng: &mut RngStream,
    ) -> Result<(Var, Option<BatchStats>)> {
        let patches = tape.constant(input.patches.clone());
        let img = self.encode_image(tape, patches)?;
        let txt = self.encode_text(tape, &input.ids, &input.pad, img)?;
        let mut h = self.decode(tape, txt)?;
        let mut stats = None;
        if self.cfg.use_eb {
            let (y, s) = self.excitation(tape, h, bn)?;
            h = y;
            stats = s;
        }
        Ok((self.classify(tape, h, training, rng)?, stats))
    }
}

/// Parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct PitVqaNet {
    config: ModelConfig,
    params: ParamStore,
    buffers: ParamStore,
}

/// Result of one training-mode forward/backward pass.
#[derive(Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub logits: Tensor,
    pub grads: crate::autograd::Gradients,
    pub bn_stats: Option<BatchStats>,
}

impl PitVqaNet {
    /// Random initialisation: weights and embeddings ~ N(0, 0.02²), biases
    /// and β zero, γ one. Deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::from_specs(&config.param_specs(), config.seed);
        let mut buffers = ParamStore::new();
        if config.use_eb {
            buffers.insert(RUNNING_MEAN, Tensor::zeros([config.d_model]));
            buffers.insert(RUNNING_VAR, Tensor::ones([config.d_model]));
        }
        Ok(PitVqaNet {
            config,
            params,
            buffers,
        })
    }

    /// Reassembles a network from stored tensors, checking names and shapes.
    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore,
        buffers: ParamStore,
    ) -> Result<Self> {
        let fresh = Self::new(config)?;
        for (store, reference) in [(&params, &fresh.params), (&buffers, &fresh.buffers)] {
            if store.len() != reference.len() {
                return Err(Error::ConfigMismatch(format!(
                    "expected {} tensors, found {}",
                    reference.len(),
                    store.len()
                )));
            }
            for (name, t) in reference.iter() {
                let got = store
                    .get(name)
                    .map_err(|_| Error::ConfigMismatch(format!("missing tensor {name}")))?;
                if got.shape() != t.shape() {
                    return Err(Error::ConfigMismatch(format!(
                        "{name} has shape {:?}, config implies {:?}",
                        got.shape(),
                        t.shape()
                    )));
                }
            }
        }
        Ok(PitVqaNet {
            config: fresh.config,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore {
        &mut self.buffers
    }

    fn eval_bn(&self) -> Result<BnMode<'_>> {
        if !self.config.use_eb {
            return Ok(BnMode::Train);
        }
        Ok(BnMode::Eval {
            mean: self.buffers.get(RUNNING_MEAN)?.data(),
            var: self.buffers.get(RUNNING_VAR)?.data(),
        })
    }

    /// Eval-mode logits `[B, n_classes]`.
    pub fn logits(&self, input: &ModelInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let g = Graph::new(&self.config, &bound);
        let mut rng = RngStream::new(0);
        let (l, _) = g.logits(&mut tape, input, false, self.eval_bn()?, &mut rng)?;
        Ok(tape.value(l).clone())
    }

    /// Eval-mode class probabilities `[B, n_classes]`.
    pub fn probabilities(&self, input: &ModelInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let l = tape.constant(self.logits(input)?);
        let p = tape.softmax(l, 1)?;
        Ok(tape.value(p).clone())
    }

    /// Eval-mode probabilities `[n_classes]` for one image and question.
    pub fn forward(&self, image: &Tensor, ids: &[usize], pad: &[bool]) -> Result<Tensor> {
        let input = ModelInput::from_parts(&self.config, &[image], &[ids], &[pad])?;
        let p = self.probabilities(&input)?;
        p.reshape([self.config.n_classes])
    }

    /// Training-mode loss, logits and parameter gradients for a batch.
    pub fn train_step(
        &self,
        input: &ModelInput,
        targets: &[usize],
        rng: &mut RngStream,
    ) -> Result<StepOutput> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let g = Graph::new(&self.config, &bound);
        let (logits, bn_stats) = g.logits(&mut tape, input, true, BnMode::Train, rng)?;
        let loss = tape.cross_entropy(logits, targets)?;
        let grads = tape.backward(loss)?;
        Ok(StepOutput {
            loss: tape.value(loss).item()?,
            logits: tape.value(logits).clone(),
            grads,
            bn_stats,
        })
    }

    /// Exponential moving update of the batch-norm running statistics.
    pub fn update_running_stats(&mut self, stats: &BatchStats) -> Result<()> {
        for (name, batch) in [
            (RUNNING_MEAN, &stats.mean),
            (RUNNING_VAR, &stats.var_unbiased),
        ] {
            let buf = self.buffers.get_mut(name)?;
            for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
        Ok(())
    }

    /// Sets the excitation block to an exact pass-through in eval mode:
    /// identity feature map, gate saturated at `sigmoid(30)`, and running
    /// statistics for which the batch-norm scale is exactly one.
    pub fn neutralize_eb(&mut self) -> Result<()> {
        let d = self.config.d_model;
        self.params.set("eb.feat.w", Tensor::eye(d))?;
        self.params.set("eb.feat.b", Tensor::zeros([d]))?;
        self.params.set("eb.gate.w", Tensor::zeros([d, d]))?;
        self.params.set("eb.gate.b", Tensor::full([d], 30.0))?;
        self.params.set("eb.bn.gamma", Tensor::ones([d]))?;
        self.params.set("eb.bn.beta", Tensor::zeros([d]))?;
        self.buffers.set(RUNNING_MEAN, Tensor::zeros([d]))?;
        self.buffers
            .set(RUNNING_VAR, Tensor::full([d], 1.0 - BN_EPS))?;
        Ok(())
    }

    /// Runs a single eval-mode stage function on a fresh tape.
    fn stage<F>(&self, f: F) -> Result<Tensor>
    where
        F: FnOnce(&Graph, &mut Tape) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let g = Graph::new(&self.config, &bound);
        let v = f(&g, &mut tape)?;
        Ok(tape.value(v).clone())
    }

    /// `[C, H, W]` image → `[N, d]` features.
    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        let patches = patchify(image, self.config.patch_size)?;
        let (n, pd) = (patches.shape()[0], patches.shape()[1]);
        let out = self.stage(|g, t| {
            let x = t.constant(patches.reshape([1, n, pd])?);
            g.encode_image(t, x)
        })?;
        out.reshape([n, self.config.d_model])
    }

    /// One question against `[N, d]` image features → `[L, d]`.
    pub fn encode_grounded_text(
        &self,
        ids: &[usize],
        pad: &[bool],
        image_feats: &Tensor,
    ) -> Result<Tensor> {
        let s = image_feats.shape().to_vec();
        let out = self.stage(|g, t| {
            let img = t.constant(image_feats.reshape([1, s[0], s[1]])?);
            g.encode_text(t, ids, pad, img)
        })?;
        out.reshape([ids.len(), self.config.d_model])
    }

    /// `[L, d]` → `[L, d]` decoder hidden states.
    pub fn decode(&self, grounded: &Tensor) -> Result<Tensor> {
        self.stage(|g, t| {
            let x = t.constant(grounded.clone());
            g.decode(t, x)
        })
    }

    /// `[L, d]` → `[L, d]`; eval mode uses the running statistics.
    pub fn excitation_block(&self, h: &Tensor, train: bool) -> Result<Tensor> {
        let bn = if train {
            BnMode::Train
        } else {
            self.eval_bn()?
        };
        self.stage(|g, t| {
            let x = t.constant(h.clone());
            g.excitation(t, x, bn).map(|(y, _)| y)
        })
    }

    /// `[L, d]` → logits `[n_classes]`.
    pub fn classify(&self, h: &Tensor, training: bool, rng: &mut RngStream) -> Result<Tensor> {
        self.stage(|g, t| {
            let x = t.constant(h.clone());
            g.classify(t, x, training, rng)
        })
    }
}
