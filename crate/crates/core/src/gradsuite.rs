//! Finite-difference checks for every layer type and the full model loss.

use std::time::Instant;

use serde::Serialize;

use crate::attention::{
    self, attention_specs, block_specs, decoder_block, encoder_block, feed_forward, ffn_specs,
    grounded_block_specs, grounded_encoder_block, multi_head_attention, AttentionParams,
    BlockParams, FeedForward, GroundedBlockParams, LayerNormParams, Linear, MaskSpec,
};
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::gradcheck::{grad_check_many, CheckMode, DEFAULT_H};
use crate::model::{BnMode, Graph, ModelConfig, ModelInput};
use crate::params::{linear_specs, norm_specs, Bound, ParamSpec, ParamStore};
use crate::rng::{derive_seed_str, RngStream};
use crate::tensor::Tensor;

/// Acceptance threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Std of the noise added to initial parameters before checking.
const LAYER_NOISE: f64 = 0.3;
const MODEL_NOISE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCheck {
    pub layer: String,
    pub max_rel_error: f64,
    pub mode: String,
    pub seconds: f64,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn randn(rng: &mut RngStream, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| std * rng.normal())
}

/// Parameters for a checked layer: the usual init plus noise, so that zero
/// biases and unit gains are exercised away from their special values.
fn noisy_params(specs: &[ParamSpec], seed: u64, noise: f64) -> ParamStore {
    let mut store = ParamStore::from_specs(specs, seed);
    let mut rng = RngStream::new(derive_seed_str(seed, "noise"));
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let t = store.get_mut(&n).expect("listed");
        for v in t.data_mut() {
            *v += noise * rng.normal();
        }
    }
    store
}

/// `Σ out ⊙ C` with a fixed random `C`, so every output coordinate matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let c = randn(&mut RngStream::new(seed), &shape, 1.0);
    let c = tape.constant(c);
    let p = tape.mul(out, c)?;
    tape.sum(p)
}

/// Runs `f(tape, bound params, extra inputs)` under a gradient check over
/// both the extra inputs and every parameter tensor.
fn check_with_params<F>(
    name: &str,
    specs: &[ParamSpec],
    noise: f64,
    extra: Vec<Tensor>,
    mode: CheckMode,
    f: F,
) -> Result<LayerCheck>
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
{
    let start = Instant::now();
    let store = noisy_params(specs, derive_seed_str(11, name), noise);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let n_extra = extra.len();
    let mut inputs = extra;
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let proj_seed = derive_seed_str(13, name);
    let report = grad_check_many(
        |tape, vars| {
            let bound: Bound = names
                .iter()
                .cloned()
                .zip(vars[n_extra..].iter().copied())
                .collect();
            let out = f(tape, &bound, &vars[..n_extra])?;
            if tape.value(out).numel() == 1 {
                Ok(out)
            } else {
                project(tape, out, proj_seed)
            }
        },
        &inputs,
        DEFAULT_H,
        mode,
    )?;
    Ok(LayerCheck {
        layer: name.to_string(),
        max_rel_error: report.max_rel_error,
        mode: match mode {
            CheckMode::Elementwise => "elementwise".into(),
            CheckMode::Directional { dirs, .. } => format!("directional x{dirs}"),
        },
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Small-dimension checks of each building block, every coordinate
/// perturbed.
pub fn layer_checks() -> Result<Vec<LayerCheck>> {
    let mut rng = RngStream::new(2024);
    let (d, h, l, n) = (8, 2, 5, 4);
    let ew = CheckMode::Elementwise;
    let mut out = Vec::new();

    out.push(check_with_params(
        "linear",
        &linear_specs("lin", 6, 4, true),
        LAYER_NOISE,
        vec![randn(&mut rng, &[3, 6], 1.0)],
        ew,
        |t, p, x| attention::linear(t, x[0], &Linear::bind(p, "lin")?),
    )?);
    out.push(check_with_params(
        "layer_norm",
        &norm_specs("ln", 6),
        LAYER_NOISE,
        vec![randn(&mut rng, &[3, 6], 1.0)],
        ew,
        |t, p, x| attention::layer_norm(t, x[0], &LayerNormParams::bind(p, "ln")?),
    )?);
    out.push(check_with_params(
        "softmax",
        &[],
        LAYER_NOISE,
        vec![randn(&mut rng, &[3, 5], 1.0)],
        ew,
        |t, _, x| t.softmax(x[0], 1),
    )?);
    out.push(check_with_params(
        "gelu",
        &[],
        LAYER_NOISE,
        vec![randn(&mut rng, &[12], 1.5)],
        ew,
        |t, _, x| t.gelu(x[0]),
    )?);
    out.push(check_with_params(
        "sigmoid",
        &[],
        LAYER_NOISE,
        vec![randn(&mut rng, &[12], 1.5)],
        ew,
        |t, _, x| t.sigmoid(x[0]),
    )?);
    out.push(check_with_params(
        "batch_norm",
        &norm_specs("bn", 4),
        LAYER_NOISE,
        vec![randn(&mut rng, &[6, 4], 1.0)],
        ew,
        |t, p, x| {
            let (y, _) = t.batch_norm_train(x[0], p.get("bn.gamma")?, p.get("bn.beta")?, 1e-5)?;
            Ok(y)
        },
    )?);
    out.push(check_with_params(
        "embedding",
        &[],
        LAYER_NOISE,
        vec![randn(&mut rng, &[7, 4], 1.0)],
        ew,
        |t, _, x| t.embedding(x[0], &[3, 0, 3, 6]),
    )?);
    out.push(check_with_params(
        "cross_entropy",
        &[],
        LAYER_NOISE,
        vec![randn(&mut rng, &[4, 6], 2.0)],
        ew,
        |t, _, x| t.cross_entropy(x[0], &[0, 5, 2, 2]),
    )?);

    let xs = randn(&mut rng, &[2, l, d], 1.0);
    let pad = vec![true, true, true, false, false, true, true, true, true, true];
    out.push(check_with_params(
        "multi_head_attention",
        &attention_specs("att", d),
        LAYER_NOISE,
        vec![xs.clone(), randn(&mut rng, &[2, n, d], 1.0)],
        ew,
        |t, p, x| {
            let ap = AttentionParams::bind(p, "att", h)?;
            multi_head_attention(t, x[0], x[1], &ap, &MaskSpec::None)
        },
    )?);
    let pad_c = pad.clone();
    out.push(check_with_params(
        "masked_self_attention",
        &attention_specs("att", d),
        LAYER_NOISE,
        vec![xs.clone()],
        ew,
        move |t, p, x| {
            let ap = AttentionParams::bind(p, "att", h)?;
            multi_head_attention(t, x[0], x[0], &ap, &MaskSpec::CausalPadding(pad_c.clone()))
        },
    )?);
    out.push(check_with_params(
        "feed_forward",
        &ffn_specs("ffn", d),
        LAYER_NOISE,
        vec![xs.clone()],
        ew,
        |t, p, x| feed_forward(t, x[0], &FeedForward::bind(p, "ffn")?),
    )?);
    out.push(check_with_params(
        "encoder_block",
        &block_specs("blk", d),
        LAYER_NOISE,
        vec![xs.clone()],
        ew,
        |t, p, x| encoder_block(t, x[0], &BlockParams::bind(p, "blk", h)?, &MaskSpec::None),
    )?);
    out.push(check_with_params(
        "decoder_block",
        &block_specs("blk", d),
        LAYER_NOISE,
        vec![xs.clone()],
        ew,
        |t, p, x| decoder_block(t, x[0], &BlockParams::bind(p, "blk", h)?),
    )?);
    let pad_g = pad.clone();
    out.push(check_with_params(
        "grounded_encoder_block",
        &grounded_block_specs("gb", d),
        LAYER_NOISE,
        vec![xs.clone(), randn(&mut rng, &[2, n, d], 1.0)],
        ew,
        move |t, p, x| {
            let gp = GroundedBlockParams::bind(p, "gb", h)?;
            grounded_encoder_block(t, x[0], x[1], &gp, &MaskSpec::Padding(pad_g.clone()))
        },
    )?);

    let mini = ModelConfig {
        d_model: d,
        n_heads: h,
        ..ModelConfig::desk()
    };
    let mut eb_specs = linear_specs("eb.feat", d, d, true);
    eb_specs.extend(linear_specs("eb.gate", d, d, true));
    eb_specs.extend(norm_specs("eb.bn", d));
    out.push(check_with_params(
        "excitation_block",
        &eb_specs,
        LAYER_NOISE,
        vec![xs.clone()],
        ew,
        |t, p, x| {
            Graph::new(&mini, p)
                .excitation(t, x[0], BnMode::Train)
                .map(|(y, _)| y)
        },
    )?);
    out.push(check_with_params(
        "patch_embedding",
        &linear_specs("img.patch", 12, d, true),
        LAYER_NOISE,
        vec![randn(&mut rng, &[1, n, 12], 1.0)],
        ew,
        |t, p, x| attention::linear(t, x[0], &Linear::bind(p, "img.patch")?),
    )?);
    Ok(out)
}

/// Directional check of the cross-entropy loss of the full model against
/// every parameter tensor, on a small batch in training mode with a fixed
/// dropout mask. A single sample would not do: batch statistics over one
/// sample's rows followed by mean pooling make the pooled vector equal β.
pub fn model_check(cfg: &ModelConfig, dirs: usize) -> Result<LayerCheck> {
    const BATCH: usize = 3;
    let mut rng = RngStream::new(derive_seed_str(cfg.seed, "gradcheck"));
    let l = cfg.max_question_len;
    let images: Vec<Tensor> = (0..BATCH)
        .map(|_| {
            Tensor::from_fn([cfg.n_channels, cfg.image_size, cfg.image_size], |_| {
                rng.uniform()
            })
        })
        .collect();
    let mut ids = Vec::new();
    let mut pad = Vec::new();
    for b in 0..BATCH {
        let real = l - b - 1;
        ids.push(
            (0..l)
                .map(|i| {
                    if i < real {
                        2 + rng.below(cfg.vocab_size - 2)
                    } else {
                        0
                    }
                })
                .collect::<Vec<_>>(),
        );
        pad.push((0..l).map(|i| i < real).collect::<Vec<_>>());
    }
    let input = ModelInput::from_parts(
        cfg,
        &images.iter().collect::<Vec<_>>(),
        &ids.iter().map(Vec::as_slice).collect::<Vec<_>>(),
        &pad.iter().map(Vec::as_slice).collect::<Vec<_>>(),
    )?;
    let targets: Vec<usize> = (0..BATCH).map(|_| rng.below(cfg.n_classes)).collect();
    let cfg_c = cfg.clone();
    let mut check = check_with_params(
        "full_model_loss",
        &cfg.param_specs(),
        MODEL_NOISE,
        vec![],
        CheckMode::Directional {
            dirs,
            seed: derive_seed_str(cfg.seed, "directions"),
        },
        move |t, p, _| {
            let mut drop_rng = RngStream::new(5);
            let g = Graph::new(&cfg_c, p);
            let (logits, _) = g.logits(t, &input, true, BnMode::Train, &mut drop_rng)?;
            t.cross_entropy(logits, &targets)
        },
    )?;
    check.layer = format!("full_model_loss ({} decoder layers)", cfg.n_decoder_layers);
    Ok(check)
}

/// Every layer check followed by the full-model check.
pub fn run_suite(cfg: &ModelConfig) -> Result<Vec<LayerCheck>> {
    let mut all = layer_checks()?;
    all.push(model_check(cfg, 3)?);
    Ok(all)
}
