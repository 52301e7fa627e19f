//! Matched-seed comparison of the model with and without the excitation
//! block.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{validate_report_json, MetricsReport};
use crate::model::{ModelConfig, PitVqaNet};
use crate::train::{evaluate, Dataset, TrainConfig, Trainer};

/// Largest tolerated per-logit gap between the neutralised EB model and
/// the EB-free model.
pub const NEUTRAL_TOLERANCE: f64 = 1e-6;

const METRICS: [&str; 4] = [
    "accuracy",
    "balanced_accuracy",
    "macro_recall",
    "macro_fscore",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub steps: u64,
    pub eb_on: MetricsReport,
    pub eb_off: MetricsReport,
    /// `eb_on − eb_off` per headline metric.
    pub deltas: BTreeMap<String, f64>,
    pub step0_loss_eb_on: Option<f64>,
    pub step0_loss_eb_off: Option<f64>,
    /// Max |logit| difference between the trained EB-off model and the same
    /// weights with a neutralised excitation block inserted.
    pub neutralized_max_abs_logit_diff: f64,
}

fn headline(r: &MetricsReport) -> [f64; 4] {
    [
        r.accuracy,
        r.balanced_accuracy,
        r.macro_recall,
        r.macro_fscore,
    ]
}

/// Largest absolute logit difference between `off` (no EB) and a copy of
/// its weights carrying a neutralised excitation block.
pub fn neutralized_gap(off: &PitVqaNet, data: &Dataset, max_samples: usize) -> Result<f64> {
    if off.config().use_eb {
        return Err(Error::Contract(
            "neutralised comparison needs an EB-free model".into(),
        ));
    }
    let cfg = ModelConfig {
        use_eb: true,
        ..off.config().clone()
    };
    let mut on = PitVqaNet::new(cfg)?;
    for (name, t) in off.params().iter() {
        on.params_mut().set(name, t.clone())?;
    }
    on.neutralize_eb()?;
    let idx: Vec<usize> = (0..data.len().min(max_samples)).collect();
    let mut worst: f64 = 0.0;
    for part in idx.chunks(32) {
        let (input, _) = data.batch(off.config(), part)?;
        worst = worst.max(off.logits(&input)?.max_abs_diff(&on.logits(&input)?));
    }
    Ok(worst)
}

/// Trains `{use_eb = true, use_eb = false}` from the same seeds and data,
/// then evaluates both on `eval`.
pub fn ablation_run(
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &Dataset,
    eval: &Dataset,
) -> Result<AblationReport> {
    let mut nets = Vec::new();
    let mut reports = Vec::new();
    let mut step0 = Vec::new();
    for use_eb in [true, false] {
        let m = ModelConfig {
            use_eb,
            ..model.clone()
        };
        let t = TrainConfig {
            use_eb,
            ..train_cfg.clone()
        };
        let mut trainer = Trainer::new(PitVqaNet::new(m)?, t)?;
        trainer.run(train, |_| Ok(()))?;
        step0.push(trainer.log.first().map(|r| r.loss));
        reports.push(evaluate(&trainer.net, eval)?);
        nets.push(trainer.net);
    }
    let (eb_off, eb_on) = (
        reports.pop().expect("two runs"),
        reports.pop().expect("two runs"),
    );
    let classes = |r: &MetricsReport| r.per_class.iter().map(|c| c.class).collect::<Vec<_>>();
    if classes(&eb_on) != classes(&eb_off) {
        return Err(Error::Contract(
            "ablation reports cover different class sets".into(),
        ));
    }
    let deltas = METRICS
        .iter()
        .zip(headline(&eb_on).iter().zip(headline(&eb_off)))
        .map(|(k, (a, b))| (k.to_string(), a - b))
        .collect();
    let gap = neutralized_gap(&nets[1], eval, 256)?;
    Ok(AblationReport {
        seed: train_cfg.seed,
        steps: train_cfg.max_steps,
        eb_on,
        eb_off,
        deltas,
        step0_loss_eb_on: step0[0],
        step0_loss_eb_off: step0[1],
        neutralized_max_abs_logit_diff: gap,
    })
}

impl AblationReport {
    /// Plain-text side-by-side table.
    pub fn delta_table(&self) -> String {
        let mut s = format!(
            "{:<20} {:>10} {:>10} {:>10}\n",
            "metric", "eb_on", "eb_off", "delta"
        );
        for (k, (a, b)) in METRICS
            .iter()
            .zip(headline(&self.eb_on).iter().zip(headline(&self.eb_off)))
        {
            let _ = writeln!(s, "{k:<20} {a:>10.4} {b:>10.4} {:>+10.4}", a - b);
        }
        let _ = writeln!(
            s,
            "neutralised EB vs no EB: max |Δlogit| = {:.3e}",
            self.neutralized_max_abs_logit_diff
        );
        s
    }
}

/// Checks a serialized ablation report and both embedded metrics reports.
pub fn validate_ablation_json(v: &serde_json::Value) -> Result<()> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::Format("ablation report must be a JSON object".into()))?;
    for key in [
        "eb_on",
        "eb_off",
        "deltas",
        "neutralized_max_abs_logit_diff",
    ] {
        if !obj.contains_key(key) {
            return Err(Error::Format(format!(
                "ablation report lacks field {key:?}"
            )));
        }
    }
    validate_report_json(&obj["eb_on"])?;
    validate_report_json(&obj["eb_off"])?;
    serde_json::from_value::<AblationReport>(v.clone())
        .map_err(|e| Error::Format(format!("ablation schema: {e}")))?;
    Ok(())
}
