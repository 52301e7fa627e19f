//! Central-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Default base step; the per-coordinate step is `h · max(1, |xᵢ|)`.
pub const DEFAULT_H: f64 = 1e-5;

/// `|a − b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CheckMode {
    /// Perturb every coordinate of every input.
    Elementwise,
    /// Compare directional derivatives along `dirs` random unit directions
    /// per input. Cost is independent of the input size.
    Directional { dirs: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

fn analytic<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| grads.get(*v).cloned().unwrap_or_else(|| x.zeros_like()))
        .collect())
}

/// Checks the gradient of a scalar function of several tensors.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    mode: CheckMode,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let grads = analytic(&f, inputs)?;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, g) in grads.iter().enumerate() {
        let mut worst: f64 = 0.0;
        match mode {
            CheckMode::Elementwise => {
                for j in 0..inputs[i].numel() {
                    let x0 = inputs[i].data()[j];
                    let step = h * x0.abs().max(1.0);
                    work[i].data_mut()[j] = x0 + step;
                    let fp = eval(&f, &work)?;
                    work[i].data_mut()[j] = x0 - step;
                    let fm = eval(&f, &work)?;
                    work[i].data_mut()[j] = x0;
                    let numeric = (fp - fm) / (2.0 * step);
                    worst = worst.max(relative_error(g.data()[j], numeric));
                }
            }
            CheckMode::Directional { dirs, seed } => {
                let mut rng = RngStream::new(seed).split_keys(&[i as u64]);
                let scale = inputs[i].data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
                let step = h * scale;
                for _ in 0..dirs {
                    let mut u: Vec<f64> = (0..g.numel()).map(|_| rng.normal()).collect();
                    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                    u.iter_mut().for_each(|v| *v /= norm);
                    let along: f64 = g.data().iter().zip(&u).map(|(a, b)| a * b).sum();
                    let base = inputs[i].data();
                    let shifted = |sign: f64| {
                        let data = base
                            .iter()
                            .zip(&u)
                            .map(|(x, d)| x + sign * step * d)
                            .collect();
                        Tensor::new(inputs[i].shape().to_vec(), data)
                    };
                    work[i] = shifted(1.0)?;
                    let fp = eval(&f, &work)?;
                    work[i] = shifted(-1.0)?;
                    let fm = eval(&f, &work)?;
                    work[i] = inputs[i].clone();
                    let numeric = (fp - fm) / (2.0 * step);
                    worst = worst.max(relative_error(along, numeric));
                }
            }
        }
        per_input.push(worst);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_error,
    })
}

/// Single-input elementwise check; returns the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let r = grad_check_many(
        |t, v| f(t, v[0]),
        std::slice::from_ref(x),
        h,
        CheckMode::Elementwise,
    )?;
    Ok(r.max_rel_error)
}
