//! Latent per-frame surgical state and the procedure walk that emits it.

use serde::{Deserialize, Serialize};

use super::taxonomy::{phase_of_step, INSTRUMENTS, NOTES, POSITIONS, STEPS};
use crate::rng::{derive_seed, RngStream};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameState {
    pub procedure_id: u32,
    pub frame_index: u32,
    pub phase: usize,
    /// Global step number, always inside the phase's step range.
    pub step: usize,
    /// `(instrument, position)` pairs with distinct instruments and positions.
    pub instruments: Vec<(usize, usize)>,
    pub note: usize,
}

impl FrameState {
    pub fn quantity(&self) -> usize {
        self.instruments.len()
    }
}

/// Probabilities of 0, 1 and 2 instruments in a frame.
pub const INSTRUMENT_COUNT_WEIGHTS: [f64; 3] = [0.25, 0.5, 0.25];
/// Chance that an instrument is drawn from the current step's preferred set.
pub const PREFERRED_PROB: f64 = 0.75;
/// Chance the operation note carries over from the previous frame.
pub const NOTE_STICKINESS: f64 = 0.9;

/// Three instruments typical of a step.
pub fn preferred_instruments(step: usize) -> [usize; 3] {
    let n = INSTRUMENTS.len();
    [(step * 5) % n, (step * 5 + 7) % n, (step * 5 + 11) % n]
}

/// Stream for one frame: hash of (seed, procedure, frame).
pub fn frame_stream(seed: u64, procedure_id: u32, frame_index: u32) -> RngStream {
    RngStream::new(derive_seed(
        seed,
        &[u64::from(procedure_id), u64::from(frame_index)],
    ))
}

/// Left-to-right walk through the 15 steps with sticky operation notes.
///
/// The walk advances one step per frame with probability
/// `min(1, 20 / n_frames)`, so long procedures still traverse every phase.
pub fn sample_procedure(seed: u64, procedure_id: u32, n_frames: usize) -> Vec<FrameState> {
    let p_adv = (20.0 / n_frames.max(1) as f64).min(1.0);
    let mut out = Vec::with_capacity(n_frames);
    let mut step = 0usize;
    let mut note = 0usize;
    for f in 0..n_frames {
        let mut rng = frame_stream(seed, procedure_id, f as u32).split("workflow");
        if f == 0 {
            note = rng.below(NOTES.len());
        } else {
            if step + 1 < STEPS.len() && rng.bernoulli(p_adv) {
                step += 1;
            }
            if !rng.bernoulli(NOTE_STICKINESS) {
                note = rng.below(NOTES.len());
            }
        }
        let count = rng.weighted(&INSTRUMENT_COUNT_WEIGHTS);
        let preferred = preferred_instruments(step);
        let mut instruments: Vec<(usize, usize)> = Vec::with_capacity(count);
        let mut positions: Vec<usize> = (0..POSITIONS.len()).collect();
        rng.shuffle(&mut positions);
        while instruments.len() < count {
            let inst = if rng.bernoulli(PREFERRED_PROB) {
                preferred[rng.below(preferred.len())]
            } else {
                rng.below(INSTRUMENTS.len())
            };
            if instruments.iter().all(|(i, _)| *i != inst) {
                let pos = positions[instruments.len()];
                instruments.push((inst, pos));
            }
        }
        out.push(FrameState {
            procedure_id,
            frame_index: f as u32,
            phase: phase_of_step(step),
            step,
            instruments,
            note,
        });
    }
    out
}
