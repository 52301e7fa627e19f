//! Procedural 64×64 frame renderer.
//!
//! Layout on the 8×8 patch grid:
//! - background colour: phase
//! - patch row 1, columns 2–5: 4-bit code of `step + 1` (lit / unlit squares)
//! - five 16×16 slots: one glyph per instrument, colour × shape = identity
//! - 3-pixel border: 4-bit code of `note + 1` on top, right, bottom, left
//!
//! Gaussian pixel noise is added last and values are clamped to [0, 1].

use super::workflow::{frame_stream, FrameState};
use crate::tensor::Tensor;

pub const SIZE: usize = 64;
pub const CHANNELS: usize = 3;
pub const NOISE_STD: f64 = 0.05;
const BORDER: usize = 3;
const LIT: f32 = 0.95;
const UNLIT: f32 = 0.05;

pub const PHASE_COLOURS: [[f32; 3]; 4] = [
    [0.80, 0.35, 0.30],
    [0.30, 0.65, 0.35],
    [0.30, 0.40, 0.80],
    [0.70, 0.65, 0.25],
];

const GLYPH_COLOURS: [[f32; 3]; 6] = [
    [0.95, 0.10, 0.10],
    [0.10, 0.95, 0.10],
    [0.10, 0.10, 0.95],
    [0.95, 0.95, 0.10],
    [0.95, 0.10, 0.95],
    [0.10, 0.95, 0.95],
];

/// Top-left pixel of each 16×16 instrument slot, in position order.
pub const SLOT_ORIGINS: [(usize, usize); 5] = [(16, 8), (16, 40), (24, 24), (40, 8), (40, 40)];
pub const SLOT_SIZE: usize = 16;

/// Channel-major `f32` image.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl FrameImage {
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&v| f64::from(v)).collect();
        Tensor::new([CHANNELS, self.height, self.width], data)
            .expect("pixel buffer matches its dimensions")
    }

    /// Mean of each channel.
    pub fn channel_means(&self) -> [f64; 3] {
        let plane = self.width * self.height;
        let mut m = [0.0; 3];
        for (c, slot) in m.iter_mut().enumerate() {
            *slot = self.pixels[c * plane..(c + 1) * plane]
                .iter()
                .map(|&v| f64::from(v))
                .sum::<f64>()
                / plane as f64;
        }
        m
    }
}

struct Canvas {
    px: Vec<f32>,
}

impl Canvas {
    fn fill(&mut self, y0: usize, x0: usize, h: usize, w: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.iter().enumerate() {
            for y in y0..y0 + h {
                let row = c * SIZE * SIZE + y * SIZE;
                self.px[row + x0..row + x0 + w].fill(*v);
            }
        }
    }
}

fn draw_glyph(cv: &mut Canvas, instrument: usize, slot: usize) {
    let rgb = GLYPH_COLOURS[instrument % GLYPH_COLOURS.len()];
    let (sy, sx) = SLOT_ORIGINS[slot];
    let (y0, x0, n) = (sy + 2, sx + 2, SLOT_SIZE - 4);
    match instrument / GLYPH_COLOURS.len() {
        0 => cv.fill(y0, x0, n, n, rgb),
        1 => {
            cv.fill(y0, x0, 3, n, rgb);
            cv.fill(y0 + n - 3, x0, 3, n, rgb);
            cv.fill(y0, x0, n, 3, rgb);
            cv.fill(y0, x0 + n - 3, n, 3, rgb);
        }
        _ => {
            cv.fill(y0 + n / 2 - 2, x0, 4, n, rgb);
            cv.fill(y0, x0 + n / 2 - 2, n, 4, rgb);
        }
    }
}

fn level(bit: bool) -> [f32; 3] {
    let v = if bit { LIT } else { UNLIT };
    [v, v, v]
}

/// Renders a frame without noise.
pub fn render_clean(state: &FrameState) -> FrameImage {
    let mut cv = Canvas {
        px: vec![0.0; CHANNELS * SIZE * SIZE],
    };
    cv.fill(0, 0, SIZE, SIZE, PHASE_COLOURS[state.phase]);

    let code = state.step + 1;
    for bit in 0..4 {
        cv.fill(8, 16 + bit * 8, 8, 8, level(code >> bit & 1 == 1));
    }

    for &(inst, pos) in &state.instruments {
        draw_glyph(&mut cv, inst, pos);
    }

    let note = state.note + 1;
    cv.fill(0, 0, BORDER, SIZE, level(note & 1 == 1));
    cv.fill(0, SIZE - BORDER, SIZE, BORDER, level(note >> 1 & 1 == 1));
    cv.fill(SIZE - BORDER, 0, BORDER, SIZE, level(note >> 2 & 1 == 1));
    cv.fill(0, 0, SIZE, BORDER, level(note >> 3 & 1 == 1));

    FrameImage {
        width: SIZE,
        height: SIZE,
        pixels: cv.px,
    }
}

/// Deterministic rendering with seeded noise σ = 0.05, clamped to [0, 1].
pub fn render_frame(state: &FrameState, seed: u64) -> FrameImage {
    let mut img = render_clean(state);
    let mut rng = frame_stream(seed, state.procedure_id, state.frame_index).split("render");
    for v in img.pixels.iter_mut() {
        *v = (f64::from(*v) + NOISE_STD * rng.normal()).clamp(0.0, 1.0) as f32;
    }
    img
}
