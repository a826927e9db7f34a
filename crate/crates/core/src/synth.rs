//! Procedural "natural-looking" images for desk-scale experiments: smooth
//! colour gradients, a few soft-edged shapes and mild sensor-like texture.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::Dataset;
use crate::rng::Rng;
use crate::tensor::{ImageTensor, ValueDomain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Standard deviation of per-pixel texture noise in u8 levels.
    pub texture_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            channels: 3,
            shapes_min: 2,
            shapes_max: 4,
            texture_sigma: 6.0,
        }
    }
}

fn color(rng: &mut Rng, channels: usize) -> Vec<f64> {
    (0..channels).map(|_| rng.uniform_in(40.0, 215.0)).collect()
}

fn smoothstep(edge: f64) -> f64 {
    // edge: signed distance to the boundary in pixels, positive inside
    let t = (edge / 1.5 + 0.5).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// One synthetic image in the u8 domain.
pub fn synth_image(cfg: &SynthConfig, rng: &mut Rng) -> Result<ImageTensor> {
    let (w, h, c) = (cfg.width, cfg.height, cfg.channels);
    let c0 = color(rng, c);
    let c1 = color(rng, c);
    let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut buf = vec![0.0; c * w * h];
    let diag = ((w * w + h * h) as f64).sqrt();
    for y in 0..h {
        for x in 0..w {
            let t = ((x as f64 - w as f64 / 2.0) * dx + (y as f64 - h as f64 / 2.0) * dy) / diag
                + 0.5;
            for ch in 0..c {
                buf[(ch * h + y) * w + x] = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
        }
    }
    let span = cfg.shapes_max.saturating_sub(cfg.shapes_min) + 1;
    let n_shapes = cfg.shapes_min + rng.index(span);
    let scale = w.min(h) as f64;
    for _ in 0..n_shapes {
        let col = color(rng, c);
        let cx = rng.uniform_in(0.0, w as f64);
        let cy = rng.uniform_in(0.0, h as f64);
        let is_circle = rng.coin();
        let r = rng.uniform_in(0.1, 0.3) * scale;
        let (hw, hh) = (
            rng.uniform_in(0.08, 0.3) * scale,
            rng.uniform_in(0.08, 0.3) * scale,
        );
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if is_circle {
                    r - (px * px + py * py).sqrt()
                } else {
                    (hw - px.abs()).min(hh - py.abs())
                };
                let a = smoothstep(inside);
                if a > 0.0 {
                    for ch in 0..c {
                        let i = (ch * h + y) * w + x;
                        buf[i] = buf[i] * (1.0 - a) + col[ch] * a;
                    }
                }
            }
        }
    }
    if cfg.texture_sigma > 0.0 {
        for y in 0..h {
            for x in 0..w {
                let common = rng.normal() * cfg.texture_sigma;
                for ch in 0..c {
                    let i = (ch * h + y) * w + x;
                    buf[i] += common + 0.3 * cfg.texture_sigma * rng.normal();
                }
            }
        }
    }
    ImageTensor::from_real(c, w, h, ValueDomain::U8, buf)
}

/// `count` images with ids `img_0000`, ... drawn from forked streams of `seed`.
pub fn synth_dataset(cfg: &SynthConfig, count: usize, seed: u64) -> Result<Dataset> {
    let root = Rng::new(seed);
    let mut ids = Vec::with_capacity(count);
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = root.fork(i as u64);
        ids.push(format!("img_{i:04}"));
        images.push(synth_image(cfg, &mut rng)?);
    }
    Dataset::new(ids, images)
}

/// Uniform random-noise image in the u8 domain.
pub fn noise_image(channels: usize, width: usize, height: usize, rng: &mut Rng) -> ImageTensor {
    ImageTensor::from_fn(channels, width, height, ValueDomain::U8, |_, _, _| {
        rng.index(256) as f64
    })
    .expect("noise is in range")
}
