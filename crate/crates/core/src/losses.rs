//! Training losses of both attacks: masked regeneration, semantic, HIDE,
//! pixel (categorical), perceptual and SEEK.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::{FeatureExtractor, Shape};
use crate::nn::log_softmax;
use crate::rng::Rng;
use crate::spectral::frequency_loss_grad_raw;
use crate::tensor::{ImageTensor, Mask, SoftMask, ValueDomain};

/// Number of discrete values a pixel channel can take.
pub const BINS: usize = 256;

/// One u8 level expressed in the unit-float domain.
pub const LEVEL: f64 = 1.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
        ];
        if all.iter().all(|l| *l >= 0.0 && l.is_finite()) {
            Ok(())
        } else {
            Err(invalid("lambda", format!("weights must be finite and >= 0, got {all:?}")))
        }
    }
}

/// Form of the area term in the HIDE loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaTerm {
    /// `λ1 (w h - ‖M‖²)`: rewards masks that keep many pixels perturbable.
    #[default]
    Complement,
    /// `λ1 ‖M‖²`, the variant written in the training listing.
    SquaredNorm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedMse {
    pub value: f64,
    /// Set when the mask hid nothing; `value` is then 0.
    pub no_hidden: bool,
}

/// Mean squared error over hidden pixels only (all channels), in unit-float
/// scale.
pub fn hsn_loss(x: &ImageTensor, x_hat: &ImageTensor, mask: &Mask) -> Result<MaskedMse> {
    x.ensure_same_shape(x_hat)?;
    if mask.pixel_extent() != (x.width(), x.height()) {
        return Err(Error::ShapeMismatch("mask extent differs from image".into()));
    }
    let (a, b) = (x.to_unit(), x_hat.to_unit());
    let vis = mask.pixel_values();
    let hidden = vis.iter().filter(|v| **v == 0).count();
    if hidden == 0 {
        log::warn!("regeneration loss on a mask with no hidden cells");
        return Ok(MaskedMse {
            value: 0.0,
            no_hidden: true,
        });
    }
    let n = x.pixel_count();
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .filter(|(i, _)| vis[i % n] == 0)
        .map(|(_, (p, q))| (p - q) * (p - q))
        .sum();
    Ok(MaskedMse {
        value: sum / (hidden * x.channels()) as f64,
        no_hidden: false,
    })
}

fn ensure_unit(image: &ImageTensor, name: &'static str) -> Result<()> {
    if image.domain() == ValueDomain::UnitFloat {
        Ok(())
    } else {
        Err(invalid(name, "expected the unit_float domain"))
    }
}

/// `‖E(x) - E(x̃)‖²`.
pub fn semantic_loss(
    x: &ImageTensor,
    x_tilde: &ImageTensor,
    embedder: &dyn FeatureExtractor,
) -> Result<f64> {
    x.ensure_same_shape(x_tilde)?;
    embedder.extract(x)?.sq_distance(&embedder.extract(x_tilde)?)
}

/// Squared feature distance on raw buffers and its gradient w.r.t. `other`.
pub fn feature_distance_grad(
    reference: &[f64],
    other: &[f64],
    shape: Shape,
    net: &dyn FeatureExtractor,
) -> Result<(f64, Vec<f64>)> {
    let fa = net.features(reference, shape)?;
    let fb = net.features(other, shape)?;
    let loss = fa.sq_distance(&fb)?;
    let g = fb.zip_map(&fa, |b, a| 2.0 * (b - a));
    Ok((loss, net.pullback(other, shape, &g)?))
}

/// `±1` per channel-pixel, uniformly.
pub fn random_signs(len: usize, rng: &mut Rng) -> Vec<f64> {
    (0..len).map(|_| if rng.coin() { 1.0 } else { -1.0 }).collect()
}

fn check_soft(x: &ImageTensor, soft_len: usize, w: usize, h: usize) -> Result<()> {
    if (w, h) != (x.width(), x.height()) || soft_len != x.pixel_count() {
        return Err(Error::ShapeMismatch(format!(
            "soft mask {w}x{h} vs image {}x{}",
            x.width(),
            x.height()
        )));
    }
    Ok(())
}

/// `clamp(x + soft ⊙ signs / 255)` on raw buffers.
pub fn perturb_with_signs(x: &[f64], soft: &[f64], signs: &[f64]) -> Vec<f64> {
    let n = soft.len();
    x.iter()
        .zip(signs)
        .enumerate()
        .map(|(i, (v, s))| (v + soft[i % n] * s * LEVEL).clamp(0.0, 1.0))
        .collect()
}

/// `X̃ = X + soft ⊙ ε` with ε uniform on `{-1/255, +1/255}` per channel-pixel,
/// clamped to `[0, 1]`.
pub fn perturb_with_soft_mask(
    x: &ImageTensor,
    soft: &SoftMask,
    rng: &mut Rng,
) -> Result<ImageTensor> {
    ensure_unit(x, "x")?;
    check_soft(x, soft.values().len(), soft.width(), soft.height())?;
    let signs = random_signs(x.len(), rng);
    let (c, w, h) = x.shape();
    ImageTensor::new(
        c,
        w,
        h,
        ValueDomain::UnitFloat,
        perturb_with_signs(x.data(), soft.values(), &signs),
    )
}

fn area_term(energy: f64, pixels: f64, weights: &LossWeights, area: AreaTerm) -> f64 {
    match area {
        AreaTerm::Complement => weights.lambda1 * (pixels - energy),
        AreaTerm::SquaredNorm => weights.lambda1 * energy,
    }
}

/// `λ1 (w h - ‖M‖²) + λ2 L_frq(x, x̃) + λ3 L_smt(x, x̃)`.
#[allow(clippy::too_many_arguments)]
pub fn hide_loss(
    soft: &SoftMask,
    x: &ImageTensor,
    x_tilde: &ImageTensor,
    weights: &LossWeights,
    embedder: &dyn FeatureExtractor,
    alpha: f64,
    area: AreaTerm,
) -> Result<f64> {
    weights.validate()?;
    x.ensure_same_shape(x_tilde)?;
    check_soft(x, soft.values().len(), soft.width(), soft.height())?;
    let (xu, tu) = (x.to_unit(), x_tilde.to_unit());
    let mut loss = area_term(soft.energy(), x.pixel_count() as f64, weights, area);
    if weights.lambda2 != 0.0 {
        loss += weights.lambda2 * crate::spectral::frequency_loss(&xu, &tu, alpha)?;
    }
    if weights.lambda3 != 0.0 {
        loss += weights.lambda3 * semantic_loss(&xu, &tu, embedder)?;
    }
    Ok(loss)
}

/// HIDE loss of the perturbation `signs` under `soft`, and its gradient with
/// respect to the soft-mask values. ω is held constant; clamped entries pass
/// no gradient.
#[allow(clippy::too_many_arguments)]
pub fn hide_loss_grad(
    soft: &[f64],
    x: &ImageTensor,
    signs: &[f64],
    weights: &LossWeights,
    embedder: &dyn FeatureExtractor,
    alpha: f64,
    area: AreaTerm,
) -> Result<(f64, Vec<f64>)> {
    ensure_unit(x, "x")?;
    check_soft(x, soft.len(), x.width(), x.height())?;
    if signs.len() != x.len() {
        return Err(Error::ShapeMismatch("perturbation signs".into()));
    }
    let shape = x.shape();
    let (c, w, h) = shape;
    let n = w * h;
    let xt = perturb_with_signs(x.data(), soft, signs);
    let energy: f64 = soft.iter().map(|m| m * m).sum();
    let mut loss = area_term(energy, n as f64, weights, area);
    let sign = match area {
        AreaTerm::Complement => -2.0,
        AreaTerm::SquaredNorm => 2.0,
    };
    let mut grad: Vec<f64> = soft.iter().map(|m| sign * weights.lambda1 * m).collect();
    let mut dxt = vec![0.0; x.len()];
    if weights.lambda2 != 0.0 {
        let (l, g) = frequency_loss_grad_raw(x.data(), &xt, c, w, h, alpha)?;
        loss += weights.lambda2 * l;
        dxt.iter_mut().zip(g).for_each(|(d, g)| *d += weights.lambda2 * g);
    }
    if weights.lambda3 != 0.0 {
        let (l, g) = feature_distance_grad(x.data(), &xt, shape, embedder)?;
        loss += weights.lambda3 * l;
        dxt.iter_mut().zip(g).for_each(|(d, g)| *d += weights.lambda3 * g);
    }
    for i in 0..x.len() {
        let raw = x.data()[i] + soft[i % n] * signs[i] * LEVEL;
        if (0.0..=1.0).contains(&raw) {
            grad[i % n] += dxt[i] * signs[i] * LEVEL;
        }
    }
    Ok((loss, grad))
}

/// Unnormalised scores over [`BINS`] values per channel for one pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelLogits {
    pub channels: usize,
    pub values: Vec<f64>,
}

impl PixelLogits {
    pub fn new(channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * BINS {
            return Err(Error::ShapeMismatch(format!(
                "{channels} channels need {} logits, got {}",
                channels * BINS,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite logit".into()));
        }
        Ok(Self { channels, values })
    }

    pub fn uniform(channels: usize) -> Self {
        Self {
            channels,
            values: vec![0.0; channels * BINS],
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * BINS..(c + 1) * BINS]
    }
}

fn check_target(logits: &PixelLogits, target: &[usize]) -> Result<()> {
    if target.len() != logits.channels {
        return Err(Error::ShapeMismatch("target channel count".into()));
    }
    if let Some(t) = target.iter().find(|t| **t >= BINS) {
        return Err(Error::InvalidValue(format!("target value {t} outside [0, 255]")));
    }
    Ok(())
}

/// Per-channel cross-entropy against the true bin, summed over channels.
pub fn pixel_loss(logits: &PixelLogits, target: &[usize]) -> Result<f64> {
    check_target(logits, target)?;
    Ok((0..logits.channels)
        .map(|c| -log_softmax(logits.channel(c))[target[c]])
        .sum())
}

/// Pixel loss and its gradient `softmax - onehot` w.r.t. the logits.
pub fn pixel_loss_grad(logits: &PixelLogits, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_target(logits, target)?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.values.len());
    for c in 0..logits.channels {
        let ls = log_softmax(logits.channel(c));
        loss -= ls[target[c]];
        grad.extend(ls.iter().enumerate().map(|(b, l)| l.exp() - (b == target[c]) as u8 as f64));
    }
    Ok((loss, grad))
}

/// `‖A(x) - A(x̄)‖²` with the perceptual extractor `A`.
pub fn perceptual_loss(
    x: &ImageTensor,
    x_bar: &ImageTensor,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    x.ensure_same_shape(x_bar)?;
    extractor.extract(x)?.sq_distance(&extractor.extract(x_bar)?)
}

/// `λ4 L_pix + λ5 L_pct`.
pub fn seek_loss(
    logits: &PixelLogits,
    target: &[usize],
    x_prev_true: &ImageTensor,
    x_prev_pred: &ImageTensor,
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    weights.validate()?;
    let pix = pixel_loss(logits, target)?;
    let pct = if weights.lambda5 == 0.0 {
        x_prev_true.ensure_same_shape(x_prev_pred)?;
        0.0
    } else {
        perceptual_loss(x_prev_true, x_prev_pred, extractor)?
    };
    Ok(weights.lambda4 * pix + weights.lambda5 * pct)
}
