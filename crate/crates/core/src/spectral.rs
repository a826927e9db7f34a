//! Unnormalised 2D DFT, spectrum weights and the weighted frequency loss.
//!
//! `F(u, v) = sum_x sum_y X[x, y] * exp(-2πi (u x / w + v y / h))`, computed
//! per channel. Bins are stored like images: index `v * w + u`.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub bins: Vec<Complex64>,
}

impl Spectrum {
    pub fn get(&self, c: usize, u: usize, v: usize) -> Complex64 {
        self.bins[(c * self.height + v) * self.width + u]
    }

    pub fn channel(&self, c: usize) -> &[Complex64] {
        let n = self.width * self.height;
        &self.bins[c * n..(c + 1) * n]
    }

    fn ensure_same_extent(&self, other: &Spectrum) -> Result<()> {
        if (self.channels, self.width, self.height) != (other.channels, other.width, other.height)
        {
            return Err(Error::ShapeMismatch(format!(
                "spectra {}x{}x{} vs {}x{}x{}",
                self.channels, self.width, self.height, other.channels, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// In-place 2D transform of a `w x h` plane (`inverse` skips normalisation).
pub(crate) fn fft2_inplace(plane: &mut [Complex64], width: usize, height: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    for r in plane.chunks_exact_mut(width) {
        row.process(r);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    for u in 0..width {
        for v in 0..height {
            column[v] = plane[v * width + u];
        }
        col.process(&mut column);
        for v in 0..height {
            plane[v * width + u] = column[v];
        }
    }
}

/// Forward DFT of one real plane.
pub fn dft2_plane(values: &[f64], width: usize, height: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    fft2_inplace(&mut buf, width, height, false);
    buf
}

/// Inverse DFT (with the `1 / wh` factor) of one plane.
pub fn idft2_plane(bins: &[Complex64], width: usize, height: usize) -> Vec<Complex64> {
    let mut buf = bins.to_vec();
    fft2_inplace(&mut buf, width, height, true);
    let scale = 1.0 / (width * height) as f64;
    buf.iter_mut().for_each(|z| *z *= scale);
    buf
}

/// Per-channel unnormalised forward DFT of the image values as stored.
pub fn dft2(image: &ImageTensor) -> Result<Spectrum> {
    dft2_raw(image.data(), image.channels(), image.width(), image.height())
}

pub(crate) fn dft2_raw(data: &[f64], channels: usize, width: usize, height: usize) -> Result<Spectrum> {
    if data.is_empty() || width == 0 || height == 0 {
        return Err(Error::ShapeMismatch("empty image".into()));
    }
    let n = width * height;
    let mut bins = Vec::with_capacity(data.len());
    for c in 0..channels {
        bins.extend(dft2_plane(&data[c * n..(c + 1) * n], width, height));
    }
    Ok(Spectrum {
        channels,
        width,
        height,
        bins,
    })
}

/// `|a|^alpha` with `0^0 := 0`.
fn weight(modulus: f64, alpha: f64) -> f64 {
    if modulus == 0.0 {
        0.0
    } else {
        modulus.powf(alpha)
    }
}

/// `ω(u, v) = |F_x(u, v) - F_y(u, v)|^alpha` per channel and bin.
pub fn spectrum_weight(fx: &Spectrum, fy: &Spectrum, alpha: f64) -> Result<Vec<f64>> {
    fx.ensure_same_extent(fy)?;
    Ok(fx
        .bins
        .iter()
        .zip(&fy.bins)
        .map(|(a, b)| weight((a - b).norm(), alpha))
        .collect())
}

/// `(1 / wh) Σ ω |ΔF|²`, averaged over channels.
pub fn frequency_loss(x: &ImageTensor, x_tilde: &ImageTensor, alpha: f64) -> Result<f64> {
    x.ensure_same_shape(x_tilde)?;
    let fx = dft2(x)?;
    let fy = dft2(x_tilde)?;
    let w = spectrum_weight(&fx, &fy, alpha)?;
    Ok(weighted_sum(&fx, &fy, &w))
}

/// The frequency loss with a caller-supplied (detached) weight map.
pub fn frequency_loss_weighted(
    x: &ImageTensor,
    x_tilde: &ImageTensor,
    weights: &[f64],
) -> Result<f64> {
    x.ensure_same_shape(x_tilde)?;
    if weights.len() != x.len() {
        return Err(Error::ShapeMismatch("weight map size".into()));
    }
    Ok(weighted_sum(&dft2(x)?, &dft2(x_tilde)?, weights))
}

fn weighted_sum(fx: &Spectrum, fy: &Spectrum, w: &[f64]) -> f64 {
    let wh = (fx.width * fx.height) as f64;
    let total: f64 = fx
        .bins
        .iter()
        .zip(&fy.bins)
        .zip(w)
        .map(|((a, b), w)| w * (a - b).norm_sqr())
        .sum();
    total / wh / fx.channels as f64
}

/// Frequency loss on raw value buffers plus its gradient with respect to
/// `x_tilde`, treating ω as a constant: `grad = (2 / C) Re(IDFT(ω ΔF))`.
pub fn frequency_loss_grad_raw(
    x: &[f64],
    x_tilde: &[f64],
    channels: usize,
    width: usize,
    height: usize,
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    if x.len() != x_tilde.len() || x.len() != channels * width * height {
        return Err(Error::ShapeMismatch("frequency loss buffers".into()));
    }
    let n = width * height;
    let wh = n as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; x.len()];
    for c in 0..channels {
        let diff: Vec<f64> = x_tilde[c * n..(c + 1) * n]
            .iter()
            .zip(&x[c * n..(c + 1) * n])
            .map(|(a, b)| a - b)
            .collect();
        let mut d = dft2_plane(&diff, width, height);
        for z in d.iter_mut() {
            let m = z.norm();
            let w = weight(m, alpha);
            loss += w * m * m;
            *z *= w;
        }
        let back = idft2_plane(&d, width, height);
        for (g, z) in grad[c * n..(c + 1) * n].iter_mut().zip(back) {
            *g = 2.0 * z.re / channels as f64;
        }
    }
    Ok((loss / wh / channels as f64, grad))
}
