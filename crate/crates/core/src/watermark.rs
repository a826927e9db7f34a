//! Toy watermarkers for the two defence classes, and the image
//! manipulations used to probe their robustness.
//!
//! Both schemes work on the ITU-R 601 luminance plane in 0..255 scale and
//! add the same offset to every colour channel.
//!
//! * Spread spectrum ([`Band::HighFrequency`]): one carrier bin per payload
//!   bit in the outer half of the spectrum. Bit 1 raises the carrier
//!   modulus by δ, bit 0 lowers it by δ (floored at 0). A bit reads as 1
//!   when the carrier modulus exceeds the median modulus of its Chebyshev
//!   neighbourhood.
//! * Ring ([`Band::LowFrequencyRing`]): bins on low-frequency rings are
//!   split into key-shuffled groups. Each group carries one pattern value
//!   `p ∈ {0, 1}`, written as modulus `p·H` with key-derived phases. The
//!   detector projects each bin onto its key phase, averages per group and
//!   maps the result to `[0, 1]` through a calibrated ramp.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::{from_dynamic, to_dynamic};
use crate::metrics::{self, ID_THRESHOLD};
use crate::rng::Rng;
use crate::spectral::{dft2_plane, idft2_plane};
use crate::tensor::{ImageTensor, ValueDomain};

/// Default payload length of the spread-spectrum scheme.
pub const SS_BITS: usize = 32;
/// Default number of pattern groups of the ring scheme.
pub const RING_GROUPS: usize = 8;
/// Minimum Chebyshev spacing between spread-spectrum carriers.
pub const CARRIER_SPACING: i64 = 4;
/// Carriers keep at least this many bins away from both frequency axes.
pub const AXIS_GUARD: i64 = 3;
/// Chebyshev radius of the reference neighbourhood of a carrier.
pub const REFERENCE_RADIUS: i64 = 2;
/// Default δ per pixel of image area (δ = `SS_STRENGTH_PER_PIXEL · w · h`).
pub const SS_STRENGTH_PER_PIXEL: f64 = 0.3;
/// Default H per pixel of image area for the ring scheme.
pub const RING_STRENGTH_PER_PIXEL: f64 = 1.5;
/// Inner and outer ring radii, in frequency bins.
pub const RING_RADII: (f64, f64) = (1.5, 4.5);
/// Projection values (as fractions of H) mapped to pattern value 0 and 1.
pub const RING_RAMP: (f64, f64) = (0.3, 0.6);
/// Refinement passes of the spread-spectrum embedder.
const SS_PASSES: usize = 3;
/// Refinement passes that re-impose the ring after clamping and rounding.
const RING_PASSES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    HighFrequency,
    LowFrequencyRing,
}

/// One frequency bin `(u, v)`; its conjugate partner is implied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Carrier {
    pub u: usize,
    pub v: usize,
    /// Payload bit (spread spectrum) or pattern group (ring).
    pub slot: usize,
    /// Key phase; only used by the ring scheme.
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkKey {
    pub seed: u64,
    pub band: Band,
    pub width: usize,
    pub height: usize,
    /// Payload bits, or the ring pattern (`true` = 1).
    pub payload: Vec<bool>,
    pub carriers: Vec<Carrier>,
    /// δ for spread spectrum, H for the ring.
    pub strength: f64,
}

fn signed(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

fn wrap(k: i64, n: usize) -> usize {
    k.rem_euclid(n as i64) as usize
}

fn conjugate(u: usize, v: usize, w: usize, h: usize) -> (usize, usize) {
    ((w - u) % w, (h - v) % h)
}

/// Bins in the upper half-plane of signed frequencies that are not their
/// own conjugate.
fn half_plane(w: usize, h: usize) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let (fu, fv) = (signed(u, w), signed(v, h));
            if conjugate(u, v, w, h) == (u, v) {
                continue;
            }
            if fv > 0 || (fv == 0 && fu > 0) {
                out.push((u, v, ((fu * fu + fv * fv) as f64).sqrt()));
            }
        }
    }
    out
}

fn chebyshev(a: (usize, usize), b: (usize, usize), w: usize, h: usize) -> i64 {
    let du = signed(wrap(a.0 as i64 - b.0 as i64, w), w).abs();
    let dv = signed(wrap(a.1 as i64 - b.1 as i64, h), h).abs();
    du.max(dv)
}

impl WatermarkKey {
    /// Spread-spectrum key with `bits` carriers; `strength` defaults to
    /// `SS_STRENGTH_PER_PIXEL · w · h`.
    pub fn spread_spectrum(
        seed: u64,
        width: usize,
        height: usize,
        bits: usize,
        strength: Option<f64>,
    ) -> Result<Self> {
        if bits == 0 {
            return Err(invalid("bits", "payload must have at least one bit"));
        }
        let strength = strength.unwrap_or(SS_STRENGTH_PER_PIXEL * (width * height) as f64);
        check_strength(strength)?;
        let mut rng = Rng::new(seed);
        let payload: Vec<bool> = (0..bits).map(|_| rng.coin()).collect();
        let r = width.min(height) as f64 / 2.0;
        let mut pool: Vec<(usize, usize)> = half_plane(width, height)
            .into_iter()
            .filter(|(u, v, rad)| {
                // axis-aligned edges and the periodic image border pile
                // energy onto bins near the axes
                let off_axis = signed(*u, width).abs() >= AXIS_GUARD
                    && signed(*v, height).abs() >= AXIS_GUARD;
                off_axis && *rad >= 0.5 * r && *rad <= 0.9 * r
            })
            .map(|(u, v, _)| (u, v))
            .collect();
        rng.shuffle(&mut pool);
        let mut picked: Vec<(usize, usize)> = Vec::with_capacity(bits);
        for cand in pool {
            let conj = conjugate(cand.0, cand.1, width, height);
            let clear = picked.iter().all(|p| {
                chebyshev(*p, cand, width, height) >= CARRIER_SPACING
                    && chebyshev(*p, conj, width, height) >= CARRIER_SPACING
            });
            if clear {
                picked.push(cand);
                if picked.len() == bits {
                    break;
                }
            }
        }
        if picked.len() < bits {
            return Err(invalid(
                "bits",
                format!("only {} well-separated carriers fit in {width}x{height}", picked.len()),
            ));
        }
        let carriers = picked
            .into_iter()
            .enumerate()
            .map(|(slot, (u, v))| Carrier {
                u,
                v,
                slot,
                phase: 0.0,
            })
            .collect();
        Ok(Self {
            seed,
            band: Band::HighFrequency,
            width,
            height,
            payload,
            carriers,
            strength,
        })
    }

    /// Ring key with `groups` pattern values; `strength` defaults to
    /// `RING_STRENGTH_PER_PIXEL · w · h`.
    pub fn ring(
        seed: u64,
        width: usize,
        height: usize,
        groups: usize,
        strength: Option<f64>,
    ) -> Result<Self> {
        let strength = strength.unwrap_or(RING_STRENGTH_PER_PIXEL * (width * height) as f64);
        check_strength(strength)?;
        let r = width.min(height) as f64 / 2.0;
        if RING_RADII.1 > r / 2.0 {
            return Err(invalid(
                "width",
                format!("{width}x{height} is too small for the low-frequency rings"),
            ));
        }
        let mut bins: Vec<(usize, usize)> = half_plane(width, height)
            .into_iter()
            .filter(|(_, _, rad)| *rad >= RING_RADII.0 && *rad < RING_RADII.1)
            .map(|(u, v, _)| (u, v))
            .collect();
        if groups == 0 || groups > bins.len() {
            return Err(invalid(
                "groups",
                format!("need 1..={} groups, got {groups}", bins.len()),
            ));
        }
        let mut rng = Rng::new(seed);
        let mut payload: Vec<bool> = (0..groups).map(|_| rng.coin()).collect();
        // a pattern needs both values to be distinguishable from a blank ring
        if payload.iter().all(|p| *p) || payload.iter().all(|p| !*p) {
            payload[0] = !payload[0];
        }
        rng.shuffle(&mut bins);
        let carriers = bins
            .into_iter()
            .enumerate()
            .map(|(i, (u, v))| Carrier {
                u,
                v,
                slot: i % groups,
                phase: rng.uniform_in(-std::f64::consts::PI, std::f64::consts::PI),
            })
            .collect();
        Ok(Self {
            seed,
            band: Band::LowFrequencyRing,
            width,
            height,
            payload,
            carriers,
            strength,
        })
    }

    /// The ring pattern as reals.
    pub fn pattern(&self) -> Vec<f64> {
        self.payload.iter().map(|b| *b as u8 as f64).collect()
    }

    fn ensure_fits(&self, image: &ImageTensor) -> Result<()> {
        if (image.width(), image.height()) != (self.width, self.height) {
            return Err(Error::ShapeMismatch(format!(
                "key is for {}x{}, image is {}x{}",
                self.width,
                self.height,
                image.width(),
                image.height()
            )));
        }
        Ok(())
    }

    fn ensure_band(&self, band: Band) -> Result<()> {
        if self.band != band {
            return Err(invalid("key", format!("expected a {band:?} key")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn check_strength(s: f64) -> Result<()> {
    if s.is_finite() && s >= 0.0 {
        Ok(())
    } else {
        Err(invalid("strength", format!("must be finite and >= 0, got {s}")))
    }
}

fn luminance_255(image: &ImageTensor) -> Vec<f64> {
    image.to_u8().luminance()
}

fn offset_from_bins(delta: &[Complex64], w: usize, h: usize) -> Vec<f64> {
    idft2_plane(delta, w, h).iter().map(|z| z.re).collect()
}

/// Embeds the spread-spectrum payload.
pub fn embed_ss(image: &ImageTensor, key: &WatermarkKey) -> Result<ImageTensor> {
    key.ensure_band(Band::HighFrequency)?;
    key.ensure_fits(image)?;
    let (w, h) = (key.width, key.height);
    let spec = dft2_plane(&luminance_255(image), w, h);
    let targets: Vec<Complex64> = key
        .carriers
        .iter()
        .map(|c| {
            let f = spec[c.v * w + c.u];
            let modulus = f.norm();
            let target = if key.payload[c.slot] {
                modulus + key.strength
            } else {
                (modulus - key.strength).max(0.0)
            };
            if modulus > 0.0 {
                f * (target / modulus)
            } else {
                Complex64::new(target, 0.0)
            }
        })
        .collect();
    let mut out = image.to_u8();
    // clipping at 0/255 and rounding leak energy back onto the carriers, so
    // the targets are re-imposed on the quantised result
    for _ in 0..SS_PASSES {
        let now = dft2_plane(&out.luminance(), w, h);
        let mut delta = vec![Complex64::new(0.0, 0.0); w * h];
        for (c, t) in key.carriers.iter().zip(&targets) {
            let d = t - now[c.v * w + c.u];
            let (cu, cv) = conjugate(c.u, c.v, w, h);
            delta[c.v * w + c.u] = d;
            delta[cv * w + cu] = d.conj();
        }
        out = out.add_to_all_channels(&offset_from_bins(&delta, w, h))?;
    }
    let out = out.to_domain(image.domain());
    let db = metrics::psnr(&image.to_u8(), &out.to_u8())?;
    if db < 40.0 {
        log::warn!("spread-spectrum embedding PSNR {db:.2} dB is below 40 dB");
    }
    Ok(out)
}

/// Recovered bits and their accuracy against the key payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsDetection {
    pub bits: Vec<bool>,
    pub bit_accuracy: f64,
}

pub fn detect_ss(image: &ImageTensor, key: &WatermarkKey) -> Result<SsDetection> {
    key.ensure_band(Band::HighFrequency)?;
    key.ensure_fits(image)?;
    let (w, h) = (key.width, key.height);
    let spec = dft2_plane(&luminance_255(image), w, h);
    let mut excluded = std::collections::HashSet::new();
    excluded.insert((0usize, 0usize));
    for c in &key.carriers {
        excluded.insert((c.u, c.v));
        excluded.insert(conjugate(c.u, c.v, w, h));
    }
    let mut bits = vec![false; key.payload.len()];
    for c in &key.carriers {
        let mut reference = Vec::new();
        for dv in -REFERENCE_RADIUS..=REFERENCE_RADIUS {
            for du in -REFERENCE_RADIUS..=REFERENCE_RADIUS {
                let b = (wrap(c.u as i64 + du, w), wrap(c.v as i64 + dv, h));
                if !excluded.contains(&b) {
                    reference.push(spec[b.1 * w + b.0].norm());
                }
            }
        }
        reference.sort_by(f64::total_cmp);
        let median = match reference.len() {
            0 => 0.0,
            n if n % 2 == 1 => reference[n / 2],
            n => 0.5 * (reference[n / 2 - 1] + reference[n / 2]),
        };
        bits[c.slot] = spec[c.v * w + c.u].norm() > median;
    }
    let bit_accuracy = metrics::bit_accuracy(&bits, &key.payload)?;
    Ok(SsDetection { bits, bit_accuracy })
}

fn ring_target(key: &WatermarkKey, c: &Carrier) -> Complex64 {
    let amp = if key.payload[c.slot] { key.strength } else { 0.0 };
    Complex64::from_polar(amp, c.phase)
}

/// Embeds the ring pattern, replacing the ring bins of the luminance.
pub fn embed_ring(image: &ImageTensor, key: &WatermarkKey) -> Result<ImageTensor> {
    key.ensure_band(Band::LowFrequencyRing)?;
    key.ensure_fits(image)?;
    let (w, h) = (key.width, key.height);
    let mut out = image.to_u8();
    // clamping and rounding disturb the ring, so it is re-imposed a few times
    for _ in 0..RING_PASSES {
        let spec = dft2_plane(&out.luminance(), w, h);
        let mut delta = vec![Complex64::new(0.0, 0.0); w * h];
        for c in &key.carriers {
            let d = ring_target(key, c) - spec[c.v * w + c.u];
            let (cu, cv) = conjugate(c.u, c.v, w, h);
            delta[c.v * w + c.u] = d;
            delta[cv * w + cu] = d.conj();
        }
        out = out.add_to_all_channels(&offset_from_bins(&delta, w, h))?;
    }
    Ok(out.to_domain(image.domain()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingDetection {
    pub extracted: Vec<f64>,
    pub distance: f64,
    pub detected: bool,
}

/// Extracts the pattern and compares it with the key at `threshold`
/// (default [`ID_THRESHOLD`]).
pub fn detect_ring(
    image: &ImageTensor,
    key: &WatermarkKey,
    threshold: Option<f64>,
) -> Result<RingDetection> {
    key.ensure_band(Band::LowFrequencyRing)?;
    key.ensure_fits(image)?;
    let (w, h) = (key.width, key.height);
    let spec = dft2_plane(&luminance_255(image), w, h);
    let groups = key.payload.len();
    let mut sum = vec![0.0; groups];
    let mut count = vec![0usize; groups];
    for c in &key.carriers {
        let f = spec[c.v * w + c.u];
        sum[c.slot] += (f * Complex64::from_polar(1.0, -c.phase)).re;
        count[c.slot] += 1;
    }
    let (lo, hi) = RING_RAMP;
    let extracted: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, n)| {
            let frac = s / (*n as f64 * key.strength.max(f64::MIN_POSITIVE));
            ((frac - lo) / (hi - lo)).clamp(0.0, 1.0)
        })
        .collect();
    let (distance, detected) = metrics::inverse_distance(
        &extracted,
        &key.pattern(),
        threshold.unwrap_or(ID_THRESHOLD),
    )?;
    Ok(RingDetection {
        extracted,
        distance,
        detected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Manipulation {
    CenterCrop { ratio: f64 },
    Jpeg { quality: u8 },
    Quantize { levels: u32 },
    GaussianBlur { sigma: f64 },
    /// `eps` is in unit-float intensity units.
    GuidedBlur { radius: usize, eps: f64 },
}

impl Manipulation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Manipulation::CenterCrop { ratio } if !(ratio > 0.0 && ratio <= 1.0) => {
                Err(invalid("ratio", format!("must lie in (0, 1], got {ratio}")))
            }
            Manipulation::Jpeg { quality } if !(1..=100).contains(&quality) => {
                Err(invalid("quality", format!("must lie in [1, 100], got {quality}")))
            }
            Manipulation::Quantize { levels } if !(2..=256).contains(&levels) => {
                Err(invalid("levels", format!("must lie in [2, 256], got {levels}")))
            }
            Manipulation::GaussianBlur { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(invalid("sigma", format!("must be > 0, got {sigma}")))
            }
            Manipulation::GuidedBlur { radius, .. } if radius < 1 => {
                Err(invalid("radius", "must be >= 1"))
            }
            Manipulation::GuidedBlur { eps, .. } if !(eps > 0.0 && eps.is_finite()) => {
                Err(invalid("eps", format!("must be > 0, got {eps}")))
            }
            _ => Ok(()),
        }
    }
}

/// Applies `m`; the result has the input's shape and domain.
pub fn manipulate(image: &ImageTensor, m: Manipulation) -> Result<ImageTensor> {
    m.validate()?;
    let src = image.to_u8();
    let out = match m {
        Manipulation::CenterCrop { ratio } => center_crop(&src, ratio)?,
        Manipulation::Jpeg { quality } => jpeg_round_trip(&src, quality)?,
        Manipulation::Quantize { levels } => map_values(&src, |v| quantize_value(v, levels))?,
        Manipulation::GaussianBlur { sigma } => gaussian_blur(&src, sigma)?,
        Manipulation::GuidedBlur { radius, eps } => guided_blur(&src, radius, eps)?,
    };
    Ok(out.to_domain(image.domain()))
}

/// `round(v (k-1) / 255) · 255 / (k-1)`, rounded to an integer level.
pub fn quantize_value(v: f64, levels: u32) -> f64 {
    let k = (levels - 1) as f64;
    ((v * k / 255.0).round() * 255.0 / k).round()
}

fn map_values(src: &ImageTensor, f: impl Fn(f64) -> f64) -> Result<ImageTensor> {
    let (c, w, h) = src.shape();
    ImageTensor::from_real(c, w, h, ValueDomain::U8, src.data().iter().map(|v| f(*v)).collect())
}

fn center_crop(src: &ImageTensor, ratio: f64) -> Result<ImageTensor> {
    let (c, w, h) = src.shape();
    let cw = ((ratio * w as f64).round() as usize).clamp(1, w);
    let ch = ((ratio * h as f64).round() as usize).clamp(1, h);
    let (x0, y0) = ((w - cw) / 2, (h - ch) / 2);
    let (sx, sy) = (cw as f64 / w as f64, ch as f64 / h as f64);
    let sample = |plane: &[f64], fx: f64, fy: f64| {
        let fx = fx.clamp(0.0, (cw - 1) as f64);
        let fy = fy.clamp(0.0, (ch - 1) as f64);
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let (jx, jy) = ((ix + 1).min(cw - 1), (iy + 1).min(ch - 1));
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        let at = |x: usize, y: usize| plane[(y0 + y) * w + x0 + x];
        (1.0 - ty) * ((1.0 - tx) * at(ix, iy) + tx * at(jx, iy))
            + ty * ((1.0 - tx) * at(ix, jy) + tx * at(jx, jy))
    };
    let mut data = Vec::with_capacity(src.len());
    for ch_i in 0..c {
        let plane = src.plane(ch_i);
        for y in 0..h {
            for x in 0..w {
                let fx = (x as f64 + 0.5) * sx - 0.5;
                let fy = (y as f64 + 0.5) * sy - 0.5;
                data.push(sample(plane, fx, fy));
            }
        }
    }
    ImageTensor::from_real(c, w, h, ValueDomain::U8, data)
}

fn jpeg_round_trip(src: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let dynamic = to_dynamic(src)?;
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&dynamic)
        .map_err(|e| Error::CorruptData(format!("jpeg encode: {e}")))?;
    let decoded = image::load(Cursor::new(buf), ImageFormat::Jpeg)
        .map_err(|e| Error::CorruptData(format!("jpeg decode: {e}")))?;
    let mut out = from_dynamic(&decoded)?;
    if out.channels() != src.channels() {
        // grayscale JPEGs decode to one channel; colour ones to three
        out = ImageTensor::from_fn(src.channels(), src.width(), src.height(), ValueDomain::U8, |c, x, y| {
            out.get(c.min(out.channels() - 1), x, y)
        })?;
    }
    Ok(out)
}

fn convolve_separable(plane: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * plane[y * w + (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[(y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize * w + x])
                .sum();
        }
    }
    out
}

/// Normalised Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter().map(|t| t / total).collect()
}

fn gaussian_blur(src: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
    let (c, w, h) = src.shape();
    let kernel = gaussian_kernel(sigma);
    let data = (0..c)
        .flat_map(|ch| convolve_separable(src.plane(ch), w, h, &kernel))
        .collect();
    ImageTensor::from_real(c, w, h, ValueDomain::U8, data)
}

/// Mean over the `(2r+1)^2` window clipped to the image.
fn box_mean(plane: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let mut integral = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            integral[(y + 1) * (w + 1) + x + 1] = plane[y * w + x]
                + integral[y * (w + 1) + x + 1]
                + integral[(y + 1) * (w + 1) + x]
                - integral[y * (w + 1) + x];
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xa, xb) = (x.saturating_sub(r), (x + r + 1).min(w));
            let (ya, yb) = (y.saturating_sub(r), (y + r + 1).min(h));
            let s = integral[yb * (w + 1) + xb] - integral[ya * (w + 1) + xb]
                - integral[yb * (w + 1) + xa]
                + integral[ya * (w + 1) + xa];
            out[y * w + x] = s / ((xb - xa) * (yb - ya)) as f64;
        }
    }
    out
}

/// Guided filter with each channel as its own guide.
fn guided_blur(src: &ImageTensor, radius: usize, eps: f64) -> Result<ImageTensor> {
    let (c, w, h) = src.shape();
    let mut data = Vec::with_capacity(src.len());
    for ch in 0..c {
        let p: Vec<f64> = src.plane(ch).iter().map(|v| v / 255.0).collect();
        let sq: Vec<f64> = p.iter().map(|v| v * v).collect();
        let mean = box_mean(&p, w, h, radius);
        let mean_sq = box_mean(&sq, w, h, radius);
        let a: Vec<f64> = mean
            .iter()
            .zip(&mean_sq)
            .map(|(m, s)| {
                let var = (s - m * m).max(0.0);
                var / (var + eps)
            })
            .collect();
        let b: Vec<f64> = mean.iter().zip(&a).map(|(m, a)| m * (1.0 - a)).collect();
        let (ma, mb) = (box_mean(&a, w, h, radius), box_mean(&b, w, h, radius));
        data.extend((0..w * h).map(|i| 255.0 * (ma[i] * p[i] + mb[i])));
    }
    ImageTensor::from_real(c, w, h, ValueDomain::U8, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_image, SynthConfig};

    fn img(seed: u64) -> ImageTensor {
        synth_image(&SynthConfig::default(), &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn ss_key_layout() {
        let key = WatermarkKey::spread_spectrum(3, 64, 64, SS_BITS, None).unwrap();
        assert_eq!(key.carriers.len(), SS_BITS);
        let r = 32.0;
        for (i, a) in key.carriers.iter().enumerate() {
            assert_ne!((a.u, a.v), (0, 0));
            let (fu, fv) = (signed(a.u, 64) as f64, signed(a.v, 64) as f64);
            let rad = (fu * fu + fv * fv).sqrt();
            assert!(rad >= 0.5 * r && rad <= 0.9 * r);
            for b in &key.carriers[i + 1..] {
                assert!(chebyshev((a.u, a.v), (b.u, b.v), 64, 64) >= CARRIER_SPACING);
                let conj = conjugate(b.u, b.v, 64, 64);
                assert!(chebyshev((a.u, a.v), conj, 64, 64) >= CARRIER_SPACING);
            }
        }
        let back = WatermarkKey::from_json(&key.to_json().unwrap()).unwrap();
        assert_eq!(back, key);
        assert!(WatermarkKey::spread_spectrum(3, 8, 8, SS_BITS, None).is_err());
    }

    #[test]
    fn ss_round_trip() {
        let key = WatermarkKey::spread_spectrum(5, 64, 64, SS_BITS, None).unwrap();
        for seed in 0..10 {
            let x = img(seed);
            let wm = embed_ss(&x, &key).unwrap();
            assert_eq!(detect_ss(&wm, &key).unwrap().bit_accuracy, 1.0);
            assert!(metrics::psnr(&x, &wm).unwrap() >= 40.0);
        }
    }

    #[test]
    fn zero_strength_is_identity() {
        let key = WatermarkKey::spread_spectrum(5, 64, 64, SS_BITS, Some(0.0)).unwrap();
        let x = img(1);
        assert_eq!(embed_ss(&x, &key).unwrap(), x);
    }

    #[test]
    fn ring_round_trip() {
        let key = WatermarkKey::ring(9, 64, 64, RING_GROUPS, None).unwrap();
        for seed in 0..10 {
            let x = img(seed);
            let wm = embed_ring(&x, &key).unwrap();
            let d = detect_ring(&wm, &key, None).unwrap();
            assert!(d.detected, "distance {}", d.distance);
            assert!(!detect_ring(&x, &key, None).unwrap().detected);
        }
    }

    #[test]
    fn wrong_key_band_or_shape() {
        let ss = WatermarkKey::spread_spectrum(5, 64, 64, SS_BITS, None).unwrap();
        let ring = WatermarkKey::ring(5, 64, 64, RING_GROUPS, None).unwrap();
        let x = img(1);
        assert!(embed_ring(&x, &ss).is_err());
        assert!(detect_ss(&x, &ring).is_err());
        let small = ImageTensor::zeros(3, 32, 32, ValueDomain::U8);
        assert!(detect_ss(&small, &ss).is_err());
    }

    #[test]
    fn manipulation_examples() {
        assert_eq!(quantize_value(200.0, 2), 255.0);
        assert_eq!(quantize_value(100.0, 2), 0.0);
        assert_eq!(quantize_value(77.0, 256), 77.0);
        let x = img(2);
        assert_eq!(manipulate(&x, Manipulation::CenterCrop { ratio: 1.0 }).unwrap(), x);
        let flat = ImageTensor::filled(3, 16, 16, ValueDomain::U8, 93.0).unwrap();
        assert_eq!(manipulate(&flat, Manipulation::GaussianBlur { sigma: 2.0 }).unwrap(), flat);
        assert_eq!(
            manipulate(&flat, Manipulation::GuidedBlur { radius: 2, eps: 0.01 }).unwrap(),
            flat
        );
        for m in [
            Manipulation::CenterCrop { ratio: 0.0 },
            Manipulation::Jpeg { quality: 0 },
            Manipulation::Quantize { levels: 1 },
            Manipulation::GaussianBlur { sigma: 0.0 },
            Manipulation::GuidedBlur { radius: 0, eps: 0.1 },
            Manipulation::GuidedBlur { radius: 1, eps: 0.0 },
        ] {
            assert!(manipulate(&x, m).is_err(), "{m:?}");
        }
        let unit = x.to_unit();
        for m in [
            Manipulation::CenterCrop { ratio: 0.8 },
            Manipulation::Jpeg { quality: 80 },
            Manipulation::Quantize { levels: 8 },
            Manipulation::GaussianBlur { sigma: 1.0 },
            Manipulation::GuidedBlur { radius: 2, eps: 0.01 },
        ] {
            let out = manipulate(&unit, m).unwrap();
            assert_eq!(out.shape(), unit.shape());
            assert_eq!(out.domain(), ValueDomain::UnitFloat);
        }
        let jpg = manipulate(&x, Manipulation::Jpeg { quality: 90 }).unwrap();
        assert!(metrics::psnr(&x, &jpg).unwrap() > 25.0);
    }

    #[test]
    fn gaussian_kernel_is_normalised() {
        for s in [0.5, 1.0, 2.0, 3.3] {
            let k = gaussian_kernel(s);
            assert_eq!(k.len(), 2 * (3.0 * s).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
