//! Image-quality and watermark-detection metrics.

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::features::FeatureExtractor;
use crate::tensor::ImageTensor;
use crate::watermark::{detect_ring, detect_ss, Band, WatermarkKey};

/// Threshold on the ring watermark's mean ℓ1 distance.
pub const ID_THRESHOLD: f64 = 1.0 / 71.0;

/// Default false-positive rate for bit-accuracy detection decisions.
pub const DEFAULT_FPR: f64 = 1e-3;

/// Value identical images contribute to an averaged PSNR.
pub const PSNR_CAP: f64 = 100.0;

/// SSIM window side.
pub const SSIM_WINDOW: usize = 8;

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
///
/// Both images are compared in the first image's domain (peak 255 for u8,
/// 1 for unit float).
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let b = b.to_domain(a.domain());
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (a.domain().peak() / mse.sqrt()).log10())
}

/// Mean SSIM over all 8x8 windows (stride 1) and channels, with
/// `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (c, w, h) = a.shape();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(invalid(
            "image",
            format!("{w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let b = b.to_domain(a.domain());
    let l = a.domain().peak();
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let (pa, pb) = (a.plane(ch), b.plane(ch));
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let (u, v) = (pa[y * w + x], pb[y * w + x]);
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Learned-perceptual-style distance: per layer, features are normalised to
/// unit length across channels at each position, squared differences are
/// summed over channels and averaged over positions, then layers are summed.
pub fn lpips(a: &ImageTensor, b: &ImageTensor, extractor: &dyn FeatureExtractor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let fa = extractor.extract(a)?;
    let fb = extractor.extract(b)?;
    if fa.layers.len() != fb.layers.len() {
        return Err(Error::ShapeMismatch("extractor layer counts differ".into()));
    }
    let mut total = 0.0;
    for (la, lb) in fa.layers.iter().zip(&fb.layers) {
        let (c, p) = (la.channels, la.positions);
        let mut acc = 0.0;
        for pos in 0..p {
            let norm = |vals: &[f64]| {
                (0..c).map(|ch| vals[ch * p + pos].powi(2)).sum::<f64>().sqrt() + 1e-10
            };
            let (na, nb) = (norm(&la.values), norm(&lb.values));
            for ch in 0..c {
                let d = la.values[ch * p + pos] / na - lb.values[ch * p + pos] / nb;
                acc += d * d;
            }
        }
        total += acc / p as f64;
    }
    Ok(total)
}

/// Fraction of positions where the bit strings agree.
pub fn bit_accuracy(recovered: &[bool], reference: &[bool]) -> Result<f64> {
    if recovered.len() != reference.len() || reference.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "bit strings of length {} and {}",
            recovered.len(),
            reference.len()
        )));
    }
    let hits = recovered.iter().zip(reference).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / reference.len() as f64)
}

/// Mean absolute difference and whether it is strictly below `threshold`.
pub fn inverse_distance(extracted: &[f64], pattern: &[f64], threshold: f64) -> Result<(f64, bool)> {
    if extracted.len() != pattern.len() || pattern.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "patterns of length {} and {}",
            extracted.len(),
            pattern.len()
        )));
    }
    let d = extracted
        .iter()
        .zip(pattern)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / pattern.len() as f64;
    Ok((d, d < threshold))
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`, exact summation in log space.
pub fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let mut log_choose = vec![0.0f64; n + 1];
    for i in 1..=n {
        log_choose[i] = log_choose[i - 1] + ((n - i + 1) as f64).ln() - (i as f64).ln();
    }
    let half = (n as f64) * 0.5f64.ln();
    (k..=n).map(|i| (log_choose[i] + half).exp()).sum::<f64>().min(1.0)
}

/// Smallest bit count `k` whose upper tail under chance is at most `fpr`;
/// bit accuracy `>= k / n` counts as detected.
pub fn decision_threshold(n_bits: usize, fpr: f64) -> Result<usize> {
    if n_bits == 0 {
        return Err(invalid("n_bits", "must be >= 1"));
    }
    if !(fpr > 0.0 && fpr <= 1.0) {
        return Err(invalid("fpr", format!("must lie in (0, 1], got {fpr}")));
    }
    (0..=n_bits)
        .find(|&k| binomial_upper_tail(n_bits, k) <= fpr)
        .ok_or(Error::UnattainableFpr { n_bits, fpr })
}

/// Detection decision for a recovered bit string.
pub fn detected_by_bits(bit_acc: f64, n_bits: usize, k: usize) -> bool {
    (bit_acc * n_bits as f64).round() as usize >= k
}

/// Fraction of `true` decisions.
pub fn detection_rate(decisions: &[bool]) -> Result<f64> {
    if decisions.is_empty() {
        return Err(invalid("decisions", "cannot average an empty list"));
    }
    Ok(decisions.iter().filter(|d| **d).count() as f64 / decisions.len() as f64)
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_psnr<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Repr::Text(t) => Err(serde::de::Error::custom(format!("bad psnr `{t}`"))),
    }
}

/// Per-image evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub bit_accuracy: f64,
    pub inverse_distance: Option<f64>,
    pub detected: bool,
    /// Extractor used for `lpips`.
    pub extractor: String,
}

/// Formats a PSNR value for tables.
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

/// Scores a purged image against the watermarked reference it came from.
///
/// Spread-spectrum keys decide by bit accuracy at `fpr`; ring keys decide by
/// inverse distance, with bit accuracy taken from the thresholded pattern.
pub fn evaluate_purge(
    reference: &ImageTensor,
    purged: &ImageTensor,
    key: &WatermarkKey,
    extractor: &dyn FeatureExtractor,
    fpr: f64,
) -> Result<MetricReport> {
    let psnr = psnr(reference, purged)?;
    let ssim = ssim(reference, purged)?;
    let lpips = lpips(reference, purged, extractor)?;
    let (bit_accuracy, inverse_distance, detected) = match key.band {
        Band::HighFrequency => {
            let n = key.payload.len();
            let det = detect_ss(purged, key)?;
            let k = decision_threshold(n, fpr)?;
            (det.bit_accuracy, None, detected_by_bits(det.bit_accuracy, n, k))
        }
        Band::LowFrequencyRing => {
            let det = detect_ring(purged, key, None)?;
            let bits: Vec<bool> = det.extracted.iter().map(|v| *v > 0.5).collect();
            (bit_accuracy(&bits, &key.payload)?, Some(det.distance), det.detected)
        }
    };
    Ok(MetricReport {
        psnr,
        ssim,
        lpips,
        bit_accuracy,
        inverse_distance,
        detected,
        extractor: extractor.id(),
    })
}

/// Means over a set of per-image reports; `detect` is the detection rate.
/// PSNR is averaged with identical pairs counted as [`PSNR_CAP`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub bit_acc: f64,
    pub inv_dist: Option<f64>,
    pub detect: f64,
}

impl Summary {
    pub fn of(reports: &[MetricReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(invalid("reports", "cannot summarise an empty set"));
        }
        let n = reports.len() as f64;
        let mean = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let inv_dist = reports
            .iter()
            .map(|r| r.inverse_distance)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        // identical pairs would make the mean infinite; they count as the cap
        let psnr = if reports.iter().all(|r| r.psnr.is_infinite()) {
            f64::INFINITY
        } else {
            mean(&|r| r.psnr.min(PSNR_CAP))
        };
        Ok(Self {
            count: reports.len(),
            psnr,
            ssim: mean(&|r| r.ssim),
            lpips: mean(&|r| r.lpips),
            bit_acc: mean(&|r| r.bit_accuracy),
            inv_dist,
            detect: mean(&|r| r.detected as u8 as f64),
        })
    }
}
