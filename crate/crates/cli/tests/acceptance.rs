//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines are always shown.
//! Exits non-zero when any criterion fails.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use hideseek::empirical::{summarise, trace_image, TraceSetup};
use hideseek::features::{FeatureExtractor, Flatten, RandomConvNet};
use hideseek::hsn::{attack_hsn, train_hsn, HsnConfig};
use hideseek::hsplus::{
    attack_hsplus, plan, train_generator, train_masker, DecodeMode, GeneratorConfig, HsPlusOptions, MaskerConfig,
    MaskingModel, OrderVariant, PixelGenerator,
};
use hideseek::losses::{hide_loss, hide_loss_grad, feature_distance_grad, pixel_loss, AreaTerm, LossWeights, PixelLogits};
use hideseek::masking::{hidden_target, MaskStrategy, StrategyKind};
use hideseek::metrics::{decision_threshold, detected_by_bits, psnr, DEFAULT_FPR, ID_THRESHOLD};
use hideseek::order_theory::{apd, verify_order_theorem, OrderInstance, Verdict};
use hideseek::spectral::{dft2, frequency_loss, frequency_loss_grad_raw, frequency_loss_weighted, spectrum_weight};
use hideseek::synth::{noise_image, synth_dataset, SynthConfig};
use hideseek::watermark::{detect_ring, detect_ss, embed_ring, embed_ss, manipulate, Manipulation, WatermarkKey, SS_BITS};
use hideseek::{Granularity, ImageTensor, Mask, PatchGrid, Rng, ValueDomain};
use hideseek_cli::{replay, run, Command, ExperimentConfig};
use rayon::prelude::*;
use rustfft_free::brute_dft;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

/// Independent oracles that do not share code with the library.
mod rustfft_free {
    /// Direct double loop over pixels for every bin.
    pub fn brute_dft(values: &[f64], w: usize, h: usize) -> Vec<(f64, f64)> {
        let mut out = vec![(0.0, 0.0); w * h];
        for v in 0..h {
            for u in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let phase = -2.0 * std::f64::consts::PI * ((u * x) as f64 / w as f64 + (v * y) as f64 / h as f64);
                        re += values[y * w + x] * phase.cos();
                        im += values[y * w + x] * phase.sin();
                    }
                }
                out[v * w + u] = (re, im);
            }
        }
        out
    }
}

fn rand_unit(rng: &mut Rng, c: usize, w: usize, h: usize, lo: f64, hi: f64) -> ImageTensor {
    ImageTensor::from_fn(c, w, h, ValueDomain::UnitFloat, |_, _, _| rng.uniform_in(lo, hi)).unwrap()
}

fn connected(mask: &Mask) -> bool {
    let hidden = mask.hidden_cells();
    let Some(start) = hidden.first() else { return true };
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::from([*start]);
    seen[start.y * w + start.x] = true;
    let mut count = 0;
    while let Some(c) = queue.pop_front() {
        count += 1;
        let mut nb = Vec::new();
        if c.x > 0 {
            nb.push((c.x - 1, c.y));
        }
        if c.x + 1 < w {
            nb.push((c.x + 1, c.y));
        }
        if c.y > 0 {
            nb.push((c.x, c.y - 1));
        }
        if c.y + 1 < h {
            nb.push((c.x, c.y + 1));
        }
        for (x, y) in nb {
            let cell = hideseek::Cell::new(x, y);
            if !seen[y * w + x] && !mask.is_visible(cell) {
                seen[y * w + x] = true;
                queue.push_back(cell);
            }
        }
    }
    count == hidden.len()
}

fn non_adjacent(mask: &Mask) -> bool {
    let w = mask.width();
    mask.hidden_cells().iter().all(|c| {
        let right = c.x + 1 < w && !mask.is_visible(hideseek::Cell::new(c.x + 1, c.y));
        let down = c.y + 1 < mask.height() && !mask.is_visible(hideseek::Cell::new(c.x, c.y + 1));
        !right && !down
    })
}

fn criterion_1() -> Check {
    let grid = PatchGrid::pixels(8, 8).map_err(e)?;
    let mut rng = Rng::new(101);
    for kind in StrategyKind::ALL {
        for i in 0..1000 {
            let beta = match kind {
                StrategyKind::Scattered => rng.uniform_in(0.02, 0.5),
                _ => rng.uniform_in(0.02, 0.98),
            };
            let mask = MaskStrategy::new(kind, beta)
                .and_then(|s| s.create(&grid, &mut rng.fork(i)))
                .map_err(e)?;
            ensure(
                mask.hidden_count() == hidden_target(beta, 64),
                format!("{} beta={beta}: count {}", kind.name(), mask.hidden_count()),
            )?;
            if kind == StrategyKind::Scattered {
                ensure(non_adjacent(&mask), format!("scattered mask {i} has adjacent cells"))?;
            }
            if kind == StrategyKind::Continuous {
                ensure(connected(&mask), format!("continuous mask {i} is disconnected"))?;
            }
        }
    }
    Ok("3000 masks: counts exact, scattered independent, continuous connected".into())
}

fn criterion_2() -> Check {
    let mut rng = Rng::new(202);
    let (mut worst, mut worst_parseval) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (w, h) = (1 + rng.index(16), 1 + rng.index(16));
        let img = rand_unit(&mut rng, 1, w, h, 0.0, 1.0);
        let spec = dft2(&img).map_err(e)?;
        let oracle = brute_dft(img.data(), w, h);
        for (z, (re, im)) in spec.bins.iter().zip(&oracle) {
            worst = worst.max((z.re - re).abs()).max((z.im - im).abs());
        }
        let energy: f64 = spec.bins.iter().map(|z| z.norm_sqr()).sum();
        let pixels: f64 = img.data().iter().map(|v| v * v).sum::<f64>() * (w * h) as f64;
        worst_parseval = worst_parseval.max((energy - pixels).abs() / pixels.max(1e-300));
    }
    ensure(worst <= 1e-9, format!("max abs deviation {worst:e}"))?;
    ensure(worst_parseval <= 1e-6, format!("Parseval rel error {worst_parseval:e}"))?;
    Ok(format!("max |dft - oracle| {worst:.1e}, Parseval rel err {worst_parseval:.1e}"))
}

fn criterion_3() -> Check {
    let uniform = pixel_loss(&PixelLogits::uniform(3), &[0, 128, 255]).map_err(e)?;
    let expect = 3.0 * 256f64.ln();
    ensure((uniform - expect).abs() <= 1e-6, format!("pixel_loss {uniform}"))?;
    let x = ImageTensor::new(1, 2, 1, ValueDomain::UnitFloat, vec![1.0, 0.0]).map_err(e)?;
    let xt = ImageTensor::zeros(1, 2, 1, ValueDomain::UnitFloat);
    let fl = frequency_loss(&x, &xt, 1.0).map_err(e)?;
    ensure((fl - 1.0).abs() <= 1e-9, format!("frequency_loss {fl}"))?;
    let mut rng = Rng::new(303);
    let img = rand_unit(&mut rng, 3, 8, 8, 0.0, 1.0);
    let ones = hideseek::SoftMask::filled(8, 8, 1.0).map_err(e)?;
    let net = RandomConvNet::semantic(1, 3);
    let h = hide_loss(&ones, &img, &img, &LossWeights::default(), &net, 1.0, AreaTerm::Complement).map_err(e)?;
    ensure(h == 0.0, format!("hide_loss {h}"))?;
    Ok(format!("pixel {uniform:.9}, frequency {fl}, hide {h}"))
}

/// Central differences of `f` at `p` against `grad`; returns the worst
/// relative error.
fn fd_check(p: &[f64], grad: &[f64], step: f64, f: &dyn Fn(&[f64]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut q = p.to_vec();
    for i in 0..p.len() {
        q[i] = p[i] + step;
        let up = f(&q);
        q[i] = p[i] - step;
        let down = f(&q);
        q[i] = p[i];
        let fd = (up - down) / (2.0 * step);
        let scale = fd.abs().max(grad[i].abs());
        if scale > 1e-12 {
            worst = worst.max((fd - grad[i]).abs() / scale);
        }
    }
    worst
}

fn criterion_4() -> Check {
    const TOL: f64 = 1e-4;
    let mut rng = Rng::new(404);
    let (c, w, h) = (3, 4, 4);
    let mut worst = [0.0f64; 4];
    let net = RandomConvNet::semantic(5, c);
    for _ in 0..20 {
        let x = rand_unit(&mut rng, c, w, h, 0.1, 0.9);
        let xt = rand_unit(&mut rng, c, w, h, 0.1, 0.9);
        // frequency loss, ω held at its value at x̃
        let omega = spectrum_weight(&dft2(&x).map_err(e)?, &dft2(&xt).map_err(e)?, 1.0).map_err(e)?;
        let (_, g) = frequency_loss_grad_raw(x.data(), xt.data(), c, w, h, 1.0).map_err(e)?;
        let f = |v: &[f64]| {
            let t = ImageTensor::new(c, w, h, ValueDomain::UnitFloat, v.to_vec()).unwrap();
            frequency_loss_weighted(&x, &t, &omega).unwrap()
        };
        worst[0] = worst[0].max(fd_check(xt.data(), &g, 1e-4, &f));
        // semantic and perceptual losses with the identity feature map
        let (_, g) = feature_distance_grad(x.data(), xt.data(), (c, w, h), &Flatten).map_err(e)?;
        let f = |v: &[f64]| {
            let t = ImageTensor::new(c, w, h, ValueDomain::UnitFloat, v.to_vec()).unwrap();
            hideseek::losses::semantic_loss(&x, &t, &Flatten).unwrap()
        };
        worst[1] = worst[1].max(fd_check(xt.data(), &g, 1e-4, &f));
        let f = |v: &[f64]| {
            let t = ImageTensor::new(c, w, h, ValueDomain::UnitFloat, v.to_vec()).unwrap();
            hideseek::losses::perceptual_loss(&x, &t, &Flatten).unwrap()
        };
        worst[2] = worst[2].max(fd_check(xt.data(), &g, 1e-4, &f));
        // HIDE loss w.r.t. the soft mask
        let soft: Vec<f64> = (0..w * h).map(|_| rng.uniform_in(0.05, 0.95)).collect();
        let signs = hideseek::losses::random_signs(x.len(), &mut rng);
        let weights = LossWeights {
            lambda1: 1.0,
            lambda2: 200.0,
            lambda3: 5e4,
            ..Default::default()
        };
        let (_, g) = hide_loss_grad(&soft, &x, &signs, &weights, &net, 1.0, AreaTerm::Complement).map_err(e)?;
        let perturbed = |s: &[f64]| {
            let v = hideseek::losses::perturb_with_signs(x.data(), s, &signs);
            ImageTensor::new(c, w, h, ValueDomain::UnitFloat, v).unwrap()
        };
        let omega = spectrum_weight(&dft2(&x).map_err(e)?, &dft2(&perturbed(&soft)).map_err(e)?, 1.0).map_err(e)?;
        let f = |s: &[f64]| {
            let xt = perturbed(s);
            let area = (w * h) as f64 - s.iter().map(|m| m * m).sum::<f64>();
            weights.lambda1 * area
                + weights.lambda2 * frequency_loss_weighted(&x, &xt, &omega).unwrap()
                + weights.lambda3 * hideseek::losses::semantic_loss(&x, &xt, &net).unwrap()
        };
        worst[3] = worst[3].max(fd_check(&soft, &g, 1e-4, &f));
    }
    let names = ["frequency", "semantic", "perceptual", "hide"];
    for (n, v) in names.iter().zip(worst) {
        ensure(v <= TOL, format!("{n} gradient rel error {v:e}"))?;
    }
    Ok(format!(
        "worst rel errors: frequency {:.1e}, semantic {:.1e}, perceptual {:.1e}, hide {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

fn criterion_5() -> Check {
    let mut rng = Rng::new(505);
    for i in 0..1000 {
        let n = 2 + rng.index(7);
        let mut draw = || {
            let mut v: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.01, 1.0)).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let inst = OrderInstance::new(draw(), draw()).map_err(e)?;
        ensure(verify_order_theorem(&inst).map_err(e)?.holds(), format!("instance {i} (n={n}) violates"))?;
    }
    let inst = OrderInstance::new(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]).map_err(e)?;
    let identity = apd(&inst, &[0, 1, 2]).map_err(e)?;
    let reversal = apd(&inst, &[2, 1, 0]).map_err(e)?;
    match verify_order_theorem(&inst).map_err(e)? {
        Verdict::Holds { max_apd, min_apd, .. } => {
            ensure(max_apd == 14.0 && identity == 14.0, format!("max {max_apd}, identity {identity}"))?;
            ensure(min_apd == 10.0 && reversal == 10.0, format!("min {min_apd}, reversal {reversal}"))?;
        }
        v => return Err(format!("worked example: {v:?}")),
    }
    Ok("holds: 1000/1000; worked example max 14 (identity), min 10 (reversal)".into())
}

/// Central 99.9% interval of Binomial(n, 1/2), computed from exact log-pmf.
fn binomial_band(n: usize) -> (usize, usize) {
    let mut ln_fact = vec![0.0f64; n + 1];
    for k in 1..=n {
        ln_fact[k] = ln_fact[k - 1] + (k as f64).ln();
    }
    let ln_half = n as f64 * 0.5f64.ln();
    let pmf = |k: usize| (ln_fact[n] - ln_fact[k] - ln_fact[n - k] + ln_half).exp();
    let (mut lo, mut acc) = (0, 0.0);
    while acc + pmf(lo) <= 0.0005 {
        acc += pmf(lo);
        lo += 1;
    }
    (lo, n - lo)
}

fn test_images(count: usize, seed: u64) -> Vec<ImageTensor> {
    synth_dataset(&SynthConfig::default(), count, seed).unwrap().images
}

fn criterion_6() -> Check {
    let images = test_images(100, 606);
    let ss = WatermarkKey::spread_spectrum(61, 64, 64, SS_BITS, None).map_err(e)?;
    let ring = WatermarkKey::ring(62, 64, 64, 8, None).map_err(e)?;
    let rows: Vec<Result<(f64, f64, f64), String>> = images
        .par_iter()
        .map(|img| {
            let wm = embed_ss(img, &ss).map_err(e)?;
            let ba = detect_ss(&wm, &ss).map_err(e)?.bit_accuracy;
            let p = psnr(img, &wm).map_err(e)?;
            let rw = embed_ring(img, &ring).map_err(e)?;
            let d = detect_ring(&rw, &ring, None).map_err(e)?.distance;
            Ok((ba, p, d))
        })
        .collect();
    let rows: Vec<(f64, f64, f64)> = rows.into_iter().collect::<Result<_, _>>()?;
    let perfect = rows.iter().filter(|r| r.0 == 1.0).count();
    let mean_psnr = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    let max_d = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    ensure(perfect == 100, format!("spread-spectrum BA = 1 on {perfect}/100"))?;
    ensure(max_d < ID_THRESHOLD, format!("max ring distance {max_d}"))?;
    ensure(mean_psnr >= 40.0, format!("mean embedding PSNR {mean_psnr}"))?;
    // unwatermarked images: half natural-like, half noise
    let mut rng = Rng::new(607);
    let clean: Vec<ImageTensor> = test_images(250, 608)
        .into_iter()
        .chain((0..250).map(|_| noise_image(3, 64, 64, &mut rng)))
        .collect();
    let correct: usize = clean
        .par_iter()
        .map(|img| {
            let det = detect_ss(img, &ss).unwrap();
            det.bits.iter().zip(&ss.payload).filter(|(a, b)| a == b).count()
        })
        .sum();
    let n = clean.len() * SS_BITS;
    let (lo, hi) = binomial_band(n);
    let pooled = correct as f64 / n as f64;
    ensure((lo..=hi).contains(&correct), format!("unwatermarked BA {pooled:.4} outside [{lo}, {hi}]/{n}"))?;
    Ok(format!(
        "SS BA=1 on 100/100, mean PSNR {mean_psnr:.2} dB, max ring dist {max_d:.4}; unwatermarked BA {pooled:.4} in [{:.4}, {:.4}]",
        lo as f64 / n as f64,
        hi as f64 / n as f64
    ))
}

fn criterion_7() -> Check {
    let images = test_images(50, 707);
    let ss = WatermarkKey::spread_spectrum(71, 64, 64, SS_BITS, None).map_err(e)?;
    let ring = WatermarkKey::ring(72, 64, 64, 8, None).map_err(e)?;
    let attacks = [Manipulation::GaussianBlur { sigma: 2.0 }, Manipulation::Quantize { levels: 8 }];
    let mut parts = Vec::new();
    for m in attacks {
        let rows: Vec<Result<(bool, bool), String>> = images
            .par_iter()
            .map(|img| {
                let wm = embed_ss(img, &ss).map_err(e)?;
                let clean_ba = detect_ss(&wm, &ss).map_err(e)?.bit_accuracy;
                let ba = detect_ss(&manipulate(&wm, m).map_err(e)?, &ss).map_err(e)?.bit_accuracy;
                let rw = embed_ring(img, &ring).map_err(e)?;
                let det = detect_ring(&manipulate(&rw, m).map_err(e)?, &ring, None).map_err(e)?.detected;
                Ok((ba < clean_ba, det))
            })
            .collect();
        let rows: Vec<(bool, bool)> = rows.into_iter().collect::<Result<_, _>>()?;
        let reduced = rows.iter().filter(|r| r.0).count();
        let kept = rows.iter().filter(|r| r.1).count();
        ensure(reduced >= 45, format!("{m:?}: SS BA reduced on {reduced}/50"))?;
        ensure(kept >= 45, format!("{m:?}: ring detected on {kept}/50"))?;
        parts.push(format!("{m:?}: SS reduced {reduced}/50, ring kept {kept}/50"));
    }
    Ok(parts.join("; "))
}

fn criterion_8() -> Check {
    let train = test_images(400, 1);
    let cfg = HsnConfig {
        epochs: 30,
        ..Default::default()
    };
    let model = train_hsn(&train, &cfg, &mut Rng::new(2)).map_err(e)?;
    let test = test_images(50, 808);
    let key = WatermarkKey::spread_spectrum(81, 64, 64, SS_BITS, None).map_err(e)?;
    let k = decision_threshold(SS_BITS, DEFAULT_FPR).map_err(e)?;
    let strategy = MaskStrategy::new(StrategyKind::Random, 0.6).map_err(e)?;
    let rows: Vec<Result<(bool, bool, f64, bool), String>> = test
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let wm = embed_ss(img, &key).map_err(e)?;
            let before = detect_ss(&wm, &key).map_err(e)?.bit_accuracy;
            let out = attack_hsn(&model, &wm, &strategy, &mut Rng::new(8000 + i as u64)).map_err(e)?;
            let after = detect_ss(&out.image, &key).map_err(e)?.bit_accuracy;
            let pm = out.mask.pixel_values();
            let n = wm.pixel_count();
            let exact = (0..wm.len()).all(|j| pm[j % n] == 0 || wm.data()[j] == out.image.data()[j]);
            Ok((
                detected_by_bits(before, SS_BITS, k),
                detected_by_bits(after, SS_BITS, k),
                psnr(&wm, &out.image).map_err(e)?,
                exact,
            ))
        })
        .collect();
    let rows: Vec<_> = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = rows.len() as f64;
    let dr_before = rows.iter().filter(|r| r.0).count() as f64 / n;
    let dr_after = rows.iter().filter(|r| r.1).count() as f64 / n;
    let mean_psnr = rows.iter().map(|r| r.2).sum::<f64>() / n;
    ensure(rows.iter().all(|r| r.3), "visible pixels changed")?;
    ensure(dr_before - dr_after >= 0.3, format!("DR {dr_before:.2} -> {dr_after:.2}"))?;
    ensure(mean_psnr >= 25.0, format!("mean purged PSNR {mean_psnr:.2}"))?;
    Ok(format!(
        "DR {dr_before:.2} -> {dr_after:.2}, mean PSNR {mean_psnr:.2} dB, visible pixels bit-exact ({} epochs)",
        model.meta.epochs_run
    ))
}

fn criterion_9() -> Check {
    let mut total_hidden = 0;
    for run in 0..100u64 {
        let mut rng = Rng::new(900 + run);
        let masker = MaskingModel::new(3, 4, &mut rng);
        let generator = PixelGenerator::new(3, 1, 8, &mut rng);
        let img = ImageTensor::from_fn(3, 12, 12, ValueDomain::U8, |_, _, _| rng.index(256) as f64).map_err(e)?;
        let gamma = rng.uniform_in(1.0, 20.0);
        let opts = HsPlusOptions {
            gamma,
            mode: DecodeMode::Sample {
                temperature: 1.0,
                seed: run,
            },
            ..Default::default()
        };
        let p = plan(&masker, &img, gamma).map_err(e)?;
        let out = attack_hsplus(&masker, &generator, &img, &opts).map_err(e)?;
        ensure(out.mask == p.mask, "mask differs from the hardened scores")?;
        let pm = out.mask.pixel_values();
        let n = img.pixel_count();
        for j in 0..img.len() {
            let (a, b) = (img.data()[j], out.image.data()[j]);
            ensure(pm[j % n] == 0 || a == b, format!("run {run}: visible value changed"))?;
        }
        ensure(out.order.len() == out.hidden_count(), format!("run {run}: {} steps", out.order.len()))?;
        if let Some(last) = out.order.cells().last() {
            let s = out.scores.values();
            let min = out.mask.hidden_cells().iter().map(|c| s[c.y * 12 + c.x]).fold(f64::INFINITY, f64::min);
            ensure(s[last.y * 12 + last.x] == min, format!("run {run}: last cell is not the minimum score"))?;
        }
        total_hidden += out.hidden_count();
    }
    let _ = Mask::visible(1, 1, Granularity::Pixel);
    Ok(format!("100 runs, {total_hidden} pixels decoded; passthrough, step count and last-cell checks hold"))
}

fn criterion_10() -> Check {
    let train = test_images(300, 1);
    let embedder = RandomConvNet::semantic(11, 3);
    let extractor = RandomConvNet::perceptual(13, 3);
    let mcfg = MaskerConfig {
        epochs: 5,
        weights: LossWeights {
            lambda1: 1.0,
            lambda2: 1e5,
            lambda3: 1e10,
            ..Default::default()
        },
        ..Default::default()
    };
    let masker = train_masker(&train, &mcfg, &embedder, &mut Rng::new(2)).map_err(e)?;
    let gcfg = GeneratorConfig {
        epochs: 15,
        ..Default::default()
    };
    let generator = train_generator(&train, &gcfg, &extractor, &mut Rng::new(3)).map_err(e)?;
    let test: Vec<(String, ImageTensor)> = test_images(50, 1010)
        .into_iter()
        .enumerate()
        .map(|(i, im)| (format!("t{i}"), im))
        .collect();
    let orders = [OrderVariant::Original, OrderVariant::Inverse];
    let (mut psnr_sum, mut dr_sum) = ([0.0; 2], [0.0; 2]);
    let seeds = 5;
    let mut hidden = 0.0;
    for seed in 0..seeds {
        let key = WatermarkKey::spread_spectrum(100 + seed, 64, 64, SS_BITS, None).map_err(e)?;
        let setup = TraceSetup {
            masker: &masker,
            generator: &generator,
            key: &key,
            extractor: &extractor as &dyn FeatureExtractor,
            fpr: DEFAULT_FPR,
            options: HsPlusOptions {
                mode: DecodeMode::Sample {
                    temperature: 1.0,
                    seed,
                },
                ..Default::default()
            },
        };
        let per_image: Vec<_> = test
            .par_iter()
            .enumerate()
            .map(|(i, (id, img))| {
                let wm = embed_ss(img, &key)?;
                trace_image(&setup, id, i as u64, &wm, &orders)
            })
            .collect::<Result<_, _>>()
            .map_err(e)?;
        let run = summarise(per_image, &orders).map_err(e)?;
        for (k, s) in run.summaries.iter().enumerate() {
            psnr_sum[k] += s.metrics.psnr / seeds as f64;
            dr_sum[k] += s.metrics.detect / seeds as f64;
        }
        hidden += run.traces.iter().map(|t| t.steps.len()).sum::<usize>() as f64 / run.traces.len() as f64 / 4096.0;
    }
    let detail = format!(
        "original PSNR {:.3} DR {:.3}; inverse PSNR {:.3} DR {:.3}; hidden {:.3}",
        psnr_sum[0],
        dr_sum[0],
        psnr_sum[1],
        dr_sum[1],
        hidden / seeds as f64
    );
    ensure(psnr_sum[1] >= psnr_sum[0], format!("inverse PSNR below original: {detail}"))?;
    ensure(dr_sum[0] <= dr_sum[1], format!("original DR above inverse: {detail}"))?;
    Ok(detail)
}

fn criterion_11() -> Check {
    let dir = tempfile::tempdir().map_err(e)?;
    let d = dir.path();
    let base = ExperimentConfig::from_toml(
        r#"
        seed = 11
        [data]
        count = 4
        [hsn]
        epochs = 2
        [masker]
        epochs = 1
        [masker.weights]
        lambda2 = 1e5
        lambda3 = 1e10
        [generator]
        epochs = 1
        queries_per_image = 4
        [ablation]
        order_seeds = [0, 1]
        [[evaluate.manipulations]]
        kind = "jpeg"
        quality = 80
        "#,
    )
    .map_err(e)?;
    let mut cfg = base.clone();
    let run_to = |command: Command, cfg: &ExperimentConfig, name: &str| -> Result<(), String> {
        let mut c = cfg.clone();
        c.output_dir = d.join(name);
        let outcome = run(command, c).map_err(|err| format!("{}: {err:#}", command.name()))?;
        let (_, diffs) = replay(&outcome.manifest_path, Some(d.join(format!("{name}_replay"))))
            .map_err(|err| format!("replay {}: {err:#}", command.name()))?;
        ensure(diffs.is_empty(), format!("{} replay differs: {diffs:?}", command.name()))?;
        ensure(
            outcome.manifest.artifacts.keys().any(|k| k.ends_with(".csv")),
            format!("{} wrote no csv", command.name()),
        )
    };
    run_to(Command::TrainHsn, &cfg, "hsn")?;
    run_to(Command::TrainMasker, &cfg, "masker")?;
    run_to(Command::TrainGenerator, &cfg, "generator")?;
    run_to(Command::Embed, &cfg, "embed")?;
    run_to(Command::VerifyTheorem, &cfg, "theorem")?;
    cfg.checkpoints.hsn = Some(d.join("hsn/hsn.json"));
    cfg.checkpoints.masker = Some(d.join("masker/masker.json"));
    cfg.checkpoints.generator = Some(d.join("generator/generator.json"));
    run_to(Command::Attack, &cfg, "attack_hsn")?;
    let mut hsplus = cfg.clone();
    hsplus.attack.method = hideseek_cli::config::Method::Hsplus;
    run_to(Command::Attack, &hsplus, "attack_hsplus")?;
    run_to(Command::AblateMasking, &cfg, "ablate_masking")?;
    run_to(Command::AblateLosses, &cfg, "ablate_losses")?;
    run_to(Command::AblateOrder, &cfg, "ablate_order")?;
    let mut ev = cfg.clone();
    ev.evaluate.purged_dir = Some(d.join("attack_hsn/purged"));
    run_to(Command::Evaluate, &ev, "evaluate")?;
    Ok("10 commands (11 runs) replayed with byte-identical CSVs".into())
}

fn main() {
    let criteria: [(u8, &str, fn() -> Check, bool); 11] = [
        (1, "mask-strategy invariants", criterion_1, false),
        (2, "DFT oracle equivalence", criterion_2, false),
        (3, "loss analytics", criterion_3, false),
        (4, "gradient checks", criterion_4, false),
        (5, "order theorem", criterion_5, false),
        (6, "watermark round-trips", criterion_6, false),
        (7, "manipulation direction", criterion_7, false),
        (8, "HSN end-to-end trend", criterion_8, true),
        (9, "HS+ fidelity contracts", criterion_9, false),
        (10, "reconstruction-order direction", criterion_10, true),
        (11, "CLI replay determinism", criterion_11, false),
    ];
    let limits: [(u8, f64); 3] = [(1, 10.0), (2, 30.0), (5, 60.0)];
    let mut failures = 0;
    let (mut fast, mut slow) = (Duration::ZERO, Duration::ZERO);
    for (id, name, check, training) in criteria {
        let t = Instant::now();
        let mut result = check();
        let dt = t.elapsed();
        if training {
            slow += dt;
        } else {
            fast += dt;
        }
        if let Some((_, limit)) = limits.iter().find(|l| l.0 == id) {
            if dt.as_secs_f64() >= *limit && result.is_ok() {
                result = Err(format!("took {:.1} s, limit {limit} s", dt.as_secs_f64()));
            }
        }
        let (tag, msg) = match &result {
            Ok(m) => ("PASS", m.clone()),
            Err(m) => {
                failures += 1;
                ("FAIL", m.clone())
            }
        };
        println!("criterion {id:>2} [{tag}] {name}: {msg} ({:.1} s)", dt.as_secs_f64());
    }
    let ok = fast.as_secs_f64() < 600.0 && slow.as_secs_f64() < 3600.0;
    if !ok {
        failures += 1;
    }
    println!(
        "criterion 12 [{}] runtime budget: non-training {:.1} s (< 600), training {:.1} s (< 3600)",
        if ok { "PASS" } else { "FAIL" },
        fast.as_secs_f64(),
        slow.as_secs_f64()
    );
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 12 acceptance criteria passed");
}
