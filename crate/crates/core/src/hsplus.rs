//! Masker-guided autoregressive reconstruction attack.
//!
//! A masking model `H` scores every pixel; `sigmoid(γ H)` is a soft mask
//! trained so that perturbing high-score pixels barely moves the image in
//! frequency and embedding space. At attack time low-score (vulnerable)
//! pixels are hidden and regenerated one by one by a pixel generator `G`,
//! highest score first, so the most vulnerable pixel comes last.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, params_digest, save_checkpoint, CheckpointManifest, CHECKPOINT_VERSION};
use crate::error::{invalid, Error, Result};
use crate::features::FeatureExtractor;
use crate::hsn::{converged, dataset_digest, TrainingMeta};
use crate::io::Dataset;
use crate::losses::{feature_distance_grad, hide_loss_grad, random_signs, AreaTerm, LossWeights, PixelLogits, BINS};
use crate::masking::{create_random_mask, harden, reconstruction_order, soft_mask, ReconstructionOrder};
use crate::nn::{log_softmax, sigmoid, Adam, Conv2d, Linear, ParamAlloc};
use crate::rng::Rng;
use crate::tensor::{Cell, ImageTensor, Mask, PatchGrid, RealMap, SoftMask};

pub const MASKER_KIND: &str = "hsplus-masker";
pub const GENERATOR_KIND: &str = "hsplus-generator";

/// Hard-mask threshold on `sigmoid(γ H)`.
pub const HARDEN_THRESHOLD: f64 = 0.5;
/// Default bound on the number of sequential decode steps per image.
pub const DEFAULT_DECODE_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskerConfig {
    pub hidden_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    /// Exponent of the frequency-loss weights.
    pub alpha: f64,
    pub weights: LossWeights,
    pub area: AreaTerm,
    pub min_improvement: f64,
    pub patience: usize,
}

impl Default for MaskerConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 8,
            epochs: 10,
            batch_size: 4,
            learning_rate: 1e-2,
            gamma: 10.0,
            alpha: 1.0,
            weights: LossWeights::default(),
            area: AreaTerm::default(),
            min_improvement: 1e-4,
            patience: 3,
        }
    }
}

impl MaskerConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.hidden_channels == 0 || self.batch_size == 0 {
            return Err(invalid("masker", "hidden_channels and batch_size must be positive"));
        }
        if !(self.gamma > 0.0) {
            return Err(invalid("gamma", "must be > 0"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning_rate", "must be > 0"));
        }
        Ok(())
    }
}

/// Three 3x3 convolutions (stride 1) mapping an image to a logit map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingModel {
    pub channels: usize,
    convs: Vec<Conv2d>,
    params: Vec<f64>,
    pub meta: TrainingMeta,
}

impl MaskingModel {
    pub fn new(channels: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut alloc = ParamAlloc::default();
        let convs = vec![
            Conv2d::new(channels, hidden, 3, 1, 1, &mut alloc),
            Conv2d::new(hidden, hidden, 3, 1, 1, &mut alloc),
            Conv2d::new(hidden, 1, 3, 1, 1, &mut alloc),
        ];
        let mut params = vec![0.0; alloc.len()];
        for conv in &convs {
            conv.init(&mut params, rng, 1.0);
        }
        Self {
            channels,
            convs,
            params,
            meta: TrainingMeta {
                seed: rng.seed(),
                epochs_run: 0,
                dataset_id: String::new(),
                loss_history: Vec::new(),
            },
        }
    }

    /// Builds a masker whose output is `bias` everywhere, whatever the input.
    pub fn constant(channels: usize, bias: f64) -> Self {
        let mut m = Self::new(channels, 1, &mut Rng::new(0));
        m.params.fill(0.0);
        let last = m.convs[2];
        m.params[last.off + last.cin * 9] = bias;
        m
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn ensure_image(&self, image: &ImageTensor) -> Result<()> {
        if image.channels() != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "masker expects {} channels, got {}",
                self.channels,
                image.channels()
            )));
        }
        Ok(())
    }

    // activations: [input, tanh(conv1), tanh(conv2), logits]
    fn run(&self, unit: &[f64], w: usize, h: usize) -> Vec<Vec<f64>> {
        let mut acts = vec![unit.iter().map(|v| 2.0 * v - 1.0).collect::<Vec<_>>()];
        for (i, conv) in self.convs.iter().enumerate() {
            let mut y = vec![0.0; conv.cout * w * h];
            conv.forward(&self.params, acts.last().unwrap(), h, w, &mut y);
            if i + 1 < self.convs.len() {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(y);
        }
        acts
    }

    /// Per-pixel logit map `H(image)`.
    pub fn logits(&self, image: &ImageTensor) -> Result<RealMap> {
        self.ensure_image(image)?;
        let unit = image.to_unit();
        let (w, h) = (image.width(), image.height());
        let acts = self.run(unit.data(), w, h);
        RealMap::new(w, h, acts.last().unwrap().clone())
    }

    /// `sigmoid(γ H(image))`.
    pub fn scores(&self, image: &ImageTensor, gamma: f64) -> Result<SoftMask> {
        soft_mask(&self.logits(image)?, gamma)
    }

    fn backward(&self, acts: &[Vec<f64>], w: usize, h: usize, dlogits: &[f64], g: &mut [f64]) {
        let mut dy = dlogits.to_vec();
        for li in (0..self.convs.len()).rev() {
            let conv = &self.convs[li];
            if li == 0 {
                conv.backward(&self.params, &acts[0], h, w, &dy, g, None);
                break;
            }
            let mut dx = vec![0.0; acts[li].len()];
            conv.backward(&self.params, &acts[li], h, w, &dy, g, Some(&mut dx));
            dy = dx
                .iter()
                .zip(&acts[li])
                .map(|(d, t)| d * (1.0 - t * t))
                .collect();
        }
    }

    fn manifest(&self, kind: &str, width: usize, height: usize) -> CheckpointManifest {
        CheckpointManifest {
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            channels: self.channels,
            width,
            height,
            patch_size: None,
            seed: self.meta.seed,
            epochs: self.meta.epochs_run,
            params_sha256: params_digest(&self.params),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<CheckpointManifest> {
        let m = self.manifest(MASKER_KIND, 0, 0);
        save_checkpoint(path, &m, self)?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(load_checkpoint::<Self>(path, MASKER_KIND, |m| &m.params)?.1)
    }
}

/// One HIDE step on one image: loss and accumulated parameter gradient.
fn masker_step(
    model: &MaskingModel,
    image: &ImageTensor,
    cfg: &MaskerConfig,
    embedder: &dyn FeatureExtractor,
    rng: &mut Rng,
    g: &mut [f64],
) -> Result<f64> {
    let unit = image.to_unit();
    let (w, h) = (image.width(), image.height());
    let acts = model.run(unit.data(), w, h);
    let logits = acts.last().unwrap();
    let soft: Vec<f64> = logits.iter().map(|l| sigmoid(cfg.gamma * l)).collect();
    let signs = random_signs(unit.len(), rng);
    let (loss, dsoft) = hide_loss_grad(&soft, &unit, &signs, &cfg.weights, embedder, cfg.alpha, cfg.area)?;
    let dlogits: Vec<f64> = dsoft
        .iter()
        .zip(&soft)
        .map(|(d, s)| d * cfg.gamma * s * (1.0 - s))
        .collect();
    model.backward(&acts, w, h, &dlogits, g);
    Ok(loss)
}

/// Trains the masking model on the HIDE loss.
pub fn train_masker(
    images: &[ImageTensor],
    cfg: &MaskerConfig,
    embedder: &dyn FeatureExtractor,
    rng: &mut Rng,
) -> Result<MaskingModel> {
    cfg.validate()?;
    let (c, _, _) = Dataset::ensure_trainable(images)?;
    let mut model = MaskingModel::new(c, cfg.hidden_channels, rng);
    model.meta.dataset_id = dataset_digest(images);
    let mut adam = Adam::new(model.params.len(), cfg.learning_rate);
    let mut grad = vec![0.0; model.params.len()];
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.fill(0.0);
            for &i in batch {
                total += masker_step(&model, &images[i], cfg, embedder, rng, &mut grad)?;
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|v| *v *= scale);
            adam.step(&mut model.params, &grad);
        }
        let mean = total / images.len() as f64;
        if !mean.is_finite() {
            return Err(Error::InvalidValue(format!("HIDE loss diverged at epoch {epoch}")));
        }
        log::info!("masker epoch {epoch}: loss {mean:.6}");
        model.meta.loss_history.push(mean);
        model.meta.epochs_run = epoch + 1;
        if converged(&model.meta.loss_history, cfg.patience, cfg.min_improvement) {
            break;
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Context window radius around the query pixel.
    pub radius: usize,
    pub hidden: usize,
    pub epochs: usize,
    /// Training queries drawn per image per epoch.
    pub queries_per_image: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Training masks hide a fraction drawn uniformly from this range.
    pub hidden_range: (f64, f64),
    /// Only `lambda4` and `lambda5` are used.
    pub weights: LossWeights,
    /// Side of the window on which the perceptual term is evaluated.
    pub perceptual_window: usize,
    pub min_improvement: f64,
    pub patience: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            radius: 3,
            hidden: 128,
            epochs: 10,
            queries_per_image: 16,
            batch_size: 16,
            learning_rate: 1e-3,
            hidden_range: (0.1, 0.9),
            weights: LossWeights::default(),
            perceptual_window: 16,
            min_improvement: 1e-4,
            patience: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.hidden == 0 || self.batch_size == 0 || self.queries_per_image == 0 {
            return Err(invalid("generator", "hidden, batch_size and queries_per_image must be positive"));
        }
        let (lo, hi) = self.hidden_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(invalid("hidden_range", format!("need 0 < lo <= hi < 1, got {lo}..{hi}")));
        }
        if self.perceptual_window < 4 {
            return Err(invalid("perceptual_window", "must be >= 4"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning_rate", "must be > 0"));
        }
        Ok(())
    }
}

/// Partially revealed image the generator conditions on. Hidden pixels read
/// as zero; per-channel sums over visible pixels are kept up to date.
#[derive(Debug, Clone)]
pub struct Canvas {
    channels: usize,
    width: usize,
    height: usize,
    /// Unit-float values, channel-major.
    values: Vec<f64>,
    visible: Vec<u8>,
    sums: Vec<f64>,
    visible_count: usize,
}

impl Canvas {
    pub fn new(image: &ImageTensor, mask: &Mask) -> Result<Self> {
        if mask.pixel_extent() != (image.width(), image.height()) {
            return Err(Error::ShapeMismatch("mask extent differs from image".into()));
        }
        let unit = image.to_unit();
        let visible = mask.pixel_values();
        let n = image.pixel_count();
        let values: Vec<f64> = unit
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| if visible[i % n] == 1 { *v } else { 0.0 })
            .collect();
        let sums = values.chunks_exact(n).map(|p| p.iter().sum()).collect();
        Ok(Self {
            channels: image.channels(),
            width: image.width(),
            height: image.height(),
            values,
            visible_count: visible.iter().filter(|v| **v == 1).count(),
            visible,
            sums,
        })
    }

    fn reveal(&mut self, x: usize, y: usize, unit: &[f64]) {
        let n = self.width * self.height;
        let p = y * self.width + x;
        for (c, v) in unit.iter().enumerate() {
            self.values[c * n + p] = *v;
            self.sums[c] += v;
        }
        self.visible[p] = 1;
        self.visible_count += 1;
    }
}

/// Conditional next-pixel model: local window of values and visibility
/// flags plus a global summary, two tanh layers, `C x 256` logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelGenerator {
    pub channels: usize,
    pub radius: usize,
    l1: Linear,
    l2: Linear,
    out: Linear,
    params: Vec<f64>,
    pub meta: TrainingMeta,
}

struct GenForward {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    logits: Vec<f64>,
}

impl PixelGenerator {
    pub fn new(channels: usize, radius: usize, hidden: usize, rng: &mut Rng) -> Self {
        let side = 2 * radius + 1;
        let inp = side * side * (channels + 1) + channels + 3;
        let mut alloc = ParamAlloc::default();
        let l1 = Linear::new(inp, hidden, &mut alloc);
        let l2 = Linear::new(hidden, hidden, &mut alloc);
        let out = Linear::new(hidden, channels * BINS, &mut alloc);
        let mut params = vec![0.0; alloc.len()];
        l1.init(&mut params, rng, 1.0);
        l2.init(&mut params, rng, 1.0);
        out.init(&mut params, rng, 0.1);
        Self {
            channels,
            radius,
            l1,
            l2,
            out,
            params,
            meta: TrainingMeta {
                seed: rng.seed(),
                epochs_run: 0,
                dataset_id: String::new(),
                loss_history: Vec::new(),
            },
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn features(&self, canvas: &Canvas, x: usize, y: usize) -> Vec<f64> {
        let (w, h, c) = (canvas.width, canvas.height, canvas.channels);
        let n = w * h;
        let r = self.radius as i64;
        let mut f = Vec::with_capacity(self.l1.inp);
        for dy in -r..=r {
            for dx in -r..=r {
                let (px, py) = (x as i64 + dx, y as i64 + dy);
                let inside = px >= 0 && py >= 0 && (px as usize) < w && (py as usize) < h;
                let p = if inside { py as usize * w + px as usize } else { 0 };
                let vis = inside && canvas.visible[p] == 1;
                for ch in 0..c {
                    f.push(if vis { canvas.values[ch * n + p] - 0.5 } else { 0.0 });
                }
                f.push(vis as u8 as f64);
            }
        }
        let count = canvas.visible_count.max(1) as f64;
        for ch in 0..c {
            f.push(if canvas.visible_count == 0 { 0.0 } else { canvas.sums[ch] / count - 0.5 });
        }
        f.push(canvas.visible_count as f64 / n as f64);
        f.push(x as f64 / w as f64 - 0.5);
        f.push(y as f64 / h as f64 - 0.5);
        f
    }

    fn forward(&self, input: Vec<f64>) -> GenForward {
        let p = &self.params;
        let mut h1 = vec![0.0; self.l1.out];
        self.l1.forward(p, &input, &mut h1);
        h1.iter_mut().for_each(|v| *v = v.tanh());
        let mut h2 = vec![0.0; self.l2.out];
        self.l2.forward(p, &h1, &mut h2);
        h2.iter_mut().for_each(|v| *v = v.tanh());
        let mut logits = vec![0.0; self.out.out];
        self.out.forward(p, &h2, &mut logits);
        GenForward { input, h1, h2, logits }
    }

    fn backward(&self, f: &GenForward, dlogits: &[f64], g: &mut [f64]) {
        let p = &self.params;
        let mut dh2 = vec![0.0; self.l2.out];
        self.out.backward(p, &f.h2, dlogits, g, Some(&mut dh2));
        dh2.iter_mut().zip(&f.h2).for_each(|(d, t)| *d *= 1.0 - t * t);
        let mut dh1 = vec![0.0; self.l1.out];
        self.l2.backward(p, &f.h1, &dh2, g, Some(&mut dh1));
        dh1.iter_mut().zip(&f.h1).for_each(|(d, t)| *d *= 1.0 - t * t);
        self.l1.backward(p, &f.input, &dh1, g, None);
    }

    /// Logits for the pixel at `(x, y)` given the canvas.
    pub fn predict(&self, canvas: &Canvas, x: usize, y: usize) -> Result<PixelLogits> {
        if canvas.channels != self.channels {
            return Err(Error::ShapeMismatch("generator channel count".into()));
        }
        PixelLogits::new(self.channels, self.forward(self.features(canvas, x, y)).logits)
    }

    /// Logits for `position` of a masked image.
    pub fn logits(&self, masked: &ImageTensor, mask: &Mask, position: Cell) -> Result<PixelLogits> {
        let canvas = Canvas::new(masked, mask)?;
        self.predict(&canvas, position.x, position.y)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<CheckpointManifest> {
        let m = CheckpointManifest {
            version: CHECKPOINT_VERSION,
            kind: GENERATOR_KIND.into(),
            channels: self.channels,
            width: 0,
            height: 0,
            patch_size: None,
            seed: self.meta.seed,
            epochs: self.meta.epochs_run,
            params_sha256: params_digest(&self.params),
        };
        save_checkpoint(path, &m, self)?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(load_checkpoint::<Self>(path, GENERATOR_KIND, |m| &m.params)?.1)
    }
}

/// Window of side `side` (clipped to the image, aligned to multiples of 4
/// so strided extractors see the same grid) containing `(x, y)`.
fn window(x: usize, y: usize, w: usize, h: usize, side: usize) -> (usize, usize, usize, usize) {
    let place = |p: usize, n: usize| {
        let s = side.min(n);
        let start = (p.saturating_sub(s / 2) / 4 * 4).min(n - s);
        (start, s)
    };
    let (x0, sw) = place(x, w);
    let (y0, sh) = place(y, h);
    (x0, y0, sw, sh)
}

fn crop(unit: &[f64], c: usize, w: usize, h: usize, (x0, y0, sw, sh): (usize, usize, usize, usize)) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * sw * sh);
    for ch in 0..c {
        for y in y0..y0 + sh {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&unit[row + x0..row + x0 + sw]);
        }
    }
    out
}

/// One SEEK step: loss and accumulated gradient for a query at a hidden pixel.
#[allow(clippy::too_many_arguments)]
fn generator_step(
    model: &PixelGenerator,
    unit: &ImageTensor,
    target: &[usize],
    canvas: &Canvas,
    (x, y): (usize, usize),
    cfg: &GeneratorConfig,
    extractor: &dyn FeatureExtractor,
    g: &mut [f64],
) -> Result<(f64, f64)> {
    let f = model.forward(model.features(canvas, x, y));
    let c = model.channels;
    let mut dlogits = vec![0.0; c * BINS];
    let mut pix = 0.0;
    let mut expected = vec![0.0; c];
    let mut probs = vec![0.0; c * BINS];
    for ch in 0..c {
        let ls = log_softmax(&f.logits[ch * BINS..(ch + 1) * BINS]);
        pix -= ls[target[ch]];
        for b in 0..BINS {
            let pb = ls[b].exp();
            probs[ch * BINS + b] = pb;
            expected[ch] += pb * b as f64 / 255.0;
            dlogits[ch * BINS + b] = cfg.weights.lambda4 * (pb - (b == target[ch]) as u8 as f64);
        }
    }
    let mut loss = cfg.weights.lambda4 * pix;
    if cfg.weights.lambda5 > 0.0 {
        // the revealed pixel set to the expected decoded value vs. the truth,
        // compared on a window around it
        let (w, h) = (unit.width(), unit.height());
        let win = window(x, y, w, h, cfg.perceptual_window);
        let truth = crop(unit.data(), c, w, h, win);
        let mut pred = truth.clone();
        let (sw, sh) = (win.2, win.3);
        let local = (y - win.1) * sw + (x - win.0);
        for ch in 0..c {
            pred[ch * sw * sh + local] = expected[ch];
        }
        let (pct, dpred) = feature_distance_grad(&truth, &pred, (c, sw, sh), extractor)?;
        loss += cfg.weights.lambda5 * pct;
        for ch in 0..c {
            let dx = cfg.weights.lambda5 * dpred[ch * sw * sh + local];
            for b in 0..BINS {
                let pb = probs[ch * BINS + b];
                dlogits[ch * BINS + b] += dx * pb * (b as f64 / 255.0 - expected[ch]);
            }
        }
    }
    model.backward(&f, &dlogits, g);
    Ok((loss, pix))
}

/// Trains the pixel generator on the SEEK loss with uniformly random masks.
pub fn train_generator(
    images: &[ImageTensor],
    cfg: &GeneratorConfig,
    extractor: &dyn FeatureExtractor,
    rng: &mut Rng,
) -> Result<PixelGenerator> {
    cfg.validate()?;
    let (c, w, h) = Dataset::ensure_trainable(images)?;
    let grid = PatchGrid::pixels(w, h)?;
    let mut model = PixelGenerator::new(c, cfg.radius, cfg.hidden, rng);
    model.meta.dataset_id = dataset_digest(images);
    let units: Vec<ImageTensor> = images.iter().map(|im| im.to_unit()).collect();
    let bytes: Vec<Vec<u8>> = images.iter().map(|im| im.to_bytes()).collect();
    let mut adam = Adam::new(model.params.len(), cfg.learning_rate);
    let mut grad = vec![0.0; model.params.len()];
    let mut queue: Vec<usize> = (0..images.len())
        .flat_map(|i| std::iter::repeat_n(i, cfg.queries_per_image))
        .collect();
    let n = w * h;
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut queue);
        let mut total = 0.0;
        for batch in queue.chunks(cfg.batch_size) {
            grad.fill(0.0);
            for &i in batch {
                let beta = rng.uniform_in(cfg.hidden_range.0, cfg.hidden_range.1);
                let mut mask = create_random_mask(&grid, beta, rng)?;
                let hidden = mask.hidden_cells();
                if hidden.is_empty() {
                    // tiny images can round the hidden count to zero
                    let cell = Cell::new(rng.index(w), rng.index(h));
                    mask = Mask::visible(w, h, mask.granularity());
                    let mut vals = mask.values().to_vec();
                    vals[cell.y * w + cell.x] = 0;
                    mask = Mask::new(w, h, mask.granularity(), vals)?;
                }
                let hidden = mask.hidden_cells();
                let q = hidden[rng.index(hidden.len())];
                let canvas = Canvas::new(&units[i], &mask)?;
                let target: Vec<usize> = (0..c).map(|ch| bytes[i][ch * n + q.y * w + q.x] as usize).collect();
                let (loss, _) = generator_step(&model, &units[i], &target, &canvas, (q.x, q.y), cfg, extractor, &mut grad)?;
                total += loss;
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|v| *v *= scale);
            adam.step(&mut model.params, &grad);
        }
        let mean = total / queue.len() as f64;
        if !mean.is_finite() {
            return Err(Error::InvalidValue(format!("SEEK loss diverged at epoch {epoch}")));
        }
        log::info!("generator epoch {epoch}: loss {mean:.6}");
        model.meta.loss_history.push(mean);
        model.meta.epochs_run = epoch + 1;
        if converged(&model.meta.loss_history, cfg.patience, cfg.min_improvement) {
            break;
        }
    }
    Ok(model)
}

/// How logits become a discrete pixel value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeMode {
    Argmax,
    Sample { temperature: f64, seed: u64 },
}

impl Default for DecodeMode {
    fn default() -> Self {
        DecodeMode::Sample {
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl DecodeMode {
    /// Same mode with the sampling seed derived for item `index`, so that
    /// images decoded in parallel draw from independent streams.
    pub fn for_item(self, index: u64) -> Self {
        match self {
            DecodeMode::Sample { temperature, seed } => DecodeMode::Sample {
                temperature,
                seed: Rng::new(seed).fork(index).seed(),
            },
            DecodeMode::Argmax => DecodeMode::Argmax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DecodeMode::Sample { temperature, .. } if !(*temperature > 0.0 && temperature.is_finite()) => {
                Err(invalid("temperature", format!("must be > 0, got {temperature}")))
            }
            _ => Ok(()),
        }
    }
}

/// Stateful decoder; sampling draws from one stream seeded by the mode.
#[derive(Debug, Clone)]
pub struct PixelDecoder {
    mode: DecodeMode,
    rng: Rng,
}

impl PixelDecoder {
    pub fn new(mode: DecodeMode) -> Result<Self> {
        mode.validate()?;
        let seed = match mode {
            DecodeMode::Sample { seed, .. } => seed,
            DecodeMode::Argmax => 0,
        };
        Ok(Self { mode, rng: Rng::new(seed) })
    }

    /// One value in `0..=255` per channel.
    pub fn decode(&mut self, logits: &PixelLogits) -> Vec<usize> {
        (0..logits.channels)
            .map(|c| {
                let l = logits.channel(c);
                match self.mode {
                    DecodeMode::Argmax => {
                        // first maximum wins
                        l.iter()
                            .enumerate()
                            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if *v > best.1 { (i, *v) } else { best })
                            .0
                    }
                    DecodeMode::Sample { temperature, .. } => {
                        let scaled: Vec<f64> = l.iter().map(|v| v / temperature).collect();
                        let ls = log_softmax(&scaled);
                        let u = self.rng.uniform();
                        let mut acc = 0.0;
                        for (b, lp) in ls.iter().enumerate() {
                            acc += lp.exp();
                            if u < acc {
                                return b;
                            }
                        }
                        BINS - 1
                    }
                }
            })
            .collect()
    }
}

/// Decodes `logits`, writes the value at `position` and marks it visible.
pub fn enc(
    masked: &ImageTensor,
    mask: &Mask,
    logits: &PixelLogits,
    position: Cell,
    decoder: &mut PixelDecoder,
) -> Result<(ImageTensor, Mask)> {
    if mask.granularity() != crate::tensor::Granularity::Pixel
        || (mask.width(), mask.height()) != (masked.width(), masked.height())
    {
        return Err(Error::ShapeMismatch("enc needs a pixel mask matching the image".into()));
    }
    if logits.channels != masked.channels() {
        return Err(Error::ShapeMismatch("logit channel count".into()));
    }
    if position.x >= mask.width() || position.y >= mask.height() {
        return Err(invalid("position", format!("({}, {}) is outside the mask", position.x, position.y)));
    }
    if mask.is_visible(position) {
        return Err(Error::AlreadyVisible {
            x: position.x,
            y: position.y,
        });
    }
    let values = decoder.decode(logits);
    let mut image = masked.clone();
    let peak = image.domain().peak();
    for (c, v) in values.iter().enumerate() {
        image.set(c, position.x, position.y, *v as f64 / 255.0 * peak);
    }
    let mut mask = mask.clone();
    mask.set_visible(position);
    Ok((image, mask))
}

/// Which sequence the hidden pixels are regenerated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "order", rename_all = "snake_case")]
pub enum OrderVariant {
    /// Highest score first; the most vulnerable pixel last.
    Original,
    Inverse,
    Random { seed: u64 },
}

impl OrderVariant {
    pub fn label(&self) -> &'static str {
        match self {
            OrderVariant::Original => "original",
            OrderVariant::Inverse => "inverse",
            OrderVariant::Random { .. } => "random",
        }
    }

    pub fn arrange(&self, order: &ReconstructionOrder) -> ReconstructionOrder {
        match self {
            OrderVariant::Original => order.clone(),
            OrderVariant::Inverse => order.reversed(),
            OrderVariant::Random { seed } => {
                let mut cells = order.0.clone();
                Rng::new(*seed).shuffle(&mut cells);
                ReconstructionOrder(cells)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HsPlusOptions {
    pub gamma: f64,
    pub mode: DecodeMode,
    pub order: OrderVariant,
    pub decode_cap: usize,
}

impl Default for HsPlusOptions {
    fn default() -> Self {
        Self {
            gamma: 10.0,
            mode: DecodeMode::default(),
            order: OrderVariant::Original,
            decode_cap: DEFAULT_DECODE_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HsPlusPurge {
    pub image: ImageTensor,
    /// Hardened mask before reconstruction.
    pub mask: Mask,
    pub scores: SoftMask,
    /// Cells in the order they were regenerated.
    pub order: ReconstructionOrder,
}

impl HsPlusPurge {
    pub fn hidden_count(&self) -> usize {
        self.mask.hidden_count()
    }

    /// Histogram of scores over `bins` equal-width bins of `[0, 1]`.
    pub fn score_histogram(&self, bins: usize) -> Vec<usize> {
        let mut hist = vec![0; bins.max(1)];
        for s in self.scores.values() {
            let b = ((s * bins as f64) as usize).min(bins.max(1) - 1);
            hist[b] += 1;
        }
        hist
    }
}

/// Hardens the masker's scores and regenerates hidden pixels one at a time.
pub fn attack_hsplus(
    masker: &MaskingModel,
    generator: &PixelGenerator,
    image: &ImageTensor,
    opts: &HsPlusOptions,
) -> Result<HsPlusPurge> {
    let plan = plan(masker, image, opts.gamma)?;
    attack_with_mask(generator, image, &plan.mask, plan.scores, &plan.order, opts)
}

/// Scores, hardened mask and descending-score order for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub scores: SoftMask,
    pub mask: Mask,
    pub order: ReconstructionOrder,
}

pub fn plan(masker: &MaskingModel, image: &ImageTensor, gamma: f64) -> Result<MaskPlan> {
    let scores = masker.scores(image, gamma)?;
    let mask = harden(&scores, HARDEN_THRESHOLD)?;
    let score_map = RealMap::new(scores.width(), scores.height(), scores.values().to_vec())?;
    let order = reconstruction_order(&score_map, &mask)?;
    Ok(MaskPlan { scores, mask, order })
}

/// Regenerates the hidden pixels of a precomputed mask along `order`
/// rearranged by `opts.order`.
pub fn attack_with_mask(
    generator: &PixelGenerator,
    image: &ImageTensor,
    mask: &Mask,
    scores: SoftMask,
    order: &ReconstructionOrder,
    opts: &HsPlusOptions,
) -> Result<HsPlusPurge> {
    if generator.channels != image.channels() {
        return Err(Error::ShapeMismatch("generator channel count".into()));
    }
    let hidden = mask.hidden_count();
    if hidden > opts.decode_cap {
        return Err(Error::DecodeCapExceeded {
            hidden,
            cap: opts.decode_cap,
        });
    }
    let order = opts.order.arrange(order);
    let mut decoder = PixelDecoder::new(opts.mode)?;
    let mut canvas = Canvas::new(image, mask)?;
    let mut out = image.clone();
    let peak = image.domain().peak();
    for cell in order.cells() {
        let logits = generator.predict(&canvas, cell.x, cell.y)?;
        let values = decoder.decode(&logits);
        let unit: Vec<f64> = values.iter().map(|v| *v as f64 / 255.0).collect();
        for (c, u) in unit.iter().enumerate() {
            out.set(c, cell.x, cell.y, u * peak);
        }
        canvas.reveal(cell.x, cell.y, &unit);
    }
    debug_assert_eq!(canvas.visible_count, canvas.width * canvas.height);
    Ok(HsPlusPurge {
        image: out,
        mask: mask.clone(),
        scores,
        order,
    })
}
