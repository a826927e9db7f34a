//! Masked-autoencoder attack: hide random patches, regenerate them with a
//! model trained on clean images, keep every visible pixel.
//!
//! Architecture (patch tokens, latent width Q):
//! `z_i = visible_i ? W_e p_i + b_e : t_mask`, plus a learned position
//! embedding; `h1 = tanh(Z + A Z)` with a learned token-mixing matrix `A`;
//! `h2 = tanh(W_1 h1 + b_1)`; patch output `sigmoid(W_d h2 + b_d)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, params_digest, save_checkpoint, CheckpointManifest, CHECKPOINT_VERSION};
use crate::error::{invalid, Error, Result};
use crate::io::Dataset;
use crate::masking::{create_random_mask, MaskStrategy};
use crate::nn::{sigmoid, Adam, Linear, ParamAlloc};
use crate::rng::Rng;
use crate::tensor::{ImageTensor, Mask, PatchGrid, ValueDomain};

pub const CHECKPOINT_KIND: &str = "hsn";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HsnConfig {
    pub patch_size: usize,
    /// Token width Q.
    pub latent: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Training masks hide a fraction drawn uniformly from this range.
    pub beta_range: (f64, f64),
    /// Stop once the loss improved by less than this fraction over
    /// `patience` epochs.
    pub min_improvement: f64,
    pub patience: usize,
}

impl Default for HsnConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            latent: 64,
            epochs: 30,
            batch_size: 8,
            learning_rate: 2e-3,
            beta_range: (0.4, 0.8),
            min_improvement: 1e-4,
            patience: 3,
        }
    }
}

impl HsnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.latent == 0 || self.batch_size == 0 {
            return Err(invalid("hsn", "patch_size, latent and batch_size must be positive"));
        }
        let (lo, hi) = self.beta_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(invalid("beta_range", format!("need 0 <= lo <= hi <= 1, got {lo}..{hi}")));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning_rate", "must be > 0"));
        }
        Ok(())
    }
}

/// Provenance shared by every trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    /// Content hash of the training images.
    pub dataset_id: String,
    pub loss_history: Vec<f64>,
}

/// Content hash of a set of images, independent of their file names.
pub fn dataset_digest(images: &[ImageTensor]) -> String {
    let mut bytes = Vec::new();
    for im in images {
        let (c, w, h) = im.shape();
        for d in [c, w, h] {
            bytes.extend((d as u64).to_le_bytes());
        }
        bytes.extend(im.to_bytes());
    }
    crate::checkpoint::sha256_hex(&bytes)
}

/// Whether the last `patience` epochs improved by less than `tol` relative.
pub(crate) fn converged(history: &[f64], patience: usize, tol: f64) -> bool {
    if patience == 0 || history.len() <= patience {
        return false;
    }
    let then = history[history.len() - 1 - patience];
    let now = history[history.len() - 1];
    then <= 0.0 || (then - now) / then < tol
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Layout {
    embed: Linear,
    mask_token: usize,
    pos: usize,
    mix: usize,
    hidden: Linear,
    decode: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedAutoencoder {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    pub latent: usize,
    layout: Layout,
    params: Vec<f64>,
    pub meta: TrainingMeta,
}

struct Forward {
    z: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

impl MaskedAutoencoder {
    pub fn new(channels: usize, width: usize, height: usize, cfg: &HsnConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let grid = PatchGrid::new(width, height, cfg.patch_size)?;
        let (n, q, d) = (grid.total(), cfg.latent, channels * cfg.patch_size * cfg.patch_size);
        let mut alloc = ParamAlloc::default();
        let layout = Layout {
            embed: Linear::new(d, q, &mut alloc),
            mask_token: alloc.take(q),
            pos: alloc.take(n * q),
            mix: alloc.take(n * n),
            hidden: Linear::new(q, q, &mut alloc),
            decode: Linear::new(q, d, &mut alloc),
        };
        let mut params = vec![0.0; alloc.len()];
        layout.embed.init(&mut params, rng, 1.0);
        layout.hidden.init(&mut params, rng, 1.0);
        layout.decode.init(&mut params, rng, 1.0);
        for p in &mut params[layout.mask_token..layout.mask_token + q] {
            *p = 0.1 * rng.normal();
        }
        for p in &mut params[layout.pos..layout.pos + n * q] {
            *p = 0.1 * rng.normal();
        }
        for p in &mut params[layout.mix..layout.mix + n * n] {
            *p = rng.normal() / n as f64;
        }
        Ok(Self {
            channels,
            width,
            height,
            patch_size: cfg.patch_size,
            latent: q,
            layout,
            params,
            meta: TrainingMeta {
                seed: rng.seed(),
                epochs_run: 0,
                dataset_id: String::new(),
                loss_history: Vec::new(),
            },
        })
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid {
            patch_size: self.patch_size,
            cols: self.width / self.patch_size,
            rows: self.height / self.patch_size,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    fn ensure_image(&self, image: &ImageTensor) -> Result<()> {
        if image.shape() != (self.channels, self.width, self.height) {
            return Err(Error::ShapeMismatch(format!(
                "model expects {}x{}x{}, got {:?}",
                self.channels,
                self.width,
                self.height,
                image.shape()
            )));
        }
        Ok(())
    }

    fn ensure_mask(&self, mask: &Mask) -> Result<()> {
        let g = self.grid();
        if (mask.width(), mask.height()) != (g.cols, g.rows) || mask.granularity() != g.granularity() {
            return Err(Error::ShapeMismatch("mask does not match the model's patch grid".into()));
        }
        Ok(())
    }

    /// Patch vectors (channel, row, column order inside a patch).
    fn patches(&self, unit: &[f64]) -> Vec<f64> {
        let (p, w, h) = (self.patch_size, self.width, self.height);
        let g = self.grid();
        let d = self.patch_dim();
        let mut out = vec![0.0; g.total() * d];
        for cell in 0..g.total() {
            let (px, py) = ((cell % g.cols) * p, (cell / g.cols) * p);
            let mut k = cell * d;
            for c in 0..self.channels {
                for dy in 0..p {
                    let row = (c * h + py + dy) * w + px;
                    out[k..k + p].copy_from_slice(&unit[row..row + p]);
                    k += p;
                }
            }
        }
        out
    }

    /// Runs the network; outputs are computed for the cells in `rows` only.
    fn forward(&self, patches: &[f64], visible: &[u8], rows: &[usize]) -> Forward {
        let (n, q, d) = (visible.len(), self.latent, self.patch_dim());
        let p = &self.params;
        let l = &self.layout;
        let mut z = vec![0.0; n * q];
        for i in 0..n {
            let zi = &mut z[i * q..(i + 1) * q];
            if visible[i] == 1 {
                l.embed.forward(p, &patches[i * d..(i + 1) * d], zi);
            } else {
                zi.copy_from_slice(&p[l.mask_token..l.mask_token + q]);
            }
            for (v, e) in zi.iter_mut().zip(&p[l.pos + i * q..l.pos + (i + 1) * q]) {
                *v += e;
            }
        }
        let m = rows.len();
        let mut h1 = vec![0.0; m * q];
        let mut h2 = vec![0.0; m * q];
        let mut out = vec![0.0; m * d];
        for (r, &i) in rows.iter().enumerate() {
            let u = &mut h1[r * q..(r + 1) * q];
            u.copy_from_slice(&z[i * q..(i + 1) * q]);
            let arow = &p[l.mix + i * n..l.mix + (i + 1) * n];
            for (j, a) in arow.iter().enumerate() {
                let zj = &z[j * q..(j + 1) * q];
                for (uk, zk) in u.iter_mut().zip(zj) {
                    *uk += a * zk;
                }
            }
            u.iter_mut().for_each(|v| *v = v.tanh());
            let s = &mut h2[r * q..(r + 1) * q];
            l.hidden.forward(p, &h1[r * q..(r + 1) * q], s);
            s.iter_mut().for_each(|v| *v = v.tanh());
            let o = &mut out[r * d..(r + 1) * d];
            l.decode.forward(p, &h2[r * q..(r + 1) * q], o);
            o.iter_mut().for_each(|v| *v = sigmoid(*v));
        }
        Forward { z, h1, h2, out }
    }

    /// Masked-patch MSE and its parameter gradient, accumulated into `g`.
    fn loss_and_grad(&self, patches: &[f64], visible: &[u8], g: &mut [f64]) -> f64 {
        let rows: Vec<usize> = (0..visible.len()).filter(|&i| visible[i] == 0).collect();
        if rows.is_empty() {
            return 0.0;
        }
        let (n, q, d) = (visible.len(), self.latent, self.patch_dim());
        let f = self.forward(patches, visible, &rows);
        let p = &self.params;
        let l = &self.layout;
        let norm = (rows.len() * d) as f64;
        let mut loss = 0.0;
        let mut dz = vec![0.0; n * q];
        let mut dlogit = vec![0.0; d];
        let mut dh2 = vec![0.0; q];
        let mut dh1 = vec![0.0; q];
        for (r, &i) in rows.iter().enumerate() {
            let o = &f.out[r * d..(r + 1) * d];
            let t = &patches[i * d..(i + 1) * d];
            for k in 0..d {
                let e = o[k] - t[k];
                loss += e * e;
                dlogit[k] = 2.0 * e / norm * o[k] * (1.0 - o[k]);
            }
            let h2 = &f.h2[r * q..(r + 1) * q];
            l.decode.backward(p, h2, &dlogit, g, Some(&mut dh2));
            for k in 0..q {
                dh2[k] *= 1.0 - h2[k] * h2[k];
            }
            let h1 = &f.h1[r * q..(r + 1) * q];
            l.hidden.backward(p, h1, &dh2, g, Some(&mut dh1));
            for k in 0..q {
                dh1[k] *= 1.0 - h1[k] * h1[k];
            }
            // u_i = z_i + sum_j A_ij z_j
            for k in 0..q {
                dz[i * q + k] += dh1[k];
            }
            let arow = l.mix + i * n;
            for j in 0..n {
                let zj = &f.z[j * q..(j + 1) * q];
                g[arow + j] += dh1.iter().zip(zj).map(|(a, b)| a * b).sum::<f64>();
                let a = p[arow + j];
                for k in 0..q {
                    dz[j * q + k] += a * dh1[k];
                }
            }
        }
        for i in 0..n {
            let dzi = &dz[i * q..(i + 1) * q];
            for k in 0..q {
                g[l.pos + i * q + k] += dzi[k];
            }
            if visible[i] == 1 {
                l.embed.backward(p, &patches[i * d..(i + 1) * d], dzi, g, None);
            } else {
                for k in 0..q {
                    g[l.mask_token + k] += dzi[k];
                }
            }
        }
        loss / norm
    }

    /// Full-image prediction in the unit-float domain (every patch decoded).
    pub fn predict(&self, image: &ImageTensor, mask: &Mask) -> Result<ImageTensor> {
        self.ensure_image(image)?;
        self.ensure_mask(mask)?;
        let unit = image.to_unit();
        let patches = self.patches(unit.data());
        let rows: Vec<usize> = (0..mask.total()).collect();
        let f = self.forward(&patches, mask.values(), &rows);
        Ok(self.assemble(&f.out, &rows))
    }

    fn assemble(&self, out: &[f64], rows: &[usize]) -> ImageTensor {
        let (p, w, h) = (self.patch_size, self.width, self.height);
        let g = self.grid();
        let d = self.patch_dim();
        let mut data = vec![0.0; self.channels * w * h];
        for (r, &cell) in rows.iter().enumerate() {
            let (px, py) = ((cell % g.cols) * p, (cell / g.cols) * p);
            let mut k = r * d;
            for c in 0..self.channels {
                for dy in 0..p {
                    let row = (c * h + py + dy) * w + px;
                    data[row..row + p].copy_from_slice(&out[k..k + p]);
                    k += p;
                }
            }
        }
        ImageTensor::new(self.channels, w, h, ValueDomain::UnitFloat, data).expect("sigmoid output in range")
    }

    /// Mean masked-region MSE over `images`, each under a fresh random mask.
    pub fn evaluate_loss(&self, images: &[ImageTensor], beta: f64, rng: &mut Rng) -> Result<f64> {
        let mut total = 0.0;
        let mut scratch = vec![0.0; self.params.len()];
        for im in images {
            self.ensure_image(im)?;
            let mask = create_random_mask(&self.grid(), beta, rng)?;
            let patches = self.patches(im.to_unit().data());
            total += self.loss_and_grad(&patches, mask.values(), &mut scratch);
        }
        Ok(total / images.len().max(1) as f64)
    }

    pub fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            version: CHECKPOINT_VERSION,
            kind: CHECKPOINT_KIND.into(),
            channels: self.channels,
            width: self.width,
            height: self.height,
            patch_size: Some(self.patch_size),
            seed: self.meta.seed,
            epochs: self.meta.epochs_run,
            params_sha256: params_digest(&self.params),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<CheckpointManifest> {
        let m = self.manifest();
        save_checkpoint(path, &m, self)?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (_, model) = load_checkpoint::<Self>(path, CHECKPOINT_KIND, |m| &m.params)?;
        Ok(model)
    }
}

/// Trains a masked autoencoder on clean images.
pub fn train_hsn(images: &[ImageTensor], cfg: &HsnConfig, rng: &mut Rng) -> Result<MaskedAutoencoder> {
    let (c, w, h) = Dataset::ensure_trainable(images)?;
    let mut model = MaskedAutoencoder::new(c, w, h, cfg, rng)?;
    model.meta.dataset_id = dataset_digest(images);
    let grid = model.grid();
    let units: Vec<Vec<f64>> = images
        .iter()
        .map(|im| model.patches(im.to_unit().data()))
        .collect();
    let mut adam = Adam::new(model.params.len(), cfg.learning_rate);
    let mut grad = vec![0.0; model.params.len()];
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.fill(0.0);
            for &idx in batch {
                let beta = rng.uniform_in(cfg.beta_range.0, cfg.beta_range.1);
                let mask = create_random_mask(&grid, beta, rng)?;
                epoch_loss += model.loss_and_grad(&units[idx], mask.values(), &mut grad);
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(&mut model.params, &grad);
        }
        let mean = epoch_loss / images.len() as f64;
        if !mean.is_finite() {
            return Err(Error::InvalidValue(format!("training loss diverged at epoch {epoch}")));
        }
        log::info!("hsn epoch {epoch}: loss {mean:.6}");
        model.meta.loss_history.push(mean);
        model.meta.epochs_run = epoch + 1;
        if converged(&model.meta.loss_history, cfg.patience, cfg.min_improvement) {
            break;
        }
    }
    Ok(model)
}

/// Outcome of one purge.
#[derive(Debug, Clone, PartialEq)]
pub struct HsnPurge {
    pub image: ImageTensor,
    pub mask: Mask,
}

/// Hides cells chosen by `strategy`, regenerates them and keeps the visible
/// pixels bit-exact. The output is quantised to u8 levels and returned in the
/// input's domain.
pub fn attack_hsn(
    model: &MaskedAutoencoder,
    image: &ImageTensor,
    strategy: &MaskStrategy,
    rng: &mut Rng,
) -> Result<HsnPurge> {
    model.ensure_image(image)?;
    let mask = strategy.create(&model.grid(), rng)?;
    let purged = reconstruct_hidden(model, image, &mask)?;
    Ok(HsnPurge { image: purged, mask })
}

/// Regenerates the hidden cells of `mask`; visible pixels are copied.
pub fn reconstruct_hidden(model: &MaskedAutoencoder, image: &ImageTensor, mask: &Mask) -> Result<ImageTensor> {
    model.ensure_image(image)?;
    model.ensure_mask(mask)?;
    if mask.hidden_count() == 0 {
        return Ok(image.clone());
    }
    let unit = image.to_unit();
    let patches = model.patches(unit.data());
    let rows: Vec<usize> = (0..mask.total()).filter(|&i| mask.values()[i] == 0).collect();
    let f = model.forward(&patches, mask.values(), &rows);
    let pred = model.assemble(&f.out, &rows);
    let vis = mask.pixel_values();
    let n = image.pixel_count();
    let peak = image.domain().peak();
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if vis[i % n] == 0 {
            *v = (pred.data()[i] * 255.0).round().clamp(0.0, 255.0) / 255.0 * peak;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::StrategyKind;

    fn constant_set(n: usize, v: f64) -> Vec<ImageTensor> {
        (0..n)
            .map(|_| ImageTensor::filled(3, 16, 16, ValueDomain::U8, v).unwrap())
            .collect()
    }

    fn small_cfg() -> HsnConfig {
        HsnConfig {
            latent: 16,
            epochs: 5,
            batch_size: 1,
            learning_rate: 0.02,
            ..Default::default()
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let cfg = HsnConfig {
            latent: 6,
            ..small_cfg()
        };
        let mut model = MaskedAutoencoder::new(2, 8, 8, &cfg, &mut rng).unwrap();
        let img = ImageTensor::from_fn(2, 8, 8, ValueDomain::UnitFloat, |_, _, _| rng.uniform()).unwrap();
        let patches = model.patches(img.data());
        let vis = vec![1, 0, 0, 1];
        let mut g = vec![0.0; model.params.len()];
        model.loss_and_grad(&patches, &vis, &mut g);
        let mut scratch = vec![0.0; model.params.len()];
        for k in (0..model.params.len()).step_by(7) {
            let h = 1e-6;
            let orig = model.params[k];
            model.params[k] = orig + h;
            let up = model.loss_and_grad(&patches, &vis, &mut scratch);
            model.params[k] = orig - h;
            let down = model.loss_and_grad(&patches, &vis, &mut scratch);
            model.params[k] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-6 * fd.abs().max(1e-4), "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn learns_a_constant() {
        let data = constant_set(16, 77.0);
        let model = train_hsn(&data, &small_cfg(), &mut Rng::new(1)).unwrap();
        let loss = model.evaluate_loss(&data, 0.6, &mut Rng::new(2)).unwrap();
        assert!(loss < 1e-3, "loss {loss}");
        let hist = &model.meta.loss_history;
        assert!(hist.iter().all(|l| l.is_finite()));
        assert!(hist.last().unwrap() <= hist.first().unwrap());

        let purged = attack_hsn(
            &model,
            &data[0],
            &MaskStrategy::new(StrategyKind::Random, 0.6).unwrap(),
            &mut Rng::new(5),
        )
        .unwrap();
        assert!(crate::metrics::psnr(&data[0], &purged.image).unwrap() > 40.0);
    }

    #[test]
    fn training_is_deterministic_and_rejects_empty_sets() {
        let data = constant_set(4, 10.0);
        let a = train_hsn(&data, &small_cfg(), &mut Rng::new(9)).unwrap();
        let b = train_hsn(&data, &small_cfg(), &mut Rng::new(9)).unwrap();
        assert_eq!(a.meta.loss_history, b.meta.loss_history);
        assert_eq!(a.params, b.params);
        assert!(matches!(train_hsn(&[], &small_cfg(), &mut Rng::new(9)), Err(Error::EmptyDataset)));
    }

    #[test]
    fn visible_pixels_pass_through() {
        let mut rng = Rng::new(4);
        let model = MaskedAutoencoder::new(3, 16, 16, &small_cfg(), &mut rng).unwrap();
        for kind in StrategyKind::ALL {
            for seed in 0..5 {
                let img = ImageTensor::from_fn(3, 16, 16, ValueDomain::U8, |_, _, _| rng.index(256) as f64).unwrap();
                let strat = MaskStrategy::new(kind, 0.5).unwrap();
                let out = attack_hsn(&model, &img, &strat, &mut Rng::new(seed)).unwrap();
                let vis = out.mask.pixel_values();
                for (i, (a, b)) in img.data().iter().zip(out.image.data()).enumerate() {
                    if vis[i % 256] == 1 {
                        assert_eq!(a, b);
                    }
                }
                let again = attack_hsn(&model, &img, &strat, &mut Rng::new(seed)).unwrap();
                assert_eq!(again, out);
            }
        }
        let img = ImageTensor::filled(3, 16, 16, ValueDomain::U8, 5.0).unwrap();
        let none = attack_hsn(&model, &img, &MaskStrategy::new(StrategyKind::Random, 0.01).unwrap(), &mut rng).unwrap();
        assert_eq!(none.image, img);
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = constant_set(2, 10.0);
        let model = train_hsn(&data, &small_cfg(), &mut Rng::new(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hsn.json");
        model.save(&path).unwrap();
        assert_eq!(MaskedAutoencoder::load(&path).unwrap(), model);
    }

    #[test]
    fn convergence_rule() {
        assert!(!converged(&[1.0, 0.5], 3, 1e-4));
        assert!(!converged(&[1.0, 0.9, 0.8, 0.7], 3, 1e-4));
        assert!(converged(&[1.0, 1.0, 1.0, 1.0], 3, 1e-4));
    }
}
