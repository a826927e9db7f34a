//! Image feature maps used as the semantic embedder and the perceptual
//! extractor.
//!
//! Desk-scale default: a small randomly initialised convolutional network
//! with a fixed seed. Any model that can report features and pull a
//! feature-space gradient back to pixels plugs in through
//! [`FeatureExtractor`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamAlloc};
use crate::rng::Rng;
use crate::tensor::ImageTensor;

/// Shape of a raw unit-float image buffer: `(channels, width, height)`.
pub type Shape = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayer {
    pub channels: usize,
    pub positions: usize,
    /// Channel-major: `values[c * positions + p]`.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub layers: Vec<FeatureLayer>,
}

impl FeatureStack {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.values.iter().copied()).collect()
    }

    pub fn dim(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    /// Squared Euclidean distance of the flattened features.
    pub fn sq_distance(&self, other: &FeatureStack) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::ShapeMismatch("feature dimensions differ".into()));
        }
        Ok(self
            .layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.values.iter().zip(&b.values))
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// Same layout, values replaced by `f(a, b)` element-wise.
    pub fn zip_map(&self, other: &FeatureStack, f: impl Fn(f64, f64) -> f64) -> FeatureStack {
        FeatureStack {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| FeatureLayer {
                    channels: a.channels,
                    positions: a.positions,
                    values: a.values.iter().zip(&b.values).map(|(x, y)| f(*x, *y)).collect(),
                })
                .collect(),
        }
    }
}

/// An image -> feature map with a vector-Jacobian product.
///
/// Inputs are raw unit-float buffers laid out like [`ImageTensor`] data.
pub trait FeatureExtractor: Send + Sync {
    /// Stable identifier; reports carry it so numbers from different
    /// extractors are never compared.
    fn id(&self) -> String;

    fn features(&self, data: &[f64], shape: Shape) -> Result<FeatureStack>;

    /// Gradient with respect to the input of `<grad, features(data)>`.
    fn pullback(&self, data: &[f64], shape: Shape, grad: &FeatureStack) -> Result<Vec<f64>>;

    fn extract(&self, image: &ImageTensor) -> Result<FeatureStack> {
        let unit = image.to_unit();
        self.features(unit.data(), unit.shape())
    }
}

/// Identity map: the flattened pixels are the features.
#[derive(Debug, Clone, Copy, Default)]
pub struct Flatten;

impl FeatureExtractor for Flatten {
    fn id(&self) -> String {
        "flatten".into()
    }

    fn features(&self, data: &[f64], (c, w, h): Shape) -> Result<FeatureStack> {
        if data.len() != c * w * h {
            return Err(Error::ShapeMismatch("buffer does not match shape".into()));
        }
        Ok(FeatureStack {
            layers: vec![FeatureLayer {
                channels: c,
                positions: w * h,
                values: data.to_vec(),
            }],
        })
    }

    fn pullback(&self, data: &[f64], _shape: Shape, grad: &FeatureStack) -> Result<Vec<f64>> {
        if grad.dim() != data.len() {
            return Err(Error::ShapeMismatch("gradient does not match input".into()));
        }
        Ok(grad.flatten())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Global average of the last layer, one value per channel.
    Pooled,
    /// Every layer's activation map.
    AllLayers,
    /// Mean squared activation of the last layer, one value per channel.
    Energy,
}

/// Stride-2 3x3 conv + tanh stack with fixed random weights.
#[derive(Debug, Clone)]
pub struct RandomConvNet {
    seed: u64,
    widths: Vec<usize>,
    readout: Readout,
    high_pass: bool,
    convs: Vec<Conv2d>,
    params: Vec<f64>,
}

impl RandomConvNet {
    pub fn new(seed: u64, in_channels: usize, widths: &[usize], readout: Readout) -> Self {
        Self::build(seed, in_channels, widths, readout, false)
    }

    /// Variant whose first-layer kernels sum to zero and whose biases are
    /// zero, so flat regions map to all-zero activations.
    pub fn high_pass(seed: u64, in_channels: usize, widths: &[usize], readout: Readout) -> Self {
        Self::build(seed, in_channels, widths, readout, true)
    }

    fn build(seed: u64, in_channels: usize, widths: &[usize], readout: Readout, high_pass: bool) -> Self {
        let mut alloc = ParamAlloc::default();
        let mut cin = in_channels;
        let convs: Vec<Conv2d> = widths
            .iter()
            .map(|&cout| {
                let conv = Conv2d::new(cin, cout, 3, 2, 1, &mut alloc);
                cin = cout;
                conv
            })
            .collect();
        let mut params = vec![0.0; alloc.len()];
        let mut rng = Rng::new(seed);
        for (li, conv) in convs.iter().enumerate() {
            conv.init(&mut params, &mut rng, 1.0);
            let bo = conv.off + conv.cout * conv.cin * 9;
            if high_pass {
                if li == 0 {
                    for k in params[conv.off..bo].chunks_exact_mut(9) {
                        let mean = k.iter().sum::<f64>() / 9.0;
                        k.iter_mut().for_each(|v| *v -= mean);
                    }
                }
            } else {
                // small random biases break the odd symmetry of tanh at zero
                for b in &mut params[bo..bo + conv.cout] {
                    *b = 0.3 * rng.normal();
                }
            }
        }
        Self {
            seed,
            widths: widths.to_vec(),
            readout,
            high_pass,
            convs,
            params,
        }
    }

    /// Default semantic embedder: two high-pass layers read out as
    /// per-channel energies (a 32-vector). Flat regions are insensitive to
    /// small perturbations; textured ones are not.
    pub fn semantic(seed: u64, in_channels: usize) -> Self {
        Self::high_pass(seed, in_channels, &[16, 32], Readout::Energy)
    }

    /// Default perceptual extractor: two layers, both maps exposed.
    pub fn perceptual(seed: u64, in_channels: usize) -> Self {
        Self::new(seed, in_channels, &[8, 16], Readout::AllLayers)
    }

    // returns inputs to every layer (index 0 is the normalised image) and
    // every activation, with spatial dims
    fn run(&self, data: &[f64], (c, w, h): Shape) -> Result<Vec<(Vec<f64>, usize, usize)>> {
        if data.len() != c * w * h {
            return Err(Error::ShapeMismatch("buffer does not match shape".into()));
        }
        if self.convs.first().is_some_and(|conv| conv.cin != c) {
            return Err(Error::ShapeMismatch(format!(
                "extractor expects {} channels, got {c}",
                self.convs[0].cin
            )));
        }
        let mut acts = vec![(data.iter().map(|v| 2.0 * v - 1.0).collect::<Vec<_>>(), h, w)];
        for conv in &self.convs {
            let (x, ih, iw) = acts.last().unwrap();
            let (oh, ow) = conv.out_dims(*ih, *iw);
            let mut y = vec![0.0; conv.cout * oh * ow];
            conv.forward(&self.params, x, *ih, *iw, &mut y);
            y.iter_mut().for_each(|v| *v = v.tanh());
            acts.push((y, oh, ow));
        }
        Ok(acts)
    }
}

impl FeatureExtractor for RandomConvNet {
    fn id(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!(
            "randconv{}-{}-{:?}-seed{}",
            if self.high_pass { "-hp" } else { "" },
            widths.join("x"),
            self.readout,
            self.seed
        )
        .to_lowercase()
    }

    fn features(&self, data: &[f64], shape: Shape) -> Result<FeatureStack> {
        let acts = self.run(data, shape)?;
        let layers = match self.readout {
            Readout::Pooled => {
                let (y, oh, ow) = acts.last().unwrap();
                let n = oh * ow;
                let ch = y.len() / n;
                vec![FeatureLayer {
                    channels: ch,
                    positions: 1,
                    values: y.chunks_exact(n).map(|p| p.iter().sum::<f64>() / n as f64).collect(),
                }]
            }
            Readout::Energy => {
                let (y, oh, ow) = acts.last().unwrap();
                let n = oh * ow;
                vec![FeatureLayer {
                    channels: y.len() / n,
                    positions: 1,
                    values: y
                        .chunks_exact(n)
                        .map(|p| p.iter().map(|v| v * v).sum::<f64>() / n as f64)
                        .collect(),
                }]
            }
            Readout::AllLayers => acts[1..]
                .iter()
                .map(|(y, oh, ow)| FeatureLayer {
                    channels: y.len() / (oh * ow),
                    positions: oh * ow,
                    values: y.clone(),
                })
                .collect(),
        };
        Ok(FeatureStack { layers })
    }

    fn pullback(&self, data: &[f64], shape: Shape, grad: &FeatureStack) -> Result<Vec<f64>> {
        let acts = self.run(data, shape)?;
        let depth = self.convs.len();
        // gradient w.r.t. each activation map, filled from the readout
        let mut dacts: Vec<Vec<f64>> = acts[1..].iter().map(|(y, _, _)| vec![0.0; y.len()]).collect();
        match self.readout {
            Readout::Pooled => {
                let g = &grad.layers[0].values;
                let (_, oh, ow) = acts[depth];
                let n = oh * ow;
                for (c, chunk) in dacts[depth - 1].chunks_exact_mut(n).enumerate() {
                    chunk.fill(g[c] / n as f64);
                }
            }
            Readout::Energy => {
                let g = &grad.layers[0].values;
                let (y, oh, ow) = &acts[depth];
                let n = oh * ow;
                for (c, chunk) in dacts[depth - 1].chunks_exact_mut(n).enumerate() {
                    let a = &y[c * n..(c + 1) * n];
                    for (d, v) in chunk.iter_mut().zip(a) {
                        *d = 2.0 * g[c] * v / n as f64;
                    }
                }
            }
            Readout::AllLayers => {
                if grad.layers.len() != depth {
                    return Err(Error::ShapeMismatch("gradient layer count".into()));
                }
                for (d, l) in dacts.iter_mut().zip(&grad.layers) {
                    d.copy_from_slice(&l.values);
                }
            }
        }
        let mut scratch = vec![0.0; self.params.len()];
        for li in (0..depth).rev() {
            let (y, _, _) = &acts[li + 1];
            let dy: Vec<f64> = dacts[li]
                .iter()
                .zip(y)
                .map(|(d, t)| d * (1.0 - t * t))
                .collect();
            let (x, ih, iw) = &acts[li];
            let mut dx = vec![0.0; x.len()];
            self.convs[li].backward(&self.params, x, *ih, *iw, &dy, &mut scratch, Some(&mut dx));
            if li == 0 {
                return Ok(dx.into_iter().map(|v| 2.0 * v).collect());
            }
            for (a, b) in dacts[li - 1].iter_mut().zip(dx) {
                *a += b;
            }
        }
        unreachable!("network has at least one layer")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_pullback(net: &dyn FeatureExtractor, shape: Shape, seed: u64) {
        let mut rng = Rng::new(seed);
        let n = shape.0 * shape.1 * shape.2;
        let x: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let f0 = net.features(&x, shape).unwrap();
        let r = FeatureStack {
            layers: f0
                .layers
                .iter()
                .map(|l| FeatureLayer {
                    values: l.values.iter().map(|_| rng.normal()).collect(),
                    ..l.clone()
                })
                .collect(),
        };
        let g = net.pullback(&x, shape, &r).unwrap();
        let obj = |x: &[f64]| -> f64 {
            let f = net.features(x, shape).unwrap();
            f.flatten().iter().zip(r.flatten()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..n {
            let mut p = x.clone();
            let mut m = x.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (obj(&p) - obj(&m)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(1e-3), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn conv_pullbacks_match_finite_differences() {
        check_pullback(&RandomConvNet::semantic(1, 3), (3, 8, 8), 4);
        check_pullback(&RandomConvNet::perceptual(2, 3), (3, 6, 5), 5);
        check_pullback(&Flatten, (2, 3, 3), 6);
        check_pullback(&RandomConvNet::new(3, 2, &[4, 5], Readout::Pooled), (2, 7, 6), 7);
        check_pullback(&RandomConvNet::high_pass(3, 2, &[4], Readout::AllLayers), (2, 5, 5), 8);
    }

    #[test]
    fn deterministic_features() {
        let a = RandomConvNet::semantic(9, 3);
        let b = RandomConvNet::semantic(9, 3);
        let x = vec![0.3; 3 * 16 * 16];
        assert_eq!(
            a.features(&x, (3, 16, 16)).unwrap(),
            b.features(&x, (3, 16, 16)).unwrap()
        );
        assert_eq!(a.features(&x, (3, 16, 16)).unwrap().dim(), 32);
        assert!(a.features(&x[..256], (1, 16, 16)).is_err());
    }
}
