//! Minimal dense/conv layers over flat parameter buffers, with hand-written
//! backward passes and an Adam optimiser. Deterministic and single-threaded.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// Hands out contiguous ranges of one flat parameter vector.
#[derive(Debug, Default)]
pub struct ParamAlloc {
    len: usize,
}

impl ParamAlloc {
    pub fn take(&mut self, n: usize) -> usize {
        let off = self.len;
        self.len += n;
        off
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// `y = W x + b` with `W` stored row-major `out x inp`, followed by `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    pub off: usize,
}

impl Linear {
    pub fn new(inp: usize, out: usize, alloc: &mut ParamAlloc) -> Self {
        let off = alloc.take(inp * out + out);
        Self { inp, out, off }
    }

    fn bias_off(&self) -> usize {
        self.off + self.inp * self.out
    }

    pub fn init(&self, params: &mut [f64], rng: &mut Rng, gain: f64) {
        let std = gain / (self.inp as f64).sqrt();
        for w in &mut params[self.off..self.bias_off()] {
            *w = rng.normal() * std;
        }
        params[self.bias_off()..self.bias_off() + self.out].fill(0.0);
    }

    pub fn forward(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        let w = &p[self.off..self.bias_off()];
        let b = &p[self.bias_off()..self.bias_off() + self.out];
        for o in 0..self.out {
            let row = &w[o * self.inp..(o + 1) * self.inp];
            y[o] = b[o] + dot(row, x);
        }
    }

    /// Accumulates parameter gradients into `g`; writes (not adds) `dx`.
    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], g: &mut [f64], dx: Option<&mut [f64]>) {
        let (wo, bo) = (self.off, self.bias_off());
        for o in 0..self.out {
            let d = dy[o];
            if d == 0.0 {
                continue;
            }
            g[bo + o] += d;
            let grow = &mut g[wo + o * self.inp..wo + (o + 1) * self.inp];
            for (gi, xi) in grow.iter_mut().zip(x) {
                *gi += d * xi;
            }
        }
        if let Some(dx) = dx {
            dx.fill(0.0);
            let w = &p[wo..bo];
            for o in 0..self.out {
                let d = dy[o];
                if d == 0.0 {
                    continue;
                }
                for (dxi, wi) in dx.iter_mut().zip(&w[o * self.inp..(o + 1) * self.inp]) {
                    *dxi += d * wi;
                }
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Square-kernel 2D convolution over `(channels, height, width)` buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub off: usize,
}

impl Conv2d {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        alloc: &mut ParamAlloc,
    ) -> Self {
        let off = alloc.take(cout * cin * k * k + cout);
        Self {
            cin,
            cout,
            k,
            stride,
            pad,
            off,
        }
    }

    fn bias_off(&self) -> usize {
        self.off + self.cout * self.cin * self.k * self.k
    }

    pub fn out_dims(&self, height: usize, width: usize) -> (usize, usize) {
        (
            (height + 2 * self.pad - self.k) / self.stride + 1,
            (width + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn init(&self, params: &mut [f64], rng: &mut Rng, gain: f64) {
        let std = gain / ((self.cin * self.k * self.k) as f64).sqrt();
        for w in &mut params[self.off..self.bias_off()] {
            *w = rng.normal() * std;
        }
        params[self.bias_off()..self.bias_off() + self.cout].fill(0.0);
    }

    #[inline]
    fn widx(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        self.off + ((co * self.cin + ci) * self.k + ky) * self.k + kx
    }

    pub fn forward(&self, p: &[f64], x: &[f64], h: usize, w: usize, y: &mut [f64]) {
        let (oh, ow) = self.out_dims(h, w);
        let bo = self.bias_off();
        for co in 0..self.cout {
            let out = &mut y[co * oh * ow..(co + 1) * oh * ow];
            out.fill(p[bo + co]);
            for ci in 0..self.cin {
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let wv = p[self.widx(co, ci, ky, kx)];
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                            let orow = &mut out[oy * ow..(oy + 1) * ow];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *o += wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates parameter gradients; writes `dx` when requested.
    pub fn backward(
        &self,
        p: &[f64],
        x: &[f64],
        h: usize,
        w: usize,
        dy: &[f64],
        g: &mut [f64],
        mut dx: Option<&mut [f64]>,
    ) {
        let (oh, ow) = self.out_dims(h, w);
        let bo = self.bias_off();
        if let Some(dx) = dx.as_deref_mut() {
            dx.fill(0.0);
        }
        for co in 0..self.cout {
            let dout = &dy[co * oh * ow..(co + 1) * oh * ow];
            g[bo + co] += dout.iter().sum::<f64>();
            for ci in 0..self.cin {
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let wi = self.widx(co, ci, ky, kx);
                        let wv = p[wi];
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let d = dout[oy * ow + ox];
                                acc += d * plane[iy * w + ix as usize];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[(ci * h + iy) * w + ix as usize] += d * wv;
                                }
                            }
                        }
                        g[wi] += acc;
                    }
                }
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-5 * fd.abs().max(1e-3),
                "{i}: fd {fd} vs {}",
                grad[i]
            );
        }
    }

    #[test]
    fn linear_gradients() {
        let mut alloc = ParamAlloc::default();
        let lin = Linear::new(5, 3, &mut alloc);
        let mut rng = Rng::new(1);
        let mut p = vec![0.0; alloc.len()];
        lin.init(&mut p, &mut rng, 1.0);
        p.iter_mut().for_each(|v| *v += 0.1 * rng.normal());
        let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let r: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let loss = |p: &[f64], x: &[f64]| {
            let mut y = vec![0.0; 3];
            lin.forward(p, x, &mut y);
            dot(&y, &r)
        };
        let mut g = vec![0.0; p.len()];
        let mut dx = vec![0.0; 5];
        lin.backward(&p, &x, &r, &mut g, Some(&mut dx));
        fd_check(&|pp| loss(pp, &x), &p, &g);
        fd_check(&|xx| loss(&p, xx), &x, &dx);
    }

    #[test]
    fn conv_gradients() {
        let mut alloc = ParamAlloc::default();
        let conv = Conv2d::new(2, 3, 3, 2, 1, &mut alloc);
        let mut rng = Rng::new(2);
        let mut p = vec![0.0; alloc.len()];
        conv.init(&mut p, &mut rng, 1.0);
        p.iter_mut().for_each(|v| *v += 0.1 * rng.normal());
        let (h, w) = (5, 6);
        let (oh, ow) = conv.out_dims(h, w);
        assert_eq!((oh, ow), (3, 3));
        let x: Vec<f64> = (0..2 * h * w).map(|_| rng.normal()).collect();
        let r: Vec<f64> = (0..3 * oh * ow).map(|_| rng.normal()).collect();
        let loss = |p: &[f64], x: &[f64]| {
            let mut y = vec![0.0; 3 * oh * ow];
            conv.forward(p, x, h, w, &mut y);
            dot(&y, &r)
        };
        let mut g = vec![0.0; p.len()];
        let mut dx = vec![0.0; x.len()];
        conv.backward(&p, &x, h, w, &r, &mut g, Some(&mut dx));
        fd_check(&|pp| loss(pp, &x), &p, &g);
        fd_check(&|xx| loss(&p, xx), &x, &dx);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2));
    }
}
