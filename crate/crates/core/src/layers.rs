//! The network's layer primitives with hand-written adjoints: 3x3/pad-1
//! convolution, ReLU, 2x2 max-pooling, and a bias-free linear head. Forward
//! passes cache exactly what their backward needs, one sample at a time.

use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tensor::{ChannelVector, FeatureMap};

/// 3x3 convolution, stride 1, zero padding 1 (shape preserving).
/// Weight layout: `[out_c][in_c][ky][kx]` flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_c: usize, out_c: usize) -> Self {
        Conv2d { in_c, out_c, w: vec![0.0; out_c * in_c * 9], b: vec![0.0; out_c] }
    }

    /// Fan-in-scaled uniform init, biases zero: weights drawn from
    /// uniform(-sqrt(gain/fan_in), +sqrt(gain/fan_in)). Gain 6 preserves
    /// forward variance under ReLU; callers pick larger gains where the
    /// layer should amplify.
    pub fn init(in_c: usize, out_c: usize, gain: f64, rng: &mut RngStream) -> Self {
        let limit = (gain / (in_c * 9) as f64).sqrt();
        let w = (0..out_c * in_c * 9).map(|_| rng.uniform(-limit, limit)).collect();
        Conv2d { in_c, out_c, w, b: vec![0.0; out_c] }
    }

    fn tap(&self, o: usize, ic: usize, ky: usize, kx: usize) -> f64 {
        self.w[((o * self.in_c + ic) * 3 + ky) * 3 + kx]
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let (c, h, w) = x.shape();
        if c != self.in_c {
            return Err(CoreError::ShapeMismatch(format!(
                "conv expects {} input channels, got {c}",
                self.in_c
            )));
        }
        let plane = h * w;
        let mut out = vec![0.0; self.out_c * plane];
        for o in 0..self.out_c {
            let out_plane = &mut out[o * plane..(o + 1) * plane];
            out_plane.fill(self.b[o]);
            for ic in 0..self.in_c {
                let x_plane = x.channel(ic);
                for ky in 0..3 {
                    let dy = ky as i64 - 1;
                    for kx in 0..3 {
                        let dx = kx as i64 - 1;
                        let tap = self.tap(o, ic, ky, kx);
                        // out[i, j] += tap * x[i+dy, j+dx] over valid spans;
                        // the j loop is a contiguous scaled row add.
                        let i_lo = (-dy).max(0) as usize;
                        let i_hi = ((h as i64 - dy).min(h as i64)) as usize;
                        let j_lo = (-dx).max(0) as usize;
                        let j_hi = ((w as i64 - dx).min(w as i64)) as usize;
                        for i in i_lo..i_hi {
                            let src = ((i as i64 + dy) as usize) * w;
                            let dst = i * w;
                            let xs = &x_plane[(src as i64 + j_lo as i64 + dx) as usize
                                ..(src as i64 + j_hi as i64 + dx) as usize];
                            let os = &mut out_plane[dst + j_lo..dst + j_hi];
                            for (obuf, &xv) in os.iter_mut().zip(xs) {
                                *obuf += tap * xv;
                            }
                        }
                    }
                }
            }
        }
        FeatureMap::new(self.out_c, h, w, out)
    }

    /// Returns (grad_w, grad_b, grad_input) for the cached input `x`.
    pub fn backward(
        &self,
        x: &FeatureMap,
        grad_out: &FeatureMap,
    ) -> Result<(Vec<f64>, Vec<f64>, FeatureMap)> {
        let (c, h, w) = x.shape();
        if c != self.in_c || grad_out.shape() != (self.out_c, h, w) {
            return Err(CoreError::ShapeMismatch(format!(
                "conv backward: input {:?}, grad {:?}, layer {}->{}",
                x.shape(),
                grad_out.shape(),
                self.in_c,
                self.out_c
            )));
        }
        let plane = h * w;
        let mut gw = vec![0.0; self.w.len()];
        let mut gb = vec![0.0; self.out_c];
        let mut gx = vec![0.0; self.in_c * plane];
        for o in 0..self.out_c {
            let g_plane = grad_out.channel(o);
            gb[o] = g_plane.iter().sum();
            for ic in 0..self.in_c {
                let x_plane = x.channel(ic);
                let gx_plane = &mut gx[ic * plane..(ic + 1) * plane];
                for ky in 0..3 {
                    let dy = ky as i64 - 1;
                    for kx in 0..3 {
                        let dx = kx as i64 - 1;
                        let i_lo = (-dy).max(0) as usize;
                        let i_hi = ((h as i64 - dy).min(h as i64)) as usize;
                        let j_lo = (-dx).max(0) as usize;
                        let j_hi = ((w as i64 - dx).min(w as i64)) as usize;
                        let tap = self.tap(o, ic, ky, kx);
                        let mut acc = 0.0;
                        for i in i_lo..i_hi {
                            let src = ((i as i64 + dy) as usize) * w;
                            let dst = i * w;
                            let xs = &x_plane[(src as i64 + j_lo as i64 + dx) as usize
                                ..(src as i64 + j_hi as i64 + dx) as usize];
                            let gsl = &g_plane[dst + j_lo..dst + j_hi];
                            // Weight gradient: dot of the shifted input row
                            // with the output-gradient row.
                            for (&xv, &gv) in xs.iter().zip(gsl) {
                                acc += xv * gv;
                            }
                            // Input gradient: scatter the output-gradient
                            // row back through the same shift.
                            let gxs = &mut gx_plane[(src as i64 + j_lo as i64 + dx) as usize
                                ..(src as i64 + j_hi as i64 + dx) as usize];
                            for (gxv, &gv) in gxs.iter_mut().zip(gsl) {
                                *gxv += tap * gv;
                            }
                        }
                        gw[((o * self.in_c + ic) * 3 + ky) * 3 + kx] = acc;
                    }
                }
            }
        }
        Ok((gw, gb, FeatureMap::new(self.in_c, h, w, gx)?))
    }
}

/// Elementwise max(0, x).
pub fn relu(x: &FeatureMap) -> FeatureMap {
    let (c, h, w) = x.shape();
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    FeatureMap::new(c, h, w, data).expect("relu preserves shape")
}

/// Backward through ReLU given the *pre-activation* input.
pub fn relu_backward(pre: &FeatureMap, grad_out: &FeatureMap) -> Result<FeatureMap> {
    if pre.shape() != grad_out.shape() {
        return Err(CoreError::ShapeMismatch("relu backward shapes differ".into()));
    }
    let (c, h, w) = pre.shape();
    let data = pre
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    FeatureMap::new(c, h, w, data)
}

/// 2x2 max pooling, stride 2. Output cell remembers which input it took
/// (first maximum in row-major scan order on ties).
pub fn maxpool2(x: &FeatureMap) -> Result<(FeatureMap, Vec<usize>)> {
    let (c, h, w) = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(CoreError::ShapeMismatch(format!(
            "maxpool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for k in 0..c {
        let plane = x.channel(k);
        for i in 0..oh {
            for j in 0..ow {
                let mut best_pos = (2 * i) * w + 2 * j;
                let mut best = plane[best_pos];
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let pos = (2 * i + di) * w + 2 * j + dj;
                    if plane[pos] > best {
                        best = plane[pos];
                        best_pos = pos;
                    }
                }
                out.push(best);
                idx.push(k * h * w + best_pos);
            }
        }
    }
    Ok((FeatureMap::new(c, oh, ow, out)?, idx))
}

pub fn maxpool2_backward(
    input_shape: (usize, usize, usize),
    idx: &[usize],
    grad_out: &FeatureMap,
) -> Result<FeatureMap> {
    let (c, h, w) = input_shape;
    if idx.len() != grad_out.data().len() {
        return Err(CoreError::ShapeMismatch("pool backward cache mismatch".into()));
    }
    let mut gx = vec![0.0; c * h * w];
    for (&source, &g) in idx.iter().zip(grad_out.data()) {
        gx[source] += g;
    }
    FeatureMap::new(c, h, w, gx)
}

/// Spread a per-channel gradient uniformly over each channel plane (the
/// adjoint of global average pooling).
pub fn gap_backward(shape: (usize, usize, usize), grad: &[f64]) -> Result<FeatureMap> {
    let (c, h, w) = shape;
    if grad.len() != c {
        return Err(CoreError::ShapeMismatch(format!(
            "gap backward: {} grads for {c} channels",
            grad.len()
        )));
    }
    let scale = 1.0 / (h * w) as f64;
    let mut data = Vec::with_capacity(c * h * w);
    for &g in grad {
        data.extend(std::iter::repeat(g * scale).take(h * w));
    }
    FeatureMap::new(c, h, w, data)
}

/// Bias-free linear map; rows double as CAM class weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out][in]` flattened.
    pub w: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear { in_dim, out_dim, w: vec![0.0; out_dim * in_dim] }
    }

    /// Fan-in-scaled uniform init: uniform(-sqrt(gain/fan_in), +sqrt(gain/fan_in)).
    pub fn init(in_dim: usize, out_dim: usize, gain: f64, rng: &mut RngStream) -> Self {
        let limit = (gain / in_dim as f64).sqrt();
        let w = (0..out_dim * in_dim).map(|_| rng.uniform(-limit, limit)).collect();
        Linear { in_dim, out_dim, w }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(CoreError::ShapeMismatch(format!(
                "linear expects {} inputs, got {}",
                self.in_dim,
                x.len()
            )));
        }
        Ok((0..self.out_dim)
            .map(|k| {
                self.w[k * self.in_dim..(k + 1) * self.in_dim]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect())
    }

    /// Returns (grad_w, grad_input).
    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.in_dim || grad_out.len() != self.out_dim {
            return Err(CoreError::ShapeMismatch("linear backward shapes differ".into()));
        }
        let mut gw = vec![0.0; self.w.len()];
        let mut gx = vec![0.0; self.in_dim];
        for k in 0..self.out_dim {
            let g = grad_out[k];
            let row = &self.w[k * self.in_dim..(k + 1) * self.in_dim];
            let grow = &mut gw[k * self.in_dim..(k + 1) * self.in_dim];
            for c in 0..self.in_dim {
                grow[c] = g * x[c];
                gx[c] += g * row[c];
            }
        }
        Ok((gw, gx))
    }

    /// Classifier row for one class, as CAM channel weights.
    pub fn class_weights(&self, class: usize) -> Result<ChannelVector> {
        if class >= self.out_dim {
            return Err(CoreError::InvalidArgument(format!(
                "class {class} out of range 0..{}",
                self.out_dim
            )));
        }
        ChannelVector::new(self.w[class * self.in_dim..(class + 1) * self.in_dim].to_vec())
    }
}

/// Numerically stable softmax cross-entropy; returns the loss and d/dlogits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(CoreError::InvalidArgument(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    // Grouped so uniform logits give ln(K) with no rounding detour.
    let loss = sum.ln() + (m - logits[label]);
    let mut grad: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}
