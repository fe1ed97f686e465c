//! Dense rank-1/2/3 arrays and the pooling / broadcasting primitives the
//! attention module is built from.
//!
//! A [`FeatureMap`] is a `c x h x w` activation tensor stored channel-major
//! (`index = k*h*w + i*w + j`), a [`SpatialMap`] is one `h x w` plane stored
//! row-major, and a [`ChannelVector`] is one value per channel. All values
//! are `f64` and must be finite; construction validates this, and every
//! operation is pure, so values can be shared freely across threads.

use std::io::{BufRead, Write};

use crate::error::{CoreError, Result};

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::NonFinite(what.to_string()))
    }
}

/// Rank-3 activation tensor, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if c == 0 || h == 0 || w == 0 {
            return Err(CoreError::InvalidArgument(format!(
                "feature map dims must be >= 1, got {c}x{h}x{w}"
            )));
        }
        if data.len() != c * h * w {
            return Err(CoreError::ShapeMismatch(format!(
                "feature map {c}x{h}x{w} needs {} values, got {}",
                c * h * w,
                data.len()
            )));
        }
        check_finite(&data, "feature map")?;
        Ok(FeatureMap { c, h, w, data })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        FeatureMap::new(c, h, w, vec![0.0; c * h * w]).expect("zeros is valid")
    }

    pub fn from_fn(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(c * h * w);
        for k in 0..c {
            for i in 0..h {
                for j in 0..w {
                    data.push(f(k, i, j));
                }
            }
        }
        FeatureMap::new(c, h, w, data)
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[(k * self.h + i) * self.w + j]
    }

    /// One channel as a contiguous `h*w` slice.
    pub fn channel(&self, k: usize) -> &[f64] {
        &self.data[k * self.h * self.w..(k + 1) * self.h * self.w]
    }

    /// Elementwise sum. Errors on shape mismatch.
    pub fn add(&self, other: &FeatureMap) -> Result<FeatureMap> {
        scale_add(1.0, self, other)
    }

    /// Elementwise (Hadamard) product. Errors on shape mismatch.
    pub fn hadamard(&self, other: &FeatureMap) -> Result<FeatureMap> {
        if self.shape() != other.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "hadamard of {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        FeatureMap::new(self.c, self.h, self.w, data)
    }

    /// Text golden-file form: header `c h w`, then the values in storage
    /// order. Values print in shortest round-trip notation so a written file
    /// reads back bit-exactly.
    pub fn write_text<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{} {} {}", self.c, self.h, self.w)?;
        for row in self.data.chunks(self.w) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: &mut R) -> Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let mut tokens = text.split_whitespace();
        let mut dim = |name: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| CoreError::Parse(format!("tensor text missing {name}")))?
                .parse::<usize>()
                .map_err(|e| CoreError::Parse(format!("tensor {name}: {e}")))
        };
        let c = dim("c")?;
        let h = dim("h")?;
        let w = dim("w")?;
        let values: std::result::Result<Vec<f64>, _> =
            tokens.map(|t| t.parse::<f64>()).collect();
        let values = values.map_err(|e| CoreError::Parse(format!("tensor value: {e}")))?;
        FeatureMap::new(c, h, w, values)
    }
}

/// One value per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelVector {
    data: Vec<f64>,
}

impl ChannelVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(CoreError::InvalidArgument(
                "channel vector must be nonempty".into(),
            ));
        }
        check_finite(&data, "channel vector")?;
        Ok(ChannelVector { data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, k: usize) -> f64 {
        self.data[k]
    }

    /// Elementwise hyperbolic tangent; outputs lie strictly in (-1, 1).
    pub fn tanh_map(&self) -> ChannelVector {
        ChannelVector {
            data: self.data.iter().map(|v| v.tanh()).collect(),
        }
    }
}

/// One `h x w` plane, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMap {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl SpatialMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(CoreError::InvalidArgument(format!(
                "spatial map dims must be >= 1, got {h}x{w}"
            )));
        }
        if data.len() != h * w {
            return Err(CoreError::ShapeMismatch(format!(
                "spatial map {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        check_finite(&data, "spatial map")?;
        Ok(SpatialMap { h, w, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != w) {
            return Err(CoreError::ShapeMismatch("ragged spatial rows".into()));
        }
        SpatialMap::new(h, w, rows.concat())
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    pub fn tanh_map(&self) -> SpatialMap {
        SpatialMap {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| v.tanh()).collect(),
        }
    }
}

/// Per-channel spatial mean: `result[k] = mean_{i,j} F[k,i,j]`.
pub fn gap(f: &FeatureMap) -> ChannelVector {
    let n = (f.h * f.w) as f64;
    let data = (0..f.c)
        .map(|k| f.channel(k).iter().sum::<f64>() / n)
        .collect();
    ChannelVector { data }
}

/// Per-position channel mean: `result[i,j] = mean_k F[k,i,j]`.
pub fn cap(f: &FeatureMap) -> SpatialMap {
    let plane = f.h * f.w;
    let mut data = vec![0.0; plane];
    for k in 0..f.c {
        for (acc, v) in data.iter_mut().zip(f.channel(k)) {
            *acc += v;
        }
    }
    let c = f.c as f64;
    for v in &mut data {
        *v /= c;
    }
    SpatialMap {
        h: f.h,
        w: f.w,
        data,
    }
}

/// Repeat a channel vector over an `h x w` grid.
pub fn broadcast_channel(v: &ChannelVector, h: usize, w: usize) -> FeatureMap {
    assert!(h >= 1 && w >= 1, "broadcast target must be >= 1x1");
    let plane = h * w;
    let mut data = Vec::with_capacity(v.len() * plane);
    for &x in &v.data {
        data.extend(std::iter::repeat(x).take(plane));
    }
    FeatureMap {
        c: v.len(),
        h,
        w,
        data,
    }
}

/// Repeat a spatial map across `c` channels.
pub fn broadcast_spatial(m: &SpatialMap, c: usize) -> FeatureMap {
    assert!(c >= 1, "broadcast target must have >= 1 channel");
    let mut data = Vec::with_capacity(c * m.data.len());
    for _ in 0..c {
        data.extend_from_slice(&m.data);
    }
    FeatureMap {
        c,
        h: m.h,
        w: m.w,
        data,
    }
}

/// Elementwise `s*X + Y`. Errors on shape mismatch.
pub fn scale_add(s: f64, x: &FeatureMap, y: &FeatureMap) -> Result<FeatureMap> {
    if x.shape() != y.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "scale_add of {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let data = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(a, b)| s * a + b)
        .collect();
    FeatureMap::new(x.c, x.h, x.w, data)
}
