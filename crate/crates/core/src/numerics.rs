//! Dense tensor arithmetic shared by the rest of the crate.
//!
//! Feature maps are stored row-major with the channel as the fastest-varying
//! axis: cell `(i, j)` (column `i`, row `j`) occupies
//! `data[(j * width + i) * channels..][..channels]`. Spatial maps use the same
//! raster order without the channel axis.

use crate::error::{Error, Result};

fn ensure_finite(what: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// An n-dimensional row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("Tensor::new", expected, data.len()));
        }
        ensure_finite("tensor", &data)?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A `width x height` grid of `channels`-dimensional feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature map dims must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(
                "FeatureMap::new",
                width * height * channels,
                data.len(),
            ));
        }
        ensure_finite("feature map", &data)?;
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    /// Builds a map cell by cell in raster order.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for j in 0..height {
            for i in 0..width {
                for k in 0..channels {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub(crate) fn from_raw(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of grid cells.
    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Feature vector of the cell with raster index `n`.
    pub fn cell(&self, n: usize) -> &[f64] {
        &self.data[n * self.channels..(n + 1) * self.channels]
    }

    pub fn cell_mut(&mut self, n: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[n * c..(n + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        self.cell(j * self.width + i)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_dims(&self, other: &FeatureMap) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_same(&self, other: &FeatureMap, context: &'static str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::shape(context, self.dims(), other.dims()))
        }
    }

    /// Scales every cell's feature vector by the matching cell of `weights`.
    pub fn scale_cells(&self, weights: &SpatialMap) -> Result<FeatureMap> {
        if weights.dims() != (self.width, self.height) {
            return Err(Error::shape(
                "scale_cells",
                (self.width, self.height),
                weights.dims(),
            ));
        }
        let mut out = self.clone();
        for (n, w) in weights.values().iter().enumerate() {
            out.cell_mut(n).iter_mut().for_each(|v| *v *= w);
        }
        Ok(out)
    }
}

/// A `width x height` grid of scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl SpatialMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "spatial map dims must be positive, got {width}x{height}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::shape("SpatialMap::new", width * height, values.len()));
        }
        ensure_finite("spatial map", &values)?;
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub(crate) fn from_raw(width: usize, height: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), width * height);
        Self {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn cells(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.width + i]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }

    /// Raster index of the largest value; the first one wins on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (n, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = n;
            }
        }
        best
    }

    pub fn scale(&self, c: f64) -> SpatialMap {
        SpatialMap::from_raw(
            self.width,
            self.height,
            self.values.iter().map(|v| v * c).collect(),
        )
    }
}

/// Softmax over every cell of the map jointly.
pub fn softmax_spatial(m: &SpatialMap) -> Result<SpatialMap> {
    ensure_finite("softmax input", m.values())?;
    Ok(SpatialMap::from_raw(
        m.width,
        m.height,
        softmax(m.values()),
    ))
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

/// Vector-Jacobian product of softmax: given `p = softmax(x)` and `dL/dp`,
/// returns `dL/dx`.
pub(crate) fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - dot)).collect()
}

/// Global average pooling: per-channel mean over all cells.
pub fn gap(f: &FeatureMap) -> Tensor {
    let d = f.channels;
    let mut out = vec![0.0; d];
    for n in 0..f.cells() {
        for (o, v) in out.iter_mut().zip(f.cell(n)) {
            *o += v;
        }
    }
    let g = f.cells() as f64;
    out.iter_mut().for_each(|v| *v /= g);
    Tensor {
        shape: vec![d],
        data: out,
    }
}

/// Per-cell Euclidean distance between the channel vectors of `a` and `b`.
pub fn l2_norm_channels(a: &FeatureMap, b: &FeatureMap) -> Result<SpatialMap> {
    a.check_same(b, "l2_norm_channels")?;
    let values = (0..a.cells())
        .map(|n| {
            a.cell(n)
                .iter()
                .zip(b.cell(n))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(SpatialMap::from_raw(a.width, a.height, values))
}

/// Compares an analytic gradient against central differences of `f`.
///
/// Returns the largest `|analytic - numeric| / max(1, |numeric|)` over all
/// coordinates.
pub fn finite_difference_check<F>(mut f: F, params: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::shape(
            "finite_difference_check",
            params.len(),
            analytic.len(),
        ));
    }
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x);
        x[i] = orig - eps;
        let minus = f(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at coordinate {i}")));
        }
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

// Small dense kernels. Matrices are row-major `rows x cols` slices.

/// `out += W x`
pub(crate) fn matvec_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        let row = &w[r * cols..(r + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += W^T y`
pub(crate) fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(out.len(), cols);
    for (r, yr) in y.iter().enumerate().take(rows) {
        if *yr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * yr;
        }
    }
}

/// `G += y x^T`
pub(crate) fn outer_acc(g: &mut [f64], y: &[f64], x: &[f64]) {
    let cols = x.len();
    debug_assert_eq!(g.len(), y.len() * cols);
    for (r, yr) in y.iter().enumerate() {
        if *yr == 0.0 {
            continue;
        }
        let row = &mut g[r * cols..(r + 1) * cols];
        for (gv, xv) in row.iter_mut().zip(x) {
            *gv += yr * xv;
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(width: usize, height: usize, v: &[f64]) -> SpatialMap {
        SpatialMap::new(width, height, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform() {
        let p = softmax_spatial(&map(2, 2, &[0.0; 4])).unwrap();
        for v in p.values() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_log3() {
        let p = softmax_spatial(&map(2, 1, &[0.0, 3f64.ln()])).unwrap();
        assert!((p.values()[0] - 0.25).abs() < 1e-15);
        assert!((p.values()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant_and_stable() {
        let a = softmax_spatial(&map(2, 1, &[0.3, -1.2])).unwrap();
        let b = softmax_spatial(&map(2, 1, &[1000.3, 998.8])).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_rejected() {
        assert!(SpatialMap::new(1, 1, vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
        let mut m = map(2, 1, &[0.0, 0.0]);
        m.values_mut()[0] = f64::NAN;
        assert!(matches!(softmax_spatial(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gap_examples() {
        let f = FeatureMap::new(2, 1, 2, vec![1.0, 3.0, 3.0, 1.0]).unwrap();
        assert_eq!(gap(&f).data(), &[2.0, 2.0]);
        let c = FeatureMap::from_fn(3, 2, 2, |_, _, k| [0.5, -2.0][k]).unwrap();
        let g = gap(&c);
        assert!((g.data()[0] - 0.5).abs() < 1e-15 && (g.data()[1] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn l2_norm_one_hot() {
        let a = FeatureMap::zeros(3, 2, 4);
        let mut b = a.clone();
        b.cell_mut(4)[2] = 5.0;
        let m = l2_norm_channels(&a, &b).unwrap();
        for (n, v) in m.values().iter().enumerate() {
            assert_eq!(*v, if n == 4 { 5.0 } else { 0.0 });
        }
        assert!(l2_norm_channels(&a, &FeatureMap::zeros(2, 3, 4)).is_err());
    }

    #[test]
    fn fd_check_square() {
        let err = finite_difference_check(|x| x[0] * x[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err < 1e-6);
        assert!(finite_difference_check(|x| x[0], &[1.0], &[1.0], 0.0).is_err());
        assert!(finite_difference_check(|x| x[0], &[1.0], &[1.0], -1e-3).is_err());
    }

    #[test]
    fn fd_check_softmax_sum_is_flat() {
        let x = [0.2, -1.0, 3.0, 0.7];
        let err = finite_difference_check(|x| softmax(x).iter().sum(), &x, &[0.0; 4], 1e-5).unwrap();
        assert!(err < 1e-9);
        // The analytic route: softmax_backward of an all-ones cotangent is zero.
        let p = softmax(&x);
        assert!(softmax_backward(&p, &[1.0; 4]).iter().all(|g| g.abs() < 1e-15));
    }
}
