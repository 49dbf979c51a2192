//! Dense row-major `f64` tensors and the forward kernels shared by the
//! autodiff graph and the plain inference paths.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense tensor value. Shapes use positive extents; the empty shape is a scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

pub(crate) fn first_non_finite(data: &[f64]) -> Option<(usize, f64)> {
    data.iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite())
        .map(|(i, v)| (i, *v))
}

impl Tensor {
    /// Builds a tensor, rejecting mismatched lengths and NaN/Inf values.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::Shape {
                shape,
                reason: format!("expected {n} values, got {}", data.len()),
            });
        }
        if let Some((index, value)) = first_non_finite(&data) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Self { shape, data })
    }

    /// Trusted constructor for kernel outputs. Finiteness is asserted in debug builds.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            first_non_finite(&data).is_none(),
            "non-finite value produced for shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Row-major matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape {
                shape: vec![m, n],
                reason: "ragged rows".into(),
            });
        }
        Self::new(vec![m, n], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Self { shape, data }
    }

    pub fn normal<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect::<Vec<f64>>();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::Shape {
                shape: self.shape.clone(),
                reason: "expected a matrix".into(),
            }),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let n = self.shape[self.shape.len() - 1];
        self.data[i * n + j]
    }

    /// Row `i` of a matrix as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let n = *self.shape.last().expect("row() on a scalar");
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2().map_err(|_| Error::dim("matmul", &self.shape, &other.shape))?;
        let (k2, n) = other.dims2().map_err(|_| Error::dim("matmul", &self.shape, &other.shape))?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// `self · otherᵀ`, the layout used by linear layers with `[out × in]` weights.
    pub fn matmul_bt(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2().map_err(|_| Error::dim("matmul_bt", &self.shape, &other.shape))?;
        let (n, k2) = other.dims2().map_err(|_| Error::dim("matmul_bt", &self.shape, &other.shape))?;
        if k != k2 {
            return Err(Error::dim("matmul_bt", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// Matrix-vector product for a matrix `[m × n]` and a vector of length `n`.
    pub fn matvec(&self, v: &Tensor) -> Result<Self> {
        let (m, n) = self.dims2().map_err(|_| Error::dim("matvec", &self.shape, &v.shape))?;
        if v.shape != [n] {
            return Err(Error::dim("matvec", &self.shape, &v.shape));
        }
        let out = (0..m)
            .map(|i| dot(&self.data[i * n..(i + 1) * n], &v.data))
            .collect();
        Ok(Self::from_parts(vec![m], out))
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_rows(&self) -> Self {
        let n = *self.shape.last().unwrap_or(&1);
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        Self::from_parts(self.shape.clone(), out)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over the unmasked entries of `row`; masked entries become exactly 0.
pub(crate) fn masked_softmax_in_place(row: &mut [f64], keep: &[bool]) {
    let max = row
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (v, &k) in row.iter_mut().zip(keep) {
        *v = if k { (*v - max).exp() } else { 0.0 };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Shape of a grouped 1-D convolution over `[T × C_in]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeometry {
    pub len: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub groups: usize,
}

impl Conv1dGeometry {
    pub fn new(x: &[usize], w: &[usize], groups: usize) -> Result<Self> {
        let (len, in_channels) = match *x {
            [t, c] => (t, c),
            _ => return Err(Error::dim("grouped_conv1d", x, w)),
        };
        let (out_channels, per_group, kernel_size) = match *w {
            [o, c, k] => (o, c, k),
            _ => return Err(Error::dim("grouped_conv1d", x, w)),
        };
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::Config(format!(
                "group count {groups} must divide input channels {in_channels} and output channels {out_channels}"
            )));
        }
        if kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel size {kernel_size} must be odd")));
        }
        if per_group != in_channels / groups {
            return Err(Error::dim("grouped_conv1d", x, w));
        }
        Ok(Self {
            len,
            in_channels,
            out_channels,
            kernel_size,
            groups,
        })
    }

    pub fn pad(&self) -> usize {
        (self.kernel_size - 1) / 2
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Visits every `(t, out_channel, in_channel, weight_index, input_time)` tap
    /// that lands inside the zero-padded input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (cin, cout, k, pad) = (self.in_per_group(), self.out_per_group(), self.kernel_size, self.pad());
        for t in 0..self.len {
            for o in 0..self.out_channels {
                let g = o / cout;
                for cl in 0..cin {
                    let ci = g * cin + cl;
                    for j in 0..k {
                        let src = t + j;
                        if src < pad || src - pad >= self.len {
                            continue;
                        }
                        f(t, o, ci, (o * cin + cl) * k + j, src - pad);
                    }
                }
            }
        }
    }
}

pub(crate) fn conv1d_forward(geo: &Conv1dGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; geo.len * geo.out_channels];
    let (cin_total, cout_total) = (geo.in_channels, geo.out_channels);
    geo.for_each_tap(|t, o, ci, wi, src| {
        out[t * cout_total + o] += w[wi] * x[src * cin_total + ci];
    });
    out
}

pub(crate) fn conv1d_backward(geo: &Conv1dGeometry, x: &[f64], w: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let (cin_total, cout_total) = (geo.in_channels, geo.out_channels);
    geo.for_each_tap(|t, o, ci, wi, src| {
        let go = g[t * cout_total + o];
        gx[src * cin_total + ci] += go * w[wi];
        gw[wi] += go * x[src * cin_total + ci];
    });
    (gx, gw)
}

/// Grouped 1-D temporal convolution with zero "same" padding.
///
/// `x` is `[T × C_in]`, `weights` is `[C_out × C_in/groups × kernel_size]`; output
/// channel `o` reads only the input channels of group `o / (C_out/groups)`.
pub fn grouped_conv1d(x: &Tensor, weights: &Tensor, groups: usize) -> Result<Tensor> {
    let geo = Conv1dGeometry::new(x.shape(), weights.shape(), groups)?;
    let out = conv1d_forward(&geo, x.data(), weights.data());
    Ok(Tensor::from_parts(vec![geo.len, geo.out_channels], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at2(i, p) * b.at2(p, j);
                }
                out[i * n + j] = s;
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let b = Tensor::from_rows(&[vec![3.0, 5.0], vec![7.0, 9.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&b).unwrap(), b);
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(a.matmul(&c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (m, k, n) in [(5, 4, 3), (1, 7, 2), (32, 32, 32), (9, 1, 13)] {
            let a = Tensor::normal(vec![m, k], 1.0, &mut rng);
            let b = Tensor::normal(vec![k, n], 1.0, &mut rng);
            let got = a.matmul(&b).unwrap();
            let want = naive_matmul(&a, &b);
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
            }
            let bt = b.transpose().unwrap();
            let got_bt = a.matmul_bt(&bt).unwrap();
            assert!(got_bt.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn rejects_non_finite_and_bad_lengths() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn softmax_rows_cases() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 1000.0]]).unwrap();
        let s = t.softmax_rows();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);

        let r = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap().softmax_rows();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in r.data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_zero_delta_and_box_kernels() {
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let zero = Tensor::zeros(vec![1, 1, 3]);
        assert_eq!(grouped_conv1d(&x, &zero, 1).unwrap().data(), &[0.0; 4]);
        let delta = Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(grouped_conv1d(&x, &delta, 1).unwrap(), x);
        let boxk = Tensor::ones(vec![1, 1, 3]);
        assert_eq!(grouped_conv1d(&x, &boxk, 1).unwrap().data(), &[3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn conv_groups_are_isolated() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::normal(vec![6, 4], 1.0, &mut rng);
        let w = Tensor::normal(vec![4, 2, 3], 1.0, &mut rng);
        let y = grouped_conv1d(&x, &w, 2).unwrap();
        // Perturbing channel 3 (group 1) must leave group 0 outputs untouched.
        let mut x2 = x.clone();
        x2.data_mut()[2 * 4 + 3] += 1.0;
        let y2 = grouped_conv1d(&x2, &w, 2).unwrap();
        for t in 0..6 {
            for o in 0..2 {
                assert_eq!(y.at2(t, o), y2.at2(t, o));
            }
        }
        assert!(y.max_abs_diff(&y2) > 0.0);
    }

    #[test]
    fn conv_config_errors() {
        let x = Tensor::zeros(vec![5, 3]);
        assert!(matches!(
            grouped_conv1d(&x, &Tensor::zeros(vec![3, 1, 3]), 2),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            grouped_conv1d(&x, &Tensor::zeros(vec![3, 1, 2]), 3),
            Err(Error::Config(_))
        ));
    }
}
