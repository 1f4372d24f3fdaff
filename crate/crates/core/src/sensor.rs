//! Physical forward model of the jot sensor.
//!
//! A latent image `x` (expected photoelectrons per pixel per frame) is mapped
//! to the jot-grid exposure `λ = Hx`, where `H` replicates each image pixel
//! onto an `s × s` block of jots and convolves the result with the optical
//! PSF (reflective boundaries). Each frame draws an independent Poisson count
//! per jot and reports a 1 wherever the count reaches the jot's threshold.

use ndarray::{Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::likelihood::ln_factorial;
use crate::par;

/// Non-negative latent image with a declared dynamic-range peak.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    data: Array2<f64>,
    peak: f64,
}

impl IntensityImage {
    pub fn new(data: Array2<f64>, peak: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("image has no pixels"));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!(
                "image values must be finite and non-negative, found {v}"
            )));
        }
        let max = data.iter().cloned().fold(0.0, f64::max);
        if !(peak > 0.0 && peak.is_finite()) || peak < max {
            return Err(Error::invalid(format!(
                "peak {peak} must be positive and at least the image maximum {max}"
            )));
        }
        Ok(Self { data, peak })
    }

    /// Wraps `data`, declaring its maximum (or 1 for an all-zero image) as peak.
    pub fn with_data_peak(data: Array2<f64>) -> Result<Self> {
        let max = data.iter().cloned().fold(0.0, f64::max);
        let peak = if max > 0.0 { max } else { 1.0 };
        Self::new(data, peak)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn peak(&self) -> f64 {
        self.peak
    }

    /// `(rows, cols)`.
    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }
}

/// Normalized, non-negative 2-D point spread function with odd side lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Psf {
    kernel: Array2<f64>,
    /// Symmetric 1-D factor when the kernel is an outer product of it with itself.
    separable: Option<Vec<f64>>,
}

impl Psf {
    pub fn identity() -> Self {
        Self {
            kernel: Array2::ones((1, 1)),
            separable: Some(vec![1.0]),
        }
    }

    /// Gaussian of standard deviation `sigma` (in jot pixels), truncated at
    /// `3σ` and renormalized. `sigma = 0` gives the identity.
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("psf sigma must be >= 0, got {sigma}")));
        }
        if sigma == 0.0 {
            return Ok(Self::identity());
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut taps: Vec<f64> = (-radius..=radius)
            .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= total);
        let n = taps.len();
        let kernel = Array2::from_shape_fn((n, n), |(i, j)| taps[i] * taps[j]);
        Ok(Self {
            kernel,
            separable: Some(taps),
        })
    }

    /// Arbitrary kernel; it is rescaled to unit sum.
    pub fn from_kernel(kernel: Array2<f64>) -> Result<Self> {
        let (r, c) = kernel.dim();
        if r % 2 == 0 || c % 2 == 0 {
            return Err(Error::invalid(format!("psf dimensions must be odd, got {r}x{c}")));
        }
        if kernel.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("psf entries must be finite and non-negative"));
        }
        let total = kernel.sum();
        if total <= 0.0 {
            return Err(Error::invalid("psf must have positive mass"));
        }
        Ok(Self {
            kernel: kernel / total,
            separable: None,
        })
    }

    pub fn kernel(&self) -> &Array2<f64> {
        &self.kernel
    }

    pub fn is_identity(&self) -> bool {
        self.kernel.dim() == (1, 1)
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// A linear map between flat row-major buffers, together with its adjoint.
pub trait LinearOperator: Sync {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn apply_into(&self, x: &[f64], out: &mut [f64]);
    fn adjoint_into(&self, v: &[f64], out: &mut [f64]);

    fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_len()];
        self.apply_into(x, &mut out);
        out
    }

    fn adjoint_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.input_len()];
        self.adjoint_into(v, &mut out);
        out
    }

    /// Largest singular value estimated by power iteration on `HᵀH`.
    fn norm_estimate(&self, iters: usize) -> f64 {
        let n = self.input_len();
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * ((i * 7919) % 13) as f64).collect();
        let mut sigma2 = 0.0;
        for _ in 0..iters {
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nv == 0.0 {
                return 0.0;
            }
            v.iter_mut().for_each(|a| *a /= nv);
            let w = self.adjoint_vec(&self.apply_vec(&v));
            sigma2 = w.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
            v = w;
        }
        sigma2.max(0.0).sqrt()
    }
}

/// `H`: replication upsampling by `oversampling` followed by PSF convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOperator {
    oversampling: usize,
    psf: Psf,
    image_dims: (usize, usize),
}

impl ForwardOperator {
    pub fn new(image_dims: (usize, usize), oversampling: usize, psf: Psf) -> Result<Self> {
        if oversampling == 0 {
            return Err(Error::invalid("oversampling must be >= 1"));
        }
        if image_dims.0 == 0 || image_dims.1 == 0 {
            return Err(Error::invalid("image dimensions must be non-zero"));
        }
        Ok(Self {
            oversampling,
            psf,
            image_dims,
        })
    }

    /// Gaussian PSF with the default width `σ = 0.5·s` when `sigma` is `None`.
    pub fn gaussian(image_dims: (usize, usize), oversampling: usize, sigma: Option<f64>) -> Result<Self> {
        let sigma = sigma.unwrap_or(0.5 * oversampling as f64);
        Self::new(image_dims, oversampling, Psf::gaussian(sigma)?)
    }

    pub fn identity(image_dims: (usize, usize)) -> Result<Self> {
        Self::new(image_dims, 1, Psf::identity())
    }

    pub fn oversampling(&self) -> usize {
        self.oversampling
    }

    pub fn psf(&self) -> &Psf {
        &self.psf
    }

    pub fn image_dims(&self) -> (usize, usize) {
        self.image_dims
    }

    pub fn jot_dims(&self) -> (usize, usize) {
        (
            self.image_dims.0 * self.oversampling,
            self.image_dims.1 * self.oversampling,
        )
    }

    /// The same optics on a different image size (e.g. a single patch).
    pub fn with_image_dims(&self, image_dims: (usize, usize)) -> Result<Self> {
        Self::new(image_dims, self.oversampling, self.psf.clone())
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.dim() != self.image_dims {
            return Err(Error::dims("apply_forward", self.image_dims, x.dim()));
        }
        let x = x.as_standard_layout();
        let mut out = Array2::zeros(self.jot_dims());
        self.apply_into(x.as_slice().unwrap(), out.as_slice_mut().unwrap());
        Ok(out)
    }

    pub fn adjoint(&self, v: ArrayView2<f64>) -> Result<Array2<f64>> {
        if v.dim() != self.jot_dims() {
            return Err(Error::dims("apply_adjoint", self.jot_dims(), v.dim()));
        }
        let v = v.as_standard_layout();
        let mut out = Array2::zeros(self.image_dims);
        self.adjoint_into(v.as_slice().unwrap(), out.as_slice_mut().unwrap());
        Ok(out)
    }

    /// Explicit `(jots × pixels)` matrix of the operator.
    pub fn to_dense(&self) -> DenseOperator {
        let n_in = self.input_len();
        let n_out = self.output_len();
        let mut matrix = Array2::zeros((n_out, n_in));
        let mut unit = vec![0.0; n_in];
        let mut col = vec![0.0; n_out];
        for p in 0..n_in {
            unit[p] = 1.0;
            self.apply_into(&unit, &mut col);
            unit[p] = 0.0;
            for (j, v) in col.iter().enumerate() {
                matrix[[j, p]] = *v;
            }
        }
        DenseOperator { matrix }
    }

    fn upsample(&self, x: &[f64], out: &mut [f64]) {
        let s = self.oversampling;
        let (rows, cols) = self.image_dims;
        let jc = cols * s;
        for r in 0..rows * s {
            let src = &x[(r / s) * cols..(r / s + 1) * cols];
            let dst = &mut out[r * jc..(r + 1) * jc];
            for (c, d) in dst.iter_mut().enumerate() {
                *d = src[c / s];
            }
        }
    }

    fn downsample_sum(&self, v: &[f64], out: &mut [f64]) {
        let s = self.oversampling;
        let (rows, cols) = self.image_dims;
        let jc = cols * s;
        out.iter_mut().for_each(|o| *o = 0.0);
        for r in 0..rows * s {
            let src = &v[r * jc..(r + 1) * jc];
            let dst = &mut out[(r / s) * cols..(r / s + 1) * cols];
            for (c, val) in src.iter().enumerate() {
                dst[c / s] += val;
            }
        }
    }

    fn convolve(&self, u: &[f64], out: &mut [f64], adjoint: bool) {
        let (rows, cols) = self.jot_dims();
        if self.psf.is_identity() {
            out.copy_from_slice(u);
            return;
        }
        if let Some(taps) = &self.psf.separable {
            let mut tmp = vec![0.0; rows * cols];
            if adjoint {
                conv_cols(taps, u, &mut tmp, rows, cols, true);
                conv_rows(taps, &tmp, out, rows, cols, true);
            } else {
                conv_rows(taps, u, &mut tmp, rows, cols, false);
                conv_cols(taps, &tmp, out, rows, cols, false);
            }
            return;
        }
        let k = &self.psf.kernel;
        let (kr, kc) = k.dim();
        let (cr, cc) = ((kr / 2) as isize, (kc / 2) as isize);
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..rows {
            for j in 0..cols {
                let mut acc = 0.0;
                for a in 0..kr {
                    let si = reflect(i as isize + cr - a as isize, rows);
                    for b in 0..kc {
                        let sj = reflect(j as isize + cc - b as isize, cols);
                        let w = k[[a, b]];
                        if adjoint {
                            out[si * cols + sj] += w * u[i * cols + j];
                        } else {
                            acc += w * u[si * cols + sj];
                        }
                    }
                }
                if !adjoint {
                    out[i * cols + j] = acc;
                }
            }
        }
    }
}

fn conv_rows(taps: &[f64], u: &[f64], out: &mut [f64], rows: usize, cols: usize, adjoint: bool) {
    let r = (taps.len() / 2) as isize;
    if adjoint {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    for i in 0..rows {
        let src = &u[i * cols..(i + 1) * cols];
        let dst = &mut out[i * cols..(i + 1) * cols];
        for j in 0..cols {
            if adjoint {
                for (t, w) in taps.iter().enumerate() {
                    dst[reflect(j as isize + r - t as isize, cols)] += w * src[j];
                }
            } else {
                dst[j] = taps
                    .iter()
                    .enumerate()
                    .map(|(t, w)| w * src[reflect(j as isize + r - t as isize, cols)])
                    .sum();
            }
        }
    }
}

fn conv_cols(taps: &[f64], u: &[f64], out: &mut [f64], rows: usize, cols: usize, adjoint: bool) {
    let r = (taps.len() / 2) as isize;
    out.iter_mut().for_each(|o| *o = 0.0);
    for i in 0..rows {
        for (t, w) in taps.iter().enumerate() {
            let si = reflect(i as isize + r - t as isize, rows);
            if adjoint {
                for j in 0..cols {
                    out[si * cols + j] += w * u[i * cols + j];
                }
            } else {
                for j in 0..cols {
                    out[i * cols + j] += w * u[si * cols + j];
                }
            }
        }
    }
}

impl LinearOperator for ForwardOperator {
    fn input_len(&self) -> usize {
        self.image_dims.0 * self.image_dims.1
    }

    fn output_len(&self) -> usize {
        let (r, c) = self.jot_dims();
        r * c
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let mut up = vec![0.0; self.output_len()];
        self.upsample(x, &mut up);
        self.convolve(&up, out, false);
    }

    fn adjoint_into(&self, v: &[f64], out: &mut [f64]) {
        let mut back = vec![0.0; self.output_len()];
        self.convolve(v, &mut back, true);
        self.downsample_sum(&back, out);
    }
}

/// Explicit matrix form of a (small) forward operator, e.g. for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    pub matrix: Array2<f64>,
}

impl LinearOperator for DenseOperator {
    fn input_len(&self) -> usize {
        self.matrix.ncols()
    }

    fn output_len(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.matrix.rows()) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    fn adjoint_into(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (vi, row) in v.iter().zip(self.matrix.rows()) {
            if *vi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(row.iter()) {
                *o += a * vi;
            }
        }
    }
}

/// `λ = Hx` on the jot grid.
pub fn apply_forward(op: &ForwardOperator, x: &IntensityImage) -> Result<Array2<f64>> {
    op.apply(x.data().view())
}

/// `Hᵀv` on the image grid.
pub fn apply_adjoint(op: &ForwardOperator, v: ArrayView2<f64>) -> Result<Array2<f64>> {
    op.adjoint(v)
}

/// Per-jot integer thresholds, constant across frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdMap {
    data: Array2<u16>,
}

impl ThresholdMap {
    pub fn new(data: Array2<u16>) -> Result<Self> {
        if data.iter().any(|q| *q == 0) {
            return Err(Error::invalid("thresholds must be >= 1"));
        }
        Ok(Self { data })
    }

    pub fn constant(dims: (usize, usize), q: u16) -> Result<Self> {
        Self::new(Array2::from_elem(dims, q))
    }

    pub fn data(&self) -> &Array2<u16> {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }
}

/// How threshold values are laid out over the jot grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ThresholdLayout {
    /// `values[i mod len]` at row-major raster index `i`.
    #[default]
    RowMajorCycle,
}

pub fn make_threshold_pattern(
    jot_dims: (usize, usize),
    values: &[u16],
    layout: ThresholdLayout,
) -> Result<ThresholdMap> {
    if values.is_empty() {
        return Err(Error::invalid("threshold value list is empty"));
    }
    if values.contains(&0) {
        return Err(Error::invalid("threshold values must be >= 1"));
    }
    let cols = jot_dims.1;
    let data = match layout {
        ThresholdLayout::RowMajorCycle => {
            Array2::from_shape_fn(jot_dims, |(r, c)| values[(r * cols + c) % values.len()])
        }
    };
    ThresholdMap::new(data)
}

/// K binary frames on the jot grid plus the thresholds that produced them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryFrameStack {
    frames: Array3<u8>,
    thresholds: ThresholdMap,
}

impl BinaryFrameStack {
    /// `frames` has shape `(K, rows, cols)` with entries in `{0, 1}`.
    pub fn new(frames: Array3<u8>, thresholds: ThresholdMap) -> Result<Self> {
        let (k, r, c) = frames.dim();
        if k == 0 {
            return Err(Error::invalid("frame stack must contain at least one frame"));
        }
        if (r, c) != thresholds.dims() {
            return Err(Error::dims("frame stack", thresholds.dims(), (r, c)));
        }
        if frames.iter().any(|b| *b > 1) {
            return Err(Error::invalid("frame entries must be 0 or 1"));
        }
        Ok(Self { frames, thresholds })
    }

    pub fn frames(&self) -> &Array3<u8> {
        &self.frames
    }

    pub fn thresholds(&self) -> &ThresholdMap {
        &self.thresholds
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.thresholds.dims()
    }

    /// Fraction of measurements that are 1.
    pub fn on_fraction(&self) -> f64 {
        let ones: usize = self.frames.iter().map(|b| *b as usize).sum();
        ones as f64 / self.frames.len() as f64
    }
}

/// Seed plus the index of the next unused RNG stream. Each simulated frame
/// consumes one stream, so results do not depend on how frames are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    /// Generator for stream `self.stream + offset`.
    pub fn stream_rng(&self, offset: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream.wrapping_add(offset));
        rng
    }

    pub fn advance(&mut self, streams: u64) {
        self.stream = self.stream.wrapping_add(streams);
    }
}

const INVERSION_LIMIT: f64 = 30.0;

/// One Poisson(λ) draw: sequential-search inversion below λ = 30, PTRS
/// transformed rejection above.
pub fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u32 {
    if lambda <= 0.0 {
        0
    } else if lambda < INVERSION_LIMIT {
        poisson_inversion(rng, lambda)
    } else {
        poisson_ptrs(rng, lambda)
    }
}

fn poisson_inversion<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u32 {
    let u: f64 = rng.random();
    let mut k = 0u32;
    let mut p = (-lambda).exp();
    let mut cdf = p;
    while u > cdf {
        k += 1;
        p *= lambda / k as f64;
        let next = cdf + p;
        // rounding can stall the cdf just short of u deep in the tail
        if next == cdf {
            break;
        }
        cdf = next;
    }
    k
}

fn poisson_ptrs<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u32 {
    let slam = lambda.sqrt();
    let loglam = lambda.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u32;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln()
            <= -lambda + k * loglam - ln_factorial(k as u64)
        {
            return k as u32;
        }
    }
}

/// Photoelectron counts of shape `(K, rows, cols)` for the exposure `lambda`.
/// Frame `k` uses stream `rng.stream + k`; `rng` is advanced by `K`.
pub fn sample_counts(lambda: ArrayView2<f64>, frames: usize, rng: &mut RngState) -> Result<Array3<u32>> {
    if frames == 0 {
        return Err(Error::invalid("frame count must be >= 1"));
    }
    let (rows, cols) = lambda.dim();
    let lambda = lambda.as_standard_layout();
    let lam = lambda.as_slice().unwrap();
    let state = *rng;
    let planes = par::map_range(frames, |k| {
        let mut g = state.stream_rng(k as u64);
        lam.iter().map(|l| sample_poisson(&mut g, *l)).collect::<Vec<u32>>()
    });
    rng.advance(frames as u64);
    let flat: Vec<u32> = planes.into_iter().flatten().collect();
    Ok(Array3::from_shape_vec((frames, rows, cols), flat).expect("shape matches"))
}

/// `b = 1` wherever the count reaches the jot threshold.
pub fn threshold_counts(counts: &Array3<u32>, thresholds: &ThresholdMap) -> Result<BinaryFrameStack> {
    let (k, r, c) = counts.dim();
    if (r, c) != thresholds.dims() {
        return Err(Error::dims("threshold_counts", thresholds.dims(), (r, c)));
    }
    let q = thresholds.data();
    let frames = Array3::from_shape_fn((k, r, c), |(f, i, j)| (counts[[f, i, j]] >= q[[i, j]] as u32) as u8);
    BinaryFrameStack::new(frames, thresholds.clone())
}

/// Simulates `frames` binary frames of `x` seen through `op`.
pub fn simulate(
    x: &IntensityImage,
    op: &ForwardOperator,
    thresholds: &ThresholdMap,
    frames: usize,
    rng: &mut RngState,
) -> Result<BinaryFrameStack> {
    if frames == 0 {
        return Err(Error::invalid("frame count must be >= 1"));
    }
    if thresholds.dims() != op.jot_dims() {
        return Err(Error::dims("simulate thresholds", op.jot_dims(), thresholds.dims()));
    }
    let lambda = apply_forward(op, x)?;
    let counts = sample_counts(lambda.view(), frames, rng)?;
    threshold_counts(&counts, thresholds)
}
