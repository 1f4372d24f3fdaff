//! Sparse synthesis model `x = ρ(Dz)` over image patches.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column-atom dictionary over vectorized square patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: Array2<f64>,
}

const NORM_TOL: f64 = 1e-10;

impl Dictionary {
    /// Takes an `atom_dim × num_atoms` matrix whose columns already have unit norm.
    pub fn new(atoms: Array2<f64>) -> Result<Self> {
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dictionary atoms".into()));
        }
        let (n, m) = atoms.dim();
        if n == 0 || m == 0 {
            return Err(Error::invalid("dictionary must be non-empty"));
        }
        for (k, col) in atoms.columns().into_iter().enumerate() {
            let norm = col.dot(&col).sqrt();
            if (norm - 1.0).abs() > NORM_TOL {
                return Err(Error::invalid(format!("atom {k} has norm {norm}, expected 1")));
            }
        }
        Ok(Self { atoms })
    }

    /// Rescales every column to unit norm. Zero columns are rejected.
    pub fn normalized(mut atoms: Array2<f64>) -> Result<Self> {
        for (k, mut col) in atoms.columns_mut().into_iter().enumerate() {
            let norm = col.dot(&col).sqrt();
            if !(norm > 0.0) {
                return Err(Error::Degenerate(format!("atom {k} is zero")));
            }
            col.mapv_inplace(|v| v / norm);
        }
        Self::new(atoms)
    }

    pub fn atoms(&self) -> &Array2<f64> {
        &self.atoms
    }

    pub fn atom_dim(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.ncols()
    }

    /// Side length when the atoms are square patches.
    pub fn patch_side(&self) -> Option<usize> {
        let n = self.atom_dim();
        let side = (n as f64).sqrt().round() as usize;
        (side * side == n).then_some(side)
    }

    pub fn apply(&self, z: ArrayView1<f64>) -> Array1<f64> {
        self.atoms.dot(&z)
    }

    pub fn apply_transpose(&self, v: ArrayView1<f64>) -> Array1<f64> {
        self.atoms.t().dot(&v)
    }

    /// Spectral norm `‖D‖₂` by power iteration on `DᵀD`.
    pub fn spectral_norm(&self) -> f64 {
        let gram = self.atoms.t().dot(&self.atoms);
        let m = gram.nrows();
        let mut v = Array1::from_elem(m, 1.0 / (m as f64).sqrt());
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = gram.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            let next = w.dot(&v);
            v = w / norm;
            if (next - lambda).abs() <= 1e-13 * next.abs() {
                lambda = next;
                break;
            }
            lambda = next;
        }
        lambda.max(0.0).sqrt()
    }
}

/// Elementwise non-negativity map `ρ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Nonlinearity {
    /// `ρ(t) = log(1 + e^{βt}) / β`.
    Softplus { beta: f64 },
    /// `ρ(t) = t`. For tests and linear-model checks only.
    Identity,
}

impl Default for Nonlinearity {
    fn default() -> Self {
        Nonlinearity::Softplus { beta: 10.0 }
    }
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Nonlinearity {
    pub fn softplus(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("softplus sharpness must be > 0, got {beta}")));
        }
        Ok(Nonlinearity::Softplus { beta })
    }

    #[inline]
    pub fn rho(&self, t: f64) -> f64 {
        match *self {
            Nonlinearity::Identity => t,
            Nonlinearity::Softplus { beta } => {
                let bt = beta * t;
                if bt > 0.0 {
                    t + (-bt).exp().ln_1p() / beta
                } else {
                    bt.exp().ln_1p() / beta
                }
            }
        }
    }

    #[inline]
    pub fn rho_prime(&self, t: f64) -> f64 {
        match *self {
            Nonlinearity::Identity => 1.0,
            Nonlinearity::Softplus { beta } => logistic(beta * t),
        }
    }

    #[inline]
    pub fn rho_second(&self, t: f64) -> f64 {
        match *self {
            Nonlinearity::Identity => 0.0,
            Nonlinearity::Softplus { beta } => {
                let s = logistic(beta * t);
                let sc = logistic(-beta * t);
                beta * s * sc
            }
        }
    }

    /// Inverse of `ρ` on its range; `y` must be positive for softplus.
    pub fn rho_inverse(&self, y: f64) -> Result<f64> {
        match *self {
            Nonlinearity::Identity => Ok(y),
            Nonlinearity::Softplus { beta } => {
                if !(y > 0.0) {
                    return Err(Error::invalid(format!("softplus inverse needs y > 0, got {y}")));
                }
                Ok(y + (-(-beta * y).exp_m1()).ln() / beta)
            }
        }
    }

    pub fn apply(&self, codes: ArrayView1<f64>) -> Array1<f64> {
        codes.mapv(|t| self.rho(t))
    }

    pub fn apply_prime(&self, codes: ArrayView1<f64>) -> Array1<f64> {
        codes.mapv(|t| self.rho_prime(t))
    }
}

pub fn rho(nl: &Nonlinearity, codes: ArrayView1<f64>) -> Array1<f64> {
    nl.apply(codes)
}

pub fn rho_prime(nl: &Nonlinearity, codes: ArrayView1<f64>) -> Array1<f64> {
    nl.apply_prime(codes)
}

/// Patch intensities `ρ(Dz)`.
pub fn synthesize(dict: &Dictionary, z: ArrayView1<f64>, nl: &Nonlinearity) -> Result<Array1<f64>> {
    if z.len() != dict.num_atoms() {
        return Err(Error::dims("synthesize code", dict.num_atoms(), z.len()));
    }
    let mut out = dict.apply(z);
    out.mapv_inplace(|t| nl.rho(t));
    Ok(out)
}

/// Square patch placement over an image: stride-spaced positions with the
/// last position on each axis moved to touch the border.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    patch_side: usize,
    stride: usize,
    image_dims: (usize, usize),
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn axis_positions(len: usize, side: usize, stride: usize) -> Vec<usize> {
    let last = len - side;
    let mut pos: Vec<usize> = (0..=last).step_by(stride).collect();
    if *pos.last().unwrap() != last {
        pos.push(last);
    }
    pos
}

impl PatchGrid {
    pub fn new(image_dims: (usize, usize), patch_side: usize, stride: usize) -> Result<Self> {
        if patch_side == 0 || stride == 0 {
            return Err(Error::invalid("patch side and stride must be >= 1"));
        }
        if image_dims.0 < patch_side || image_dims.1 < patch_side {
            return Err(Error::invalid(format!(
                "image {}x{} is smaller than the {patch_side}x{patch_side} patch",
                image_dims.0, image_dims.1
            )));
        }
        Ok(Self {
            patch_side,
            stride,
            image_dims,
            rows: axis_positions(image_dims.0, patch_side, stride),
            cols: axis_positions(image_dims.1, patch_side, stride),
        })
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn image_dims(&self) -> (usize, usize) {
        self.image_dims
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-left corners in row-major order.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.rows
            .iter()
            .flat_map(|r| self.cols.iter().map(move |c| (*r, *c)))
            .collect()
    }
}

/// Row-major vectorized patches at every grid position.
pub fn extract_patches(img: &Array2<f64>, grid: &PatchGrid) -> Result<Vec<Array1<f64>>> {
    if img.dim() != grid.image_dims() {
        return Err(Error::dims("extract_patches", grid.image_dims(), img.dim()));
    }
    let s = grid.patch_side();
    Ok(grid
        .positions()
        .into_iter()
        .map(|(r, c)| {
            img.slice(ndarray::s![r..r + s, c..c + s])
                .iter()
                .cloned()
                .collect::<Array1<f64>>()
        })
        .collect())
}

/// Each pixel becomes the mean of every patch value covering it.
///
/// Accumulates a running mean in grid order, so a pixel whose covering
/// values are all equal reproduces that value exactly.
pub fn average_patches(patches: &[Array1<f64>], grid: &PatchGrid) -> Result<Array2<f64>> {
    if patches.len() != grid.len() {
        return Err(Error::dims("average_patches count", grid.len(), patches.len()));
    }
    let s = grid.patch_side();
    let mut mean = Array2::<f64>::zeros(grid.image_dims());
    let mut count = Array2::<u32>::zeros(grid.image_dims());
    for (patch, (r, c)) in patches.iter().zip(grid.positions()) {
        if patch.len() != s * s {
            return Err(Error::dims("average_patches patch", s * s, patch.len()));
        }
        for i in 0..s {
            for j in 0..s {
                let n = &mut count[[r + i, c + j]];
                *n += 1;
                let m = &mut mean[[r + i, c + j]];
                *m += (patch[i * s + j] - *m) / *n as f64;
            }
        }
    }
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dict(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Dictionary {
        Dictionary::normalized(Array2::from_shape_fn((n, m), |_| rng.random::<f64>() - 0.5)).unwrap()
    }

    #[test]
    fn softplus_values() {
        let nl = Nonlinearity::Softplus { beta: 1.0 };
        assert!((nl.rho(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
        for beta in [0.5, 1.0, 10.0] {
            let nl = Nonlinearity::softplus(beta).unwrap();
            assert_eq!(nl.rho_prime(0.0), 0.5);
            assert!((nl.rho(0.0) - std::f64::consts::LN_2 / beta).abs() < 1e-16);
        }
        let nl = Nonlinearity::Softplus { beta: 10.0 };
        let tiny = (-50f64).exp();
        assert!((nl.rho(-5.0) - tiny / 10.0).abs() <= 1e-12 * tiny);
        assert!((nl.rho_prime(-5.0) - tiny).abs() <= 1e-12 * tiny);
        assert!(nl.rho(-5.0) > 1.9e-23 && nl.rho(-5.0) < 2.0e-23);
        // no overflow far out
        assert_eq!(nl.rho(1e6), 1e6);
        assert!(nl.rho(-1e6) >= 0.0);
        assert!(Nonlinearity::softplus(0.0).is_err());
    }

    #[test]
    fn softplus_derivatives_match_finite_differences() {
        let nl = Nonlinearity::default();
        let h = 1e-6;
        for i in 0..=400 {
            let t = -20.0 + 0.1 * i as f64;
            let fd = (nl.rho(t + h) - nl.rho(t - h)) / (2.0 * h);
            assert!((fd - nl.rho_prime(t)).abs() <= 1e-7, "t={t}");
            let fd2 = (nl.rho_prime(t + h) - nl.rho_prime(t - h)) / (2.0 * h);
            assert!((fd2 - nl.rho_second(t)).abs() <= 1e-6, "t={t}");
            if i > 0 {
                assert!(nl.rho(t) >= nl.rho(t - 0.1));
            }
        }
    }

    #[test]
    fn softplus_inverse() {
        let nl = Nonlinearity::default();
        for y in [1e-3, 0.05, 1.0, 10.0, 1e4] {
            let t = nl.rho_inverse(y).unwrap();
            assert!((nl.rho(t) - y).abs() <= 1e-12 * y.max(1.0));
        }
        assert!(nl.rho_inverse(0.0).is_err());
    }

    #[test]
    fn synthesize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = random_dict(&mut rng, 64, 128);
        let nl = Nonlinearity::default();
        let x = synthesize(&d, Array1::zeros(128).view(), &nl).unwrap();
        assert!(x.iter().all(|v| *v == nl.rho(0.0)));

        let mut e = Array1::zeros(128);
        e[17] = 1.0;
        let atom = synthesize(&d, e.view(), &Nonlinearity::Identity).unwrap();
        assert_eq!(atom, d.atoms().column(17).to_owned());

        let z = Array1::from_shape_fn(128, |_| rng.random::<f64>() * 2.0 - 1.0);
        let got = synthesize(&d, z.view(), &Nonlinearity::Identity).unwrap();
        for i in 0..64 {
            let mut want = 0.0;
            for k in 0..128 {
                want += d.atoms()[[i, k]] * z[k];
            }
            assert!((got[i] - want).abs() <= 1e-14 * want.abs().max(1.0));
        }
        assert!(synthesize(&d, Array1::zeros(3).view(), &nl).is_err());
    }

    #[test]
    fn synthesize_is_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_dict(&mut rng, 16, 48);
        let norm = d.spectral_norm();
        let nl = Nonlinearity::default();
        for _ in 0..200 {
            let z1 = Array1::from_shape_fn(48, |_| rng.random::<f64>() * 4.0 - 2.0);
            let z2 = Array1::from_shape_fn(48, |_| rng.random::<f64>() * 4.0 - 2.0);
            let a = synthesize(&d, z1.view(), &nl).unwrap();
            let b = synthesize(&d, z2.view(), &nl).unwrap();
            let lhs = (&a - &b).mapv(|v| v * v).sum().sqrt();
            let rhs = norm * (&z1 - &z2).mapv(|v| v * v).sum().sqrt();
            assert!(lhs <= rhs * (1.0 + 1e-12));
        }
    }

    #[test]
    fn dictionary_validation() {
        assert!(Dictionary::new(array![[1.0, 0.5], [0.0, 0.5]]).is_err());
        assert!(Dictionary::new(array![[1.0, f64::NAN], [0.0, 1.0]]).is_err());
        assert!(Dictionary::normalized(array![[1.0, 0.0], [0.0, 0.0]]).is_err());
        let d = Dictionary::normalized(array![[3.0, 0.0], [4.0, 2.0]]).unwrap();
        assert_eq!(d.atoms()[[0, 0]], 0.6);
        assert_eq!(d.patch_side(), None);
    }

    #[test]
    fn spectral_norm_of_orthonormal_is_one() {
        let d = Dictionary::new(Array2::eye(9)).unwrap();
        assert!((d.spectral_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn patch_counts() {
        let g = PatchGrid::new((8, 8), 8, 1).unwrap();
        assert_eq!(g.len(), 1);
        let g = PatchGrid::new((9, 9), 8, 1).unwrap();
        assert_eq!(g.len(), 4);
        let g = PatchGrid::new((16, 16), 8, 4).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g.positions()[..3], [(0, 0), (0, 4), (0, 8)]);
        let g = PatchGrid::new((10, 13), 8, 4).unwrap();
        assert_eq!(g.positions().last(), Some(&(2, 5)));
        assert!(PatchGrid::new((7, 9), 8, 1).is_err());
    }

    #[test]
    fn single_patch_round_trip() {
        let img = Array2::from_shape_fn((8, 8), |(i, j)| (i * 8 + j) as f64);
        let g = PatchGrid::new((8, 8), 8, 1).unwrap();
        let p = extract_patches(&img, &g).unwrap();
        assert_eq!(p[0].as_slice().unwrap(), img.as_slice().unwrap());
        assert_eq!(average_patches(&p, &g).unwrap(), img);
    }

    #[test]
    fn averaging_examples() {
        let g = PatchGrid::new((9, 9), 8, 1).unwrap();
        let p: Vec<Array1<f64>> = (1..=4).map(|v| Array1::from_elem(64, v as f64)).collect();
        let img = average_patches(&p, &g).unwrap();
        assert_eq!(img[[4, 4]], 2.5);
        assert_eq!(img[[0, 0]], 1.0);
        assert_eq!(img[[8, 8]], 4.0);

        let c: Vec<Array1<f64>> = (0..4).map(|_| Array1::from_elem(64, 0.1)).collect();
        assert!(average_patches(&c, &g).unwrap().iter().all(|v| *v == 0.1));
        assert!(average_patches(&c[..3], &g).is_err());
    }

    #[test]
    fn extract_average_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (dims, stride) in [((20, 17), 1), ((32, 32), 3), ((12, 30), 5)] {
            let img = Array2::from_shape_fn(dims, |_| rng.random::<f64>() * 10.0);
            let g = PatchGrid::new(dims, 8, stride).unwrap();
            let p = extract_patches(&img, &g).unwrap();
            assert_eq!(average_patches(&p, &g).unwrap(), img);
        }
    }
}
