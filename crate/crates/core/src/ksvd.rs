//! Dictionary learning: orthogonal matching pursuit for the codes and k-SVD
//! rank-1 atom updates.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::sparse::Dictionary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KsvdConfig {
    pub num_atoms: usize,
    /// Maximum nonzeros per code.
    pub sparsity: usize,
    pub iterations: usize,
    pub seed: u64,
    pub replace_unused: bool,
}

impl Default for KsvdConfig {
    fn default() -> Self {
        Self {
            num_atoms: 256,
            sparsity: 8,
            iterations: 30,
            seed: 0,
            replace_unused: true,
        }
    }
}

/// Sparse code as `(atom, coefficient)` pairs in selection order.
pub type SparseCode = Vec<(usize, f64)>;

pub fn to_dense(code: &SparseCode, num_atoms: usize) -> Array1<f64> {
    let mut z = Array1::zeros(num_atoms);
    for &(j, v) in code {
        z[j] = v;
    }
    z
}

/// OMP against a precomputed Gram matrix.
///
/// `dty` is `Dᵀy` and `yy` is `‖y‖²`. Returns the code and its squared
/// residual norm. The Cholesky factor of the selected Gram block grows one
/// row per step.
fn omp_gram(gram: &Array2<f64>, dty: ArrayView1<f64>, yy: f64, t0: usize) -> (SparseCode, f64) {
    let m = gram.nrows();
    let mut support: Vec<usize> = Vec::with_capacity(t0);
    let mut chol: Vec<Vec<f64>> = Vec::with_capacity(t0);
    let mut coef: Vec<f64> = Vec::new();
    let mut corr = dty.to_owned();
    let mut err = yy;
    let tol = 1e-24 * yy.max(f64::MIN_POSITIVE);
    while support.len() < t0 && err > tol {
        let mut best = None;
        let mut best_abs = 0.0;
        for j in 0..m {
            let a = corr[j].abs();
            if a > best_abs && !support.contains(&j) {
                best_abs = a;
                best = Some(j);
            }
        }
        let Some(j) = best else { break };
        if best_abs <= 1e-14 * yy.sqrt() {
            break;
        }
        // new Cholesky row: L w = G_{S,j}, d = sqrt(G_jj − ‖w‖²)
        let k = support.len();
        let mut w = vec![0.0; k];
        for r in 0..k {
            let mut s = gram[[support[r], j]];
            for c in 0..r {
                s -= chol[r][c] * w[c];
            }
            w[r] = s / chol[r][r];
        }
        let d2 = gram[[j, j]] - w.iter().map(|v| v * v).sum::<f64>();
        if d2 <= 1e-12 {
            break;
        }
        w.push(d2.sqrt());
        chol.push(w);
        support.push(j);

        // refit: L Lᵀ x = (Dᵀy)_S
        let n = support.len();
        let mut tmp = vec![0.0; n];
        for r in 0..n {
            let mut s = dty[support[r]];
            for c in 0..r {
                s -= chol[r][c] * tmp[c];
            }
            tmp[r] = s / chol[r][r];
        }
        coef = vec![0.0; n];
        for r in (0..n).rev() {
            let mut s = tmp[r];
            for c in r + 1..n {
                s -= chol[c][r] * coef[c];
            }
            coef[r] = s / chol[r][r];
        }
        // corr = Dᵀy − G_{:,S} x ; err = ‖y‖² − x·(Dᵀy)_S
        corr.assign(&dty);
        for (&s, &x) in support.iter().zip(&coef) {
            corr.scaled_add(-x, &gram.column(s));
        }
        let fit: f64 = support.iter().zip(&coef).map(|(&s, &x)| x * dty[s]).sum();
        err = (yy - fit).max(0.0);
    }
    (support.into_iter().zip(coef).collect(), err)
}

/// Greedy sparse coding of `y` with at most `t0` atoms.
pub fn omp(dict: &Dictionary, y: ArrayView1<f64>, t0: usize) -> Result<Array1<f64>> {
    if y.len() != dict.atom_dim() {
        return Err(Error::dims("omp signal", dict.atom_dim(), y.len()));
    }
    let d = dict.atoms();
    let gram = d.t().dot(d);
    let dty = d.t().dot(&y);
    let (code, _) = omp_gram(&gram, dty.view(), y.dot(&y), t0.min(dict.atom_dim()));
    Ok(to_dense(&code, dict.num_atoms()))
}

/// Seeded random unit-norm initialization.
pub fn random_dictionary(atom_dim: usize, num_atoms: usize, seed: u64) -> Result<Dictionary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atoms = Array2::from_shape_simple_fn((num_atoms, atom_dim), || StandardNormal.sample(&mut rng))
        .reversed_axes()
        .as_standard_layout()
        .to_owned();
    Dictionary::normalized(atoms)
}

#[derive(Debug, Clone)]
pub struct KsvdOutput {
    pub dictionary: Dictionary,
    /// `Σ‖y − Dz‖²` after each iteration.
    pub errors: Vec<f64>,
    /// Used atoms replaced for being near-duplicates, per iteration. Only
    /// these replacements can raise the error.
    pub purges: Vec<usize>,
}

const DUPLICATE_CORRELATION: f64 = 0.99;

pub fn ksvd_train(patches: &[Array1<f64>], cfg: &KsvdConfig) -> Result<Dictionary> {
    Ok(ksvd_train_with_history(patches, cfg)?.dictionary)
}

pub fn ksvd_train_with_history(patches: &[Array1<f64>], cfg: &KsvdConfig) -> Result<KsvdOutput> {
    let Some(first) = patches.first() else {
        return Err(Error::invalid("k-SVD needs training patches"));
    };
    let n = first.len();
    let m = cfg.num_atoms;
    if patches.iter().any(|p| p.len() != n) {
        return Err(Error::invalid("training patches differ in length"));
    }
    if m == 0 {
        return Err(Error::invalid("num_atoms must be >= 1"));
    }
    if cfg.sparsity == 0 || cfg.sparsity > n {
        return Err(Error::invalid(format!("sparsity must lie in 1..={n}, got {}", cfg.sparsity)));
    }
    if patches.len() < m {
        return Err(Error::invalid(format!(
            "k-SVD needs at least as many training patches as atoms: {} patches for {m} atoms",
            patches.len()
        )));
    }
    if patches.iter().all(|p| p.iter().all(|v| *v == 0.0)) {
        return Err(Error::Degenerate("all training patches are zero".into()));
    }
    if patches.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("training patch".into()));
    }

    let init = random_dictionary(n, m, cfg.seed)?;
    let mut dict = init.atoms().clone();
    let count = patches.len();
    let mut y = Array2::zeros((n, count));
    for (i, p) in patches.iter().enumerate() {
        y.column_mut(i).assign(p);
    }
    let yy: Vec<f64> = patches.iter().map(|p| p.dot(p)).collect();
    let mut codes: Vec<SparseCode> = vec![Vec::new(); count];
    let mut residual = y.clone();
    let mut errors = Vec::with_capacity(cfg.iterations);
    let mut purges = Vec::with_capacity(cfg.iterations);

    for _ in 0..cfg.iterations {
        // coding stage; a sample keeps its previous code when that fits better
        let gram = dict.t().dot(&dict);
        let dty = dict.t().dot(&y);
        let fresh = par::map_range(count, |i| omp_gram(&gram, dty.column(i), yy[i], cfg.sparsity));
        for (i, (code, err)) in fresh.into_iter().enumerate() {
            let old = residual.column(i).dot(&residual.column(i));
            if err < old || codes[i].is_empty() && err <= old {
                let mut r = y.column(i).to_owned();
                for &(j, v) in &code {
                    r.scaled_add(-v, &dict.column(j));
                }
                residual.column_mut(i).assign(&r);
                codes[i] = code;
            }
        }

        // users of each atom
        let mut users: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m];
        for (i, code) in codes.iter().enumerate() {
            for (slot, &(j, _)) in code.iter().enumerate() {
                users[j].push((i, slot));
            }
        }

        let mut replaced = vec![false; count];
        for j in 0..m {
            if users[j].is_empty() {
                if cfg.replace_unused {
                    replace_atom(&mut dict, j, &y, &residual, &mut replaced);
                }
                continue;
            }
            let atom = dict.column(j).to_owned();
            let mut e = Array2::zeros((n, users[j].len()));
            for (c, &(i, slot)) in users[j].iter().enumerate() {
                let mut col = residual.column(i).to_owned();
                col.scaled_add(codes[i][slot].1, &atom);
                e.column_mut(c).assign(&col);
            }
            let u = dominant_left_vector(&e, &atom);
            let x = e.t().dot(&u);
            for (c, &(i, slot)) in users[j].iter().enumerate() {
                let mut col = e.column(c).to_owned();
                col.scaled_add(-x[c], &u);
                residual.column_mut(i).assign(&col);
                codes[i][slot].1 = x[c];
            }
            dict.column_mut(j).assign(&u);
        }

        // near-duplicate atoms waste capacity; free them for badly fit samples
        let mut purged = 0;
        if cfg.replace_unused {
            for j in 1..m {
                let dup = (0..j).any(|i| dict.column(i).dot(&dict.column(j)).abs() > DUPLICATE_CORRELATION);
                if !dup {
                    continue;
                }
                let atom = dict.column(j).to_owned();
                for code in codes.iter_mut().enumerate().filter(|(_, c)| c.iter().any(|e| e.0 == j)) {
                    let (i, code) = code;
                    let pos = code.iter().position(|e| e.0 == j).unwrap();
                    let (_, v) = code.remove(pos);
                    residual.column_mut(i).scaled_add(v, &atom);
                }
                replace_atom(&mut dict, j, &y, &residual, &mut replaced);
                purged += 1;
            }
        }
        errors.push(residual.iter().map(|v| v * v).sum());
        purges.push(purged);
    }
    let dictionary = if cfg.iterations == 0 {
        init
    } else {
        Dictionary::normalized(dict)?
    };
    Ok(KsvdOutput {
        dictionary,
        errors,
        purges,
    })
}

/// Leading left singular vector of `e` by power iteration on `EEᵀ`, warm
/// started from `start` so `‖Eᵀu‖` never drops below `‖Eᵀ start‖`.
fn dominant_left_vector(e: &Array2<f64>, start: &Array1<f64>) -> Array1<f64> {
    let mut u = start.clone();
    let mut prev = e.t().dot(&u).mapv(|v| v * v).sum();
    if prev == 0.0 {
        // start is orthogonal to every residual; begin from the largest column
        let (best, _) = e
            .axis_iter(Axis(1))
            .enumerate()
            .map(|(c, col)| (c, col.dot(&col)))
            .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
        u = e.column(best).to_owned();
        let norm = u.dot(&u).sqrt();
        if norm == 0.0 {
            return start.clone();
        }
        u /= norm;
        prev = e.t().dot(&u).mapv(|v| v * v).sum();
    }
    for _ in 0..100 {
        let v = e.dot(&e.t().dot(&u));
        let norm = v.dot(&v).sqrt();
        if norm == 0.0 {
            break;
        }
        let next = v / norm;
        let val = e.t().dot(&next).mapv(|x| x * x).sum();
        if val < prev {
            break;
        }
        let delta = (&next - &u).mapv(|x| x * x).sum().sqrt();
        u = next;
        let rel = (val - prev) / val.max(f64::MIN_POSITIVE);
        prev = val;
        if delta < 1e-10 || rel < 1e-15 {
            break;
        }
    }
    u
}

/// Swaps atom `j` for the normalized worst-represented sample not yet used.
fn replace_atom(dict: &mut Array2<f64>, j: usize, y: &Array2<f64>, residual: &Array2<f64>, taken: &mut [bool]) {
    let mut best = None;
    let mut best_err = 0.0;
    for i in 0..y.ncols() {
        if taken[i] {
            continue;
        }
        let err = residual.column(i).dot(&residual.column(i));
        if err > best_err && y.column(i).dot(&y.column(i)) > 0.0 {
            best_err = err;
            best = Some(i);
        }
    }
    if let Some(i) = best {
        taken[i] = true;
        let col = y.column(i);
        let norm = col.dot(&col).sqrt();
        dict.column_mut(j).assign(&(&col / norm));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_dict(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Dictionary {
        Dictionary::normalized(Array2::from_shape_fn((n, m), |_| StandardNormal.sample(rng))).unwrap()
    }

    #[test]
    fn single_atom_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = rand_dict(&mut rng, 16, 40);
        let y = d.atoms().column(7).to_owned() * 3.0;
        let z = omp(&d, y.view(), 1).unwrap();
        for (i, v) in z.iter().enumerate() {
            if i == 7 {
                assert!((v - 3.0).abs() < 1e-12);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn orthogonal_signal_gives_zero_code() {
        // atoms live in the first 3 coordinates; y in the 4th
        let mut atoms = Array2::zeros((4, 3));
        atoms[[0, 0]] = 1.0;
        atoms[[1, 1]] = 1.0;
        atoms[[2, 2]] = 1.0;
        let d = Dictionary::new(atoms).unwrap();
        let y = Array1::from(vec![0.0, 0.0, 0.0, 2.0]);
        let z = omp(&d, y.view(), 2).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    fn lstsq_residual(d: &Array2<f64>, cols: &[usize], y: &Array1<f64>) -> f64 {
        // normal equations for 2 columns
        let a = d.column(cols[0]);
        let b = d.column(cols[1]);
        let (aa, ab, bb) = (a.dot(&a), a.dot(&b), b.dot(&b));
        let (ay, by) = (a.dot(y), b.dot(y));
        let det = aa * bb - ab * ab;
        let x0 = (bb * ay - ab * by) / det;
        let x1 = (aa * by - ab * ay) / det;
        let r = y - &(&a * x0) - &(&b * x1);
        r.dot(&r)
    }

    fn min_singular_2(d: &Array2<f64>, i: usize, j: usize) -> f64 {
        let c = d.column(i).dot(&d.column(j));
        // unit columns: eigenvalues of [[1,c],[c,1]] are 1 ± |c|
        (1.0 - c.abs()).sqrt()
    }

    #[test]
    fn two_sparse_recovery_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        for _ in 0..40 {
            let d = rand_dict(&mut rng, 64, 32);
            let i = rng.random_range(0..32);
            let mut j = rng.random_range(0..32);
            while j == i {
                j = rng.random_range(0..32);
            }
            if min_singular_2(d.atoms(), i, j) <= 0.5 {
                continue;
            }
            let (a, b) = (rng.random_range(0.5..2.0), -rng.random_range(0.5..2.0));
            let y = &d.atoms().column(i) * a + &d.atoms().column(j) * b;
            let z = omp(&d, y.view(), 2).unwrap();
            let support: Vec<usize> = (0..32).filter(|k| z[*k] != 0.0).collect();
            // brute force over all pairs
            let mut best = (f64::INFINITY, (0, 0));
            for p in 0..32 {
                for q in p + 1..32 {
                    let r = lstsq_residual(d.atoms(), &[p, q], &y);
                    if r < best.0 {
                        best = (r, (p, q));
                    }
                }
            }
            assert_eq!(support, vec![best.1 .0, best.1 .1]);
            let mut want = vec![i, j];
            want.sort();
            assert_eq!(support, want);
            assert!((z[i] - a).abs() < 1e-10 && (z[j] - b).abs() < 1e-10);
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn omp_support_and_residual_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = rand_dict(&mut rng, 16, 48);
        let gram = d.atoms().t().dot(d.atoms());
        for _ in 0..50 {
            let y = Array1::from_shape_fn(16, |_| rng.random::<f64>());
            let dty = d.atoms().t().dot(&y);
            let mut prev = y.dot(&y);
            for t0 in 1..=10 {
                let (code, err) = omp_gram(&gram, dty.view(), y.dot(&y), t0);
                assert!(code.len() <= t0);
                let mut ids: Vec<usize> = code.iter().map(|c| c.0).collect();
                ids.sort();
                ids.dedup();
                assert_eq!(ids.len(), code.len());
                assert!(err <= prev + 1e-12);
                let z = to_dense(&code, 48);
                let r = &y - &d.apply(z.view());
                assert!((r.dot(&r) - err).abs() < 1e-9);
                prev = err;
            }
        }
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let patches: Vec<Array1<f64>> = (0..40).map(|_| Array1::from_shape_fn(9, |_| rng.random())).collect();
        let cfg = KsvdConfig {
            num_atoms: 20,
            sparsity: 2,
            iterations: 0,
            seed: 42,
            replace_unused: true,
        };
        let d = ksvd_train(&patches, &cfg).unwrap();
        assert_eq!(d, random_dictionary(9, 20, 42).unwrap());
    }

    #[test]
    fn recovers_generating_atoms() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth = rand_dict(&mut rng, 16, 16);
        let mut patches = Vec::new();
        for rep in 0..20 {
            for k in 0..16 {
                let scale = 1.0 + 0.1 * ((rep + k) % 5) as f64;
                patches.push(truth.atoms().column(k).to_owned() * scale);
            }
        }
        let cfg = KsvdConfig {
            num_atoms: 16,
            sparsity: 1,
            iterations: 30,
            seed: 3,
            replace_unused: true,
        };
        let d = ksvd_train(&patches, &cfg).unwrap();
        for k in 0..16 {
            let best = (0..16)
                .map(|j| truth.atoms().column(k).dot(&d.atoms().column(j)).abs())
                .fold(0.0, f64::max);
            assert!(best >= 0.999, "atom {k}: {best}");
        }
    }

    #[test]
    fn error_nonincreasing_and_unit_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let patches: Vec<Array1<f64>> = (0..500)
            .map(|_| Array1::from_shape_fn(16, |_| rng.random::<f64>() * 4.0))
            .collect();
        let cfg = KsvdConfig {
            num_atoms: 32,
            sparsity: 3,
            iterations: 10,
            seed: 1,
            replace_unused: true,
        };
        let out = ksvd_train_with_history(&patches, &cfg).unwrap();
        for k in 1..out.errors.len() {
            if out.purges[k] == 0 {
                assert!(out.errors[k] <= out.errors[k - 1] + 1e-9, "{k}: {:?}", out.errors);
            }
        }
        for col in out.dictionary.atoms().columns() {
            assert!((col.dot(&col).sqrt() - 1.0).abs() < 1e-10);
        }
        let again = ksvd_train_with_history(&patches, &cfg).unwrap();
        assert_eq!(out.dictionary, again.dictionary);
    }

    #[test]
    fn rejects_bad_training_sets() {
        let zeros = vec![Array1::zeros(4); 10];
        let cfg = KsvdConfig {
            num_atoms: 4,
            sparsity: 1,
            iterations: 1,
            ..KsvdConfig::default()
        };
        assert!(matches!(ksvd_train(&zeros, &cfg), Err(Error::Degenerate(_))));
        assert!(ksvd_train(&zeros[..2], &cfg).is_err());
        let bad = KsvdConfig { sparsity: 5, ..cfg };
        assert!(ksvd_train(&vec![Array1::ones(4); 10], &bad).is_err());
    }
}
