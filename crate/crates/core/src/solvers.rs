//! Iterative reconstruction: the prior-free maximum-likelihood baseline and
//! ISTA/FISTA on the sparse-code objective `ℓ(Hρ(Dz); B) + μ‖z‖₁`.
//!
//! Sparse solves run per patch. Each image patch sees only the jots its
//! footprint covers, through a dense local copy of the forward operator, and
//! the final image is the overlap average of the synthesized patches.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::Measurements;
use crate::metrics;
use crate::par;
use crate::sensor::{BinaryFrameStack, DenseOperator, ForwardOperator, IntensityImage, LinearOperator};
use crate::sparse::{average_patches, Dictionary, Nonlinearity, PatchGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPolicy {
    Fixed { eta: f64 },
    /// Armijo / majorization backtracking. Every iteration first tries the
    /// previous step divided by `factor`, then shrinks by `factor` until the
    /// acceptance test holds. The first iteration starts at `1/L` from the
    /// likelihood Lipschitz bound and also searches upward while the test
    /// holds.
    Backtracking { factor: f64, sufficient_decrease: f64 },
}

impl Default for StepPolicy {
    fn default() -> Self {
        StepPolicy::Backtracking {
            factor: 0.5,
            sufficient_decrease: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Every pixel at the dynamic-range peak (for codes: see [`init_code`]).
    #[default]
    MaxDynamicRange,
    Zeros,
    Custom(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Sparsity weight; `None` picks 5% of the initial code-gradient ∞-norm.
    pub mu: Option<f64>,
    pub max_iters: usize,
    pub step: StepPolicy,
    /// Stop once the relative objective change falls below this.
    pub stop_tol: f64,
    pub init: InitMode,
    /// Dynamic-range peak used by [`InitMode::MaxDynamicRange`].
    pub peak: f64,
    /// Function-value restart for FISTA (keeps the objective monotone).
    pub restart: bool,
    /// Lower end of the `λ` range over which the step-seeding Lipschitz
    /// bound is evaluated.
    pub lipschitz_floor: f64,
    /// Iteration counts at which patch solvers snapshot the assembled image
    /// for the trace PSNR. The final iterate is always recorded.
    pub record_at: Vec<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mu: None,
            max_iters: 300,
            step: StepPolicy::default(),
            stop_tol: 1e-6,
            init: InitMode::MaxDynamicRange,
            peak: 1.0,
            restart: true,
            lipschitz_floor: 1e-2,
            record_at: Vec::new(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be >= 1"));
        }
        if let Some(mu) = self.mu {
            if !(mu > 0.0 && mu.is_finite()) {
                return Err(Error::invalid(format!("mu must be > 0, got {mu}")));
            }
        }
        match self.step {
            StepPolicy::Fixed { eta } if !(eta > 0.0 && eta.is_finite()) => {
                return Err(Error::invalid(format!("fixed step must be > 0, got {eta}")));
            }
            StepPolicy::Backtracking { factor, .. } if !(factor > 0.0 && factor < 1.0) => {
                return Err(Error::invalid("backtracking factor must lie in (0, 1)"));
            }
            _ => {}
        }
        if !(self.peak > 0.0) {
            return Err(Error::invalid("peak must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Completed iterations; 0 is the initialization.
    pub iteration: usize,
    pub objective: f64,
    pub psnr: Option<f64>,
    /// Compute time so far (summed over patches for patch solvers).
    pub millis: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub records: Vec<TraceRecord>,
}

impl SolveTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// PSNR recorded at exactly `iteration`, if any.
    pub fn psnr_at(&self, iteration: usize) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.iteration == iteration)
            .and_then(|r| r.psnr)
    }

    /// `iteration,objective,psnr,millis` with an empty PSNR cell where none was recorded.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,objective,psnr,millis\n");
        for r in &self.records {
            let psnr = r.psnr.map(metrics::format_db).unwrap_or_default();
            out.push_str(&format!("{},{:.17e},{},{:.3}\n", r.iteration, r.objective, psnr, r.millis));
        }
        out
    }
}

/// Two-sided soft threshold `sign(t)·max(|t| − θ, 0)`.
#[inline]
pub fn soft_threshold(t: f64, theta: f64) -> f64 {
    if t > theta {
        t - theta
    } else if t < -theta {
        t + theta
    } else {
        0.0
    }
}

/// Smooth data-fidelity term as a function of the jot exposure.
pub trait DataTerm: Sync {
    fn len(&self) -> usize;
    fn value(&self, lambda: &[f64]) -> Result<f64>;
    fn value_and_grad(&self, lambda: &[f64], grad: &mut [f64]) -> Result<f64>;
}

impl DataTerm for Measurements {
    fn len(&self) -> usize {
        Measurements::len(self)
    }

    fn value(&self, lambda: &[f64]) -> Result<f64> {
        self.nll(lambda)
    }

    fn value_and_grad(&self, lambda: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.nll_and_grad(lambda, grad)
    }
}

/// `½‖λ − y‖²`, a Gaussian stand-in for the binary likelihood used to check
/// the solvers against closed-form LASSO solutions.
#[derive(Debug, Clone)]
pub struct GaussianData {
    pub observed: Vec<f64>,
}

impl DataTerm for GaussianData {
    fn len(&self) -> usize {
        self.observed.len()
    }

    fn value(&self, lambda: &[f64]) -> Result<f64> {
        Ok(0.5 * lambda.iter().zip(&self.observed).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
    }

    fn value_and_grad(&self, lambda: &[f64], grad: &mut [f64]) -> Result<f64> {
        for ((g, a), b) in grad.iter_mut().zip(lambda).zip(&self.observed) {
            *g = a - b;
        }
        self.value(lambda)
    }
}

/// `ℓ(Hρ(Dz))` for one patch.
pub struct PatchProblem<'a> {
    pub data: &'a dyn DataTerm,
    pub op: &'a dyn LinearOperator,
    pub dict: &'a Dictionary,
    pub nl: Nonlinearity,
}

impl PatchProblem<'_> {
    fn check(&self, z: ArrayView1<f64>) -> Result<()> {
        if z.len() != self.dict.num_atoms() {
            return Err(Error::dims("patch code", self.dict.num_atoms(), z.len()));
        }
        if self.op.input_len() != self.dict.atom_dim() || self.op.output_len() != self.data.len() {
            return Err(Error::dims(
                "patch operator",
                (self.dict.atom_dim(), self.data.len()),
                (self.op.input_len(), self.op.output_len()),
            ));
        }
        Ok(())
    }

    /// Intensities `ρ(Dz)` of the patch.
    pub fn synthesize(&self, z: ArrayView1<f64>) -> Array1<f64> {
        let mut a = self.dict.apply(z);
        a.mapv_inplace(|t| self.nl.rho(t));
        a
    }

    pub fn smooth_value(&self, z: ArrayView1<f64>) -> Result<f64> {
        self.check(z)?;
        let x = self.synthesize(z);
        let lambda = self.op.apply_vec(x.as_slice().unwrap());
        self.data.value(&lambda)
    }

    /// `(ℓ, Dᵀ diag(ρ′(Dz)) Hᵀ ∇_λℓ)`.
    pub fn smooth_value_and_grad(&self, z: ArrayView1<f64>) -> Result<(f64, Array1<f64>)> {
        self.check(z)?;
        let a = self.dict.apply(z);
        let x = a.mapv(|t| self.nl.rho(t));
        let lambda = self.op.apply_vec(x.as_slice().unwrap());
        let mut g = vec![0.0; lambda.len()];
        let value = self.data.value_and_grad(&lambda, &mut g)?;
        let mut r = Array1::from(self.op.adjoint_vec(&g));
        r.zip_mut_with(&a, |ri, ai| *ri *= self.nl.rho_prime(*ai));
        let grad = self.dict.apply_transpose(r.view());
        if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "code gradient at atom {i} (objective {value}, max |λ-gradient| {})",
                g.iter().fold(0.0f64, |m, v| m.max(v.abs()))
            )));
        }
        Ok((value, grad))
    }

    pub fn objective(&self, z: ArrayView1<f64>, mu: f64) -> Result<f64> {
        Ok(self.smooth_value(z)? + mu * l1(z))
    }

    /// One proximal-gradient step `σ_{μη}(z − η∇)`.
    pub fn ista_step(&self, z: ArrayView1<f64>, eta: f64, mu: f64) -> Result<Array1<f64>> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ISTA input code".into()));
        }
        let (_, grad) = self.smooth_value_and_grad(z)?;
        Ok(prox_step(z, &grad, eta, mu))
    }
}

fn l1(z: ArrayView1<f64>) -> f64 {
    z.iter().map(|v| v.abs()).sum()
}

fn prox_step(z: ArrayView1<f64>, grad: &Array1<f64>, eta: f64, mu: f64) -> Array1<f64> {
    let theta = mu * eta;
    Array1::from_shape_fn(z.len(), |i| soft_threshold(z[i] - eta * grad[i], theta))
}

/// `z⁺ = σ_{μη}(z − ηDᵀ diag(ρ′(Dz)) Hᵀ∇_λℓ(Hρ(Dz); B))`.
pub fn ista_step(
    z: ArrayView1<f64>,
    meas: &Measurements,
    dict: &Dictionary,
    nl: &Nonlinearity,
    op: &dyn LinearOperator,
    eta: f64,
    mu: f64,
) -> Result<Array1<f64>> {
    PatchProblem {
        data: meas,
        op,
        dict,
        nl: *nl,
    }
    .ista_step(z, eta, mu)
}

/// Code whose synthesis approximates the constant `peak` patch:
/// `Dᵀρ⁻¹(peak·1) / ‖D‖₂²`.
pub fn init_code(dict: &Dictionary, nl: &Nonlinearity, peak: f64) -> Result<Array1<f64>> {
    let target = nl.rho_inverse(peak)?;
    let norm2 = dict.spectral_norm().powi(2);
    let v = Array1::from_elem(dict.atom_dim(), target);
    Ok(dict.apply_transpose(v.view()) / norm2)
}

fn initial_code(dict: &Dictionary, nl: &Nonlinearity, cfg: &SolverConfig) -> Result<Array1<f64>> {
    match &cfg.init {
        InitMode::MaxDynamicRange => init_code(dict, nl, cfg.peak),
        InitMode::Zeros => Ok(Array1::zeros(dict.num_atoms())),
        InitMode::Custom(v) => {
            if v.len() != dict.num_atoms() {
                return Err(Error::dims("custom initial code", dict.num_atoms(), v.len()));
            }
            Ok(Array1::from(v.clone()))
        }
    }
}

/// Result of one patch solve.
#[derive(Debug, Clone)]
pub struct PatchSolve {
    pub code: Array1<f64>,
    /// Objective after each iteration, index 0 = initialization.
    pub objectives: Vec<f64>,
    /// Compute time (ms) after each iteration.
    pub millis: Vec<f64>,
    /// Codes at the requested snapshot iterations.
    pub snapshots: Vec<Array1<f64>>,
    /// Step size in effect at the end.
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ista,
    Fista,
}

/// One backtracked (or fixed) proximal step from `y` with gradient `gy`.
fn prox_with_step(
    problem: &PatchProblem,
    y: ArrayView1<f64>,
    fy: f64,
    gy: &Array1<f64>,
    mu: f64,
    eta: &mut f64,
    step: &StepPolicy,
) -> Result<(Array1<f64>, f64)> {
    match *step {
        StepPolicy::Fixed { eta: e } => {
            let p = prox_step(y, gy, e, mu);
            let fp = problem.smooth_value(p.view())?;
            Ok((p, fp))
        }
        StepPolicy::Backtracking { factor, .. } => {
            for _ in 0..200 {
                let p = prox_step(y, gy, *eta, mu);
                let fp = problem.smooth_value(p.view())?;
                let d = &p - &y;
                let bound = fy + gy.dot(&d) + d.dot(&d) / (2.0 * *eta);
                if fp <= bound + 1e-12 * fy.abs().max(1.0) {
                    return Ok((p, fp));
                }
                *eta *= factor;
            }
            Err(Error::NonFinite("backtracking failed to find an admissible step".into()))
        }
    }
}

/// Largest admissible step on the ladder `η, η/factor, η/factor², …` (at
/// most 60 rungs), starting from an admissible `(p, fp)` at `η`.
#[allow(clippy::too_many_arguments)]
fn expand_step(
    problem: &PatchProblem,
    y: ArrayView1<f64>,
    fy: f64,
    gy: &Array1<f64>,
    mu: f64,
    eta: &mut f64,
    factor: f64,
    accepted: (Array1<f64>, f64),
) -> Result<(Array1<f64>, f64)> {
    let mut best = accepted;
    for _ in 0..60 {
        let trial = *eta / factor;
        let p = prox_step(y, gy, trial, mu);
        let fp = problem.smooth_value(p.view())?;
        let d = &p - &y;
        let bound = fy + gy.dot(&d) + d.dot(&d) / (2.0 * trial);
        if !(fp <= bound + 1e-12 * fy.abs().max(1.0)) {
            break;
        }
        *eta = trial;
        best = (p, fp);
    }
    Ok(best)
}

/// ISTA or FISTA on a single patch starting from `z0`.
pub fn solve_patch(
    problem: &PatchProblem,
    z0: ArrayView1<f64>,
    mu: f64,
    cfg: &SolverConfig,
    method: Method,
    eta0: f64,
) -> Result<PatchSolve> {
    let start = Instant::now();
    let grow = match cfg.step {
        StepPolicy::Backtracking { factor, .. } => 1.0 / factor,
        StepPolicy::Fixed { .. } => 1.0,
    };
    let mut eta = match cfg.step {
        StepPolicy::Fixed { eta } => eta,
        StepPolicy::Backtracking { .. } => eta0 / grow,
    };
    let mut snap_iters: Vec<usize> = cfg.record_at.iter().cloned().filter(|k| *k <= cfg.max_iters).collect();
    snap_iters.sort_unstable();
    snap_iters.dedup();
    let mut snapshots = Vec::with_capacity(snap_iters.len());

    let mut x = z0.to_owned();
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut obj = problem.objective(x.view(), mu)?;
    let mut objectives = vec![obj];
    let mut millis = vec![start.elapsed().as_secs_f64() * 1e3];
    let mut next_snap = 0;
    while next_snap < snap_iters.len() && snap_iters[next_snap] == 0 {
        snapshots.push(x.clone());
        next_snap += 1;
    }

    for k in 1..=cfg.max_iters {
        eta *= grow;
        let (fy, gy) = problem.smooth_value_and_grad(y.view())?;
        let (mut p, mut fp) = prox_with_step(problem, y.view(), fy, &gy, mu, &mut eta, &cfg.step)?;
        if let (1, StepPolicy::Backtracking { factor, .. }) = (k, &cfg.step) {
            // the seed comes from a global curvature bound and is usually far
            // too small locally, so search upward once
            (p, fp) = expand_step(problem, y.view(), fy, &gy, mu, &mut eta, *factor, (p, fp))?;
        }
        let mut p_obj = fp + mu * l1(p.view());
        if method == Method::Fista && cfg.restart && p_obj > obj {
            // function-value restart: fall back to a plain step from x
            t = 1.0;
            let (fx, gx) = problem.smooth_value_and_grad(x.view())?;
            let (p2, fp2) = prox_with_step(problem, x.view(), fx, &gx, mu, &mut eta, &cfg.step)?;
            p = p2;
            p_obj = fp2 + mu * l1(p.view());
        }
        if !p_obj.is_finite() {
            return Err(Error::NonFinite(format!("objective at iteration {k}")));
        }
        match method {
            Method::Ista => y = p.clone(),
            Method::Fista => {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                let beta = (t - 1.0) / t_next;
                y = &p + &((&p - &x) * beta);
                t = t_next;
            }
        }
        x = p;
        let change = (obj - p_obj).abs() / obj.abs().max(f64::MIN_POSITIVE);
        obj = p_obj;
        objectives.push(obj);
        millis.push(start.elapsed().as_secs_f64() * 1e3);
        while next_snap < snap_iters.len() && snap_iters[next_snap] == k {
            snapshots.push(x.clone());
            next_snap += 1;
        }
        if change < cfg.stop_tol {
            break;
        }
    }
    // converged early: later snapshots equal the final code
    while snapshots.len() < snap_iters.len() {
        snapshots.push(x.clone());
    }
    Ok(PatchSolve {
        code: x,
        objectives,
        millis,
        snapshots,
        eta,
    })
}

/// Local measurements and operator for every patch of a grid.
pub struct PatchSetup {
    pub grid: PatchGrid,
    pub op: DenseOperator,
    pub windows: Vec<Measurements>,
}

impl PatchSetup {
    pub fn new(meas: &Measurements, op: &ForwardOperator, grid: &PatchGrid) -> Result<Self> {
        if grid.image_dims() != op.image_dims() {
            return Err(Error::dims("patch grid", op.image_dims(), grid.image_dims()));
        }
        if meas.dims() != op.jot_dims() {
            return Err(Error::dims("measurements", op.jot_dims(), meas.dims()));
        }
        let side = grid.patch_side();
        let s = op.oversampling();
        let local = op.with_image_dims((side, side))?.to_dense();
        let windows = grid
            .positions()
            .into_iter()
            .map(|(r, c)| meas.window(r * s, c * s, side * s, side * s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid: grid.clone(),
            op: local,
            windows,
        })
    }

    pub fn problem<'a>(&'a self, i: usize, dict: &'a Dictionary, nl: Nonlinearity) -> PatchProblem<'a> {
        PatchProblem {
            data: &self.windows[i],
            op: &self.op,
            dict,
            nl,
        }
    }

    /// Overlap average of `ρ(D·code)` over all patches.
    pub fn assemble(&self, dict: &Dictionary, nl: &Nonlinearity, codes: &[Array1<f64>]) -> Result<Array2<f64>> {
        let patches: Vec<Array1<f64>> = codes
            .iter()
            .map(|z| crate::sparse::synthesize(dict, z.view(), nl))
            .collect::<Result<_>>()?;
        average_patches(&patches, &self.grid)
    }
}

/// Default sparsity weight: 5% of the largest initial code-gradient magnitude.
pub fn default_mu(setup: &PatchSetup, dict: &Dictionary, nl: &Nonlinearity, z0: &Array1<f64>) -> Result<f64> {
    let norms = par::map_range(setup.windows.len(), |i| {
        setup
            .problem(i, dict, *nl)
            .smooth_value_and_grad(z0.view())
            .map(|(_, g)| g.iter().fold(0.0f64, |m, v| m.max(v.abs())))
    });
    let mut max = 0.0f64;
    for n in norms {
        max = max.max(n?);
    }
    Ok((0.05 * max).max(1e-12))
}

/// Step seed `1 / (‖D‖²‖H‖² L_λ)` with `L_λ` bounded over `[floor, peak·4]`.
pub fn seed_step(meas: &Measurements, op: &dyn LinearOperator, dict: &Dictionary, floor: f64, peak: f64) -> f64 {
    let l_lambda = meas.lipschitz_bound(floor, 4.0 * peak);
    let h = op.norm_estimate(50);
    let d = dict.spectral_norm();
    1.0 / (l_lambda * h * h * d * d).max(1e-300)
}

/// Solves every patch and assembles the image and trace.
#[allow(clippy::too_many_arguments)]
pub fn patch_reconstruct(
    stack: &BinaryFrameStack,
    dict: &Dictionary,
    nl: &Nonlinearity,
    op: &ForwardOperator,
    grid: &PatchGrid,
    cfg: &SolverConfig,
    method: Method,
    truth: Option<&IntensityImage>,
) -> Result<(IntensityImage, SolveTrace)> {
    cfg.validate()?;
    if grid.patch_side().pow(2) != dict.atom_dim() {
        return Err(Error::dims("dictionary atom size", grid.patch_side().pow(2), dict.atom_dim()));
    }
    let meas = Measurements::from_stack(stack);
    let setup = PatchSetup::new(&meas, op, grid)?;
    let z0 = initial_code(dict, nl, cfg)?;
    let mu = match cfg.mu {
        Some(mu) => mu,
        None => default_mu(&setup, dict, nl, &z0)?,
    };
    let eta0 = match cfg.step {
        StepPolicy::Fixed { eta } => eta,
        StepPolicy::Backtracking { .. } => seed_step(&meas, &setup.op, dict, cfg.lipschitz_floor, cfg.peak),
    };
    let solves = par::map_range(setup.windows.len(), |i| {
        solve_patch(&setup.problem(i, dict, *nl), z0.view(), mu, cfg, method, eta0)
    });
    let solves: Vec<PatchSolve> = solves.into_iter().collect::<Result<_>>()?;
    assemble_solves(&setup, dict, nl, cfg, &solves, truth)
}

fn assemble_solves(
    setup: &PatchSetup,
    dict: &Dictionary,
    nl: &Nonlinearity,
    cfg: &SolverConfig,
    solves: &[PatchSolve],
    truth: Option<&IntensityImage>,
) -> Result<(IntensityImage, SolveTrace)> {
    let mut snap_iters: Vec<usize> = cfg.record_at.iter().cloned().filter(|k| *k <= cfg.max_iters).collect();
    snap_iters.sort_unstable();
    snap_iters.dedup();

    let len = solves.iter().map(|s| s.objectives.len()).max().unwrap_or(1);
    let codes: Vec<Array1<f64>> = solves.iter().map(|s| s.code.clone()).collect();
    let image = setup.assemble(dict, nl, &codes)?;
    let peak = truth.map(|t| t.peak()).unwrap_or(cfg.peak);
    let psnr_of = |img: &Array2<f64>| -> Result<Option<f64>> {
        match truth {
            Some(t) => Ok(Some(metrics::psnr(t.data(), img, t.peak())?.db())),
            None => Ok(None),
        }
    };

    let mut records = Vec::with_capacity(len);
    for it in 0..len {
        let objective = solves.iter().map(|s| s.objectives[it.min(s.objectives.len() - 1)]).sum();
        let millis = solves.iter().map(|s| s.millis[it.min(s.millis.len() - 1)]).sum();
        let psnr = if it == len - 1 {
            psnr_of(&image)?
        } else if let Some(si) = snap_iters.iter().position(|k| *k == it) {
            let snap: Vec<Array1<f64>> = solves.iter().map(|s| s.snapshots[si].clone()).collect();
            psnr_of(&setup.assemble(dict, nl, &snap)?)?
        } else {
            None
        };
        records.push(TraceRecord {
            iteration: it,
            objective,
            psnr,
            millis,
        });
    }
    let image = IntensityImage::new(image.clone(), peak.max(image.iter().cloned().fold(0.0, f64::max)))?;
    Ok((image, SolveTrace { records }))
}

/// FISTA with function-value restart on `ℓ(Hρ(Dz)) + μ‖z‖₁`, patch by patch.
pub fn fista_reconstruct(
    stack: &BinaryFrameStack,
    dict: &Dictionary,
    nl: &Nonlinearity,
    op: &ForwardOperator,
    grid: &PatchGrid,
    cfg: &SolverConfig,
    truth: Option<&IntensityImage>,
) -> Result<(IntensityImage, SolveTrace)> {
    patch_reconstruct(stack, dict, nl, op, grid, cfg, Method::Fista, truth)
}

/// Plain ISTA; with a fixed step this is exactly what an ISTA-initialized
/// unrolled network computes.
pub fn ista_reconstruct(
    stack: &BinaryFrameStack,
    dict: &Dictionary,
    nl: &Nonlinearity,
    op: &ForwardOperator,
    grid: &PatchGrid,
    cfg: &SolverConfig,
    truth: Option<&IntensityImage>,
) -> Result<(IntensityImage, SolveTrace)> {
    patch_reconstruct(stack, dict, nl, op, grid, cfg, Method::Ista, truth)
}

/// Projected gradient descent `x ← max(x − ηHᵀ∇_λℓ(Hx), 0)` with no prior.
pub fn ml_reconstruct(
    stack: &BinaryFrameStack,
    op: &ForwardOperator,
    cfg: &SolverConfig,
    truth: Option<&IntensityImage>,
) -> Result<(IntensityImage, SolveTrace)> {
    cfg.validate()?;
    if stack.dims() != op.jot_dims() {
        return Err(Error::dims("ml_reconstruct stack", op.jot_dims(), stack.dims()));
    }
    let start = Instant::now();
    let meas = Measurements::from_stack(stack);
    let n = op.input_len();
    let mut x: Vec<f64> = match &cfg.init {
        InitMode::MaxDynamicRange => vec![cfg.peak; n],
        InitMode::Zeros => vec![0.0; n],
        InitMode::Custom(v) => {
            if v.len() != n {
                return Err(Error::dims("custom initial image", n, v.len()));
            }
            v.iter().map(|a| a.max(0.0)).collect()
        }
    };
    let dims = op.image_dims();
    let peak = truth.map(|t| t.peak()).unwrap_or(cfg.peak);
    let psnr_of = |x: &[f64]| -> Result<Option<f64>> {
        match truth {
            Some(t) => {
                let img = Array2::from_shape_vec(dims, x.to_vec()).expect("shape");
                Ok(Some(metrics::psnr(t.data(), &img, t.peak())?.db()))
            }
            None => Ok(None),
        }
    };
    let value_grad = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let lambda = op.apply_vec(x);
        let mut g = vec![0.0; lambda.len()];
        let v = meas.nll_and_grad(&lambda, &mut g)?;
        Ok((v, op.adjoint_vec(&g)))
    };
    let value = |x: &[f64]| -> Result<f64> { meas.nll(&op.apply_vec(x)) };

    let (mut f, mut g) = value_grad(&x)?;
    let mut records = vec![TraceRecord {
        iteration: 0,
        objective: f,
        psnr: psnr_of(&x)?,
        millis: start.elapsed().as_secs_f64() * 1e3,
    }];
    let (mut eta, grow) = match cfg.step {
        StepPolicy::Fixed { eta } => (eta, 1.0),
        StepPolicy::Backtracking { factor, .. } => {
            let h = op.norm_estimate(50);
            let l = meas.lipschitz_bound(cfg.lipschitz_floor, 4.0 * cfg.peak) * h * h;
            (factor / l.max(1e-300), 1.0 / factor)
        }
    };
    let mut increases = 0;
    for k in 1..=cfg.max_iters {
        eta *= grow;
        let project = |eta: f64| -> Vec<f64> { x.iter().zip(&g).map(|(a, b)| (a - eta * b).max(0.0)).collect() };
        let (x_new, f_new) = match cfg.step {
            StepPolicy::Fixed { .. } => {
                let xn = project(eta);
                let fnew = value(&xn)?;
                if fnew > f {
                    increases += 1;
                    if increases >= 2 {
                        return Err(Error::Divergence {
                            iteration: k,
                            objective: fnew,
                        });
                    }
                } else {
                    increases = 0;
                }
                (xn, fnew)
            }
            StepPolicy::Backtracking {
                factor,
                sufficient_decrease,
            } => {
                let mut accepted = None;
                for _ in 0..200 {
                    let xn = project(eta);
                    let fnew = value(&xn)?;
                    let dir: f64 = xn.iter().zip(&x).zip(&g).map(|((a, b), gi)| (a - b) * gi).sum();
                    if fnew <= f + sufficient_decrease * dir {
                        accepted = Some((xn, fnew));
                        break;
                    }
                    eta *= factor;
                }
                match accepted {
                    Some(a) => a,
                    // no admissible step left: stationary to working precision
                    None => break,
                }
            }
        };
        if !f_new.is_finite() {
            return Err(Error::NonFinite(format!("ML objective at iteration {k}")));
        }
        let change = (f - f_new).abs() / f.abs().max(f64::MIN_POSITIVE);
        x = x_new;
        let (f2, g2) = value_grad(&x)?;
        f = f2;
        g = g2;
        records.push(TraceRecord {
            iteration: k,
            objective: f,
            psnr: psnr_of(&x)?,
            millis: start.elapsed().as_secs_f64() * 1e3,
        });
        if change < cfg.stop_tol {
            break;
        }
    }
    let data = Array2::from_shape_vec(dims, x).expect("shape");
    let max = data.iter().cloned().fold(0.0, f64::max);
    Ok((IntensityImage::new(data, peak.max(max))?, SolveTrace { records }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::{simulate, RngState, ThresholdMap};
    use ndarray::{array, Array3};
    use std::f64::consts::LN_2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dict(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Dictionary {
        Dictionary::normalized(Array2::from_shape_fn((n, m), |_| rng.random::<f64>() - 0.3)).unwrap()
    }

    fn random_meas(rng: &mut ChaCha8Rng, dims: (usize, usize), frames: u32) -> Measurements {
        let n = dims.0 * dims.1;
        let q: Vec<u16> = (0..n).map(|_| rng.random_range(1..=5)).collect();
        let ones: Vec<u32> = (0..n).map(|_| rng.random_range(0..=frames)).collect();
        let zeros = ones.iter().map(|o| frames - o).collect();
        Measurements::from_counts(dims, q, ones, zeros).unwrap()
    }

    #[test]
    fn shrinkage_properties() {
        assert!((soft_threshold(1.2, 0.5) - 0.7).abs() < 1e-15);
        assert_eq!(soft_threshold(-0.3, 0.5), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let t = rng.random_range(-5.0..5.0);
            let th = rng.random_range(0.0..2.0);
            assert_eq!(soft_threshold(t, th), -soft_threshold(-t, th));
            assert!(soft_threshold(t, th).abs() <= t.abs());
            assert_eq!(soft_threshold(t, 0.0), t);
        }
    }

    #[test]
    fn zero_gradient_is_pure_shrinkage() {
        // Gaussian data exactly explained by the current code gives ∇ = 0
        let d = Dictionary::new(Array2::eye(4)).unwrap();
        let op = ForwardOperator::identity((2, 2)).unwrap().to_dense();
        let z = array![0.1, -0.05, 0.0, 0.08];
        let data = GaussianData {
            observed: z.to_vec(),
        };
        let p = PatchProblem {
            data: &data,
            op: &op,
            dict: &d,
            nl: Nonlinearity::Identity,
        };
        let out = p.ista_step(z.view(), 0.5, 0.2).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_chain() {
        let d = Dictionary::new(array![[1.0]]).unwrap();
        let op = ForwardOperator::identity((1, 1)).unwrap();
        let meas = Measurements::from_counts((1, 1), vec![1], vec![0], vec![1]).unwrap();
        for (z, eta, mu) in [(2.0, 0.3, 0.5), (0.7, 0.1, 1.0), (5.0, 1.0, 0.0)] {
            let out = ista_step(array![z].view(), &meas, &d, &Nonlinearity::Identity, &op, eta, mu).unwrap();
            assert!((out[0] - soft_threshold(z - eta, mu * eta)).abs() < 1e-15);
        }
    }

    #[test]
    fn ista_without_threshold_is_gradient_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let d = random_dict(&mut rng, 16, 24);
            let op = ForwardOperator::gaussian((4, 4), 2, None).unwrap().to_dense();
            let meas = random_meas(&mut rng, (8, 8), 4);
            let z = Array1::from_shape_fn(24, |_| rng.random_range(0.5..2.0));
            let eta = 0.01;
            let out = ista_step(z.view(), &meas, &d, &Nonlinearity::Identity, &op, eta, 0.0).unwrap();
            // direct chain: Dᵀ Hᵀ ∇ℓ(HDz)
            let x = d.atoms().dot(&z);
            let lam = op.matrix.dot(&x);
            let mut g = vec![0.0; lam.len()];
            meas.grad_into(lam.as_slice().unwrap(), &mut g).unwrap();
            let r = op.matrix.t().dot(&Array1::from(g));
            let grad = d.atoms().t().dot(&r);
            for i in 0..24 {
                let want = z[i] - eta * grad[i];
                assert!((out[i] - want).abs() <= 1e-14 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn nonfinite_input_is_reported() {
        let d = Dictionary::new(array![[1.0]]).unwrap();
        let op = ForwardOperator::identity((1, 1)).unwrap();
        let meas = Measurements::from_counts((1, 1), vec![1], vec![1], vec![0]).unwrap();
        let err = ista_step(array![f64::NAN].view(), &meas, &d, &Nonlinearity::Identity, &op, 0.1, 0.1);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn fista_matches_lasso_closed_form() {
        // orthonormal D: argmin ½‖Dz − y‖² + μ‖z‖₁ = σ_μ(Dᵀy)
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = Array2::from_shape_fn((16, 16), |_| rng.random::<f64>() - 0.5);
        let q = gram_schmidt(a);
        let d = Dictionary::new(q).unwrap();
        let op = ForwardOperator::identity((4, 4)).unwrap().to_dense();
        let y: Vec<f64> = (0..16).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let data = GaussianData { observed: y.clone() };
        let p = PatchProblem {
            data: &data,
            op: &op,
            dict: &d,
            nl: Nonlinearity::Identity,
        };
        let mu = 0.3;
        let cfg = SolverConfig {
            max_iters: 200,
            stop_tol: 0.0,
            ..SolverConfig::default()
        };
        let sol = solve_patch(&p, Array1::zeros(16).view(), mu, &cfg, Method::Fista, 0.01).unwrap();
        let dty = d.apply_transpose(Array1::from(y).view());
        for i in 0..16 {
            assert!((sol.code[i] - soft_threshold(dty[i], mu)).abs() < 1e-6);
        }
        for w in sol.objectives.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    fn gram_schmidt(mut a: Array2<f64>) -> Array2<f64> {
        let n = a.ncols();
        for k in 0..n {
            for j in 0..k {
                let proj = a.column(k).dot(&a.column(j));
                let cj = a.column(j).to_owned();
                a.column_mut(k).scaled_add(-proj, &cj);
            }
            let norm = a.column(k).dot(&a.column(k)).sqrt();
            a.column_mut(k).mapv_inplace(|v| v / norm);
        }
        a
    }

    #[test]
    fn fista_objective_monotone_with_restart() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = random_dict(&mut rng, 16, 32);
        let op = ForwardOperator::gaussian((4, 4), 2, None).unwrap().to_dense();
        let meas = random_meas(&mut rng, (8, 8), 4);
        let p = PatchProblem {
            data: &meas,
            op: &op,
            dict: &d,
            nl: Nonlinearity::default(),
        };
        let z0 = init_code(&d, &p.nl, 5.0).unwrap();
        let cfg = SolverConfig {
            max_iters: 300,
            stop_tol: 0.0,
            ..SolverConfig::default()
        };
        let sol = solve_patch(&p, z0.view(), 0.5, &cfg, Method::Fista, 1e-3).unwrap();
        for w in sol.objectives.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn huge_mu_gives_constant_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let op = ForwardOperator::gaussian((12, 12), 2, None).unwrap();
        let x = IntensityImage::new(Array2::from_shape_fn((12, 12), |_| rng.random::<f64>() * 5.0), 5.0).unwrap();
        let q = ThresholdMap::constant(op.jot_dims(), 2).unwrap();
        let b = simulate(&x, &op, &q, 4, &mut RngState::new(1)).unwrap();
        let d = random_dict(&mut rng, 16, 32);
        let grid = PatchGrid::new((12, 12), 4, 4).unwrap();
        let nl = Nonlinearity::default();
        let cfg = SolverConfig {
            mu: Some(1e6),
            max_iters: 50,
            peak: 5.0,
            ..SolverConfig::default()
        };
        let (img, _) = fista_reconstruct(&b, &d, &nl, &op, &grid, &cfg, None).unwrap();
        for v in img.data().iter() {
            assert!((v - nl.rho(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn ml_constant_scene_matches_closed_form() {
        let op = ForwardOperator::identity((8, 8)).unwrap();
        let truth = 1.3;
        let x = IntensityImage::new(Array2::from_elem((8, 8), truth), 2.0).unwrap();
        let q = ThresholdMap::constant((8, 8), 1).unwrap();
        let b = simulate(&x, &op, &q, 500, &mut RngState::new(3)).unwrap();
        let cfg = SolverConfig {
            max_iters: 500,
            peak: 2.0,
            stop_tol: 1e-12,
            ..SolverConfig::default()
        };
        let (img, trace) = ml_reconstruct(&b, &op, &cfg, None).unwrap();
        let on = b.on_fraction();
        let closed = -(1.0 - on).ln();
        let mean = img.data().mean().unwrap();
        assert!((mean - closed).abs() <= 0.05 * closed, "{mean} vs {closed}");
        for w in trace.records.windows(2) {
            assert!(w[1].objective <= w[0].objective);
        }
    }

    #[test]
    fn ml_dark_scene_goes_to_zero() {
        let op = ForwardOperator::gaussian((6, 6), 2, None).unwrap();
        let frames = Array3::zeros((4, 12, 12));
        let b = BinaryFrameStack::new(frames, ThresholdMap::constant((12, 12), 1).unwrap()).unwrap();
        let cfg = SolverConfig {
            max_iters: 200,
            peak: 10.0,
            ..SolverConfig::default()
        };
        let (img, _) = ml_reconstruct(&b, &op, &cfg, None).unwrap();
        assert!(img.data().iter().all(|v| *v < 1e-3), "{:?}", img.data());
    }

    #[test]
    fn ml_first_step_from_lipschitz_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let op = ForwardOperator::gaussian((4, 4), 1, Some(0.5)).unwrap();
        let x = IntensityImage::new(Array2::from_shape_fn((4, 4), |_| rng.random::<f64>() * 3.0), 3.0).unwrap();
        let q = ThresholdMap::new(Array2::from_shape_fn((4, 4), |(i, j)| (1 + (i + j) % 3) as u16)).unwrap();
        let b = simulate(&x, &op, &q, 8, &mut RngState::new(2)).unwrap();
        let meas = Measurements::from_stack(&b);
        let h = op.norm_estimate(100);
        let eta = 1.0 / (meas.lipschitz_bound(0.5, 4.0 * 3.0) * h * h);
        let cfg = SolverConfig {
            max_iters: 1,
            peak: 3.0,
            step: StepPolicy::Fixed { eta },
            stop_tol: 0.0,
            ..SolverConfig::default()
        };
        let (_, trace) = ml_reconstruct(&b, &op, &cfg, None).unwrap();
        assert_eq!(trace.len(), 2);
        assert!(trace.records[1].objective < trace.records[0].objective);
    }

    #[test]
    fn ml_fixed_step_divergence_is_reported() {
        let op = ForwardOperator::identity((4, 4)).unwrap();
        // half-on bits put the optimum at ln 2 with curvature 4; a unit step overshoots
        let frames = Array3::from_shape_fn((4, 4, 4), |(k, _, _)| (k % 2) as u8);
        let b = BinaryFrameStack::new(frames, ThresholdMap::constant((4, 4), 1).unwrap()).unwrap();
        let cfg = SolverConfig {
            max_iters: 50,
            peak: 3.0,
            init: InitMode::Custom(vec![LN_2 + 0.01; 16]),
            step: StepPolicy::Fixed { eta: 1.0 },
            ..SolverConfig::default()
        };
        assert!(matches!(ml_reconstruct(&b, &op, &cfg, None), Err(Error::Divergence { .. })));
    }

    #[test]
    fn patch_order_does_not_change_result() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let op = ForwardOperator::gaussian((12, 12), 2, None).unwrap();
        let x = IntensityImage::new(Array2::from_shape_fn((12, 12), |_| rng.random::<f64>() * 4.0), 4.0).unwrap();
        let q = ThresholdMap::new(Array2::from_shape_fn((24, 24), |(i, j)| (1 + (i * 24 + j) % 4) as u16)).unwrap();
        let b = simulate(&x, &op, &q, 4, &mut RngState::new(9)).unwrap();
        let d = random_dict(&mut rng, 16, 32);
        let grid = PatchGrid::new((12, 12), 4, 2).unwrap();
        let cfg = SolverConfig {
            mu: Some(0.1),
            max_iters: 40,
            peak: 4.0,
            record_at: vec![1, 5],
            ..SolverConfig::default()
        };
        let nl = Nonlinearity::default();
        let (a, ta) = fista_reconstruct(&b, &d, &nl, &op, &grid, &cfg, Some(&x)).unwrap();
        let (c, tc) = par::sequential(|| fista_reconstruct(&b, &d, &nl, &op, &grid, &cfg, Some(&x)).unwrap());
        assert_eq!(a, c);
        let objs = |t: &SolveTrace| t.records.iter().map(|r| r.objective).collect::<Vec<_>>();
        assert_eq!(objs(&ta), objs(&tc));
        assert!(ta.psnr_at(1).is_some() && ta.psnr_at(5).is_some());

        // solving patches in reverse and averaging in grid order gives the same image
        let meas = Measurements::from_stack(&b);
        let setup = PatchSetup::new(&meas, &op, &grid).unwrap();
        let z0 = init_code(&d, &nl, 4.0).unwrap();
        let eta0 = seed_step(&meas, &setup.op, &d, cfg.lipschitz_floor, cfg.peak);
        let mut codes: Vec<(usize, Array1<f64>)> = (0..grid.len())
            .rev()
            .map(|i| {
                let s = solve_patch(&setup.problem(i, &d, nl), z0.view(), 0.1, &cfg, Method::Fista, eta0).unwrap();
                (i, s.code)
            })
            .collect();
        codes.sort_by_key(|(i, _)| *i);
        let codes: Vec<_> = codes.into_iter().map(|(_, c)| c).collect();
        assert_eq!(&setup.assemble(&d, &nl, &codes).unwrap(), a.data());
    }

    #[test]
    fn trace_csv_layout() {
        let t = SolveTrace {
            records: vec![TraceRecord {
                iteration: 0,
                objective: 1.5,
                psnr: None,
                millis: 0.25,
            }],
        };
        let csv = t.to_csv();
        assert!(csv.starts_with("iteration,objective,psnr,millis\n0,"));
        assert!(csv.trim_end().ends_with(",,0.250"));
    }
}
