//! Unrolled ISTA network.
//!
//! Layer `t` maps a code `z` to
//! `σ_θ(z − W diag(ρ′(Qz)) Hᵀ∇_λℓ(Hρ(Az); B))`. With `A = Q = D`,
//! `W = ηDᵀ` and `θ = μη` this is exactly one ISTA step, which is how the
//! network is initialized before supervised training.

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::Measurements;
use crate::par;
use crate::sensor::{BinaryFrameStack, DenseOperator, ForwardOperator, IntensityImage};
use crate::solvers::{init_code, soft_threshold, PatchSetup};
use crate::sparse::{Dictionary, Nonlinearity, PatchGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `atom_dim × m`
    pub a: Array2<f64>,
    /// `atom_dim × m`
    pub q: Array2<f64>,
    /// `m × atom_dim`
    pub w: Array2<f64>,
    pub theta: Array1<f64>,
}

impl LayerParams {
    fn zeros_like(&self) -> Self {
        Self {
            a: Array2::zeros(self.a.dim()),
            q: Array2::zeros(self.q.dim()),
            w: Array2::zeros(self.w.dim()),
            theta: Array1::zeros(self.theta.len()),
        }
    }

    fn add_assign(&mut self, o: &Self) {
        self.a += &o.a;
        self.q += &o.q;
        self.w += &o.w;
        self.theta += &o.theta;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MLNetParams {
    pub num_layers: usize,
    /// One parameter set shared by every layer.
    pub tied: bool,
    /// `num_layers` entries, or one when tied.
    pub layers: Vec<LayerParams>,
    /// Learned replacement for the local forward operator, when trained.
    pub h: Option<Array2<f64>>,
}

impl MLNetParams {
    pub fn layer(&self, t: usize) -> &LayerParams {
        &self.layers[if self.tied { 0 } else { t }]
    }

    pub fn atom_dim(&self) -> usize {
        self.layers.first().map(|l| l.a.nrows()).unwrap_or(0)
    }

    pub fn num_atoms(&self) -> usize {
        self.layers.first().map(|l| l.a.ncols()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = if self.tied { 1.min(self.num_layers) } else { self.num_layers };
        if self.layers.len() != expected && !(self.tied && self.layers.len() == 1) {
            return Err(Error::dims("network layers", expected, self.layers.len()));
        }
        let (n, m) = (self.atom_dim(), self.num_atoms());
        for (t, l) in self.layers.iter().enumerate() {
            if l.a.dim() != (n, m) || l.q.dim() != (n, m) || l.w.dim() != (m, n) || l.theta.len() != m {
                return Err(Error::invalid(format!("layer {t} tensors have inconsistent shapes")));
            }
            let finite = l.a.iter().chain(l.q.iter()).chain(l.w.iter()).chain(l.theta.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(Error::NonFinite(format!("layer {t} parameters")));
            }
            if l.theta.iter().any(|v| *v < 0.0) {
                return Err(Error::invalid(format!("layer {t} has negative thresholds")));
            }
        }
        Ok(())
    }

    /// Same layer count and tying with untied per-layer copies.
    pub fn untied(&self) -> Self {
        Self {
            num_layers: self.num_layers,
            tied: false,
            layers: (0..self.num_layers).map(|t| self.layer(t).clone()).collect(),
            h: self.h.clone(),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            num_layers: self.num_layers,
            tied: self.tied,
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
            h: self.h.as_ref().map(|h| Array2::zeros(h.dim())),
        }
    }

    fn add_assign(&mut self, o: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&o.layers) {
            a.add_assign(b);
        }
        if let (Some(a), Some(b)) = (self.h.as_mut(), o.h.as_ref()) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f64) {
        self.for_each_tensor_mut(|t| t.iter_mut().for_each(|v| *v *= s));
    }

    /// Tensors in a fixed order: per layer A, Q, W, θ, then H.
    fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for l in &mut self.layers {
            f(l.a.as_slice_mut().expect("standard layout"));
            f(l.q.as_slice_mut().expect("standard layout"));
            f(l.w.as_slice_mut().expect("standard layout"));
            f(l.theta.as_slice_mut().expect("standard layout"));
        }
        if let Some(h) = self.h.as_mut() {
            f(h.as_slice_mut().expect("standard layout"));
        }
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.a.as_slice().expect("standard layout"));
            out.push(l.q.as_slice().expect("standard layout"));
            out.push(l.w.as_slice().expect("standard layout"));
            out.push(l.theta.as_slice().expect("standard layout"));
        }
        if let Some(h) = self.h.as_ref() {
            out.push(h.as_slice().expect("standard layout"));
        }
        out
    }
}

/// `A = Q = D`, `W = ηDᵀ`, `θ = μη·1` in every layer.
pub fn init_from_ista(dict: &Dictionary, eta: f64, mu: f64, num_layers: usize) -> MLNetParams {
    init_from_ista_tied(dict, eta, mu, num_layers, false)
}

pub fn init_from_ista_tied(dict: &Dictionary, eta: f64, mu: f64, num_layers: usize, tied: bool) -> MLNetParams {
    let d = dict.atoms().as_standard_layout().to_owned();
    let layer = LayerParams {
        a: d.clone(),
        q: d.clone(),
        w: d.t().as_standard_layout().to_owned() * eta,
        theta: Array1::from_elem(dict.num_atoms(), mu * eta),
    };
    let count = if tied { 1 } else { num_layers };
    MLNetParams {
        num_layers,
        tied,
        layers: vec![layer; count],
        h: None,
    }
}

/// Fixed pieces shared by every patch: the synthesis dictionary and
/// nonlinearity, the local forward operator and the initial code.
#[derive(Debug, Clone)]
pub struct NetContext {
    pub dict: Dictionary,
    pub nl: Nonlinearity,
    pub op: DenseOperator,
    pub z0: Array1<f64>,
}

impl NetContext {
    /// `z0` from the maximum-dynamic-range rule.
    pub fn new(dict: Dictionary, nl: Nonlinearity, op: DenseOperator, peak: f64) -> Result<Self> {
        if op.matrix.ncols() != dict.atom_dim() {
            return Err(Error::dims("local operator input", dict.atom_dim(), op.matrix.ncols()));
        }
        let z0 = init_code(&dict, &nl, peak)?;
        Ok(Self { dict, nl, op, z0 })
    }

    /// Local operator for a patch side and optics.
    pub fn for_optics(dict: Dictionary, nl: Nonlinearity, optics: &ForwardOperator, peak: f64) -> Result<Self> {
        let side = dict
            .patch_side()
            .ok_or_else(|| Error::invalid("dictionary atoms are not square patches"))?;
        let op = optics.with_image_dims((side, side))?.to_dense();
        Self::new(dict, nl, op, peak)
    }

    /// `ρ(Dz)`.
    pub fn synthesize(&self, z: ArrayView1<f64>) -> Array1<f64> {
        self.dict.apply(z).mapv(|t| self.nl.rho(t))
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    z: Array1<f64>,
    a: Array1<f64>,
    x: Array1<f64>,
    g: Array1<f64>,
    hess: Array1<f64>,
    qz: Array1<f64>,
    r: Array1<f64>,
    d: Array1<f64>,
    u: Array1<f64>,
}

/// Intermediates of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Pre-shrinkage activations of layer `t`.
    pub fn pre_shrinkage(&self, t: usize) -> &Array1<f64> {
        &self.layers[t].u
    }
}

fn effective_h<'a>(params: &'a MLNetParams, ctx: &'a NetContext) -> &'a Array2<f64> {
    params.h.as_ref().unwrap_or(&ctx.op.matrix)
}

fn check_dims(params: &MLNetParams, ctx: &NetContext, meas: &Measurements, z0: ArrayView1<f64>) -> Result<()> {
    let h = effective_h(params, ctx);
    if params.num_layers > 0 && (params.layers.is_empty() || params.atom_dim() != h.ncols()) {
        return Err(Error::dims("network atom size", h.ncols(), params.atom_dim()));
    }
    if h.nrows() != meas.len() {
        return Err(Error::dims("patch measurements", h.nrows(), meas.len()));
    }
    if z0.len() != ctx.dict.num_atoms() || (params.num_layers > 0 && params.num_atoms() != z0.len()) {
        return Err(Error::dims("initial code", params.num_atoms(), z0.len()));
    }
    Ok(())
}

fn forward_impl(
    params: &MLNetParams,
    ctx: &NetContext,
    meas: &Measurements,
    z0: ArrayView1<f64>,
    keep: bool,
) -> Result<(Array1<f64>, Option<ForwardCache>)> {
    check_dims(params, ctx, meas, z0)?;
    let h = effective_h(params, ctx);
    let nl = ctx.nl;
    let eps = meas.eps();
    let mut z = z0.to_owned();
    let mut caches = Vec::with_capacity(if keep { params.num_layers } else { 0 });
    let jots = meas.len();
    for t in 0..params.num_layers {
        let l = params.layer(t);
        let a = l.a.dot(&z);
        let x = a.mapv(|v| nl.rho(v));
        let lambda = h.dot(&x);
        let mut g = vec![0.0; jots];
        let mut hess = vec![0.0; jots];
        let lam = lambda.as_slice().expect("contiguous");
        if keep {
            meas.grad_and_hess(lam, &mut g, &mut hess)?;
            // the clamp at ε makes ∇ℓ flat below it
            for (hv, lv) in hess.iter_mut().zip(lam) {
                if *lv < eps {
                    *hv = 0.0;
                }
            }
        } else {
            meas.grad_into(lam, &mut g)?;
        }
        let g = Array1::from(g);
        let qz = l.q.dot(&z);
        let r = h.t().dot(&g);
        let d = &qz.mapv(|v| nl.rho_prime(v)) * &r;
        let u = &z - &l.w.dot(&d);
        let next = Zip::from(&u).and(&l.theta).map_collect(|u, th| soft_threshold(*u, *th));
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("activation in layer {t}")));
        }
        if keep {
            caches.push(LayerCache {
                z,
                a,
                x,
                g,
                hess: Array1::from(hess),
                qz,
                r,
                d,
                u,
            });
        }
        z = next;
    }
    Ok((z, keep.then_some(ForwardCache { layers: caches })))
}

/// Runs all layers from `z0`, keeping what [`backward`] needs.
pub fn forward(
    params: &MLNetParams,
    ctx: &NetContext,
    meas: &Measurements,
    z0: ArrayView1<f64>,
) -> Result<(Array1<f64>, ForwardCache)> {
    let (z, cache) = forward_impl(params, ctx, meas, z0, true)?;
    Ok((z, cache.expect("cache requested")))
}

/// Forward pass without the cache.
pub fn infer(params: &MLNetParams, ctx: &NetContext, meas: &Measurements, z0: ArrayView1<f64>) -> Result<Array1<f64>> {
    Ok(forward_impl(params, ctx, meas, z0, false)?.0)
}

/// Parameter gradients (same layout as the parameters, `h` set when the
/// operator is trained) and the gradient with respect to `z0`.
pub fn backward(
    params: &MLNetParams,
    ctx: &NetContext,
    cache: &ForwardCache,
    grad_out: ArrayView1<f64>,
) -> Result<(MLNetParams, Array1<f64>)> {
    if cache.layers.len() != params.num_layers {
        return Err(Error::dims("forward cache layers", params.num_layers, cache.layers.len()));
    }
    if grad_out.len() != params.num_atoms().max(ctx.z0.len()) {
        return Err(Error::dims("output gradient", params.num_atoms(), grad_out.len()));
    }
    let h = effective_h(params, ctx);
    let nl = ctx.nl;
    let mut grads = params.zeros_like();
    let mut gz = grad_out.to_owned();
    for t in (0..params.num_layers).rev() {
        let l = params.layer(t);
        let c = &cache.layers[t];
        let gi = if params.tied { 0 } else { t };
        let m = gz.len();
        let mut gu = Array1::zeros(m);
        {
            let gl = &mut grads.layers[gi];
            for i in 0..m {
                if c.u[i].abs() > l.theta[i] {
                    gu[i] = gz[i];
                    gl.theta[i] -= c.u[i].signum() * gz[i];
                }
            }
            outer_add(&mut gl.w, -1.0, &gu, &c.d);
        }
        let gd = -l.w.t().dot(&gu);
        let gr = &gd * &c.qz.mapv(|v| nl.rho_prime(v));
        let gqz = Zip::from(&gd).and(&c.r).and(&c.qz).map_collect(|gd, r, q| gd * r * nl.rho_second(*q));
        let gg = h.dot(&gr);
        let glam = &gg * &c.hess;
        let gx = h.t().dot(&glam);
        let ga = &gx * &c.a.mapv(|v| nl.rho_prime(v));
        {
            let gl = &mut grads.layers[gi];
            outer_add(&mut gl.q, 1.0, &gqz, &c.z);
            outer_add(&mut gl.a, 1.0, &ga, &c.z);
        }
        if let Some(gh) = grads.h.as_mut() {
            outer_add(gh, 1.0, &glam, &c.x);
            outer_add(gh, 1.0, &c.g, &gr);
        }
        gz = gu + l.q.t().dot(&gqz) + l.a.t().dot(&ga);
    }
    Ok((grads, gz))
}

fn outer_add(m: &mut Array2<f64>, s: f64, u: &Array1<f64>, v: &Array1<f64>) {
    for (i, mut row) in m.rows_mut().into_iter().enumerate() {
        let ui = s * u[i];
        if ui != 0.0 {
            row.scaled_add(ui, v);
        }
    }
}

/// One supervised example: a patch's local measurements and clean intensities.
#[derive(Debug, Clone)]
pub struct Sample {
    pub meas: Measurements,
    pub target: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrScaling {
    /// Plain Adam: the same step for every tensor.
    Absolute,
    /// Each tensor's step is scaled by the RMS of its initial values, so
    /// tensors of very different magnitude move at comparable relative rates.
    Relative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lr_scaling: LrScaling,
    /// Train the local forward operator as well.
    pub train_h: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            lr_scaling: LrScaling::Relative,
            train_h: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Parameters with the lowest validation loss seen (including the start).
    pub params: MLNetParams,
    pub best_epoch: usize,
    /// Epoch 0 is the untrained network.
    pub epochs: Vec<EpochStats>,
    /// Mean loss of every minibatch, in order.
    pub batch_losses: Vec<f64>,
}

impl TrainOutput {
    /// `epoch,train_loss,val_loss`.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:.10e},{:.10e}\n", e.epoch, e.train_loss, e.val_loss));
        }
        out
    }
}

/// `‖ρ(Dz) − y‖²` and its gradient in `z`.
pub fn patch_loss(ctx: &NetContext, z: ArrayView1<f64>, target: ArrayView1<f64>) -> Result<(f64, Array1<f64>)> {
    if target.len() != ctx.dict.atom_dim() {
        return Err(Error::dims("training target", ctx.dict.atom_dim(), target.len()));
    }
    let a = ctx.dict.apply(z);
    let diff = Zip::from(&a).and(&target).map_collect(|a, y| ctx.nl.rho(*a) - y);
    let loss = diff.dot(&diff);
    let back = Zip::from(&diff).and(&a).map_collect(|d, a| 2.0 * d * ctx.nl.rho_prime(*a));
    Ok((loss, ctx.dict.apply_transpose(back.view())))
}

/// Mean loss over a set of samples.
pub fn evaluate_loss(params: &MLNetParams, ctx: &NetContext, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("loss over an empty set"));
    }
    let losses = par::map(samples, |s| {
        let z = infer(params, ctx, &s.meas, ctx.z0.view())?;
        patch_loss(ctx, z.view(), s.target.view()).map(|(l, _)| l)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len() as f64)
}

const GRAD_CHUNK: usize = 4;

/// Mean loss and gradient over a batch; chunk partial sums are added in a
/// fixed order so the result does not depend on scheduling.
pub fn batch_gradient(params: &MLNetParams, ctx: &NetContext, batch: &[&Sample]) -> Result<(f64, MLNetParams)> {
    let chunks: Vec<&[&Sample]> = batch.chunks(GRAD_CHUNK).collect();
    let partial = par::map(&chunks, |chunk| -> Result<(f64, MLNetParams)> {
        let mut acc = params.zeros_like();
        let mut loss = 0.0;
        for s in chunk.iter() {
            let (z, cache) = forward(params, ctx, &s.meas, ctx.z0.view())?;
            let (l, gz) = patch_loss(ctx, z.view(), s.target.view())?;
            let (g, _) = backward(params, ctx, &cache, gz.view())?;
            acc.add_assign(&g);
            loss += l;
        }
        Ok((loss, acc))
    });
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for p in partial {
        let (l, g) = p?;
        loss += l;
        total.add_assign(&g);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    scale: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(params: &MLNetParams, scaling: LrScaling) -> Self {
        let tensors = params.tensors();
        let scale = tensors
            .iter()
            .map(|t| match scaling {
                LrScaling::Absolute => 1.0,
                LrScaling::Relative => {
                    let rms = (t.iter().map(|v| v * v).sum::<f64>() / t.len().max(1) as f64).sqrt();
                    if rms > 0.0 {
                        rms
                    } else {
                        1.0
                    }
                }
            })
            .collect();
        Self {
            m: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            scale,
            step: 0,
        }
    }

    fn update(&mut self, params: &mut MLNetParams, grads: &MLNetParams, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        let gs = grads.tensors();
        let mut k = 0;
        params.for_each_tensor_mut(|p| {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], gs[k]);
            let lr = cfg.learning_rate * self.scale[k];
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + cfg.epsilon);
            }
            k += 1;
        });
        for l in &mut params.layers {
            l.theta.mapv_inplace(|t| t.max(0.0));
        }
    }
}

/// Adam on the mean patch loss; returns the best parameters by validation loss.
pub fn train(
    params: &MLNetParams,
    ctx: &NetContext,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    params.validate()?;
    let mut current = params.clone();
    if cfg.train_h && current.h.is_none() {
        current.h = Some(ctx.op.matrix.as_standard_layout().to_owned());
    }
    let val = if val_set.is_empty() { train_set } else { val_set };
    let mut adam = Adam::new(&current, cfg.lr_scaling);

    let initial_val = evaluate_loss(&current, ctx, val)?;
    let initial_train = evaluate_loss(&current, ctx, train_set)?;
    let mut epochs = vec![EpochStats {
        epoch: 0,
        train_loss: initial_train,
        val_loss: initial_val,
    }];
    let mut best = (initial_val, 0, current.clone());
    let mut batch_losses = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradient(&current, ctx, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss in epoch {epoch} after {} batches",
                    batch_losses.len()
                )));
            }
            batch_losses.push(loss);
            sum += loss * batch.len() as f64;
            adam.update(&mut current, &grads, cfg);
        }
        let val_loss = evaluate_loss(&current, ctx, val)?;
        epochs.push(EpochStats {
            epoch,
            train_loss: sum / train_set.len() as f64,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, current.clone());
        }
    }
    Ok(TrainOutput {
        params: best.2,
        best_epoch: best.1,
        epochs,
        batch_losses,
    })
}

/// Codes for every patch of a grid.
pub fn patch_codes(
    params: &MLNetParams,
    ctx: &NetContext,
    setup: &PatchSetup,
) -> Result<Vec<Array1<f64>>> {
    par::map(&setup.windows, |meas| infer(params, ctx, meas, ctx.z0.view()))
        .into_iter()
        .collect()
}

/// Per-patch inference and overlap averaging of `ρ(Dz_T)`.
pub fn reconstruct(
    params: &MLNetParams,
    ctx: &NetContext,
    stack: &BinaryFrameStack,
    op: &ForwardOperator,
    grid: &PatchGrid,
    peak: f64,
) -> Result<IntensityImage> {
    params.validate()?;
    let meas = Measurements::from_stack(stack);
    let setup = PatchSetup::new(&meas, op, grid)?;
    if setup.op.matrix.dim() != ctx.op.matrix.dim() {
        return Err(Error::dims("local operator", setup.op.matrix.dim(), ctx.op.matrix.dim()));
    }
    let codes = patch_codes(params, ctx, &setup)?;
    let img = setup.assemble(&ctx.dict, &ctx.nl, &codes)?;
    let max = img.iter().cloned().fold(0.0, f64::max);
    IntensityImage::new(img, peak.max(max))
}
