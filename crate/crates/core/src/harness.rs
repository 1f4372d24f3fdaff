//! Desk-scale experiments on synthetic scenes: the low-light and HDR
//! benchmarks (ML vs FISTA vs MLNet) and the quality-vs-iterations latency
//! comparison.
//!
//! Every output file is a pure function of the [`ExperimentSpec`]; all
//! randomness is derived from `spec.seed`. Wall-clock timings are kept out of
//! the files and returned separately.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats;
use crate::ksvd::{ksvd_train, KsvdConfig};
use crate::likelihood::Measurements;
use crate::metrics::{format_db, psnr, quality_curve, PsnrResult, QualityTable};
use crate::mlnet::{self, init_from_ista_tied, NetContext, Sample, TrainConfig, TrainOutput};
use crate::par;
use crate::sensor::{
    make_threshold_pattern, simulate, BinaryFrameStack, ForwardOperator, IntensityImage, Psf, RngState, ThresholdLayout,
    ThresholdMap,
};
use crate::solvers::{
    default_mu, fista_reconstruct, init_code, ista_reconstruct, ml_reconstruct, seed_step, solve_patch, Method,
    PatchSetup,
    SolveTrace, SolverConfig, StepPolicy, TraceRecord,
};
use crate::sparse::{extract_patches, Dictionary, Nonlinearity, PatchGrid};
use crate::synth::{log_display, scene, SceneKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Lowlight,
    Hdr,
    Latency,
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lowlight" => Ok(Self::Lowlight),
            "hdr" => Ok(Self::Hdr),
            "latency" => Ok(Self::Latency),
            _ => Err(Error::invalid(format!("unknown experiment '{s}' (lowlight, hdr, latency)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum GroundTruth {
    /// Generated scene; its seed is derived from the experiment seed.
    Synthetic { kind: SceneKind },
    /// `.pfm` as-is or `.pgm` scaled to the peak.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DictionarySpec {
    pub ksvd: KsvdConfig,
    /// Clean synthetic scenes the training patches are cut from.
    pub training_images: usize,
    pub stride: usize,
    /// Patches are fitted in the code domain `ρ⁻¹(max(x, floor))`.
    pub floor: f64,
}

impl Default for DictionarySpec {
    fn default() -> Self {
        Self {
            ksvd: KsvdConfig::default(),
            training_images: 8,
            stride: 4,
            floor: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetSpec {
    pub layers: usize,
    /// Layer counts evaluated by the latency experiment.
    pub sweep: Vec<usize>,
    pub tied: bool,
    pub train: TrainConfig,
    pub training_images: usize,
    pub validation_images: usize,
    pub stride: usize,
    /// Backtracking iterations per patch used to pick the fixed ISTA step.
    pub calibration_iters: usize,
    /// Quantile of the per-patch backtracked steps taken as the fixed step;
    /// 0 takes the smallest, which keeps every patch stable.
    pub calibration_quantile: f64,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            layers: 10,
            sweep: vec![1, 2, 5, 10, 20],
            tied: false,
            train: TrainConfig::default(),
            training_images: 8,
            validation_images: 2,
            stride: 4,
            calibration_iters: 30,
            calibration_quantile: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub truth: GroundTruth,
    /// Scene size for synthetic ground truth (rows, cols).
    pub image_size: (usize, usize),
    /// Dynamic-range peak: initialization and PSNR normalization.
    pub peak: f64,
    /// Decades spanned by HDR scenes.
    pub decades: f64,
    pub frames: usize,
    pub thresholds: Vec<u16>,
    pub oversampling: usize,
    /// Gaussian PSF width; `None` uses half the oversampling factor.
    pub psf_sigma: Option<f64>,
    pub patch_side: usize,
    pub patch_stride: usize,
    pub softplus_beta: f64,
    pub dictionary: DictionarySpec,
    pub ml: SolverConfig,
    pub fista: SolverConfig,
    /// Fixed ISTA / MLNet-initialization step; calibrated when absent.
    pub ista_eta: Option<f64>,
    pub mlnet: NetSpec,
    /// Master seed. The k-SVD and training seeds are derived from it.
    pub seed: u64,
}

fn default_checkpoints(max_iters: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=20.min(max_iters)).collect();
    let mut k = 20.0f64;
    while (k as usize) < max_iters {
        k *= 1.25;
        out.push((k.round() as usize).min(max_iters));
    }
    out.dedup();
    out
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self::preset(ExperimentKind::Lowlight)
    }
}

impl ExperimentSpec {
    /// 64×64 scenes, `s = 2`, 8×8 patches at stride 4.
    pub fn preset(kind: ExperimentKind) -> Self {
        let fista = SolverConfig {
            max_iters: 1000,
            stop_tol: 0.0,
            peak: 10.0,
            record_at: default_checkpoints(1000),
            ..SolverConfig::default()
        };
        let ml = SolverConfig {
            max_iters: 1000,
            stop_tol: 0.0,
            peak: 10.0,
            ..SolverConfig::default()
        };
        let base = Self {
            name: "lowlight".into(),
            truth: GroundTruth::Synthetic { kind: SceneKind::LowLight },
            image_size: (64, 64),
            peak: 10.0,
            decades: 5.0,
            frames: 4,
            thresholds: (1..=10).collect(),
            oversampling: 2,
            psf_sigma: None,
            patch_side: 8,
            patch_stride: 4,
            softplus_beta: 10.0,
            dictionary: DictionarySpec::default(),
            ml,
            fista,
            ista_eta: None,
            mlnet: NetSpec::default(),
            seed: 0,
        };
        match kind {
            ExperimentKind::Lowlight => base,
            ExperimentKind::Latency => Self {
                name: "latency".into(),
                ..base
            },
            ExperimentKind::Hdr => {
                let peak = 1000.0;
                Self {
                    name: "hdr".into(),
                    truth: GroundTruth::Synthetic { kind: SceneKind::Hdr },
                    peak,
                    frames: 8,
                    thresholds: (0..=10).map(|e| 1u16 << e).collect(),
                    softplus_beta: 1.0,
                    ml: SolverConfig { peak, ..base.ml.clone() },
                    fista: SolverConfig { peak, ..base.fista.clone() },
                    // step sizes spread over orders of magnitude across
                    // five decades; the smallest one freezes the network
                    mlnet: NetSpec {
                        calibration_quantile: 0.5,
                        train: TrainConfig {
                            learning_rate: 1e-4,
                            ..TrainConfig::default()
                        },
                        ..base.mlnet.clone()
                    },
                    ..base
                }
            }
        }
    }

    /// Shrinks image size, iteration counts and training effort for smoke
    /// tests; the pipeline is unchanged.
    pub fn quick(mut self) -> Self {
        self.image_size = (24, 24);
        self.dictionary.ksvd.num_atoms = 32;
        self.dictionary.ksvd.iterations = 3;
        self.dictionary.training_images = 2;
        self.ml.max_iters = 30;
        self.fista.max_iters = 30;
        self.fista.record_at = default_checkpoints(30);
        self.mlnet.layers = 3;
        self.mlnet.sweep = vec![1, 3];
        self.mlnet.train.epochs = 2;
        self.mlnet.training_images = 1;
        self.mlnet.validation_images = 1;
        self.mlnet.calibration_iters = 5;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0 && self.peak.is_finite()) {
            return Err(Error::invalid(format!("experiment peak must be > 0, got {}", self.peak)));
        }
        if self.frames == 0 {
            return Err(Error::invalid("frame count must be >= 1"));
        }
        if self.thresholds.is_empty() || self.thresholds.contains(&0) {
            return Err(Error::invalid("thresholds must be a non-empty set of values >= 1"));
        }
        if self.oversampling == 0 {
            return Err(Error::invalid("oversampling must be >= 1"));
        }
        if let Some(s) = self.psf_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("psf sigma must be >= 0, got {s}")));
            }
        }
        if self.patch_side == 0 || self.patch_stride == 0 || self.dictionary.stride == 0 || self.mlnet.stride == 0 {
            return Err(Error::invalid("patch side and strides must be >= 1"));
        }
        if self.image_size.0 < self.patch_side || self.image_size.1 < self.patch_side {
            return Err(Error::invalid("image is smaller than one patch"));
        }
        if !(self.softplus_beta > 0.0) {
            return Err(Error::invalid("softplus beta must be > 0"));
        }
        if self.dictionary.training_images == 0 || self.mlnet.training_images == 0 {
            return Err(Error::invalid("dictionary and network need at least one training image"));
        }
        if self.mlnet.layers == 0 || self.mlnet.sweep.contains(&0) {
            return Err(Error::invalid("layer counts must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.mlnet.calibration_quantile) {
            return Err(Error::invalid("calibration quantile must lie in [0, 1]"));
        }
        if let GroundTruth::Synthetic { kind: SceneKind::Hdr } = self.truth {
            if !(self.decades > 0.0) {
                return Err(Error::invalid("HDR scenes need decades > 0"));
            }
        }
        if let Some(eta) = self.ista_eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::invalid(format!("ISTA step must be > 0, got {eta}")));
            }
        }
        self.ml.validate()?;
        self.fista.validate()
    }

    /// The spec with derived sub-seeds filled in, as echoed in the manifest.
    pub fn effective(&self) -> Self {
        let mut s = self.clone();
        s.dictionary.ksvd.seed = derive_seed(self.seed, Stream::Ksvd, 0);
        s.mlnet.train.seed = derive_seed(self.seed, Stream::Training, 0);
        s.ml.peak = self.peak;
        s.fista.peak = self.peak;
        s
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("spec serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("experiment spec: {e}")))
    }

    fn nonlinearity(&self) -> Nonlinearity {
        Nonlinearity::Softplus {
            beta: self.softplus_beta,
        }
    }

    fn scene_kind(&self) -> SceneKind {
        match self.truth {
            GroundTruth::Synthetic { kind: SceneKind::Dark } | GroundTruth::File { .. } => SceneKind::LowLight,
            GroundTruth::Synthetic { kind } => kind,
        }
    }

    fn optics(&self, dims: (usize, usize)) -> Result<ForwardOperator> {
        match self.psf_sigma {
            Some(s) if s == 0.0 => ForwardOperator::new(dims, self.oversampling, Psf::identity()),
            sigma => ForwardOperator::gaussian(dims, self.oversampling, sigma),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    Truth = 1,
    Sensor,
    DictImages,
    TrainImages,
    TrainSensor,
    ValImages,
    ValSensor,
    CalibImages,
    CalibSensor,
    Ksvd,
    Training,
}

fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.set_word_pos(2 * index as u128);
    rng.next_u64()
}

/// Trained dictionaries, calibrations and networks keyed by the spec fields
/// that determine them, so consecutive experiments can share them.
#[derive(Debug, Default)]
pub struct Artifacts {
    dicts: Vec<(String, Dictionary)>,
    calibrations: Vec<(String, Calibration)>,
    nets: Vec<(String, TrainOutput)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub mu: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub name: String,
    /// Final PSNR per method, in report order.
    pub psnr: Vec<(String, PsnrResult)>,
    /// PSNR per iteration (latency experiment).
    pub quality: Option<QualityTable>,
    /// MLNet PSNR per layer count (latency experiment).
    pub layer_psnr: Vec<(usize, f64)>,
    pub calibration: Option<Calibration>,
    /// Report files by name; deterministic under the spec.
    pub files: BTreeMap<String, Vec<u8>>,
    /// Wall-clock milliseconds per stage; not part of the files.
    pub timings: Vec<(String, f64)>,
}

impl Report {
    pub fn psnr_db(&self, method: &str) -> Option<f64> {
        self.psnr.iter().find(|(m, _)| m == method).map(|(_, p)| p.db())
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Human-readable summary for stdout.
    pub fn summary(&self) -> String {
        let mut out = format!("experiment {}\n", self.name);
        for (m, p) in &self.psnr {
            out.push_str(&format!("  {m:<8} PSNR {} dB\n", p));
        }
        for (t, db) in &self.layer_psnr {
            out.push_str(&format!("  mlnet T={t:<3} PSNR {} dB\n", format_db(*db)));
        }
        for (stage, ms) in &self.timings {
            out.push_str(&format!("  {stage:<16} {:.1} ms\n", ms));
        }
        out
    }

    fn add_image(&mut self, stem: &str, img: &Array2<f64>, peak: f64) -> Result<()> {
        let mut pfm = Vec::new();
        formats::write_pfm(&mut pfm, img)?;
        self.files.insert(format!("{stem}.pfm"), pfm);
        let mut pgm = Vec::new();
        formats::write_pgm(&mut pgm, &formats::Pgm::from_intensity(img, peak, u16::MAX)?)?;
        self.files.insert(format!("{stem}.pgm"), pgm);
        Ok(())
    }

    fn add_text(&mut self, name: &str, text: String) {
        self.files.insert(name.to_string(), text.into_bytes());
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.timings.push((stage.to_string(), start.elapsed().as_secs_f64() * 1e3));
        Ok(out)
    }
}

/// Everything the reconstructions of one experiment share.
struct Bench {
    truth: IntensityImage,
    optics: ForwardOperator,
    stack: BinaryFrameStack,
    grid: PatchGrid,
}

fn threshold_map(spec: &ExperimentSpec, jot_dims: (usize, usize)) -> Result<ThresholdMap> {
    make_threshold_pattern(jot_dims, &spec.thresholds, ThresholdLayout::RowMajorCycle)
}

fn ground_truth(spec: &ExperimentSpec) -> Result<IntensityImage> {
    match &spec.truth {
        GroundTruth::Synthetic { kind } => scene(
            *kind,
            spec.image_size,
            spec.peak,
            spec.decades,
            derive_seed(spec.seed, Stream::Truth, 0),
        ),
        GroundTruth::File { path } => IntensityImage::new(formats::load_image(path, spec.peak)?, spec.peak),
    }
}

fn bench(spec: &ExperimentSpec) -> Result<Bench> {
    let truth = ground_truth(spec)?;
    let dims = truth.dims();
    if dims.0 < spec.patch_side || dims.1 < spec.patch_side {
        return Err(Error::invalid("ground truth is smaller than one patch"));
    }
    let optics = spec.optics(dims)?;
    let q = threshold_map(spec, optics.jot_dims())?;
    let mut rng = RngState::new(derive_seed(spec.seed, Stream::Sensor, 0));
    let stack = simulate(&truth, &optics, &q, spec.frames, &mut rng)?;
    let grid = PatchGrid::new(dims, spec.patch_side, spec.patch_stride)?;
    Ok(Bench {
        truth,
        optics,
        stack,
        grid,
    })
}

/// Clean scene and simulated stack for a training image.
fn training_pair(
    spec: &ExperimentSpec,
    images: Stream,
    sensor: Stream,
    index: u64,
) -> Result<(IntensityImage, ForwardOperator, BinaryFrameStack)> {
    let truth = scene(
        spec.scene_kind(),
        spec.image_size,
        spec.peak,
        spec.decades,
        derive_seed(spec.seed, images, index),
    )?;
    let optics = spec.optics(spec.image_size)?;
    let q = threshold_map(spec, optics.jot_dims())?;
    let mut rng = RngState::new(derive_seed(spec.seed, sensor, index));
    let stack = simulate(&truth, &optics, &q, spec.frames, &mut rng)?;
    Ok((truth, optics, stack))
}

fn dictionary_key(spec: &ExperimentSpec) -> String {
    format!(
        "{:?}",
        (
            spec.seed,
            spec.scene_kind(),
            spec.image_size,
            spec.peak,
            spec.decades,
            spec.patch_side,
            spec.softplus_beta,
            &spec.dictionary
        )
    )
}

fn calibration_key(spec: &ExperimentSpec) -> String {
    format!(
        "{}|{:?}",
        dictionary_key(spec),
        (
            spec.frames,
            &spec.thresholds,
            spec.oversampling,
            spec.psf_sigma,
            spec.ista_eta,
            &spec.fista.mu,
            &spec.fista.step,
            spec.fista.lipschitz_floor,
            spec.mlnet.calibration_iters,
            spec.mlnet.calibration_quantile
        )
    )
}

fn net_key(spec: &ExperimentSpec, layers: usize) -> String {
    let n = &spec.mlnet;
    format!(
        "{}|{:?}",
        calibration_key(spec),
        (
            layers,
            n.tied,
            &n.train,
            n.training_images,
            n.validation_images,
            n.stride
        )
    )
}

/// k-SVD dictionary over code-domain patches of clean training scenes.
pub fn train_dictionary(spec: &ExperimentSpec) -> Result<Dictionary> {
    let spec = spec.effective();
    let nl = spec.nonlinearity();
    let floor = spec.dictionary.floor;
    let grid = PatchGrid::new(spec.image_size, spec.patch_side, spec.dictionary.stride)?;
    let mut patches = Vec::new();
    for i in 0..spec.dictionary.training_images as u64 {
        let truth = scene(
            spec.scene_kind(),
            spec.image_size,
            spec.peak,
            spec.decades,
            derive_seed(spec.seed, Stream::DictImages, i),
        )?;
        for p in extract_patches(truth.data(), &grid)? {
            patches.push(
                p.iter()
                    .map(|v| nl.rho_inverse(v.max(floor)))
                    .collect::<Result<Array1<f64>>>()?,
            );
        }
    }
    ksvd_train(&patches, &spec.dictionary.ksvd)
}

/// Sparsity weight (unless fixed by the FISTA config) and fixed ISTA step,
/// both picked on a held-out calibration scene.
pub fn calibrate(spec: &ExperimentSpec, dict: &Dictionary) -> Result<Calibration> {
    let spec = spec.effective();
    let (_, optics, stack) = training_pair(&spec, Stream::CalibImages, Stream::CalibSensor, 0)?;
    let meas = Measurements::from_stack(&stack);
    let grid = PatchGrid::new(spec.image_size, spec.patch_side, spec.patch_stride)?;
    let setup = PatchSetup::new(&meas, &optics, &grid)?;
    let mut cal = calibrate_on(
        &setup,
        dict,
        &spec.nonlinearity(),
        &spec.fista,
        spec.mlnet.calibration_iters,
        spec.mlnet.calibration_quantile,
    )?;
    if let Some(eta) = spec.ista_eta {
        cal.eta = eta;
    }
    Ok(cal)
}

/// `μ` from `cfg.mu` or [`default_mu`], and the `quantile` of the steps
/// backtracking ISTA settles on after `iters` iterations per patch.
pub fn calibrate_on(
    setup: &PatchSetup,
    dict: &Dictionary,
    nl: &Nonlinearity,
    cfg: &SolverConfig,
    iters: usize,
    quantile: f64,
) -> Result<Calibration> {
    if setup.windows.is_empty() {
        return Err(Error::invalid("calibration needs at least one patch"));
    }
    let z0 = init_code(dict, nl, cfg.peak)?;
    let mu = match cfg.mu {
        Some(mu) => mu,
        None => default_mu(setup, dict, nl, &z0)?,
    };
    let cfg = SolverConfig {
        mu: Some(mu),
        max_iters: iters.max(1),
        step: match cfg.step {
            StepPolicy::Fixed { .. } => StepPolicy::default(),
            ref s => s.clone(),
        },
        stop_tol: 0.0,
        record_at: Vec::new(),
        ..cfg.clone()
    };
    let meas = &setup.windows[0];
    let eta0 = seed_step(meas, &setup.op, dict, cfg.lipschitz_floor, cfg.peak);
    let steps = par::map_range(setup.windows.len(), |i| {
        solve_patch(&setup.problem(i, dict, *nl), z0.view(), mu, &cfg, Method::Ista, eta0).map(|s| s.eta)
    });
    let mut steps: Vec<f64> = steps.into_iter().collect::<Result<_>>()?;
    steps.sort_by(|a, b| a.total_cmp(b));
    let idx = ((steps.len() - 1) as f64 * quantile.clamp(0.0, 1.0)).round() as usize;
    Ok(Calibration { mu, eta: steps[idx] })
}

fn samples(spec: &ExperimentSpec, images: Stream, sensor: Stream, count: usize) -> Result<Vec<Sample>> {
    let grid = PatchGrid::new(spec.image_size, spec.patch_side, spec.mlnet.stride)?;
    let mut out = Vec::new();
    for i in 0..count as u64 {
        let (truth, optics, stack) = training_pair(spec, images, sensor, i)?;
        let meas = Measurements::from_stack(&stack);
        let setup = PatchSetup::new(&meas, &optics, &grid)?;
        let targets = extract_patches(truth.data(), &grid)?;
        out.extend(
            setup
                .windows
                .into_iter()
                .zip(targets)
                .map(|(meas, target)| Sample { meas, target }),
        );
    }
    Ok(out)
}

fn net_context(spec: &ExperimentSpec, dict: &Dictionary) -> Result<NetContext> {
    let optics = spec.optics(spec.image_size)?;
    NetContext::for_optics(dict.clone(), spec.nonlinearity(), &optics, spec.peak)
}

/// Trains a `layers`-layer MLNet from its ISTA initialization on simulated
/// training scenes.
pub fn train_network(spec: &ExperimentSpec, dict: &Dictionary, cal: Calibration, layers: usize) -> Result<TrainOutput> {
    let spec = spec.effective();
    let ctx = net_context(&spec, dict)?;
    let train_set = samples(&spec, Stream::TrainImages, Stream::TrainSensor, spec.mlnet.training_images)?;
    let val_set = samples(&spec, Stream::ValImages, Stream::ValSensor, spec.mlnet.validation_images)?;
    let init = init_from_ista_tied(dict, cal.eta, cal.mu, layers, spec.mlnet.tied);
    mlnet::train(&init, &ctx, &train_set, &val_set, &spec.mlnet.train)
}

impl Artifacts {
    pub fn dictionary(&mut self, spec: &ExperimentSpec) -> Result<Dictionary> {
        let key = dictionary_key(spec);
        if let Some((_, d)) = self.dicts.iter().find(|(k, _)| *k == key) {
            return Ok(d.clone());
        }
        let d = train_dictionary(spec)?;
        self.dicts.push((key, d.clone()));
        Ok(d)
    }

    pub fn calibration(&mut self, spec: &ExperimentSpec) -> Result<Calibration> {
        let key = calibration_key(spec);
        if let Some((_, c)) = self.calibrations.iter().find(|(k, _)| *k == key) {
            return Ok(*c);
        }
        let dict = self.dictionary(spec)?;
        let c = calibrate(spec, &dict)?;
        self.calibrations.push((key, c));
        Ok(c)
    }

    pub fn network(&mut self, spec: &ExperimentSpec, layers: usize) -> Result<TrainOutput> {
        let key = net_key(spec, layers);
        if let Some((_, n)) = self.nets.iter().find(|(k, _)| *k == key) {
            return Ok(n.clone());
        }
        let dict = self.dictionary(spec)?;
        let cal = self.calibration(spec)?;
        let n = train_network(spec, &dict, cal, layers)?;
        self.nets.push((key, n.clone()));
        Ok(n)
    }
}

/// `iteration,objective,psnr`.
fn trace_csv(trace: &SolveTrace) -> String {
    let mut out = String::from("iteration,objective,psnr\n");
    for r in &trace.records {
        let p = r.psnr.map(format_db).unwrap_or_default();
        out.push_str(&format!("{},{:.10e},{}\n", r.iteration, r.objective, p));
    }
    out
}

fn psnr_csv(rows: &[(String, PsnrResult)]) -> String {
    let mut out = String::from("method,psnr_db,mse\n");
    for (m, p) in rows {
        out.push_str(&format!("{m},{},{:.10e}\n", p, p.mse));
    }
    out
}

fn manifest(spec: &ExperimentSpec, kind: ExperimentKind, cal: Option<Calibration>) -> Result<String> {
    let mut out = format!(
        "# jotrecon {} experiment {:?}\n# seed = {}\n",
        env!("CARGO_PKG_VERSION"),
        kind,
        spec.seed
    );
    if let Some(c) = cal {
        out.push_str(&format!("# calibrated mu = {:e}, eta = {:e}\n", c.mu, c.eta));
    }
    out.push_str(&spec.effective().to_toml()?);
    Ok(out)
}

fn solver_cfg(base: &SolverConfig, spec: &ExperimentSpec, mu: f64) -> SolverConfig {
    SolverConfig {
        mu: Some(mu),
        peak: spec.peak,
        ..base.clone()
    }
}

/// ML, FISTA and MLNet on one simulated stack. `log_floor` adds log-scale
/// images for display.
fn run_comparison(
    spec: &ExperimentSpec,
    kind: ExperimentKind,
    artifacts: &mut Artifacts,
    log_floor: Option<f64>,
) -> Result<Report> {
    spec.validate()?;
    let spec = spec.effective();
    let mut report = Report {
        name: spec.name.clone(),
        ..Report::default()
    };
    let b = report.time("simulate", || bench(&spec))?;
    let dict = report.time("dictionary", || artifacts.dictionary(&spec))?;
    let cal = report.time("calibration", || artifacts.calibration(&spec))?;
    let net = report.time("mlnet training", || artifacts.network(&spec, spec.mlnet.layers))?;
    let nl = spec.nonlinearity();
    let peak = spec.peak;

    let ml_cfg = SolverConfig {
        peak,
        ..spec.ml.clone()
    };
    let (ml, ml_trace) = report.time("ml", || ml_reconstruct(&b.stack, &b.optics, &ml_cfg, Some(&b.truth)))?;
    let fista_cfg = solver_cfg(&spec.fista, &spec, cal.mu);
    let (fista, fista_trace) = report.time("fista", || {
        fista_reconstruct(&b.stack, &dict, &nl, &b.optics, &b.grid, &fista_cfg, Some(&b.truth))
    })?;
    let ctx = net_context(&spec, &dict)?;
    let net_img = report.time("mlnet", || mlnet::reconstruct(&net.params, &ctx, &b.stack, &b.optics, &b.grid, peak))?;

    for (m, img) in [("ml", &ml), ("fista", &fista), ("mlnet", &net_img)] {
        report.psnr.push((m.to_string(), psnr(b.truth.data(), img.data(), peak)?));
    }
    report.calibration = Some(cal);
    report.add_image("truth", b.truth.data(), peak)?;
    for (m, img) in [("ml", &ml), ("fista", &fista), ("mlnet", &net_img)] {
        report.add_image(m, img.data(), peak)?;
    }
    if let Some(floor) = log_floor {
        for (m, img) in [("truth", &b.truth), ("ml", &ml), ("fista", &fista), ("mlnet", &net_img)] {
            let mut buf = Vec::new();
            formats::write_pfm(&mut buf, &log_display(img.data(), floor))?;
            report.files.insert(format!("{m}_log.pfm"), buf);
        }
    }
    let psnr_text = psnr_csv(&report.psnr);
    report.add_text("psnr.csv", psnr_text);
    report.add_text("trace_ml.csv", trace_csv(&ml_trace));
    report.add_text("trace_fista.csv", trace_csv(&fista_trace));
    report.add_text("mlnet_loss.csv", net.loss_csv());
    let mut bytes = Vec::new();
    formats::write_dict(&mut bytes, &dict)?;
    report.files.insert("dictionary.dict".into(), bytes);
    let mut bytes = Vec::new();
    formats::write_mlnet(&mut bytes, &net.params)?;
    report.files.insert("network.mlnet".into(), bytes);
    report.add_text("manifest.txt", manifest(&spec, kind, Some(cal))?);
    Ok(report)
}

/// Low-light benchmark: ML, FISTA and MLNet PSNR, images and traces.
pub fn run_lowlight(spec: &ExperimentSpec, artifacts: &mut Artifacts) -> Result<Report> {
    run_comparison(spec, ExperimentKind::Lowlight, artifacts, None)
}

/// HDR benchmark; images are also written as `log10` for display.
pub fn run_hdr(spec: &ExperimentSpec, artifacts: &mut Artifacts) -> Result<Report> {
    let floor = spec.peak * 10f64.powf(-spec.decades - 1.0);
    run_comparison(spec, ExperimentKind::Hdr, artifacts, Some(floor))
}

/// PSNR per iteration for ISTA and FISTA from the same initialization,
/// MLNet PSNR per layer count, and the converged ML PSNR as a flat reference.
pub fn run_latency(spec: &ExperimentSpec, artifacts: &mut Artifacts) -> Result<Report> {
    spec.validate()?;
    let spec = spec.effective();
    let mut report = Report {
        name: spec.name.clone(),
        ..Report::default()
    };
    let b = report.time("simulate", || bench(&spec))?;
    let dict = report.time("dictionary", || artifacts.dictionary(&spec))?;
    let cal = report.time("calibration", || artifacts.calibration(&spec))?;
    let nl = spec.nonlinearity();
    let peak = spec.peak;

    let fista_cfg = solver_cfg(&spec.fista, &spec, cal.mu);
    let ista_cfg = SolverConfig {
        step: StepPolicy::Fixed { eta: cal.eta },
        restart: false,
        ..fista_cfg.clone()
    };
    let (_, ista_trace) = report.time("ista", || {
        ista_reconstruct(&b.stack, &dict, &nl, &b.optics, &b.grid, &ista_cfg, Some(&b.truth))
    })?;
    let (fista, fista_trace) = report.time("fista", || {
        fista_reconstruct(&b.stack, &dict, &nl, &b.optics, &b.grid, &fista_cfg, Some(&b.truth))
    })?;
    let ml_cfg = SolverConfig {
        peak,
        ..spec.ml.clone()
    };
    let (ml, _) = report.time("ml", || ml_reconstruct(&b.stack, &b.optics, &ml_cfg, None))?;
    let ml_db = psnr(b.truth.data(), ml.data(), peak)?;
    let ml_flat = SolveTrace {
        records: vec![TraceRecord {
            iteration: 0,
            objective: 0.0,
            psnr: Some(ml_db.db()),
            millis: 0.0,
        }],
    };
    let quality = quality_curve(&[&ista_trace, &fista_trace, &ml_flat], &["ista", "fista", "ml"])?;

    let ctx = net_context(&spec, &dict)?;
    let mut sweep = spec.mlnet.sweep.clone();
    sweep.sort_unstable();
    sweep.dedup();
    let mut layer_csv = String::from("layers,psnr,untrained_psnr\n");
    for &t in &sweep {
        let net = report.time(&format!("train T={t}"), || artifacts.network(&spec, t))?;
        let img = report.time(&format!("mlnet T={t}"), || {
            mlnet::reconstruct(&net.params, &ctx, &b.stack, &b.optics, &b.grid, peak)
        })?;
        let init = init_from_ista_tied(&dict, cal.eta, cal.mu, t, spec.mlnet.tied);
        let raw = mlnet::reconstruct(&init, &ctx, &b.stack, &b.optics, &b.grid, peak)?;
        let db = psnr(b.truth.data(), img.data(), peak)?.db();
        let raw_db = psnr(b.truth.data(), raw.data(), peak)?.db();
        layer_csv.push_str(&format!("{t},{},{}\n", format_db(db), format_db(raw_db)));
        report.layer_psnr.push((t, db));
    }

    report.psnr.push(("ml".into(), ml_db));
    report.psnr.push(("fista".into(), psnr(b.truth.data(), fista.data(), peak)?));
    report.calibration = Some(cal);
    report.add_text("quality.csv", quality.to_csv());
    report.add_text("mlnet_layers.csv", layer_csv);
    report.add_text("trace_ista.csv", trace_csv(&ista_trace));
    report.add_text("trace_fista.csv", trace_csv(&fista_trace));
    report.add_text("manifest.txt", manifest(&spec, ExperimentKind::Latency, Some(cal))?);
    report.quality = Some(quality);
    Ok(report)
}

pub fn run(kind: ExperimentKind, spec: &ExperimentSpec, artifacts: &mut Artifacts) -> Result<Report> {
    match kind {
        ExperimentKind::Lowlight => run_lowlight(spec, artifacts),
        ExperimentKind::Hdr => run_hdr(spec, artifacts),
        ExperimentKind::Latency => run_latency(spec, artifacts),
    }
}
