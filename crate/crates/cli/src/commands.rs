use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use jotrecon::formats;
use jotrecon::harness::{self, calibrate_on, Artifacts, GroundTruth};
use jotrecon::ksvd::{ksvd_train, KsvdConfig};
use jotrecon::metrics::{format_db, psnr};
use jotrecon::mlnet::{self, init_from_ista_tied, NetContext, Sample, TrainConfig};
use jotrecon::sensor::{make_threshold_pattern, simulate as simulate_stack, ThresholdLayout};
use jotrecon::solvers::{self, Method, PatchSetup, SolverConfig, StepPolicy};
use jotrecon::sparse::extract_patches;
use jotrecon::{
    BinaryFrameStack, Dictionary, Error, ForwardOperator, IntensityImage, Measurements, Nonlinearity, PatchGrid, Psf,
    RngState, ThresholdMap,
};

use crate::config::{experiment_spec, fill};
use crate::{
    EvaluateArgs, ExperimentArgs, MethodArg, ReconstructArgs, SimulateArgs, TrainDictArgs, TrainNetArgs,
};

type Result<T> = std::result::Result<T, Error>;

const PEAK: f64 = 10.0;
const FRAMES: usize = 4;
const THRESHOLDS: &str = "1..10";
const OVERSAMPLE: usize = 2;
const STRIDE: usize = 4;
const BETA: f64 = 10.0;

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| usage(format!("missing required --{flag}")))
}

/// `"1..10"` (inclusive), `"1,2,4"`, or a mix such as `"1..4,8,16"`.
pub fn parse_thresholds(s: &str) -> Result<Vec<u16>> {
    let bad = || usage(format!("bad threshold list '{s}'"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u16 = a.trim().parse().map_err(|_| bad())?;
            let b: u16 = b.trim().parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() || out.contains(&0) {
        return Err(usage(format!("thresholds must be >= 1, got '{s}'")));
    }
    Ok(out)
}

fn optics(
    image_dims: (usize, usize),
    oversample: usize,
    sigma: Option<f64>,
    psf: Option<&Path>,
) -> Result<ForwardOperator> {
    match psf {
        Some(path) => ForwardOperator::new(image_dims, oversample, formats::load_psf(path)?),
        None if sigma == Some(0.0) => ForwardOperator::new(image_dims, oversample, Psf::identity()),
        None => ForwardOperator::gaussian(image_dims, oversample, sigma),
    }
}

/// Image grid of a stack recorded at oversampling `s`.
fn image_dims(stack: &BinaryFrameStack, s: usize) -> Result<(usize, usize)> {
    let (r, c) = stack.dims();
    if s == 0 {
        return Err(usage("oversampling must be >= 1"));
    }
    if r % s != 0 || c % s != 0 {
        return Err(Error::DimensionMismatch {
            context: "jot grid vs oversampling",
            expected: format!("multiples of {s}"),
            actual: format!("{r}x{c}"),
        });
    }
    Ok((r / s, c / s))
}

fn load_truth(path: &Path, peak: f64) -> Result<IntensityImage> {
    IntensityImage::new(formats::load_image(path, peak)?, peak)
}

fn thresholds(spec: &str, jot_dims: (usize, usize)) -> Result<ThresholdMap> {
    make_threshold_pattern(jot_dims, &parse_thresholds(spec)?, ThresholdLayout::RowMajorCycle)
}

pub fn simulate(mut a: SimulateArgs, mut c: SimulateArgs) -> Result<()> {
    fill!(a, c; input, peak, frames, thresholds, oversample, psf_sigma, psf, seed, out);
    let input = required(a.input, "input")?;
    let out = required(a.out, "out")?;
    let peak = a.peak.unwrap_or(PEAK);
    let data = formats::load_image(&input, peak)?;
    let max = data.iter().cloned().fold(0.0, f64::max);
    let x = IntensityImage::new(data, peak.max(max))?;
    let op = optics(x.dims(), a.oversample.unwrap_or(OVERSAMPLE), a.psf_sigma, a.psf.as_deref())?;
    let q = thresholds(a.thresholds.as_deref().unwrap_or(THRESHOLDS), op.jot_dims())?;
    let mut rng = RngState::new(a.seed.unwrap_or(0));
    let stack = simulate_stack(&x, &op, &q, a.frames.unwrap_or(FRAMES), &mut rng)?;
    formats::save_bfs(&out, &stack)?;
    let (r, c) = stack.dims();
    println!(
        "wrote {}: {} frames of {r}x{c} jots, on-bit fraction {:.6}",
        out.display(),
        stack.num_frames(),
        stack.on_fraction()
    );
    Ok(())
}

fn solver_config(a: &ReconstructArgs, peak: f64) -> SolverConfig {
    SolverConfig {
        mu: a.mu,
        max_iters: a.iters.unwrap_or(300),
        step: match a.eta {
            Some(eta) => StepPolicy::Fixed { eta },
            None => StepPolicy::default(),
        },
        stop_tol: a.tol.unwrap_or(1e-6),
        peak,
        ..SolverConfig::default()
    }
}

pub fn reconstruct(mut a: ReconstructArgs, mut c: ReconstructArgs) -> Result<()> {
    fill!(a, c; input, method, dict, mlnet, mu, iters, eta, tol, peak, oversample, psf_sigma, psf, stride, beta,
        truth, out, trace);
    let method = required(a.method, "method")?;
    let input = required(a.input.clone(), "input")?;
    let out = required(a.out.clone(), "out")?;
    let needs_dict = method != MethodArg::Ml;
    if needs_dict && a.dict.is_none() {
        return Err(usage(format!("--method {method:?} requires --dict").to_lowercase()));
    }
    if method == MethodArg::Mlnet && a.mlnet.is_none() {
        return Err(usage("--method mlnet requires --mlnet"));
    }
    let peak = a.peak.unwrap_or(PEAK);
    let stack = formats::load_bfs(&input)?;
    let s = a.oversample.unwrap_or(OVERSAMPLE);
    let op = optics(image_dims(&stack, s)?, s, a.psf_sigma, a.psf.as_deref())?;
    let truth = a.truth.as_deref().map(|p| load_truth(p, peak)).transpose()?;
    let nl = Nonlinearity::Softplus {
        beta: a.beta.unwrap_or(BETA),
    };
    let cfg = solver_config(&a, peak);

    let start = std::time::Instant::now();
    let (img, trace) = match method {
        MethodArg::Ml => {
            let (img, trace) = solvers::ml_reconstruct(&stack, &op, &cfg, truth.as_ref())?;
            (img, Some(trace))
        }
        MethodArg::Fista | MethodArg::Ista => {
            let dict = formats::load_dict(a.dict.as_deref().unwrap())?;
            let grid = patch_grid(&dict, op.image_dims(), a.stride.unwrap_or(STRIDE))?;
            let m = if method == MethodArg::Fista { Method::Fista } else { Method::Ista };
            let (img, trace) = solvers::patch_reconstruct(&stack, &dict, &nl, &op, &grid, &cfg, m, truth.as_ref())?;
            (img, Some(trace))
        }
        MethodArg::Mlnet => {
            let dict = formats::load_dict(a.dict.as_deref().unwrap())?;
            let params = formats::load_mlnet(a.mlnet.as_deref().unwrap())?;
            let grid = patch_grid(&dict, op.image_dims(), a.stride.unwrap_or(STRIDE))?;
            let ctx = NetContext::for_optics(dict, nl, &op, peak)?;
            (mlnet::reconstruct(&params, &ctx, &stack, &op, &grid, peak)?, None)
        }
    };
    let millis = start.elapsed().as_secs_f64() * 1e3;

    formats::save_image(&out, img.data(), peak)?;
    let quality = match &truth {
        Some(t) => Some(psnr(t.data(), img.data(), peak)?),
        None => None,
    };
    if let Some(path) = &a.trace {
        let text = match &trace {
            Some(t) => t.to_csv(),
            None => format!(
                "iteration,objective,psnr,millis\n{},,{},{millis:.3}\n",
                formats::load_mlnet(a.mlnet.as_deref().unwrap())?.num_layers,
                quality.map(|q| q.to_string()).unwrap_or_default()
            ),
        };
        formats::save_text(path, &text)?;
    }
    let iters = trace.as_ref().map(|t| t.len().saturating_sub(1));
    print!("{method:?} reconstruction written to {}", out.display());
    if let Some(k) = iters {
        print!(" after {k} iterations");
    }
    print!(" in {millis:.1} ms");
    if let Some(q) = quality {
        print!(", PSNR {q} dB");
    }
    println!();
    Ok(())
}

fn patch_grid(dict: &Dictionary, dims: (usize, usize), stride: usize) -> Result<PatchGrid> {
    let side = dict
        .patch_side()
        .ok_or_else(|| usage("dictionary atoms are not square patches"))?;
    PatchGrid::new(dims, side, stride)
}

pub fn train_dict(mut a: TrainDictArgs, mut c: TrainDictArgs) -> Result<()> {
    fill!(a, c; peak, patch_side, stride, atoms, sparsity, iters, beta, floor, seed, out);
    if a.inputs.is_empty() {
        a.inputs = std::mem::take(&mut c.inputs);
    }
    if a.inputs.is_empty() {
        return Err(usage("missing required --input"));
    }
    let out = required(a.out, "out")?;
    let peak = a.peak.unwrap_or(PEAK);
    let side = a.patch_side.unwrap_or(8);
    let floor = a.floor.unwrap_or(1e-2);
    let nl = Nonlinearity::Softplus {
        beta: a.beta.unwrap_or(BETA),
    };
    let defaults = KsvdConfig::default();
    let cfg = KsvdConfig {
        num_atoms: a.atoms.unwrap_or(defaults.num_atoms),
        sparsity: a.sparsity.unwrap_or(defaults.sparsity),
        iterations: a.iters.unwrap_or(defaults.iterations),
        seed: a.seed.unwrap_or(defaults.seed),
        ..defaults
    };
    let mut patches = Vec::new();
    for path in &a.inputs {
        let img = formats::load_image(path, peak)?;
        let grid = PatchGrid::new(img.dim(), side, a.stride.unwrap_or(STRIDE))?;
        for p in extract_patches(&img, &grid)? {
            patches.push(
                p.iter()
                    .map(|v| nl.rho_inverse(v.max(floor)))
                    .collect::<Result<Array1<f64>>>()?,
            );
        }
    }
    let dict = ksvd_train(&patches, &cfg)?;
    formats::save_dict(&out, &dict)?;
    println!(
        "wrote {}: {} atoms of {side}x{side} from {} patches",
        out.display(),
        dict.num_atoms(),
        patches.len()
    );
    Ok(())
}

fn simulated_samples(
    paths: &[PathBuf],
    peak: f64,
    optics_for: &dyn Fn((usize, usize)) -> Result<ForwardOperator>,
    q: &str,
    frames: usize,
    side: usize,
    stride: usize,
    rng: &mut RngState,
) -> Result<(Vec<Sample>, Option<PatchSetup>)> {
    let mut out = Vec::new();
    let mut first = None;
    for path in paths {
        let truth = load_truth(path, peak)?;
        let op = optics_for(truth.dims())?;
        let stack = simulate_stack(&truth, &op, &thresholds(q, op.jot_dims())?, frames, rng)?;
        let grid = PatchGrid::new(truth.dims(), side, stride)?;
        let setup = PatchSetup::new(&Measurements::from_stack(&stack), &op, &grid)?;
        let targets = extract_patches(truth.data(), &grid)?;
        out.extend(
            setup
                .windows
                .iter()
                .cloned()
                .zip(targets)
                .map(|(meas, target)| Sample { meas, target }),
        );
        first.get_or_insert(setup);
    }
    Ok((out, first))
}

pub fn train_net(mut a: TrainNetArgs, mut c: TrainNetArgs) -> Result<()> {
    fill!(a, c; dict, layers, tied, epochs, lr, batch, frames, thresholds, oversample, psf_sigma, psf, peak, mu, eta,
        stride, beta, init_only, seed, out, loss);
    if a.truths.is_empty() {
        a.truths = std::mem::take(&mut c.truths);
    }
    if a.vals.is_empty() {
        a.vals = std::mem::take(&mut c.vals);
    }
    let dict = formats::load_dict(&required(a.dict.clone(), "dict")?)?;
    let out = required(a.out.clone(), "out")?;
    let layers = a.layers.unwrap_or(10);
    if layers == 0 {
        return Err(usage("--layers must be >= 1"));
    }
    let peak = a.peak.unwrap_or(PEAK);
    let nl = Nonlinearity::Softplus {
        beta: a.beta.unwrap_or(BETA),
    };
    let seed = a.seed.unwrap_or(0);
    let tied = a.tied.unwrap_or(false);
    let side = dict
        .patch_side()
        .ok_or_else(|| usage("dictionary atoms are not square patches"))?;
    let s = a.oversample.unwrap_or(OVERSAMPLE);
    let optics_for = |dims| optics(dims, s, a.psf_sigma, a.psf.as_deref());
    let ctx = NetContext::for_optics(dict.clone(), nl, &optics_for((side, side))?, peak)?;

    let needs_data = a.mu.is_none() || a.eta.is_none() || !a.init_only.unwrap_or(false);
    let (train_set, val_set, cal_setup) = if needs_data {
        if a.truths.is_empty() {
            return Err(usage("missing required --truth (or give --mu, --eta and --init-only)"));
        }
        let q = a.thresholds.as_deref().unwrap_or(THRESHOLDS);
        let frames = a.frames.unwrap_or(FRAMES);
        let stride = a.stride.unwrap_or(STRIDE);
        let mut rng = RngState::new(seed);
        let (train, setup) = simulated_samples(&a.truths, peak, &optics_for, q, frames, side, stride, &mut rng)?;
        let (val, _) = simulated_samples(&a.vals, peak, &optics_for, q, frames, side, stride, &mut rng)?;
        (train, val, setup)
    } else {
        (Vec::new(), Vec::new(), None)
    };
    let (mu, eta) = match (a.mu, a.eta) {
        (Some(mu), Some(eta)) => (mu, eta),
        (mu, eta) => {
            let base = SolverConfig {
                mu,
                peak,
                ..SolverConfig::default()
            };
            let cal = calibrate_on(cal_setup.as_ref().unwrap(), &dict, &nl, &base, 30, 0.0)?;
            (cal.mu, eta.unwrap_or(cal.eta))
        }
    };
    let init = init_from_ista_tied(&dict, eta, mu, layers, tied);
    if a.init_only.unwrap_or(false) {
        formats::save_mlnet(&out, &init)?;
        println!("wrote {}: ISTA initialization, T={layers}, mu={mu:e}, eta={eta:e}", out.display());
        return Ok(());
    }
    let cfg = TrainConfig {
        learning_rate: a.lr.unwrap_or(1e-3),
        batch_size: a.batch.unwrap_or(32),
        epochs: a.epochs.unwrap_or(20),
        seed,
        ..TrainConfig::default()
    };
    let result = mlnet::train(&init, &ctx, &train_set, &val_set, &cfg)?;
    formats::save_mlnet(&out, &result.params)?;
    if let Some(path) = &a.loss {
        formats::save_text(path, &result.loss_csv())?;
    }
    let last = result.epochs.last().unwrap();
    println!(
        "wrote {}: T={layers}, {} samples, best epoch {} (val loss {:.6e}, final train loss {:.6e})",
        out.display(),
        train_set.len(),
        result.best_epoch,
        result.epochs[result.best_epoch].val_loss,
        last.train_loss
    );
    Ok(())
}

pub fn evaluate(mut a: EvaluateArgs, mut c: EvaluateArgs) -> Result<()> {
    fill!(a, c; reference, image, peak, out);
    let peak = a.peak.unwrap_or(PEAK);
    let reference = formats::load_image(&required(a.reference, "reference")?, peak)?;
    let image: Array2<f64> = formats::load_image(&required(a.image, "image")?, peak)?;
    let r = psnr(&reference, &image, peak)?;
    println!("PSNR {} dB (MSE {:e}, peak {peak})", r, r.mse);
    if let Some(path) = &a.out {
        formats::save_text(path, &format!("psnr_db,mse\n{},{:e}\n", format_db(r.db()), r.mse))?;
    }
    Ok(())
}

pub fn experiment(a: ExperimentArgs, table: Option<toml::Table>) -> Result<()> {
    let mut spec = experiment_spec(a.kind, table)?;
    if a.quick {
        spec = spec.quick();
    }
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if let Some(peak) = a.peak {
        spec.peak = peak;
    }
    if let Some(frames) = a.frames {
        spec.frames = frames;
    }
    if let Some(layers) = a.layers {
        spec.mlnet.layers = layers;
    }
    if let Some(iters) = a.iters {
        spec.fista.max_iters = iters;
        spec.ml.max_iters = iters;
        spec.fista.record_at.retain(|k| *k <= iters);
    }
    if let Some(path) = a.truth {
        spec.truth = GroundTruth::File { path };
    }
    let out = a
        .out
        .unwrap_or_else(|| PathBuf::from(format!("report-{}", format!("{:?}", a.kind).to_lowercase())));
    let report = harness::run(a.kind, &spec, &mut Artifacts::default())?;
    report.write_to(&out)?;
    print!("{}", report.summary());
    println!("report written to {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_lists() {
        assert_eq!(parse_thresholds("1..10").unwrap(), (1..=10).collect::<Vec<u16>>());
        assert_eq!(parse_thresholds("1,2,4").unwrap(), vec![1, 2, 4]);
        assert_eq!(parse_thresholds("1..3, 8").unwrap(), vec![1, 2, 3, 8]);
        assert!(parse_thresholds("0..3").is_err());
        assert!(parse_thresholds("5..2").is_err());
        assert!(parse_thresholds("x").is_err());
        assert!(parse_thresholds("").is_err());
    }
}
