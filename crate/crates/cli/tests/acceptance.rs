//! Acceptance suite. Prints one PASS/FAIL line per criterion. With
//! `ACCEPTANCE_STRICT` set it exits nonzero if any criterion fails.
//!
//! `ACCEPTANCE_CRITERIA=1,2,7` restricts the run; `ACCEPTANCE_KEEP=dir`
//! keeps the experiment artifacts under `dir`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tomoheight::baselines::{beamforming_spectrum, capon_spectrum, half_power_width, height_grid};
use tomoheight::covariance::{covariance_features, estimate_covariance, TomoStack};
use tomoheight::dataset::{Dataset, PatchSet, Rect, Splits};
use tomoheight::nn::{loss_and_grad, xavier_params, UNetConfig};
use tomoheight::simulation::{pixel_covariance_truth, relative_frobenius, sample_stack, ScatteringParams, TruthPixel};
use tomoheight::train::{patch_accuracy, train, TrainOptions};
use tomoheight::{feature_channel_count, lr_at, AcquisitionGeometry, HeightQuantizer, PolMode, Target};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed <= limit
}

// 1 ------------------------------------------------------------------------

fn feature_dimensions() -> Verdict {
    let mut ok = true;
    let mut seen = vec![];
    for (phi, mode, m) in [(3, PolMode::FP, 52), (2, PolMode::HHVV, 34), (1, PolMode::HH, 16)] {
        let formula = feature_channel_count(phi, 6);
        let geom = AcquisitionGeometry::tropisar();
        let ch = mode.phi() * 6;
        let data = (0..4 * 4 * ch).map(|i| Complex32::new((i as f32 * 0.7).sin(), (i as f32 * 1.3).cos())).collect();
        let stack = TomoStack::new(4, 4, mode, geom, data).unwrap();
        let cube = covariance_features(&stack, 3).unwrap();
        ok &= formula == m && cube.channels == m;
        seen.push(format!("({phi},6)->{formula}/{}", cube.channels));
    }
    verdict(ok, seen.join(" "))
}

// 2 ------------------------------------------------------------------------

fn layer_count() -> Verdict {
    let cfg = UNetConfig::standard(52, vec![60]);
    verdict(cfg.conv_count() == 23, format!("{} convolution layers", cfg.conv_count()))
}

// 3 ------------------------------------------------------------------------

fn lr_schedule() -> Verdict {
    let got: Vec<f64> = [0, 200, 399, 400].iter().map(|e| lr_at(*e, 0.01, 0.5, 200)).collect();
    verdict(got == [0.01, 0.005, 0.005, 0.0025], format!("{got:?}"))
}

// 4 ------------------------------------------------------------------------

fn covariance_correctness() -> Verdict {
    let geom = AcquisitionGeometry::tropisar();
    let px = TruthPixel { ground: 20.0, canopy: 30.0, ground_power: 1.0, volume_power: 1.5 };
    let truth = pixel_covariance_truth(&geom, &px, PolMode::FP, &ScatteringParams::default());
    let side = 101;
    let draws = sample_stack(&vec![truth.clone(); side * side], 1, 4242).unwrap();
    let data = draws.concat().iter().map(|v| Complex32::new(v.re as f32, v.im as f32)).collect();
    let stack = TomoStack::new(side, side, PolMode::FP, geom, data).unwrap();
    let field = estimate_covariance(&stack, side).unwrap();
    let centre = field.matrix(side / 2, side / 2);
    let err = relative_frobenius(&centre, &truth);
    let mut asym: f64 = 0.0;
    let mut min_eig: f64 = f64::INFINITY;
    for (r, c) in [(0, 0), (side / 2, side / 2), (side - 1, 3), (17, side - 1), (60, 40)] {
        let m = field.matrix(r, c);
        let scale = m.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let a = (&m - m.adjoint()).iter().map(|v| v.norm()).fold(0.0, f64::max) / scale;
        asym = asym.max(a);
        let trace = m.trace().re;
        let e = m.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min) / trace;
        min_eig = min_eig.min(e);
    }
    verdict(
        err <= 0.05 && asym <= 1e-12 && min_eig >= -1e-10,
        format!("{} looks: rel. Frobenius {err:.4} (<= 0.05), asymmetry {asym:.1e}, min eig/trace {min_eig:.2e}", side * side),
    )
}

// 5 ------------------------------------------------------------------------

fn outer(a: &[Complex64], p: f64) -> DMatrix<Complex64> {
    DMatrix::from_fn(a.len(), a.len(), |i, j| a[i] * a[j].conj() * p)
}

fn spectral_oracles() -> Verdict {
    let geom = AcquisitionGeometry::tropisar();
    let z = height_grid(-10.0, 80.0, 0.5).unwrap();
    let z0 = 27.3;
    let bf = beamforming_spectrum(&outer(&geom.steering_vector(z0), 1.0), &geom, &z).unwrap();
    let peak = (0..z.len()).max_by(|a, b| bf.power[*a].total_cmp(&bf.power[*b])).unwrap();
    let peak_err = (z[peak] - z0).abs();
    let noise = DMatrix::<Complex64>::identity(6, 6) * Complex64::new(0.01, 0.0);
    let r = outer(&geom.steering_vector(5.0), 1.0) + outer(&geom.steering_vector(35.0), 1.0) + noise;
    let fine = height_grid(-10.0, 80.0, 0.05).unwrap();
    let b = beamforming_spectrum(&r, &geom, &fine).unwrap();
    let c = capon_spectrum(&r, &geom, &fine, 1e-3).unwrap();
    let widths: Vec<(f64, f64)> = [5.0, 35.0].iter().map(|z| (half_power_width(&c, *z), half_power_width(&b, *z))).collect();
    let narrower = widths.iter().all(|(c, b)| c <= b);
    verdict(
        peak_err <= 0.5 && narrower,
        format!(
            "peak {} m for {z0} m (err {peak_err:.2} <= 0.5); -3 dB widths capon/bf: 5 m {:.2}/{:.2}, 35 m {:.2}/{:.2}",
            z[peak], widths[0].0, widths[0].1, widths[1].0, widths[1].1
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn gradient_suite() -> Verdict {
    let cfg = UNetConfig::new(4, 4, 3, vec![5, 3]).unwrap();
    let (n, w) = (2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params: Vec<Vec<f64>> = xavier_params(&cfg, 5);
    for (i, p) in params.iter_mut().enumerate() {
        if i % 2 == 1 {
            p.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
    }
    let x: Vec<f64> = (0..n * w * w * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<i32> = (0..n * w * w)
        .flat_map(|i| {
            let chm = if i % 7 == 3 { -1 } else { (i * 3 % 5) as i32 };
            let dtm = if i % 5 == 1 { -1 } else { (i % 3) as i32 };
            [chm, dtm]
        })
        .collect();
    let (_, grads) = loss_and_grad(&cfg, &params, &x, &labels, n, w).unwrap();
    let eps = 1e-6;
    let (mut checked, mut failed, mut worst) = (0usize, 0usize, 0.0f64);
    let mut first_failure = String::new();
    let names = cfg.param_shapes();
    for i in 0..params.len() {
        for j in 0..params[i].len() {
            let orig = params[i][j];
            params[i][j] = orig + eps;
            let lp = loss_and_grad(&cfg, &params, &x, &labels, n, w).unwrap().0;
            params[i][j] = orig - eps;
            let lm = loss_and_grad(&cfg, &params, &x, &labels, n, w).unwrap().0;
            params[i][j] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads[i][j];
            let diff = (numeric - analytic).abs();
            let tol = (1e-4 * numeric.abs().max(analytic.abs())).max(1e-6);
            worst = worst.max(diff / tol);
            checked += 1;
            if diff > tol {
                failed += 1;
                if first_failure.is_empty() {
                    first_failure = format!("; first failure {}[{j}]: {analytic:.6e} vs {numeric:.6e}", names[i].0);
                }
            }
        }
    }
    verdict(
        failed == 0,
        format!("{checked} parameters, {failed} outside tolerance, worst error/tolerance {worst:.3}{first_failure}"),
    )
}

// 7 ------------------------------------------------------------------------

fn overfit_suite() -> Verdict {
    let (n, w, m, k) = (8, 16, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut set = PatchSet::empty(w, m, 1);
    for i in 0..n {
        let f: Vec<f32> = (0..w * w * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l: Vec<i32> = f
            .chunks_exact(m)
            .map(|px| ((((px[0] + px[1]) / 2.0 + 1.0) / 2.0 * k as f32) as i32).clamp(0, k as i32 - 1))
            .collect();
        set.push((i * w, 0), &f, &l);
    }
    let data = Dataset {
        targets: vec![Target::Chm],
        quantizers: vec![HeightQuantizer::new(0.0, 1.0, k).unwrap()],
        names: (0..m).map(|c| format!("c{c}")).collect(),
        test_rect: Rect { r0: 0, c0: 0, h: 1, w: 1 },
        seed: 0,
        splits: Splits { train: set.clone(), val: set.clone(), test: PatchSet::empty(w, m, 1) },
    };
    let opts = TrainOptions {
        lr: 0.02,
        momentum: 0.9,
        batch: n,
        epochs: 2000,
        decay_factor: 0.5,
        decay_period: 200,
        seed: 1,
        normalize: true,
        stop_at_accuracy: Some(0.99),
    };
    let net = tomoheight::config::NetworkConfig { base_channels: 8, levels: 3 };
    let (state, report) = train(&data, &net, &opts, PolMode::FP).unwrap();
    let steps = report.step_losses.len();
    let acc = patch_accuracy(&state, &set).unwrap();
    let blocks: Vec<f64> = report.step_losses.chunks_exact(50).map(|b| b.iter().sum::<f64>() / 50.0).collect();
    let monotone = blocks.windows(2).all(|p| p[1] <= p[0]);
    if !monotone {
        println!("50-step block means: {blocks:.4?}");
    }
    let first = report.step_losses.first().copied().unwrap_or(f64::NAN);
    let last = report.step_losses.last().copied().unwrap_or(f64::NAN);
    verdict(
        acc >= 0.99 && steps <= 2000 && monotone,
        format!(
            "accuracy {:.4} after {steps} steps (<= 2000), loss {first:.3} -> {last:.4}, {} 50-step blocks non-increasing: {monotone}",
            acc,
            blocks.len()
        ),
    )
}

// 8-12 ---------------------------------------------------------------------

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_tomoheight")
}

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json")
}

fn cli(args: &[&str]) -> Result<(), String> {
    let status = Command::new(bin())
        .args(args)
        .args(["--threads", "1", "-q"])
        .status()
        .map_err(|e| format!("cannot start {}: {e}", bin()))?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("`tomoheight {}` exited with {status}", args.join(" ")))
    }
}

type Metrics = HashMap<(String, String, String), f64>;

fn read_metrics(path: &Path) -> Result<Metrics, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some("method,target,mode,rmse_m,bias_m,n_pixels") {
        return Err(format!("{}: unexpected header", path.display()));
    }
    let mut m = HashMap::new();
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        let rmse: f64 = f[3].parse().map_err(|_| format!("bad RMSE in `{l}`"))?;
        m.insert((f[0].to_string(), f[1].to_string(), f[2].to_string()), rmse);
    }
    Ok(m)
}

fn get(m: &Metrics, method: &str, target: &str, mode: &str) -> Result<f64, String> {
    m.get(&(method.into(), target.into(), mode.into()))
        .copied()
        .ok_or_else(|| format!("no `{method},{target},{mode}` row"))
}

fn run_experiment(dir: &Path) -> Result<Duration, String> {
    let t = Instant::now();
    let cfg = desk_config();
    cli(&["experiment", "--config", cfg.to_str().unwrap(), "--seed", "7", "-o", dir.to_str().unwrap()])?;
    Ok(t.elapsed())
}

fn experiment_ordering(m: &Metrics, took: Duration) -> Result<Verdict, String> {
    let (net_dtm, bf_dtm) = (get(m, "unet", "dtm", "FP")?, get(m, "beamforming", "dtm", "FP")?);
    let (net_chm, capon_chm) = (get(m, "unet", "chm", "FP")?, get(m, "capon", "chm", "FP")?);
    let all_finite = m.values().all(|v| v.is_finite() && *v >= 0.0);
    Ok(verdict(
        net_dtm <= bf_dtm && net_chm <= capon_chm && all_finite && within(Duration::from_secs(45 * 60), took),
        format!(
            "ground: unet {net_dtm:.3} m vs beamforming {bf_dtm:.3} m; canopy: unet {net_chm:.3} m vs capon {capon_chm:.3} m; experiment {:.1} min (<= 45)",
            took.as_secs_f64() / 60.0
        ),
    ))
}

fn polarization_robustness(m: &Metrics, took: Duration) -> Result<Verdict, String> {
    let mut ok = within(Duration::from_secs(90 * 60), took);
    let mut parts = vec![];
    for t in ["chm", "dtm"] {
        let fp = get(m, "unet", t, "FP")?;
        for mode in ["HHVV", "HH"] {
            let v = get(m, "unet", t, mode)?;
            ok &= v <= 2.0 * fp;
            parts.push(format!("{t} {mode} {v:.3}/FP {fp:.3} = {:.2}x", v / fp));
        }
    }
    Ok(verdict(ok, format!("{} (limit 2x)", parts.join(", "))))
}

fn unified_variant(m: &Metrics) -> Result<Verdict, String> {
    let mut ok = true;
    let mut parts = vec![];
    for t in ["chm", "dtm"] {
        let (u, s) = (get(m, "unet-unified", t, "FP")?, get(m, "unet", t, "FP")?);
        ok &= u <= 1.5 * s;
        parts.push(format!("{t} unified {u:.3}/separate {s:.3} = {:.2}x", u / s));
    }
    Ok(verdict(ok, format!("{} (limit 1.5x)", parts.join(", "))))
}

fn fine_tuning(run: &Path, work: &Path) -> Result<Verdict, String> {
    let t = Instant::now();
    let cfg = desk_config();
    let cfg = cfg.to_str().unwrap();
    let s = |p: PathBuf| p.to_str().unwrap().to_string();
    let scene = s(work.join("lope-scene"));
    cli(&["simulate", "--config", cfg, "--profile", "lope-like", "--seed", "8", "-o", &scene])?;
    let mut parts = vec![];
    let mut ok = true;
    for target in ["chm", "dtm"] {
        let pre = s(run.join("models").join(format!("FP_{target}")));
        let data = s(work.join(format!("lope-{target}-data")));
        let tuned = s(work.join(format!("lope-{target}-tuned")));
        let zero_eval = work.join(format!("lope-{target}-zero-shot"));
        let tuned_eval = work.join(format!("lope-{target}-eval"));
        cli(&["build-dataset", "--config", cfg, "--scene", &scene, "--target", target, "--seed", "8", "-o", &data])?;
        cli(&["evaluate", "--config", cfg, "--scene", &scene, "--checkpoint", &pre, "--name", "zero-shot", "-o", &s(zero_eval.clone())])?;
        cli(&["finetune", "--config", cfg, "--checkpoint", &pre, "--dataset", &data, "--seed", "8", "-o", &tuned])?;
        let model = s(Path::new(&tuned).join("model"));
        cli(&["evaluate", "--config", cfg, "--scene", &scene, "--checkpoint", &model, "--name", "fine-tuned", "-o", &s(tuned_eval.clone())])?;
        let z = get(&read_metrics(&zero_eval.join("metrics.csv"))?, "zero-shot", target, "FP")?;
        let f = get(&read_metrics(&tuned_eval.join("metrics.csv"))?, "fine-tuned", target, "FP")?;
        ok &= f < z;
        parts.push(format!("{target}: fine-tuned {f:.3} m vs zero-shot {z:.3} m"));
    }
    let took = t.elapsed();
    ok &= within(Duration::from_secs(45 * 60), took);
    Ok(verdict(ok, format!("{}; {:.1} min (<= 45)", parts.join(", "), took.as_secs_f64() / 60.0)))
}

fn determinism(run1: &Path, run2: &Path, took: Duration) -> Result<Verdict, String> {
    let a = std::fs::read(run1.join("metrics.csv")).map_err(|e| e.to_string())?;
    let b = std::fs::read(run2.join("metrics.csv")).map_err(|e| e.to_string())?;
    Ok(verdict(
        a == b,
        format!("metrics.csv {} vs {} bytes, identical: {}; second run {:.1} min", a.len(), b.len(), a == b, took.as_secs_f64() / 60.0),
    ))
}

// ---------------------------------------------------------------------------

struct Suite {
    only: Option<Vec<u32>>,
    failures: u32,
}

impl Suite {
    fn wants(&self, id: u32) -> bool {
        self.only.as_ref().is_none_or(|v| v.contains(&id))
    }

    fn report(&mut self, id: u32, name: &str, limit: Duration, started: Instant, v: Result<Verdict, String>) {
        let took = started.elapsed();
        let v = v.unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        let in_time = within(limit, took);
        let pass = v.pass && in_time;
        if !pass {
            self.failures += 1;
        }
        let time_note = if in_time { String::new() } else { format!(" [over the {:.0} s limit]", limit.as_secs_f64()) };
        println!(
            "criterion {id:>2} {} {name}: {} ({:.1} s){time_note}",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64()
        );
    }

    fn quick(&mut self, id: u32, name: &str, limit: Duration, f: impl FnOnce() -> Verdict) {
        if self.wants(id) {
            let t = Instant::now();
            let v = f();
            self.report(id, name, limit, t, Ok(v));
        }
    }
}

fn main() {
    let only = std::env::var("ACCEPTANCE_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect::<Vec<u32>>());
    let mut suite = Suite { only, failures: 0 };
    let sec = Duration::from_secs;
    suite.quick(1, "feature dimensions", sec(1), feature_dimensions);
    suite.quick(2, "layer count", sec(1), layer_count);
    suite.quick(3, "learning-rate schedule", sec(1), lr_schedule);
    suite.quick(4, "covariance correctness", sec(60), covariance_correctness);
    suite.quick(5, "spectral oracles", sec(60), spectral_oracles);
    suite.quick(6, "gradient check", sec(300), gradient_suite);
    suite.quick(7, "overfit", sec(600), overfit_suite);

    if (8..=12).any(|i| suite.wants(i)) {
        let tmp = tempfile::tempdir().expect("temporary directory");
        let root = std::env::var("ACCEPTANCE_KEEP").map(PathBuf::from).unwrap_or_else(|_| tmp.path().to_path_buf());
        let run1 = root.join("run1");
        let t = Instant::now();
        let first = run_experiment(&run1);
        let metrics = first.as_ref().map_err(Clone::clone).and_then(|_| read_metrics(&run1.join("metrics.csv")));
        let took = *first.as_ref().unwrap_or(&Duration::ZERO);
        let with = |f: &dyn Fn(&Metrics) -> Result<Verdict, String>| metrics.as_ref().map_err(Clone::clone).and_then(f);
        if suite.wants(8) {
            suite.report(8, "synthetic experiment ordering", sec(45 * 60), t, with(&|m| experiment_ordering(m, took)));
        }
        if suite.wants(9) {
            suite.report(9, "polarization robustness", sec(90 * 60), t, with(&|m| polarization_robustness(m, took)));
        }
        if suite.wants(10) {
            suite.report(10, "unified variant", sec(45 * 60), t, with(&unified_variant));
        }
        if suite.wants(11) {
            let t = Instant::now();
            let v = first.as_ref().map_err(Clone::clone).and_then(|_| fine_tuning(&run1, &root));
            suite.report(11, "fine-tuning transfer", sec(45 * 60), t, v);
        }
        if suite.wants(12) {
            let t = Instant::now();
            let run2 = root.join("run2");
            let v = first.and_then(|_| run_experiment(&run2)).and_then(|took2| determinism(&run1, &run2, took2));
            suite.report(12, "determinism", sec(45 * 60), t, v);
        }
    }
    if suite.failures > 0 {
        println!("{} criteria failed", suite.failures);
        // Failures are reported above; only a strict run turns them into a
        // failing test binary.
        if std::env::var_os("ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
