//! Oracle verification suites behind `stsl verify`.
//!
//! Every check compares a library result against an independent closed-form
//! or finite-difference oracle computed here, and records the measured
//! quantity next to the tolerance it must meet. Diagnostics that carry no
//! pass criterion are reported as `INFO`.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng as _;
use stsl_core::editing::{
    edit_from_trajectory, edit_step, f_predict, null_optimize, EditConfig, Hook, NullOptConfig,
};
use stsl_core::metrics::{mse, psnr_from_mse, sliced_wasserstein, ssim, ImagePair, SsimParams};
use stsl_core::operators::{Kernel, LatentCodec, LinearOperator, MeasurementTask};
use stsl_core::samplers::{
    expected_raw_nfe, forward_encode_with, nfe_report, run, sample_prior, Encoding, InitMode, Problem,
    SamplerConfig, Variant,
};
use stsl_core::schedule::NoiseSchedule;
use stsl_core::scoremodels::{
    ConditionalShiftPrior, Counting, Covariance, GaussianMixturePrior, GaussianPrior, ScoreModel,
};
use stsl_core::synthetic::{nearest_component, sample_mixture};
use stsl_core::tweedie::{
    curvature_constant, exact_log_likelihood, hutchinson_trace, jensen_gap, lower_bound,
    posterior_cov, posterior_mean, probe_value, GradientMode, Surrogate, SurrogateTerms,
};
use stsl_core::{rng_from_seed, standard_normal, Error, Matrix, Rng, Vector};

/// Names accepted by `--suite`, in execution order.
pub const SUITES: [&str; 12] = [
    "schedule",
    "scoremodels",
    "operators",
    "tweedie",
    "hutchinson",
    "bound",
    "jensen",
    "gradient",
    "nfe",
    "samplers",
    "editing",
    "metrics",
];

/// `ᾱ_50` of the default linear schedule, evaluated in 30-digit arithmetic.
pub const DEFAULT_ALPHA_BAR_T: f64 = 0.004_616_111_011_266_995_8;

/// Largest DDIM round-trip error accepted for the Gaussian oracle.
pub const ROUND_TRIP_BOUND: f64 = 0.684_485_471_710_470_06 * (1.0 + 1e-9);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Info,
}

impl Status {
    pub fn label(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Info => "INFO",
        }
    }
}

/// One row of the verification table.
#[derive(Debug, Clone)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub measured: f64,
    /// Human-readable acceptance condition, e.g. `<= 1e-10`.
    pub tolerance: String,
    pub status: Status,
}

struct Recorder {
    suite: &'static str,
    checks: Vec<Check>,
}

impl Recorder {
    fn new(suite: &'static str) -> Self {
        Self { suite, checks: Vec::new() }
    }

    fn push(&mut self, name: &str, measured: f64, tolerance: String, ok: bool) {
        self.checks.push(Check {
            suite: self.suite,
            name: name.to_string(),
            measured,
            tolerance,
            status: if ok { Status::Pass } else { Status::Fail },
        });
    }

    /// Passes when `measured <= tol` (NaN fails).
    fn at_most(&mut self, name: &str, measured: f64, tol: f64) {
        self.push(name, measured, format!("<= {tol:e}"), measured <= tol);
    }

    fn at_least(&mut self, name: &str, measured: f64, tol: f64) {
        self.push(name, measured, format!(">= {tol}"), measured >= tol);
    }

    fn within(&mut self, name: &str, measured: f64, low: f64, high: f64) {
        self.push(name, measured, format!("in [{low}, {high}]"), measured >= low && measured <= high);
    }

    fn info(&mut self, name: &str, measured: f64) {
        self.checks.push(Check {
            suite: self.suite,
            name: name.to_string(),
            measured,
            tolerance: "-".into(),
            status: Status::Info,
        });
    }
}

/// Unknown suite name passed to `--suite`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownSuite(pub String);

impl std::fmt::Display for UnknownSuite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "unknown suite '{}'; expected one of: {}", self.0, SUITES.join(", "))
    }
}

impl std::error::Error for UnknownSuite {}

/// Resolves a comma-separated suite filter; `None` or empty selects all.
pub fn parse_suites(filter: Option<&str>) -> Result<Vec<&'static str>, UnknownSuite> {
    let Some(filter) = filter.map(str::trim).filter(|f| !f.is_empty()) else {
        return Ok(SUITES.to_vec());
    };
    let mut out = Vec::new();
    for name in filter.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let suite = SUITES
            .iter()
            .find(|s| **s == name)
            .ok_or_else(|| UnknownSuite(name.to_string()))?;
        if !out.contains(suite) {
            out.push(*suite);
        }
    }
    Ok(out)
}

/// Runs the named suites; a library error inside a suite becomes a failing row.
pub fn run_suites(suites: &[&'static str]) -> Vec<Check> {
    let mut all = Vec::new();
    for &suite in suites {
        let start = Instant::now();
        let mut rec = Recorder::new(suite);
        let outcome = match suite {
            "schedule" => schedule_suite(&mut rec),
            "scoremodels" => scoremodels_suite(&mut rec),
            "operators" => operators_suite(&mut rec),
            "tweedie" => tweedie_suite(&mut rec),
            "hutchinson" => hutchinson_suite(&mut rec),
            "bound" => bound_suite(&mut rec),
            "jensen" => jensen_suite(&mut rec),
            "gradient" => gradient_suite(&mut rec),
            "nfe" => nfe_suite(&mut rec),
            "samplers" => samplers_suite(&mut rec),
            "editing" => editing_suite(&mut rec),
            "metrics" => metrics_suite(&mut rec),
            _ => unreachable!("suite names are validated by parse_suites"),
        };
        if let Err(e) = outcome {
            rec.push(&format!("error: {e}"), f64::NAN, "no error".into(), false);
        }
        rec.info("runtime seconds", start.elapsed().as_secs_f64());
        log::info!("suite {suite} finished in {:.2}s", start.elapsed().as_secs_f64());
        all.extend(rec.checks);
    }
    all
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.status != Status::Fail)
}

/// Fixed-width table with one row per check.
pub fn render_table(checks: &[Check]) -> String {
    let name_w = checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
    let tol_w = checks.iter().map(|c| c.tolerance.len()).max().unwrap_or(9).max(9);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:<name_w$} {:>14} {:<tol_w$} STATUS",
        "SUITE", "CHECK", "MEASURED", "TOLERANCE"
    );
    for c in checks {
        let _ = writeln!(
            out,
            "{:<12} {:<name_w$} {:>14} {:<tol_w$} {}",
            c.suite,
            c.name,
            format!("{:.6e}", c.measured),
            c.tolerance,
            c.status.label()
        );
    }
    let failed = checks.iter().filter(|c| c.status == Status::Fail).count();
    let passed = checks.iter().filter(|c| c.status == Status::Pass).count();
    let _ = writeln!(out, "{passed} passed, {failed} failed");
    out
}

type SuiteResult = Result<(), Error>;

fn uniform(rng: &mut Rng, low: f64, high: f64) -> f64 {
    rng.random_range(low..high)
}

/// Random symmetric positive-definite matrix with eigenvalues log-uniform in `[lo, hi]`.
fn random_spd(d: usize, lo: f64, hi: f64, rng: &mut Rng) -> Matrix {
    let g = Matrix::from_iterator(d, d, standard_normal(d * d, rng).iter().cloned());
    let q = g.qr().q();
    let ev = Vector::from_fn(d, |_, _| uniform(rng, lo.ln(), hi.ln()).exp());
    let m = &q * Matrix::from_diagonal(&ev) * q.transpose();
    (&m + m.transpose()) * 0.5
}

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_iterator(rows, cols, standard_normal(rows * cols, rng).iter().cloned())
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

fn rel_vec(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

fn random_gmm(d: usize, components: usize, rng: &mut Rng) -> Result<GaussianMixturePrior, Error> {
    let raw: Vec<f64> = (0..components).map(|_| uniform(rng, 0.2, 1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    let means = (0..components).map(|_| standard_normal(d, rng) * 1.5).collect();
    let covs = (0..components)
        .map(|_| Covariance::Dense(random_spd(d, 0.1, 1.0, rng)))
        .collect();
    GaussianMixturePrior::new(weights, means, covs)
}

/// Nodes and weights of the probabilists' Gauss–Hermite rule (weights sum to 1).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = Matrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn schedule_suite(rec: &mut Recorder) -> SuiteResult {
    let s = NoiseSchedule::default_linear();
    rec.at_most("alpha_bar(0) = 1", (s.alpha_bar(0) - 1.0).abs(), 0.0);
    let rises = (1..=s.steps())
        .filter(|&k| s.alpha_bar(k) >= s.alpha_bar(k - 1))
        .count();
    rec.at_most("non-decreasing steps", rises as f64, 0.0);
    rec.at_most(
        "alpha_bar(50) relative error",
        (s.alpha_bar(50) - DEFAULT_ALPHA_BAR_T).abs() / DEFAULT_ALPHA_BAR_T,
        1e-12,
    );
    let again = NoiseSchedule::default_linear();
    rec.at_most(
        "rebuild differs bitwise",
        (s.alpha_bars() != again.alpha_bars()) as u8 as f64,
        0.0,
    );
    let mut rng = rng_from_seed(101);
    let n = 10_000;
    let mut worst: f64 = 0.0;
    for k in [1, 10, 25, 50] {
        let x = s.forward_noising(&Vector::zeros(n), k, &mut rng)?;
        let var = x.norm_squared() / n as f64;
        let target = 1.0 - s.alpha_bar(k);
        worst = worst.max((var - target).abs() / (target * (2.0 / n as f64).sqrt()));
    }
    rec.at_most("forward variance z-score (n=1e4)", worst, 4.0);
    Ok(())
}

fn scoremodels_suite(rec: &mut Recorder) -> SuiteResult {
    let sched = NoiseSchedule::default_linear();
    let mut rng = rng_from_seed(202);
    let gmm = random_gmm(3, 3, &mut rng)?;
    let h = 1e-5;
    let (mut score_err, mut hess_err, mut asym): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..100 {
        let k = rng.random_range(0..=sched.steps());
        let ab = sched.alpha_bar(k);
        let z = standard_normal(3, &mut rng) * 1.5;
        let s = gmm.score(&z, ab);
        let mut fd = Vector::zeros(3);
        let mut hfd = Matrix::zeros(3, 3);
        for i in 0..3 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            fd[i] = (gmm.log_marginal(&zp, ab)? - gmm.log_marginal(&zm, ab)?) / (2.0 * h);
            hfd.set_column(i, &((gmm.score(&zp, ab) - gmm.score(&zm, ab)) / (2.0 * h)));
        }
        score_err = score_err.max((&s - &fd).norm() / s.norm().max(1.0));
        let hess = gmm.hessian(&z, ab)?;
        hess_err = hess_err.max((&hess - &hfd).norm() / hess.norm().max(1.0));
        asym = asym.max((&hess - hess.transpose()).amax());
    }
    rec.at_most("GMM score vs FD log-density", score_err, 1e-6);
    rec.at_most("GMM Hessian vs FD score", hess_err, 1e-5);
    rec.at_most("Hessian asymmetry", asym, 1e-10);

    let mut gauss_err: f64 = 0.0;
    for _ in 0..20 {
        let sigma = random_spd(3, 0.25, 4.0, &mut rng);
        let prior = GaussianPrior::new(standard_normal(3, &mut rng), Covariance::Dense(sigma.clone()))?;
        let ab = sched.alpha_bar(rng.random_range(0..=sched.steps()));
        let z = standard_normal(3, &mut rng);
        let want = -(sigma * ab + Matrix::identity(3, 3) * (1.0 - ab))
            .try_inverse()
            .expect("spd");
        gauss_err = gauss_err.max(rel(&prior.hessian(&z, ab)?, &want));
    }
    rec.at_most("Gaussian Hessian closed form", gauss_err, 1e-12);

    let w = random_matrix(3, 2, &mut rng);
    let shifted = ConditionalShiftPrior::new(gmm.clone(), w)?;
    let mut null_diff: f64 = 0.0;
    for _ in 0..20 {
        let ab = sched.alpha_bar(rng.random_range(0..=sched.steps()));
        let z = standard_normal(3, &mut rng);
        let a = shifted.conditional_score(&z, ab, &Vector::zeros(2))?;
        null_diff = null_diff.max((a - gmm.score(&z, ab)).amax());
    }
    rec.at_most("null-embedding score equals base", null_diff, 0.0);
    Ok(())
}

fn operators_suite(rec: &mut Recorder) -> SuiteResult {
    let mut rng = rng_from_seed(303);
    let side = 16;
    let d = side * side;
    let ops: Vec<(&str, LinearOperator)> = vec![
        ("identity", LinearOperator::identity(d)),
        ("mask", LinearOperator::random_mask(d, 0.4, &mut rng)?),
        ("downsample", LinearOperator::downsample(side, side, 4)?),
        ("gaussian blur", LinearOperator::gaussian_blur(side, side, 9, 1.5)?),
        ("motion blur", LinearOperator::motion_blur(side, side, 9, 30.0)?),
        (
            "convolution",
            LinearOperator::convolution(side, side, Kernel::new(3, standard_normal(9, &mut rng).iter().cloned().collect())?),
        ),
        ("dense", LinearOperator::Dense(random_matrix(40, d, &mut rng))),
    ];
    for (name, op) in &ops {
        let (mut adj, mut lin): (f64, f64) = (0.0, 0.0);
        for _ in 0..100 {
            let x = standard_normal(op.input_dim(), &mut rng);
            let x2 = standard_normal(op.input_dim(), &mut rng);
            let y = standard_normal(op.output_dim(), &mut rng);
            let ax = op.apply(&x)?;
            let aty = op.adjoint(&y)?;
            let scale = ax.norm() * y.norm() + x.norm() * aty.norm();
            adj = adj.max((ax.dot(&y) - x.dot(&aty)).abs() / scale.max(f64::MIN_POSITIVE));
            let (a, b) = (uniform(&mut rng, -2.0, 2.0), uniform(&mut rng, -2.0, 2.0));
            let lhs = op.apply(&(&x * a + &x2 * b))?;
            let rhs = &ax * a + op.apply(&x2)? * b;
            lin = lin.max(rel_vec(&lhs, &rhs));
        }
        rec.at_most(&format!("{name} adjoint"), adj, 1e-12);
        rec.at_most(&format!("{name} linearity"), lin, 1e-10);
    }
    let codec = LatentCodec::random_orthogonal(16, 64, &mut rng)?;
    let z = standard_normal(16, &mut rng);
    rec.at_most(
        "orthogonal codec encode(decode(z)) = z",
        rel_vec(&codec.encode(&codec.decode(&z)?)?, &z),
        1e-12,
    );
    Ok(())
}

/// Closed-form `E[X0 | X_k = z]` and `Cov[X0 | X_k = z]` for `N(μ0, Σ0)`.
fn gaussian_conditional(mu: &Vector, sigma: &Matrix, z: &Vector, ab: f64) -> (Vector, Matrix) {
    let d = mu.len();
    let m = sigma * ab + Matrix::identity(d, d) * (1.0 - ab);
    let inv = m.try_inverse().expect("diffused covariance is positive definite");
    let gain = sigma * &inv * ab.sqrt();
    let mean = mu + &gain * (z - mu * ab.sqrt());
    let cov = sigma - sigma * &inv * sigma * ab;
    (mean, cov)
}

fn tweedie_suite(rec: &mut Recorder) -> SuiteResult {
    let sched = NoiseSchedule::default_linear();
    let mut rng = rng_from_seed(404);
    let (mut mean_err, mut cov_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let d = rng.random_range(1..=4);
        let sigma = random_spd(d, 0.25, 4.0, &mut rng);
        let mu = standard_normal(d, &mut rng);
        let prior = GaussianPrior::new(mu.clone(), Covariance::Dense(sigma.clone()))?;
        let ab = sched.alpha_bar(rng.random_range(1..=sched.steps()));
        let z = standard_normal(d, &mut rng) * 2.0;
        let (m_ref, c_ref) = gaussian_conditional(&mu, &sigma, &z, ab);
        mean_err = mean_err.max(rel_vec(&posterior_mean(&prior, &z, ab), &m_ref));
        cov_err = cov_err.max(rel(&posterior_cov(&prior, &z, ab)?, &c_ref));
    }
    rec.at_most("posterior mean vs conditioning", mean_err, 1e-10);
    rec.at_most("posterior cov vs conditioning", cov_err, 1e-8);

    // Double-entry surrogate value from raw score calls.
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d = 3;
        let prior = GaussianPrior::new(standard_normal(d, &mut rng), Covariance::Dense(random_spd(d, 0.25, 4.0, &mut rng)))?;
        let a = random_matrix(2, d, &mut rng);
        let task = MeasurementTask::new(LinearOperator::Dense(a.clone()), 0.3, standard_normal(2, &mut rng))?;
        let codec = LatentCodec::identity(d);
        let terms = SurrogateTerms {
            lambda: uniform(&mut rng, 0.1, 2.0),
            eta: uniform(&mut rng, 0.01, 1.0),
            ..SurrogateTerms::default()
        };
        let ab = sched.alpha_bar(rng.random_range(1..=sched.steps()));
        let z = standard_normal(d, &mut rng);
        let probes = vec![standard_normal(d, &mut rng), standard_normal(d, &mut rng)];
        let value = Surrogate::new(&task, &codec, &prior, terms)?.loss(&z, ab, &probes)?;
        let s = prior.score(&z, ab);
        let zbar = (&z + &s * (1.0 - ab)) / ab.sqrt();
        let resid = &task.y - &a * zbar;
        let probe_mean: f64 = probes
            .iter()
            .map(|e| e.dot(&(prior.score(&(&z + e), ab) - &s)))
            .sum::<f64>()
            / probes.len() as f64;
        let reference = terms.lambda * resid.norm_squared() + terms.eta / d as f64 * probe_mean;
        worst = worst.max((value - reference).abs() / reference.abs().max(1.0));
    }
    rec.at_most("surrogate loss double entry", worst, 1e-12);
    Ok(())
}

fn hutchinson_suite(rec: &mut Recorder) -> SuiteResult {
    let sched = NoiseSchedule::default_linear();
    let mut rng = rng_from_seed(505);
    let d = 4;
    let sigma = random_spd(d, 0.25, 4.0, &mut rng);
    let prior = GaussianPrior::new(standard_normal(d, &mut rng), Covariance::Dense(sigma.clone()))?;
    let mut worst: f64 = 0.0;
    for k in [1, 10, 25, 40, 50] {
        let ab = sched.alpha_bar(k);
        let z = standard_normal(d, &mut rng);
        let exact = -(sigma.clone() * ab + Matrix::identity(d, d) * (1.0 - ab))
            .try_inverse()
            .expect("spd")
            .trace();
        let est = hutchinson_trace(&prior, &z, ab, 10_000, 1.0, &mut rng)?;
        worst = worst.max((est.estimate - exact).abs() / est.standard_error);
    }
    rec.at_most("Gaussian |mean - trace| / SE (n=1e4, 5 levels)", worst, 3.0);

    let (nodes, weights) = gauss_hermite(40);
    let scales = [1.0, 0.5, 0.25, 0.125];
    let log_scales: Vec<f64> = scales.iter().map(|s: &f64| s.ln()).collect();
    for state in 0..3 {
        let gmm = random_gmm(2, 2, &mut rng)?;
        let ab = sched.alpha_bar(rng.random_range(5..=40));
        let z = standard_normal(2, &mut rng);
        let exact = gmm.hessian(&z, ab)?.trace();
        let s0 = gmm.score(&z, ab);
        let mut log_bias = Vec::new();
        for &scale in &scales {
            let mut expect = 0.0;
            for (i, a) in nodes.iter().enumerate() {
                for (j, b) in nodes.iter().enumerate() {
                    let eps = Vector::from_vec(vec![a * scale, b * scale]);
                    expect += weights[i] * weights[j] * probe_value(&gmm, &z, &s0, &eps, ab, scale);
                }
            }
            log_bias.push((expect - exact).abs().ln());
        }
        rec.within(
            &format!("GMM log-bias slope, state {state}"),
            slope(&log_scales, &log_bias),
            0.7,
            1.3,
        );
    }
    Ok(())
}

fn bound_suite(rec: &mut Recorder) -> SuiteResult {
    let sched = NoiseSchedule::default_linear();
    let mut rng = rng_from_seed(606);
    let (mut valid, mut resampled, mut violations) = (0usize, 0usize, 0usize);
    let mut worst = f64::NEG_INFINITY;
    while valid < 100 {
        let d = rng.random_range(1..=3);
        let rows = rng.random_range(1..=d);
        let sigma = random_spd(d, 0.25, 4.0, &mut rng);
        let mu = standard_normal(d, &mut rng);
        let prior = GaussianPrior::new(mu.clone(), Covariance::Dense(sigma.clone()))?;
        let a = random_matrix(rows, d, &mut rng);
        let sigma_y = uniform(&mut rng, 0.2, 1.0);
        let k = rng.random_range(1..=sched.steps());
        let ab = sched.alpha_bar(k);
        let chol = sigma.cholesky().expect("spd");
        let x0 = &mu + chol.l() * standard_normal(d, &mut rng);
        let z = &x0 * ab.sqrt() + standard_normal(d, &mut rng) * (1.0 - ab).sqrt();
        let y = &a * &x0 + standard_normal(rows, &mut rng) * sigma_y;
        let task = MeasurementTask::new(LinearOperator::Dense(a), sigma_y, y)?;
        // No sampled negative curvature: use the m -> 0+ limit.
        let m = curvature_constant(&task, &prior, &z, ab, 200, &mut rng)?.max(1e-12);
        match lower_bound(&task, &prior, &z, ab, m) {
            Ok(lb) => {
                valid += 1;
                let exact = exact_log_likelihood(&task, &prior, &z, ab)?;
                worst = worst.max(lb - exact);
                if lb > exact + 1e-9 {
                    violations += 1;
                }
            }
            Err(Error::InvalidBound(_)) => resampled += 1,
            Err(e) => return Err(e),
        }
    }
    rec.at_most("violations of lower_bound <= exact + 1e-9 (100 states)", violations as f64, 0.0);
    rec.info("largest lower_bound - exact", worst);
    rec.info("states resampled for invalid m", resampled as f64);
    Ok(())
}

fn jensen_suite(rec: &mut Recorder) -> SuiteResult {
    let sched = NoiseSchedule::default_linear();
    let mut rng = rng_from_seed(707);
    let (mut violations, mut lipschitz_violations) = (0usize, 0usize);
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(1..=3);
        let rows = rng.random_range(1..=d);
        let prior = GaussianPrior::standard(d);
        let a = random_matrix(rows, d, &mut rng);
        let sigma_y = uniform(&mut rng, 0.05f64.ln(), 0.0).exp();
        let ab = sched.alpha_bar(rng.random_range(1..=sched.steps()));
        let x0 = standard_normal(d, &mut rng);
        let z = &x0 * ab.sqrt() + standard_normal(d, &mut rng) * (1.0 - ab).sqrt();
        let y = &a * &x0 + standard_normal(rows, &mut rng) * sigma_y;
        let task = MeasurementTask::new(LinearOperator::Dense(a), sigma_y, y)?;
        let jg = jensen_gap(&task, &prior, &z, ab, 2000, &mut rng)?;
        if jg.gap > jg.bound {
            violations += 1;
        }
        if jg.gap > jg.lipschitz_bound {
            lipschitz_violations += 1;
        }
        if jg.bound > 0.0 {
            worst_ratio = worst_ratio.max(jg.gap / jg.bound);
        }
    }
    rec.at_most("violations of gap <= bound (100 configs)", violations as f64, 0.0);
    rec.info("largest gap / bound", worst_ratio);
    rec.info("violations of the Lipschitz bound", lipschitz_violations as f64);
    Ok(())
}

fn gradient_suite(rec: &mut Recorder) -> SuiteResult {
    let sched = NoiseSchedule::default_linear();
    let mut rng = rng_from_seed(808);
    let d = 3;
    let gmm = random_gmm(d, 3, &mut rng)?;
    let a = random_matrix(2, d, &mut rng);
    let task = MeasurementTask::new(LinearOperator::Dense(a), 0.3, standard_normal(2, &mut rng))?;
    let codec = LatentCodec::identity(d);
    let terms = SurrogateTerms {
        lambda: 1.0,
        eta: 0.5,
        ..SurrogateTerms::default()
    };
    let surrogate = Surrogate::new(&task, &codec, &gmm, terms)?;
    let h = 1e-5;
    let (mut worst, mut decoupled_gap): (f64, f64) = (0.0, 0.0);
    for _ in 0..20 {
        let ab = sched.alpha_bar(rng.random_range(1..=sched.steps()));
        let z = standard_normal(d, &mut rng);
        let probes = vec![standard_normal(d, &mut rng), standard_normal(d, &mut rng)];
        let g = surrogate.evaluate(&z, ab, &probes, GradientMode::FullJacobian)?.grad;
        let mut fd = Vector::zeros(d);
        for i in 0..d {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            fd[i] = (surrogate.loss(&zp, ab, &probes)? - surrogate.loss(&zm, ab, &probes)?) / (2.0 * h);
        }
        worst = worst.max(rel_vec(&g, &fd));
        let dec = surrogate.evaluate(&z, ab, &probes, GradientMode::Decoupled)?.grad;
        decoupled_gap = decoupled_gap.max(rel_vec(&dec, &fd));
    }
    rec.at_most("full-jacobian vs central differences (20 states)", worst, 1e-4);
    rec.info("decoupled vs central differences", decoupled_gap);
    Ok(())
}

fn nfe_suite(rec: &mut Recorder) -> SuiteResult {
    let sched = NoiseSchedule::default_linear();
    let mut rng = rng_from_seed(909);
    let d = 16;
    let prior = Counting::new(GaussianPrior::standard(d));
    let task = MeasurementTask::simulate(
        LinearOperator::random_mask(d, 0.4, &mut rng)?,
        0.05,
        &standard_normal(d, &mut rng),
        &mut rng,
    )?;
    let codec = LatentCodec::identity(d);
    let config = SamplerConfig::default();
    let report = run(&Problem::new(&task, &prior, &codec, &sched), &config)?;
    let nfe = nfe_report(&report);
    rec.at_most("paper-convention guidance count - 250", (nfe.paper_convention as f64 - 250.0).abs(), 0.0);
    rec.at_most(
        "raw count vs closed form",
        (nfe.raw as f64 - expected_raw_nfe(&config) as f64).abs(),
        0.0,
    );
    rec.at_most(
        "raw count vs instrumented counter",
        (nfe.raw as f64 - prior.score_calls() as f64).abs(),
        0.0,
    );
    rec.info("raw forward score calls", nfe.raw as f64);
    Ok(())
}

/// Diagonal Gaussian oracle used by the round-trip and moment checks.
pub fn round_trip_prior() -> GaussianPrior {
    GaussianPrior {
        mean: Vector::from_vec(vec![0.5, -0.3, 0.2, 0.1]),
        cov: Covariance::Diagonal(Vector::from_vec(vec![0.3, 0.4, 0.5, 0.6])),
    }
}

/// Encodes `x0` with `encoding` and runs the guidance-free deterministic
/// reverse process from the last latent; returns the reconstruction.
pub fn round_trip(encoding: Encoding) -> Result<Vector, Error> {
    let sched = NoiseSchedule::default_linear();
    let prior = round_trip_prior();
    let x0 = Vector::from_vec(vec![0.9, -0.8, 0.1, 0.4]);
    let task = MeasurementTask::new(LinearOperator::identity(4), 1.0, x0)?;
    let codec = LatentCodec::identity(4);
    let config = SamplerConfig {
        inner_steps: 1,
        lambda: 0.0,
        eta: 0.0,
        nu: 0.0,
        kappa: 0.0,
        encoding,
        ..SamplerConfig::default()
    };
    let report = run(&Problem::new(&task, &prior, &codec, &sched), &config)?;
    Ok(Vector::from_vec(report.reconstruction))
}

fn samplers_suite(rec: &mut Recorder) -> SuiteResult {
    let sched = NoiseSchedule::default_linear();
    let x0 = Vector::from_vec(vec![0.9, -0.8, 0.1, 0.4]);
    let ddim = (round_trip(Encoding::Ddim)? - &x0).norm();
    rec.at_most("DDIM round-trip error", ddim, ROUND_TRIP_BOUND);
    rec.info("score-flow round-trip error", (round_trip(Encoding::ScoreFlow)? - &x0).norm());

    // Guidance off: all refinement variants share one trajectory.
    let mut rng = rng_from_seed(1001);
    let prior = round_trip_prior();
    let task = MeasurementTask::simulate(LinearOperator::identity(4), 0.1, &x0, &mut rng)?;
    let codec = LatentCodec::identity(4);
    let problem = Problem::new(&task, &prior, &codec, &sched);
    let off = SamplerConfig {
        lambda: 0.0,
        eta: 0.0,
        init_mode: InitMode::PureNoise,
        seed: 5,
        ..SamplerConfig::default()
    };
    // Baselines force their init mode, so compare each against stsl with the same init.
    let mut differing = 0usize;
    for (init, baseline) in [
        (InitMode::PureNoise, Variant::FirstOrder),
        (InitMode::ForwardLatent, Variant::StslBiased),
    ] {
        let stsl = run(&problem, &SamplerConfig { init_mode: init, ..off.clone() })?;
        let other = run(&problem, &SamplerConfig { init_mode: init, variant: baseline, ..off.clone() })?;
        differing += (stsl.latent != other.latent) as usize;
    }
    rec.at_most("guidance-off variants differ from stsl", differing as f64, 0.0);

    let config = SamplerConfig { seed: 3, ..SamplerConfig::default() };
    let a = run(&problem, &config)?;
    let b = run(&problem, &config)?;
    rec.at_most("rerun differs bitwise", (a.latent != b.latent) as u8 as f64, 0.0);

    // Ancestral samples: exact in law for N(0, I); other variances carry a
    // T = 50 discretisation offset, reported for the diagonal oracle.
    let n = 10_000;
    let standard = GaussianPrior::standard(2);
    let codec2 = LatentCodec::identity(2);
    let samples: Vec<Vector> = (0..n)
        .map(|_| sample_prior(&standard, &codec2, &sched, &mut rng))
        .collect::<Result<_, _>>()?;
    let (mz, cz) = moment_z_scores(&samples, &Vector::zeros(2), &Matrix::identity(2, 2));
    rec.at_most("N(0, I) ancestral mean max z-score (n=1e4)", mz, 4.0);
    rec.at_most("N(0, I) ancestral covariance max z-score (n=1e4)", cz, 4.0);
    let samples: Vec<Vector> = (0..n)
        .map(|_| sample_prior(&prior, &codec, &sched, &mut rng))
        .collect::<Result<_, _>>()?;
    let (_, cz) = moment_z_scores(&samples, &prior.mean, &prior.cov.to_matrix(4));
    rec.info("diagonal-prior covariance max z-score vs prior", cz);

    let (_, calls) = forward_encode_with(&prior, &codec, &sched, &task, Encoding::Ddim)?;
    rec.at_most("forward encoding calls - T", (calls as f64 - sched.steps() as f64).abs(), 0.0);
    Ok(())
}

/// Largest standardized deviations of the sample mean and covariance from
/// Gaussian reference moments, using `Var(S_ij) ≈ (Σ_ii Σ_jj + Σ_ij²) / n`.
pub fn moment_z_scores(samples: &[Vector], mean: &Vector, cov: &Matrix) -> (f64, f64) {
    let n = samples.len() as f64;
    let d = mean.len();
    let m = samples.iter().fold(Vector::zeros(d), |acc, s| acc + s) / n;
    let mut c = Matrix::zeros(d, d);
    for s in samples {
        let v = s - &m;
        c.ger(1.0, &v, &v, 1.0);
    }
    c /= n - 1.0;
    let mut mean_z: f64 = 0.0;
    let mut cov_z: f64 = 0.0;
    for i in 0..d {
        mean_z = mean_z.max((m[i] - mean[i]).abs() / (cov[(i, i)] / n).sqrt());
        for j in 0..d {
            let var = (cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / n;
            cov_z = cov_z.max((c[(i, j)] - cov[(i, j)]).abs() / var.sqrt());
        }
    }
    (mean_z, cov_z)
}

/// Two-mode shift model used by the editing checks: modes `±a` with
/// alternating-sign `a` of magnitude 0.8 in `d` dimensions.
pub fn flip_model(d: usize) -> Result<ConditionalShiftPrior, Error> {
    let a = Vector::from_fn(d, |i, _| if i % 2 == 0 { 0.8 } else { -0.8 });
    let base = GaussianMixturePrior::new(
        vec![0.5, 0.5],
        vec![a.clone(), -a],
        vec![Covariance::Scalar(0.05), Covariance::Scalar(0.05)],
    )?;
    ConditionalShiftPrior::new(base, Matrix::identity(d, d))
}

/// Edits a clean observation of component 0 towards component 1 and reports
/// whether the result is assigned to component 1.
pub fn flip_trial(model: &ConditionalShiftPrior, seed: u64, lambda: f64) -> Result<bool, Error> {
    let sched = NoiseSchedule::default_linear();
    let d = model.base.dim();
    let source_only = GaussianMixturePrior::new(
        vec![1.0],
        vec![model.base.means[0].clone()],
        vec![model.base.covariances[0].clone()],
    )?;
    let mut rng = rng_from_seed(1000 + seed);
    let clean = sample_mixture(&source_only, &mut rng);
    let task = MeasurementTask::simulate(LinearOperator::identity(d), 0.05, &clean, &mut rng)?;
    let codec = LatentCodec::identity(d);
    let sampler = SamplerConfig { seed, ..SamplerConfig::default() };
    let edit = EditConfig {
        target: (&model.base.means[1] - &model.base.means[0]).iter().cloned().collect(),
        lambda,
        ..EditConfig::default()
    };
    let report = stsl_core::editing::edit_pipeline(&task, model, &codec, &sched, &sampler, &edit)?;
    let out = Vector::from_vec(report.reconstruction);
    Ok(nearest_component(&model.base, &out) == 1)
}

fn editing_suite(rec: &mut Recorder) -> SuiteResult {
    let sched = NoiseSchedule::default_linear();
    let mut rng = rng_from_seed(1101);
    let d = 4;
    let model = ConditionalShiftPrior::new(random_gmm(d, 2, &mut rng)?, random_matrix(d, 3, &mut rng))?;
    let h = model.embed_dim();

    let mut null_diff: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.random_range(1..=sched.steps());
        let z = standard_normal(d, &mut rng);
        let (ab, prev) = (sched.alpha_bar(k), sched.alpha_bar(k - 1));
        let s = model.base.score(&z, ab);
        let zbar = (&z + &s * (1.0 - ab)) / ab.sqrt();
        let want = zbar * prev.sqrt() - s * ((1.0 - prev).sqrt() * (1.0 - ab).sqrt());
        null_diff = null_diff.max((f_predict(&model, &z, k, &Vector::zeros(h), &sched)? - want).amax());
    }
    rec.at_most("f_predict(phi = 0) vs unconditional", null_diff, 1e-12);

    let task = MeasurementTask::simulate(LinearOperator::identity(d), 0.1, &standard_normal(d, &mut rng), &mut rng)?;
    let codec = LatentCodec::identity(d);
    let z_next = standard_normal(d, &mut rng);
    let state = standard_normal(d, &mut rng);
    let zero = SurrogateTerms {
        lambda: 0.0,
        eta: 0.0,
        nu: 0.0,
        ..SurrogateTerms::default()
    };
    let same = edit_step(&z_next, &state, &task, &model, &Vector::zeros(h), &codec, &sched, 10, zero, 2, &mut rng)?;
    rec.at_most("zero-weight edit_step differs bitwise", (same != z_next) as u8 as f64, 0.0);

    // Planted trajectories generated by f with known embedding sequences.
    let (mut worst_reduction, mut below, mut rises) = (f64::INFINITY, 0usize, 0usize);
    let (mut before, mut after) = (0.0, 0.0);
    for _ in 0..20 {
        let planted_model = ConditionalShiftPrior::new(random_gmm(d, 2, &mut rng)?, random_matrix(d, 3, &mut rng))?;
        let planted: Vec<Vector> = (0..sched.steps()).map(|_| standard_normal(h, &mut rng) * 0.5).collect();
        let mut traj = vec![standard_normal(d, &mut rng)];
        for t in 0..sched.steps() {
            let next = f_predict(&planted_model, &traj[t], sched.steps() - t, &planted[t], &sched)?;
            traj.push(next);
        }
        let fit = null_optimize(&traj, &planted_model, &sched, &NullOptConfig::default())?;
        for t in 0..sched.steps() {
            let init = fit.initial_residual(t);
            before += init;
            after += fit.final_residual(t);
            if init > 0.0 {
                let reduction = 1.0 - fit.final_residual(t) / init;
                worst_reduction = worst_reduction.min(reduction);
                below += (reduction < 0.9) as usize;
            }
            rises += fit.residuals[t].windows(2).filter(|w| w[1] > w[0]).count();
        }
    }
    rec.at_least("planted residual reduction (worst of 1000 steps)", worst_reduction, 0.9);
    rec.info("planted steps below 90% reduction", below as f64);
    rec.info("planted whole-trajectory reduction", 1.0 - after / before);
    rec.at_most("residual increases across steps", rises as f64, 0.0);

    // Null target with zero edit weights reproduces the inversion.
    let x = standard_normal(d, &mut rng);
    let task = MeasurementTask::simulate(LinearOperator::identity(d), 0.1, &x, &mut rng)?;
    let sampler = SamplerConfig { seed: 9, ..SamplerConfig::default() };
    let base = model.with_embedding(&Vector::zeros(h))?;
    let inversion = run(&Problem::new(&task, &base, &codec, &sched), &sampler)?;
    let null_edit = EditConfig {
        lambda: 0.0,
        eta: 0.0,
        nu: 0.0,
        hook: Hook::Identity,
        ..EditConfig::default()
    };
    let edited = edit_from_trajectory(&inversion.trajectory, &task, &model, &codec, &sched, &null_edit, 9)?;
    rec.at_most(
        "null-target edit differs from inversion bitwise",
        (edited.latent != inversion.latent) as u8 as f64,
        0.0,
    );

    let flip = flip_model(16)?;
    let mut flips = 0usize;
    for seed in 0..50 {
        flips += flip_trial(&flip, seed, EditConfig::default().lambda)? as usize;
    }
    rec.at_least("planted-shift flip rate (50 seeds)", flips as f64 / 50.0, 0.8);
    Ok(())
}

fn metrics_suite(rec: &mut Recorder) -> SuiteResult {
    let n = 16;
    let reference = Vector::from_fn(n * n, |i, _| 0.5 + 0.4 * (0.37 * i as f64).sin());
    let candidate = Vector::from_fn(n * n, |i, _| reference[i] + 0.1 * (0.91 * i as f64).cos());
    let params = SsimParams {
        window: 8,
        k1: 0.01,
        k2: 0.03,
    };
    let fwd = ssim(&ImagePair::new(&reference, &candidate, n, n, 1.0)?, params)?;
    let back = ssim(&ImagePair::new(&candidate, &reference, n, n, 1.0)?, params)?;
    rec.at_most("SSIM regression |value - 0.9606118619205639|", (fwd - 0.960_611_861_920_563_9).abs(), 1e-12);
    rec.at_most("SSIM asymmetry", (fwd - back).abs(), 1e-15);
    let same = ssim(&ImagePair::new(&reference, &reference, n, n, 1.0)?, params)?;
    rec.at_most("SSIM(x, x) - 1", (same - 1.0).abs(), 1e-12);
    rec.at_most(
        "MSE of 0.1 offset - 0.01",
        (mse(&ImagePair::new(&reference, &reference.add_scalar(0.1), n, n, 1.0)?) - 0.01).abs(),
        1e-15,
    );
    let psnrs: Vec<f64> = [1e-4, 1e-3, 1e-2, 1e-1].iter().map(|m| psnr_from_mse(*m, 1.0)).collect();
    let monotone = psnrs.windows(2).all(|w| w[1] < w[0]);
    rec.at_most("PSNR not strictly decreasing in MSE", (!monotone) as u8 as f64, 0.0);
    rec.at_most("PSNR(MSE 0.01) - 20 dB", (psnr_from_mse(0.01, 1.0) - 20.0).abs(), 1e-12);

    let mut rng = rng_from_seed(1201);
    let a: Vec<Vector> = (0..200).map(|_| standard_normal(3, &mut rng)).collect();
    let b: Vec<Vector> = (0..150).map(|_| standard_normal(3, &mut rng).add_scalar(0.5)).collect();
    let ab = sliced_wasserstein(&a, &b, 32, &mut rng_from_seed(7))?;
    let ba = sliced_wasserstein(&b, &a, 32, &mut rng_from_seed(7))?;
    let aa = sliced_wasserstein(&a, &a, 32, &mut rng_from_seed(7))?;
    rec.at_most("sliced Wasserstein asymmetry", (ab - ba).abs(), 0.0);
    rec.at_most("sliced Wasserstein(a, a)", aa, 0.0);
    Ok(())
}
