//! The EXACT projected-extragradient solver and the three loss-minimization
//! baselines (MSE gradient descent, Polyak subgradient on the l1 loss, and
//! ADMM on the Poisson negative log-likelihood), sharing operator and loss
//! evaluations, the averaged-iterate stopping rule, and trace recording.

use ndarray::Array1;
use std::collections::VecDeque;
use std::fmt::Write as _;
use std::time::Instant;

use crate::constraints::{ConstraintProjector, ConstraintSet};
use crate::error::{Error, Result};
use crate::geometry::{Image, SystemMatrix};
use crate::model::{
    attenuation_response, attenuation_slope, MeasurementSet, SpectralModel, Spectrum,
    WindowedSpectra,
};

/// Inner CG iteration cap of the ADMM x-update.
const ADMM_CG_CAP: usize = 50;
/// Newton iteration cap of the ADMM z-update (bisection continues after).
const ADMM_NEWTON_CAP: usize = 100;

/// Step-size rules from the convergence analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSizeRule {
    /// 1/(4 L) with L the operator's Lipschitz bound.
    General,
    /// 1/(4 I lambda_max(Sigma) sum_j s_j mu_j); coincides with `General`
    /// because the Lipschitz bound is exactly that product.
    PositiveMeas,
    /// ((n+d)/n) / (40 I sum_j s_j mu_j) for Gaussian measurements.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    Explicit(f64),
    Rule(StepSizeRule),
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub step_size: StepSize,
    pub max_iters: usize,
    /// Averaged-iterate movement tolerance.
    pub convergence_tol: f64,
    /// Return (and stop on) the tail-averaged iterate. When off, raw
    /// iterates drive both the stopping rule and the returned image.
    pub averaging: bool,
    /// Optional early stop once the raw iterate reaches this distance to the
    /// supplied ground truth.
    pub truth_stop: Option<f64>,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            step_size: StepSize::Rule(StepSizeRule::PositiveMeas),
            max_iters: 50_000,
            convergence_tol: 1e-5,
            averaging: true,
            truth_stop: None,
            seed: 0,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if let StepSize::Explicit(g) = self.step_size {
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::Validation(format!("step size {g} must be positive")));
            }
        }
        if self.max_iters < 1 {
            return Err(Error::Validation("max_iters must be >= 1".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::Validation("convergence_tol must be > 0".into()));
        }
        Ok(())
    }
}

/// Everything a solver needs about one reconstruction instance.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub matrix: &'a SystemMatrix,
    pub model: &'a SpectralModel,
    pub counts: &'a MeasurementSet,
    pub constraint: &'a ConstraintSet,
    pub truth: Option<&'a Image>,
}

impl<'a> Problem<'a> {
    fn validate(&self) -> Result<()> {
        self.model.validate_rays(self.matrix.n_rows())?;
        let expected = self.model.n_total(self.matrix.n_rows());
        if self.counts.n_total() != expected {
            return Err(Error::DimensionMismatch {
                what: "measurement count",
                expected,
                got: self.counts.n_total(),
            });
        }
        self.constraint.validate(self.matrix.n_cols())?;
        if let Some(t) = self.truth {
            if t.len() != self.matrix.n_cols() {
                return Err(Error::DimensionMismatch {
                    what: "truth image",
                    expected: self.matrix.n_cols(),
                    got: t.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iter: usize,
    pub dist_to_truth: Option<f64>,
    pub avg_movement: f64,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SolverTrace {
    pub records: Vec<IterationRecord>,
    /// RMSE of the returned image against the truth, when truth was given.
    pub final_rmse: Option<f64>,
    /// Whether a stopping rule fired before the iteration cap.
    pub converged: bool,
    /// ||A x - z|| per outer iteration; ADMM only.
    pub primal_residuals: Vec<f64>,
}

impl SolverTrace {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    /// CSV with the header `iter,dist_to_truth,avg_movement,loss,wall_ms`.
    /// The wall-time column measures this run and is not reproducible.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,dist_to_truth,avg_movement,loss,wall_ms\n");
        for r in &self.records {
            let dist = r.dist_to_truth.map(|d| d.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{}",
                r.iter, dist, r.avg_movement, r.loss, r.wall_ms
            )
            .expect("string write");
        }
        out
    }
}

/// The variational-inequality operator
/// F(x) = (1/n) sum_w sum_i [y_{w,i} - I_w h_w(<a_i, x>)] a_i
/// with n the total stacked ray count.
pub fn operator_f(
    matrix: &SystemMatrix,
    spectra: &WindowedSpectra,
    counts: &MeasurementSet,
    x: &Image,
) -> Result<Image> {
    let model = SpectralModel::Windowed(spectra.clone());
    let values = operator_core(matrix, &model, counts, &x.values)?;
    Ok(Image { values, grid_side: x.grid_side })
}

pub(crate) fn operator_core(
    matrix: &SystemMatrix,
    model: &SpectralModel,
    counts: &MeasurementSet,
    x: &Array1<f64>,
) -> Result<Array1<f64>> {
    if x.len() != matrix.n_cols() {
        return Err(Error::DimensionMismatch {
            what: "operator input",
            expected: matrix.n_cols(),
            got: x.len(),
        });
    }
    let line_integrals = matrix.matvec(&x.view());
    let residuals = model.residual_sums(&line_integrals, counts)?;
    let n_total = model.n_total(matrix.n_rows()) as f64;
    Ok(matrix.rmatvec(&residuals.view()) / n_total)
}

/// Squared l2 loss (1/n) sum (I h(<a_i,x>) - y_i)^2 and its a.e. gradient.
pub(crate) fn eval_l2(
    matrix: &SystemMatrix,
    model: &SpectralModel,
    counts: &MeasurementSet,
    x: &Array1<f64>,
) -> Result<(f64, Array1<f64>)> {
    eval_loss(matrix, model, counts, x, |residual| (residual * residual, 2.0 * residual))
}

/// Absolute l1 loss (1/n) sum |I h(<a_i,x>) - y_i| and an a.e. subgradient.
pub(crate) fn eval_l1(
    matrix: &SystemMatrix,
    model: &SpectralModel,
    counts: &MeasurementSet,
    x: &Array1<f64>,
) -> Result<(f64, Array1<f64>)> {
    eval_loss(matrix, model, counts, x, |residual| {
        (residual.abs(), if residual > 0.0 { 1.0 } else if residual < 0.0 { -1.0 } else { 0.0 })
    })
}

/// Shared loss skeleton: per stacked ray the outer function maps the signed
/// residual I h - y to (loss term, d loss / d residual); the chain rule
/// through I h'(t) a_i is applied here.
fn eval_loss<G>(
    matrix: &SystemMatrix,
    model: &SpectralModel,
    counts: &MeasurementSet,
    x: &Array1<f64>,
    per_ray: G,
) -> Result<(f64, Array1<f64>)>
where
    G: Fn(f64) -> (f64, f64),
{
    let n_rays = matrix.n_rows();
    if counts.n_total() != model.n_total(n_rays) {
        return Err(Error::DimensionMismatch {
            what: "loss measurement count",
            expected: model.n_total(n_rays),
            got: counts.n_total(),
        });
    }
    let t = matrix.matvec(&x.view());
    let mut loss = 0.0;
    let mut back = Array1::zeros(n_rays);
    model.visit_fit(&t, |w, i, fitted, slope| {
        let (term, dres) = per_ray(fitted - counts.counts[w * n_rays + i]);
        loss += term;
        back[i] += dres * slope;
    });
    let n_total = model.n_total(n_rays) as f64;
    let grad = matrix.rmatvec(&back.view()) / n_total;
    Ok((loss / n_total, grad))
}

/// Value of the squared l2 loss at `x`.
pub fn l2_loss(
    matrix: &SystemMatrix,
    model: &SpectralModel,
    counts: &MeasurementSet,
    x: &Array1<f64>,
) -> Result<f64> {
    eval_l2(matrix, model, counts, x).map(|(loss, _)| loss)
}

/// Value of the absolute l1 loss at `x`; the baselines' oracle loss is this
/// evaluated at the target image.
pub fn l1_loss(
    matrix: &SystemMatrix,
    model: &SpectralModel,
    counts: &MeasurementSet,
    x: &Array1<f64>,
) -> Result<f64> {
    eval_l1(matrix, model, counts, x).map(|(loss, _)| loss)
}

/// Arithmetic mean of the trailing half of the history: iterates
/// ceil(t/2)..t, one-indexed.
pub fn averaged_iterate(history: &[Array1<f64>]) -> Result<Array1<f64>> {
    if history.is_empty() {
        return Err(Error::Validation("averaged_iterate: empty history".into()));
    }
    let t = history.len();
    let start = (t + 1) / 2; // ceil(t/2), 1-based
    let window = &history[start - 1..];
    let mut sum = Array1::zeros(history[0].len());
    for x in window {
        sum += x;
    }
    Ok(sum / window.len() as f64)
}

/// Step size prescribed by `rule` for the given instance.
pub fn step_size_rule(
    rule: StepSizeRule,
    matrix: &SystemMatrix,
    model: &SpectralModel,
) -> Result<f64> {
    let slope = model.intensity_slope_factor();
    if !(slope > 0.0) {
        return Err(Error::Validation("step size: zero slope factor".into()));
    }
    match rule {
        StepSizeRule::General | StepSizeRule::PositiveMeas => {
            let l = crate::theory::lipschitz_bound(matrix, model)?;
            Ok(1.0 / (4.0 * l))
        }
        StepSizeRule::Gaussian => {
            let n = model.n_total(matrix.n_rows()) as f64;
            let d = matrix.n_cols() as f64;
            Ok(((n + d) / n) / (40.0 * slope))
        }
    }
}

fn resolve_step(cfg: &SolverConfig, problem: &Problem) -> Result<f64> {
    match cfg.step_size {
        StepSize::Explicit(g) => Ok(g),
        StepSize::Rule(rule) => step_size_rule(rule, problem.matrix, problem.model),
    }
}

/// Tail-average window: the arithmetic mean of iterates ceil(t/2)..t kept
/// incrementally as the history grows.
struct AverageWindow {
    window: VecDeque<Array1<f64>>,
    sum: Array1<f64>,
    total: usize,
    start: usize, // 1-based index of the first iterate in the window
}

impl AverageWindow {
    fn new(d: usize) -> Self {
        Self { window: VecDeque::new(), sum: Array1::zeros(d), total: 0, start: 1 }
    }

    fn push(&mut self, x: &Array1<f64>) {
        self.total += 1;
        self.window.push_back(x.clone());
        self.sum += x;
        let desired = (self.total + 1) / 2;
        while self.start < desired {
            let old = self.window.pop_front().expect("window nonempty");
            self.sum -= &old;
            self.start += 1;
        }
    }

    fn mean(&self) -> Array1<f64> {
        &self.sum / self.window.len() as f64
    }
}

fn norm(x: &Array1<f64>) -> f64 {
    x.dot(x).sqrt()
}

fn dist(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let d = a - b;
    norm(&d)
}

/// Shared projected-iteration driver. `advance` maps the current iterate and
/// the 1-based iteration number to (next iterate, loss at the current one).
fn run_solver<S>(
    name: &'static str,
    cfg: &SolverConfig,
    problem: &Problem,
    x1: &Image,
    projector: &mut ConstraintProjector,
    mut advance: S,
) -> Result<(Image, SolverTrace)>
where
    S: FnMut(&Array1<f64>, usize, &mut ConstraintProjector) -> Result<(Array1<f64>, f64)>,
{
    cfg.validate()?;
    problem.validate()?;
    if x1.len() != problem.matrix.n_cols() {
        return Err(Error::DimensionMismatch {
            what: "initial iterate",
            expected: problem.matrix.n_cols(),
            got: x1.len(),
        });
    }
    let start_time = Instant::now();
    let mut x = projector.project(&x1.values.view())?;
    // Divergence guard; the max with 1 keeps a zero start from tripping it.
    let diverge_limit = 1e6 * norm(&x1.values).max(1.0);
    let truth = problem.truth.map(|t| &t.values);
    let mut avg = cfg.averaging.then(|| {
        let mut w = AverageWindow::new(x.len());
        w.push(&x);
        w
    });
    let mut prev_avg = avg.as_ref().map(|w| w.mean());
    let mut trace = SolverTrace::default();
    for t in 1..=cfg.max_iters {
        let (x_next, loss) = advance(&x, t, projector)?;
        if x_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { solver: name, iter: t, norm: f64::NAN });
        }
        let x_norm = norm(&x_next);
        if x_norm > diverge_limit {
            return Err(Error::Divergence { solver: name, iter: t, norm: x_norm });
        }
        let movement = match avg.as_mut() {
            Some(w) => {
                w.push(&x_next);
                let mean = w.mean();
                let m = dist(&mean, prev_avg.as_ref().expect("prev average set"));
                prev_avg = Some(mean);
                m
            }
            None => dist(&x_next, &x),
        };
        let dist_to_truth = truth.map(|xs| dist(&x_next, xs));
        trace.records.push(IterationRecord {
            iter: t,
            dist_to_truth,
            avg_movement: movement,
            loss,
            wall_ms: start_time.elapsed().as_secs_f64() * 1e3,
        });
        x = x_next;
        if let (Some(limit), Some(d)) = (cfg.truth_stop, dist_to_truth) {
            if d <= limit {
                trace.converged = true;
                break;
            }
        }
        if movement <= cfg.convergence_tol {
            trace.converged = true;
            break;
        }
    }
    let final_values = match (cfg.averaging, prev_avg) {
        (true, Some(mean)) => mean,
        _ => x,
    };
    let result = Image { values: final_values, grid_side: x1.grid_side.or_else(|| problem.truth.and_then(|t| t.grid_side)) };
    trace.final_rmse = match problem.truth {
        Some(t) => Some(result.rmse(t)?),
        None => None,
    };
    Ok((result, trace))
}

/// EXACT: the projected extragradient iteration
/// x_{t+1/2} = P_X(x_t - g F(x_t)), x_{t+1} = P_X(x_t - g F(x_{t+1/2})).
/// The trace's loss column records ||F(x_t)||.
pub fn exact_solve(
    problem: &Problem,
    cfg: &SolverConfig,
    x1: &Image,
) -> Result<(Image, SolverTrace)> {
    let gamma = resolve_step(cfg, problem)?;
    let mut projector = ConstraintProjector::new(problem.constraint, problem.matrix.n_cols())?;
    run_solver("EXACT", cfg, problem, x1, &mut projector, |x, _t, projector| {
        let f1 = operator_core(problem.matrix, problem.model, problem.counts, x)?;
        let x_half = projector.project(&(x - &(gamma * &f1)).view())?;
        let f2 = operator_core(problem.matrix, problem.model, problem.counts, &x_half)?;
        let x_next = projector.project(&(x - &(gamma * &f2)).view())?;
        Ok((x_next, norm(&f1)))
    })
}

/// Projected gradient descent on the squared l2 loss.
pub fn mse_gd_solve(
    problem: &Problem,
    cfg: &SolverConfig,
    x1: &Image,
) -> Result<(Image, SolverTrace)> {
    let StepSize::Explicit(gamma) = cfg.step_size else {
        return Err(Error::Config(
            "mse_gd: step size must be explicit (tuned per experiment)".into(),
        ));
    };
    let mut projector = ConstraintProjector::new(problem.constraint, problem.matrix.n_cols())?;
    run_solver("MSE GD", cfg, problem, x1, &mut projector, |x, _t, projector| {
        let (loss, grad) = eval_l2(problem.matrix, problem.model, problem.counts, x)?;
        let x_next = projector.project(&(x - &(gamma * &grad)).view())?;
        Ok((x_next, loss))
    })
}

/// Projected subgradient descent on the absolute l1 loss with the Polyak
/// step (L1(x) - L1*)/||g||^2, given oracle knowledge of the loss value at
/// the target image. When the gap is nonpositive (noisy data), falls back to
/// c/t with c the first positive Polyak step.
pub fn polyak_sgm_solve(
    problem: &Problem,
    cfg: &SolverConfig,
    x1: &Image,
    oracle_loss: f64,
) -> Result<(Image, SolverTrace)> {
    if !oracle_loss.is_finite() || oracle_loss < 0.0 {
        return Err(Error::Validation(format!(
            "polyak_sgm: oracle loss {oracle_loss} must be finite and nonnegative"
        )));
    }
    let mut projector = ConstraintProjector::new(problem.constraint, problem.matrix.n_cols())?;
    let mut fallback_scale: Option<f64> = None;
    run_solver("PolyakSGM", cfg, problem, x1, &mut projector, |x, t, projector| {
        let (loss, grad) = eval_l1(problem.matrix, problem.model, problem.counts, x)?;
        let grad_sq = grad.dot(&grad);
        let gap = loss - oracle_loss;
        let step = if grad_sq == 0.0 {
            if gap > 1e-12 * loss.max(1.0) {
                return Err(Error::SubgradientStall { iter: t, loss, oracle: oracle_loss });
            }
            0.0
        } else {
            let polyak = gap / grad_sq;
            if polyak > 0.0 {
                fallback_scale.get_or_insert(polyak);
                polyak
            } else {
                fallback_scale.unwrap_or(0.0) / t as f64
            }
        };
        let x_next = projector.project(&(x - &(step * &grad)).view())?;
        Ok((x_next, loss))
    })
}

/// Scaled-form ADMM on min Loss(z) s.t. Ax = z, x in X, with Loss the
/// Poisson negative log-likelihood. The config's explicit step size is the
/// penalty parameter rho. The trace's loss column records Loss(z)/n.
pub fn admm_poisson_solve(
    problem: &Problem,
    cfg: &SolverConfig,
    x1: &Image,
) -> Result<(Image, SolverTrace)> {
    let StepSize::Explicit(rho) = cfg.step_size else {
        return Err(Error::Config(
            "admm: penalty rho must be given as an explicit step size".into(),
        ));
    };
    if let Some(bad) = problem.counts.counts.iter().find(|c| **c < 0.0) {
        return Err(Error::Validation(format!(
            "admm: counts must be nonnegative, found {bad}"
        )));
    }
    let matrix = problem.matrix;
    let n_rays = matrix.n_rows();
    let mut projector = ConstraintProjector::new(problem.constraint, matrix.n_cols())?;
    let x0 = projector.project(&x1.values.view())?;
    let atol_scale = rho.max(problem.model.intensity_slope_factor());
    // Seed z with one z-update anchored at A x0, so the first x-update has a
    // data-informed target instead of reproducing x0.
    let ax0 = matrix.matvec(&x0.view());
    let mut z: Array1<f64> = Array1::from_iter((0..n_rays).map(|i| {
        admm_z_update(problem.model, problem.counts, n_rays, i, rho, ax0[i], atol_scale)
    }));
    let mut u: Array1<f64> = Array1::zeros(n_rays);
    let mut x_warm = x0;
    let mut residuals: Vec<f64> = Vec::new();
    let (mut image, mut trace) =
        run_solver("ADMM", cfg, problem, x1, &mut projector, |x, _t, projector| {
            // x-update: least squares onto the constraint set
            let target = &z - &u;
            let rhs = matrix.rmatvec(&target.view());
            let x_ls = cg_normal_equations(matrix, &rhs, &x_warm, ADMM_CG_CAP, 1e-10);
            x_warm = x_ls;
            let x_next = projector.project(&x_warm.view())?;
            let ax = matrix.matvec(&x_next.view());
            // z-update: per-ray 1D smooth minimization
            let mut loss = 0.0;
            for i in 0..n_rays {
                let v = ax[i] + u[i];
                let zi = admm_z_update(problem.model, problem.counts, n_rays, i, rho, v, atol_scale);
                z[i] = zi;
                loss += poisson_nll_ray(problem.model, problem.counts, n_rays, i, zi);
            }
            // dual update
            u += &(&ax - &z);
            let pr = dist(&ax, &z);
            residuals.push(pr);
            let _ = x; // previous iterate not reused; CG warm start carries state
            Ok((x_next, loss / problem.model.n_total(n_rays) as f64))
        })?;
    trace.primal_residuals = residuals;
    if let Some(t) = problem.truth {
        trace.final_rmse = Some(image.rmse(t)?);
    }
    image.grid_side = x1.grid_side.or_else(|| problem.truth.and_then(|t| t.grid_side));
    Ok((image, trace))
}

/// Conjugate gradient on the normal equations A'A x = rhs, warm-started.
fn cg_normal_equations(
    matrix: &SystemMatrix,
    rhs: &Array1<f64>,
    x0: &Array1<f64>,
    cap: usize,
    tol: f64,
) -> Array1<f64> {
    let apply = |v: &Array1<f64>| {
        let av = matrix.matvec(&v.view());
        matrix.rmatvec(&av.view())
    };
    let mut x = x0.clone();
    let mut r = rhs - &apply(&x);
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let target = tol * tol * rhs.dot(rhs).max(1e-300);
    for _ in 0..cap {
        if rs <= target {
            break;
        }
        let ap = apply(&p);
        let denom = p.dot(&ap);
        if denom <= 0.0 {
            break;
        }
        let alpha = rs / denom;
        x += &(alpha * &p);
        r -= &(alpha * &ap);
        let rs_new = r.dot(&r);
        p = &r + &((rs_new / rs) * &p);
        rs = rs_new;
    }
    x
}

/// h with no ReLU plus first and second derivatives, sharing the exps.
fn raw_response(spec: &Spectrum, z: f64) -> (f64, f64, f64) {
    let mut h = 0.0;
    let mut dh = 0.0;
    let mut d2h = 0.0;
    for (s, mu) in spec.weights().iter().zip(spec.attenuations().iter()) {
        let e = s * (-mu * z).exp();
        h += e;
        dh -= mu * e;
        d2h += mu * mu * e;
    }
    (h, dh, d2h)
}

fn for_each_ray_window<F>(
    model: &SpectralModel,
    counts: &MeasurementSet,
    n_rays: usize,
    ray: usize,
    mut f: F,
) where
    F: FnMut(&Spectrum, f64),
{
    match model {
        SpectralModel::Windowed(ws) => {
            for (w, spec) in ws.windows().iter().enumerate() {
                f(spec, counts.counts[w * n_rays + ray]);
            }
        }
        SpectralModel::PerRay(spectra) => f(&spectra[ray], counts.counts[ray]),
    }
}

fn poisson_nll_ray(
    model: &SpectralModel,
    counts: &MeasurementSet,
    n_rays: usize,
    ray: usize,
    z: f64,
) -> f64 {
    let mut nll = 0.0;
    for_each_ray_window(model, counts, n_rays, ray, |spec, y| {
        let (h, _, _) = raw_response(spec, z);
        let mean = spec.intensity() * h;
        nll += mean - y * mean.ln();
    });
    nll
}

/// Derivative and curvature of the per-ray ADMM objective
/// sum_w [I h(z) - y ln(I h(z))] + (rho/2)(z - v)^2.
fn admm_z_derivatives(
    model: &SpectralModel,
    counts: &MeasurementSet,
    n_rays: usize,
    ray: usize,
    rho: f64,
    v: f64,
    z: f64,
) -> (f64, f64) {
    let mut d1 = rho * (z - v);
    let mut d2 = rho;
    for_each_ray_window(model, counts, n_rays, ray, |spec, y| {
        let (h, dh, d2h) = raw_response(spec, z);
        let intensity = spec.intensity();
        d1 += dh * (intensity - y / h);
        d2 += d2h * (intensity - y / h) + dh * dh * y / (h * h);
    });
    (d1, d2)
}

/// Safeguarded Newton on the 1D derivative with a sign-change bracket;
/// steps that leave the bracket or meet bad curvature fall back to bisection.
fn admm_z_update(
    model: &SpectralModel,
    counts: &MeasurementSet,
    n_rays: usize,
    ray: usize,
    rho: f64,
    v: f64,
    atol_scale: f64,
) -> f64 {
    let atol = 1e-9 * atol_scale * (1.0 + v.abs());
    let deriv = |z: f64| admm_z_derivatives(model, counts, n_rays, ray, rho, v, z);
    let (d_v, _) = deriv(v);
    if d_v.abs() <= atol {
        return v;
    }
    let mut width = 1.0;
    let (mut lo, mut hi) = (v - width, v + width);
    for _ in 0..200 {
        let grow_lo = deriv(lo).0 > 0.0;
        let grow_hi = deriv(hi).0 < 0.0;
        if !grow_lo && !grow_hi {
            break;
        }
        width *= 2.0;
        if grow_lo {
            lo = v - width;
        }
        if grow_hi {
            hi = v + width;
        }
    }
    let mut z = v;
    for _ in 0..ADMM_NEWTON_CAP {
        let (d1, d2) = deriv(z);
        if d1.abs() <= atol {
            return z;
        }
        if d1 > 0.0 {
            hi = z;
        } else {
            lo = z;
        }
        let newton = z - d1 / d2;
        let z_new = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (z_new - z).abs() <= 1e-14 * (1.0 + z.abs()) {
            return z_new;
        }
        z = z_new;
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_gaussian_matrix, build_radon_matrix, ParallelBeamGeometry};
    use crate::model::{expected_counts_model, sample_poisson};
    use crate::rng::seeded;
    use ndarray::array;
    use rand::Rng;

    fn mono_spectrum(intensity: f64) -> Spectrum {
        Spectrum::new(vec![1.0], vec![1.0], intensity).unwrap()
    }

    fn small_ct_problem(
        seed: u64,
    ) -> (SystemMatrix, SpectralModel, Image, MeasurementSet) {
        let geom = ParallelBeamGeometry::with_unit_field(8, 12, 8).unwrap();
        let matrix = build_radon_matrix(&geom);
        let model: SpectralModel =
            WindowedSpectra::synthetic_ct_default(6, 3.0e4).unwrap().into();
        let truth = crate::geometry::make_pmma_phantom(8).unwrap();
        let means = expected_counts_model(&matrix, &truth, &model).unwrap();
        let counts = sample_poisson(&means, seed).unwrap();
        (matrix, model, truth, counts)
    }

    #[test]
    fn operator_vanishes_at_truth_noiseless() {
        let (matrix, model, truth, _) = small_ct_problem(0);
        let noiseless = expected_counts_model(&matrix, &truth, &model).unwrap();
        let f = operator_core(&matrix, &model, &noiseless, &truth.values).unwrap();
        assert!(norm(&f) <= 1e-12, "||F(x*)|| = {}", norm(&f));
    }

    #[test]
    fn operator_matches_scalar_formula_single_ray() {
        let matrix = SystemMatrix::from_csr(1, 1, vec![0, 1], vec![0], vec![0.8]).unwrap();
        let spec = mono_spectrum(100.0);
        let model: SpectralModel = WindowedSpectra::single(spec.clone()).into();
        let y = MeasurementSet::new(array![37.0], vec![0, 1]).unwrap();
        let x = array![1.3];
        let f = operator_core(&matrix, &model, &y, &x).unwrap();
        let t = 0.8 * 1.3;
        let expected = (37.0 - 100.0 * (-t as f64).exp()) * 0.8;
        assert!((f[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn operator_is_monotone_on_random_pairs() {
        let (matrix, model, _, counts) = small_ct_problem(1);
        let mut rng = seeded(5);
        let d = matrix.n_cols();
        for _ in 0..200 {
            let x1: Array1<f64> = Array1::from_iter((0..d).map(|_| rng.gen::<f64>() * 2.0));
            let x2: Array1<f64> = Array1::from_iter((0..d).map(|_| rng.gen::<f64>() * 2.0));
            let f1 = operator_core(&matrix, &model, &counts, &x1).unwrap();
            let f2 = operator_core(&matrix, &model, &counts, &x2).unwrap();
            let diff = &x1 - &x2;
            let inner = (&f1 - &f2).dot(&diff);
            assert!(inner >= -1e-10 * diff.dot(&diff), "inner {inner}");
        }
    }

    #[test]
    fn averaged_iterate_window_arithmetic() {
        let h1 = vec![array![2.0, 4.0]];
        assert_eq!(averaged_iterate(&h1).unwrap(), array![2.0, 4.0]);
        let h2 = vec![array![0.0], array![2.0]];
        assert_eq!(averaged_iterate(&h2).unwrap(), array![1.0]);
        let h4 = vec![array![10.0], array![2.0], array![4.0], array![6.0]];
        assert_eq!(averaged_iterate(&h4).unwrap(), array![4.0]); // mean of x2..x4
        let constant = vec![array![3.0]; 7];
        assert_eq!(averaged_iterate(&constant).unwrap(), array![3.0]);
    }

    #[test]
    fn average_window_matches_free_function() {
        let mut rng = seeded(8);
        let mut window = AverageWindow::new(3);
        let mut history: Vec<Array1<f64>> = Vec::new();
        for _ in 0..25 {
            let x: Array1<f64> = Array1::from_iter((0..3).map(|_| rng.gen::<f64>()));
            window.push(&x);
            history.push(x);
            let expect = averaged_iterate(&history).unwrap();
            let got = window.mean();
            assert!(dist(&got, &expect) < 1e-12);
        }
    }

    #[test]
    fn step_size_rule_examples() {
        // gaussian rule with n = d, I = 1, sum s mu = 1 -> 2/40
        let a = build_gaussian_matrix(4, 4, 0);
        let model: SpectralModel = WindowedSpectra::single(mono_spectrum(1.0)).into();
        let g = step_size_rule(StepSizeRule::Gaussian, &a, &model).unwrap();
        assert!((g - 0.05).abs() < 1e-12);
        // positive-measurement rule with lambda_max(Sigma) = 1: 1x1 identity
        let id = SystemMatrix::from_csr(1, 1, vec![0, 1], vec![0], vec![1.0]).unwrap();
        let g = step_size_rule(StepSizeRule::PositiveMeas, &id, &model).unwrap();
        assert!((g - 0.25).abs() < 1e-9);
        // the general rule is 1/(4 L-hat)
        let (matrix, model, _, _) = small_ct_problem(2);
        let g = step_size_rule(StepSizeRule::General, &matrix, &model).unwrap();
        let l_hat = crate::theory::lipschitz_bound(&matrix, &model).unwrap();
        assert!((g - 1.0 / (4.0 * l_hat)).abs() <= 1e-12 * g);
    }

    #[test]
    fn exact_stays_at_truth_on_noiseless_data() {
        let (matrix, model, truth, _) = small_ct_problem(3);
        let noiseless = expected_counts_model(&matrix, &truth, &model).unwrap();
        let tau = crate::constraints::tv_norm(&truth).unwrap();
        let constraint = ConstraintSet::tv_nonneg(tau, 8);
        let problem = Problem {
            matrix: &matrix,
            model: &model,
            counts: &noiseless,
            constraint: &constraint,
            truth: Some(&truth),
        };
        let cfg = SolverConfig { max_iters: 5, ..Default::default() };
        let (out, trace) = exact_solve(&problem, &cfg, &truth).unwrap();
        assert!(trace.records.iter().all(|r| r.avg_movement <= 1e-12));
        assert!(out.rmse(&truth).unwrap() <= 1e-12);
    }

    #[test]
    fn exact_converges_on_small_gaussian_instance() {
        let d = 20;
        let n = 30 * d;
        let matrix = build_gaussian_matrix(n, d, 7);
        let model: SpectralModel = WindowedSpectra::single(mono_spectrum(1.0)).into();
        let mut rng = seeded(11);
        let mut x_star: Array1<f64> = Array1::from_iter((0..d).map(|_| rng.gen::<f64>() - 0.5));
        x_star *= 2.0 / norm(&x_star);
        let truth = Image::new(x_star.clone()).unwrap();
        let counts = expected_counts_model(&matrix, &truth, &model).unwrap();
        let constraint = ConstraintSet::L2Ball {
            radius: 4.0 * norm(&x_star),
            center: truth.clone(),
        };
        let problem = Problem {
            matrix: &matrix,
            model: &model,
            counts: &counts,
            constraint: &constraint,
            truth: Some(&truth),
        };
        let cfg = SolverConfig {
            step_size: StepSize::Explicit(0.25),
            max_iters: 5000,
            averaging: false,
            truth_stop: Some(1e-8),
            ..Default::default()
        };
        let x1 = Image::new(Array1::zeros(d)).unwrap();
        let (_, trace) = exact_solve(&problem, &cfg, &x1).unwrap();
        assert!(trace.converged, "did not reach 1e-8 in {} iters", trace.iterations());
        // distance to truth is eventually monotone decreasing (burn-in 10)
        let dists: Vec<f64> = trace.records.iter().filter_map(|r| r.dist_to_truth).collect();
        for w in dists.windows(2).skip(10) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let (matrix, model, truth, counts) = small_ct_problem(4);
        // smooth point: strictly positive line integrals
        let x = &truth.values * 0.9 + 0.3;
        let (_, grad) = eval_l2(&matrix, &model, &counts, &x).unwrap();
        let mut rng = seeded(13);
        let eps = 1e-5;
        for _ in 0..20 {
            let k = rng.gen_range(0..x.len());
            let mut xp = x.clone();
            xp[k] += eps;
            let mut xm = x.clone();
            xm[k] -= eps;
            let (lp, _) = eval_l2(&matrix, &model, &counts, &xp).unwrap();
            let (lm, _) = eval_l2(&matrix, &model, &counts, &xm).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            let denom = grad[k].abs().max(fd.abs()).max(1e-10);
            assert!(
                (grad[k] - fd).abs() / denom < 1e-4,
                "coord {k}: analytic {} vs fd {fd}",
                grad[k]
            );
        }
    }

    #[test]
    fn mse_gd_no_movement_at_truth_noiseless() {
        let (matrix, model, truth, _) = small_ct_problem(5);
        let noiseless = expected_counts_model(&matrix, &truth, &model).unwrap();
        let constraint = ConstraintSet::NonNegOrthant;
        let problem = Problem {
            matrix: &matrix,
            model: &model,
            counts: &noiseless,
            constraint: &constraint,
            truth: Some(&truth),
        };
        let cfg = SolverConfig {
            step_size: StepSize::Explicit(1e-9),
            max_iters: 3,
            ..Default::default()
        };
        let (_, trace) = mse_gd_solve(&problem, &cfg, &truth).unwrap();
        assert!(trace.records[0].loss <= 1e-18);
        assert!(trace.records.iter().all(|r| r.avg_movement <= 1e-12));
    }

    #[test]
    fn mse_gd_loss_monotone_for_small_steps() {
        let (matrix, model, truth, counts) = small_ct_problem(6);
        let constraint = ConstraintSet::NonNegOrthant;
        let problem = Problem {
            matrix: &matrix,
            model: &model,
            counts: &counts,
            constraint: &constraint,
            truth: Some(&truth),
        };
        let cfg = SolverConfig {
            step_size: StepSize::Explicit(1e-11),
            max_iters: 60,
            convergence_tol: 1e-14,
            ..Default::default()
        };
        let x1 = Image::new_2d(Array1::from_elem(64, 0.5), 8).unwrap();
        let (_, trace) = mse_gd_solve(&problem, &cfg, &x1).unwrap();
        let losses: Vec<f64> = trace.records.iter().map(|r| r.loss).collect();
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "loss rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn polyak_subgradient_matches_finite_differences() {
        let (matrix, model, truth, _) = small_ct_problem(7);
        // keep residuals bounded away from zero so the loss is smooth there
        let means = expected_counts_model(&matrix, &truth, &model).unwrap();
        let bumped = MeasurementSet::new(
            means.counts.mapv(|m| m * 1.25 + 1.0),
            means.window_boundaries.clone(),
        )
        .unwrap();
        let x = &truth.values * 0.9 + 0.3;
        let (_, grad) = eval_l1(&matrix, &model, &bumped, &x).unwrap();
        let eps = 1e-5;
        let mut rng = seeded(19);
        for _ in 0..20 {
            let k = rng.gen_range(0..x.len());
            let mut xp = x.clone();
            xp[k] += eps;
            let mut xm = x.clone();
            xm[k] -= eps;
            let (lp, _) = eval_l1(&matrix, &model, &bumped, &xp).unwrap();
            let (lm, _) = eval_l1(&matrix, &model, &bumped, &xm).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            let denom = grad[k].abs().max(fd.abs()).max(1e-10);
            assert!((grad[k] - fd).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn polyak_no_movement_at_truth_with_zero_oracle() {
        let (matrix, model, truth, _) = small_ct_problem(8);
        let noiseless = expected_counts_model(&matrix, &truth, &model).unwrap();
        let constraint = ConstraintSet::NonNegOrthant;
        let problem = Problem {
            matrix: &matrix,
            model: &model,
            counts: &noiseless,
            constraint: &constraint,
            truth: Some(&truth),
        };
        let cfg = SolverConfig {
            step_size: StepSize::Explicit(1.0),
            max_iters: 3,
            ..Default::default()
        };
        let (_, trace) = polyak_sgm_solve(&problem, &cfg, &truth, 0.0).unwrap();
        assert!(trace.records.iter().all(|r| r.avg_movement <= 1e-12));
    }

    #[test]
    fn admm_z_update_stationary_at_anchor() {
        let spec = mono_spectrum(500.0);
        let model: SpectralModel = WindowedSpectra::single(spec.clone()).into();
        let v = 1.4;
        let y = 500.0 * attenuation_response(&spec, v);
        let counts = MeasurementSet::new(array![y], vec![0, 1]).unwrap();
        let z = admm_z_update(&model, &counts, 1, 0, 10.0, v, 510.0);
        assert!((z - v).abs() <= 1e-9, "z {z} vs anchor {v}");
    }

    #[test]
    fn admm_z_update_matches_grid_scan() {
        let model: SpectralModel =
            WindowedSpectra::synthetic_ct_default(5, 900.0).unwrap().into();
        let mut rng = seeded(23);
        for trial in 0..10 {
            let v: f64 = rng.gen::<f64>() * 2.0 + 0.2;
            let anchor = v + 0.15 * (rng.gen::<f64>() - 0.5);
            let means = match &model {
                SpectralModel::Windowed(ws) => Array1::from_iter(ws.windows().iter().map(
                    |s| s.intensity() * attenuation_response(s, anchor),
                )),
                _ => unreachable!(),
            };
            let counts = MeasurementSet::new(means, vec![0, 1, 2, 3]).unwrap();
            let rho = 50.0;
            let z = admm_z_update(&model, &counts, 1, 0, rho, v, 950.0);
            // 1e4-point scan of the 1D objective around the anchor
            let objective = |zz: f64| {
                poisson_nll_ray(&model, &counts, 1, 0, zz) + 0.5 * rho * (zz - v) * (zz - v)
            };
            let mut best = (f64::INFINITY, v - 0.4);
            let n_pts = 10_000;
            for k in 0..n_pts {
                let zz = v - 0.4 + 0.8 * k as f64 / (n_pts - 1) as f64;
                let f = objective(zz);
                if f < best.0 {
                    best = (f, zz);
                }
            }
            assert!(
                (z - best.1).abs() <= 1e-4,
                "trial {trial}: newton {z} vs grid {}",
                best.1
            );
        }
    }

    #[test]
    fn admm_primal_residual_shrinks_on_noiseless_problem() {
        let (matrix, model, truth, _) = small_ct_problem(9);
        let noiseless = expected_counts_model(&matrix, &truth, &model).unwrap();
        let tau = crate::constraints::tv_norm(&truth).unwrap();
        let constraint = ConstraintSet::tv_nonneg(tau, 8);
        let problem = Problem {
            matrix: &matrix,
            model: &model,
            counts: &noiseless,
            constraint: &constraint,
            truth: Some(&truth),
        };
        let cfg = SolverConfig {
            step_size: StepSize::Explicit(30.0),
            max_iters: 400,
            convergence_tol: 1e-7,
            ..Default::default()
        };
        let x1 = Image::new_2d(Array1::zeros(64), 8).unwrap();
        let (_, trace) = admm_poisson_solve(&problem, &cfg, &x1).unwrap();
        let last = *trace.primal_residuals.last().unwrap();
        assert!(last < 1e-3, "primal residual {last}");
    }

    #[test]
    fn divergence_guard_reports_iteration() {
        let (matrix, model, truth, counts) = small_ct_problem(10);
        let constraint = ConstraintSet::NonNegOrthant;
        let problem = Problem {
            matrix: &matrix,
            model: &model,
            counts: &counts,
            constraint: &constraint,
            truth: Some(&truth),
        };
        // absurd step size blows the gradient iteration up
        let cfg = SolverConfig {
            step_size: StepSize::Explicit(1e12),
            max_iters: 500,
            ..Default::default()
        };
        let x1 = Image::new_2d(Array1::from_elem(64, 0.5), 8).unwrap();
        match mse_gd_solve(&problem, &cfg, &x1) {
            Err(Error::Divergence { iter, .. }) => assert!(iter >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn trace_csv_has_pinned_header() {
        let trace = SolverTrace {
            records: vec![IterationRecord {
                iter: 1,
                dist_to_truth: None,
                avg_movement: 0.5,
                loss: 2.0,
                wall_ms: 1.25,
            }],
            ..Default::default()
        };
        let csv = trace.to_csv();
        assert!(csv.starts_with("iter,dist_to_truth,avg_movement,loss,wall_ms\n"));
        assert!(csv.contains("1,,0.5,2,1.25"));
    }
}
