//! Linear stability of reversible recurrences.
//!
//! For the scalar test equation `f(p) = λp` the recurrence
//! `p_{j+1} = a p_{j-1} + b p_j + hλ p_j` has characteristic polynomial
//! `r² − (b + hλ) r − a`. It is forward-backward stable when both roots lie on
//! the unit circle, so that neither the forward pass nor the reconstruction
//! running backwards amplifies perturbations.

use std::fmt::Write as _;

use num_complex::Complex64;
use rand::Rng as _;

use crate::numerics::Rng;

/// Tolerance for classifying a root modulus as exactly one.
pub const UNIT_CIRCLE_TOL: f64 = 1e-9;

/// Tolerance of the closed-form predicates (`|a| = 1`, purely real/imaginary).
pub const PREDICATE_TOL: f64 = 1e-12;

/// Roots closer than this are treated as a double root.
const DOUBLE_ROOT_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityQuery {
    pub a: f64,
    pub b: f64,
    /// `h·λ`, dimensionless.
    pub hlambda: Complex64,
}

impl StabilityQuery {
    pub fn new(a: f64, b: f64, hlambda: Complex64) -> Self {
        StabilityQuery { a, b, hlambda }
    }

    /// Combined linear coefficient `b + hλ` of the current state.
    pub fn coefficient(&self) -> Complex64 {
        self.hlambda + self.b
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.hlambda.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// Distinct roots on the unit circle.
    Stable,
    /// A double root on the unit circle: solutions grow linearly.
    MarginallyStable,
    Unstable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    pub roots: [Complex64; 2],
    pub moduli: [f64; 2],
    pub fb_stable: bool,
    pub verdict: Verdict,
    pub abs_a: f64,
    pub abs_coefficient: f64,
}

impl StabilityReport {
    pub fn max_modulus(&self) -> f64 {
        self.moduli[0].max(self.moduli[1])
    }

    /// Largest distance of a root modulus from one.
    pub fn boundary_distance(&self) -> f64 {
        self.moduli
            .iter()
            .map(|m| (m - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Roots of `r² − c r − a = 0`, computed without cancellation.
fn quadratic_roots(c: Complex64, a: Complex64) -> [Complex64; 2] {
    let disc = (c * c + a * 4.0).sqrt();
    // Pick the branch that adds magnitudes, then use r₁r₂ = −a for the other root.
    let s = if (c.conj() * disc).re < 0.0 { -disc } else { disc };
    let r1 = (c + s) * 0.5;
    let r2 = if r1.norm() == 0.0 { Complex64::new(0.0, 0.0) } else { -a / r1 };
    [r1, r2]
}

fn classify(roots: &[Complex64; 2]) -> (bool, Verdict) {
    let on_circle = roots
        .iter()
        .all(|r| (r.norm() - 1.0).abs() <= UNIT_CIRCLE_TOL);
    let verdict = if !on_circle {
        Verdict::Unstable
    } else if (roots[0] - roots[1]).norm() <= DOUBLE_ROOT_TOL {
        Verdict::MarginallyStable
    } else {
        Verdict::Stable
    };
    (on_circle, verdict)
}

/// Characteristic roots of the two-term recurrence and the forward-backward verdict.
pub fn char_roots(q: &StabilityQuery) -> StabilityReport {
    let c = q.coefficient();
    let roots = quadratic_roots(c, Complex64::new(q.a, 0.0));
    let (fb_stable, verdict) = classify(&roots);
    StabilityReport {
        roots,
        moduli: [roots[0].norm(), roots[1].norm()],
        fb_stable,
        verdict,
        abs_a: q.a.abs(),
        abs_coefficient: c.norm(),
    }
}

/// Closed-form forward-backward stability conditions.
///
/// `|a| = 1` is necessary since `|r₁ r₂| = |a|`. With `c = b + hλ`:
/// for `a = 1` the roots are `e^{iθ}, −e^{−iθ}` so `c = 2i sin θ` must be
/// purely imaginary; for `a = −1` they are `e^{±iθ}` so `c = 2 cos θ` must be
/// real. Either way `|c| ≤ 2`. With `b = 0` this says `hλ` is imaginary
/// (midpoint); with the leapfrog coefficients `a = −1, b = 2` it says `hλ` is
/// real and in `[−4, 0]`.
pub fn stability_condition(q: &StabilityQuery) -> bool {
    let c = q.coefficient();
    if c.norm() > 2.0 + PREDICATE_TOL {
        return false;
    }
    if (q.a - 1.0).abs() <= PREDICATE_TOL {
        c.re.abs() <= PREDICATE_TOL
    } else if (q.a + 1.0).abs() <= PREDICATE_TOL {
        c.im.abs() <= PREDICATE_TOL
    } else {
        false
    }
}

/// Runs the scalar recurrence forward and returns `max_j |p_j| / max(|p₀|, |p₁|)`.
/// Overflow is reported as `+∞`.
pub fn empirical_iterate(q: &StabilityQuery, n_steps: usize, p0: Complex64, p1: Complex64) -> f64 {
    let c = q.coefficient();
    iterate_growth(n_steps, p0, p1, |prev, cur| prev * q.a + cur * c)
}

/// Growth of the reconstruction running the recurrence backwards,
/// `p_{j-1} = (p_{j+1} − c p_j) / a`, started from `(p₁, p₀)`.
pub fn empirical_iterate_backward(
    q: &StabilityQuery,
    n_steps: usize,
    p0: Complex64,
    p1: Complex64,
) -> f64 {
    if q.a == 0.0 {
        return f64::INFINITY;
    }
    let c = q.coefficient();
    iterate_growth(n_steps, p1, p0, |next, cur| (next - cur * c) / q.a)
}

fn iterate_growth(
    n_steps: usize,
    first: Complex64,
    second: Complex64,
    rule: impl Fn(Complex64, Complex64) -> Complex64,
) -> f64 {
    let start = first.norm().max(second.norm());
    if start == 0.0 {
        return 1.0;
    }
    let (mut older, mut newer) = (first, second);
    let mut peak = start;
    for _ in 2..n_steps.max(2) {
        let next = rule(older, newer);
        let m = next.norm();
        if !m.is_finite() || m > 1e300 {
            return f64::INFINITY;
        }
        peak = peak.max(m);
        older = newer;
        newer = next;
    }
    peak / start
}

/// Empirical forward-backward verdict: both directions must stay within
/// `poly_factor · n_steps` (polynomial growth allows double roots).
pub fn empirical_fb_stable(q: &StabilityQuery, n_steps: usize, poly_factor: f64) -> bool {
    let (p0, p1) = (Complex64::new(1.0, 0.0), Complex64::new(0.3, 0.7));
    let bound = poly_factor * n_steps as f64;
    empirical_iterate(q, n_steps, p0, p1) <= bound
        && empirical_iterate_backward(q, n_steps, p0, p1) <= bound
}

/// One row of a stability sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridRow {
    pub query: StabilityQuery,
    pub report: StabilityReport,
    pub condition: bool,
    pub empirical: bool,
}

impl GridRow {
    /// Points strictly off the circle but within `band` of it are ambiguous
    /// for a finite-length iteration.
    pub fn near_boundary(&self, band: f64) -> bool {
        let d = self.report.boundary_distance();
        d > UNIT_CIRCLE_TOL && d <= band
    }

    pub fn all_agree(&self) -> bool {
        self.report.fb_stable == self.condition && self.condition == self.empirical
    }
}

pub fn sweep(
    a_values: &[f64],
    b_values: &[f64],
    hlambda_values: &[Complex64],
    n_steps: usize,
) -> Vec<GridRow> {
    let mut rows = Vec::with_capacity(a_values.len() * b_values.len() * hlambda_values.len());
    for &a in a_values {
        for &b in b_values {
            for &hl in hlambda_values {
                let query = StabilityQuery::new(a, b, hl);
                rows.push(GridRow {
                    query,
                    report: char_roots(&query),
                    condition: stability_condition(&query),
                    empirical: empirical_fb_stable(&query, n_steps, 10.0),
                });
            }
        }
    }
    rows
}

/// Iterations per direction in [`standard_grid`]; long enough that a root
/// modulus 1e-3 off the circle outgrows the polynomial bound.
pub const STANDARD_GRID_STEPS: usize = 20_000;

/// 10 × 8 × 100 sweep over `a`, `b` and a complex `hλ` lattice that contains
/// both axes.
pub fn standard_grid() -> Vec<GridRow> {
    let a = [-2.0, -1.5, -1.0, -0.9, -0.5, 0.5, 0.9, 1.0, 1.5, 2.0];
    let b = [-3.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0];
    let re = [-4.0, -3.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0];
    let im = [-3.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0];
    let hl: Vec<Complex64> = re
        .iter()
        .flat_map(|&x| im.iter().map(move |&y| Complex64::new(x, y)))
        .collect();
    sweep(&a, &b, &hl, STANDARD_GRID_STEPS)
}

pub const GRID_CSV_HEADER: &str = "a,b,re_hlambda,im_hlambda,mod_r1,mod_r2,fb_stable";

/// Sweep rows as CSV with the fixed header.
pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from(GRID_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let q = r.query;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            q.a,
            q.b,
            q.hlambda.re,
            q.hlambda.im,
            r.report.moduli[0],
            r.report.moduli[1],
            r.report.fb_stable
        );
    }
    out
}

/// Draws `a ~ ±1 + ½·U(−1, 1)` with the sign chosen by a fair coin.
/// Zero mean, variance `1 + 1/12`.
pub fn sample_a_coefficient(rng: &mut Rng) -> f64 {
    let centre = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    centre + 0.5 * rng.gen_range(-1.0..1.0)
}

/// Analytic variance of [`sample_a_coefficient`].
pub const A_VARIANCE_ANALYTIC: f64 = 13.0 / 12.0;

/// Commonly quoted variance of `a` for the same sampler.
pub const A_VARIANCE_ASSERTED: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentsConfig {
    pub n_trials: usize,
    pub n_layers: usize,
    pub hlambda: f64,
    /// Means of the initial pair; each trial draws `p ± init_spread·U(−1, 1)`.
    pub p0: f64,
    pub p1: f64,
    pub init_spread: f64,
    /// Fixed `(p_{j-1}, p_j)` for the single-step variance check.
    pub fixed_prev: f64,
    pub fixed_cur: f64,
}

impl Default for MomentsConfig {
    fn default() -> Self {
        MomentsConfig {
            n_trials: 1_000_000,
            n_layers: 8,
            hlambda: -0.1,
            p0: 1.0,
            p1: 1.0,
            init_spread: 0.5,
            fixed_prev: 1.0,
            fixed_cur: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentsReport {
    /// Sample mean of `p_j` across trials, `j = 0..n_layers`.
    pub mean_trace: Vec<f64>,
    /// Standard error of each entry of `mean_trace`.
    pub mean_stderr: Vec<f64>,
    /// `(1 + hλ)^{j-1} p₁`, the forward-Euler expectation.
    pub euler_trace: Vec<f64>,
    /// z-score of `mean(p_{j+1} − (1 + hλ) p_j)` for `j = 1..n_layers-1`.
    pub step_z: Vec<f64>,
    /// Empirical variance of one step from the fixed pair.
    pub var_step_empirical: f64,
    /// `Var(a)·(p_{j-1} − p_j)²` with `Var(a)` measured on an independent batch.
    pub var_step_predicted: f64,
    pub a_variance: f64,
    pub a_mean: f64,
}

impl MomentsReport {
    pub fn var_step_rel_err(&self) -> f64 {
        if self.var_step_predicted == 0.0 {
            self.var_step_empirical.abs()
        } else {
            (self.var_step_empirical - self.var_step_predicted).abs() / self.var_step_predicted
        }
    }

    /// Largest |z| of the mean trace against the forward-Euler expectation.
    /// Entries with no sampling spread count as zero when they match to rounding.
    pub fn max_trace_z(&self) -> f64 {
        self.mean_trace
            .iter()
            .zip(&self.euler_trace)
            .zip(&self.mean_stderr)
            .map(|((m, e), s)| {
                let dev = ((m - e).abs() - 1e-12 * e.abs()).max(0.0);
                if dev == 0.0 {
                    0.0
                } else {
                    dev / s
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn max_step_z(&self) -> f64 {
        self.step_z.iter().map(|z| z.abs()).fold(0.0, f64::max)
    }
}

/// Welford running mean and variance.
#[derive(Debug, Clone, Copy, Default)]
struct Running {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Running {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.n;
        self.m2 += delta * (x - self.mean);
    }

    fn var(&self) -> f64 {
        self.m2 / (self.n - 1.0)
    }

    /// `mean / stderr`, zero when the samples do not vary.
    fn z(&self) -> f64 {
        let se = (self.var() / self.n).sqrt();
        if se == 0.0 {
            0.0
        } else {
            self.mean / se
        }
    }
}

/// One step of the midpoint-(a) recurrence for `f(p) = λp`.
fn midpoint_a_scalar(a: f64, prev: f64, cur: f64, hlambda: f64) -> f64 {
    a * prev + (1.0 - a) * cur + hlambda * cur
}

/// Monte Carlo check of the midpoint-(a) recurrence with random coefficients.
pub fn midpoint_a_moments(cfg: &MomentsConfig, rng: &mut Rng) -> MomentsReport {
    assert!(cfg.n_trials >= 2 && cfg.n_layers >= 2);
    let growth = 1.0 + cfg.hlambda;
    let layers = cfg.n_layers;
    let mut states = vec![Running::default(); layers];
    let mut steps = vec![Running::default(); layers];
    let mut trace = vec![0.0; layers];
    for _ in 0..cfg.n_trials {
        trace[0] = cfg.p0 + cfg.init_spread * rng.gen_range(-1.0..1.0);
        trace[1] = cfg.p1 + cfg.init_spread * rng.gen_range(-1.0..1.0);
        for j in 1..layers - 1 {
            let a = sample_a_coefficient(rng);
            trace[j + 1] = midpoint_a_scalar(a, trace[j - 1], trace[j], cfg.hlambda);
            steps[j].push(trace[j + 1] - growth * trace[j]);
        }
        for (acc, &p) in states.iter_mut().zip(&trace) {
            acc.push(p);
        }
    }
    let mean_trace = states.iter().map(|r| r.mean).collect();
    let mean_stderr = states.iter().map(|r| (r.var() / r.n).sqrt()).collect();
    let euler_trace = (0..layers)
        .map(|j| if j == 0 { cfg.p0 } else { growth.powi(j as i32 - 1) * cfg.p1 })
        .collect();
    let step_z = steps[1..layers - 1].iter().map(Running::z).collect();

    // Single step from a fixed pair.
    let diff = cfg.fixed_prev - cfg.fixed_cur;
    let mut single = Running::default();
    for _ in 0..cfg.n_trials {
        let a = sample_a_coefficient(rng);
        single.push(midpoint_a_scalar(a, cfg.fixed_prev, cfg.fixed_cur, cfg.hlambda));
    }
    let var_step_empirical = single.var();

    let mut coeff = Running::default();
    for _ in 0..cfg.n_trials {
        coeff.push(sample_a_coefficient(rng));
    }
    let (a_mean, a_variance) = (coeff.mean, coeff.var());

    MomentsReport {
        mean_trace,
        mean_stderr,
        euler_trace,
        step_z,
        var_step_empirical,
        var_step_predicted: a_variance * diff * diff,
        a_variance,
        a_mean,
    }
}

/// Linearized Hamiltonian update `p' = a p + α q`, `q' = b q + β p'`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianLinearQuery {
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianReport {
    /// `[[a, α], [aβ, b + αβ]]`, row-major.
    pub matrix: [[f64; 2]; 2],
    pub eigenvalues: [Complex64; 2],
    pub moduli: [f64; 2],
    pub det: f64,
    pub trace: f64,
    /// Both eigenvalue moduli within [`UNIT_CIRCLE_TOL`] of one.
    pub modulus_stable: bool,
    /// `det = 1` and `|trace| ≤ 2`, or `det = −1` and `trace = 0`.
    pub det_trace_stable: bool,
    /// `|det| = 1` and `|trace| ≤ 2`, ignoring the sign of the determinant.
    pub abs_det_trace_stable: bool,
    pub distinct: bool,
}

pub fn hamiltonian_linear_stability(q: &HamiltonianLinearQuery) -> HamiltonianReport {
    let matrix = [[q.a, q.alpha], [q.a * q.beta, q.b + q.alpha * q.beta]];
    let det = matrix[0][0] * matrix[1][1] - matrix[0][1] * matrix[1][0];
    let trace = matrix[0][0] + matrix[1][1];
    // λ² − tr λ + det = 0
    let eigenvalues = quadratic_roots(Complex64::new(trace, 0.0), Complex64::new(-det, 0.0));
    let moduli = [eigenvalues[0].norm(), eigenvalues[1].norm()];
    let modulus_stable = moduli.iter().all(|m| (m - 1.0).abs() <= UNIT_CIRCLE_TOL);
    let det_trace_stable = ((det - 1.0).abs() <= PREDICATE_TOL && trace.abs() <= 2.0 + PREDICATE_TOL)
        || ((det + 1.0).abs() <= PREDICATE_TOL && trace.abs() <= PREDICATE_TOL);
    let abs_det_trace_stable =
        (det.abs() - 1.0).abs() <= PREDICATE_TOL && trace.abs() <= 2.0 + PREDICATE_TOL;
    let distinct = (trace * trace - 4.0 * det).abs() > 1e-9;
    HamiltonianReport {
        matrix,
        eigenvalues,
        moduli,
        det,
        trace,
        modulus_stable,
        det_trace_stable,
        abs_det_trace_stable,
        distinct,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn unit_coefficient_no_force_has_roots_plus_minus_one() {
        let r = char_roots(&StabilityQuery::new(1.0, 0.0, c(0.0, 0.0)));
        let mut re: Vec<f64> = r.roots.iter().map(|z| z.re).collect();
        re.sort_by(f64::total_cmp);
        assert!((re[0] + 1.0).abs() < 1e-15 && (re[1] - 1.0).abs() < 1e-15);
        assert!(r.fb_stable);
        assert_eq!(r.verdict, Verdict::Stable);
    }

    #[test]
    fn imaginary_hlambda_keeps_roots_on_circle() {
        let r = char_roots(&StabilityQuery::new(1.0, 0.0, c(0.0, 0.5)));
        assert!(r.moduli.iter().all(|m| (m - 1.0).abs() < 1e-12));
        assert!(r.fb_stable);
    }

    #[test]
    fn real_hlambda_with_unit_a_is_unstable() {
        let r = char_roots(&StabilityQuery::new(1.0, 0.0, c(0.1, 0.0)));
        let mut m = r.moduli;
        m.sort_by(f64::total_cmp);
        // (0.1 ± sqrt(4.01)) / 2
        assert!((m[1] - 1.051_249_219_725_04).abs() < 1e-12);
        assert!((m[0] - 0.951_249_219_725_04).abs() < 1e-12);
        assert!(!r.fb_stable);
    }

    #[test]
    fn boundary_condition_cases() {
        assert!(stability_condition(&StabilityQuery::new(1.0, 0.0, c(0.0, 2.0))));
        assert!(!stability_condition(&StabilityQuery::new(1.0, 0.0, c(0.0, 2.5))));
        for hl in [c(0.0, 0.0), c(0.0, 1.0), c(-1.0, 0.0)] {
            assert!(!stability_condition(&StabilityQuery::new(0.5, 0.0, hl)));
        }
        assert!(stability_condition(&StabilityQuery::new(-1.0, 0.0, c(-0.5, 0.0))));
        let boundary = char_roots(&StabilityQuery::new(1.0, 0.0, c(0.0, 2.0)));
        assert_eq!(boundary.verdict, Verdict::MarginallyStable);
    }

    #[test]
    fn leapfrog_coefficients_need_real_nonpositive_hlambda() {
        let lf = |hl| stability_condition(&StabilityQuery::new(-1.0, 2.0, hl));
        assert!(lf(c(-0.5, 0.0)));
        assert!(lf(c(-4.0, 0.0)));
        assert!(!lf(c(0.5, 0.0)));
        assert!(!lf(c(-4.5, 0.0)));
        assert!(!lf(c(-1.0, 0.1)));
    }

    #[test]
    fn constant_solution_has_unit_growth() {
        let g = empirical_iterate(&StabilityQuery::new(1.0, 0.0, c(0.0, 0.0)), 50, c(1.0, 0.0), c(1.0, 0.0));
        assert_eq!(g, 1.0);
    }

    #[test]
    fn real_hlambda_grows_exponentially() {
        let g = empirical_iterate(&StabilityQuery::new(1.0, 0.0, c(0.1, 0.0)), 200, c(1.0, 0.0), c(1.0, 0.0));
        assert!(g > 10.0, "growth {g}");
    }

    #[test]
    fn overflow_reports_infinite_growth() {
        let g = empirical_iterate(&StabilityQuery::new(1.0, 5.0, c(0.0, 0.0)), 2000, c(1.0, 0.0), c(1.0, 0.0));
        assert!(g.is_infinite());
    }

    #[test]
    fn roots_satisfy_vieta_identities() {
        let mut rng = seeded_rng(11);
        for _ in 0..1000 {
            let q = StabilityQuery::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-3.0..3.0),
                c(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)),
            );
            let r = char_roots(&q);
            let sum = r.roots[0] + r.roots[1];
            let prod = r.roots[0] * r.roots[1];
            assert!((sum - q.coefficient()).norm() <= 1e-12 * (1.0 + q.coefficient().norm()));
            assert!((prod + q.a).norm() <= 1e-12 * (1.0 + q.a.abs()));
        }
    }

    #[test]
    fn condition_implies_unit_moduli() {
        let mut rng = seeded_rng(12);
        for _ in 0..2000 {
            let a = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let b = rng.gen_range(-2.0..2.0);
            let t = rng.gen_range(-2.0..2.0);
            // a = 1 needs b + hλ imaginary, a = −1 needs it real
            let hl = if a == 1.0 { c(-b, t) } else { c(t - b, 0.0) };
            let q = StabilityQuery::new(a, b, hl);
            if stability_condition(&q) {
                let r = char_roots(&q);
                assert!(r.moduli.iter().all(|m| (m - 1.0).abs() <= UNIT_CIRCLE_TOL), "{q:?} {r:?}");
            }
        }
    }

    #[test]
    fn single_step_variance_vanishes_for_equal_states() {
        let cfg = MomentsConfig {
            n_trials: 1000,
            fixed_prev: 0.7,
            fixed_cur: 0.7,
            ..MomentsConfig::default()
        };
        let r = midpoint_a_moments(&cfg, &mut seeded_rng(1));
        assert!(r.var_step_empirical.abs() < 1e-24);
    }

    #[test]
    fn zero_hlambda_mean_trace_stays_put() {
        let cfg = MomentsConfig {
            n_trials: 20_000,
            hlambda: 0.0,
            ..MomentsConfig::default()
        };
        let r = midpoint_a_moments(&cfg, &mut seeded_rng(2));
        assert!(r.max_trace_z() <= 3.0, "{:?}", r);
    }

    #[test]
    fn coefficient_sampler_variance() {
        let mut rng = seeded_rng(3);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_a_coefficient(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - A_VARIANCE_ANALYTIC).abs() < 0.01, "{var}");
    }

    #[test]
    fn hamiltonian_examples() {
        let stable = hamiltonian_linear_stability(&HamiltonianLinearQuery {
            a: 1.0,
            b: 1.0,
            alpha: 1.0,
            beta: -1.0,
        });
        assert_eq!(stable.det, 1.0);
        assert_eq!(stable.trace, 1.0);
        assert!(stable.det_trace_stable && stable.modulus_stable);

        let unstable = hamiltonian_linear_stability(&HamiltonianLinearQuery {
            a: 1.0,
            b: 1.0,
            alpha: 2.0,
            beta: 2.0,
        });
        assert_eq!(unstable.trace, 6.0);
        assert!(!unstable.det_trace_stable && !unstable.modulus_stable);

        let identity = hamiltonian_linear_stability(&HamiltonianLinearQuery {
            a: 1.0,
            b: 1.0,
            alpha: 0.0,
            beta: 0.0,
        });
        assert!(identity.eigenvalues.iter().all(|e| (e - c(1.0, 0.0)).norm() < 1e-15));
        assert!(identity.modulus_stable && identity.det_trace_stable && !identity.distinct);
    }

    #[test]
    fn negative_determinant_is_stable_only_at_zero_trace() {
        let q = HamiltonianLinearQuery {
            a: 1.0,
            b: -1.0,
            alpha: 1.0,
            beta: 1.0,
        };
        let r = hamiltonian_linear_stability(&q);
        assert_eq!(r.det, -1.0);
        assert!(r.abs_det_trace_stable);
        assert!(!r.det_trace_stable && !r.modulus_stable);

        let r0 = hamiltonian_linear_stability(&HamiltonianLinearQuery { beta: 0.0, ..q });
        assert!(r0.det_trace_stable && r0.modulus_stable);
    }

    #[test]
    fn csv_header_and_rows() {
        let rows = sweep(&[1.0], &[0.0], &[c(0.0, 0.5), c(0.5, 0.0)], 100);
        let csv = grid_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], GRID_CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].ends_with(",true"));
        assert!(lines[2].ends_with(",false"));
    }
}
