//! Exact and Monte Carlo verification of the inequalities, the UMD lower
//! bound prober and the divergence demonstration.
//!
//! Every bound check is one-sided against its adverse endpoint: exact values
//! on trees, the upper end of a 95% confidence interval for Monte Carlo
//! estimates. Reports are plain data and serialize to JSON.

mod bounds;
mod divergence;
mod probe;

pub use bounds::*;
pub use divergence::*;
pub use probe::*;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::DecomposeError;
use crate::finprob::FinprobError;
use crate::generators::{GenError, GridModel};
use crate::process::{LabeledPath, ProcessError};
use crate::stochcalc::CalcError;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Threshold of the ensemble martingale z-test.
pub const Z_MARTINGALE: f64 = 4.0;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("lambda grid is empty or contains a non-positive value")]
    LambdaGrid,
    #[error("exponent p must be greater than 1, got {0}")]
    Exponent(f64),
    #[error("no value of beta supplied for a space that is not Hilbert with p = 2")]
    BetaUnavailable,
    #[error("transform norm K unavailable: supply it for non-Hilbert spaces or p ≠ 2")]
    TransformNormUnavailable,
    #[error("transform coefficients must lie in [−1, 1]")]
    NotContraction,
    #[error("probe depth {depth} with dimension {dim} exceeds the enumeration cap")]
    ProbeTooLarge { depth: usize, dim: usize },
    #[error("probe shapes must be non-decreasing in dimension and depth")]
    ProbeShapes,
    #[error("probed bound {bound} exceeds the sanity ceiling {ceiling}")]
    CeilingExceeded { bound: f64, ceiling: f64 },
    #[error("divergence demo needs the sup norm")]
    DivergenceNorm,
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
    #[error(transparent)]
    Calc(#[from] CalcError),
    #[error(transparent)]
    Finprob(#[from] FinprobError),
    #[error(transparent)]
    Process(#[from] ProcessError),
}

/// `n` i.i.d. paths of a grid model. Path `i` is drawn from stream `i` of
/// the seed, so any subset of paths can be regenerated independently.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    model: GridModel,
    n: usize,
    seed: u64,
}

impl Ensemble {
    pub fn new(model: GridModel, n: usize, seed: u64) -> Result<Self, VerifyError> {
        if n == 0 {
            return Err(VerifyError::EmptyEnsemble);
        }
        Ok(Self { model, n, seed })
    }

    pub fn model(&self) -> &GridModel {
        &self.model
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self, i: usize) -> Result<LabeledPath, VerifyError> {
        Ok(self.model.sample_seeded(self.seed, i as u64)?)
    }

    /// Applies `f` to every path in parallel; results keep path order.
    pub fn map<T, F>(&self, f: F) -> Result<Vec<T>, VerifyError>
    where
        T: Send,
        F: Fn(&LabeledPath) -> Result<T, VerifyError> + Sync + Send,
    {
        (0..self.n).into_par_iter().map(|i| f(&self.path(i)?)).collect()
    }

    /// Tail probability of a path statistic.
    pub fn estimate_tail<F>(&self, statistic: F, level: f64) -> Result<TailEstimate, VerifyError>
    where
        F: Fn(&LabeledPath) -> f64 + Sync + Send,
    {
        let values = self.map(|p| Ok(statistic(p)))?;
        estimate_tail(&values, level)
    }
}

/// Two-sided 95% Wilson score interval for `k` successes in `n` trials.
pub fn wilson(k: usize, n: usize) -> (f64, f64) {
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = Z95 / denom * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt();
    let lo = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if k == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

/// Estimated probability with a confidence interval. Exact estimates carry
/// a degenerate interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub p: f64,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub exact: bool,
}

/// `P̂(statistic > level)` with its Wilson interval.
pub fn estimate_tail(values: &[f64], level: f64) -> Result<TailEstimate, VerifyError> {
    if values.is_empty() {
        return Err(VerifyError::EmptyEnsemble);
    }
    let k = values.iter().filter(|v| **v > level).count();
    let (lo, hi) = wilson(k, values.len());
    Ok(TailEstimate { p: k as f64 / values.len() as f64, lo, hi, n: values.len(), exact: false })
}

/// Exact `P(statistic > level)` over weighted atoms.
pub fn exact_tail(weighted: &[(f64, f64)], level: f64) -> TailEstimate {
    let p: f64 = weighted.iter().filter(|(_, v)| *v > level).map(|(w, _)| w).sum();
    TailEstimate { p, lo: p, hi: p, n: weighted.len(), exact: true }
}

/// Sample mean with a 95% normal-approximation interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    /// Standard error of the mean.
    pub se: f64,
    pub n: usize,
}

impl MeanEstimate {
    /// Two-pass mean and standard error, summed in slice order.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, se, n }
    }

    pub fn lo(&self) -> f64 {
        self.mean - Z95 * self.se
    }

    pub fn hi(&self) -> f64 {
        self.mean + Z95 * self.se
    }

    /// `mean / se`, taken as 0 for an exactly constant zero sample.
    pub fn z(&self) -> f64 {
        if self.se > 0.0 {
            self.mean / self.se
        } else if self.mean == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(self.mean)
        }
    }
}

/// `sup_λ λ P(S > λ)` over weighted atoms, computed exactly: the supremum
/// is approached as `λ ↑ s` for an attained value `s`, giving
/// `max_s s·P(S ≥ s)`. Returns the supremum and the maximizing `s`.
pub fn exact_weak_l1(weighted: &[(f64, f64)]) -> (f64, f64) {
    let mut sorted: Vec<(f64, f64)> = weighted.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut best = (0.0, 0.0);
    let mut mass = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].1;
        while i < sorted.len() && sorted[i].1 == s {
            mass += sorted[i].0;
            i += 1;
        }
        if s > 0.0 && s * mass > best.0 {
            best = (s * mass, s);
        }
    }
    best
}

/// `points` logarithmically spaced levels spanning `decades` decades,
/// centred on `center` (or on 1 when `center` is not positive).
pub fn log_grid(center: f64, points: usize, decades: f64) -> Vec<f64> {
    let c = if center > 0.0 && center.is_finite() { center } else { 1.0 };
    if points == 1 {
        return vec![c];
    }
    let lo = c.log10() - decades / 2.0;
    (0..points)
        .map(|i| 10f64.powf(lo + decades * i as f64 / (points - 1) as f64))
        .collect()
}

/// Default λ grid: 40 points over four decades.
pub fn default_lambda_grid(expected_norm: f64) -> Vec<f64> {
    log_grid(expected_norm, 40, 4.0)
}

pub(crate) fn check_lambdas(lambdas: &[f64]) -> Result<(), VerifyError> {
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(VerifyError::LambdaGrid);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    MonteCarlo,
}

/// Kind of comparison a record makes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// The adverse endpoint of the estimate must not exceed the bound.
    AtMost,
    /// `|estimate|` must not exceed the tolerance stored in `bound`.
    Zero,
    /// The estimate must be at least the bound.
    AtLeast,
}

/// One verified statement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    /// The inequality in words, with its constant.
    pub statement: String,
    pub relation: Relation,
    pub method: Method,
    pub estimate: f64,
    /// Confidence interval `[lo, hi]` of the estimate (Monte Carlo only).
    pub ci: Option<[f64; 2]>,
    pub bound: f64,
    /// `bound − adverse endpoint` (for `AtLeast`, `estimate − bound`).
    pub slack: f64,
    pub pass: bool,
    /// The bound is `C·0` and the left side is exactly zero.
    pub vacuous: bool,
    pub samples: usize,
    /// λ of the worst case, for checks swept over a λ grid.
    pub lambda: Option<f64>,
    pub note: Option<String>,
}

impl CheckRecord {
    fn base(name: &str, statement: &str, relation: Relation, method: Method) -> Self {
        Self {
            name: name.to_string(),
            statement: statement.to_string(),
            relation,
            method,
            estimate: 0.0,
            ci: None,
            bound: 0.0,
            slack: 0.0,
            pass: true,
            vacuous: false,
            samples: 0,
            lambda: None,
            note: None,
        }
    }

    /// Exact `value ≤ bound`.
    pub fn exact(name: &str, statement: &str, value: f64, bound: f64, samples: usize) -> Self {
        let mut r = Self::base(name, statement, Relation::AtMost, Method::Exact);
        r.estimate = value;
        r.bound = bound;
        r.samples = samples;
        r.settle(value);
        r
    }

    /// Monte Carlo `estimate ≤ bound`, judged on the interval's upper end.
    pub fn upper(name: &str, statement: &str, estimate: f64, ci: (f64, f64), bound: f64, samples: usize) -> Self {
        let mut r = Self::base(name, statement, Relation::AtMost, Method::MonteCarlo);
        r.estimate = estimate;
        r.ci = Some([ci.0, ci.1]);
        r.bound = bound;
        r.samples = samples;
        r.settle(ci.1);
        r
    }

    /// `|estimate| ≤ tolerance`.
    pub fn zero(name: &str, statement: &str, method: Method, estimate: f64, tolerance: f64, samples: usize) -> Self {
        let mut r = Self::base(name, statement, Relation::Zero, method);
        r.estimate = estimate;
        r.bound = tolerance;
        r.samples = samples;
        r.slack = tolerance - estimate.abs();
        r.pass = estimate.abs() <= tolerance;
        r
    }

    /// `estimate ≥ bound`.
    pub fn at_least(name: &str, statement: &str, method: Method, estimate: f64, bound: f64, samples: usize) -> Self {
        let mut r = Self::base(name, statement, Relation::AtLeast, method);
        r.estimate = estimate;
        r.bound = bound;
        r.samples = samples;
        r.slack = estimate - bound;
        r.pass = estimate >= bound;
        r
    }

    /// A pass/fail fact with no numeric bound.
    pub fn holds(name: &str, statement: &str, method: Method, pass: bool, samples: usize) -> Self {
        let mut r = Self::base(name, statement, Relation::AtLeast, method);
        r.estimate = if pass { 1.0 } else { 0.0 };
        r.bound = 1.0;
        r.slack = r.estimate - 1.0;
        r.pass = pass;
        r.samples = samples;
        r
    }

    fn settle(&mut self, adverse: f64) {
        if self.bound == 0.0 {
            // LHS ≤ C·0 requires the left side to vanish
            self.vacuous = self.estimate == 0.0;
            self.pass = self.vacuous;
            self.slack = -self.estimate;
        } else {
            self.slack = self.bound - adverse;
            self.pass = adverse <= self.bound;
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    /// Slack relative to the bound; failures rank lowest, vacuous passes
    /// highest.
    fn rank(&self) -> f64 {
        if !self.pass {
            return f64::NEG_INFINITY;
        }
        if self.vacuous {
            return f64::INFINITY;
        }
        if self.bound.abs() > 0.0 {
            self.slack / self.bound.abs()
        } else {
            self.slack
        }
    }
}

/// The record with the smallest relative slack (any failure wins), so a
/// sweep over λ or levels reports its worst case. The first record wins
/// ties.
pub fn worst_case(records: impl IntoIterator<Item = CheckRecord>) -> Option<CheckRecord> {
    let mut worst: Option<CheckRecord> = None;
    for r in records {
        let replace = match &worst {
            None => true,
            Some(w) => r.rank() < w.rank(),
        };
        if replace {
            worst = Some(r);
        }
    }
    worst
}

/// Records of one analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub analysis: String,
    pub checks: Vec<CheckRecord>,
}

impl VerificationReport {
    pub fn new(analysis: impl Into<String>) -> Self {
        Self { analysis: analysis.into(), checks: Vec::new() }
    }

    pub fn push(&mut self, record: CheckRecord) {
        self.checks.push(record);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRecord> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&CheckRecord> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Combines reports of the same analysis on several inputs, keeping the
    /// worst record per check name in first-seen order. `label(i)` is
    /// appended to the note of a record taken from report `i`.
    pub fn merge_worst(
        analysis: impl Into<String>,
        reports: &[VerificationReport],
        label: impl Fn(usize) -> String,
    ) -> VerificationReport {
        let mut names: Vec<&str> = Vec::new();
        for r in reports {
            for c in &r.checks {
                if !names.contains(&c.name.as_str()) {
                    names.push(&c.name);
                }
            }
        }
        let mut out = VerificationReport::new(analysis);
        for name in names {
            let tagged = reports.iter().enumerate().flat_map(|(i, r)| {
                r.checks.iter().filter(|c| c.name == name).map(move |c| (i, c))
            });
            let mut worst: Option<(usize, &CheckRecord)> = None;
            for (i, c) in tagged {
                if worst.is_none_or(|(_, w)| c.rank() < w.rank()) {
                    worst = Some((i, c));
                }
            }
            if let Some((i, c)) = worst {
                let mut c = c.clone();
                let inputs: usize = reports.iter().flat_map(|r| r.checks.iter()).filter(|x| x.name == name).count();
                let tag = format!("{} of {inputs} inputs", label(i));
                c.note = Some(match c.note {
                    Some(n) => format!("{n}; worst at {tag}"),
                    None => format!("worst at {tag}"),
                });
                out.push(c);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::generators::{gen_paley_walsh, ContinuousDriver, Direction, PaleyWalsh, Volatility};
    use crate::process::TimeGrid;
    use crate::space::NormedSpace;

    #[test]
    fn wilson_rule_of_three_at_one_hundred() {
        let values = vec![0.0; 100];
        let t = estimate_tail(&values, 0.5).unwrap();
        assert_eq!(t.p, 0.0);
        assert_eq!(t.lo, 0.0);
        assert!(t.hi <= 3.7 / 100.0, "{}", t.hi);
    }

    #[test]
    fn wilson_matches_closed_form() {
        // k = 30, n = 100: centre (0.3 + z²/200)/(1 + z²/100)
        let (lo, hi) = wilson(30, 100);
        let z2 = Z95 * Z95;
        let c = (0.3 + z2 / 200.0) / (1.0 + z2 / 100.0);
        let h = Z95 / (1.0 + z2 / 100.0) * (0.21 / 100.0 + z2 / 40000.0f64).sqrt();
        assert!((lo - (c - h)).abs() < 1e-15);
        assert!((hi - (c + h)).abs() < 1e-15);
        assert!(lo < 0.3 && 0.3 < hi);
        assert_eq!(wilson(100, 100).1, 1.0);
    }

    #[test]
    fn empty_sample_is_an_error() {
        assert!(matches!(estimate_tail(&[], 1.0), Err(VerifyError::EmptyEnsemble)));
    }

    #[test]
    fn exact_weak_l1_by_hand() {
        // S = 1 w.p. 0.5, 3 w.p. 0.25, 4 w.p. 0.25: candidates 1·1, 3·0.5, 4·0.25
        let w = [(0.5, 1.0), (0.25, 3.0), (0.25, 4.0)];
        let (v, s) = exact_weak_l1(&w);
        assert_eq!((v, s), (1.5, 3.0));
        assert_eq!(exact_weak_l1(&[(1.0, 0.0)]).0, 0.0);
    }

    #[test]
    fn log_grid_spans_four_decades() {
        let g = default_lambda_grid(2.0);
        assert_eq!(g.len(), 40);
        assert!((g[0] - 0.02).abs() < 1e-15);
        assert!((g[39] - 200.0).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn vacuous_and_failing_records() {
        let r = CheckRecord::exact("x", "0 ≤ 0", 0.0, 0.0, 1);
        assert!(r.pass && r.vacuous);
        let r = CheckRecord::exact("x", "1 ≤ 0", 1.0, 0.0, 1);
        assert!(!r.pass && !r.vacuous);
        let recs = vec![
            CheckRecord::exact("a", "", 1.0, 2.0, 1),
            CheckRecord::exact("b", "", 0.0, 0.0, 1),
            CheckRecord::exact("c", "", 1.9, 2.0, 1),
        ];
        assert_eq!(worst_case(recs).unwrap().name, "c");
    }

    /// Rademacher walk of 10 steps: `P(max_k |S_k| ≥ 10)` is `2^{−9}` by
    /// enumeration; the ensemble estimate covers it.
    #[test]
    fn walk_tail_matches_enumeration() {
        let depth = 10;
        let pw = PaleyWalsh::constant_steps(&[1.0], depth);
        let m = gen_paley_walsh(&pw, &NormedSpace::scalar()).unwrap();
        let tree = m.tree();
        let weighted: Vec<(f64, f64)> =
            (0..tree.n_atoms()).map(|a| (tree.prob(a), m.running_sup(depth, a))).collect();
        let exact = exact_tail(&weighted, 9.5);
        assert_eq!(exact.p, 2.0 / 1024.0);

        let grid = Arc::new(TimeGrid::uniform(depth as f64, depth).unwrap());
        let cont = ContinuousDriver { volatility: Volatility::Constant(1.0), direction: Direction::Fixed(vec![1.0]) };
        let model = GridModel::new(grid, NormedSpace::scalar(), vec![0.0], Some(cont), None, None).unwrap();
        let ens = Ensemble::new(model, 20_000, 3).unwrap();
        let est = ens.estimate_tail(|p| p.values().sup(), 9.5).unwrap();
        assert!(est.lo <= exact.p && exact.p <= est.hi, "{est:?}");
    }

    /// Tree and Monte Carlo agree on `E|M_T|` for a Rademacher-driven model
    /// within four standard errors.
    #[test]
    fn tree_and_monte_carlo_agree() {
        let depth = 12;
        let pw = PaleyWalsh::constant_steps(&[0.5], depth);
        let m = gen_paley_walsh(&pw, &NormedSpace::scalar()).unwrap();
        let exact = m.expected_norm(depth);

        let grid = Arc::new(TimeGrid::uniform(1.0, depth).unwrap());
        let vol = 0.5 / (1.0f64 / depth as f64).sqrt();
        let cont = ContinuousDriver { volatility: Volatility::Constant(vol), direction: Direction::Fixed(vec![1.0]) };
        let model = GridModel::new(grid, NormedSpace::scalar(), vec![0.0], Some(cont), None, None).unwrap();
        let ens = Ensemble::new(model, 100_000, 17).unwrap();
        let values = ens.map(|p| Ok(p.values().norm_at(depth))).unwrap();
        let est = MeanEstimate::of(&values);
        assert!((est.mean - exact).abs() <= 4.0 * est.se, "{} vs {exact} (se {})", est.mean, est.se);
    }
}
