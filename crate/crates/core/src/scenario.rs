//! Scenario files: one TOML document describing the space, the backend,
//! the generators and the analyses to run, plus the runner that turns it
//! into a versioned JSON report.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decompose::canonical_discrete;
use crate::generators::{
    gen_random_tree_martingale_with, AccessibleSeries, ContinuousDriver, Direction, GenError, GridModel, LeafLaw,
    MarkLaw, PoissonModel, Volatility,
};
use crate::process::TimeGrid;
use crate::space::NormedSpace;
use crate::stochcalc::{TransformRule, TreeCoeffs};
use crate::verify::{
    check_canonical, check_divergence, check_gundy_bounds_grid, check_gundy_bounds_tree, check_lemmas_tree,
    check_lp_bound, check_lp_bound_tree, check_weak_l1_canonical, check_weak_l1_canonical_tree,
    check_weak_l1_transform_grid, check_weak_l1_transform_tree, divergence_demo, log_grid, probe_umd_nested,
    transform_norm, weak_l1_constant, weak_l1_curve, BetaSupply, CanonicalSample, CheckRecord, CurvePoint,
    DivergenceConfig, DivergenceRow, Ensemble, GundyConstants, Method, Part, ProbeResult, VerificationReport,
    VerifyError, MAX_PROBE_CELLS, MAX_PROBE_DEPTH,
};

/// Identifier of the report format.
pub const REPORT_SCHEMA: &str = "martlab.report/1";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{line}:{column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid scenario: {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("cannot serialize scenario: {0}")]
    Serialize(#[from] toml::ser::Error),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Tree,
    Grid,
}

/// Uniform time grid and initial value of the grid backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub horizon: f64,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<f64>>,
}

/// Seeded random tree martingales: tree `i` uses seed `seed + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    pub depth: usize,
    #[serde(default = "two_usize")]
    pub branching: usize,
    #[serde(default = "gaussian_leaves")]
    pub leaves: LeafLaw,
}

fn two_usize() -> usize {
    2
}

fn two() -> f64 {
    2.0
}

fn one() -> f64 {
    1.0
}

fn gaussian_leaves() -> LeafLaw {
    LeafLaw::Gaussian
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuousSpec {
    #[serde(default = "one")]
    pub weight: f64,
    pub volatility: Volatility,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoissonSpec {
    #[serde(default = "one")]
    pub weight: f64,
    pub intensity: f64,
    pub marks: MarkLaw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccessibleSpec {
    #[serde(default = "one")]
    pub weight: f64,
    pub times: Vec<f64>,
    pub marks: MarkLaw,
}

/// Components of the composite grid martingale; each is scaled by its
/// weight.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generators {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuous: Option<ContinuousSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poisson: Option<PoissonSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accessible: Option<AccessibleSpec>,
}

fn scale_marks(marks: &MarkLaw, w: f64) -> MarkLaw {
    match marks {
        MarkLaw::Finite { atoms, probs } => MarkLaw::Finite {
            atoms: atoms.iter().map(|a| a.iter().map(|x| w * x).collect()).collect(),
            probs: probs.clone(),
        },
        MarkLaw::Gaussian { mean, std } => {
            MarkLaw::Gaussian { mean: mean.iter().map(|x| w * x).collect(), std: w.abs() * std }
        }
    }
}

fn scale_volatility(v: &Volatility, w: f64) -> Volatility {
    match v {
        Volatility::Constant(c) => Volatility::Constant(w * c),
        Volatility::Piecewise { times, values } => {
            Volatility::Piecewise { times: times.clone(), values: values.iter().map(|x| w * x).collect() }
        }
    }
}

/// λ grid: explicit values or a logarithmic grid around `E‖M_t‖`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSpec {
    Explicit(Vec<f64>),
    Log { points: usize, decades: f64 },
}

impl Default for LambdaSpec {
    fn default() -> Self {
        LambdaSpec::Log { points: 40, decades: 4.0 }
    }
}

impl LambdaSpec {
    /// Grid values for a process with `E‖M_t‖ = center`. A zero center
    /// falls back to a grid around 1.
    pub fn resolve(&self, center: f64) -> Vec<f64> {
        match self {
            LambdaSpec::Explicit(v) => v.clone(),
            LambdaSpec::Log { points, decades } => {
                log_grid(if center > 0.0 { center } else { 1.0 }, *points, *decades)
            }
        }
    }

    fn validate(&self, field: &str) -> Result<(), ScenarioError> {
        match self {
            LambdaSpec::Explicit(v) if v.is_empty() => Err(invalid(field, "λ grid is empty")),
            LambdaSpec::Explicit(v) => match v.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
                Some(l) => Err(invalid(field, format!("λ must be positive and finite, got {l}"))),
                None => Ok(()),
            },
            LambdaSpec::Log { points, decades } if *points == 0 || !(*decades > 0.0) || !decades.is_finite() => {
                Err(invalid(field, "log grid needs points ≥ 1 and decades > 0"))
            }
            LambdaSpec::Log { .. } => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Analysis {
    Gundy {
        #[serde(default)]
        lambdas: LambdaSpec,
    },
    Canonical {
        #[serde(default = "default_extras")]
        extra_functionals: usize,
    },
    WeakL1 {
        part: Part,
        #[serde(default)]
        lambdas: LambdaSpec,
    },
    Transform {
        coefficients: TransformRule,
        #[serde(default = "two")]
        p: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<f64>,
        #[serde(default)]
        lambdas: LambdaSpec,
    },
    Lp {
        p: f64,
        #[serde(default = "accessible_part")]
        part: Part,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        beta: Option<BetaSupply>,
    },
    Probe {
        shapes: Vec<(usize, usize)>,
        budget: usize,
        #[serde(default = "two")]
        p: f64,
    },
    Divergence {
        depths: Vec<usize>,
        paths: usize,
        #[serde(default = "default_resolution")]
        resolution: usize,
        #[serde(default = "default_leak_budget")]
        leak_budget: f64,
    },
    Lemmas,
}

fn default_extras() -> usize {
    2
}

fn accessible_part() -> Part {
    Part::Accessible
}

fn default_resolution() -> usize {
    4
}

fn default_leak_budget() -> f64 {
    0.25
}

impl Analysis {
    pub fn name(&self) -> &'static str {
        match self {
            Analysis::Gundy { .. } => "gundy",
            Analysis::Canonical { .. } => "canonical",
            Analysis::WeakL1 { .. } => "weak_l1",
            Analysis::Transform { .. } => "transform",
            Analysis::Lp { .. } => "lp",
            Analysis::Probe { .. } => "probe",
            Analysis::Divergence { .. } => "divergence",
            Analysis::Lemmas => "lemmas",
        }
    }
}

/// Where the runner writes its files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Number of sample paths written as CSV by `simulate`.
    #[serde(default = "default_sample_paths")]
    pub sample_paths: usize,
}

fn default_sample_paths() -> usize {
    4
}

/// A complete scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    /// Ensemble size (grid) or number of seeded trees (tree).
    pub n: usize,
    pub backend: Backend,
    pub space: NormedSpace,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<TreeSpec>,
    #[serde(default)]
    pub generators: Generators,
    #[serde(default)]
    pub analyses: Vec<Analysis>,
    #[serde(default)]
    pub output: OutputSpec,
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

impl Scenario {
    /// Parses and validates a scenario. Syntax and schema errors carry the
    /// line and column of the offending item.
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_column(text, s.start));
            ScenarioError::Parse { line, column, message: e.message().trim().to_string() }
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String, ScenarioError> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical serialization, so formatting and comments
    /// do not change it.
    pub fn config_hash(&self) -> Result<String, ScenarioError> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// The grid model described by `grid` and `generators`.
    pub fn grid_model(&self) -> Result<GridModel, ScenarioError> {
        let spec = self.grid.as_ref().ok_or_else(|| invalid("grid", "grid backend needs a [grid] table"))?;
        let grid = Arc::new(TimeGrid::uniform(spec.horizon, spec.steps).map_err(|e| invalid("grid", e.to_string()))?);
        let x0 = spec.initial.clone().unwrap_or_else(|| self.space.zero());
        let g = &self.generators;
        let cont = g.continuous.as_ref().map(|c| ContinuousDriver {
            volatility: scale_volatility(&c.volatility, c.weight),
            direction: c.direction.clone(),
        });
        let poisson = g
            .poisson
            .as_ref()
            .map(|p| PoissonModel { intensity: p.intensity, marks: scale_marks(&p.marks, p.weight) });
        let acc = g
            .accessible
            .as_ref()
            .map(|a| AccessibleSeries { times: a.times.clone(), marks: scale_marks(&a.marks, a.weight) });
        GridModel::new(grid, self.space, x0, cont, poisson, acc).map_err(|e| invalid("generators", e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.n == 0 {
            return Err(invalid("n", "must be at least 1"));
        }
        let weights = [
            self.generators.continuous.as_ref().map(|c| c.weight),
            self.generators.poisson.as_ref().map(|c| c.weight),
            self.generators.accessible.as_ref().map(|c| c.weight),
        ];
        if let Some(w) = weights.iter().flatten().find(|w| !w.is_finite()) {
            return Err(invalid("generators", format!("weight {w} is not finite")));
        }
        let model = match self.backend {
            Backend::Grid => {
                if self.tree.is_some() {
                    return Err(invalid("tree", "[tree] is only used by the tree backend"));
                }
                Some(self.grid_model()?)
            }
            Backend::Tree => {
                let t = self.tree.as_ref().ok_or_else(|| invalid("tree", "tree backend needs a [tree] table"))?;
                if self.grid.is_some() {
                    return Err(invalid("grid", "[grid] is only used by the grid backend"));
                }
                if t.branching < 2 {
                    return Err(invalid("tree.branching", "must be at least 2"));
                }
                let atoms = (t.branching as f64).powi(t.depth as i32);
                if atoms > crate::finprob::MAX_ATOMS as f64 {
                    return Err(invalid("tree", format!("{atoms} atoms exceed the cap {}", crate::finprob::MAX_ATOMS)));
                }
                None
            }
        };
        for (i, a) in self.analyses.iter().enumerate() {
            let field = format!("analyses[{i}]");
            match a {
                Analysis::Gundy { lambdas } => {
                    lambdas.validate(&field)?;
                    if let Some(m) = &model {
                        if !m.has_finite_step_laws() {
                            return Err(invalid(
                                field,
                                "compensator unavailable: gundy on the grid backend needs finite step laws \
                                 (fixed continuous direction and finite-support marks)",
                            ));
                        }
                    }
                }
                Analysis::Canonical { .. } => {}
                Analysis::WeakL1 { lambdas, .. } => lambdas.validate(&field)?,
                Analysis::Transform { coefficients, p, k, lambdas } => {
                    lambdas.validate(&field)?;
                    if !(*p > 1.0) || !p.is_finite() {
                        return Err(invalid(field, format!("p must be in (1, ∞), got {p}")));
                    }
                    if !coefficients.is_contraction() {
                        return Err(invalid(field, "transform coefficients must lie in [−1, 1]"));
                    }
                    transform_norm(&self.space, *p, *k).map_err(|e| invalid(&field, e.to_string()))?;
                }
                Analysis::Lp { p, beta, .. } => {
                    if !(*p > 1.0) || !p.is_finite() {
                        return Err(invalid(field, format!("p must be in (1, ∞), got {p}")));
                    }
                    if beta.is_none() && !(self.space.is_hilbert() && *p == 2.0) {
                        return Err(invalid(field, VerifyError::BetaUnavailable.to_string()));
                    }
                }
                Analysis::Probe { shapes, budget, p } => {
                    if shapes.is_empty() || *budget == 0 {
                        return Err(invalid(field, "probe needs at least one shape and a positive budget"));
                    }
                    if !(*p > 1.0) || !p.is_finite() {
                        return Err(invalid(field, format!("p must be in (1, ∞), got {p}")));
                    }
                    for &(dim, depth) in shapes {
                        if dim == 0
                            || depth == 0
                            || depth > MAX_PROBE_DEPTH
                            || (1usize << depth).saturating_mul(dim) > MAX_PROBE_CELLS
                        {
                            return Err(invalid(field, format!("probe shape ({dim}, {depth}) exceeds the enumeration cap")));
                        }
                    }
                    if shapes.windows(2).any(|w| w[1].0 < w[0].0 || w[1].1 < w[0].1) {
                        return Err(invalid(field, VerifyError::ProbeShapes.to_string()));
                    }
                }
                Analysis::Divergence { depths, paths, resolution, leak_budget } => {
                    if self.space.norm_kind() != crate::space::NormKind::Sup {
                        return Err(invalid(field, VerifyError::DivergenceNorm.to_string()));
                    }
                    if depths.is_empty() || depths.iter().any(|d| *d == 0 || *d > 20) || *paths == 0 {
                        return Err(invalid(field, "divergence needs depths in 1..=20 and at least one path"));
                    }
                    if *resolution == 0 || !(*leak_budget > 0.0 && *leak_budget < 1.0) {
                        return Err(invalid(field, "resolution must be positive and leak_budget in (0, 1)"));
                    }
                }
                Analysis::Lemmas => {
                    if self.backend != Backend::Tree {
                        return Err(invalid(field, "the lemma suite runs on the tree backend only"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Parses a `q,d` space argument such as `inf,8` or `2,3`.
pub fn parse_space_arg(arg: &str) -> Result<NormedSpace, ScenarioError> {
    let bad = |m: &str| invalid("space", format!("`{arg}`: {m}"));
    let (q, d) = arg.split_once(',').ok_or_else(|| bad("expected `q,d`"))?;
    let q = match q.trim() {
        "inf" | "infinity" | "∞" => f64::INFINITY,
        t => t.parse::<f64>().map_err(|_| bad("q must be a number or `inf`"))?,
    };
    let d = d.trim().parse::<usize>().map_err(|_| bad("d must be a positive integer"))?;
    let norm = crate::space::NormKind::new(q).map_err(|e| bad(&e.to_string()))?;
    NormedSpace::new(d, norm).map_err(|e| bad(&e.to_string()))
}

/// Options that change how a scenario runs without changing the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Replaces the Gundy constants; the report records the override.
    pub unsafe_gundy_constants: Option<GundyConstants>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reproducibility {
    pub seed: u64,
    pub config_sha256: String,
    pub backend: Backend,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<String>,
}

/// Summary of one probed shape (the witness itself goes to a separate file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub dim: usize,
    pub depth: usize,
    pub p: f64,
    pub bound: f64,
    pub ceiling: f64,
    pub evaluations: usize,
    pub signs: Vec<f64>,
}

impl From<&ProbeResult> for ProbeRow {
    fn from(r: &ProbeResult) -> Self {
        Self {
            dim: r.dim,
            depth: r.depth,
            p: r.p,
            bound: r.bound,
            ceiling: r.ceiling,
            evaluations: r.evaluations,
            signs: r.signs.clone(),
        }
    }
}

/// The `report.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema: String,
    pub version: String,
    pub reproducibility: Reproducibility,
    pub passed: bool,
    pub analyses: Vec<VerificationReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probe: Vec<ProbeRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub divergence: Vec<DivergenceRow>,
}

impl Report {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn failures(&self) -> impl Iterator<Item = (&str, &CheckRecord)> {
        self.analyses.iter().flat_map(|a| a.failures().map(move |c| (a.analysis.as_str(), c)))
    }
}

/// Everything a run produces. Timings are kept apart from the report so
/// that the report is byte-identical across reruns.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: Report,
    pub timings: Vec<(String, f64)>,
    pub curves: Vec<(String, Vec<CurvePoint>)>,
    pub witnesses: Vec<ProbeResult>,
}

impl RunOutcome {
    /// Writes `report.json`, `timings.json`, one CSV per weak-L¹ curve and
    /// `probe_witnesses.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), ScenarioError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ScenarioError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let report = dir.join("report.json");
        fs::write(&report, self.report.to_json()).map_err(io(&report))?;
        let timings: serde_json::Map<String, serde_json::Value> =
            self.timings.iter().map(|(k, v)| (k.clone(), serde_json::Value::from(*v))).collect();
        let tpath = dir.join("timings.json");
        fs::write(&tpath, serde_json::to_string_pretty(&timings)?).map_err(io(&tpath))?;
        for (name, curve) in &self.curves {
            let mut w = csv::Writer::from_path(dir.join(format!("{name}.csv")))?;
            for c in curve {
                w.serialize(c)?;
            }
            w.flush().map_err(io(dir))?;
        }
        if !self.witnesses.is_empty() {
            let wpath = dir.join("probe_witnesses.json");
            fs::write(&wpath, serde_json::to_string_pretty(&self.witnesses)?).map_err(io(&wpath))?;
        }
        Ok(())
    }
}

struct Timer(Vec<(String, f64)>);

impl Timer {
    fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.0.push((name.to_string(), start.elapsed().as_secs_f64()));
        out
    }
}

/// Runs every analysis of the scenario.
pub fn run_scenario(scenario: &Scenario, options: &RunOptions) -> Result<RunOutcome, ScenarioError> {
    let mut scenario = scenario.clone();
    if let Some(seed) = options.seed {
        scenario.seed = seed;
    }
    scenario.validate()?;
    let mut overrides = Vec::new();
    let consts = match options.unsafe_gundy_constants {
        Some(c) => {
            overrides.push(format!(
                "gundy constants replaced: sup {}, first {}, rare {}, variation {}",
                c.sup, c.first, c.rare, c.variation
            ));
            c
        }
        None => GundyConstants::default(),
    };
    let mut timer = Timer(Vec::new());
    let mut analyses = Vec::new();
    let mut curves = Vec::new();
    let mut witnesses = Vec::new();
    let mut probe_rows = Vec::new();
    let mut divergence_rows = Vec::new();
    let seed = scenario.seed;

    let grid_state = match scenario.backend {
        Backend::Grid => Some(Ensemble::new(scenario.grid_model()?, scenario.n, seed)?),
        Backend::Tree => None,
    };
    let mut sample: Option<CanonicalSample> = None;
    let mut end_norm: Option<f64> = None;

    for analysis in &scenario.analyses {
        let name = analysis.name();
        let report = timer.time(name, || -> Result<Option<VerificationReport>, ScenarioError> {
            match analysis {
                Analysis::Probe { shapes, budget, p } => {
                    let rs = probe_umd_nested(scenario.space.norm_kind(), *p, shapes, *budget, seed)?;
                    let r = probe_report(&scenario.space, &rs);
                    probe_rows.extend(rs.iter().map(ProbeRow::from));
                    witnesses.extend(rs);
                    return Ok(Some(r));
                }
                Analysis::Divergence { depths, paths, resolution, leak_budget } => {
                    let cfg = DivergenceConfig {
                        depths: depths.clone(),
                        paths: *paths,
                        resolution: *resolution,
                        leak_budget: *leak_budget,
                    };
                    let rows = divergence_demo(scenario.space.norm_kind(), &cfg, seed)?;
                    let r = check_divergence(&rows);
                    divergence_rows = rows;
                    return Ok(Some(r));
                }
                _ => {}
            }
            match &grid_state {
                Some(ens) => run_grid(analysis, ens, &consts, &mut sample, &mut end_norm, &mut curves).map(Some),
                None => {
                    let tree = scenario.tree.as_ref().expect("validated");
                    run_tree(analysis, &scenario.space, tree, scenario.n, seed, &consts).map(Some)
                }
            }
        })?;
        if let Some(r) = report {
            analyses.push(r);
        }
    }
    let passed = analyses.iter().all(VerificationReport::passed);
    let report = Report {
        schema: REPORT_SCHEMA.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        reproducibility: Reproducibility {
            seed,
            config_sha256: scenario.config_hash()?,
            backend: scenario.backend,
            n: scenario.n,
            overrides,
        },
        passed,
        analyses,
        probe: probe_rows,
        divergence: divergence_rows,
    };
    let outcome = RunOutcome { report, timings: timer.0, curves, witnesses };
    if let Some(dir) = options.out.as_ref().or(scenario.output.dir.as_ref()) {
        outcome.write(dir)?;
    }
    Ok(outcome)
}

const NON_HILBERT_BUDGET: &str = "budget uses K = 1, which is only derived for Hilbert spaces";

fn probe_report(space: &NormedSpace, rs: &[ProbeResult]) -> VerificationReport {
    let mut report = VerificationReport::new("probe");
    for r in rs {
        let label = format!("d = {}, depth = {}", r.dim, r.depth);
        report.push(
            CheckRecord::exact("probe.ceiling", "probed bound ≤ (p*−1)·d^{|1/2−1/q|}", r.bound, r.ceiling, r.evaluations)
                .with_note(label.clone()),
        );
        if space.is_hilbert() && r.p == 2.0 {
            report.push(
                CheckRecord::zero(
                    "probe.hilbert",
                    "probed bound = 1 in a Hilbert space at p = 2",
                    Method::Exact,
                    r.bound - 1.0,
                    1e-12,
                    r.evaluations,
                )
                .with_note(label),
            );
        }
    }
    let monotone = rs.windows(2).all(|w| w[1].bound >= w[0].bound);
    let bounds: Vec<String> = rs.iter().map(|r| format!("({}, {}): {}", r.dim, r.depth, r.bound)).collect();
    report.push(
        CheckRecord::holds(
            "probe.monotone",
            "probed bounds are nondecreasing along nested shapes",
            Method::Exact,
            monotone,
            rs.len(),
        )
        .with_note(bounds.join(", ")),
    );
    report
}

fn run_grid(
    analysis: &Analysis,
    ens: &Ensemble,
    consts: &GundyConstants,
    sample: &mut Option<CanonicalSample>,
    end_norm: &mut Option<f64>,
    curves: &mut Vec<(String, Vec<CurvePoint>)>,
) -> Result<VerificationReport, ScenarioError> {
    let mut sample_of = |extras: usize| -> Result<CanonicalSample, ScenarioError> {
        if sample.is_none() {
            *sample = Some(CanonicalSample::collect(ens, extras)?);
        }
        Ok(sample.clone().expect("just set"))
    };
    let mut center = || -> Result<f64, ScenarioError> {
        if end_norm.is_none() {
            let norms = ens.map(|p| {
                let m = p.values();
                Ok(m.norm_at(m.steps()))
            })?;
            *end_norm = Some(crate::verify::MeanEstimate::of(&norms).mean);
        }
        Ok(end_norm.expect("just set"))
    };
    let space = *ens.model().space();
    Ok(match analysis {
        Analysis::Gundy { lambdas } => check_gundy_bounds_grid(ens, &lambdas.resolve(center()?), consts)?,
        Analysis::Canonical { extra_functionals } => check_canonical(&sample_of(*extra_functionals)?),
        Analysis::WeakL1 { part, lambdas } => {
            let s = sample_of(default_extras())?;
            let grid = lambdas.resolve(s.expected_norm().mean);
            let c = weak_l1_constant(transform_norm(&space, 2.0, None).unwrap_or(1.0), 2.0);
            curves.push((format!("weak_l1_{}", part.symbol()), weak_l1_curve(&s, *part, &grid)?));
            let mut r = check_weak_l1_canonical(&s, *part, &grid, c)?;
            if !space.is_hilbert() {
                for rec in &mut r.checks {
                    rec.note = Some(NON_HILBERT_BUDGET.into());
                }
            }
            r
        }
        Analysis::Transform { coefficients, p, k, lambdas } => {
            check_weak_l1_transform_grid(ens, coefficients, *p, *k, &lambdas.resolve(center()?))?
        }
        Analysis::Lp { p, part, beta } => check_lp_bound(&sample_of(default_extras())?, *p, *part, beta.as_ref())?,
        Analysis::Lemmas | Analysis::Probe { .. } | Analysis::Divergence { .. } => unreachable!("handled by caller"),
    })
}

fn run_tree(
    analysis: &Analysis,
    space: &NormedSpace,
    spec: &TreeSpec,
    n: usize,
    seed: u64,
    consts: &GundyConstants,
) -> Result<VerificationReport, ScenarioError> {
    let per_tree: Vec<VerificationReport> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<VerificationReport, ScenarioError> {
            let tree_seed = seed.wrapping_add(i as u64);
            let m = gen_random_tree_martingale_with(tree_seed, spec.depth, spec.branching, space, spec.leaves)?;
            let e = m.expected_norm(spec.depth);
            Ok(match analysis {
                Analysis::Gundy { lambdas } => check_gundy_bounds_tree(&m, &lambdas.resolve(e), consts)?,
                Analysis::Canonical { .. } => {
                    let c = canonical_discrete(&m);
                    let mut r = VerificationReport::new("canonical");
                    r.push(CheckRecord::holds(
                        "canonical.discrete",
                        "on a discrete filtration M^c = M^q = 0 and M^a = M",
                        Method::Exact,
                        c.mc.max_norm() == 0.0 && c.mq.max_norm() == 0.0 && c.ma == m,
                        m.tree().n_atoms(),
                    ));
                    r
                }
                Analysis::WeakL1 { part, .. } => {
                    let k = transform_norm(space, 2.0, None).unwrap_or(1.0);
                    let mut r = check_weak_l1_canonical_tree(&m, *part, weak_l1_constant(k, 2.0));
                    if !space.is_hilbert() {
                        for rec in &mut r.checks {
                            rec.note = Some(NON_HILBERT_BUDGET.into());
                        }
                    }
                    r
                }
                Analysis::Transform { coefficients, p, k, .. } => {
                    let coeffs = TreeCoeffs::from_rule(&m, &resolve_rule(coefficients, e));
                    check_weak_l1_transform_tree(&m, &coeffs, *p, *k)?
                }
                Analysis::Lp { p, part, beta } => check_lp_bound_tree(&m, *p, *part, beta.as_ref())?,
                Analysis::Lemmas => check_lemmas_tree(&m, tree_seed)?,
                Analysis::Probe { .. } | Analysis::Divergence { .. } => unreachable!("handled by caller"),
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(VerificationReport::merge_worst(analysis.name(), &per_tree, |i| format!("tree seed {}", seed.wrapping_add(i as u64))))
}

/// Hit-and-freeze levels in scenario files are in units of `E‖M_∞‖` on the
/// tree backend, so one rule adapts to every seeded tree.
fn resolve_rule(rule: &TransformRule, expected_norm: f64) -> TransformRule {
    match rule {
        TransformRule::HitAndFreeze { level, before, after } => {
            TransformRule::HitAndFreeze { level: level * expected_norm, before: *before, after: *after }
        }
        other => other.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const COOKBOOK: &str = r#"
seed = 7
n = 2000
backend = "grid"

[space]
dim = 2
q = 2.0

[grid]
horizon = 1.0
steps = 20
initial = [0.2, 0.0]

[generators.continuous]
volatility = 0.8
direction = [1.0, 0.0]

[generators.poisson]
intensity = 1.5
marks = { kind = "finite", atoms = [[0.0, 1.0], [0.0, -1.0]], probs = [0.5, 0.5] }

[generators.accessible]
times = [0.5]
marks = { kind = "finite", atoms = [[0.6, 0.6], [-0.6, -0.6]], probs = [0.5, 0.5] }

[[analyses]]
kind = "gundy"
lambdas = { points = 6, decades = 2.0 }

[[analyses]]
kind = "canonical"

[[analyses]]
kind = "weak_l1"
part = "c"

[[analyses]]
kind = "lp"
p = 2.0
"#;

    #[test]
    fn parse_and_round_trip() {
        let s = Scenario::parse(COOKBOOK).unwrap();
        assert_eq!(s.analyses.len(), 4);
        let text = s.to_toml().unwrap();
        let back = Scenario::parse(&text).unwrap();
        assert_eq!(s, back);
        assert_eq!(s.config_hash().unwrap(), back.config_hash().unwrap());
    }

    #[test]
    fn unknown_field_reports_position() {
        let text = COOKBOOK.replace("steps = 20", "steps = 20\nstepz = 3");
        match Scenario::parse(&text) {
            Err(ScenarioError::Parse { line, message, .. }) => {
                let want = text.lines().position(|l| l.starts_with("stepz")).unwrap() + 1;
                assert_eq!(line, want, "{message}");
                assert!(message.contains("stepz"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn syntax_error_position() {
        match Scenario::parse("seed = 1\nn = = 2\n") {
            Err(ScenarioError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_errors() {
        let bad_lambda = COOKBOOK.replace("lambdas = { points = 6, decades = 2.0 }", "lambdas = [1.0, -2.0]");
        assert!(matches!(Scenario::parse(&bad_lambda), Err(ScenarioError::Invalid { .. })));
        let coarse = COOKBOOK.replace("intensity = 1.5", "intensity = 3.0");
        assert!(matches!(Scenario::parse(&coarse), Err(ScenarioError::Invalid { .. })));
        let gaussian = COOKBOOK.replace(
            r#"marks = { kind = "finite", atoms = [[0.0, 1.0], [0.0, -1.0]], probs = [0.5, 0.5] }"#,
            r#"marks = { kind = "gaussian", mean = [0.0, 0.0], std = 1.0 }"#,
        );
        match Scenario::parse(&gaussian) {
            Err(ScenarioError::Invalid { message, .. }) => assert!(message.contains("compensator unavailable")),
            other => panic!("{other:?}"),
        }
        let lemmas_on_grid = format!("{COOKBOOK}\n[[analyses]]\nkind = \"lemmas\"\n");
        assert!(matches!(Scenario::parse(&lemmas_on_grid), Err(ScenarioError::Invalid { .. })));
        let no_beta = COOKBOOK.replace("p = 2.0\n", "p = 4.0\n");
        assert!(matches!(Scenario::parse(&no_beta), Err(ScenarioError::Invalid { .. })));
    }

    #[test]
    fn grid_run_is_deterministic_and_passes() {
        let s = Scenario::parse(COOKBOOK).unwrap();
        let a = run_scenario(&s, &RunOptions::default()).unwrap();
        let b = run_scenario(&s, &RunOptions::default()).unwrap();
        assert!(a.report.passed, "{}", a.report.to_json());
        assert_eq!(a.report.to_json(), b.report.to_json());
        assert_eq!(Report::from_json(&a.report.to_json()).unwrap(), a.report);
        let c = run_scenario(&s, &RunOptions { seed: Some(8), ..RunOptions::default() }).unwrap();
        assert_ne!(a.report.reproducibility.config_sha256, c.report.reproducibility.config_sha256);
    }

    #[test]
    fn unsafe_constants_fail_and_are_recorded() {
        let s = Scenario::parse(COOKBOOK).unwrap();
        let opts = RunOptions {
            unsafe_gundy_constants: Some(GundyConstants { sup: 0.1, ..GundyConstants::default() }),
            ..RunOptions::default()
        };
        let out = run_scenario(&s, &opts).unwrap();
        assert!(!out.report.passed);
        assert_eq!(out.report.reproducibility.overrides.len(), 1);
        assert!(out.report.failures().any(|(_, c)| c.name == "gundy.sup"));
    }

    #[test]
    fn tree_backend_runs() {
        let text = r#"
seed = 3
n = 20
backend = "tree"
space = { dim = 2, q = "inf" }
tree = { depth = 4, branching = 2 }

[[analyses]]
kind = "gundy"

[[analyses]]
kind = "transform"
coefficients = { rule = "hit-and-freeze", level = 1.0 }

[[analyses]]
kind = "lemmas"

[[analyses]]
kind = "canonical"
"#;
        let s = Scenario::parse(text);
        // sup norm: the transform constant needs K
        assert!(matches!(s, Err(ScenarioError::Invalid { .. })));
        let s = Scenario::parse(&text.replace("level = 1.0 }", "level = 1.0 }\nk = 2.0")).unwrap();
        let out = run_scenario(&s, &RunOptions::default()).unwrap();
        assert!(out.report.passed, "{}", out.report.to_json());
        assert_eq!(out.report.analyses.len(), 4);
    }

    #[test]
    fn writes_output_files() {
        let s = Scenario::parse(COOKBOOK).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = run_scenario(&s, &RunOptions { out: Some(dir.path().to_path_buf()), ..RunOptions::default() }).unwrap();
        let text = fs::read_to_string(dir.path().join("report.json")).unwrap();
        assert_eq!(text, out.report.to_json());
        assert!(dir.path().join("timings.json").exists());
        let curve = fs::read_to_string(dir.path().join("weak_l1_c.csv")).unwrap();
        assert!(curve.starts_with("lambda,value,lo,hi"));
    }

    #[test]
    fn space_argument() {
        assert_eq!(parse_space_arg("inf,8").unwrap(), NormedSpace::lq(8, f64::INFINITY).unwrap());
        assert_eq!(parse_space_arg("2, 3").unwrap(), NormedSpace::euclidean(3));
        for bad in ["", "2", "0.5,3", "2,0", "x,2", "2,-1"] {
            assert!(parse_space_arg(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn line_column_counts_characters() {
        assert_eq!(line_column("ab\nλx", 5), (2, 2));
    }
}
