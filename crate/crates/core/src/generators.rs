//! Martingale families: Paley-Walsh and random martingales on exact trees,
//! and grid models built from a continuous driver, a compensated Poisson
//! stream and accessible jumps. Also the continuous-time embedding of a
//! Paley-Walsh martingale in which `{0,1}`-transformed steps are run as
//! continuous bridges.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::finprob::{AdaptedProcess, FiltrationTree, FinprobError};
use crate::process::{Label, LabeledPath, PathBuilder, ProcessError, TimeGrid};
use crate::space::NormedSpace;

/// Largest `intensity · mesh` accepted for Poisson streams.
pub const MAX_INTENSITY_MESH: f64 = 0.1;

/// Cap on the number of sub-steps of a single bridge.
pub const MAX_BRIDGE_STEPS: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("expected {expected} increment functions, got {got}")]
    DepthMismatch { expected: usize, got: usize },
    #[error("φ_{n} has {got} values, expected {expected}")]
    PhiShape { n: usize, expected: usize, got: usize },
    #[error("branching must be at least 2, got {0}")]
    Branching(usize),
    #[error("intensity·mesh = {0} exceeds {MAX_INTENSITY_MESH}")]
    MeshTooCoarse(f64),
    #[error("time {0} is not a grid point")]
    TimeNotOnGrid(f64),
    #[error("accessible mark law must have zero mean, mean norm is {0}")]
    NonZeroMean(f64),
    #[error("invalid mark law: {0}")]
    MarkLaw(String),
    #[error("invalid volatility: {0}")]
    Volatility(String),
    #[error("invalid direction: {0}")]
    Direction(String),
    #[error("intensity must be positive and finite, got {0}")]
    Intensity(f64),
    #[error("leak budget {0} must lie in (0, 1)")]
    LeakBudget(f64),
    #[error("bridge resolution must be at least 1, got {0}")]
    BridgeResolution(usize),
    #[error("bridge {n} needs more than {MAX_BRIDGE_STEPS} sub-steps")]
    BridgeTooLong { n: usize },
    #[error("coefficient sequence has {got} entries, expected {expected}")]
    CoeffLength { expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Finprob(#[from] FinprobError),
    #[error(transparent)]
    Process(#[from] ProcessError),
}

/// Per-path generator: ChaCha8 keyed by `seed`, on stream `stream`.
pub fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn rademacher(rng: &mut impl Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Paley-Walsh martingale `df_n = r_n φ_n(r_1, …, r_{n−1})`.
///
/// `phi[n−1]` holds `φ_n` as `2^{n−1}` vectors, indexed by the history
/// `(r_1, …, r_{n−1})` read as a binary number with `r_1` most significant
/// and bit `1` meaning `−1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaleyWalsh {
    pub dim: usize,
    pub f0: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
}

impl PaleyWalsh {
    pub fn new(dim: usize, f0: Vec<f64>, phi: Vec<Vec<f64>>) -> Result<Self, GenError> {
        if f0.len() != dim {
            return Err(GenError::Dimension { expected: dim, got: f0.len() });
        }
        for (i, p) in phi.iter().enumerate() {
            let expected = (1usize << i) * dim;
            if p.len() != expected {
                return Err(GenError::PhiShape { n: i + 1, expected, got: p.len() });
            }
        }
        Ok(Self { dim, f0, phi })
    }

    /// Same `φ_n ≡ x` on every history.
    pub fn constant_steps(x: &[f64], depth: usize) -> Self {
        let dim = x.len();
        let phi = (0..depth).map(|i| x.repeat(1 << i)).collect();
        Self { dim, f0: vec![0.0; dim], phi }
    }

    pub fn depth(&self) -> usize {
        self.phi.len()
    }

    /// `φ_n` on history index `h`.
    pub fn phi_at(&self, n: usize, h: usize) -> &[f64] {
        &self.phi[n - 1][h * self.dim..(h + 1) * self.dim]
    }

    /// `‖φ_n‖_∞ = max_h ‖φ_n(h)‖`.
    pub fn phi_sup(&self, space: &NormedSpace, n: usize) -> f64 {
        self.phi[n - 1].chunks(self.dim).map(|v| space.norm_of(v)).fold(0.0, f64::max)
    }

    /// Embeds into a larger depth by appending zero increments.
    pub fn padded(&self, depth: usize) -> Self {
        let mut phi = self.phi.clone();
        for i in phi.len()..depth {
            phi.push(vec![0.0; (1 << i) * self.dim]);
        }
        Self { dim: self.dim, f0: self.f0.clone(), phi }
    }

    /// Embeds into a larger dimension by appending zero coordinates.
    pub fn widened(&self, dim: usize) -> Self {
        let widen = |v: &[f64]| {
            v.chunks(self.dim)
                .flat_map(|c| c.iter().copied().chain(std::iter::repeat_n(0.0, dim - self.dim)))
                .collect::<Vec<_>>()
        };
        Self { dim, f0: widen(&self.f0), phi: self.phi.iter().map(|p| widen(p)).collect() }
    }
}

/// The Paley-Walsh martingale on the dyadic tree of its depth.
pub fn gen_paley_walsh(pw: &PaleyWalsh, space: &NormedSpace) -> Result<AdaptedProcess, GenError> {
    if space.dim() != pw.dim {
        return Err(GenError::Dimension { expected: space.dim(), got: pw.dim });
    }
    let depth = pw.depth();
    let tree = Arc::new(FiltrationTree::rademacher(depth)?);
    let d = pw.dim;
    let mut values = vec![pw.f0.clone()];
    for n in 1..=depth {
        let prev = &values[n - 1];
        let mut lv = vec![0.0; (1 << n) * d];
        for b in 0..1usize << n {
            let parent = b >> 1;
            let r = if b & 1 == 0 { 1.0 } else { -1.0 };
            let phi = pw.phi_at(n, parent);
            for i in 0..d {
                lv[b * d + i] = prev[parent * d + i] + r * phi[i];
            }
        }
        values.push(lv);
    }
    Ok(AdaptedProcess::from_level_values(tree, *space, values)?)
}

/// Law of the leaf values of a random tree martingale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafLaw {
    /// Independent standard normal coordinates.
    Gaussian,
    /// Gaussian coordinates times a Pareto(1.5) radial factor.
    HeavyTailed,
}

/// Uniform `branching`-ary tree whose leaf values are drawn i.i.d. and whose
/// interior values are backward conditional averages.
pub fn gen_random_tree_martingale(
    seed: u64,
    depth: usize,
    branching: usize,
    space: &NormedSpace,
) -> Result<AdaptedProcess, GenError> {
    gen_random_tree_martingale_with(seed, depth, branching, space, LeafLaw::Gaussian)
}

pub fn gen_random_tree_martingale_with(
    seed: u64,
    depth: usize,
    branching: usize,
    space: &NormedSpace,
    law: LeafLaw,
) -> Result<AdaptedProcess, GenError> {
    if branching < 2 {
        return Err(GenError::Branching(branching));
    }
    let tree = Arc::new(FiltrationTree::uniform(depth, branching)?);
    let d = space.dim();
    let mut rng = path_rng(seed, 0);
    let n = tree.n_atoms();
    let mut leaves = vec![0.0; n * d];
    for atom in 0..n {
        let radial = match law {
            LeafLaw::Gaussian => 1.0,
            LeafLaw::HeavyTailed => {
                let u: f64 = rng.random::<f64>();
                (1.0 - u).powf(-1.0 / 1.5)
            }
        };
        for x in &mut leaves[atom * d..(atom + 1) * d] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = radial * z;
        }
    }
    let mut values = vec![Vec::new(); depth + 1];
    values[depth] = leaves;
    for level in (0..depth).rev() {
        let child = &values[level + 1];
        let mut lv = vec![0.0; tree.n_blocks(level) * d];
        for b in 0..tree.n_blocks(level) {
            // uniform tree: equal weights over children
            let kids = tree.children(level, b);
            let w = 1.0 / kids.len() as f64;
            for c in kids {
                for i in 0..d {
                    lv[b * d + i] += w * child[c * d + i];
                }
            }
        }
        values[level] = lv;
    }
    Ok(AdaptedProcess::from_level_values(tree, *space, values)?)
}

/// Finite-support or Gaussian law of jump marks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarkLaw {
    Finite { atoms: Vec<Vec<f64>>, probs: Vec<f64> },
    Gaussian { mean: Vec<f64>, std: f64 },
}

impl MarkLaw {
    /// Unit point mass `δ_x`.
    pub fn point(x: Vec<f64>) -> Self {
        MarkLaw::Finite { atoms: vec![x], probs: vec![1.0] }
    }

    /// Fair coin on `±x`.
    pub fn symmetric(x: Vec<f64>) -> Self {
        let neg = x.iter().map(|v| -v).collect();
        MarkLaw::Finite { atoms: vec![x, neg], probs: vec![0.5, 0.5] }
    }

    pub fn validate(&self, dim: usize) -> Result<(), GenError> {
        match self {
            MarkLaw::Finite { atoms, probs } => {
                if atoms.is_empty() || atoms.len() != probs.len() {
                    return Err(GenError::MarkLaw("atoms and probs must be non-empty and of equal length".into()));
                }
                if let Some(a) = atoms.iter().find(|a| a.len() != dim) {
                    return Err(GenError::Dimension { expected: dim, got: a.len() });
                }
                if atoms.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(GenError::MarkLaw("atoms must be finite".into()));
                }
                if probs.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
                    return Err(GenError::MarkLaw("probabilities must be positive".into()));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(GenError::MarkLaw(format!("probabilities sum to {total}")));
                }
            }
            MarkLaw::Gaussian { mean, std } => {
                if mean.len() != dim {
                    return Err(GenError::Dimension { expected: dim, got: mean.len() });
                }
                if !(*std >= 0.0) || !std.is_finite() || mean.iter().any(|x| !x.is_finite()) {
                    return Err(GenError::MarkLaw("std must be non-negative and finite".into()));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            MarkLaw::Finite { atoms, probs } => {
                let mut m = vec![0.0; atoms[0].len()];
                for (a, p) in atoms.iter().zip(probs) {
                    for (mi, ai) in m.iter_mut().zip(a) {
                        *mi += p * ai;
                    }
                }
                m
            }
            MarkLaw::Gaussian { mean, .. } => mean.clone(),
        }
    }

    pub fn is_finite_support(&self) -> bool {
        matches!(self, MarkLaw::Finite { .. })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            MarkLaw::Finite { atoms, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (a, p) in atoms.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        return a.clone();
                    }
                }
                atoms.last().unwrap().clone()
            }
            MarkLaw::Gaussian { mean, std } => mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + std * z
                })
                .collect(),
        }
    }
}

/// Volatility as a function of time: a constant, or piecewise constant with
/// value `values[i]` on `[times[i], times[i+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Volatility {
    Constant(f64),
    Piecewise { times: Vec<f64>, values: Vec<f64> },
}

impl Volatility {
    pub fn validate(&self) -> Result<(), GenError> {
        match self {
            Volatility::Constant(v) if v.is_finite() && *v >= 0.0 => Ok(()),
            Volatility::Constant(v) => Err(GenError::Volatility(format!("{v} is not a finite non-negative number"))),
            Volatility::Piecewise { times, values } => {
                if times.is_empty() || times.len() != values.len() || times[0] != 0.0 {
                    return Err(GenError::Volatility("times must start at 0 and match values".into()));
                }
                if !times.windows(2).all(|w| w[0] < w[1]) {
                    return Err(GenError::Volatility("times must be increasing".into()));
                }
                if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(GenError::Volatility("values must be finite and non-negative".into()));
                }
                Ok(())
            }
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        match self {
            Volatility::Constant(v) => *v,
            Volatility::Piecewise { times, values } => {
                let i = times.partition_point(|s| *s <= t).saturating_sub(1);
                values[i]
            }
        }
    }
}

/// Direction of the continuous driver's steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Direction {
    Fixed(Vec<f64>),
    Named(DirectionName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionName {
    /// Fresh uniform direction on the Euclidean unit sphere at every step.
    Random,
}

/// Scaled symmetric random walk: `±vol(t_{k−1})·√Δt_k·e` on every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuousDriver {
    pub volatility: Volatility,
    pub direction: Direction,
}

impl ContinuousDriver {
    pub fn validate(&self, dim: usize) -> Result<(), GenError> {
        self.volatility.validate()?;
        if let Direction::Fixed(e) = &self.direction {
            if e.len() != dim {
                return Err(GenError::Dimension { expected: dim, got: e.len() });
            }
            if e.iter().any(|x| !x.is_finite()) {
                return Err(GenError::Direction("components must be finite".into()));
            }
        }
        Ok(())
    }

    fn step(&self, grid: &TimeGrid, k: usize, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
        let scale = self.volatility.at(grid.time(k - 1)) * grid.dt(k).sqrt();
        let sign = rademacher(rng);
        match &self.direction {
            Direction::Fixed(e) => e.iter().map(|x| sign * scale * x).collect(),
            Direction::Named(DirectionName::Random) => {
                let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                for x in &mut v {
                    *x *= sign * scale / n;
                }
                v
            }
        }
    }
}

/// Compensator model of a marked Poisson stream: intensity `γ` and mark law
/// `ρ`; the compensator is `γ dt ⊗ ρ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoissonModel {
    pub intensity: f64,
    pub marks: MarkLaw,
}

impl PoissonModel {
    pub fn validate(&self, dim: usize, grid: &TimeGrid) -> Result<(), GenError> {
        if !(self.intensity > 0.0) || !self.intensity.is_finite() {
            return Err(GenError::Intensity(self.intensity));
        }
        self.marks.validate(dim)?;
        let product = self.intensity * grid.mesh();
        if product > MAX_INTENSITY_MESH * (1.0 + 1e-12) {
            return Err(GenError::MeshTooCoarse(product));
        }
        Ok(())
    }

    /// Drift `−γ·m̄·Δt` on step `k`.
    pub fn drift(&self, grid: &TimeGrid, k: usize) -> Vec<f64> {
        let c = -self.intensity * grid.dt(k);
        self.marks.mean().into_iter().map(|m| c * m).collect()
    }
}

/// Jumps with zero-mean marks at declared predictable times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccessibleSeries {
    pub times: Vec<f64>,
    pub marks: MarkLaw,
}

impl AccessibleSeries {
    pub fn validate(&self, dim: usize, grid: &TimeGrid) -> Result<Vec<usize>, GenError> {
        self.marks.validate(dim)?;
        let mean = self.marks.mean();
        let norm = mean.iter().map(|x| x.abs()).fold(0.0, f64::max);
        if norm > 1e-12 {
            return Err(GenError::NonZeroMean(norm));
        }
        self.step_indices(grid)
    }

    fn step_indices(&self, grid: &TimeGrid) -> Result<Vec<usize>, GenError> {
        let mut idx = Vec::with_capacity(self.times.len());
        for &t in &self.times {
            match grid.index_of(t) {
                Some(k) if k >= 1 => idx.push(k),
                _ => return Err(GenError::TimeNotOnGrid(t)),
            }
        }
        idx.sort_unstable();
        idx.dedup();
        Ok(idx)
    }
}

/// Composite grid model: initial value plus optional continuous,
/// quasi-left-continuous and accessible components, all independent.
#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    grid: Arc<TimeGrid>,
    space: NormedSpace,
    x0: Vec<f64>,
    cont: Option<ContinuousDriver>,
    poisson: Option<PoissonModel>,
    accessible: Option<AccessibleSeries>,
    acc_steps: Vec<usize>,
    is_acc: Vec<bool>,
    drifts: Vec<Vec<f64>>,
}

impl GridModel {
    pub fn new(
        grid: Arc<TimeGrid>,
        space: NormedSpace,
        x0: Vec<f64>,
        cont: Option<ContinuousDriver>,
        poisson: Option<PoissonModel>,
        accessible: Option<AccessibleSeries>,
    ) -> Result<Self, GenError> {
        let d = space.dim();
        if x0.len() != d {
            return Err(GenError::Dimension { expected: d, got: x0.len() });
        }
        if let Some(c) = &cont {
            c.validate(d)?;
        }
        if let Some(p) = &poisson {
            p.validate(d, &grid)?;
        }
        let acc_steps = match &accessible {
            Some(a) => a.validate(d, &grid)?,
            None => Vec::new(),
        };
        let mut is_acc = vec![false; grid.steps() + 1];
        for &k in &acc_steps {
            is_acc[k] = true;
        }
        let drifts = match &poisson {
            Some(p) => (1..=grid.steps()).map(|k| p.drift(&grid, k)).collect(),
            None => Vec::new(),
        };
        Ok(Self { grid, space, x0, cont, poisson, accessible, acc_steps, is_acc, drifts })
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn space(&self) -> &NormedSpace {
        &self.space
    }

    pub fn initial(&self) -> &[f64] {
        &self.x0
    }

    pub fn poisson(&self) -> Option<&PoissonModel> {
        self.poisson.as_ref()
    }

    pub fn accessible(&self) -> Option<&AccessibleSeries> {
        self.accessible.as_ref()
    }

    pub fn accessible_steps(&self) -> &[usize] {
        &self.acc_steps
    }

    /// Samples one path. Poisson jumps are drawn per step with probability
    /// `γ·Δt_k` and, together with their drift, are switched off on declared
    /// predictable steps, where only accessible jumps occur.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<LabeledPath, GenError> {
        let d = self.space.dim();
        let mut b = PathBuilder::new(self.grid.clone(), self.space).initial(&self.x0);
        for &k in &self.acc_steps {
            b.declare_predictable(k);
        }
        for k in 1..=self.grid.steps() {
            if let Some(c) = &self.cont {
                let v = c.step(&self.grid, k, d, rng);
                b.push(k, Label::Cont, &v);
            }
            if self.is_acc[k] {
                if let Some(a) = &self.accessible {
                    b.push(k, Label::AccJump, &a.marks.sample(rng));
                }
            } else if let Some(p) = &self.poisson {
                let u: f64 = rng.random();
                if u < p.intensity * self.grid.dt(k) {
                    b.push(k, Label::QlcJump, &p.marks.sample(rng));
                }
                b.push(k, Label::QlcDrift, &self.drifts[k - 1]);
            }
        }
        Ok(b.build()?)
    }

    pub fn sample_seeded(&self, seed: u64, path: u64) -> Result<LabeledPath, GenError> {
        self.sample(&mut path_rng(seed, path))
    }

    /// Exact law of the increment on step `k`, when every component has a
    /// finite-support law; `None` otherwise.
    pub fn step_law(&self, k: usize) -> Option<StepLaw> {
        let d = self.space.dim();
        let mut law = StepLaw::dirac(vec![0.0; d]);
        if let Some(c) = &self.cont {
            let Direction::Fixed(e) = &c.direction else {
                return None;
            };
            let scale = c.volatility.at(self.grid.time(k - 1)) * self.grid.dt(k).sqrt();
            let up: Vec<f64> = e.iter().map(|x| scale * x).collect();
            let down: Vec<f64> = up.iter().map(|x| -x).collect();
            law = law.convolve(&StepLaw { atoms: vec![(0.5, up), (0.5, down)] });
        }
        if self.is_acc[k] {
            if let Some(a) = &self.accessible {
                law = law.convolve(&StepLaw::from_marks(&a.marks)?);
            }
        } else if let Some(p) = &self.poisson {
            let q = p.intensity * self.grid.dt(k);
            let drift = &self.drifts[k - 1];
            let marks = StepLaw::from_marks(&p.marks)?;
            let mut atoms = vec![(1.0 - q, drift.clone())];
            for (w, x) in marks.atoms {
                atoms.push((q * w, x.iter().zip(drift).map(|(a, b)| a + b).collect()));
            }
            law = law.convolve(&StepLaw { atoms });
        }
        Some(law)
    }

    /// Whether [`GridModel::step_law`] is available on every step.
    pub fn has_finite_step_laws(&self) -> bool {
        let cont_ok = self
            .cont
            .as_ref()
            .is_none_or(|c| matches!(c.direction, Direction::Fixed(_)));
        let pois_ok = self.poisson.as_ref().is_none_or(|p| p.marks.is_finite_support());
        let acc_ok = self.accessible.as_ref().is_none_or(|a| a.marks.is_finite_support());
        cont_ok && pois_ok && acc_ok
    }
}

/// Finite law of a step increment, independent of the past.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLaw {
    pub atoms: Vec<(f64, Vec<f64>)>,
}

impl StepLaw {
    pub fn dirac(x: Vec<f64>) -> Self {
        Self { atoms: vec![(1.0, x)] }
    }

    fn from_marks(m: &MarkLaw) -> Option<Self> {
        match m {
            MarkLaw::Finite { atoms, probs } => {
                Some(Self { atoms: probs.iter().copied().zip(atoms.iter().cloned()).collect() })
            }
            MarkLaw::Gaussian { .. } => None,
        }
    }

    /// Law of the sum of independent increments.
    pub fn convolve(&self, other: &StepLaw) -> StepLaw {
        let mut atoms = Vec::with_capacity(self.atoms.len() * other.atoms.len());
        for (p, x) in &self.atoms {
            for (q, y) in &other.atoms {
                atoms.push((p * q, x.iter().zip(y).map(|(a, b)| a + b).collect()));
            }
        }
        StepLaw { atoms }
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.atoms[0].1.len()];
        for (p, x) in &self.atoms {
            for (mi, xi) in m.iter_mut().zip(x) {
                *mi += p * xi;
            }
        }
        m
    }
}

/// Continuous driver alone on `grid`.
pub fn gen_continuous_driver(
    grid: Arc<TimeGrid>,
    driver: ContinuousDriver,
    space: &NormedSpace,
    seed: u64,
) -> Result<LabeledPath, GenError> {
    let x0 = space.zero();
    GridModel::new(grid, *space, x0, Some(driver), None, None)?.sample_seeded(seed, 0)
}

/// Compensated Poisson stream alone on `grid`.
pub fn gen_compensated_poisson(
    grid: Arc<TimeGrid>,
    model: PoissonModel,
    space: &NormedSpace,
    seed: u64,
) -> Result<LabeledPath, GenError> {
    let x0 = space.zero();
    GridModel::new(grid, *space, x0, None, Some(model), None)?.sample_seeded(seed, 0)
}

/// Accessible jump series alone on `grid`.
pub fn gen_accessible_series(
    grid: Arc<TimeGrid>,
    series: AccessibleSeries,
    space: &NormedSpace,
    seed: u64,
) -> Result<LabeledPath, GenError> {
    let x0 = space.zero();
    GridModel::new(grid, *space, x0, None, None, Some(series))?.sample_seeded(seed, 0)
}

/// Source of the predictable factors `φ_n(σ_1, …, σ_{n−1})` driving the
/// embedding.
pub trait PhiOracle: Sync {
    fn dim(&self) -> usize;
    fn depth(&self) -> usize;
    /// `‖φ_n‖_∞` over all histories.
    fn phi_sup(&self, space: &NormedSpace, n: usize) -> f64;
    /// Writes `φ_n(σ_1, …, σ_{n−1})` into `out`. `f_prev` is the Paley-Walsh
    /// value `f_{n−1} = f_0 + Σ_{k<n} σ_k φ_k` along the same history.
    fn phi(&self, n: usize, signs: &[f64], f_prev: &[f64], out: &mut [f64]);
    fn f0(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }
}

impl PhiOracle for PaleyWalsh {
    fn dim(&self) -> usize {
        self.dim
    }

    fn depth(&self) -> usize {
        self.phi.len()
    }

    fn phi_sup(&self, space: &NormedSpace, n: usize) -> f64 {
        PaleyWalsh::phi_sup(self, space, n)
    }

    fn phi(&self, n: usize, signs: &[f64], _f_prev: &[f64], out: &mut [f64]) {
        let h = signs[..n - 1].iter().fold(0usize, |h, s| (h << 1) | usize::from(*s < 0.0));
        out.copy_from_slice(self.phi_at(n, h));
    }

    fn f0(&self) -> Vec<f64> {
        self.f0.clone()
    }
}

/// Classical witness that sign transforms are not uniformly bounded in
/// `ℓ^∞`: coordinates are indexed by `ω' ∈ {−1,1}^depth`, and coordinate
/// `ω'` of `f_n` is the scalar walk `F_n(u)` with `u_j = σ_j r_j(ω')`,
/// `dF_k = ½ u_k` while `|F_{k−1}| < 1` and `0` once `F` has reached `±1`.
///
/// Every coordinate stays in `[−1, 1]`, so `‖f_n‖_∞ = 1` for `n ≥ 2`, while
/// the transform by `a = (1, 0, 1, 0, …)` reaches `⌈n/2⌉/2` in some
/// coordinate on every history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassicalWitness {
    pub depth: usize,
}

impl ClassicalWitness {
    pub const STEP: f64 = 0.5;

    /// The `{0,1}` sequence `(1, 0, 1, 0, …)`.
    pub fn coefficients(&self) -> Vec<u8> {
        (0..self.depth).map(|i| u8::from(i % 2 == 0)).collect()
    }

    /// Tabulated form (feasible for small depths only).
    pub fn tabulate(&self) -> PaleyWalsh {
        let dim = 1usize << self.depth;
        let n_max = self.depth;
        let mut phi = Vec::with_capacity(n_max);
        for n in 1..=n_max {
            let mut table = vec![0.0; (1 << (n - 1)) * dim];
            for h in 0..1usize << (n - 1) {
                let signs: Vec<f64> = (0..n - 1)
                    .map(|j| if (h >> (n - 2 - j)) & 1 == 1 { -1.0 } else { 1.0 })
                    .collect();
                let f_prev = self.f_along(&signs);
                self.phi(n, &signs, &f_prev, &mut table[h * dim..(h + 1) * dim]);
            }
            phi.push(table);
        }
        PaleyWalsh { dim, f0: vec![0.0; dim], phi }
    }

    /// `f_n` along a sign history of length `n`.
    pub fn f_along(&self, signs: &[f64]) -> Vec<f64> {
        let dim = 1usize << self.depth;
        let mut f = vec![0.0; dim];
        let mut phi = vec![0.0; dim];
        for n in 1..=signs.len() {
            self.phi(n, signs, &f, &mut phi);
            for (a, b) in f.iter_mut().zip(&phi) {
                *a += signs[n - 1] * b;
            }
        }
        f
    }

    fn r(&self, k: usize, coord: usize) -> f64 {
        if (coord >> (self.depth - k)) & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

impl PhiOracle for ClassicalWitness {
    fn dim(&self) -> usize {
        1 << self.depth
    }

    fn depth(&self) -> usize {
        self.depth
    }

    fn phi_sup(&self, _space: &NormedSpace, _n: usize) -> f64 {
        Self::STEP
    }

    fn phi(&self, n: usize, _signs: &[f64], f_prev: &[f64], out: &mut [f64]) {
        for (w, o) in out.iter_mut().enumerate() {
            *o = if f_prev[w].abs() < 1.0 { Self::STEP * self.r(n, w) } else { 0.0 };
        }
    }
}

/// Stopped-walk bridge parameters for the embedding: the walk moves by
/// `±1/resolution` and is absorbed at `±1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgePlan {
    pub resolution: usize,
    /// Walk steps per block (before the final nudge).
    pub steps: Vec<usize>,
    /// Exact probability that block `n`'s walk is not absorbed.
    pub leak: Vec<f64>,
    /// The allowed bound `2^{−n}/(‖φ_n‖_∞ + 1)`.
    pub bound: Vec<f64>,
}

impl BridgePlan {
    /// Smallest step counts with `P(not absorbed) ≤ budget·2^{−n}/(‖φ_n‖_∞+1)`.
    pub fn new(phi_sups: &[f64], resolution: usize, budget: f64) -> Result<Self, GenError> {
        if !(budget > 0.0 && budget < 1.0) {
            return Err(GenError::LeakBudget(budget));
        }
        if resolution == 0 {
            return Err(GenError::BridgeResolution(resolution));
        }
        let m = resolution as i64;
        let mut steps = Vec::new();
        let mut leak = Vec::new();
        let mut bound = Vec::new();
        for (i, s) in phi_sups.iter().enumerate() {
            let n = i + 1;
            let b = 0.5f64.powi(n as i32) / (s + 1.0);
            let target = budget * b;
            // distribution over interior positions −m+1..m−1
            let width = (2 * m - 1) as usize;
            let mut dist = vec![0.0; width];
            dist[(m - 1) as usize] = 1.0;
            let mut alive: f64 = 1.0;
            let mut k = 0usize;
            while alive > target {
                if k >= MAX_BRIDGE_STEPS {
                    return Err(GenError::BridgeTooLong { n });
                }
                let mut next = vec![0.0; width];
                for (j, p) in dist.iter().enumerate() {
                    if *p == 0.0 {
                        continue;
                    }
                    if j + 1 < width {
                        next[j + 1] += 0.5 * p;
                    }
                    if j >= 1 {
                        next[j - 1] += 0.5 * p;
                    }
                }
                dist = next;
                alive = dist.iter().sum();
                k += 1;
            }
            steps.push(k);
            leak.push(alive);
            bound.push(b);
        }
        Ok(Self { resolution, steps, leak, bound })
    }
}

/// One bridge run: positions in units of `1/resolution`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BridgeRun {
    pub min: i64,
    pub max: i64,
    pub end: i64,
}

/// Runs the stopped walk for `steps` steps plus the nudge, reporting each
/// move `(sub_step, ±1)` to `on_move`. Sub-step `steps` is the nudge.
pub fn run_bridge(rng: &mut impl Rng, resolution: usize, steps: usize, mut on_move: impl FnMut(usize, i64)) -> BridgeRun {
    let m = resolution as i64;
    let (mut x, mut lo, mut hi) = (0i64, 0i64, 0i64);
    for s in 0..steps {
        if x.abs() >= m {
            break;
        }
        let dx = if rng.random::<bool>() { 1 } else { -1 };
        x += dx;
        lo = lo.min(x);
        hi = hi.max(x);
        on_move(s, dx);
    }
    if x == 0 {
        let dx = if rng.random::<bool>() { 1 } else { -1 };
        x += dx;
        lo = lo.min(x);
        hi = hi.max(x);
        on_move(steps, dx);
    }
    BridgeRun { min: lo, max: hi, end: x }
}

/// Parameters of the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpec {
    pub coefficients: Vec<u8>,
    pub resolution: usize,
    pub leak_budget: f64,
}

impl EmbeddingSpec {
    pub fn new(coefficients: Vec<u8>, resolution: usize, leak_budget: f64) -> Self {
        Self { coefficients, resolution, leak_budget }
    }

    pub fn plan(&self, oracle: &dyn PhiOracle, space: &NormedSpace) -> Result<BridgePlan, GenError> {
        if self.coefficients.len() != oracle.depth() {
            return Err(GenError::CoeffLength { expected: oracle.depth(), got: self.coefficients.len() });
        }
        let sups: Vec<f64> = (1..=oracle.depth()).map(|n| oracle.phi_sup(space, n)).collect();
        BridgePlan::new(&sups, self.resolution, self.leak_budget)
    }
}

/// Summary statistics of one embedded path.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStats {
    /// `sup_t ‖M^c_t‖` over `[0, 1]`.
    pub cont_sup: f64,
    /// `‖M_1‖`.
    pub end_norm: f64,
    /// `‖f̃_n‖` for the Paley-Walsh martingale built from the signs `σ`.
    pub f_norm: f64,
    /// `σ_n`.
    pub signs: Vec<f64>,
    /// Per block: whether a bridge ran and its end differs from its sign.
    pub mismatch: Vec<bool>,
}

/// Simulates one path of the embedding without materializing it: only the
/// running supremum of the continuous part and the terminal values are
/// kept. Draws the same random numbers as [`gen_burkholder_embedding`].
pub fn simulate_embedding(
    oracle: &dyn PhiOracle,
    spec: &EmbeddingSpec,
    plan: &BridgePlan,
    space: &NormedSpace,
    rng: &mut impl Rng,
) -> EmbeddingStats {
    let d = oracle.dim();
    let depth = oracle.depth();
    let h = 1.0 / plan.resolution as f64;
    let mut f = oracle.f0();
    let mut m = f.clone();
    let mut cont = vec![0.0; d];
    let mut phi = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    let mut signs = Vec::with_capacity(depth);
    let mut mismatch = Vec::with_capacity(depth);
    let mut cont_sup = 0.0f64;
    for n in 1..=depth {
        oracle.phi(n, &signs, &f, &mut phi);
        let (sigma, incr) = if spec.coefficients[n - 1] == 0 {
            mismatch.push(false);
            let s = rademacher(rng);
            (s, s)
        } else {
            let run = run_bridge(rng, plan.resolution, plan.steps[n - 1], |_, _| {});
            // ‖C + xφ‖ is convex in x, so its maximum over the block is at
            // an extreme visited position
            for x in [run.min, run.max] {
                for i in 0..d {
                    tmp[i] = cont[i] + x as f64 * h * phi[i];
                }
                cont_sup = cont_sup.max(space.norm_of(&tmp));
            }
            let end = run.end as f64 * h;
            let s = end.signum();
            mismatch.push(end != s);
            for i in 0..d {
                cont[i] += end * phi[i];
            }
            (s, end)
        };
        for i in 0..d {
            f[i] += sigma * phi[i];
            m[i] += incr * phi[i];
        }
        signs.push(sigma);
    }
    EmbeddingStats {
        cont_sup,
        end_norm: space.norm_of(&m),
        f_norm: space.norm_of(&f),
        signs,
        mismatch,
    }
}

/// The embedding as a labeled path on `[0, 1]`.
///
/// Block `n` is `(1 − 2^{−n}, 1 − 2^{−n−1}]`. With `a_n = 0` the block is a
/// single step ending in an accessible jump `σ_n φ_n(σ_1, …, σ_{n−1})` with
/// a fresh sign. With `a_n = 1` the block is divided into the bridge's
/// sub-steps and carries `M^n φ_n(σ_1, …, σ_{n−1})` on the continuous
/// channel, with `σ_n` the sign of the bridge end.
pub fn gen_burkholder_embedding(
    oracle: &dyn PhiOracle,
    spec: &EmbeddingSpec,
    space: &NormedSpace,
    seed: u64,
) -> Result<(LabeledPath, EmbeddingStats), GenError> {
    if oracle.dim() != space.dim() {
        return Err(GenError::Dimension { expected: space.dim(), got: oracle.dim() });
    }
    let plan = spec.plan(oracle, space)?;
    let depth = oracle.depth();
    let d = oracle.dim();
    // grid: 0, 1/2, then the sub-steps of each block
    let mut times = vec![0.0, 0.5];
    let mut block_start = vec![0usize; depth + 1];
    for n in 1..=depth {
        block_start[n] = times.len() - 1;
        let a = 1.0 - 0.5f64.powi(n as i32);
        let len = 0.5f64.powi(n as i32 + 1);
        let sub = if spec.coefficients[n - 1] == 0 { 1 } else { plan.steps[n - 1] + 1 };
        for j in 1..=sub {
            times.push(if j == sub { a + len } else { a + len * j as f64 / sub as f64 });
        }
    }
    let grid = Arc::new(TimeGrid::new(times)?);
    let mut b = PathBuilder::new(grid, *space).initial(&oracle.f0());
    let mut rng = path_rng(seed, 0);
    let h = 1.0 / plan.resolution as f64;
    let mut f = oracle.f0();
    let mut phi = vec![0.0; d];
    let mut signs = Vec::with_capacity(depth);
    let mut inc = vec![0.0; d];
    for n in 1..=depth {
        oracle.phi(n, &signs, &f, &mut phi);
        let start = block_start[n];
        let sigma = if spec.coefficients[n - 1] == 0 {
            let s = rademacher(&mut rng);
            let k = start + 1;
            b.declare_predictable(k);
            let jump: Vec<f64> = phi.iter().map(|x| s * x).collect();
            b.push(k, Label::AccJump, &jump);
            s
        } else {
            let run = run_bridge(&mut rng, plan.resolution, plan.steps[n - 1], |s, dx| {
                for i in 0..d {
                    inc[i] = dx as f64 * h * phi[i];
                }
                b.push(start + 1 + s, Label::Cont, &inc);
            });
            (run.end as f64).signum()
        };
        for i in 0..d {
            f[i] += sigma * phi[i];
        }
        signs.push(sigma);
    }
    let path = b.build()?;
    let stats = simulate_embedding(oracle, spec, &plan, space, &mut path_rng(seed, 0));
    Ok((path, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finprob::{is_martingale, rademacher_sign};
    use crate::process::ChannelSet;

    #[test]
    fn paley_walsh_random_walk() {
        let space = NormedSpace::euclidean(2);
        let pw = PaleyWalsh::constant_steps(&[1.0, 0.0], 3);
        let f = gen_paley_walsh(&pw, &space).unwrap();
        let check = is_martingale(&f, 0.0);
        assert!(check.holds && check.max_violation == 0.0);
        let tree = f.tree().clone();
        let second: f64 = tree.expectation(|w| f.at(3, w).iter().map(|x| x * x).sum());
        assert_eq!(second, 3.0);
        for w in 0..8 {
            assert_eq!(f.at(3, w)[1], 0.0);
        }
    }

    #[test]
    fn paley_walsh_depth_one() {
        let space = NormedSpace::euclidean(2);
        let pw = PaleyWalsh::new(2, vec![0.0, 0.0], vec![vec![2.0, -1.0]]).unwrap();
        let f = gen_paley_walsh(&pw, &space).unwrap();
        assert_eq!(f.at(1, 0), &[2.0, -1.0]);
        assert_eq!(f.at(1, 1), &[-2.0, 1.0]);
        assert_eq!(crate::finprob::cond_expect(&f, 1, 0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn haar_type_has_one_nonzero_increment_per_atom() {
        // φ_n is nonzero only on the all-(+1) history: the walk leaves
        // the branch at its first −1 and is frozen from then on
        let depth = 4;
        let phi = (1..=depth)
            .map(|n| {
                let mut t = vec![0.0; 1 << (n - 1)];
                t[0] = 1.0;
                t
            })
            .collect();
        let pw = PaleyWalsh::new(1, vec![0.0], phi).unwrap();
        let f = gen_paley_walsh(&pw, &NormedSpace::scalar()).unwrap();
        assert!(is_martingale(&f, 0.0).holds);
        for w in 0..1 << depth {
            let nonzero = (1..=depth).filter(|&n| f.increment(n, w)[0] != 0.0).count();
            // the path along all +1 has all increments nonzero
            let expected = if w == 0 { depth } else { (w.leading_zeros() - (usize::BITS - depth as u32)) as usize + 1 };
            assert_eq!(nonzero, expected, "atom {w}");
        }
    }

    #[test]
    fn paley_walsh_shape_errors() {
        assert!(matches!(
            PaleyWalsh::new(1, vec![0.0], vec![vec![1.0], vec![1.0]]),
            Err(GenError::PhiShape { n: 2, expected: 2, got: 1 })
        ));
        let pw = PaleyWalsh::constant_steps(&[1.0], 2);
        assert!(gen_paley_walsh(&pw, &NormedSpace::euclidean(2)).is_err());
    }

    #[test]
    fn random_tree_martingales() {
        let space = NormedSpace::lq(3, 1.0).unwrap();
        let c = gen_random_tree_martingale(5, 0, 2, &space).unwrap();
        assert_eq!(c.depth(), 0);
        for seed in 0..20 {
            let m = gen_random_tree_martingale(seed, 4, 3, &space).unwrap();
            assert!(is_martingale(&m, 1e-12).holds);
            let h = gen_random_tree_martingale_with(seed, 3, 2, &space, LeafLaw::HeavyTailed).unwrap();
            assert!(is_martingale(&h, 1e-12).holds);
        }
        assert!(matches!(gen_random_tree_martingale(0, 2, 1, &space), Err(GenError::Branching(1))));
        assert!(gen_random_tree_martingale(0, 21, 2, &space).is_err());
        let a = gen_random_tree_martingale(9, 3, 2, &space).unwrap();
        let b = gen_random_tree_martingale(9, 3, 2, &space).unwrap();
        assert_eq!(a, b);
    }

    fn unit_grid(steps: usize) -> Arc<TimeGrid> {
        Arc::new(TimeGrid::uniform(1.0, steps).unwrap())
    }

    #[test]
    fn continuous_driver_examples() {
        let space = NormedSpace::scalar();
        let flat = ContinuousDriver { volatility: Volatility::Constant(0.0), direction: Direction::Fixed(vec![1.0]) };
        let p = gen_continuous_driver(unit_grid(50), flat, &space, 3).unwrap();
        assert_eq!(p.values().sup(), 0.0);

        let unit = ContinuousDriver { volatility: Volatility::Constant(1.0), direction: Direction::Fixed(vec![1.0]) };
        let model = GridModel::new(unit_grid(16), space, vec![0.0], Some(unit), None, None).unwrap();
        // each step is ±√(1/16), so M_1² has exact mean 1; check the law
        let mut second = 0.0;
        for k in 1..=16 {
            let law = model.step_law(k).unwrap();
            second += law.atoms.iter().map(|(p, x)| p * x[0] * x[0]).sum::<f64>();
        }
        assert!((second - 1.0).abs() < 1e-12);
        let n = 4000;
        let mc: f64 = (0..n)
            .map(|i| {
                let p = model.sample_seeded(11, i).unwrap();
                assert!(!p.has_channel(Label::QlcJump) && !p.has_channel(Label::AccJump));
                p.values().last()[0].powi(2)
            })
            .sum::<f64>()
            / n as f64;
        // M_1² has variance 2 − 2/16 for the binomial walk
        assert!((mc - 1.0).abs() < 4.0 * (1.875f64 / n as f64).sqrt(), "{mc}");
    }

    #[test]
    fn random_direction_has_no_finite_law() {
        let space = NormedSpace::euclidean(3);
        let drv = ContinuousDriver {
            volatility: Volatility::Constant(1.0),
            direction: Direction::Named(DirectionName::Random),
        };
        let model = GridModel::new(unit_grid(4), space, vec![0.0; 3], Some(drv), None, None).unwrap();
        assert!(model.step_law(1).is_none());
        assert!(!model.has_finite_step_laws());
        let p = model.sample_seeded(1, 0).unwrap();
        let inc = p.jump_at(crate::process::StopTime::at(1));
        assert!((space.norm_of(&inc) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn piecewise_volatility() {
        let v = Volatility::Piecewise { times: vec![0.0, 0.5], values: vec![1.0, 3.0] };
        v.validate().unwrap();
        assert_eq!(v.at(0.0), 1.0);
        assert_eq!(v.at(0.49), 1.0);
        assert_eq!(v.at(0.5), 3.0);
        assert_eq!(v.at(7.0), 3.0);
        assert!(Volatility::Piecewise { times: vec![0.1], values: vec![1.0] }.validate().is_err());
        assert!(Volatility::Constant(-1.0).validate().is_err());
    }

    #[test]
    fn poisson_unit_marks_moments() {
        // E M_t = 0 and E M_t² = γt − γ²Σ Δt² for the per-step thinning
        let space = NormedSpace::scalar();
        let gamma = 2.0;
        let steps = 40;
        let model = PoissonModel { intensity: gamma, marks: MarkLaw::point(vec![1.0]) };
        let gm = GridModel::new(unit_grid(steps), space, vec![0.0], None, Some(model.clone()), None).unwrap();
        let mut exact_mean = 0.0;
        let mut exact_var = 0.0;
        for k in 1..=steps {
            let law = gm.step_law(k).unwrap();
            let m = law.mean()[0];
            exact_mean += m;
            exact_var += law.atoms.iter().map(|(p, x)| p * (x[0] - m).powi(2)).sum::<f64>();
        }
        assert!(exact_mean.abs() < 1e-12);
        let dt = 1.0 / steps as f64;
        let oracle_var = gamma - gamma * gamma * steps as f64 * dt * dt;
        assert!((exact_var - oracle_var).abs() < 1e-12);
        // the continuum value γt is recovered as the mesh shrinks
        assert!((oracle_var - gamma).abs() <= gamma * gamma * dt + 1e-12);

        let n = 20_000u64;
        let finals: Vec<f64> = (0..n).map(|i| gm.sample_seeded(5, i).unwrap().values().last()[0]).collect();
        let mean = finals.iter().sum::<f64>() / n as f64;
        let var = finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 * (oracle_var / n as f64).sqrt(), "{mean}");
        assert!((var - oracle_var).abs() < 0.1 * oracle_var, "{var}");

        let p = gen_compensated_poisson(unit_grid(steps), model, &space, 1).unwrap();
        for (k, label, v) in p.increments() {
            match label {
                Label::QlcDrift => assert!((v[0] + gamma / steps as f64).abs() < 1e-15, "step {k}"),
                Label::QlcJump => assert_eq!(v, &[1.0]),
                other => panic!("unexpected channel {other}"),
            }
        }
    }

    #[test]
    fn poisson_rare_jumps() {
        let space = NormedSpace::scalar();
        let gamma = 0.05;
        let model = PoissonModel { intensity: gamma, marks: MarkLaw::point(vec![2.0]) };
        let gm = GridModel::new(unit_grid(100), space, vec![0.0], None, Some(model), None).unwrap();
        let n = 20_000u64;
        let none = (0..n).filter(|&i| !gm.sample_seeded(8, i).unwrap().has_channel(Label::QlcJump)).count();
        let freq = none as f64 / n as f64;
        let exact = (1.0 - gamma / 100.0f64).powi(100);
        assert!((exact - (-gamma).exp()).abs() < 1e-4);
        assert!((freq - exact).abs() < 4.0 * (exact * (1.0 - exact) / n as f64).sqrt());
        // a path without jumps is the straight drift line
        let p = (0..n).map(|i| gm.sample_seeded(8, i).unwrap()).find(|p| !p.has_channel(Label::QlcJump)).unwrap();
        assert!((p.values().last()[0] + gamma * 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_mean_marks_have_no_drift() {
        let space = NormedSpace::euclidean(2);
        let model = PoissonModel { intensity: 1.0, marks: MarkLaw::symmetric(vec![1.0, 1.0]) };
        let p = gen_compensated_poisson(unit_grid(20), model, &space, 4).unwrap();
        assert!(!p.has_channel(Label::QlcDrift));
    }

    #[test]
    fn mesh_and_law_validation() {
        let space = NormedSpace::scalar();
        let model = PoissonModel { intensity: 5.0, marks: MarkLaw::point(vec![1.0]) };
        assert!(matches!(
            gen_compensated_poisson(unit_grid(10), model, &space, 0),
            Err(GenError::MeshTooCoarse(_))
        ));
        let biased = AccessibleSeries { times: vec![0.5], marks: MarkLaw::point(vec![1.0]) };
        assert!(matches!(gen_accessible_series(unit_grid(2), biased, &space, 0), Err(GenError::NonZeroMean(_))));
        let off = AccessibleSeries { times: vec![0.3], marks: MarkLaw::symmetric(vec![1.0]) };
        assert!(matches!(gen_accessible_series(unit_grid(2), off, &space, 0), Err(GenError::TimeNotOnGrid(_))));
        let bad = MarkLaw::Finite { atoms: vec![vec![1.0]], probs: vec![0.7] };
        assert!(bad.validate(1).is_err());
    }

    #[test]
    fn accessible_series_examples() {
        let space = NormedSpace::scalar();
        let empty = AccessibleSeries { times: vec![], marks: MarkLaw::symmetric(vec![1.0]) };
        let p = gen_accessible_series(unit_grid(4), empty, &space, 0).unwrap();
        assert_eq!(p.values().sup(), 0.0);

        let single = AccessibleSeries { times: vec![0.5], marks: MarkLaw::symmetric(vec![1.0]) };
        let p = gen_accessible_series(unit_grid(4), single, &space, 2).unwrap();
        let v = p.values();
        for k in 0..=4 {
            assert_eq!(v.variation(k), v.norm_at(k));
        }

        let grid = Arc::new(TimeGrid::uniform(5.0, 5).unwrap());
        let all = AccessibleSeries { times: (1..=5).map(f64::from).collect(), marks: MarkLaw::symmetric(vec![1.0]) };
        let p = gen_accessible_series(grid, all, &space, 3).unwrap();
        assert_eq!(p.predictable_times(), &[1, 2, 3, 4, 5]);
        assert!(p.restrict(ChannelSet::QUASI_LEFT_CONTINUOUS).values().sup() == 0.0);
    }

    #[test]
    fn composite_model_routes_channels() {
        let space = NormedSpace::euclidean(3);
        let grid = unit_grid(20);
        let model = GridModel::new(
            grid,
            space,
            vec![0.1, 0.0, 0.0],
            Some(ContinuousDriver { volatility: Volatility::Constant(1.0), direction: Direction::Fixed(vec![1.0, 0.0, 0.0]) }),
            Some(PoissonModel { intensity: 1.0, marks: MarkLaw::point(vec![0.0, 1.0, 0.0]) }),
            Some(AccessibleSeries { times: vec![0.25, 0.5], marks: MarkLaw::symmetric(vec![0.0, 0.0, 1.0]) }),
        )
        .unwrap();
        assert!(model.has_finite_step_laws());
        for k in 1..=20 {
            let law = model.step_law(k).unwrap();
            let total: f64 = law.atoms.iter().map(|a| a.0).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(law.mean().iter().all(|x| x.abs() < 1e-15));
            assert_eq!(law.atoms.len(), 4);
        }
        for i in 0..50 {
            let p = model.sample_seeded(2, i).unwrap();
            for (k, label, _) in p.increments() {
                if label == Label::QlcJump || label == Label::QlcDrift {
                    assert!(k != 5 && k != 10);
                }
            }
        }
    }

    #[test]
    fn bridge_plan_leak_bound() {
        let plan = BridgePlan::new(&[0.5, 0.5, 2.0], 4, 0.25).unwrap();
        for n in 0..3 {
            assert!(plan.leak[n] <= 0.25 * plan.bound[n]);
            assert!(plan.leak[n] < plan.bound[n]);
        }
        assert_eq!(plan.bound[0], 0.5 / 1.5);
        assert!(matches!(BridgePlan::new(&[1.0], 4, 1.0), Err(GenError::LeakBudget(_))));
        assert!(matches!(BridgePlan::new(&[1.0], 4, 0.0), Err(GenError::LeakBudget(_))));
        // resolution 1 absorbs after a single step
        let one = BridgePlan::new(&[1.0], 1, 0.5).unwrap();
        assert_eq!(one.steps, vec![1]);
        assert_eq!(one.leak, vec![0.0]);
    }

    #[test]
    fn bridge_leak_matches_enumeration() {
        // enumerate all 2^S walks for a small plan
        let plan = BridgePlan::new(&[0.0, 0.0], 2, 0.9).unwrap();
        for n in 0..2 {
            let s = plan.steps[n];
            let mut alive = 0usize;
            for bits in 0..1u32 << s {
                let mut x = 0i64;
                for j in 0..s {
                    if x.abs() >= 2 {
                        break;
                    }
                    x += if bits >> j & 1 == 1 { 1 } else { -1 };
                }
                if x.abs() < 2 {
                    alive += 1;
                }
            }
            assert!((alive as f64 / (1u64 << s) as f64 - plan.leak[n]).abs() < 1e-15);
        }
    }

    #[test]
    fn bridge_end_is_never_zero_and_bounded() {
        let mut rng = path_rng(1, 0);
        for _ in 0..2000 {
            let run = run_bridge(&mut rng, 4, 6, |_, _| {});
            assert!(run.end != 0 && run.end.abs() <= 4);
            assert!(run.min <= run.end && run.end <= run.max);
        }
    }

    #[test]
    fn classical_witness_structure() {
        let w = ClassicalWitness { depth: 4 };
        let space = NormedSpace::lq(16, f64::INFINITY).unwrap();
        let pw = w.tabulate();
        let f = gen_paley_walsh(&pw, &space).unwrap();
        assert!(is_martingale(&f, 0.0).holds);
        let a = w.coefficients();
        assert_eq!(a, vec![1, 0, 1, 0]);
        for atom in 0..16 {
            // ‖f_n‖ = 1 for n ≥ 2 on every atom
            for n in 2..=4 {
                assert_eq!(space.norm_of(f.at(n, atom)), 1.0);
            }
            let mut g = vec![0.0; 16];
            for n in 1..=4 {
                if a[n - 1] == 1 {
                    for (gi, di) in g.iter_mut().zip(f.increment(n, atom)) {
                        *gi += di;
                    }
                }
            }
            assert_eq!(space.norm_of(&g), 1.0);
        }
        // tracked and tabulated forms agree
        let signs: Vec<f64> = (1..=4).map(|k| rademacher_sign(4, k, 6)).collect();
        assert_eq!(w.f_along(&signs), f.at(4, 6));
    }

    #[test]
    fn witness_transform_grows_with_depth() {
        for depth in [2usize, 4, 6, 8] {
            let w = ClassicalWitness { depth };
            let space = NormedSpace::lq(1 << depth, f64::INFINITY).unwrap();
            let mut rng = path_rng(depth as u64, 0);
            for _ in 0..5 {
                let signs: Vec<f64> = (0..depth).map(|_| rademacher(&mut rng)).collect();
                let mut f = vec![0.0; 1 << depth];
                let mut g = f.clone();
                let mut phi = f.clone();
                for n in 1..=depth {
                    w.phi(n, &signs, &f, &mut phi);
                    for i in 0..f.len() {
                        f[i] += signs[n - 1] * phi[i];
                        if n % 2 == 1 {
                            g[i] += signs[n - 1] * phi[i];
                        }
                    }
                }
                assert_eq!(space.norm_of(&f), 1.0);
                assert_eq!(space.norm_of(&g), depth.div_ceil(2) as f64 * 0.5);
            }
        }
    }

    #[test]
    fn embedding_all_accessible_is_paley_walsh() {
        let space = NormedSpace::euclidean(2);
        let pw = PaleyWalsh::constant_steps(&[1.0, -1.0], 3);
        let spec = EmbeddingSpec::new(vec![0, 0, 0], 4, 0.25);
        let (path, stats) = gen_burkholder_embedding(&pw, &spec, &space, 7).unwrap();
        assert!(!path.has_channel(Label::Cont));
        assert_eq!(stats.cont_sup, 0.0);
        assert_eq!(path.predictable_times().len(), 3);
        let end = path.values();
        assert!((space.norm_of(end.last()) - stats.end_norm).abs() < 1e-12);
        assert_eq!(stats.end_norm, stats.f_norm);
    }

    #[test]
    fn embedding_single_bridge() {
        let space = NormedSpace::scalar();
        let pw = PaleyWalsh::new(1, vec![0.0], vec![vec![2.0]]).unwrap();
        let spec = EmbeddingSpec::new(vec![1], 4, 0.25);
        for seed in 0..50 {
            let (path, stats) = gen_burkholder_embedding(&pw, &spec, &space, seed).unwrap();
            let v = path.values();
            assert!(v.sup() <= 2.0 + 1e-12);
            assert!((stats.cont_sup - path.trajectory(ChannelSet::CONTINUOUS).sup()).abs() < 1e-12);
            assert!((stats.end_norm - v.norm_at(v.steps())).abs() < 1e-12);
            assert!(stats.end_norm > 0.0);
        }
    }

    #[test]
    fn streaming_matches_materialized_path() {
        let w = ClassicalWitness { depth: 4 };
        let space = NormedSpace::lq(16, f64::INFINITY).unwrap();
        let spec = EmbeddingSpec::new(w.coefficients(), 4, 0.25);
        for seed in 0..20 {
            let (path, stats) = gen_burkholder_embedding(&w, &spec, &space, seed).unwrap();
            let c = path.trajectory(ChannelSet::CONTINUOUS);
            assert!((stats.cont_sup - c.sup()).abs() < 1e-12, "seed {seed}");
            assert!((stats.end_norm - space.norm_of(path.values().last())).abs() < 1e-12);
            assert_eq!(path.hit_time(1e9).index, None);
        }
    }

    #[test]
    fn embedding_rejects_bad_budget() {
        let pw = PaleyWalsh::constant_steps(&[1.0], 2);
        let spec = EmbeddingSpec::new(vec![1, 1], 4, 1.5);
        assert!(matches!(
            gen_burkholder_embedding(&pw, &spec, &NormedSpace::scalar(), 0),
            Err(GenError::LeakBudget(_))
        ));
        let spec = EmbeddingSpec::new(vec![1], 4, 0.5);
        assert!(matches!(
            gen_burkholder_embedding(&pw, &spec, &NormedSpace::scalar(), 0),
            Err(GenError::CoeffLength { .. })
        ));
    }

    #[test]
    fn deterministic_generation() {
        let space = NormedSpace::euclidean(3);
        let model = GridModel::new(
            unit_grid(30),
            space,
            vec![0.0; 3],
            Some(ContinuousDriver {
                volatility: Volatility::Constant(0.5),
                direction: Direction::Named(DirectionName::Random),
            }),
            Some(PoissonModel { intensity: 1.0, marks: MarkLaw::Gaussian { mean: vec![0.5, 0.0, 0.0], std: 1.0 } }),
            None,
        )
        .unwrap();
        assert_eq!(model.sample_seeded(3, 17).unwrap(), model.sample_seeded(3, 17).unwrap());
        assert_ne!(model.sample_seeded(3, 17).unwrap(), model.sample_seeded(3, 18).unwrap());
    }
}
