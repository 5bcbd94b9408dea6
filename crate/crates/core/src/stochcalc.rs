//! Jump measures and their compensators, martingale transforms with
//! predictable scalar coefficients, and (weak) differential subordination.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::finprob::{discrete_compensator, AdaptedProcess, FinprobError};
use crate::generators::{GridModel, PoissonModel};
use crate::process::{ChannelSet, Label, LabeledPath, PathBuilder, ProcessError, TimeGrid, Trajectory};
use crate::space::{pairing, DualSet};

#[derive(Debug, Error)]
pub enum CalcError {
    #[error("jump at step {0} is neither at a predictable time nor covered by a Poisson model")]
    UncompensatedJump(usize),
    #[error("jump stream refers to step {step}, grid has {steps} steps")]
    GridMismatch { step: usize, steps: usize },
    #[error("path has a continuous component")]
    ContinuousPart,
    #[error("path does not start at 0")]
    NonZeroStart,
    #[error("coefficient at level {level} is not predictable")]
    NotPredictable { level: usize },
    #[error("coefficient {value} at step {step} is not in [−1, 1]")]
    CoefficientRange { step: usize, value: f64 },
    #[error("expected {expected} coefficients, got {got}")]
    CoefficientCount { expected: usize, got: usize },
    #[error(transparent)]
    Finprob(#[from] FinprobError),
    #[error(transparent)]
    Process(#[from] ProcessError),
}

/// Jumps of a path: grid index and nonzero mark, at most one per index.
/// Index 0 carries `M_0`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JumpStream {
    pub events: Vec<(usize, Vec<f64>)>,
}

impl JumpStream {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    /// `∫ ‖x‖ dμ`.
    pub fn total_mark_norm(&self, space: &crate::space::NormedSpace) -> f64 {
        self.events.iter().map(|(_, x)| space.norm_of(x)).sum()
    }
}

/// Jump measure of the selected jump channels: the net jump per step over
/// `QLC_JUMP` and `ACC_JUMP` entries in `channels`, plus `M_0` at index 0
/// when the initial value is selected.
pub fn jump_measure(path: &LabeledPath, channels: ChannelSet) -> JumpStream {
    let mut events: Vec<(usize, Vec<f64>)> = Vec::new();
    if channels.has_initial() && path.initial().iter().any(|x| *x != 0.0) {
        events.push((0, path.initial().to_vec()));
    }
    for (k, label, v) in path.increments() {
        if !matches!(label, Label::QlcJump | Label::AccJump) || !channels.contains(label) {
            continue;
        }
        match events.last_mut() {
            Some((j, acc)) if *j == k => {
                for (a, b) in acc.iter_mut().zip(v) {
                    *a += b;
                }
            }
            _ => events.push((k, v.to_vec())),
        }
    }
    events.retain(|(_, x)| x.iter().any(|v| *v != 0.0));
    JumpStream { events }
}

/// Compensator of a jump stream on a grid: jumps at declared predictable
/// steps have zero-mean marks and need no compensation; all other jumps are
/// governed by the Poisson model `γ dt ⊗ ρ`, compensated by the drift
/// `−γ·m̄·Δt_k` on every step that is not predictable.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensatorModel {
    pub poisson: Option<PoissonModel>,
    pub predictable: Vec<usize>,
}

impl CompensatorModel {
    pub fn zero() -> Self {
        Self { poisson: None, predictable: Vec::new() }
    }

    pub fn of_grid_model(model: &GridModel) -> Self {
        Self { poisson: model.poisson().cloned(), predictable: model.accessible_steps().to_vec() }
    }
}

/// `∫ x d(μ − ν)` as a labeled path: unpredictable jumps on `QLC_JUMP`,
/// predictable ones on `ACC_JUMP`, the compensator on `QLC_DRIFT`.
pub fn compensate(
    stream: &JumpStream,
    model: &CompensatorModel,
    grid: &Arc<TimeGrid>,
    space: &crate::space::NormedSpace,
) -> Result<LabeledPath, CalcError> {
    let steps = grid.steps();
    let mut b = PathBuilder::new(grid.clone(), *space);
    let mut predictable = model.predictable.clone();
    predictable.sort_unstable();
    for &k in &predictable {
        if k == 0 || k > steps {
            return Err(CalcError::GridMismatch { step: k, steps });
        }
        b.declare_predictable(k);
    }
    let is_pred = |k: usize| predictable.binary_search(&k).is_ok();
    for (k, x) in &stream.events {
        let k = *k;
        if k > steps {
            return Err(CalcError::GridMismatch { step: k, steps });
        }
        if k == 0 {
            b.set_initial(x);
        } else if is_pred(k) {
            b.push(k, Label::AccJump, x);
        } else if model.poisson.is_some() {
            b.push(k, Label::QlcJump, x);
        } else {
            return Err(CalcError::UncompensatedJump(k));
        }
    }
    if let Some(p) = &model.poisson {
        for k in 1..=steps {
            if !is_pred(k) {
                b.push(k, Label::QlcDrift, &p.drift(grid, k));
            }
        }
    }
    Ok(b.build()?)
}

/// Compensated jump process on a tree: `A − V` with `V` the discrete
/// compensator of `A` (which must start at 0).
pub fn compensate_tree(jumps: &AdaptedProcess) -> Result<AdaptedProcess, CalcError> {
    let v = discrete_compensator(jumps)?;
    Ok(jumps.sub(&v)?)
}

/// `∫ x dμ^M` on a tree: the pure sum of the increments of `M`, `M_0`
/// excluded.
pub fn tree_jump_sum(m: &AdaptedProcess) -> AdaptedProcess {
    let tree = m.tree().clone();
    let d = m.dim();
    let mut values: Vec<Vec<f64>> = vec![vec![0.0; d]];
    for n in 1..tree.n_levels() {
        let prev = &values[n - 1];
        let mut lv = vec![0.0; tree.n_blocks(n) * d];
        for c in 0..tree.n_blocks(n) {
            let p = tree.parent(n, c);
            let cur = m.value(n, c);
            let before = m.value(n - 1, p);
            for i in 0..d {
                lv[c * d + i] = prev[p * d + i] + (cur[i] - before[i]);
            }
        }
        values.push(lv);
    }
    AdaptedProcess::from_level_values(tree, *m.space(), values).expect("shape preserved")
}

/// Rebuilds a purely discontinuous grid martingale with `M_0 = 0` from its
/// jump measure and compensator model.
pub fn reconstruct_from_jumps(path: &LabeledPath, model: &CompensatorModel) -> Result<LabeledPath, CalcError> {
    if path.has_channel(Label::Cont) {
        return Err(CalcError::ContinuousPart);
    }
    if path.initial().iter().any(|x| *x != 0.0) {
        return Err(CalcError::NonZeroStart);
    }
    let stream = jump_measure(path, ChannelSet::JUMPS);
    compensate(&stream, model, path.grid(), path.space())
}

/// Tree version: compensates the jump sum of `M` with the exact discrete
/// compensator.
pub fn reconstruct_from_jumps_tree(m: &AdaptedProcess) -> Result<AdaptedProcess, CalcError> {
    if m.level_values(0).iter().any(|x| *x != 0.0) {
        return Err(CalcError::NonZeroStart);
    }
    compensate_tree(&tree_jump_sum(m))
}

/// Rule producing predictable scalar coefficients `a_0, a_1, …`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TransformRule {
    /// Fixed coefficients `a_0, …, a_K`.
    Explicit { coefficients: Vec<f64> },
    /// `a_0 = 1`, then `1, 0, 1, 0, …` from step 1.
    Alternating,
    /// `a_n = before` while `max_{k<n} ‖M_k‖ < level`, then `after`.
    HitAndFreeze {
        level: f64,
        #[serde(default = "one")]
        before: f64,
        #[serde(default)]
        after: f64,
    },
    /// Deterministic pseudo-random coefficients in `[−1, 1]` keyed by the
    /// step and the block of the previous level.
    Scrambled { seed: u64 },
}

fn one() -> f64 {
    1.0
}

impl TransformRule {
    pub fn identity() -> Self {
        TransformRule::Explicit { coefficients: Vec::new() }
    }

    /// Whether every coefficient lies in `[−1, 1]`.
    pub fn is_contraction(&self) -> bool {
        match self {
            TransformRule::Explicit { coefficients } => coefficients.iter().all(|a| a.abs() <= 1.0),
            TransformRule::Alternating | TransformRule::Scrambled { .. } => true,
            TransformRule::HitAndFreeze { before, after, .. } => before.abs() <= 1.0 && after.abs() <= 1.0,
        }
    }

    /// Coefficient for step `n` given the history of values up to step
    /// `n − 1` (with `key` identifying that history on a tree).
    fn coefficient(&self, n: usize, history_sup: f64, key: u64) -> f64 {
        match self {
            TransformRule::Explicit { coefficients } => coefficients.get(n).copied().unwrap_or(1.0),
            TransformRule::Alternating => {
                if n == 0 || n % 2 == 1 {
                    1.0
                } else {
                    0.0
                }
            }
            TransformRule::HitAndFreeze { level, before, after } => {
                if n == 0 || history_sup < *level {
                    *before
                } else {
                    *after
                }
            }
            TransformRule::Scrambled { seed } => {
                let h = splitmix(seed ^ splitmix((n as u64) << 32 ^ key));
                (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            }
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Predictable coefficients on a tree: `a_0` and, for each level `n ≥ 1`,
/// one coefficient per block of level `n − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeCoeffs {
    pub a0: f64,
    pub levels: Vec<Vec<f64>>,
}

impl TreeCoeffs {
    /// Coefficients from a per-atom function `a(n, ω)`, rejected unless
    /// `a(n, ·)` is constant on the blocks of level `n − 1`.
    pub fn from_atom_fn(m: &AdaptedProcess, mut a: impl FnMut(usize, usize) -> f64) -> Result<Self, CalcError> {
        let tree = m.tree();
        let a0 = a(0, 0);
        if (1..tree.n_atoms()).any(|w| a(0, w) != a0) {
            return Err(CalcError::NotPredictable { level: 0 });
        }
        let mut levels = Vec::with_capacity(tree.depth());
        for n in 1..tree.n_levels() {
            let mut lv = Vec::with_capacity(tree.n_blocks(n - 1));
            for b in 0..tree.n_blocks(n - 1) {
                let r = tree.block_range(n - 1, b);
                let first = a(n, r.start);
                if r.clone().any(|w| a(n, w) != first) {
                    return Err(CalcError::NotPredictable { level: n });
                }
                lv.push(first);
            }
            levels.push(lv);
        }
        Ok(Self { a0, levels })
    }

    /// Evaluates a rule along the tree.
    pub fn from_rule(m: &AdaptedProcess, rule: &TransformRule) -> Self {
        let tree = m.tree();
        let a0 = rule.coefficient(0, 0.0, 0);
        let mut levels = Vec::with_capacity(tree.depth());
        for n in 1..tree.n_levels() {
            let lv = (0..tree.n_blocks(n - 1))
                .map(|b| {
                    let w = tree.block_range(n - 1, b).start;
                    rule.coefficient(n, m.running_sup(n - 1, w), b as u64)
                })
                .collect();
            levels.push(lv);
        }
        Self { a0, levels }
    }

    pub fn max_abs(&self) -> f64 {
        self.levels.iter().flatten().fold(self.a0.abs(), |m, a| m.max(a.abs()))
    }
}

/// `(TM)_0 = a_0 M_0`, `Δ(TM)_n = a_n ΔM_n`.
pub fn apply_transform_tree(m: &AdaptedProcess, coeffs: &TreeCoeffs) -> Result<AdaptedProcess, CalcError> {
    let tree = m.tree().clone();
    if coeffs.levels.len() != tree.depth() {
        return Err(CalcError::CoefficientCount { expected: tree.depth(), got: coeffs.levels.len() });
    }
    let d = m.dim();
    let mut values: Vec<Vec<f64>> = vec![m.level_values(0).iter().map(|x| coeffs.a0 * x).collect()];
    for n in 1..tree.n_levels() {
        if coeffs.levels[n - 1].len() != tree.n_blocks(n - 1) {
            return Err(CalcError::CoefficientCount {
                expected: tree.n_blocks(n - 1),
                got: coeffs.levels[n - 1].len(),
            });
        }
        let prev = &values[n - 1];
        let mut lv = vec![0.0; tree.n_blocks(n) * d];
        for c in 0..tree.n_blocks(n) {
            let p = tree.parent(n, c);
            let a = coeffs.levels[n - 1][p];
            let cur = m.value(n, c);
            let before = m.value(n - 1, p);
            for i in 0..d {
                lv[c * d + i] = prev[p * d + i] + a * (cur[i] - before[i]);
            }
        }
        values.push(lv);
    }
    Ok(AdaptedProcess::from_level_values(tree, *m.space(), values)?)
}

/// Per-step coefficients of a rule along a grid path; `a_k` only looks at
/// values up to `t_{k−1}`.
pub fn grid_coefficients(path: &LabeledPath, rule: &TransformRule) -> Vec<f64> {
    let v = path.values();
    let mut sup = 0.0f64;
    let mut out = Vec::with_capacity(path.steps() + 1);
    out.push(rule.coefficient(0, 0.0, 0));
    for k in 1..=path.steps() {
        sup = sup.max(v.norm_at(k - 1));
        out.push(rule.coefficient(k, sup, 0));
    }
    out
}

/// Scales every increment of step `k` by `a_k` and `M_0` by `a_0`, keeping
/// channel labels.
pub fn apply_transform_path(path: &LabeledPath, coeffs: &[f64]) -> Result<LabeledPath, CalcError> {
    if coeffs.len() != path.steps() + 1 {
        return Err(CalcError::CoefficientCount { expected: path.steps() + 1, got: coeffs.len() });
    }
    let x0: Vec<f64> = path.initial().iter().map(|x| coeffs[0] * x).collect();
    let mut b = PathBuilder::new(path.grid().clone(), *path.space()).initial(&x0);
    for &k in path.predictable_times() {
        b.declare_predictable(k);
    }
    for (k, label, v) in path.increments() {
        let scaled: Vec<f64> = v.iter().map(|x| coeffs[k] * x).collect();
        b.push(k, label, &scaled);
    }
    Ok(b.build()?)
}

fn dominated(n: f64, m: f64, tol: f64) -> bool {
    n <= m + tol * m.max(1.0)
}

/// Stepwise differential subordination of `⟨N, x*⟩` to `⟨M, x*⟩` on a grid.
pub fn is_differentially_subordinate(n: &Trajectory, m: &Trajectory, functional: &[f64], tol: f64) -> bool {
    n.steps() == m.steps()
        && (0..=n.steps()).all(|k| dominated(n.qv_increment(functional, k), m.qv_increment(functional, k), tol))
}

pub fn is_weakly_differentially_subordinate(n: &Trajectory, m: &Trajectory, duals: &DualSet, tol: f64) -> bool {
    duals.functionals().iter().all(|x| is_differentially_subordinate(n, m, x, tol))
}

/// Weak differential subordination of labeled paths, checked on the
/// channel-refined partition where continuous motion, drift and jumps of
/// one grid step occupy separate intervals.
pub fn is_weakly_differentially_subordinate_paths(
    n: &LabeledPath,
    m: &LabeledPath,
    duals: &DualSet,
    tol: f64,
) -> bool {
    let rn = n.channel_refined(ChannelSet::ALL);
    let rm = m.channel_refined(ChannelSet::ALL);
    is_weakly_differentially_subordinate(&rn, &rm, duals, tol)
}

/// Tree version, checked along every atom.
pub fn is_differentially_subordinate_tree(n: &AdaptedProcess, m: &AdaptedProcess, functional: &[f64], tol: f64) -> bool {
    if !n.same_shape(m) {
        return false;
    }
    let tree = n.tree();
    (0..tree.n_atoms()).all(|w| {
        (0..tree.n_levels()).all(|k| {
            let pn = pairing(&n.increment(k, w), functional);
            let pm = pairing(&m.increment(k, w), functional);
            dominated(pn * pn, pm * pm, tol)
        })
    })
}

pub fn is_weakly_differentially_subordinate_tree(
    n: &AdaptedProcess,
    m: &AdaptedProcess,
    duals: &DualSet,
    tol: f64,
) -> bool {
    duals.functionals().iter().all(|x| is_differentially_subordinate_tree(n, m, x, tol))
}
