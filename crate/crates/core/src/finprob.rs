//! Exact finite-probability backend.
//!
//! A [`FiltrationTree`] is a finite outcome set with a fixed ordering and a
//! refining sequence of partitions into contiguous index ranges. Every
//! conditional expectation is a dense weighted sum over those ranges, so the
//! results here are exact up to floating-point rounding. Dyadic probabilities
//! (Rademacher trees) are exactly representable and sum without error.

use std::ops::Range;
use std::sync::Arc;

use thiserror::Error;

use crate::space::NormedSpace;

/// Largest outcome set the backend will enumerate.
pub const MAX_ATOMS: usize = 1 << 20;

/// Default relative tolerance for [`is_martingale`].
pub const MARTINGALE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FinprobError {
    #[error("outcome space is empty")]
    Empty,
    #[error("outcome space of {0} atoms exceeds the cap of {MAX_ATOMS}")]
    TooManyAtoms(usize),
    #[error("atom {atom} has non-positive probability {p}")]
    NonPositiveProbability { atom: usize, p: f64 },
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("level {level} is not a partition of 0..{atoms} into increasing ranges")]
    MalformedLevel { level: usize, atoms: usize },
    #[error("level 0 must be the trivial partition")]
    NontrivialRoot,
    #[error("level {0} does not refine level {prev}", prev = .0 - 1)]
    NotRefining(usize),
    #[error("level {level} out of range (tree has levels 0..={max})")]
    LevelOutOfRange { level: usize, max: usize },
    #[error("conditioning level {to} is finer than source level {from}")]
    LevelOrder { from: usize, to: usize },
    #[error("expected {expected} values at level {level}, got {got}")]
    ValueCount { level: usize, expected: usize, got: usize },
    #[error("value at level {level} is not constant on block {block}")]
    NotMeasurable { level: usize, block: usize },
    #[error("process does not start at 0")]
    NonZeroStart,
    #[error("processes live on different trees or spaces")]
    Incompatible,
}

/// Finite outcome space with a refining sequence of partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct FiltrationTree {
    prob: Vec<f64>,
    /// Per level: block boundaries `0 = b_0 < b_1 < … < b_m = n_atoms`.
    bounds: Vec<Vec<usize>>,
    /// Per level: block index of every atom.
    owner: Vec<Vec<u32>>,
    block_prob: Vec<Vec<f64>>,
}

impl FiltrationTree {
    /// Builds a tree from atom probabilities and per-level block boundaries.
    pub fn new(prob: Vec<f64>, bounds: Vec<Vec<usize>>) -> Result<Self, FinprobError> {
        let n = prob.len();
        if n == 0 {
            return Err(FinprobError::Empty);
        }
        if n > MAX_ATOMS {
            return Err(FinprobError::TooManyAtoms(n));
        }
        for (atom, &p) in prob.iter().enumerate() {
            if !(p > 0.0) || !p.is_finite() {
                return Err(FinprobError::NonPositiveProbability { atom, p });
            }
        }
        let total: f64 = prob.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(FinprobError::NotNormalized(total));
        }
        if bounds.is_empty() || bounds[0] != [0, n] {
            return Err(FinprobError::NontrivialRoot);
        }
        for (level, b) in bounds.iter().enumerate() {
            let ok = b.len() >= 2
                && b[0] == 0
                && *b.last().unwrap() == n
                && b.windows(2).all(|w| w[0] < w[1]);
            if !ok {
                return Err(FinprobError::MalformedLevel { level, atoms: n });
            }
            if level > 0 {
                let finer = b;
                let coarser = &bounds[level - 1];
                // every coarse boundary must also be a fine boundary
                if !coarser.iter().all(|x| finer.binary_search(x).is_ok()) {
                    return Err(FinprobError::NotRefining(level));
                }
            }
        }
        let mut owner = Vec::with_capacity(bounds.len());
        let mut block_prob = Vec::with_capacity(bounds.len());
        for b in &bounds {
            let mut own = vec![0u32; n];
            let mut bp = Vec::with_capacity(b.len() - 1);
            for (blk, w) in b.windows(2).enumerate() {
                own[w[0]..w[1]].fill(blk as u32);
                bp.push(prob[w[0]..w[1]].iter().sum());
            }
            owner.push(own);
            block_prob.push(bp);
        }
        Ok(Self { prob, bounds, owner, block_prob })
    }

    /// Uniform tree where every block splits into `branching` equal children.
    pub fn uniform(depth: usize, branching: usize) -> Result<Self, FinprobError> {
        let branching = branching.max(1);
        let atoms = (branching as u128).checked_pow(depth as u32).unwrap_or(u128::MAX);
        if atoms > MAX_ATOMS as u128 {
            return Err(FinprobError::TooManyAtoms(atoms.min(usize::MAX as u128) as usize));
        }
        let n = atoms as usize;
        let prob = vec![1.0 / n as f64; n];
        let bounds = (0..=depth)
            .map(|level| {
                let size = n / branching.pow(level as u32);
                (0..=n / size).map(|i| i * size).collect()
            })
            .collect();
        Self::new(prob, bounds)
    }

    /// Dyadic tree carrying independent Rademacher signs `r_1, …, r_depth`.
    pub fn rademacher(depth: usize) -> Result<Self, FinprobError> {
        Self::uniform(depth, 2)
    }

    pub fn n_atoms(&self) -> usize {
        self.prob.len()
    }

    /// Number of levels (depth + 1).
    pub fn n_levels(&self) -> usize {
        self.bounds.len()
    }

    pub fn depth(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn prob(&self, atom: usize) -> f64 {
        self.prob[atom]
    }

    pub fn probs(&self) -> &[f64] {
        &self.prob
    }

    pub fn n_blocks(&self, level: usize) -> usize {
        self.bounds[level].len() - 1
    }

    pub fn block_range(&self, level: usize, block: usize) -> Range<usize> {
        self.bounds[level][block]..self.bounds[level][block + 1]
    }

    pub fn block_prob(&self, level: usize, block: usize) -> f64 {
        self.block_prob[level][block]
    }

    /// Block of `atom` at `level`.
    pub fn owner(&self, level: usize, atom: usize) -> usize {
        self.owner[level][atom] as usize
    }

    /// Blocks of level `level + 1` contained in `block` of level `level`.
    pub fn children(&self, level: usize, block: usize) -> Range<usize> {
        let r = self.block_range(level, block);
        self.owner(level + 1, r.start)..self.owner(level + 1, r.end - 1) + 1
    }

    /// Block of level `level - 1` containing `block` of level `level`.
    pub fn parent(&self, level: usize, block: usize) -> usize {
        self.owner(level - 1, self.bounds[level][block])
    }

    pub fn check_level(&self, level: usize) -> Result<(), FinprobError> {
        if level < self.n_levels() {
            Ok(())
        } else {
            Err(FinprobError::LevelOutOfRange { level, max: self.depth() })
        }
    }

    /// `Σ_ω P(ω) f(ω)`.
    pub fn expectation(&self, mut f: impl FnMut(usize) -> f64) -> f64 {
        self.prob.iter().enumerate().map(|(a, p)| p * f(a)).sum()
    }

    /// `P({ω : pred(ω)})`.
    pub fn probability(&self, mut pred: impl FnMut(usize) -> bool) -> f64 {
        self.prob.iter().enumerate().filter(|(a, _)| pred(*a)).map(|(_, p)| p).sum()
    }
}

/// Sign `r_k(ω) ∈ {−1, 1}` of the `k`-th Rademacher variable (`k ≥ 1`) on a
/// dyadic tree of the given depth. Atom 0 is the all-`+1` outcome.
pub fn rademacher_sign(depth: usize, k: usize, atom: usize) -> f64 {
    debug_assert!(k >= 1 && k <= depth);
    if (atom >> (depth - k)) & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Vector-valued process whose level-`n` value is constant on level-`n`
/// blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    tree: Arc<FiltrationTree>,
    space: NormedSpace,
    /// Per level: `n_blocks(level) * dim` values, block-major.
    values: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    pub fn from_level_values(
        tree: Arc<FiltrationTree>,
        space: NormedSpace,
        values: Vec<Vec<f64>>,
    ) -> Result<Self, FinprobError> {
        if values.len() != tree.n_levels() {
            return Err(FinprobError::LevelOutOfRange { level: values.len(), max: tree.depth() });
        }
        let d = space.dim();
        for (level, v) in values.iter().enumerate() {
            let expected = tree.n_blocks(level) * d;
            if v.len() != expected {
                return Err(FinprobError::ValueCount { level, expected, got: v.len() });
            }
        }
        Ok(Self { tree, space, values })
    }

    /// Builds a process from per-atom values, rejecting anything that is not
    /// constant on the blocks of its level.
    pub fn from_atom_fn(
        tree: Arc<FiltrationTree>,
        space: NormedSpace,
        mut f: impl FnMut(usize, usize, &mut [f64]),
    ) -> Result<Self, FinprobError> {
        let d = space.dim();
        let mut values = Vec::with_capacity(tree.n_levels());
        let mut buf = vec![0.0; d];
        for level in 0..tree.n_levels() {
            let mut lv = vec![0.0; tree.n_blocks(level) * d];
            for blk in 0..tree.n_blocks(level) {
                let r = tree.block_range(level, blk);
                let first = r.start;
                buf.fill(0.0);
                f(level, first, &mut buf);
                lv[blk * d..(blk + 1) * d].copy_from_slice(&buf);
                for atom in r.start + 1..r.end {
                    buf.fill(0.0);
                    f(level, atom, &mut buf);
                    let reference = &lv[blk * d..(blk + 1) * d];
                    let scale = reference.iter().fold(1.0f64, |m, x| m.max(x.abs()));
                    if buf.iter().zip(reference).any(|(a, b)| (a - b).abs() > 1e-12 * scale) {
                        return Err(FinprobError::NotMeasurable { level, block: blk });
                    }
                }
            }
            values.push(lv);
        }
        Ok(Self { tree, space, values })
    }

    pub fn constant(tree: Arc<FiltrationTree>, space: NormedSpace, c: &[f64]) -> Self {
        let values = (0..tree.n_levels())
            .map(|level| c.repeat(tree.n_blocks(level)))
            .collect();
        Self { tree, space, values }
    }

    pub fn zero(tree: Arc<FiltrationTree>, space: NormedSpace) -> Self {
        let c = space.zero();
        Self::constant(tree, space, &c)
    }

    pub fn tree(&self) -> &Arc<FiltrationTree> {
        &self.tree
    }

    pub fn space(&self) -> &NormedSpace {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn depth(&self) -> usize {
        self.tree.depth()
    }

    pub fn level_values(&self, level: usize) -> &[f64] {
        &self.values[level]
    }

    pub fn value(&self, level: usize, block: usize) -> &[f64] {
        let d = self.dim();
        &self.values[level][block * d..(block + 1) * d]
    }

    /// Value at `level` on the path of `atom`.
    pub fn at(&self, level: usize, atom: usize) -> &[f64] {
        self.value(level, self.tree.owner(level, atom))
    }

    /// Increment `X_n − X_{n−1}` along `atom`, with `ΔX_0 = X_0`.
    pub fn increment(&self, level: usize, atom: usize) -> Vec<f64> {
        let cur = self.at(level, atom);
        if level == 0 {
            return cur.to_vec();
        }
        let prev = self.at(level - 1, atom);
        cur.iter().zip(prev).map(|(a, b)| a - b).collect()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (Arc::ptr_eq(&self.tree, &other.tree) || self.tree == other.tree)
            && self.space.dim() == other.space.dim()
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self, FinprobError> {
        if !self.same_shape(other) {
            return Err(FinprobError::Incompatible);
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect())
            .collect();
        Ok(Self { tree: self.tree.clone(), space: self.space, values })
    }

    pub fn add(&self, other: &Self) -> Result<Self, FinprobError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, FinprobError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        let values = self.values.iter().map(|v| v.iter().map(|x| c * x).collect()).collect();
        Self { tree: self.tree.clone(), space: self.space, values }
    }

    /// Same values viewed in another space of equal dimension.
    pub fn with_space(&self, space: NormedSpace) -> Result<Self, FinprobError> {
        if space.dim() != self.dim() {
            return Err(FinprobError::Incompatible);
        }
        Ok(Self { tree: self.tree.clone(), space, values: self.values.clone() })
    }

    /// `E‖X_n‖`.
    pub fn expected_norm(&self, level: usize) -> f64 {
        (0..self.tree.n_blocks(level))
            .map(|b| self.tree.block_prob(level, b) * self.space.norm_of(self.value(level, b)))
            .sum()
    }

    /// Largest `‖X_n‖` over all levels and blocks.
    pub fn max_norm(&self) -> f64 {
        (0..self.tree.n_levels())
            .flat_map(|l| (0..self.tree.n_blocks(l)).map(move |b| (l, b)))
            .fold(0.0, |m, (l, b)| f64::max(m, self.space.norm_of(self.value(l, b))))
    }

    /// `‖X_0‖ + Σ_{k ≤ n} ‖ΔX_k‖` along `atom`.
    pub fn variation(&self, level: usize, atom: usize) -> f64 {
        let mut v = self.space.norm_of(self.at(0, atom));
        for k in 1..=level {
            v += self.space.dist(self.at(k, atom), self.at(k - 1, atom));
        }
        v
    }

    /// `max_{k ≤ n} ‖X_k‖` along `atom`.
    pub fn running_sup(&self, level: usize, atom: usize) -> f64 {
        (0..=level).fold(0.0, |m, k| f64::max(m, self.space.norm_of(self.at(k, atom))))
    }

    /// `Σ_{1 ≤ k ≤ n} ⟨ΔX_k, x*⟩²` along `atom`.
    pub fn quadratic_variation(&self, level: usize, atom: usize, functional: &[f64]) -> f64 {
        (1..=level)
            .map(|k| {
                let s: f64 = self
                    .at(k, atom)
                    .iter()
                    .zip(self.at(k - 1, atom))
                    .zip(functional)
                    .map(|((a, b), f)| (a - b) * f)
                    .sum();
                s * s
            })
            .sum()
    }
}

/// `E[X_from | F_to]` as block-major values on level `to`.
pub fn cond_expect(proc: &AdaptedProcess, from: usize, to: usize) -> Result<Vec<f64>, FinprobError> {
    let tree = proc.tree();
    tree.check_level(from)?;
    tree.check_level(to)?;
    if to > from {
        return Err(FinprobError::LevelOrder { from, to });
    }
    let d = proc.dim();
    let mut out = vec![0.0; tree.n_blocks(to) * d];
    for b in 0..tree.n_blocks(from) {
        let start = tree.block_range(from, b).start;
        let parent = tree.owner(to, start);
        let w = tree.block_prob(from, b);
        for (o, x) in out[parent * d..(parent + 1) * d].iter_mut().zip(proc.value(from, b)) {
            *o += w * x;
        }
    }
    for p in 0..tree.n_blocks(to) {
        let w = tree.block_prob(to, p);
        for o in &mut out[p * d..(p + 1) * d] {
            *o /= w;
        }
    }
    Ok(out)
}

/// Outcome of a martingale test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MartingaleCheck {
    pub holds: bool,
    /// Largest `‖E[X_{n+1} | F_n] − X_n‖` over levels and blocks.
    pub max_violation: f64,
}

/// Checks `E[X_{n+1} | F_n] = X_n` for every `n`, with `tol` relative to
/// `max(1, max ‖X‖)`.
pub fn is_martingale(proc: &AdaptedProcess, tol: f64) -> MartingaleCheck {
    let tree = proc.tree();
    let d = proc.dim();
    let mut worst = 0.0f64;
    for n in 0..tree.depth() {
        let ce = cond_expect(proc, n + 1, n).expect("levels in range");
        for b in 0..tree.n_blocks(n) {
            let v = proc.space().dist(&ce[b * d..(b + 1) * d], proc.value(n, b));
            worst = worst.max(v);
        }
    }
    let scale = proc.max_norm().max(1.0);
    MartingaleCheck { holds: worst <= tol * scale, max_violation: worst }
}

/// Whether every level-`n` value (`n ≥ 1`) is constant on level-`(n−1)`
/// blocks.
pub fn is_predictable(proc: &AdaptedProcess, tol: f64) -> bool {
    let tree = proc.tree();
    let scale = proc.max_norm().max(1.0);
    (1..tree.n_levels()).all(|n| {
        (0..tree.n_blocks(n - 1)).all(|p| {
            let kids = tree.children(n - 1, p);
            let first = proc.value(n, kids.start);
            kids.clone()
                .skip(1)
                .all(|c| proc.space().dist(proc.value(n, c), first) <= tol * scale)
        })
    })
}

/// Predictable compensator `V_n = Σ_{k ≤ n} E[ΔA_k | F_{k−1}]` of a process
/// starting at zero.
pub fn discrete_compensator(proc: &AdaptedProcess) -> Result<AdaptedProcess, FinprobError> {
    if proc.level_values(0).iter().any(|x| *x != 0.0) {
        return Err(FinprobError::NonZeroStart);
    }
    let tree = proc.tree();
    let d = proc.dim();
    let mut values: Vec<Vec<f64>> = vec![vec![0.0; d]];
    for n in 1..tree.n_levels() {
        let ce = cond_expect(proc, n, n - 1)?;
        let prev_v = &values[n - 1];
        let mut lv = vec![0.0; tree.n_blocks(n) * d];
        for c in 0..tree.n_blocks(n) {
            let p = tree.parent(n, c);
            let a_prev = proc.value(n - 1, p);
            for i in 0..d {
                lv[c * d + i] = prev_v[p * d + i] + (ce[p * d + i] - a_prev[i]);
            }
        }
        values.push(lv);
    }
    AdaptedProcess::from_level_values(tree.clone(), *proc.space(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn four_atoms() -> Arc<FiltrationTree> {
        Arc::new(
            FiltrationTree::new(vec![0.1, 0.2, 0.3, 0.4], vec![vec![0, 4], vec![0, 2, 4], vec![0, 1, 2, 3, 4]])
                .unwrap(),
        )
    }

    fn scalar_from_leaves(tree: Arc<FiltrationTree>, leaves: &[f64]) -> AdaptedProcess {
        let space = NormedSpace::scalar();
        AdaptedProcess::from_atom_fn(tree.clone(), space, |level, atom, out| {
            let blk = tree.owner(level, atom);
            let r = tree.block_range(level, blk);
            let w: f64 = r.clone().map(|a| tree.prob(a)).sum();
            out[0] = r.map(|a| tree.prob(a) * leaves[a]).sum::<f64>() / w;
        })
        .unwrap()
    }

    #[test]
    fn weighted_leaf_average() {
        let tree = four_atoms();
        let leaves = [1.0, 2.0, 3.0, 4.0];
        let space = NormedSpace::scalar();
        let proc = AdaptedProcess::from_atom_fn(tree.clone(), space, |level, atom, out| {
            out[0] = if level == 2 { leaves[atom] } else { 0.0 };
        })
        .unwrap();
        let ce = cond_expect(&proc, 2, 0).unwrap();
        // 0.1 + 0.4 + 0.9 + 1.6
        assert!((ce[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_process_conditions_to_itself() {
        let tree = Arc::new(FiltrationTree::uniform(3, 3).unwrap());
        let c = [1.5, -2.0];
        let proc = AdaptedProcess::constant(tree, NormedSpace::euclidean(2), &c);
        for from in 0..=3 {
            for to in 0..=from {
                let ce = cond_expect(&proc, from, to).unwrap();
                for chunk in ce.chunks(2) {
                    assert!((chunk[0] - 1.5).abs() < 1e-13 && (chunk[1] + 2.0).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn rademacher_has_zero_mean() {
        let tree = Arc::new(FiltrationTree::rademacher(2).unwrap());
        let proc = AdaptedProcess::from_atom_fn(tree, NormedSpace::scalar(), |level, atom, out| {
            out[0] = if level >= 1 { rademacher_sign(2, 1, atom) } else { 0.0 };
        })
        .unwrap();
        assert_eq!(cond_expect(&proc, 1, 0).unwrap(), vec![0.0]);
    }

    #[test]
    fn level_errors() {
        let tree = four_atoms();
        let proc = AdaptedProcess::zero(tree, NormedSpace::scalar());
        assert_eq!(cond_expect(&proc, 3, 0), Err(FinprobError::LevelOutOfRange { level: 3, max: 2 }));
        assert_eq!(cond_expect(&proc, 0, 1), Err(FinprobError::LevelOrder { from: 0, to: 1 }));
    }

    #[test]
    fn tree_construction_errors() {
        assert!(matches!(
            FiltrationTree::new(vec![0.5, 0.0, 0.5], vec![vec![0, 3]]),
            Err(FinprobError::NonPositiveProbability { atom: 1, .. })
        ));
        assert!(matches!(
            FiltrationTree::new(vec![0.5, 0.6], vec![vec![0, 2]]),
            Err(FinprobError::NotNormalized(_))
        ));
        assert_eq!(
            FiltrationTree::new(vec![0.25; 4], vec![vec![0, 4], vec![0, 2, 4], vec![0, 1, 3, 4]]),
            Err(FinprobError::NotRefining(2))
        );
        assert_eq!(
            FiltrationTree::new(vec![0.5, 0.5], vec![vec![0, 1, 2]]),
            Err(FinprobError::NontrivialRoot)
        );
        assert!(matches!(FiltrationTree::uniform(21, 2), Err(FinprobError::TooManyAtoms(_))));
    }

    #[test]
    fn measurability_is_enforced() {
        let tree = Arc::new(FiltrationTree::rademacher(2).unwrap());
        let err = AdaptedProcess::from_atom_fn(tree, NormedSpace::scalar(), |level, atom, out| {
            out[0] = if level == 1 { rademacher_sign(2, 2, atom) } else { 0.0 };
        });
        assert_eq!(err, Err(FinprobError::NotMeasurable { level: 1, block: 0 }));
    }

    #[test]
    fn drift_breaks_martingale_property() {
        let tree = Arc::new(FiltrationTree::rademacher(3).unwrap());
        let proc = AdaptedProcess::from_atom_fn(tree, NormedSpace::scalar(), |level, atom, out| {
            let mut s = 0.0;
            for k in 1..=level {
                s += rademacher_sign(3, k, atom);
            }
            if level >= 2 {
                s += 0.5;
            }
            out[0] = s;
        })
        .unwrap();
        let check = is_martingale(&proc, MARTINGALE_TOL);
        assert!(!check.holds);
        assert!((check.max_violation - 0.5).abs() < 1e-15);
    }

    #[test]
    fn compensator_of_single_jump() {
        // N_2 = 0.8 r1 1{r1 = r2}: E[N_2 | F_1] = 0.4 r1
        let tree = Arc::new(FiltrationTree::rademacher(2).unwrap());
        let n = AdaptedProcess::from_atom_fn(tree.clone(), NormedSpace::scalar(), |level, atom, out| {
            let r1 = rademacher_sign(2, 1, atom);
            let r2 = rademacher_sign(2, 2, atom);
            out[0] = if level == 2 && r1 == r2 { 0.8 * r1 } else { 0.0 };
        })
        .unwrap();
        let v = discrete_compensator(&n).unwrap();
        for atom in 0..4 {
            let r1 = rademacher_sign(2, 1, atom);
            assert!((v.at(2, atom)[0] - 0.4 * r1).abs() < 1e-15);
            assert_eq!(v.at(1, atom)[0], 0.0);
        }
        assert!(is_predictable(&v, 0.0));
        assert!(is_martingale(&n.sub(&v).unwrap(), 1e-12).holds);
    }

    #[test]
    fn compensator_of_martingale_is_zero_and_of_predictable_is_itself() {
        let tree = Arc::new(FiltrationTree::rademacher(3).unwrap());
        let mart = AdaptedProcess::from_atom_fn(tree.clone(), NormedSpace::scalar(), |level, atom, out| {
            out[0] = (1..=level).map(|k| rademacher_sign(3, k, atom) * k as f64).sum();
        })
        .unwrap();
        let v = discrete_compensator(&mart).unwrap();
        assert!(v.max_norm() < 1e-15);

        // A_n = Σ_{k≤n} |A-dependent but F_{k-1}-measurable| increments
        let pred = AdaptedProcess::from_atom_fn(tree, NormedSpace::scalar(), |level, atom, out| {
            out[0] = (1..=level)
                .map(|k| if k >= 2 { rademacher_sign(3, k - 1, atom) * 0.3 } else { 0.7 })
                .sum();
        })
        .unwrap();
        let v = discrete_compensator(&pred).unwrap();
        assert!(v.sub(&pred).unwrap().max_norm() < 1e-15);
    }

    #[test]
    fn compensator_rejects_nonzero_start() {
        let tree = Arc::new(FiltrationTree::rademacher(1).unwrap());
        let proc = AdaptedProcess::constant(tree, NormedSpace::scalar(), &[1.0]);
        assert_eq!(discrete_compensator(&proc), Err(FinprobError::NonZeroStart));
    }

    #[test]
    fn backward_averaging_gives_a_martingale() {
        let tree = four_atoms();
        let proc = scalar_from_leaves(tree, &[1.0, -4.0, 2.5, 7.0]);
        let check = is_martingale(&proc, 1e-12);
        assert!(check.holds, "{check:?}");
    }

    fn random_tree(rng: &mut ChaCha8Rng) -> Arc<FiltrationTree> {
        let depth = rng.random_range(1..=4);
        let n = rng.random_range(depth + 1..=24usize);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let prob: Vec<f64> = raw.iter().map(|p| p / total).collect();
        // refine by adding random cut points level by level
        let mut cuts = vec![0usize, n];
        let mut bounds = vec![cuts.clone()];
        for _ in 0..depth {
            for _ in 0..rng.random_range(0..4) {
                cuts.push(rng.random_range(1..n));
            }
            cuts.sort_unstable();
            cuts.dedup();
            bounds.push(cuts.clone());
        }
        let prob_sum: f64 = prob.iter().sum();
        let mut prob = prob;
        prob[0] += 1.0 - prob_sum;
        Arc::new(FiltrationTree::new(prob, bounds).unwrap())
    }

    fn random_adapted(tree: Arc<FiltrationTree>, rng: &mut ChaCha8Rng, start_zero: bool) -> AdaptedProcess {
        let d = 2;
        let values = (0..tree.n_levels())
            .map(|l| {
                (0..tree.n_blocks(l) * d)
                    .map(|_| if l == 0 && start_zero { 0.0 } else { rng.random_range(-3.0..3.0) })
                    .collect()
            })
            .collect();
        AdaptedProcess::from_level_values(tree, NormedSpace::lq(d, 1.0).unwrap(), values).unwrap()
    }

    proptest! {
        #[test]
        fn tower_property(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tree = random_tree(&mut rng);
            let proc = random_adapted(tree.clone(), &mut rng, false);
            let depth = tree.depth();
            for n in 0..=depth {
                for m in 0..=n {
                    for k in 0..=m {
                        let inner = cond_expect(&proc, n, m).unwrap();
                        let mut levels: Vec<Vec<f64>> = (0..tree.n_levels())
                            .map(|l| vec![0.0; tree.n_blocks(l) * 2])
                            .collect();
                        levels[m] = inner;
                        let tmp = AdaptedProcess::from_level_values(tree.clone(), *proc.space(), levels).unwrap();
                        let two_step = cond_expect(&tmp, m, k).unwrap();
                        let direct = cond_expect(&proc, n, k).unwrap();
                        for (a, b) in two_step.iter().zip(&direct) {
                            prop_assert!((a - b).abs() < 1e-12);
                        }
                    }
                }
            }
        }

        #[test]
        fn compensated_process_is_martingale(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tree = random_tree(&mut rng);
            let a = random_adapted(tree, &mut rng, true);
            let v = discrete_compensator(&a).unwrap();
            prop_assert!(is_predictable(&v, 1e-12));
            let m = a.sub(&v).unwrap();
            let check = is_martingale(&m, 1e-12);
            prop_assert!(check.holds, "{:?}", check);
            // E‖V_n‖ ≤ E(Var V)_n ≤ E(Var A)_n
            let t = a.tree().clone();
            for n in 0..t.n_levels() {
                let ev = v.expected_norm(n);
                let evar_v = t.expectation(|w| v.variation(n, w));
                let evar_a = t.expectation(|w| a.variation(n, w));
                prop_assert!(ev <= evar_v * (1.0 + 1e-12) + 1e-15);
                prop_assert!(evar_v <= evar_a * (1.0 + 1e-12) + 1e-15);
            }
        }

        #[test]
        fn conditional_expectation_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tree = random_tree(&mut rng);
            let p = random_adapted(tree.clone(), &mut rng, false);
            let q = random_adapted(tree.clone(), &mut rng, false);
            let combo = p.scale(alpha).add(&q).unwrap();
            let depth = tree.depth();
            let lhs = cond_expect(&combo, depth, 0).unwrap();
            let a = cond_expect(&p, depth, 0).unwrap();
            let b = cond_expect(&q, depth, 0).unwrap();
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (alpha * a[i] + b[i])).abs() < 1e-12);
            }
        }
    }
}
