//! Gundy decomposition at a level `λ` and the canonical decomposition
//! `M = M^c + M^q + M^a`, on the exact tree backend and on grid paths.
//!
//! The Gundy construction follows the continuous-time recipe verbatim:
//!
//! * `τ = inf{t : ‖M_t‖ ≥ λ/2}` and `N = ΔM_τ 1_{[τ,∞)}`;
//! * `V` is the predictable compensator of `N`, `σ = inf{t : ‖V_t‖ ≥ λ}`;
//! * `M¹ = M^{σ−∧τ−} + V^{σ−} − M_0^{τ−}`,
//! * `M² = (M − M^τ) + (M^{τ−} + V) − (M^{τ−} + V)^{σ−}`,
//! * `M³ = M_0^{τ−} + N − V`.
//!
//! Time 0 is predictable (`F_{0−} = F_0`), so the compensator of `N` starts
//! at `V_0 = N_0`. `M_0^{τ−}` is `M_0` on `{τ > 0}` and `0` otherwise. Parts
//! that vanish by construction (for example `M²` before `τ ∨ σ`) are set to
//! exact zeros rather than computed as differences.

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::finprob::{discrete_compensator, AdaptedProcess, FinprobError};
use crate::generators::{path_rng, GridModel, MarkLaw, StepLaw};
use crate::process::{ChannelSet, Label, LabeledPath, ProcessError, StopTime, Trajectory};
use crate::space::NormedSpace;

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("lambda must be positive and finite, got {0}")]
    Lambda(f64),
    #[error("compensator unavailable: step {0} has no finite increment law")]
    CompensatorUnavailable(usize),
    #[error("quasi-left-continuous jump at declared predictable step {0}")]
    MalformedLabels(usize),
    #[error("path has a continuous component")]
    ContinuousPart,
    #[error("path grid or space does not match the model")]
    ModelMismatch,
    #[error(transparent)]
    Finprob(#[from] FinprobError),
    #[error(transparent)]
    Process(#[from] ProcessError),
}

/// Level-`λ` Gundy decomposition. On trees `P` is [`AdaptedProcess`] and the
/// stopping times are given per atom; on grid paths `P` is [`Trajectory`].
#[derive(Debug, Clone, PartialEq)]
pub struct GundyTriple<P, S> {
    pub lambda: f64,
    pub m1: P,
    pub m2: P,
    pub m3: P,
    pub n: P,
    pub v: P,
    pub tau: S,
    pub sigma: S,
}

pub type GundyTree = GundyTriple<AdaptedProcess, Vec<StopTime>>;
pub type GundyPath = GundyTriple<Trajectory, StopTime>;

fn check_lambda(lambda: f64) -> Result<(), DecomposeError> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(DecomposeError::Lambda(lambda))
    }
}

/// Per level, a `d`-vector per block.
type Levels = Vec<Vec<f64>>;

fn sub_into(out: &mut [f64], a: &[f64], b: &[f64]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = x - y;
    }
}

/// Gundy decomposition of a tree martingale, exact up to rounding.
pub fn gundy_tree(m: &AdaptedProcess, lambda: f64) -> Result<GundyTree, DecomposeError> {
    check_lambda(lambda)?;
    let tree = m.tree().clone();
    let space = *m.space();
    let d = m.dim();
    let levels = tree.n_levels();
    let half = lambda / 2.0;
    let zero = vec![0.0; d];

    // τ ≤ n recorded per block as Some(τ); M^{τ−}, M^τ and N per block.
    let mut tau: Vec<Vec<Option<usize>>> = Vec::with_capacity(levels);
    let mut pre: Levels = Vec::with_capacity(levels);
    let mut stop: Levels = Vec::with_capacity(levels);
    let mut jump: Levels = Vec::with_capacity(levels);
    for n in 0..levels {
        let nb = tree.n_blocks(n);
        let (mut t_l, mut pre_l, mut stop_l, mut jump_l) =
            (vec![None; nb], vec![0.0; nb * d], vec![0.0; nb * d], vec![0.0; nb * d]);
        for b in 0..nb {
            let x = m.value(n, b);
            let r = b * d..(b + 1) * d;
            let (p_tau, p_pre, p_stop, p_jump, p_x) = if n == 0 {
                (None, &zero[..], &zero[..], &zero[..], &zero[..])
            } else {
                let p = tree.parent(n, b);
                let pr = p * d..(p + 1) * d;
                (
                    tau[n - 1][p],
                    &pre[n - 1][pr.clone()],
                    &stop[n - 1][pr.clone()],
                    &jump[n - 1][pr],
                    m.value(n - 1, p),
                )
            };
            let t = p_tau.or_else(|| (space.norm_of(x) >= half).then_some(n));
            t_l[b] = t;
            match t {
                None => {
                    pre_l[r.clone()].copy_from_slice(x);
                    stop_l[r].copy_from_slice(x);
                }
                Some(t) if t == n => {
                    pre_l[r.clone()].copy_from_slice(p_pre);
                    stop_l[r.clone()].copy_from_slice(x);
                    sub_into(&mut jump_l[r], x, p_x);
                }
                Some(_) => {
                    pre_l[r.clone()].copy_from_slice(p_pre);
                    stop_l[r.clone()].copy_from_slice(p_stop);
                    jump_l[r].copy_from_slice(p_jump);
                }
            }
        }
        tau.push(t_l);
        pre.push(pre_l);
        stop.push(stop_l);
        jump.push(jump_l);
    }

    let n_proc = AdaptedProcess::from_level_values(tree.clone(), space, jump)?;
    let n0 = n_proc.value(0, 0).to_vec();
    let shifted = n_proc.sub(&AdaptedProcess::constant(tree.clone(), space, &n0))?;
    let v = discrete_compensator(&shifted)?.add(&AdaptedProcess::constant(tree.clone(), space, &n0))?;

    // M_0^{τ−}
    let c: Vec<f64> = if tau[0][0].is_none() { m.value(0, 0).to_vec() } else { zero.clone() };

    let mut sigma: Vec<Vec<Option<usize>>> = Vec::with_capacity(levels);
    let mut xpre: Levels = Vec::with_capacity(levels);
    let mut m1: Levels = Vec::with_capacity(levels);
    let mut m2: Levels = Vec::with_capacity(levels);
    let mut m3: Levels = Vec::with_capacity(levels);
    let mut xbuf = vec![0.0; d];
    for n in 0..levels {
        let nb = tree.n_blocks(n);
        let (mut s_l, mut xp_l) = (vec![None; nb], vec![0.0; nb * d]);
        let (mut m1_l, mut m2_l, mut m3_l) = (vec![0.0; nb * d], vec![0.0; nb * d], vec![0.0; nb * d]);
        for b in 0..nb {
            let r = b * d..(b + 1) * d;
            let vv = v.value(n, b);
            let (p_sig, p_xpre) = if n == 0 {
                (None, &zero[..])
            } else {
                let p = tree.parent(n, b);
                (sigma[n - 1][p], &xpre[n - 1][p * d..(p + 1) * d])
            };
            let s = p_sig.or_else(|| (space.norm_of(vv) >= lambda).then_some(n));
            s_l[b] = s;
            for i in 0..d {
                xbuf[i] = pre[n][r.start + i] + vv[i];
            }
            if s.is_some() {
                xp_l[r.clone()].copy_from_slice(p_xpre);
            } else {
                xp_l[r.clone()].copy_from_slice(&xbuf);
            }
            let t = tau[n][b];
            let x = m.value(n, b);
            for i in 0..d {
                let j = r.start + i;
                m1_l[j] = xp_l[j] - c[i];
                let after_tau = if matches!(t, Some(t) if t < n) { x[i] - stop[n][j] } else { 0.0 };
                let after_sigma = if s.is_some() { xbuf[i] - xp_l[j] } else { 0.0 };
                m2_l[j] = after_tau + after_sigma;
                m3_l[j] = c[i] + n_proc.value(n, b)[i] - vv[i];
            }
        }
        sigma.push(s_l);
        xpre.push(xp_l);
        m1.push(m1_l);
        m2.push(m2_l);
        m3.push(m3_l);
    }

    let last = tree.depth();
    let per_atom = |times: &[Vec<Option<usize>>], predictable: bool| -> Vec<StopTime> {
        (0..tree.n_atoms())
            .map(|a| match times[last][tree.owner(last, a)] {
                Some(k) => StopTime { index: Some(k), predictable },
                None => StopTime::NEVER,
            })
            .collect()
    };
    let tau_atoms = per_atom(&tau, false);
    let sigma_atoms = per_atom(&sigma, true);
    Ok(GundyTriple {
        lambda,
        m1: AdaptedProcess::from_level_values(tree.clone(), space, m1)?,
        m2: AdaptedProcess::from_level_values(tree.clone(), space, m2)?,
        m3: AdaptedProcess::from_level_values(tree, space, m3)?,
        n: n_proc,
        v,
        tau: tau_atoms,
        sigma: sigma_atoms,
    })
}

/// Exact one-step increment laws of a grid model, precomputed for the
/// compensator of `N` in [`gundy_grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridCompensator {
    model: GridModel,
    laws: Vec<StepLaw>,
}

impl GridCompensator {
    /// Fails unless every step of `model` has a finite increment law
    /// independent of the past.
    pub fn new(model: &GridModel) -> Result<Self, DecomposeError> {
        let steps = model.grid().steps();
        let laws = (1..=steps)
            .map(|k| model.step_law(k).ok_or(DecomposeError::CompensatorUnavailable(k)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { model: model.clone(), laws })
    }

    pub fn model(&self) -> &GridModel {
        &self.model
    }

    /// `E[ΔM_k 1{‖x + ΔM_k‖ ≥ level}]` for the step-`k` increment.
    fn crossing_mean(&self, k: usize, x: &[f64], level: f64, out: &mut [f64]) {
        let space = self.model.space();
        out.fill(0.0);
        let mut y = vec![0.0; x.len()];
        for (p, dx) in &self.laws[k - 1].atoms {
            for ((yi, xi), di) in y.iter_mut().zip(x).zip(dx) {
                *yi = xi + di;
            }
            if space.norm_of(&y) >= level {
                for (o, di) in out.iter_mut().zip(dx) {
                    *o += p * di;
                }
            }
        }
    }
}

/// Gundy decomposition of one path of a model with finite step laws. `V` is
/// exact: on `{τ ≥ k}`, `ΔV_k = E[ΔM_k 1{‖M_{k−1} + ΔM_k‖ ≥ λ/2}]` under the
/// step-`k` law.
pub fn gundy_grid(path: &LabeledPath, comp: &GridCompensator, lambda: f64) -> Result<GundyPath, DecomposeError> {
    check_lambda(lambda)?;
    if path.grid() != comp.model.grid() || path.dim() != comp.model.space().dim() {
        return Err(DecomposeError::ModelMismatch);
    }
    let space = *path.space();
    let d = space.dim();
    let steps = path.steps();
    let half = lambda / 2.0;
    let m = path.values();
    let tau = m.hit_time(half);
    let t_idx = tau.sentinel(steps);

    let mut n_vals = vec![0.0; (steps + 1) * d];
    if tau.index.is_some() {
        let jump = m.jump_at(tau);
        for chunk in n_vals[t_idx * d..].chunks_mut(d) {
            chunk.copy_from_slice(&jump);
        }
    }
    let mut v_vals = vec![0.0; (steps + 1) * d];
    v_vals[..d].copy_from_slice(&n_vals[..d]);
    let mut dv = vec![0.0; d];
    for k in 1..=steps {
        let (head, tail) = v_vals.split_at_mut(k * d);
        let prev = &head[(k - 1) * d..];
        let cur = &mut tail[..d];
        cur.copy_from_slice(prev);
        if t_idx >= k {
            comp.crossing_mean(k, m.value(k - 1), half, &mut dv);
            for (c, x) in cur.iter_mut().zip(&dv) {
                *c += x;
            }
        }
    }
    let n = Trajectory::from_values(space, n_vals)?;
    let v = Trajectory::from_values(space, v_vals)?;
    let sigma = StopTime { predictable: true, ..v.hit_time(lambda) };
    let s_idx = sigma.sentinel(steps);

    let c: Vec<f64> = if t_idx > 0 { m.value(0).to_vec() } else { vec![0.0; d] };
    let x = m.pre_stop(tau).add(&v)?;
    let xpre = x.pre_stop(sigma);
    let mstop = m.stop(tau);
    let mut m1 = vec![0.0; (steps + 1) * d];
    let mut m2 = vec![0.0; (steps + 1) * d];
    let mut m3 = vec![0.0; (steps + 1) * d];
    for k in 0..=steps {
        for i in 0..d {
            let j = k * d + i;
            m1[j] = xpre.values()[j] - c[i];
            let after_tau = if k > t_idx { m.values()[j] - mstop.values()[j] } else { 0.0 };
            let after_sigma = if k >= s_idx { x.values()[j] - xpre.values()[j] } else { 0.0 };
            m2[j] = after_tau + after_sigma;
            m3[j] = c[i] + n.values()[j] - v.values()[j];
        }
    }
    Ok(GundyTriple {
        lambda,
        m1: Trajectory::from_values(space, m1)?,
        m2: Trajectory::from_values(space, m2)?,
        m3: Trajectory::from_values(space, m3)?,
        n,
        v,
        tau,
        sigma,
    })
}

/// Canonical decomposition into continuous, quasi-left-continuous and
/// accessible parts. `ma` carries the initial value.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalTriple<P> {
    pub mc: P,
    pub mq: P,
    pub ma: P,
}

fn check_labels(path: &LabeledPath) -> Result<(), DecomposeError> {
    for (k, label, _) in path.increments() {
        if label == Label::QlcJump && path.is_predictable_time(k) {
            return Err(DecomposeError::MalformedLabels(k));
        }
    }
    Ok(())
}

/// Routes each labeled increment to its part: `CONT` to `mc`, `QLC_JUMP` and
/// `QLC_DRIFT` to `mq`, `ACC_JUMP` and `M_0` to `ma`.
pub fn canonical_from_labels(path: &LabeledPath) -> Result<CanonicalTriple<LabeledPath>, DecomposeError> {
    check_labels(path)?;
    Ok(CanonicalTriple {
        mc: path.restrict(ChannelSet::CONTINUOUS),
        mq: path.restrict(ChannelSet::QUASI_LEFT_CONTINUOUS),
        ma: path.restrict(ChannelSet::ACCESSIBLE),
    })
}

/// `M = M^c + M^d` with `M^d` purely discontinuous.
pub fn meyer_yoeurp(path: &LabeledPath) -> Result<(LabeledPath, LabeledPath), DecomposeError> {
    check_labels(path)?;
    let md = path.restrict(ChannelSet::QUASI_LEFT_CONTINUOUS.union(ChannelSet::ACCESSIBLE));
    Ok((path.restrict(ChannelSet::CONTINUOUS), md))
}

/// `M^d = M^q + M^a` for a purely discontinuous path.
pub fn yoeurp(md: &LabeledPath) -> Result<(LabeledPath, LabeledPath), DecomposeError> {
    if md.has_channel(Label::Cont) {
        return Err(DecomposeError::ContinuousPart);
    }
    check_labels(md)?;
    Ok((md.restrict(ChannelSet::QUASI_LEFT_CONTINUOUS), md.restrict(ChannelSet::ACCESSIBLE)))
}

/// On a discrete filtration every jump is accessible: `(0, 0, M)`.
pub fn canonical_discrete(m: &AdaptedProcess) -> CanonicalTriple<AdaptedProcess> {
    let zero = AdaptedProcess::zero(m.tree().clone(), *m.space());
    CanonicalTriple { mc: zero.clone(), mq: zero, ma: m.clone() }
}

/// Truncation time `τ_r = inf{t : ∫_0^t ∫ ‖x‖ 1{‖x‖ > r} ν(ds, dx) > 1}` for
/// the jump compensator of a grid model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationTime {
    pub level: f64,
    /// Grid time of the first crossing, `None` if the horizon is reached.
    pub time: Option<f64>,
    /// Compensated large-jump mass accumulated over the horizon.
    pub mass: f64,
}

/// Samples used to estimate large-jump moments of Gaussian marks.
const TAIL_SAMPLES: u64 = 1 << 14;

/// `E ‖x‖ 1{‖x‖ > r}` under the mark law. Exact for finite laws; a seeded
/// Monte Carlo estimate for Gaussian marks.
fn large_jump_moment(marks: &MarkLaw, space: &NormedSpace, r: f64) -> f64 {
    match marks {
        MarkLaw::Finite { atoms, probs } => atoms
            .iter()
            .zip(probs)
            .map(|(a, p)| {
                let n = space.norm_of(a);
                if n > r { p * n } else { 0.0 }
            })
            .sum(),
        MarkLaw::Gaussian { mean, std } => {
            let mut rng = path_rng(0x7472_756e_6361_7465, 0);
            let mut x = vec![0.0; mean.len()];
            let mut total = 0.0;
            for _ in 0..TAIL_SAMPLES {
                for (xi, mi) in x.iter_mut().zip(mean) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *xi = mi + std * z;
                }
                let n = space.norm_of(&x);
                if n > r {
                    total += n;
                }
            }
            total / TAIL_SAMPLES as f64
        }
    }
}

/// Truncation diagnostic for each level in `levels`. The compensator is
/// deterministic for these models, so `τ_r` is the same on every path.
pub fn truncation_times(model: &GridModel, levels: &[f64]) -> Vec<TruncationTime> {
    let grid = model.grid();
    let space = model.space();
    let acc = model.accessible_steps();
    levels
        .iter()
        .map(|&r| {
            let q_rate = model.poisson().map_or(0.0, |p| p.intensity * large_jump_moment(&p.marks, space, r));
            let a_mass = model.accessible().map_or(0.0, |a| large_jump_moment(&a.marks, space, r));
            let mut mass = 0.0;
            let mut time = None;
            for k in 1..=grid.steps() {
                mass += if acc.binary_search(&k).is_ok() { a_mass } else { q_rate * grid.dt(k) };
                if time.is_none() && mass > 1.0 {
                    time = Some(grid.time(k));
                }
            }
            TruncationTime { level: r, time, mass }
        })
        .collect()
}
