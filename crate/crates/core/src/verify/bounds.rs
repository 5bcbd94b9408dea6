use serde::{Deserialize, Serialize};

use super::{
    check_lambdas, estimate_tail, exact_weak_l1, worst_case, wilson, CheckRecord, Ensemble, MeanEstimate, Method,
    VerificationReport, VerifyError, Z_MARTINGALE,
};
use crate::decompose::{canonical_from_labels, gundy_grid, gundy_tree, GridCompensator};
use crate::finprob::{discrete_compensator, is_martingale, AdaptedProcess, MARTINGALE_TOL};
use crate::process::{ChannelSet, Label, LabeledPath};
use crate::space::{separating_set, NormedSpace};
use crate::stochcalc::{
    apply_transform_path, apply_transform_tree, grid_coefficients, is_weakly_differentially_subordinate_paths,
    reconstruct_from_jumps_tree, TransformRule, TreeCoeffs,
};

/// Constants of the Gundy bounds. Only the failure-path tests change them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GundyConstants {
    /// `‖M¹_t‖_∞ ≤ sup·λ`.
    pub sup: f64,
    /// `E‖M¹_t‖ ≤ first·E‖M_t‖`.
    pub first: f64,
    /// `λ P((M²)*_t > 0) ≤ rare·E‖M_t‖`.
    pub rare: f64,
    /// `E(Var M³)_t ≤ variation·E‖M_t‖`.
    pub variation: f64,
}

impl Default for GundyConstants {
    fn default() -> Self {
        Self { sup: 2.0, first: 5.0, rare: 4.0, variation: 7.0 }
    }
}

impl GundyConstants {
    fn statements(&self) -> [String; 4] {
        [
            format!("‖M¹_t‖_∞ ≤ {}λ", self.sup),
            format!("E‖M¹_t‖ ≤ {}·E‖M_t‖", self.first),
            format!("λ·P((M²)*_t > 0) ≤ {}·E‖M_t‖", self.rare),
            format!("E(Var M³)_t ≤ {}·E‖M_t‖", self.variation),
        ]
    }
}

fn additivity_scale(max_norm: f64) -> f64 {
    1e-12 * max_norm.max(1.0)
}

/// The four Gundy bounds at every level of a tree martingale and every λ,
/// evaluated exactly. Each record reports the worst case over λ and level.
pub fn check_gundy_bounds_tree(
    m: &AdaptedProcess,
    lambdas: &[f64],
    consts: &GundyConstants,
) -> Result<VerificationReport, VerifyError> {
    check_lambdas(lambdas)?;
    let tree = m.tree();
    let space = *m.space();
    let d = m.dim();
    let levels = tree.n_levels();
    let atoms = tree.n_atoms();
    let e_norm: Vec<f64> = (0..levels).map(|n| m.expected_norm(n)).collect();
    let [s_sup, s_first, s_rare, s_var] = consts.statements();
    let (mut sup_r, mut first_r, mut rare_r, mut var_r, mut add_r, mut mart_r) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &lambda in lambdas {
        let g = gundy_tree(m, lambda)?;
        sup_r.push(CheckRecord::exact("gundy.sup", &s_sup, g.m1.max_norm(), consts.sup * lambda, atoms).with_lambda(lambda));

        let sum = g.m1.add(&g.m2)?.add(&g.m3)?;
        let err = sum.sub(m)?.max_norm();
        add_r.push(
            CheckRecord::zero("gundy.additivity", "M¹ + M² + M³ = M", Method::Exact, err, additivity_scale(m.max_norm()), atoms)
                .with_lambda(lambda),
        );
        let viol = [&g.m1, &g.m2, &g.m3]
            .iter()
            .map(|p| {
                let c = is_martingale(p, MARTINGALE_TOL);
                c.max_violation / p.max_norm().max(1.0)
            })
            .fold(0.0, f64::max);
        mart_r.push(
            CheckRecord::zero("gundy.martingale", "each part is a martingale", Method::Exact, viol, MARTINGALE_TOL, atoms)
                .with_lambda(lambda),
        );

        // per block: has M² left zero so far, and the running variation of M³
        let mut hit_prev: Vec<bool> = Vec::new();
        let mut var_prev: Vec<f64> = Vec::new();
        for n in 0..levels {
            let nb = tree.n_blocks(n);
            let mut hit = vec![false; nb];
            let mut var = vec![0.0; nb];
            for b in 0..nb {
                let m2 = g.m2.value(n, b);
                let m3 = g.m3.value(n, b);
                let nonzero = m2.iter().any(|x| *x != 0.0);
                if n == 0 {
                    hit[b] = nonzero;
                    var[b] = space.norm_of(m3);
                } else {
                    let p = tree.parent(n, b);
                    hit[b] = hit_prev[p] || nonzero;
                    var[b] = var_prev[p] + space.dist(m3, g.m3.value(n - 1, p));
                }
            }
            let e1 = g.m1.expected_norm(n);
            let p2: f64 = (0..nb).filter(|&b| hit[b]).map(|b| tree.block_prob(n, b)).sum();
            let ev: f64 = (0..nb).map(|b| tree.block_prob(n, b) * var[b]).sum();
            first_r.push(CheckRecord::exact("gundy.first", &s_first, e1, consts.first * e_norm[n], atoms).with_lambda(lambda));
            rare_r.push(CheckRecord::exact("gundy.rare", &s_rare, lambda * p2, consts.rare * e_norm[n], atoms).with_lambda(lambda));
            var_r.push(CheckRecord::exact("gundy.variation", &s_var, ev, consts.variation * e_norm[n], atoms).with_lambda(lambda));
            hit_prev = hit;
            var_prev = var;
        }
        let _ = d;
    }
    let mut report = VerificationReport::new("gundy");
    for recs in [sup_r, first_r, rare_r, var_r, add_r, mart_r] {
        report.push(worst_case(recs).expect("non-empty λ grid"));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, Default)]
struct GundyPathStats {
    m1_sup: f64,
    m1_end: f64,
    m2_hit: bool,
    var3_end: f64,
    add_err: f64,
}

/// λ indices at which the grid z-tests of the Gundy parts are run.
fn z_test_indices(count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..4).map(|i| i * (count - 1) / 3).collect();
    idx.dedup();
    idx
}

/// The Gundy bounds at the horizon for an ensemble whose model has finite
/// step laws. Bound checks use the upper 95% endpoint of the left side
/// against the constant times `Ê‖M_T‖`; the sup bound is checked on every
/// sampled path.
pub fn check_gundy_bounds_grid(
    ens: &Ensemble,
    lambdas: &[f64],
    consts: &GundyConstants,
) -> Result<VerificationReport, VerifyError> {
    check_lambdas(lambdas)?;
    let comp = GridCompensator::new(ens.model())?;
    let space = *ens.model().space();
    let d = space.dim();
    let z_idx = z_test_indices(lambdas.len());
    type PathOut = (f64, f64, Vec<GundyPathStats>, Vec<f64>);
    let per_path: Vec<PathOut> = ens.map(|p| {
        let m = p.values();
        let steps = m.steps();
        let mut stats = Vec::with_capacity(lambdas.len());
        let mut ends = Vec::with_capacity(z_idx.len() * 3 * d);
        for (li, &lambda) in lambdas.iter().enumerate() {
            let g = gundy_grid(p, &comp, lambda)?;
            let sum = g.m1.add(&g.m2)?.add(&g.m3)?;
            stats.push(GundyPathStats {
                m1_sup: g.m1.sup(),
                m1_end: g.m1.norm_at(steps),
                m2_hit: g.m2.values().iter().any(|x| *x != 0.0),
                var3_end: g.m3.variation(steps),
                add_err: sum.sup_distance(&m)?,
            });
            if z_idx.contains(&li) {
                for part in [&g.m1, &g.m2, &g.m3] {
                    for i in 0..d {
                        ends.push(part.last()[i] - part.value(0)[i]);
                    }
                }
            }
        }
        Ok((m.norm_at(steps), m.sup(), stats, ends))
    })?;
    let n = per_path.len();
    let e_m = MeanEstimate::of(&per_path.iter().map(|x| x.0).collect::<Vec<_>>());
    let max_m = per_path.iter().map(|x| x.1).fold(0.0, f64::max);
    let [s_sup, s_first, s_rare, s_var] = consts.statements();
    let (mut sup_r, mut first_r, mut rare_r, mut var_r, mut add_r) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut column = vec![0.0; n];
    for (li, &lambda) in lambdas.iter().enumerate() {
        let sup = per_path.iter().map(|x| x.2[li].m1_sup).fold(0.0, f64::max);
        let mut r = CheckRecord::exact("gundy.sup", &s_sup, sup, consts.sup * lambda, n).with_lambda(lambda);
        r.method = Method::MonteCarlo;
        sup_r.push(r);

        for (c, x) in column.iter_mut().zip(&per_path) {
            *c = x.2[li].m1_end;
        }
        let e1 = MeanEstimate::of(&column);
        first_r.push(
            CheckRecord::upper("gundy.first", &s_first, e1.mean, (e1.lo(), e1.hi()), consts.first * e_m.mean, n)
                .with_lambda(lambda),
        );

        let k = per_path.iter().filter(|x| x.2[li].m2_hit).count();
        let (lo, hi) = wilson(k, n);
        let p2 = k as f64 / n as f64;
        rare_r.push(
            CheckRecord::upper("gundy.rare", &s_rare, lambda * p2, (lambda * lo, lambda * hi), consts.rare * e_m.mean, n)
                .with_lambda(lambda),
        );

        for (c, x) in column.iter_mut().zip(&per_path) {
            *c = x.2[li].var3_end;
        }
        let ev = MeanEstimate::of(&column);
        var_r.push(
            CheckRecord::upper("gundy.variation", &s_var, ev.mean, (ev.lo(), ev.hi()), consts.variation * e_m.mean, n)
                .with_lambda(lambda),
        );

        let err = per_path.iter().map(|x| x.2[li].add_err).fold(0.0, f64::max);
        let mut r = CheckRecord::zero("gundy.additivity", "M¹ + M² + M³ = M", Method::Exact, err, additivity_scale(max_m), n)
            .with_lambda(lambda);
        r.method = Method::MonteCarlo;
        add_r.push(r);
    }
    let mut max_z = 0.0f64;
    let mut z_lambda = lambdas[0];
    for (j, &li) in z_idx.iter().enumerate() {
        for c in 0..3 * d {
            for (col, x) in column.iter_mut().zip(&per_path) {
                *col = x.3[j * 3 * d + c];
            }
            let z = MeanEstimate::of(&column).z().abs();
            if z > max_z {
                max_z = z;
                z_lambda = lambdas[li];
            }
        }
    }
    let mut report = VerificationReport::new("gundy");
    for recs in [sup_r, first_r, rare_r, var_r, add_r] {
        report.push(worst_case(recs).expect("non-empty λ grid"));
    }
    report.push(z_record("gundy.martingale", "each part has mean-zero increments", max_z, n).with_lambda(z_lambda));
    Ok(report)
}

fn z_record(name: &str, statement: &str, max_z: f64, n: usize) -> CheckRecord {
    let mut r = CheckRecord::exact(name, &format!("{statement} (max |z| ≤ {Z_MARTINGALE})"), max_z, Z_MARTINGALE, n);
    r.method = Method::MonteCarlo;
    r
}

/// Which part of the canonical decomposition a check concerns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Part {
    #[serde(rename = "c")]
    Continuous,
    #[serde(rename = "q")]
    QuasiLeftContinuous,
    #[serde(rename = "a")]
    Accessible,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Continuous, Part::QuasiLeftContinuous, Part::Accessible];

    pub fn symbol(self) -> &'static str {
        match self {
            Part::Continuous => "c",
            Part::QuasiLeftContinuous => "q",
            Part::Accessible => "a",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    fn channels(self) -> ChannelSet {
        match self {
            Part::Continuous => ChannelSet::CONTINUOUS,
            Part::QuasiLeftContinuous => ChannelSet::QUASI_LEFT_CONTINUOUS,
            Part::Accessible => ChannelSet::ACCESSIBLE,
        }
    }

    fn allowed(self, label: Label) -> bool {
        match self {
            Part::Continuous => label == Label::Cont,
            Part::QuasiLeftContinuous => matches!(label, Label::QlcJump | Label::QlcDrift),
            Part::Accessible => label == Label::AccJump,
        }
    }
}

/// `C = 26·K·p/(p−1) + 28`.
pub fn weak_l1_constant(k: f64, p: f64) -> f64 {
    26.0 * k * p / (p - 1.0) + 28.0
}

/// Per-path statistics of the canonical decomposition of an ensemble,
/// computed in one pass so that several analyses share the paths.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalSample {
    pub space: NormedSpace,
    pub n: usize,
    /// `M_T` per path, `n·d` values.
    pub m_end: Vec<f64>,
    pub m_end_norm: Vec<f64>,
    /// `M*_T` per path.
    pub m_sup: Vec<f64>,
    /// Per part: `X_T − X_0` and `X_{T/2} − X_0`, `n·d` values each.
    pub part_end: [Vec<f64>; 3],
    pub part_mid: [Vec<f64>; 3],
    /// Per part: `X_T` and `X*_T`.
    pub part_value: [Vec<f64>; 3],
    pub part_sup: [Vec<f64>; 3],
    pub max_additivity_error: f64,
    pub single_channel: bool,
    pub subordinate: bool,
}

struct CanonicalPathStats {
    m_end: Vec<f64>,
    m_sup: f64,
    part_end: [Vec<f64>; 3],
    part_mid: [Vec<f64>; 3],
    part_value: [Vec<f64>; 3],
    part_sup: [f64; 3],
    add_err: f64,
    single: bool,
    subordinate: bool,
}

impl CanonicalSample {
    /// Decomposes every path of the ensemble. Weak differential
    /// subordination of each part to `M` is checked against the coordinate
    /// functionals plus `extras` random ones.
    pub fn collect(ens: &Ensemble, extras: usize) -> Result<Self, VerifyError> {
        let space = *ens.model().space();
        let d = space.dim();
        let duals = separating_set(&space, extras, ens.seed());
        let stats = ens.map(|p| {
            let c = canonical_from_labels(p)?;
            let steps = p.steps();
            let mid = steps / 2;
            let m = p.values();
            let parts = [&c.mc, &c.mq, &c.ma];
            let trajs: Vec<_> = parts.iter().map(|x| x.values()).collect();
            let mut sum = trajs[0].add(&trajs[1])?;
            sum = sum.add(&trajs[2])?;
            let delta = |t: &crate::process::Trajectory, k: usize| -> Vec<f64> {
                t.value(k).iter().zip(t.value(0)).map(|(a, b)| a - b).collect()
            };
            let single = Part::ALL.iter().zip(parts).all(|(part, path)| {
                path.increments().all(|(_, l, _)| part.allowed(l))
                    && (*part == Part::Accessible || path.initial().iter().all(|x| *x == 0.0))
            });
            let subordinate =
                parts.iter().all(|x| is_weakly_differentially_subordinate_paths(x, p, &duals, 1e-12));
            Ok(CanonicalPathStats {
                m_end: m.last().to_vec(),
                m_sup: m.sup(),
                part_end: [delta(&trajs[0], steps), delta(&trajs[1], steps), delta(&trajs[2], steps)],
                part_mid: [delta(&trajs[0], mid), delta(&trajs[1], mid), delta(&trajs[2], mid)],
                part_value: [trajs[0].last().to_vec(), trajs[1].last().to_vec(), trajs[2].last().to_vec()],
                part_sup: [trajs[0].sup(), trajs[1].sup(), trajs[2].sup()],
                add_err: sum.sup_distance(&m)?,
                single,
                subordinate,
            })
        })?;
        let n = stats.len();
        let mut out = CanonicalSample {
            space,
            n,
            m_end: Vec::with_capacity(n * d),
            m_end_norm: Vec::with_capacity(n),
            m_sup: Vec::with_capacity(n),
            part_end: Default::default(),
            part_mid: Default::default(),
            part_value: Default::default(),
            part_sup: Default::default(),
            max_additivity_error: 0.0,
            single_channel: true,
            subordinate: true,
        };
        for s in stats {
            out.m_end_norm.push(space.norm_of(&s.m_end));
            out.m_end.extend_from_slice(&s.m_end);
            out.m_sup.push(s.m_sup);
            for j in 0..3 {
                out.part_end[j].extend_from_slice(&s.part_end[j]);
                out.part_mid[j].extend_from_slice(&s.part_mid[j]);
                out.part_value[j].extend_from_slice(&s.part_value[j]);
                out.part_sup[j].push(s.part_sup[j]);
            }
            out.max_additivity_error = out.max_additivity_error.max(s.add_err);
            out.single_channel &= s.single;
            out.subordinate &= s.subordinate;
        }
        Ok(out)
    }

    pub fn expected_norm(&self) -> MeanEstimate {
        MeanEstimate::of(&self.m_end_norm)
    }

    fn coordinate(&self, data: &[f64], i: usize) -> Vec<f64> {
        let d = self.space.dim();
        data.chunks(d).map(|c| c[i]).collect()
    }

    /// Largest `|z|` over coordinates and the two checkpoints for the mean
    /// increment of `part`.
    pub fn martingale_z(&self, part: Part) -> f64 {
        let j = part.index();
        (0..self.space.dim())
            .flat_map(|i| [self.coordinate(&self.part_end[j], i), self.coordinate(&self.part_mid[j], i)])
            .map(|col| MeanEstimate::of(&col).z().abs())
            .fold(0.0, f64::max)
    }
}

/// Structure of the canonical decomposition on an ensemble: additivity,
/// single-channel parts, the martingale z-test and weak differential
/// subordination of every part to `M`.
pub fn check_canonical(sample: &CanonicalSample) -> VerificationReport {
    let n = sample.n;
    let scale = sample.m_sup.iter().copied().fold(0.0, f64::max);
    let mut report = VerificationReport::new("canonical");
    let mut r = CheckRecord::zero(
        "canonical.additivity",
        "M^c + M^q + M^a = M",
        Method::MonteCarlo,
        sample.max_additivity_error,
        additivity_scale(scale),
        n,
    );
    r.method = Method::Exact;
    report.push(r);
    report.push(CheckRecord::holds(
        "canonical.single_channel",
        "each part carries only its own channels and M^c_0 = M^q_0 = 0",
        Method::Exact,
        sample.single_channel,
        n,
    ));
    for part in Part::ALL {
        let z = sample.martingale_z(part);
        report.push(z_record(&format!("canonical.martingale.{}", part.symbol()), "mean-zero increments", z, n));
    }
    report.push(CheckRecord::holds(
        "canonical.subordination",
        "each part is weakly differentially subordinate to M",
        Method::Exact,
        sample.subordinate,
        n,
    ));
    report
}

/// One point of an empirical weak-L¹ curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub lambda: f64,
    /// `λ·P̂(X* > λ)`.
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

/// `λ ↦ λ·P̂((part)*_T > λ)` with Wilson bounds, on the given grid.
pub fn weak_l1_curve(sample: &CanonicalSample, part: Part, lambdas: &[f64]) -> Result<Vec<CurvePoint>, VerifyError> {
    check_lambdas(lambdas)?;
    let sups = &sample.part_sup[part.index()];
    lambdas
        .iter()
        .map(|&lambda| {
            let t = estimate_tail(sups, lambda)?;
            Ok(CurvePoint { lambda, value: lambda * t.p, lo: lambda * t.lo, hi: lambda * t.hi })
        })
        .collect()
}

/// `sup_λ λ·P̂((part)*_T > λ)` on the λ grid against `C·Ê‖M_T‖`, judged on
/// the Wilson upper endpoint.
pub fn check_weak_l1_canonical(
    sample: &CanonicalSample,
    part: Part,
    lambdas: &[f64],
    budget: f64,
) -> Result<VerificationReport, VerifyError> {
    let curve = weak_l1_curve(sample, part, lambdas)?;
    let bound = budget * sample.expected_norm().mean;
    let statement = format!("λ·P((M^{})*_t > λ) ≤ {budget}·E‖M_t‖", part.symbol());
    let name = format!("weak_l1.{}", part.symbol());
    let recs = curve.iter().map(|c| {
        CheckRecord::upper(&name, &statement, c.value, (c.lo, c.hi), bound, sample.n).with_lambda(c.lambda)
    });
    let mut report = VerificationReport::new(name.clone());
    report.push(worst_case(recs).expect("non-empty λ grid"));
    Ok(report)
}

/// Tree version: the canonical decomposition is `(0, 0, M)`, and
/// `sup_λ λ P((part)* > λ)` is computed exactly over all `λ > 0`.
pub fn check_weak_l1_canonical_tree(m: &AdaptedProcess, part: Part, budget: f64) -> VerificationReport {
    let tree = m.tree();
    let depth = tree.depth();
    let weighted: Vec<(f64, f64)> = (0..tree.n_atoms())
        .map(|a| {
            let s = if part == Part::Accessible { m.running_sup(depth, a) } else { 0.0 };
            (tree.prob(a), s)
        })
        .collect();
    let (sup, at) = exact_weak_l1(&weighted);
    let statement = format!("sup_λ λ·P((M^{})* > λ) ≤ {budget}·E‖M‖", part.symbol());
    let name = format!("weak_l1.{}", part.symbol());
    let mut report = VerificationReport::new(name.clone());
    report.push(CheckRecord::exact(&name, &statement, sup, budget * m.expected_norm(depth), tree.n_atoms()).with_lambda(at));
    report
}

/// `K` for the weak-L¹ transform budget: `1` for Hilbert spaces at `p = 2`,
/// otherwise the supplied value.
pub fn transform_norm(space: &NormedSpace, p: f64, supplied: Option<f64>) -> Result<f64, VerifyError> {
    match supplied {
        Some(k) => Ok(k),
        None if space.is_hilbert() && p == 2.0 => Ok(1.0),
        None => Err(VerifyError::TransformNormUnavailable),
    }
}

/// Exact `sup_λ λ P((TM)* > λ) ≤ C·E‖M_∞‖` on a tree.
pub fn check_weak_l1_transform_tree(
    m: &AdaptedProcess,
    coeffs: &TreeCoeffs,
    p: f64,
    k: Option<f64>,
) -> Result<VerificationReport, VerifyError> {
    if !(p > 1.0) {
        return Err(VerifyError::Exponent(p));
    }
    if coeffs.max_abs() > 1.0 {
        return Err(VerifyError::NotContraction);
    }
    let k = transform_norm(m.space(), p, k)?;
    let c = weak_l1_constant(k, p);
    let tm = apply_transform_tree(m, coeffs)?;
    let tree = m.tree();
    let depth = tree.depth();
    let weighted: Vec<(f64, f64)> = (0..tree.n_atoms()).map(|a| (tree.prob(a), tm.running_sup(depth, a))).collect();
    let (sup, at) = exact_weak_l1(&weighted);
    let mut report = VerificationReport::new("transform");
    report.push(
        CheckRecord::exact(
            "transform.weak_l1",
            &format!("sup_λ λ·P((TM)* > λ) ≤ {c}·E‖M_∞‖"),
            sup,
            c * m.expected_norm(depth),
            tree.n_atoms(),
        )
        .with_lambda(at)
        .with_note(format!("K = {k}, p = {p}")),
    );
    Ok(report)
}

/// Monte Carlo weak-L¹ bound for a transform of grid paths.
pub fn check_weak_l1_transform_grid(
    ens: &Ensemble,
    rule: &TransformRule,
    p: f64,
    k: Option<f64>,
    lambdas: &[f64],
) -> Result<VerificationReport, VerifyError> {
    check_lambdas(lambdas)?;
    if !(p > 1.0) {
        return Err(VerifyError::Exponent(p));
    }
    if !rule.is_contraction() {
        return Err(VerifyError::NotContraction);
    }
    let k = transform_norm(ens.model().space(), p, k)?;
    let c = weak_l1_constant(k, p);
    let stats = ens.map(|path| {
        let coeffs = grid_coefficients(path, rule);
        let tm = apply_transform_path(path, &coeffs)?;
        let m = path.values();
        Ok((m.norm_at(m.steps()), tm.values().sup()))
    })?;
    let e = MeanEstimate::of(&stats.iter().map(|s| s.0).collect::<Vec<_>>());
    let sups: Vec<f64> = stats.iter().map(|s| s.1).collect();
    let statement = format!("λ·P((TM)*_t > λ) ≤ {c}·E‖M_t‖");
    let mut recs = Vec::new();
    for &lambda in lambdas {
        let t = estimate_tail(&sups, lambda)?;
        recs.push(
            CheckRecord::upper("transform.weak_l1", &statement, lambda * t.p, (lambda * t.lo, lambda * t.hi), c * e.mean, sups.len())
                .with_lambda(lambda)
                .with_note(format!("K = {k}, p = {p}")),
        );
    }
    let mut report = VerificationReport::new("transform");
    report.push(worst_case(recs).expect("non-empty λ grid"));
    Ok(report)
}

/// A value of `β_{p,X}` supplied from outside, with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaSupply {
    pub value: f64,
    pub provenance: String,
}

/// `E‖part_T‖^p ≤ β^p E‖M_T‖^p`. For Hilbert spaces at `p = 2` with no
/// supplied `β`, the sharp identity `E‖M_T‖² = Σ E‖part_T‖²` is checked
/// instead, through the mean of the cross terms
/// `‖M_T‖² − Σ ‖part_T‖²` which must be zero within three standard errors.
pub fn check_lp_bound(
    sample: &CanonicalSample,
    p: f64,
    part: Part,
    beta: Option<&BetaSupply>,
) -> Result<VerificationReport, VerifyError> {
    if !(p > 1.0) {
        return Err(VerifyError::Exponent(p));
    }
    let space = sample.space;
    let d = space.dim();
    let n = sample.n;
    match beta {
        None if space.is_hilbert() && p == 2.0 => {
            let mut cross = Vec::with_capacity(n);
            let mut whole = Vec::with_capacity(n);
            let mut parts_sum = Vec::with_capacity(n);
            let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
            for i in 0..n {
                let r = i * d..(i + 1) * d;
                let w = sq(&sample.m_end[r.clone()]);
                let s: f64 = (0..3).map(|j| sq(&sample.part_value[j][r.clone()])).sum();
                whole.push(w);
                parts_sum.push(s);
                cross.push(w - s);
            }
            let c = MeanEstimate::of(&cross);
            let w = MeanEstimate::of(&whole);
            let s = MeanEstimate::of(&parts_sum);
            let tol = (3.0 * c.se).max(1e-12 * w.mean.max(1.0));
            let mut report = VerificationReport::new("lp");
            report.push(
                CheckRecord::zero(
                    "lp.pythagoras",
                    "E‖M_t‖² − (E‖M^c_t‖² + E‖M^q_t‖² + E‖M^a_t‖²) = 0 within 3 standard errors",
                    Method::MonteCarlo,
                    c.mean,
                    tol,
                    n,
                )
                .with_note(format!("E‖M_t‖² = {}, sum of parts = {}", w.mean, s.mean)),
            );
            Ok(report)
        }
        None => Err(VerifyError::BetaUnavailable),
        Some(beta) => {
            let j = part.index();
            let lhs: Vec<f64> = sample.part_value[j].chunks(d).map(|v| space.norm_of(v).powf(p)).collect();
            let rhs: Vec<f64> = sample.m_end_norm.iter().map(|x| x.powf(p)).collect();
            let l = MeanEstimate::of(&lhs);
            let r = MeanEstimate::of(&rhs);
            let bp = beta.value.powf(p);
            let mut report = VerificationReport::new("lp");
            report.push(
                CheckRecord::upper(
                    &format!("lp.{}", part.symbol()),
                    &format!("E‖M^{}_t‖^{p} ≤ β^{p}·E‖M_t‖^{p}", part.symbol()),
                    l.mean,
                    (l.lo(), l.hi()),
                    bp * r.mean,
                    n,
                )
                .with_note(format!("β = {} supplied by configuration ({})", beta.value, beta.provenance)),
            );
            Ok(report)
        }
    }
}

/// Tree version of [`check_lp_bound`]: the accessible part is `M` itself
/// and the others vanish, so the ratio is exactly 1 or 0.
pub fn check_lp_bound_tree(
    m: &AdaptedProcess,
    p: f64,
    part: Part,
    beta: Option<&BetaSupply>,
) -> Result<VerificationReport, VerifyError> {
    if !(p > 1.0) {
        return Err(VerifyError::Exponent(p));
    }
    let space = m.space();
    let beta_value = match beta {
        Some(b) => b.value,
        None if space.is_hilbert() && p == 2.0 => 1.0,
        None => return Err(VerifyError::BetaUnavailable),
    };
    let tree = m.tree();
    let depth = tree.depth();
    let whole = tree.expectation(|a| space.norm_of(m.at(depth, a)).powf(p));
    let lhs = if part == Part::Accessible { whole } else { 0.0 };
    let mut r = CheckRecord::exact(
        &format!("lp.{}", part.symbol()),
        &format!("E‖M^{}‖^{p} ≤ β^{p}·E‖M‖^{p}", part.symbol()),
        lhs,
        beta_value.powf(p) * whole,
        tree.n_atoms(),
    );
    if let Some(b) = beta {
        r = r.with_note(format!("β = {} supplied by configuration ({})", b.value, b.provenance));
    }
    let mut report = VerificationReport::new("lp");
    report.push(r);
    Ok(report)
}

/// Allowance for rounding in comparisons that hold with equality in exact
/// arithmetic (a single-jump compensator has `‖V‖ = Var V`).
fn rounded(bound: f64) -> f64 {
    bound + 1e-12 * bound.abs()
}

fn hash(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded predictable coefficients: zero with probability about `zero`,
/// otherwise uniform in `[−1, 1]` (or exactly 1 when `unit`).
fn sparse_coeffs(m: &AdaptedProcess, seed: u64, zero: f64, unit: bool) -> TreeCoeffs {
    let tree = m.tree();
    let levels = (1..tree.n_levels())
        .map(|n| {
            (0..tree.n_blocks(n - 1))
                .map(|b| {
                    let h = hash(seed ^ hash(((n as u64) << 40) ^ b as u64));
                    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
                    if u < zero {
                        0.0
                    } else if unit {
                        1.0
                    } else {
                        (u - zero) / (1.0 - zero) * 2.0 - 1.0
                    }
                })
                .collect()
        })
        .collect();
    TreeCoeffs { a0: 1.0, levels }
}

/// `{0,1}` coefficients that vanish at step 1 and on every odd-indexed
/// block of level 1, and are seeded-sparse elsewhere, so the transform
/// vanishes identically on part of the tree and moves on the rest.
fn dormant_coeffs(m: &AdaptedProcess, seed: u64) -> TreeCoeffs {
    let tree = m.tree();
    let mut coeffs = sparse_coeffs(m, seed, 0.3, true);
    for (i, level) in coeffs.levels.iter_mut().enumerate() {
        let n = i + 1;
        for (b, a) in level.iter_mut().enumerate() {
            let dormant = n == 1 || tree.owner(1, tree.block_range(n - 1, b).start) % 2 == 1;
            if dormant {
                *a = 0.0;
            }
        }
    }
    coeffs
}

/// Exact checks of the auxiliary lemmas on one tree martingale `m`:
///
/// * compensators: `E‖V_n‖ ≤ E(Var V)_n ≤ E(Var A)_n`, with equality
///   `E(Var A)_n = E‖A_n‖` for a single-jump `A`;
/// * transforms: `E(Var N)_n ≤ 2·E(Var M)_n` (and pathwise `Var N ≤ Var M`);
/// * reconstruction of `M − M_0` from its jumps and their compensator;
/// * `{M* = 0} = {[M] = 0}` atomwise for a martingale that vanishes on
///   some atoms;
/// * `P(N* > 0) ≤ P(M* > 0)` for a transform `N` of such an `M`.
pub fn check_lemmas_tree(m: &AdaptedProcess, seed: u64) -> Result<VerificationReport, VerifyError> {
    let tree = m.tree().clone();
    let space = *m.space();
    let levels = tree.n_levels();
    let depth = tree.depth();
    let atoms = tree.n_atoms();
    let m0 = AdaptedProcess::constant(tree.clone(), space, m.value(0, 0));
    let mt = m.sub(&m0)?;
    let mut report = VerificationReport::new("lemmas");
    let exp_var = |x: &AdaptedProcess, n: usize| tree.expectation(|a| x.variation(n, a));

    // compensators of a single-jump process and of a general adapted one
    let lambda = mt.expected_norm(depth).max(1e-12);
    let g = gundy_tree(&mt, lambda)?;
    let n0 = AdaptedProcess::constant(tree.clone(), space, g.n.value(0, 0));
    let single = g.n.sub(&n0)?;
    let general = {
        let d = space.dim();
        AdaptedProcess::from_atom_fn(tree.clone(), space, |n, a, out| {
            for k in 1..=n {
                let inc = mt.increment(k, a);
                let w = space.norm_of(&inc);
                for i in 0..d {
                    out[i] += w * inc[i];
                }
            }
        })?
    };
    let mut first = Vec::new();
    let mut second = Vec::new();
    let mut one_jump = Vec::new();
    for (label, a) in [("single jump", &single), ("general", &general)] {
        let v = discrete_compensator(a)?;
        for n in 0..levels {
            let ev = v.expected_norm(n);
            let varv = exp_var(&v, n);
            let vara = exp_var(a, n);
            first.push(CheckRecord::exact("lemma.compensator.norm", "E‖V_t‖ ≤ E(Var V)_t", ev, rounded(varv), atoms).with_note(label));
            second.push(
                CheckRecord::exact("lemma.compensator.variation", "E(Var V)_t ≤ E(Var A)_t", varv, rounded(vara), atoms)
                    .with_note(label),
            );
            if std::ptr::eq(a, &single) {
                let diff = vara - a.expected_norm(n);
                one_jump.push(CheckRecord::zero(
                    "lemma.compensator.one_jump",
                    "E(Var A)_t = E‖A_t‖ for A with at most one jump",
                    Method::Exact,
                    diff,
                    1e-12 * vara.max(1.0),
                    atoms,
                ));
            }
        }
    }
    for recs in [first, second, one_jump] {
        report.push(worst_case(recs).expect("levels exist"));
    }

    // transforms
    let coeffs = sparse_coeffs(&mt, seed, 0.25, false);
    let tm = apply_transform_tree(&mt, &coeffs)?;
    let mut var_recs = Vec::new();
    let mut pathwise = true;
    for n in 0..levels {
        var_recs.push(CheckRecord::exact(
            "lemma.transform.variation",
            "E(Var N)_t ≤ 2·E(Var M)_t",
            exp_var(&tm, n),
            rounded(2.0 * exp_var(&mt, n)),
            atoms,
        ));
        pathwise &= (0..atoms).all(|a| tm.variation(n, a) <= mt.variation(n, a) * (1.0 + 1e-12));
    }
    report.push(worst_case(var_recs).expect("levels exist"));
    report.push(CheckRecord::holds(
        "lemma.transform.pathwise",
        "(Var N)_t ≤ (Var M)_t along every atom",
        Method::Exact,
        pathwise,
        atoms,
    ));

    let rebuilt = reconstruct_from_jumps_tree(&mt)?;
    report.push(CheckRecord::zero(
        "lemma.reconstruction",
        "M = ∫ x d(μ^M − ν^M) for M_0 = 0",
        Method::Exact,
        rebuilt.sub(&mt)?.max_norm(),
        1e-12 * mt.max_norm().max(1.0),
        atoms,
    ));

    // sparse martingale vanishing on a positive-probability set of atoms
    let sparse = apply_transform_tree(&mt, &dormant_coeffs(&mt, seed ^ 0x5eed))?;
    let n_sparse = apply_transform_tree(&sparse, &sparse_coeffs(&mt, seed ^ 0xc0ef, 0.3, false))?;
    let functionals = separating_set(&space, 0, seed);
    let zero_sets_agree = (0..atoms).all(|a| {
        functionals.functionals().iter().all(|x| {
            let star_zero = (0..levels).all(|k| crate::space::pairing(sparse.at(k, a), x) == 0.0);
            let qv_zero = sparse.quadratic_variation(depth, a, x) == 0.0;
            star_zero == qv_zero
        })
    });
    report.push(CheckRecord::holds(
        "lemma.zero_sets",
        "{M* = 0} = {[M] = 0} on every atom, for each coordinate functional",
        Method::Exact,
        zero_sets_agree,
        atoms,
    ));
    let p_m = tree.probability(|a| sparse.running_sup(depth, a) > 0.0);
    let p_n = tree.probability(|a| n_sparse.running_sup(depth, a) > 0.0);
    report.push(CheckRecord::exact("lemma.first_move", "P(N*_t > 0) ≤ P(M*_t > 0)", p_n, p_m, atoms));
    Ok(report)
}

/// Convenience: a path's canonical part as a dense trajectory.
pub fn part_trajectory(path: &LabeledPath, part: Part) -> crate::process::Trajectory {
    path.trajectory(part.channels())
}
