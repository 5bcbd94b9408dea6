use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CheckRecord, MeanEstimate, Method, VerificationReport, VerifyError};
use crate::generators::{path_rng, simulate_embedding, ClassicalWitness, EmbeddingSpec, PhiOracle};
use crate::space::{NormKind, NormedSpace};

/// Bound on `E‖M_end‖` in the divergence table: the coupling contributes at
/// most 2 and `E‖f̃‖ ≤ 1`.
pub const END_NORM_BOUND: f64 = 3.0;

/// Settings of the divergence demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceConfig {
    pub depths: Vec<usize>,
    pub paths: usize,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_leak_budget")]
    pub leak_budget: f64,
}

fn default_resolution() -> usize {
    4
}

fn default_leak_budget() -> f64 {
    0.25
}

/// One row of the growth table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRow {
    pub depth: usize,
    pub dim: usize,
    pub paths: usize,
    pub median_cont_sup: f64,
    pub p90_cont_sup: f64,
    pub mean_end_norm: f64,
    pub end_norm_ci_hi: f64,
    pub mean_f_norm: f64,
    /// Fraction of bridge blocks whose walk was not absorbed.
    pub mismatch_rate: f64,
}

/// Nearest-rank quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Simulates `paths` embedded paths for one oracle and summarizes them.
/// Path `i` uses stream `i` of `seed`.
pub fn embedding_row(
    oracle: &dyn PhiOracle,
    spec: &EmbeddingSpec,
    space: &NormedSpace,
    paths: usize,
    seed: u64,
) -> Result<DivergenceRow, VerifyError> {
    if paths == 0 {
        return Err(VerifyError::EmptyEnsemble);
    }
    let plan = spec.plan(oracle, space)?;
    let stats: Vec<_> = (0..paths)
        .into_par_iter()
        .map(|i| simulate_embedding(oracle, spec, &plan, space, &mut path_rng(seed, i as u64)))
        .collect();
    let mut sups: Vec<f64> = stats.iter().map(|s| s.cont_sup).collect();
    sups.sort_by(f64::total_cmp);
    let end = MeanEstimate::of(&stats.iter().map(|s| s.end_norm).collect::<Vec<_>>());
    let f = MeanEstimate::of(&stats.iter().map(|s| s.f_norm).collect::<Vec<_>>());
    let bridges = spec.coefficients.iter().filter(|a| **a != 0).count() * paths;
    let mismatched: usize = stats.iter().map(|s| s.mismatch.iter().filter(|m| **m).count()).sum();
    Ok(DivergenceRow {
        depth: oracle.depth(),
        dim: oracle.dim(),
        paths,
        median_cont_sup: quantile(&sups, 0.5),
        p90_cont_sup: quantile(&sups, 0.9),
        mean_end_norm: end.mean,
        end_norm_ci_hi: end.hi(),
        mean_f_norm: f.mean,
        mismatch_rate: if bridges == 0 { 0.0 } else { mismatched as f64 / bridges as f64 },
    })
}

/// Growth table of the continuous-part supremum of the embedding built on
/// the classical `ℓ^∞_{2^depth}` witness, one row per depth.
pub fn divergence_demo(norm: NormKind, config: &DivergenceConfig, seed: u64) -> Result<Vec<DivergenceRow>, VerifyError> {
    if norm != NormKind::Sup {
        return Err(VerifyError::DivergenceNorm);
    }
    config
        .depths
        .iter()
        .map(|&depth| {
            let w = ClassicalWitness { depth };
            let space = NormedSpace::new(w.dim(), NormKind::Sup).map_err(|_| VerifyError::DivergenceNorm)?;
            let spec = EmbeddingSpec::new(w.coefficients(), config.resolution, config.leak_budget);
            let stream_seed = seed.wrapping_add((depth as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            embedding_row(&w, &spec, &space, config.paths, stream_seed)
        })
        .collect()
}

/// `E‖M_end‖ ≤ 3` at every depth (upper 95% endpoint) and a strictly
/// increasing median of `(M^c)*₁` across the rows.
pub fn check_divergence(rows: &[DivergenceRow]) -> VerificationReport {
    let mut report = VerificationReport::new("divergence");
    let statement = format!("E‖M_end‖ ≤ {END_NORM_BOUND}");
    let worst = super::worst_case(rows.iter().map(|r| {
        CheckRecord::upper(
            "divergence.end_norm",
            &statement,
            r.mean_end_norm,
            (2.0 * r.mean_end_norm - r.end_norm_ci_hi, r.end_norm_ci_hi),
            END_NORM_BOUND,
            r.paths,
        )
        .with_note(format!("depth {}", r.depth))
    }));
    if let Some(w) = worst {
        report.push(w);
    }
    let increasing = rows.windows(2).all(|w| w[1].median_cont_sup > w[0].median_cont_sup);
    let medians: Vec<String> = rows.iter().map(|r| format!("{}: {}", r.depth, r.median_cont_sup)).collect();
    report.push(
        CheckRecord::holds(
            "divergence.growth",
            "median (M^c)*₁ strictly increases with depth",
            Method::MonteCarlo,
            increasing,
            rows.iter().map(|r| r.paths).sum(),
        )
        .with_note(medians.join(", ")),
    );
    report
}
