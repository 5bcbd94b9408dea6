//! Finite-dimensional normed spaces `ℓ_q^d` and finite separating sets of
//! functionals.
//!
//! Vectors are plain `f64` slices. Functionals act through the Euclidean
//! pairing, so the dual of `ℓ_q^d` is `ℓ_{q'}^d` with `1/q + 1/q' = 1`.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpaceError {
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("norm exponent q = {0} is not in [1, ∞]")]
    BadExponent(f64),
    #[error("vector has dimension {got}, space has dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Exponent of an `ℓ_q` norm: a finite `q ≥ 1` or `∞`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormKind {
    Lq(f64),
    Sup,
}

impl NormKind {
    pub fn new(q: f64) -> Result<Self, SpaceError> {
        if q == f64::INFINITY {
            Ok(NormKind::Sup)
        } else if q.is_finite() && q >= 1.0 {
            Ok(NormKind::Lq(q))
        } else {
            Err(SpaceError::BadExponent(q))
        }
    }

    pub fn exponent(self) -> f64 {
        match self {
            NormKind::Lq(q) => q,
            NormKind::Sup => f64::INFINITY,
        }
    }

    /// Conjugate exponent `q'`.
    pub fn dual(self) -> NormKind {
        match self {
            NormKind::Sup => NormKind::Lq(1.0),
            NormKind::Lq(1.0) => NormKind::Sup,
            NormKind::Lq(q) => NormKind::Lq(q / (q - 1.0)),
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormKind::Lq(q) => write!(f, "{q}"),
            NormKind::Sup => f.write_str("inf"),
        }
    }
}

impl Serialize for NormKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            NormKind::Lq(q) => s.serialize_f64(*q),
            NormKind::Sup => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for NormKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let q = match Raw::deserialize(d)? {
            Raw::Num(q) => q,
            Raw::Text(t) => match t.as_str() {
                "inf" | "infinity" | "∞" => f64::INFINITY,
                other => other
                    .parse::<f64>()
                    .map_err(|_| serde::de::Error::custom(format!("invalid norm exponent `{other}`")))?,
            },
        };
        NormKind::new(q).map_err(serde::de::Error::custom)
    }
}

/// `R^d` equipped with an `ℓ_q` norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpaceDescriptor", into = "SpaceDescriptor")]
pub struct NormedSpace {
    dim: usize,
    norm: NormKind,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceDescriptor {
    dim: usize,
    q: NormKind,
}

impl TryFrom<SpaceDescriptor> for NormedSpace {
    type Error = SpaceError;
    fn try_from(d: SpaceDescriptor) -> Result<Self, SpaceError> {
        NormedSpace::new(d.dim, d.q)
    }
}

impl From<NormedSpace> for SpaceDescriptor {
    fn from(s: NormedSpace) -> Self {
        SpaceDescriptor { dim: s.dim, q: s.norm }
    }
}

impl NormedSpace {
    pub fn new(dim: usize, norm: NormKind) -> Result<Self, SpaceError> {
        if dim == 0 {
            return Err(SpaceError::ZeroDimension);
        }
        if let NormKind::Lq(q) = norm {
            NormKind::new(q)?;
        }
        Ok(Self { dim, norm })
    }

    /// `ℓ_q^d` from a raw exponent (`f64::INFINITY` for the sup norm).
    pub fn lq(dim: usize, q: f64) -> Result<Self, SpaceError> {
        Self::new(dim, NormKind::new(q)?)
    }

    /// The real line.
    pub fn scalar() -> Self {
        Self { dim: 1, norm: NormKind::Lq(2.0) }
    }

    pub fn euclidean(dim: usize) -> Self {
        Self { dim: dim.max(1), norm: NormKind::Lq(2.0) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn norm_kind(&self) -> NormKind {
        self.norm
    }

    pub fn is_hilbert(&self) -> bool {
        self.dim == 1 || self.norm == NormKind::Lq(2.0)
    }

    pub fn dual(&self) -> NormedSpace {
        NormedSpace { dim: self.dim, norm: self.norm.dual() }
    }

    pub fn check(&self, v: &[f64]) -> Result<(), SpaceError> {
        if v.len() == self.dim {
            Ok(())
        } else {
            Err(SpaceError::DimensionMismatch { expected: self.dim, got: v.len() })
        }
    }

    /// `ℓ_q` norm of `v`.
    pub fn norm(&self, v: &[f64]) -> Result<f64, SpaceError> {
        self.check(v)?;
        Ok(self.norm_of(v))
    }

    /// Norm without the dimension check; callers guarantee `v.len() == dim`.
    pub fn norm_of(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.dim);
        lq_norm(self.norm, v)
    }

    /// Norm of `a - b`.
    pub fn dist(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.norm {
            NormKind::Sup => a.iter().zip(b).fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs())),
            NormKind::Lq(q) => {
                let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
                lq_norm(NormKind::Lq(q), &diff)
            }
        }
    }

    /// Zero vector.
    pub fn zero(&self) -> Vec<f64> {
        vec![0.0; self.dim]
    }

    /// Two-sided constants `c_lo‖x‖_2 ≤ ‖x‖ ≤ c_hi‖x‖_2`.
    pub fn euclidean_equivalence(&self) -> (f64, f64) {
        let d = self.dim as f64;
        match self.norm {
            NormKind::Sup => (d.powf(-0.5), 1.0),
            NormKind::Lq(q) if q >= 2.0 => (d.powf(1.0 / q - 0.5), 1.0),
            NormKind::Lq(q) => (1.0, d.powf(1.0 / q - 0.5)),
        }
    }
}

impl fmt::Display for NormedSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ℓ_{}^{}", self.norm, self.dim)
    }
}

fn lq_norm(kind: NormKind, v: &[f64]) -> f64 {
    match kind {
        NormKind::Sup => v.iter().fold(0.0, |m, x| f64::max(m, x.abs())),
        NormKind::Lq(1.0) => v.iter().map(|x| x.abs()).sum(),
        NormKind::Lq(2.0) => {
            // scaled to avoid overflow on large entries
            let scale = v.iter().fold(0.0, |m, x| f64::max(m, x.abs()));
            if scale == 0.0 || !scale.is_finite() {
                return scale;
            }
            scale * v.iter().map(|x| (x / scale) * (x / scale)).sum::<f64>().sqrt()
        }
        NormKind::Lq(q) => {
            let scale = v.iter().fold(0.0, |m, x| f64::max(m, x.abs()));
            if scale == 0.0 || !scale.is_finite() {
                return scale;
            }
            scale * v.iter().map(|x| (x.abs() / scale).powf(q)).sum::<f64>().powf(1.0 / q)
        }
    }
}

/// Euclidean pairing `⟨v, x*⟩`.
pub fn pairing(v: &[f64], functional: &[f64]) -> f64 {
    v.iter().zip(functional).map(|(a, b)| a * b).sum()
}

/// A finite set of functionals on `R^d` acting by the Euclidean pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSet {
    dim: usize,
    functionals: Vec<Vec<f64>>,
}

impl DualSet {
    pub fn new(dim: usize, functionals: Vec<Vec<f64>>) -> Result<Self, SpaceError> {
        if dim == 0 {
            return Err(SpaceError::ZeroDimension);
        }
        for f in &functionals {
            if f.len() != dim {
                return Err(SpaceError::DimensionMismatch { expected: dim, got: f.len() });
            }
        }
        Ok(Self { dim, functionals })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn functionals(&self) -> &[Vec<f64>] {
        &self.functionals
    }

    pub fn len(&self) -> usize {
        self.functionals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functionals.is_empty()
    }

    /// Rank of the functionals as rows of a matrix.
    pub fn rank(&self) -> usize {
        matrix_rank(&self.functionals, self.dim)
    }

    /// Whether the set separates points of `R^d`.
    pub fn is_separating(&self) -> bool {
        self.rank() == self.dim
    }
}

/// Coordinate functionals followed by `extras` pseudo-random unit-sphere
/// functionals drawn from `seed`.
pub fn separating_set(space: &NormedSpace, extras: usize, seed: u64) -> DualSet {
    let d = space.dim();
    let mut functionals: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            e
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while functionals.len() < d + extras {
        let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = lq_norm(NormKind::Lq(2.0), &g);
        if n > 1e-12 {
            functionals.push(g.into_iter().map(|x| x / n).collect());
        }
    }
    DualSet { dim: d, functionals }
}

/// Row rank by Gaussian elimination with partial pivoting.
pub fn matrix_rank(rows: &[Vec<f64>], cols: usize) -> usize {
    let mut m: Vec<Vec<f64>> = rows.to_vec();
    let scale = m
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0, |acc: f64, x| acc.max(x.abs()))
        .max(1e-300);
    let eps = 1e-10 * scale;
    let mut rank = 0;
    for c in 0..cols {
        let pivot = (rank..m.len()).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs()));
        let Some(p) = pivot else { break };
        if m[p][c].abs() <= eps {
            continue;
        }
        m.swap(rank, p);
        for r in rank + 1..m.len() {
            let f = m[r][c] / m[rank][c];
            if f != 0.0 {
                for k in c..cols {
                    m[r][k] -= f * m[rank][k];
                }
            }
        }
        rank += 1;
    }
    rank
}
