//! Grid-time càdlàg paths.
//!
//! A [`LabeledPath`] stores its initial value and a sparse list of labeled
//! increments on a [`TimeGrid`]. Step `k` (for `1 ≤ k ≤ K`) carries the motion
//! from `t_{k−1}` to `t_k`; the left limit at `t_k` is the value at `t_{k−1}`.
//! Pathwise functionals (running supremum, variation, quadratic variation,
//! stopping) act on the net increment per step, so they can be evaluated on a
//! dense [`Trajectory`] obtained from any channel selection.

use std::fmt;
use std::io;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::{NormKind, NormedSpace};

#[derive(Debug, Error)]
pub enum ProcessError {
    #[error("time grid must start at 0 and be strictly increasing")]
    BadGrid,
    #[error("index {index} out of range (grid has {steps} steps)")]
    IndexOutOfRange { index: usize, steps: usize },
    #[error("vector has dimension {got}, path has dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("accessible jump at step {0}, which is not a declared predictable time")]
    AccessibleOffSchedule(usize),
    #[error("quasi-left-continuous jump at step {0}, which is a declared predictable time")]
    QlcAtPredictableTime(usize),
    #[error("{label} increment of norm {norm} at step {step} exceeds the continuity bound {bound}")]
    ContinuityBound { step: usize, label: Label, norm: f64, bound: f64 },
    #[error("paths live on different grids or spaces")]
    Incompatible,
    #[error("line {line}: {msg}")]
    Csv { line: u64, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Strictly increasing grid `0 = t_0 < t_1 < … < t_K`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self, ProcessError> {
        let ok = times.first() == Some(&0.0)
            && times.iter().all(|t| t.is_finite())
            && times.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(Self { times })
        } else {
            Err(ProcessError::BadGrid)
        }
    }

    /// `steps` equal steps on `[0, horizon]`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self, ProcessError> {
        if !(horizon > 0.0) || steps == 0 {
            return Err(ProcessError::BadGrid);
        }
        let mut times: Vec<f64> = (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect();
        times[steps] = horizon;
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of steps `K`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.steps()]
    }

    /// Length `t_k − t_{k−1}` of step `k ≥ 1`.
    pub fn dt(&self, k: usize) -> f64 {
        self.times[k] - self.times[k - 1]
    }

    pub fn mesh(&self) -> f64 {
        self.times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// Grid index of `t`, if `t` is a grid point.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.times.binary_search_by(|x| x.total_cmp(&t)).ok()
    }

    /// Smallest index `k` with `t_k ≥ t`.
    pub fn snap_up(&self, t: f64) -> Option<usize> {
        let k = self.times.partition_point(|x| *x < t);
        (k < self.times.len()).then_some(k)
    }
}

/// Channel of an increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    Cont,
    QlcJump,
    QlcDrift,
    AccJump,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Cont, Label::QlcJump, Label::QlcDrift, Label::AccJump];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Cont => "CONT",
            Label::QlcJump => "QLC_JUMP",
            Label::QlcDrift => "QLC_DRIFT",
            Label::AccJump => "ACC_JUMP",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown channel {s:?}"))
    }
}

/// Subset of channels, optionally including the initial value `M_0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelSet(u8);

impl ChannelSet {
    const INITIAL: u8 = 1 << 4;

    pub const NONE: ChannelSet = ChannelSet(0);
    /// Every channel and the initial value: the path itself.
    pub const ALL: ChannelSet = ChannelSet(0b1_1111);
    pub const CONTINUOUS: ChannelSet = ChannelSet(1 << Label::Cont as u8);
    pub const QUASI_LEFT_CONTINUOUS: ChannelSet =
        ChannelSet(1 << Label::QlcJump as u8 | 1 << Label::QlcDrift as u8);
    /// Accessible jumps together with `M_0`.
    pub const ACCESSIBLE: ChannelSet = ChannelSet(1 << Label::AccJump as u8 | Self::INITIAL);
    /// All jumps (no drift, no continuous motion, no initial value).
    pub const JUMPS: ChannelSet = ChannelSet(1 << Label::QlcJump as u8 | 1 << Label::AccJump as u8);

    pub fn of(labels: &[Label]) -> Self {
        ChannelSet(labels.iter().fold(0, |m, l| m | l.bit()))
    }

    pub fn with_initial(self) -> Self {
        ChannelSet(self.0 | Self::INITIAL)
    }

    pub fn without_initial(self) -> Self {
        ChannelSet(self.0 & !Self::INITIAL)
    }

    pub fn contains(self, label: Label) -> bool {
        self.0 & label.bit() != 0
    }

    pub fn has_initial(self) -> bool {
        self.0 & Self::INITIAL != 0
    }

    pub fn union(self, other: Self) -> Self {
        ChannelSet(self.0 | other.0)
    }
}

/// Stopping time on a grid: an index in `0..=K` or never.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopTime {
    pub index: Option<usize>,
    pub predictable: bool,
}

impl StopTime {
    pub const NEVER: StopTime = StopTime { index: None, predictable: true };

    pub fn at(index: usize) -> Self {
        StopTime { index: Some(index), predictable: false }
    }

    pub fn predictable_at(index: usize) -> Self {
        StopTime { index: Some(index), predictable: true }
    }

    pub fn is_never(self) -> bool {
        self.index.is_none()
    }

    /// Index with `K + 1` standing for never.
    pub fn sentinel(self, steps: usize) -> usize {
        self.index.unwrap_or(steps + 1)
    }

    pub fn min(self, other: StopTime) -> StopTime {
        let index = match (self.index, other.index) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        StopTime { index, predictable: self.predictable && other.predictable }
    }
}

/// Dense values `X_{t_0}, …, X_{t_K}` of a process on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    space: NormedSpace,
    values: Vec<f64>,
}

impl Trajectory {
    pub fn from_values(space: NormedSpace, values: Vec<f64>) -> Result<Self, ProcessError> {
        let d = space.dim();
        if values.is_empty() || !values.len().is_multiple_of(d) {
            return Err(ProcessError::DimensionMismatch { expected: d, got: values.len() });
        }
        Ok(Self { space, values })
    }

    pub fn zero(space: NormedSpace, steps: usize) -> Self {
        Self { space, values: vec![0.0; (steps + 1) * space.dim()] }
    }

    pub fn space(&self) -> &NormedSpace {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn steps(&self) -> usize {
        self.values.len() / self.dim() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.values[k * d..(k + 1) * d]
    }

    pub fn value_checked(&self, k: usize) -> Result<&[f64], ProcessError> {
        if k > self.steps() {
            return Err(ProcessError::IndexOutOfRange { index: k, steps: self.steps() });
        }
        Ok(self.value(k))
    }

    pub fn last(&self) -> &[f64] {
        self.value(self.steps())
    }

    pub fn norm_at(&self, k: usize) -> f64 {
        self.space.norm_of(self.value(k))
    }

    /// `X_{t_k} − X_{t_{k−1}}`, with the initial value at `k = 0`.
    pub fn increment(&self, k: usize) -> Vec<f64> {
        if k == 0 {
            return self.value(0).to_vec();
        }
        self.value(k).iter().zip(self.value(k - 1)).map(|(a, b)| a - b).collect()
    }

    /// `max_{j ≤ k} ‖X_{t_j}‖`.
    pub fn running_sup(&self, k: usize) -> f64 {
        (0..=k).fold(0.0, |m, j| f64::max(m, self.norm_at(j)))
    }

    pub fn sup(&self) -> f64 {
        self.running_sup(self.steps())
    }

    /// `‖X_0‖ + Σ_{1 ≤ j ≤ k} ‖X_{t_j} − X_{t_{j−1}}‖`.
    pub fn variation(&self, k: usize) -> f64 {
        let mut v = self.norm_at(0);
        for j in 1..=k {
            v += self.space.dist(self.value(j), self.value(j - 1));
        }
        v
    }

    /// `Σ_{1 ≤ j ≤ k} ⟨X_{t_j} − X_{t_{j−1}}, x*⟩²`.
    pub fn quadratic_variation(&self, functional: &[f64], k: usize) -> f64 {
        (1..=k).map(|j| self.qv_increment(functional, j)).sum()
    }

    /// `⟨ΔX_j, x*⟩²` for `j ≥ 1`, and `⟨X_0, x*⟩²` for `j = 0`.
    pub fn qv_increment(&self, functional: &[f64], j: usize) -> f64 {
        let d = self.dim();
        let cur = &self.values[j * d..(j + 1) * d];
        let s: f64 = if j == 0 {
            cur.iter().zip(functional).map(|(a, f)| a * f).sum()
        } else {
            let prev = &self.values[(j - 1) * d..j * d];
            cur.iter().zip(prev).zip(functional).map(|((a, b), f)| (a - b) * f).sum()
        };
        s * s
    }

    /// First index with `‖X_{t_k}‖ ≥ level`.
    pub fn hit_time(&self, level: f64) -> StopTime {
        match (0..=self.steps()).find(|&k| self.norm_at(k) >= level) {
            Some(k) => StopTime::at(k),
            None => StopTime::NEVER,
        }
    }

    /// `X^{τ−}`: `X_{t_j}` for `j < τ`, `X_{t_{τ−1}}` afterwards, and `0`
    /// everywhere when `τ = 0`.
    pub fn pre_stop(&self, tau: StopTime) -> Trajectory {
        let d = self.dim();
        let mut values = self.values.clone();
        match tau.index {
            None => {}
            Some(0) => values.fill(0.0),
            Some(t) if t <= self.steps() => {
                let frozen = self.values[(t - 1) * d..t * d].to_vec();
                for chunk in values[t * d..].chunks_mut(d) {
                    chunk.copy_from_slice(&frozen);
                }
            }
            Some(_) => {}
        }
        Trajectory { space: self.space, values }
    }

    /// `X^τ`: frozen at `τ` inclusive.
    pub fn stop(&self, tau: StopTime) -> Trajectory {
        let d = self.dim();
        let mut values = self.values.clone();
        if let Some(t) = tau.index {
            if t < self.steps() {
                let frozen = self.values[t * d..(t + 1) * d].to_vec();
                for chunk in values[(t + 1) * d..].chunks_mut(d) {
                    chunk.copy_from_slice(&frozen);
                }
            }
        }
        Trajectory { space: self.space, values }
    }

    /// `ΔX_τ`, equal to `X_0` when `τ = 0` and to `0` when `τ = ∞`.
    pub fn jump_at(&self, tau: StopTime) -> Vec<f64> {
        match tau.index {
            Some(t) if t <= self.steps() => self.increment(t),
            _ => vec![0.0; self.dim()],
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self, ProcessError> {
        if self.values.len() != other.values.len() || self.dim() != other.dim() {
            return Err(ProcessError::Incompatible);
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| f(*a, *b)).collect();
        Ok(Trajectory { space: self.space, values })
    }

    pub fn add(&self, other: &Self) -> Result<Self, ProcessError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, ProcessError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        Trajectory { space: self.space, values: self.values.iter().map(|x| c * x).collect() }
    }

    /// Largest `‖X_{t_k} − Y_{t_k}‖` over the grid.
    pub fn sup_distance(&self, other: &Self) -> Result<f64, ProcessError> {
        let diff = self.sub(other)?;
        Ok(diff.sup())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    step: u32,
    label: Label,
}

/// Càdlàg path on a grid whose increments carry channel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPath {
    grid: Arc<TimeGrid>,
    space: NormedSpace,
    initial: Vec<f64>,
    /// Sorted by `(step, label)`, at most one entry per pair.
    entries: Vec<Entry>,
    data: Vec<f64>,
    /// Sorted step indices declared predictable.
    acc_times: Vec<usize>,
}

/// Incremental constructor for [`LabeledPath`]; validates the channel
/// invariants on [`PathBuilder::build`].
#[derive(Debug, Clone)]
pub struct PathBuilder {
    grid: Arc<TimeGrid>,
    space: NormedSpace,
    initial: Vec<f64>,
    raw: Vec<(Entry, Vec<f64>)>,
    acc_times: Vec<usize>,
    continuity_bound: Option<f64>,
}

impl PathBuilder {
    pub fn new(grid: Arc<TimeGrid>, space: NormedSpace) -> Self {
        let initial = space.zero();
        Self { grid, space, initial, raw: Vec::new(), acc_times: Vec::new(), continuity_bound: None }
    }

    pub fn initial(mut self, x0: &[f64]) -> Self {
        self.initial = x0.to_vec();
        self
    }

    pub fn set_initial(&mut self, x0: &[f64]) {
        self.initial = x0.to_vec();
    }

    /// Rejects CONT and QLC_DRIFT increments with norm above `bound`.
    pub fn continuity_bound(mut self, bound: f64) -> Self {
        self.continuity_bound = Some(bound);
        self
    }

    /// Declares step `k` a predictable time at which accessible jumps may
    /// occur.
    pub fn declare_predictable(&mut self, k: usize) {
        self.acc_times.push(k);
    }

    /// Adds an increment on step `k ≥ 1`; increments with the same label on
    /// the same step are summed.
    pub fn push(&mut self, k: usize, label: Label, v: &[f64]) {
        self.raw.push((Entry { step: k as u32, label }, v.to_vec()));
    }

    pub fn build(self) -> Result<LabeledPath, ProcessError> {
        let d = self.space.dim();
        let steps = self.grid.steps();
        if self.initial.len() != d {
            return Err(ProcessError::DimensionMismatch { expected: d, got: self.initial.len() });
        }
        let mut acc_times = self.acc_times;
        acc_times.sort_unstable();
        acc_times.dedup();
        if let Some(&k) = acc_times.iter().find(|&&k| k == 0 || k > steps) {
            return Err(ProcessError::IndexOutOfRange { index: k, steps });
        }
        let mut raw = self.raw;
        raw.sort_by_key(|(e, _)| (e.step, e.label));
        let mut entries: Vec<Entry> = Vec::with_capacity(raw.len());
        let mut data: Vec<f64> = Vec::with_capacity(raw.len() * d);
        for (e, v) in raw {
            if v.len() != d {
                return Err(ProcessError::DimensionMismatch { expected: d, got: v.len() });
            }
            let k = e.step as usize;
            if k == 0 || k > steps {
                return Err(ProcessError::IndexOutOfRange { index: k, steps });
            }
            if entries.last() == Some(&e) {
                let n = data.len();
                for (a, b) in data[n - d..].iter_mut().zip(&v) {
                    *a += b;
                }
            } else {
                entries.push(e);
                data.extend_from_slice(&v);
            }
        }
        // drop entries that cancelled or were pushed as zero
        let mut kept_e = Vec::with_capacity(entries.len());
        let mut kept_d = Vec::with_capacity(data.len());
        for (e, v) in entries.into_iter().zip(data.chunks(d)) {
            if v.iter().any(|x| *x != 0.0) {
                kept_e.push(e);
                kept_d.extend_from_slice(v);
            }
        }
        for (e, v) in kept_e.iter().zip(kept_d.chunks(d)) {
            let k = e.step as usize;
            let predictable = acc_times.binary_search(&k).is_ok();
            match e.label {
                Label::AccJump if !predictable => return Err(ProcessError::AccessibleOffSchedule(k)),
                Label::QlcJump if predictable => return Err(ProcessError::QlcAtPredictableTime(k)),
                Label::Cont | Label::QlcDrift => {
                    if let Some(bound) = self.continuity_bound {
                        let norm = self.space.norm_of(v);
                        if norm > bound {
                            return Err(ProcessError::ContinuityBound { step: k, label: e.label, norm, bound });
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(LabeledPath {
            grid: self.grid,
            space: self.space,
            initial: self.initial,
            entries: kept_e,
            data: kept_d,
            acc_times,
        })
    }
}

impl LabeledPath {
    /// Constant path `M ≡ x0`.
    pub fn constant(grid: Arc<TimeGrid>, space: NormedSpace, x0: &[f64]) -> Result<Self, ProcessError> {
        PathBuilder::new(grid, space).initial(x0).build()
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn space(&self) -> &NormedSpace {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn predictable_times(&self) -> &[usize] {
        &self.acc_times
    }

    pub fn is_predictable_time(&self, k: usize) -> bool {
        self.acc_times.binary_search(&k).is_ok()
    }

    /// Labeled increments in `(step, label)` order.
    pub fn increments(&self) -> impl Iterator<Item = (usize, Label, &[f64])> + '_ {
        let d = self.dim();
        self.entries
            .iter()
            .zip(self.data.chunks(d))
            .map(|(e, v)| (e.step as usize, e.label, v))
    }

    pub fn has_channel(&self, label: Label) -> bool {
        self.entries.iter().any(|e| e.label == label)
    }

    /// Path restricted to the selected channels, with the initial value kept
    /// only if selected. Predictable times are preserved.
    pub fn restrict(&self, channels: ChannelSet) -> LabeledPath {
        let d = self.dim();
        let mut entries = Vec::new();
        let mut data = Vec::new();
        for (e, v) in self.entries.iter().zip(self.data.chunks(d)) {
            if channels.contains(e.label) {
                entries.push(*e);
                data.extend_from_slice(v);
            }
        }
        let initial = if channels.has_initial() { self.initial.clone() } else { self.space.zero() };
        LabeledPath {
            grid: self.grid.clone(),
            space: self.space,
            initial,
            entries,
            data,
            acc_times: self.acc_times.clone(),
        }
    }

    /// Dense values of the selected channels.
    pub fn trajectory(&self, channels: ChannelSet) -> Trajectory {
        let d = self.dim();
        let steps = self.steps();
        let mut values = vec![0.0; (steps + 1) * d];
        if channels.has_initial() {
            values[..d].copy_from_slice(&self.initial);
        }
        for (e, v) in self.entries.iter().zip(self.data.chunks(d)) {
            if channels.contains(e.label) {
                let k = e.step as usize;
                for (a, b) in values[k * d..(k + 1) * d].iter_mut().zip(v) {
                    *a += b;
                }
            }
        }
        for k in 1..=steps {
            for i in 0..d {
                values[k * d + i] += values[(k - 1) * d + i];
            }
        }
        Trajectory { space: self.space, values }
    }

    /// Values on the channel-refined partition: each step is split into four
    /// sub-steps, one per channel in [`Label::ALL`] order, so that increments
    /// of different channels never share a partition interval. Sub-step
    /// `4(k−1) + i + 1` carries channel `i` of step `k`.
    pub fn channel_refined(&self, channels: ChannelSet) -> Trajectory {
        let d = self.dim();
        let n = 4 * self.steps();
        let mut values = vec![0.0; (n + 1) * d];
        if channels.has_initial() {
            values[..d].copy_from_slice(&self.initial);
        }
        for (e, v) in self.entries.iter().zip(self.data.chunks(d)) {
            if channels.contains(e.label) {
                let j = 4 * (e.step as usize - 1) + e.label as usize + 1;
                values[j * d..(j + 1) * d].copy_from_slice(v);
            }
        }
        for j in 1..=n {
            for i in 0..d {
                values[j * d + i] += values[(j - 1) * d + i];
            }
        }
        Trajectory { space: self.space, values }
    }

    /// The path values `M_{t_0}, …, M_{t_K}`.
    pub fn values(&self) -> Trajectory {
        self.trajectory(ChannelSet::ALL)
    }

    pub fn value_at(&self, k: usize, channels: ChannelSet) -> Result<Vec<f64>, ProcessError> {
        if k > self.steps() {
            return Err(ProcessError::IndexOutOfRange { index: k, steps: self.steps() });
        }
        let d = self.dim();
        let mut out = if channels.has_initial() { self.initial.clone() } else { vec![0.0; d] };
        for (step, label, v) in self.increments() {
            if step > k {
                break;
            }
            if channels.contains(label) {
                for (a, b) in out.iter_mut().zip(v) {
                    *a += b;
                }
            }
        }
        Ok(out)
    }

    pub fn running_sup(&self, k: usize) -> f64 {
        self.values().running_sup(k)
    }

    pub fn variation(&self, k: usize) -> f64 {
        self.values().variation(k)
    }

    pub fn quadratic_variation(&self, functional: &[f64], k: usize) -> f64 {
        self.values().quadratic_variation(functional, k)
    }

    pub fn hit_time(&self, level: f64) -> StopTime {
        self.values().hit_time(level)
    }

    /// `M^{τ−}` as a labeled path: increments strictly before `τ` are kept.
    pub fn pre_stop(&self, tau: StopTime) -> LabeledPath {
        match tau.index {
            Some(0) => self.filtered(|_| false, false),
            Some(t) => self.filtered(|k| k < t, true),
            None => self.clone(),
        }
    }

    /// `M^τ` as a labeled path: increments up to and including `τ` are kept.
    pub fn stop(&self, tau: StopTime) -> LabeledPath {
        match tau.index {
            Some(t) => self.filtered(|k| k <= t, true),
            None => self.clone(),
        }
    }

    pub fn jump_at(&self, tau: StopTime) -> Vec<f64> {
        match tau.index {
            Some(0) => self.initial.clone(),
            Some(t) if t <= self.steps() => {
                let mut out = vec![0.0; self.dim()];
                for (step, _, v) in self.increments() {
                    if step == t {
                        for (a, b) in out.iter_mut().zip(v) {
                            *a += b;
                        }
                    }
                }
                out
            }
            _ => vec![0.0; self.dim()],
        }
    }

    fn filtered(&self, keep: impl Fn(usize) -> bool, keep_initial: bool) -> LabeledPath {
        let d = self.dim();
        let mut entries = Vec::new();
        let mut data = Vec::new();
        for (e, v) in self.entries.iter().zip(self.data.chunks(d)) {
            if keep(e.step as usize) {
                entries.push(*e);
                data.extend_from_slice(v);
            }
        }
        LabeledPath {
            grid: self.grid.clone(),
            space: self.space,
            initial: if keep_initial { self.initial.clone() } else { self.space.zero() },
            entries,
            data,
            acc_times: self.acc_times.clone(),
        }
    }

    /// Channelwise sum of two paths on the same grid.
    pub fn add(&self, other: &LabeledPath) -> Result<LabeledPath, ProcessError> {
        if self.grid != other.grid || self.dim() != other.dim() {
            return Err(ProcessError::Incompatible);
        }
        let mut b = PathBuilder::new(self.grid.clone(), self.space);
        let x0: Vec<f64> = self.initial.iter().zip(&other.initial).map(|(a, c)| a + c).collect();
        b.set_initial(&x0);
        for k in self.acc_times.iter().chain(&other.acc_times) {
            b.declare_predictable(*k);
        }
        for (k, l, v) in self.increments().chain(other.increments()) {
            b.push(k, l, v);
        }
        b.build()
    }

    /// Writes the path as CSV rows `time,channel,x0,…`.
    ///
    /// The first row is the `INITIAL` value at time 0. Every declared
    /// predictable time gets an `ACC_TIME` row, and every grid point without
    /// any other row gets a `TICK` row, so the grid is recoverable from the
    /// file. Increment rows follow in step order.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), ProcessError> {
        let d = self.dim();
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["time".to_string(), "channel".to_string()];
        header.extend((0..d).map(|i| format!("x{i}")));
        wtr.write_record(&header).map_err(csv_err)?;
        let row = |wtr: &mut csv::Writer<W>, t: f64, ch: &str, v: &[f64]| -> Result<(), ProcessError> {
            let mut rec = vec![fmt_f64(t), ch.to_string()];
            rec.extend(v.iter().map(|x| fmt_f64(*x)));
            wtr.write_record(&rec).map_err(csv_err)
        };
        row(&mut wtr, 0.0, "INITIAL", &self.initial)?;
        let zero = vec![0.0; d];
        let mut it = self.increments().peekable();
        for k in 1..=self.steps() {
            let t = self.grid.time(k);
            let mut wrote = false;
            if self.is_predictable_time(k) {
                row(&mut wtr, t, "ACC_TIME", &zero)?;
                wrote = true;
            }
            while let Some(&(step, label, v)) = it.peek() {
                if step != k {
                    break;
                }
                row(&mut wtr, t, label.as_str(), v)?;
                wrote = true;
                it.next();
            }
            if !wrote {
                row(&mut wtr, t, "TICK", &zero)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads a path written by [`LabeledPath::write_csv`]; the norm is not
    /// stored in the file and must be supplied.
    pub fn read_csv<R: io::Read>(r: R, norm: NormKind) -> Result<LabeledPath, ProcessError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        if headers.len() < 3 || &headers[0] != "time" || &headers[1] != "channel" {
            return Err(ProcessError::Csv { line: 1, msg: "expected header time,channel,x0,…".into() });
        }
        for (i, h) in headers.iter().skip(2).enumerate() {
            if h != format!("x{i}") {
                return Err(ProcessError::Csv { line: 1, msg: format!("unexpected column {h:?}") });
            }
        }
        let d = headers.len() - 2;
        let space = NormedSpace::new(d, norm)
            .map_err(|e| ProcessError::Csv { line: 1, msg: e.to_string() })?;
        let mut times = vec![0.0];
        let mut initial: Option<Vec<f64>> = None;
        let mut rows: Vec<(usize, Label, Vec<f64>)> = Vec::new();
        let mut acc = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |msg: String| ProcessError::Csv { line, msg };
            let t: f64 = rec[0].trim().parse().map_err(|_| bad(format!("bad time {:?}", &rec[0])))?;
            let v = rec
                .iter()
                .skip(2)
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad("bad increment component".into()))?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(bad("non-finite increment component".into()));
            }
            let channel = &rec[1];
            if initial.is_none() {
                if channel != "INITIAL" || t != 0.0 {
                    return Err(bad("first row must be INITIAL at time 0".into()));
                }
                initial = Some(v);
                continue;
            }
            if channel == "INITIAL" {
                return Err(bad("duplicate INITIAL row".into()));
            }
            let last = *times.last().unwrap();
            if !(t >= last) || !t.is_finite() {
                return Err(bad(format!("time {t} is not nondecreasing")));
            }
            if t > last {
                times.push(t);
            } else if times.len() == 1 {
                return Err(bad("increments at time 0 must be part of the INITIAL row".into()));
            }
            let k = times.len() - 1;
            match channel {
                "TICK" => {}
                "ACC_TIME" => acc.push(k),
                other => {
                    let label: Label = other.parse().map_err(bad)?;
                    rows.push((k, label, v));
                }
            }
        }
        let initial = initial.ok_or(ProcessError::Csv { line: 1, msg: "missing INITIAL row".into() })?;
        if times.len() < 2 {
            return Err(ProcessError::Csv { line: 1, msg: "path has no steps".into() });
        }
        let grid = Arc::new(TimeGrid::new(times)?);
        let mut b = PathBuilder::new(grid, space).initial(&initial);
        for k in acc {
            b.declare_predictable(k);
        }
        for (k, l, v) in rows {
            b.push(k, l, &v);
        }
        b.build()
    }
}

fn csv_err(e: csv::Error) -> ProcessError {
    let line = e.position().map_or(0, |p| p.line());
    ProcessError::Csv { line, msg: e.to_string() }
}

/// Shortest representation that parses back to the same `f64`.
fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_path(incs: &[f64]) -> LabeledPath {
        let grid = Arc::new(TimeGrid::uniform(incs.len() as f64, incs.len()).unwrap());
        let mut b = PathBuilder::new(grid, NormedSpace::scalar());
        for (k, x) in incs.iter().enumerate() {
            b.push(k + 1, Label::Cont, &[*x]);
        }
        b.build().unwrap()
    }

    #[test]
    fn value_at_examples() {
        let grid = Arc::new(TimeGrid::uniform(1.0, 2).unwrap());
        let mut b = PathBuilder::new(grid, NormedSpace::scalar()).initial(&[3.0]);
        b.push(1, Label::Cont, &[1.0]);
        b.push(2, Label::Cont, &[-2.0]);
        let p = b.build().unwrap();
        assert_eq!(p.value_at(0, ChannelSet::ALL).unwrap(), vec![3.0]);
        assert_eq!(p.value_at(2, ChannelSet::ALL).unwrap(), vec![2.0]);
        assert_eq!(p.value_at(2, ChannelSet::of(&[Label::QlcJump])).unwrap(), vec![0.0]);
        assert!(matches!(p.value_at(3, ChannelSet::ALL), Err(ProcessError::IndexOutOfRange { .. })));
    }

    #[test]
    fn sup_variation_and_qv() {
        let p = scalar_path(&[1.0, -2.0]);
        assert_eq!(p.running_sup(2), 1.0);
        assert_eq!(p.variation(2), 3.0);
        assert_eq!(p.quadratic_variation(&[1.0], 2), 5.0);

        let grid = Arc::new(TimeGrid::uniform(1.0, 3).unwrap());
        let c = LabeledPath::constant(grid, NormedSpace::euclidean(2), &[3.0, 4.0]).unwrap();
        assert_eq!(c.running_sup(3), 5.0);
        assert_eq!(c.variation(3), 5.0);
        assert_eq!(c.quadratic_variation(&[1.0, 1.0], 3), 0.0);

        let up = scalar_path(&[0.5, 0.25, 1.0]);
        assert_eq!(up.running_sup(3), 1.75);
    }

    #[test]
    fn single_jump_variation_equals_norm() {
        let grid = Arc::new(TimeGrid::uniform(1.0, 4).unwrap());
        let mut b = PathBuilder::new(grid, NormedSpace::lq(2, 1.0).unwrap());
        b.declare_predictable(2);
        b.push(2, Label::AccJump, &[1.5, -0.5]);
        let p = b.build().unwrap();
        for k in 2..=4 {
            assert_eq!(p.variation(k), 2.0);
            assert_eq!(p.values().norm_at(k), 2.0);
        }
    }

    #[test]
    fn hit_time_examples() {
        let p = scalar_path(&[0.25, 0.25]);
        assert!(p.hit_time(1.0).is_never());
        let grid = Arc::new(TimeGrid::uniform(1.0, 2).unwrap());
        let c = LabeledPath::constant(grid, NormedSpace::scalar(), &[2.0]).unwrap();
        assert_eq!(c.hit_time(1.0).index, Some(0));

        // steps 0.4 r1, 0.8 r2 and level 0.5: hit at 2 exactly when r1 = r2
        for (r1, r2) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let p = scalar_path(&[0.4 * r1, 0.8 * r2]);
            let expected = if r1 == r2 { Some(2) } else { None };
            assert_eq!(p.hit_time(0.5).index, expected);
        }
        // inclusive threshold
        assert_eq!(scalar_path(&[0.5]).hit_time(0.5).index, Some(1));
    }

    #[test]
    fn stopping_examples() {
        let p = scalar_path(&[1.0, 2.0, 4.0]);
        assert_eq!(p.pre_stop(StopTime::NEVER), p);
        let zero = p.pre_stop(StopTime::at(0));
        assert!(zero.values().values().iter().all(|x| *x == 0.0));
        assert_eq!(p.jump_at(StopTime::NEVER), vec![0.0]);

        let grid = Arc::new(TimeGrid::uniform(1.0, 3).unwrap());
        let mut b = PathBuilder::new(grid, NormedSpace::scalar()).initial(&[0.5]);
        b.declare_predictable(2);
        b.push(2, Label::AccJump, &[1.0]);
        let jump = b.build().unwrap();
        assert_eq!(jump.jump_at(StopTime::at(0)), vec![0.5]);
        let removed = jump.pre_stop(StopTime::at(2)).values();
        assert_eq!(removed.values(), &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(jump.jump_at(StopTime::at(2)), vec![1.0]);
    }

    #[test]
    fn continuous_jump_shrinks_with_mesh() {
        for steps in [10usize, 100, 1000] {
            let grid = Arc::new(TimeGrid::uniform(1.0, steps).unwrap());
            let mut b = PathBuilder::new(grid.clone(), NormedSpace::scalar());
            for k in 1..=steps {
                let s = if k % 2 == 0 { 1.0 } else { -1.0 };
                b.push(k, Label::Cont, &[s * grid.dt(k).sqrt()]);
            }
            let p = b.build().unwrap();
            let j = p.jump_at(StopTime::at(steps / 2));
            assert!((j[0].abs() - (1.0 / steps as f64).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_invariants() {
        let grid = Arc::new(TimeGrid::uniform(1.0, 3).unwrap());
        let mut b = PathBuilder::new(grid.clone(), NormedSpace::scalar());
        b.push(1, Label::AccJump, &[1.0]);
        assert!(matches!(b.build(), Err(ProcessError::AccessibleOffSchedule(1))));

        let mut b = PathBuilder::new(grid.clone(), NormedSpace::scalar());
        b.declare_predictable(1);
        b.push(1, Label::QlcJump, &[1.0]);
        assert!(matches!(b.build(), Err(ProcessError::QlcAtPredictableTime(1))));

        let mut b = PathBuilder::new(grid.clone(), NormedSpace::scalar()).continuity_bound(0.1);
        b.push(2, Label::Cont, &[0.5]);
        assert!(matches!(b.build(), Err(ProcessError::ContinuityBound { step: 2, .. })));

        let mut b = PathBuilder::new(grid, NormedSpace::scalar());
        b.push(0, Label::Cont, &[0.5]);
        assert!(matches!(b.build(), Err(ProcessError::IndexOutOfRange { index: 0, .. })));
    }

    #[test]
    fn csv_round_trip() {
        let grid = Arc::new(TimeGrid::new(vec![0.0, 0.1, 0.25, 0.5, 1.0]).unwrap());
        let mut b = PathBuilder::new(grid, NormedSpace::euclidean(2)).initial(&[0.1, -0.2]);
        b.declare_predictable(3);
        b.push(1, Label::Cont, &[0.01, 1.0 / 3.0]);
        b.push(2, Label::QlcJump, &[1.0, 0.0]);
        b.push(2, Label::QlcDrift, &[-0.05, 0.0]);
        b.push(3, Label::AccJump, &[0.0, -2.0]);
        let p = b.build().unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("time,channel,x0,x1\n0.0,INITIAL,0.1,-0.2\n"));
        assert!(text.contains("1.0,TICK,0.0,0.0"));
        let back = LabeledPath::read_csv(&buf[..], NormKind::Lq(2.0)).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn csv_rejects_malformed() {
        let cases = [
            "time,channel,x0\n0,CONT,1\n",
            "time,channel,x0\n0,INITIAL,1\n0.5,BOGUS,1\n",
            "time,channel,x0\n0,INITIAL,1\n0.5,CONT,1\n0.25,CONT,1\n",
            "time,channel,x0\n0,INITIAL,1\n0.5,ACC_JUMP,1\n",
            "time,channel,y\n0,INITIAL,1\n",
            "time,channel,x0\n0,INITIAL,1\n0.5,CONT,nan\n",
            "time,channel,x0\n0,INITIAL,1\n",
        ];
        for c in cases {
            assert!(LabeledPath::read_csv(c.as_bytes(), NormKind::Sup).is_err(), "{c}");
        }
    }

    fn arb_path() -> impl Strategy<Value = LabeledPath> {
        (1usize..12).prop_flat_map(|steps| {
            (
                prop::collection::vec((0u8..4, -2.0f64..2.0, -2.0f64..2.0), steps),
                prop::collection::vec(any::<bool>(), steps),
                (-1.0f64..1.0, -1.0f64..1.0),
            )
                .prop_map(move |(incs, acc, x0)| {
                    let grid = Arc::new(TimeGrid::uniform(1.0, steps).unwrap());
                    let mut b = PathBuilder::new(grid, NormedSpace::lq(2, 1.0).unwrap())
                        .initial(&[x0.0, x0.1]);
                    for (i, (l, a, c)) in incs.into_iter().enumerate() {
                        let k = i + 1;
                        let mut label = Label::ALL[l as usize];
                        if acc[i] {
                            b.declare_predictable(k);
                            if label == Label::QlcJump {
                                label = Label::AccJump;
                            }
                        } else if label == Label::AccJump {
                            label = Label::QlcJump;
                        }
                        b.push(k, label, &[a, c]);
                    }
                    b.build().unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn stop_minus_pre_stop_is_the_jump(p in arb_path(), t in 0usize..14) {
            let tau = if t > p.steps() { StopTime::NEVER } else { StopTime::at(t) };
            let diff = p.stop(tau).values().sub(&p.pre_stop(tau).values()).unwrap();
            let jump = p.jump_at(tau);
            for k in 0..=p.steps() {
                let expected: Vec<f64> = if tau.index.is_some_and(|t| k >= t) { jump.clone() } else { vec![0.0; 2] };
                for (a, b) in diff.value(k).iter().zip(&expected) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn iterated_pre_stop(p in arb_path(), a in 0usize..14, b in 0usize..14) {
            let st = |x: usize| if x > p.steps() { StopTime::NEVER } else { StopTime::at(x) };
            let lhs = p.pre_stop(st(a)).pre_stop(st(b)).values();
            let rhs = p.pre_stop(st(a).min(st(b))).values();
            prop_assert_eq!(lhs, rhs);
            // the dense and labeled versions agree
            prop_assert_eq!(p.values().pre_stop(st(a)), p.pre_stop(st(a)).values());
            prop_assert_eq!(p.values().stop(st(a)), p.stop(st(a)).values());
        }

        #[test]
        fn variation_dominates_norm(p in arb_path()) {
            let v = p.values();
            for k in 0..=p.steps() {
                prop_assert!(v.norm_at(k) <= v.variation(k) + 1e-12);
            }
        }

        #[test]
        fn qv_additive_and_relabel_invariant(p in arb_path(), cut in 0usize..12, f in (-1.0f64..1.0, -1.0f64..1.0)) {
            let x = [f.0, f.1];
            let v = p.values();
            let k = p.steps();
            let cut = cut.min(k);
            let split: f64 = (1..=cut).map(|j| v.qv_increment(&x, j)).sum::<f64>()
                + (cut + 1..=k).map(|j| v.qv_increment(&x, j)).sum::<f64>();
            prop_assert!((split - v.quadratic_variation(&x, k)).abs() < 1e-12);

            // moving every increment to the CONT channel keeps the net increments
            let mut b = PathBuilder::new(p.grid().clone(), *p.space()).initial(p.initial());
            for (step, _, inc) in p.increments() {
                b.push(step, Label::Cont, inc);
            }
            let relabeled = b.build().unwrap();
            let q1 = relabeled.quadratic_variation(&x, k);
            prop_assert!((q1 - v.quadratic_variation(&x, k)).abs() < 1e-12);
        }

        #[test]
        fn contracting_scalar_transform_has_smaller_qv(p in arb_path(), coeffs in prop::collection::vec(-1.0f64..1.0, 12)) {
            let mut b = PathBuilder::new(p.grid().clone(), *p.space());
            for &k in p.predictable_times() {
                b.declare_predictable(k);
            }
            for (step, l, inc) in p.increments() {
                let a = coeffs[step - 1];
                let scaled: Vec<f64> = inc.iter().map(|x| a * x).collect();
                b.push(step, l, &scaled);
            }
            let t = b.build().unwrap().values();
            let v = p.values();
            for j in 1..=p.steps() {
                prop_assert!(t.qv_increment(&[1.0, 0.0], j) <= v.qv_increment(&[1.0, 0.0], j) + 1e-12);
            }
        }

        #[test]
        fn csv_round_trips(p in arb_path()) {
            let mut buf = Vec::new();
            p.write_csv(&mut buf).unwrap();
            let back = LabeledPath::read_csv(&buf[..], NormKind::Lq(1.0)).unwrap();
            prop_assert_eq!(back.values(), p.values());
            prop_assert_eq!(back.predictable_times(), p.predictable_times());
        }
    }
}
