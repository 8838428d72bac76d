//! Entropy-guided segmentation of atom sequences.
//!
//! Atom positions are 1-based here, matching the surprisal trace: position
//! `t` is the `t`-th atom and `e_t` scores the transition `t → t+1`.

mod records;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nap::EntropyTrace;
use crate::numeric::Tensor;
use crate::rng;
use crate::smiles::AtomGraphMap;

pub use records::{
    read_label_records, read_segment_records, write_label_records, write_segment_records, LabelRecord,
    SegmentRecord,
};

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("peak {peak} outside 2..={max} for a sequence of {len} atoms")]
    PeakOutOfRange { peak: usize, len: usize, max: usize },
    #[error("peaks must be strictly ascending")]
    UnsortedPeaks,
    #[error("{requested} segments requested for {len} atoms")]
    TooManySegments { requested: usize, len: usize },
    #[error("segment count must be at least 1")]
    NoSegments,
    #[error("patch width must be at least 1")]
    ZeroWidth,
    #[error("sequence must contain at least one atom")]
    EmptySequence,
    #[error("invalid patch parameters: {0}")]
    InvalidParams(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// NMS window `delta` and prominence threshold `gamma` (nats).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchParams {
    pub delta: usize,
    pub gamma: f64,
}

impl Default for PatchParams {
    fn default() -> Self {
        Self { delta: 1, gamma: 0.05 }
    }
}

impl PatchParams {
    pub fn validate(&self) -> Result<(), PatchError> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(PatchError::InvalidParams(format!("gamma {} must be finite and ≥ 0", self.gamma)));
        }
        Ok(())
    }
}

/// `e_t − ½(e_{t−1} + e_{t+1})` for an interior transition `t`.
pub fn prominence(trace: &EntropyTrace, t: usize) -> f64 {
    trace.at(t) - 0.5 * (trace.at(t - 1) + trace.at(t + 1))
}

/// Strict local maxima in `2..=T−2` whose prominence reaches `gamma`,
/// ascending.
pub fn candidate_peaks(trace: &EntropyTrace, gamma: f64) -> Vec<usize> {
    let t_len = trace.atom_count();
    if t_len < 4 {
        return Vec::new();
    }
    (2..=t_len - 2)
        .filter(|&t| {
            let (l, c, r) = (trace.at(t - 1), trace.at(t), trace.at(t + 1));
            l < c && c > r && prominence(trace, t) >= gamma
        })
        .collect()
}

/// Candidates thinned by greedy non-maximum suppression: visited by
/// descending surprisal (ties by smaller index), kept when farther than
/// `delta` from every kept peak. Returned ascending.
pub fn detect_peaks(trace: &EntropyTrace, params: &PatchParams) -> Vec<usize> {
    let mut order = candidate_peaks(trace, params.gamma);
    order.sort_by(|&a, &b| trace.at(b).total_cmp(&trace.at(a)).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for t in order {
        if kept.iter().all(|&k| t.abs_diff(k) > params.delta) {
            kept.push(t);
        }
    }
    kept.sort_unstable();
    kept
}

/// Drops the least prominent peaks (later index first on ties) until at
/// most `max_segments − 1` remain, i.e. merges each such segment into its
/// left neighbour.
pub fn cap_peaks(trace: &EntropyTrace, peaks: &[usize], max_segments: usize) -> Vec<usize> {
    let budget = max_segments.saturating_sub(1);
    if peaks.len() <= budget {
        return peaks.to_vec();
    }
    let mut ranked = peaks.to_vec();
    ranked.sort_by(|&a, &b| prominence(trace, b).total_cmp(&prominence(trace, a)).then(a.cmp(&b)));
    ranked.truncate(budget);
    ranked.sort_unstable();
    ranked
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Entropy,
    Uniform,
    Random,
    External,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Entropy => "entropy",
            Self::Uniform => "uniform",
            Self::Random => "random",
            Self::External => "external",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Contiguous partition of atom positions `1..=T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    len: usize,
    /// 1-based first position of every segment; `starts[0] == 1`.
    starts: Vec<usize>,
    method: Method,
}

impl Segmentation {
    /// Builds from interior segment starts (each in `2..=T`, ascending).
    pub fn from_starts(len: usize, interior: &[usize], method: Method) -> Result<Self, PatchError> {
        if len == 0 {
            return Err(PatchError::EmptySequence);
        }
        if interior.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PatchError::UnsortedPeaks);
        }
        if let Some(&p) = interior.iter().find(|&&p| p < 2 || p > len) {
            return Err(PatchError::PeakOutOfRange { peak: p, len, max: len });
        }
        let mut starts = Vec::with_capacity(interior.len() + 1);
        starts.push(1);
        starts.extend_from_slice(interior);
        Ok(Self { len, starts, method })
    }

    /// Rebuilds from exported cuts `[1, …, T+1]`.
    pub fn from_cuts(cuts: &[usize], method: Method) -> Result<Self, PatchError> {
        match cuts {
            [1, interior @ .., end] if *end >= 2 => Self::from_starts(end - 1, interior, method),
            _ => Err(PatchError::InvalidParams(format!("cuts {cuts:?} must run from 1 to T+1"))),
        }
    }

    /// Number of atoms `T`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn num_segments(&self) -> usize {
        self.starts.len()
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    /// Boundaries `τ_0 = 1 < … < τ_M = T + 1`; segment `k` is
    /// `τ_{k−1} ≤ t < τ_k`.
    pub fn cuts(&self) -> Vec<usize> {
        let mut cuts = self.starts.clone();
        cuts.push(self.len + 1);
        cuts
    }

    /// Inclusive `(first, last)` 1-based positions per segment.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        self.cuts().windows(2).map(|w| (w[0], w[1] - 1)).collect()
    }

    /// 0-based segment id of every position.
    pub fn labels(&self) -> Vec<usize> {
        self.segments()
            .iter()
            .enumerate()
            .flat_map(|(k, &(a, b))| std::iter::repeat_n(k, b - a + 1))
            .collect()
    }
}

/// Cuts before every peak; without peaks the whole sequence is one segment
/// and the last segment always ends at `T`.
pub fn segment(len: usize, peaks: &[usize]) -> Result<Segmentation, PatchError> {
    if len == 0 {
        return Err(PatchError::EmptySequence);
    }
    let max = len.saturating_sub(2);
    if let Some(&p) = peaks.iter().find(|&&p| p < 2 || p > max) {
        return Err(PatchError::PeakOutOfRange { peak: p, len, max });
    }
    Segmentation::from_starts(len, peaks, Method::Entropy)
}

/// Detect, cap to `max_segments`, and segment.
pub fn entropy_segmentation(
    trace: &EntropyTrace,
    params: &PatchParams,
    max_segments: usize,
) -> Result<Segmentation, PatchError> {
    params.validate()?;
    if max_segments == 0 {
        return Err(PatchError::NoSegments);
    }
    let peaks = cap_peaks(trace, &detect_peaks(trace, params), max_segments);
    segment(trace.atom_count(), &peaks)
}

/// Fixed-width patches; the last may be shorter.
pub fn uniform_patches(len: usize, width: usize) -> Result<Segmentation, PatchError> {
    if width == 0 {
        return Err(PatchError::ZeroWidth);
    }
    let interior: Vec<usize> = (1..len.div_ceil(width)).map(|k| k * width + 1).collect();
    Segmentation::from_starts(len, &interior, Method::Uniform)
}

/// `num_segments` contiguous segments with interior starts drawn without
/// replacement from `2..=T`.
pub fn random_patches(len: usize, num_segments: usize, seed: u64) -> Result<Segmentation, PatchError> {
    if len == 0 {
        return Err(PatchError::EmptySequence);
    }
    if num_segments == 0 {
        return Err(PatchError::NoSegments);
    }
    if num_segments > len {
        return Err(PatchError::TooManySegments {
            requested: num_segments,
            len,
        });
    }
    let mut r = rng::stream(seed, rng::RANDOM_PATCH);
    let mut interior: Vec<usize> = rand::seq::index::sample(&mut r, len - 1, num_segments - 1)
        .into_iter()
        .map(|i| i + 2)
        .collect();
    interior.sort_unstable();
    Segmentation::from_starts(len, &interior, Method::Random)
}

/// Average-pooled node embeddings, one token per group of graph nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicTokenSet {
    pub tokens: Tensor<f32>,
    pub node_sets: Vec<Vec<usize>>,
}

impl DynamicTokenSet {
    pub fn len(&self) -> usize {
        self.node_sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_sets.is_empty()
    }
}

/// Maps each segment to graph nodes through `map` and averages the rows of
/// `x` in it.
pub fn pool_tokens(seg: &Segmentation, map: &AtomGraphMap, x: &Tensor<f32>) -> Result<DynamicTokenSet, PatchError> {
    if map.len() != seg.len() {
        return Err(PatchError::DimensionMismatch(format!(
            "atom map covers {} positions, segmentation {}",
            map.len(),
            seg.len()
        )));
    }
    pool_by_labels(&seg.labels(), map, x)
}

/// Pools by an arbitrary per-position labeling (ids need not be contiguous
/// in position order). Groups are ordered by label id.
pub fn pool_by_labels(labels: &[usize], map: &AtomGraphMap, x: &Tensor<f32>) -> Result<DynamicTokenSet, PatchError> {
    if labels.len() != map.len() {
        return Err(PatchError::DimensionMismatch(format!(
            "{} labels for {} positions",
            labels.len(),
            map.len()
        )));
    }
    let n = x.rows();
    let groups = labels.iter().max().map_or(0, |&m| m + 1);
    let mut node_sets = vec![Vec::new(); groups];
    for (t, &l) in labels.iter().enumerate() {
        let node = map.node(t);
        if node >= n {
            return Err(PatchError::DimensionMismatch(format!("node {node} but X has {n} rows")));
        }
        node_sets[l].push(node);
    }
    node_sets.retain(|s| !s.is_empty());
    for s in &mut node_sets {
        s.sort_unstable();
        s.dedup();
    }
    let d = x.cols();
    let tokens = Tensor::from_fn(node_sets.len(), d, |k, j| {
        let set = &node_sets[k];
        let sum: f64 = set.iter().map(|&i| f64::from(x.get(i, j))).sum();
        (sum / set.len() as f64) as f32
    });
    Ok(DynamicTokenSet { tokens, node_sets })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(v: &[f64]) -> EntropyTrace {
        EntropyTrace::new(v.to_vec())
    }

    #[test]
    fn worked_example() {
        let e = trace(&[1.0, 3.0, 2.0, 5.0, 1.0]);
        let p = detect_peaks(&e, &PatchParams { delta: 1, gamma: 1.0 });
        assert_eq!(p, [2, 4]);
        let s = segment(6, &p).unwrap();
        assert_eq!(s.segments(), [(1, 1), (2, 3), (4, 6)]);
        assert_eq!(s.cuts(), [1, 2, 4, 7]);
        assert_eq!(s.labels(), [0, 1, 1, 2, 2, 2]);
        assert_eq!(detect_peaks(&e, &PatchParams { delta: 2, gamma: 1.0 }), [4]);
    }

    #[test]
    fn prominence_threshold_and_flat_traces() {
        let e = trace(&[1.0, 3.0, 2.0, 5.0, 1.0]);
        // prominences 1.5 and 3.5
        assert_eq!(candidate_peaks(&e, 1.5), [2, 4]);
        assert_eq!(candidate_peaks(&e, 1.6), [4]);
        assert!(candidate_peaks(&trace(&[1.0, 2.0, 3.0, 4.0, 5.0]), 0.0).is_empty());
        assert!(candidate_peaks(&trace(&[2.0; 8]), 0.0).is_empty());
        assert!(candidate_peaks(&trace(&[0.0, 9.0]), 0.0).is_empty());
        assert!(candidate_peaks(&trace(&[]), 0.0).is_empty());
    }

    #[test]
    fn nms_ties_prefer_smaller_index() {
        let e = trace(&[0.0, 4.0, 0.0, 4.0, 0.0, 0.0]);
        assert_eq!(detect_peaks(&e, &PatchParams { delta: 2, gamma: 0.0 }), [2]);
        assert_eq!(detect_peaks(&e, &PatchParams { delta: 1, gamma: 0.0 }), [2, 4]);
    }

    #[test]
    fn segment_edge_cases() {
        assert_eq!(segment(1, &[]).unwrap().segments(), [(1, 1)]);
        assert_eq!(segment(10, &[]).unwrap().segments(), [(1, 10)]);
        assert!(matches!(segment(6, &[5]), Err(PatchError::PeakOutOfRange { peak: 5, .. })));
        assert!(matches!(segment(6, &[1]), Err(PatchError::PeakOutOfRange { .. })));
        assert!(matches!(segment(6, &[4, 2]), Err(PatchError::UnsortedPeaks)));
        assert!(matches!(segment(0, &[]), Err(PatchError::EmptySequence)));
    }

    #[test]
    fn cuts_round_trip() {
        let s = segment(9, &[3, 5, 7]).unwrap();
        assert_eq!(Segmentation::from_cuts(&s.cuts(), Method::Entropy).unwrap(), s);
        assert!(Segmentation::from_cuts(&[2, 5], Method::Entropy).is_err());
    }

    #[test]
    fn uniform() {
        assert_eq!(uniform_patches(7, 3).unwrap().segments(), [(1, 3), (4, 6), (7, 7)]);
        assert_eq!(uniform_patches(3, 3).unwrap().segments(), [(1, 3)]);
        assert_eq!(uniform_patches(1, 3).unwrap().segments(), [(1, 1)]);
        assert_eq!(uniform_patches(6, 3).unwrap().num_segments(), 2);
        assert!(matches!(uniform_patches(4, 0), Err(PatchError::ZeroWidth)));
    }

    #[test]
    fn random() {
        let a = random_patches(20, 5, 7).unwrap();
        assert_eq!(a, random_patches(20, 5, 7).unwrap());
        assert_eq!(a.num_segments(), 5);
        assert_eq!(a.method(), Method::Random);
        assert_eq!(random_patches(8, 1, 0).unwrap().segments(), [(1, 8)]);
        let all = random_patches(6, 6, 3).unwrap();
        assert!(all.segments().iter().all(|&(a, b)| a == b));
        assert!(matches!(random_patches(4, 5, 0), Err(PatchError::TooManySegments { requested: 5, len: 4 })));
    }

    #[test]
    fn cap_drops_least_prominent() {
        // peaks at 2, 4, 6 with prominences 1, 3, 2
        let e = trace(&[0.0, 1.0, 0.0, 3.0, 0.0, 2.0, 0.0, 0.0]);
        let p = detect_peaks(&e, &PatchParams { delta: 1, gamma: 0.0 });
        assert_eq!(p, [2, 4, 6]);
        assert_eq!(cap_peaks(&e, &p, 3), [4, 6]);
        assert_eq!(cap_peaks(&e, &p, 1), Vec::<usize>::new());
        let s = entropy_segmentation(&e, &PatchParams { delta: 1, gamma: 0.0 }, 2).unwrap();
        assert_eq!(s.segments(), [(1, 3), (4, 9)]);
    }

    #[test]
    fn pooling_means() {
        let x = Tensor::new(vec![3, 2], vec![0.0, 2.0, 2.0, 0.0, 5.0, -1.0]).unwrap();
        let s = segment(3, &[]).unwrap();
        let seg2 = Segmentation::from_starts(3, &[3], Method::External).unwrap();
        let map = AtomGraphMap::identity(3);
        let z = pool_tokens(&seg2, &map, &x).unwrap();
        assert_eq!(z.tokens.row(0), [1.0, 1.0]);
        assert_eq!(z.tokens.row(1), [5.0, -1.0]);
        assert_eq!(z.node_sets, [vec![0, 1], vec![2]]);
        let all = pool_tokens(&s, &map, &x).unwrap();
        let oracle: Vec<f32> = (0..2).map(|j| (0..3).map(|i| x.get(i, j)).sum::<f32>() / 3.0).collect();
        assert_eq!(all.tokens.row(0), oracle.as_slice());
        assert!(matches!(
            pool_tokens(&s, &AtomGraphMap::identity(4), &x),
            Err(PatchError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn identical_rows_pool_to_themselves() {
        let x = Tensor::from_fn(5, 3, |_, j| j as f32 * 0.3 - 0.1);
        let z = pool_tokens(&uniform_patches(5, 2).unwrap(), &AtomGraphMap::identity(5), &x).unwrap();
        for k in 0..z.len() {
            assert_eq!(z.tokens.row(k), x.row(0));
        }
    }

    #[test]
    fn pooling_by_noncontiguous_labels() {
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = pool_by_labels(&[1, 0, 1, 0], &AtomGraphMap::identity(4), &x).unwrap();
        assert_eq!(z.node_sets, [vec![1, 3], vec![0, 2]]);
        assert_eq!(z.tokens.data(), [3.0, 2.0]);
    }

    #[test]
    fn invalid_gamma() {
        let e = trace(&[1.0, 2.0, 1.0]);
        let p = PatchParams { delta: 0, gamma: -0.1 };
        assert!(matches!(entropy_segmentation(&e, &p, 64), Err(PatchError::InvalidParams(_))));
    }
}
