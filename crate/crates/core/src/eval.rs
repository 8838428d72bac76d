//! Fragmentation agreement, trace export and segment statistics.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::nap::EntropyTrace;
use crate::patching::Segmentation;
use crate::smiles::TokenizedSmiles;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labelings have lengths {a} and {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("empty input")]
    EmptyInput,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-atom cluster ids of one fragmentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FragmentLabeling {
    labels: Vec<usize>,
    pub method: String,
}

impl FragmentLabeling {
    /// Renumbers ids to `0, 1, …` in order of first appearance.
    pub fn new(labels: &[usize], method: impl Into<String>) -> Self {
        Self {
            labels: normalize(labels),
            method: method.into(),
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn normalize(labels: &[usize]) -> Vec<usize> {
    let mut ids = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = ids.len();
            *ids.entry(*l).or_insert(next)
        })
        .collect()
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    let mut terms: Vec<f64> = counts
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .collect();
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// `MI(a, b) / √(H(a)·H(b))` in nats with frequency estimates.
///
/// Both entropies zero: 1 if the partitions coincide, else 0. Exactly one
/// entropy zero: 0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let (na, nb) = (normalize(a), normalize(b));
    let n = a.len() as f64;
    let mut ca: HashMap<usize, usize> = HashMap::new();
    let mut cb: HashMap<usize, usize> = HashMap::new();
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    for (&x, &y) in na.iter().zip(&nb) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        *joint.entry((x, y)).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    let same = na == nb;
    if ha == 0.0 || hb == 0.0 {
        return Ok(if ha == 0.0 && hb == 0.0 && same { 1.0 } else { 0.0 });
    }
    if same {
        return Ok(1.0);
    }
    // Each term is symmetric in (a, b); summing in sorted order makes the
    // result exactly symmetric.
    let mut terms: Vec<f64> = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pij = c as f64 / n;
            let pi = ca[&x] as f64 / n;
            let pj = cb[&y] as f64 / n;
            pij * (pij / (pi * pj)).ln()
        })
        .collect();
    terms.sort_by(f64::total_cmp);
    let mi: f64 = terms.iter().sum();
    Ok((mi / (ha * hb).sqrt()).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
}

/// Mean and median of per-molecule values.
pub fn summarize(values: &[f64]) -> Result<Summary, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok(Summary {
        count: n,
        mean: values.iter().sum::<f64>() / n as f64,
        median,
    })
}

/// One row per atom: `position,atom,surprisal,is_peak,segment_id`. The
/// surprisal column of position `T` is blank.
pub fn export_trace_csv(
    mut w: impl Write,
    tokenized: &TokenizedSmiles,
    trace: &EntropyTrace,
    peaks: &[usize],
    seg: &Segmentation,
) -> Result<(), EvalError> {
    let t_len = tokenized.len();
    if trace.atom_count() != t_len {
        return Err(EvalError::LengthMismatch { a: t_len, b: trace.atom_count() });
    }
    if seg.len() != t_len {
        return Err(EvalError::LengthMismatch { a: t_len, b: seg.len() });
    }
    let labels = seg.labels();
    writeln!(w, "position,atom,surprisal,is_peak,segment_id")?;
    for t in 1..=t_len {
        let e = if t < t_len { trace.at(t).to_string() } else { String::new() };
        let peak = u8::from(peaks.contains(&t));
        writeln!(w, "{t},{},{e},{peak},{}", tokenized.atoms()[t - 1], labels[t - 1])?;
    }
    w.flush()?;
    Ok(())
}

/// Corpus-level segmentation summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentStats {
    pub molecules: usize,
    pub segments: Summary,
    pub segment_length: Summary,
    /// Segment count → number of molecules.
    pub histogram: BTreeMap<usize, usize>,
}

pub fn segment_stats(segs: &[Segmentation]) -> Result<SegmentStats, EvalError> {
    if segs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let counts: Vec<f64> = segs.iter().map(|s| s.num_segments() as f64).collect();
    let lengths: Vec<f64> = segs
        .iter()
        .flat_map(Segmentation::segments)
        .map(|(a, b)| (b - a + 1) as f64)
        .collect();
    let mut histogram = BTreeMap::new();
    for s in segs {
        *histogram.entry(s.num_segments()).or_insert(0) += 1;
    }
    Ok(SegmentStats {
        molecules: segs.len(),
        segments: summarize(&counts)?,
        segment_length: summarize(&lengths)?,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::{segment, uniform_patches};
    use crate::smiles::tokenize_atoms;

    #[test]
    fn nmi_anchors() {
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-12);
        let hand = {
            // MI = ½ln(4/3) + ¼ln(2/3) + ¼ln 2; H_a = ln 2; H_b = −¾ln¾ − ¼ln¼
            let mi = 0.5 * (4.0f64 / 3.0).ln() + 0.25 * (2.0f64 / 3.0).ln() + 0.25 * 2f64.ln();
            let hb = -(0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
            mi / (2f64.ln() * hb).sqrt()
        };
        let got = nmi(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap();
        assert!((got - hand).abs() < 1e-12);
        assert!((got - 0.3456).abs() < 1e-3);
    }

    #[test]
    fn nmi_degenerate_and_errors() {
        assert_eq!(nmi(&[0, 0, 0], &[5, 5, 5]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0], &[0, 1, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[3], &[1]).unwrap(), 1.0);
        assert!(matches!(nmi(&[0, 1], &[0]), Err(EvalError::LengthMismatch { a: 2, b: 1 })));
        assert!(matches!(nmi(&[], &[]), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn nmi_relabeling_and_symmetry() {
        let a = [0, 0, 1, 2, 2, 1, 3];
        let b = [1, 1, 1, 0, 0, 2, 2];
        let a2: Vec<usize> = a.iter().map(|x| 10 - x).collect();
        let ab = nmi(&a, &b).unwrap();
        assert_eq!(ab, nmi(&b, &a).unwrap());
        assert!((ab - nmi(&a2, &b).unwrap()).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn labeling_normalizes() {
        let l = FragmentLabeling::new(&[7, 7, 2, 9, 2], "brics");
        assert_eq!(l.labels(), [0, 0, 1, 2, 1]);
    }

    #[test]
    fn summaries() {
        let s = summarize(&[3.0, 1.0, 2.0, 10.0]).unwrap();
        assert_eq!((s.mean, s.median, s.count), (4.0, 2.5, 4));
        assert!(matches!(summarize(&[]), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn trace_csv() {
        let t = tokenize_atoms("CCOC").unwrap();
        let e = EntropyTrace::new(vec![0.5, 2.0, 0.25]);
        let seg = segment(4, &[2]).unwrap();
        let mut out = Vec::new();
        export_trace_csv(&mut out, &t, &e, &[2], &seg).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "position,atom,surprisal,is_peak,segment_id\n1,C,0.5,0,0\n2,C,2,1,1\n3,O,0.25,0,1\n4,C,,0,1\n"
        );
        let mut again = Vec::new();
        export_trace_csv(&mut again, &t, &e, &[2], &seg).unwrap();
        assert_eq!(text.as_bytes(), again.as_slice());
    }

    #[test]
    fn single_atom_csv() {
        let t = tokenize_atoms("[Na+]").unwrap();
        let mut out = Vec::new();
        export_trace_csv(&mut out, &t, &EntropyTrace::new(vec![]), &[], &segment(1, &[]).unwrap()).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "position,atom,surprisal,is_peak,segment_id\n1,Na,,0,0\n");
    }

    #[test]
    fn stats() {
        let segs = vec![segment(5, &[]).unwrap(), segment(3, &[]).unwrap()];
        let s = segment_stats(&segs).unwrap();
        assert_eq!(s.segments.mean, 1.0);
        assert_eq!(s.histogram.values().sum::<usize>(), 2);
        let segs = vec![uniform_patches(7, 3).unwrap(), uniform_patches(4, 2).unwrap()];
        let s = segment_stats(&segs).unwrap();
        assert_eq!(s.segments.mean, 2.5);
        assert_eq!(s.segment_length.mean, 11.0 / 5.0);
        assert_eq!(s.histogram, BTreeMap::from([(2, 1), (3, 1)]));
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.starts_with("{\"molecules\":2,"));
        assert!(matches!(segment_stats(&[]), Err(EvalError::EmptyInput)));
    }
}
