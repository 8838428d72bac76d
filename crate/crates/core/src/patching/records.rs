//! JSON records for segmentations and per-atom fragment labels.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Method, PatchError, PatchParams, Segmentation};

/// One segmented molecule. `cuts` are half-open boundaries `[1, …, T+1]`;
/// `segments` are inclusive 1-based `[first, last]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub smiles: String,
    pub method: Method,
    pub delta: Option<usize>,
    pub gamma: Option<f64>,
    pub cuts: Vec<usize>,
    pub segments: Vec<[usize; 2]>,
}

impl SegmentRecord {
    pub fn new(smiles: &str, seg: &Segmentation, params: Option<&PatchParams>) -> Self {
        Self {
            smiles: smiles.to_owned(),
            method: seg.method(),
            delta: params.map(|p| p.delta),
            gamma: params.map(|p| p.gamma),
            cuts: seg.cuts(),
            segments: seg.segments().into_iter().map(|(a, b)| [a, b]).collect(),
        }
    }

    pub fn segmentation(&self) -> Result<Segmentation, PatchError> {
        Segmentation::from_cuts(&self.cuts, self.method)
    }
}

/// Per-atom fragment ids in input atom order. `method` is optional on input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub smiles: String,
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
}

impl LabelRecord {
    pub fn from_segmentation(smiles: &str, seg: &Segmentation) -> Self {
        Self {
            smiles: smiles.to_owned(),
            labels: seg.labels(),
            method: Some(seg.method().to_string()),
        }
    }
}

fn read_lines<T: for<'de> Deserialize<'de>>(reader: impl BufRead) -> Result<Vec<T>, PatchError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| PatchError::Record { line: i + 1, source })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_lines<T: Serialize>(mut w: impl Write, records: &[T]) -> Result<(), PatchError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads JSON lines, skipping blank lines.
pub fn read_label_records(reader: impl BufRead) -> Result<Vec<LabelRecord>, PatchError> {
    read_lines(reader)
}

pub fn write_label_records(w: impl Write, records: &[LabelRecord]) -> Result<(), PatchError> {
    write_lines(w, records)
}

/// Reads JSON lines of [`SegmentRecord`]s; a file holding a single
/// (possibly pretty-printed) object is accepted too.
pub fn read_segment_records(mut reader: impl BufRead) -> Result<Vec<SegmentRecord>, PatchError> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    if let Ok(one) = serde_json::from_str::<SegmentRecord>(&text) {
        return Ok(vec![one]);
    }
    read_lines(text.as_bytes())
}

pub fn write_segment_records(w: impl Write, records: &[SegmentRecord]) -> Result<(), PatchError> {
    write_lines(w, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::segment;

    #[test]
    fn segment_record_json() {
        let s = segment(6, &[2, 4]).unwrap();
        let r = SegmentRecord::new("CCOCCO", &s, Some(&PatchParams { delta: 1, gamma: 1.0 }));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(
            json,
            r#"{"smiles":"CCOCCO","method":"entropy","delta":1,"gamma":1.0,"cuts":[1,2,4,7],"segments":[[1,1],[2,3],[4,6]]}"#
        );
        assert_eq!(r.segmentation().unwrap(), s);
        let mut buf = Vec::new();
        write_segment_records(&mut buf, &[r.clone(), r.clone()]).unwrap();
        assert_eq!(read_segment_records(buf.as_slice()).unwrap(), [r.clone(), r.clone()]);
        let pretty = serde_json::to_string_pretty(&r).unwrap();
        assert_eq!(read_segment_records(pretty.as_bytes()).unwrap(), [r]);
    }

    #[test]
    fn label_records() {
        let input = "{\"smiles\":\"CCO\",\"labels\":[0,0,1],\"method\":\"brics\"}\n\n{\"smiles\":\"C\",\"labels\":[0]}\n";
        let recs = read_label_records(input.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].method.as_deref(), Some("brics"));
        assert_eq!(recs[1].method, None);
        let mut out = Vec::new();
        write_label_records(&mut out, &recs).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "{\"smiles\":\"CCO\",\"labels\":[0,0,1],\"method\":\"brics\"}\n{\"smiles\":\"C\",\"labels\":[0]}\n"
        );
        let err = read_label_records("{\"smiles\":1}\n".as_bytes()).unwrap_err();
        assert!(matches!(err, PatchError::Record { line: 1, .. }));
    }

    #[test]
    fn labels_from_segmentation() {
        let r = LabelRecord::from_segmentation("CCCC", &segment(4, &[2]).unwrap());
        assert_eq!(r.labels, [0, 1, 1, 1]);
        assert_eq!(r.method.as_deref(), Some("entropy"));
    }
}
