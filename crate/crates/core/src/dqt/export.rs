//! CSV export of connector outputs.

use std::io::Write;

use super::ConditioningOutput;
use crate::numeric::Real;

fn kind(row: usize, anchors: usize) -> &'static str {
    if row < anchors {
        "anchor"
    } else {
        "dynamic"
    }
}

/// One line per (layer, query row, node): head-averaged cross-attention.
pub fn write_attention_csv<F: Real>(mut w: impl Write, out: &ConditioningOutput<F>) -> std::io::Result<()> {
    writeln!(w, "layer,query_index,query_kind,node_index,weight")?;
    for (l, a) in out.attention.iter().enumerate() {
        for q in 0..a.rows() {
            for (n, weight) in a.row(q).iter().enumerate() {
                writeln!(w, "{l},{q},{},{n},{weight}", kind(q, out.anchors))?;
            }
        }
    }
    w.flush()
}

/// Rows of `U` with their query kind.
pub fn write_output_csv<F: Real>(mut w: impl Write, out: &ConditioningOutput<F>) -> std::io::Result<()> {
    let cols: Vec<String> = (0..out.u.cols()).map(|j| format!("u{j}")).collect();
    writeln!(w, "query_index,query_kind,{}", cols.join(","))?;
    for q in 0..out.u.rows() {
        let vals: Vec<String> = out.u.row(q).iter().map(ToString::to_string).collect();
        writeln!(w, "{q},{},{}", kind(q, out.anchors), vals.join(","))?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    #[test]
    fn csv_layout() {
        let out = ConditioningOutput {
            u: Tensor::new(vec![2, 2], vec![1.0f32, 0.5, -2.0, 0.25]).unwrap(),
            anchors: 1,
            attention: vec![Tensor::new(vec![2, 2], vec![0.25, 0.75, 1.0, 0.0]).unwrap()],
        };
        let mut a = Vec::new();
        write_attention_csv(&mut a, &out).unwrap();
        assert_eq!(
            String::from_utf8(a).unwrap(),
            "layer,query_index,query_kind,node_index,weight\n\
             0,0,anchor,0,0.25\n0,0,anchor,1,0.75\n0,1,dynamic,0,1\n0,1,dynamic,1,0\n"
        );
        let mut u = Vec::new();
        write_output_csv(&mut u, &out).unwrap();
        assert_eq!(
            String::from_utf8(u).unwrap(),
            "query_index,query_kind,u0,u1\n0,anchor,1,0.5\n1,dynamic,-2,0.25\n"
        );
    }
}
