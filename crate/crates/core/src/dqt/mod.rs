//! Dynamic query transformer: learnable anchors and per-molecule dynamic
//! tokens, refined against node embeddings and projected to the language
//! model width.

mod embed;
mod export;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::layers::{head_average, Attention, Dropout, LayerNorm, Linear, Mlp};
use crate::numeric::{Bound, NumericError, ParamId, ParamKind, ParamStore, Real, Tape, Tensor, Var};
use crate::rng;

pub use embed::toy_node_embed;
pub use export::{write_attention_csv, write_output_csv};

#[derive(Debug, Error)]
pub enum DqtError {
    #[error("invalid DQT config: {0}")]
    InvalidConfig(String),
    #[error("{m} dynamic tokens exceed the maximum of {max}")]
    TooManyDynamicTokens { m: usize, max: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqtConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub anchors: usize,
    pub max_dynamic: usize,
    pub d_llm: usize,
    pub d_node: usize,
    pub ffn_mult: usize,
    pub ln_eps: f64,
    /// Give each stream its own self-attention weights (keys still span the
    /// whole bank).
    pub separate_self_attn: bool,
}

impl Default for DqtConfig {
    fn default() -> Self {
        Self {
            d: 512,
            layers: 8,
            heads: 8,
            anchors: 16,
            max_dynamic: 64,
            d_llm: 256,
            d_node: 64,
            ffn_mult: 4,
            ln_eps: 1e-5,
            separate_self_attn: false,
        }
    }
}

impl DqtConfig {
    pub fn validate(&self) -> Result<(), DqtError> {
        let bad = |m: String| Err(DqtError::InvalidConfig(m));
        if self.heads == 0 || self.d == 0 || self.d % self.heads != 0 {
            return bad(format!("d {} not divisible by heads {}", self.d, self.heads));
        }
        if self.anchors == 0 {
            return bad("anchors must be at least 1".into());
        }
        if self.layers == 0 || self.d_llm == 0 || self.d_node == 0 || self.ffn_mult == 0 {
            return bad("layers, d_llm, d_node and ffn_mult must be positive".into());
        }
        if self.ln_eps <= 0.0 {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln_sa: LayerNorm,
    sa_fix: Attention,
    /// Same as `sa_fix` unless self-attention is split per stream.
    sa_z: Attention,
    ln_x_fix: LayerNorm,
    x_fix: Attention,
    ln_x_z: LayerNorm,
    x_z: Attention,
    ln_ffn: LayerNorm,
    ffn: Mlp,
}

#[derive(Debug, Clone)]
struct Layout {
    anchors: ParamId,
    w_in: Option<Linear>,
    blocks: Vec<Block>,
    proj: Linear,
}

impl Layout {
    fn build<F: Real>(c: &DqtConfig) -> (Self, ParamStore<F>) {
        let mut s = ParamStore::new();
        let d = c.d;
        let anchors = s.push("anchors", ParamKind::Weight, Tensor::zeros(&[c.anchors, d]));
        let w_in = (c.d_node != d).then(|| Linear::register(&mut s, "w_in", c.d_node, d, false));
        let blocks = (0..c.layers)
            .map(|l| {
                let ln_sa = LayerNorm::register(&mut s, &format!("l.{l}.ln_sa"), d, c.ln_eps);
                let sa_fix = Attention::register(&mut s, &format!("l.{l}.sa"), d, d, d, c.heads);
                let sa_z = if c.separate_self_attn {
                    Attention::register(&mut s, &format!("l.{l}.sa_z"), d, d, d, c.heads)
                } else {
                    sa_fix
                };
                Block {
                    ln_sa,
                    sa_fix,
                    sa_z,
                    ln_x_fix: LayerNorm::register(&mut s, &format!("l.{l}.ln_x_fix"), d, c.ln_eps),
                    x_fix: Attention::register(&mut s, &format!("l.{l}.x_fix"), d, d, d, c.heads),
                    ln_x_z: LayerNorm::register(&mut s, &format!("l.{l}.ln_x_z"), d, c.ln_eps),
                    x_z: Attention::register(&mut s, &format!("l.{l}.x_z"), d, d, d, c.heads),
                    ln_ffn: LayerNorm::register(&mut s, &format!("l.{l}.ln_ffn"), d, c.ln_eps),
                    ffn: Mlp::register(&mut s, &format!("l.{l}.ffn"), d, c.ffn_mult * d),
                }
            })
            .collect();
        let proj = Linear::register(&mut s, "w_proj", d, c.d_llm, false);
        (Self { anchors, w_in, blocks, proj }, s)
    }
}

/// Forward result on a tape.
pub struct DqtTapeOutput {
    /// `[(k + M')×d_llm]`, anchors first; `M'` counts unpadded dynamic rows.
    pub u: Var,
    /// Pre-projection bank rows in the same order as `u`, `[(k + M')×d]`.
    pub hidden: Var,
    /// Per layer, head-averaged cross-attention `[(k + M')×N]`.
    pub attention: Vec<Tensor<f64>>,
}

/// Output of an eval-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningOutput<F = f32> {
    pub u: Tensor<F>,
    pub anchors: usize,
    pub attention: Vec<Tensor<f64>>,
}

impl<F: Real> ConditioningOutput<F> {
    pub fn dynamic_rows(&self) -> usize {
        self.u.rows() - self.anchors
    }
}

#[derive(Debug, Clone)]
pub struct DqtModel<F = f32> {
    config: DqtConfig,
    params: ParamStore<F>,
    layout: Layout,
}

impl<F: Real> DqtModel<F> {
    /// Zero weights, unit layer-norm gains.
    pub fn zeroed(config: DqtConfig) -> Result<Self, DqtError> {
        config.validate()?;
        let (layout, params) = Layout::build(&config);
        Ok(Self { config, params, layout })
    }

    /// Weights uniform in `±1/√fan_in`, anchors `N(0, 0.02)`, zero biases.
    pub fn init(config: DqtConfig, seed: u64) -> Result<Self, DqtError> {
        let mut model = Self::zeroed(config)?;
        let mut r = rng::stream(seed, rng::DQT_INIT);
        let anchor_dist = Normal::new(0.0, 0.02).expect("valid std");
        let anchors = model.layout.anchors;
        for (i, p) in model.params.params_mut().iter_mut().enumerate() {
            if p.kind != ParamKind::Weight {
                continue;
            }
            if ParamId(i) == anchors {
                for v in p.tensor.data_mut() {
                    *v = F::lit(anchor_dist.sample(&mut r));
                }
            } else {
                let bound = 1.0 / (p.tensor.shape()[0] as f64).sqrt();
                for v in p.tensor.data_mut() {
                    *v = F::lit(r.random_range(-bound..bound));
                }
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &DqtConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<G: Real>(&self) -> DqtModel<G> {
        DqtModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn adapt(&self, tape: &mut Tape<F>, p: &Bound, x: Var, what: &str) -> Result<Var, DqtError> {
        let c = &self.config;
        let cols = tape.value(x).cols();
        match self.layout.w_in {
            Some(w_in) if cols == c.d_node => Ok(w_in.forward(tape, p, x)?),
            _ if cols == c.d => Ok(x),
            _ => Err(DqtError::DimensionMismatch(format!(
                "{what} has {cols} columns, expected {} or {}",
                c.d_node, c.d
            ))),
        }
    }

    /// Forward pass on `tape`. `z` is `[M×d]` or `[M×d_node]` (or `None`
    /// when `M = 0`), `x` is `[N×d_node]`; `pad[i]` marks dynamic row `i` as
    /// padding. Padded rows are hidden as keys and dropped from the output.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        z: Option<Var>,
        x: Var,
        pad: &[bool],
    ) -> Result<DqtTapeOutput, DqtError> {
        let c = &self.config;
        let k = c.anchors;
        let m = z.map_or(0, |z| tape.value(z).rows());
        if m > c.max_dynamic {
            return Err(DqtError::TooManyDynamicTokens { m, max: c.max_dynamic });
        }
        if pad.len() != m {
            return Err(DqtError::DimensionMismatch(format!("pad mask of {} for {m} dynamic rows", pad.len())));
        }
        let n = tape.value(x).rows();
        if n == 0 || tape.value(x).cols() != c.d_node {
            return Err(DqtError::DimensionMismatch(format!(
                "node embeddings {:?}, expected [N≥1×{}]",
                tape.value(x).shape(),
                c.d_node
            )));
        }
        let xs = self.adapt(tape, p, x, "node embeddings")?;
        let mut q_fix = p.var(self.layout.anchors);
        let mut q_z = match z {
            Some(z) => Some(self.adapt(tape, p, z, "dynamic tokens")?),
            None => None,
        };

        let bank_visible: Vec<bool> = (0..k + m).map(|j| j < k || !pad[j - k]).collect();
        let vis_fix: Vec<bool> = (0..k).flat_map(|_| bank_visible.iter().copied()).collect();
        let vis_z: Vec<bool> = (0..m).flat_map(|_| bank_visible.iter().copied()).collect();

        let mut attention = Vec::with_capacity(c.layers);
        for b in &self.layout.blocks {
            // Shared self-attention over the whole bank.
            let h_fix = b.ln_sa.forward(tape, p, q_fix)?;
            let h_z = match q_z {
                Some(q) => Some(b.ln_sa.forward(tape, p, q)?),
                None => None,
            };
            let bank = match h_z {
                Some(h_z) => tape.concat_rows(&[h_fix, h_z])?,
                None => h_fix,
            };
            if c.separate_self_attn {
                let a_fix = b.sa_fix.forward(tape, p, h_fix, bank, Some(&vis_fix), no_drop_of())?;
                q_fix = tape.add(q_fix, a_fix.out)?;
                if let (Some(q), Some(h)) = (q_z, h_z) {
                    let a_z = b.sa_z.forward(tape, p, h, bank, Some(&vis_z), no_drop_of())?;
                    q_z = Some(tape.add(q, a_z.out)?);
                }
            } else {
                let vis: Vec<bool> = (0..k + m).flat_map(|_| bank_visible.iter().copied()).collect();
                let a = b.sa_fix.forward(tape, p, bank, bank, Some(&vis), no_drop_of())?;
                let a_fix = tape.slice_rows(a.out, 0, k)?;
                q_fix = tape.add(q_fix, a_fix)?;
                if let Some(q) = q_z {
                    let a_z = tape.slice_rows(a.out, k, m)?;
                    q_z = Some(tape.add(q, a_z)?);
                }
            }

            // Independent cross-attention per stream.
            let h = b.ln_x_fix.forward(tape, p, q_fix)?;
            let xa_fix = b.x_fix.forward(tape, p, h, xs, None, no_drop_of())?;
            q_fix = tape.add(q_fix, xa_fix.out)?;
            let mut rows = head_average(tape, &xa_fix.probs).cast::<f64>();
            if let Some(q) = q_z {
                let h = b.ln_x_z.forward(tape, p, q)?;
                let xa_z = b.x_z.forward(tape, p, h, xs, None, no_drop_of())?;
                q_z = Some(tape.add(q, xa_z.out)?);
                let z_rows = head_average(tape, &xa_z.probs).cast::<f64>();
                rows = stack_unpadded(&rows, &z_rows, pad);
            }
            attention.push(rows);

            // Shared FFN on each stream.
            let h = b.ln_ffn.forward(tape, p, q_fix)?;
            let f = b.ffn.forward(tape, p, h)?;
            q_fix = tape.add(q_fix, f)?;
            if let Some(q) = q_z {
                let h = b.ln_ffn.forward(tape, p, q)?;
                let f = b.ffn.forward(tape, p, h)?;
                q_z = Some(tape.add(q, f)?);
            }
        }

        let hidden = match q_z {
            Some(q) => {
                let mut rows: Vec<(Var, usize)> = (0..k).map(|r| (q_fix, r)).collect();
                rows.extend((0..m).filter(|&i| !pad[i]).map(|i| (q, i)));
                tape.stack_rows(&rows)?
            }
            None => q_fix,
        };
        let u = self.layout.proj.forward(tape, p, hidden)?;
        Ok(DqtTapeOutput { u, hidden, attention })
    }

    /// Eval-mode forward on plain tensors. An empty `z` (zero rows) is the
    /// anchors-only case.
    pub fn forward(&self, z: &Tensor<F>, x: &Tensor<F>, pad: &[bool]) -> Result<ConditioningOutput<F>, DqtError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let zv = (z.rows() > 0 && !z.is_empty()).then(|| tape.leaf(z.clone()));
        let xv = tape.leaf(x.clone());
        let out = self.forward_on_tape(&mut tape, &p, zv, xv, pad)?;
        Ok(ConditioningOutput {
            u: tape.value(out.u).clone(),
            anchors: self.config.anchors,
            attention: out.attention,
        })
    }
}

/// The connector runs without dropout.
fn no_drop_of<'a>() -> Option<&'a mut Dropout<'a, ChaCha8Rng>> {
    None
}

fn stack_unpadded(fix: &Tensor<f64>, z: &Tensor<f64>, pad: &[bool]) -> Tensor<f64> {
    let mut rows: Vec<Vec<f64>> = (0..fix.rows()).map(|r| fix.row(r).to_vec()).collect();
    rows.extend((0..z.rows()).filter(|&i| !pad[i]).map(|i| z.row(i).to_vec()));
    Tensor::from_rows(&rows).expect("equal widths")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check_with, GradCheckOptions, Stencil};
    use rand_distr::StandardNormal;

    fn small() -> DqtConfig {
        DqtConfig {
            d: 16,
            layers: 2,
            heads: 2,
            anchors: 3,
            max_dynamic: 8,
            d_llm: 12,
            d_node: 10,
            ..Default::default()
        }
    }

    fn randn(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
        let mut r = rng::substream(seed, "test", 0);
        Tensor::from_fn(rows, cols, |_, _| r.sample::<f32, _>(StandardNormal))
    }

    /// Shape-counting oracle, written out per tensor.
    fn count(c: &DqtConfig) -> usize {
        let d = c.d;
        let attn = 4 * d * d + 3 * d;
        let ffn = 2 * c.ffn_mult * d * d + c.ffn_mult * d + d;
        let norms = 4 * 2 * d;
        let sa = if c.separate_self_attn { 2 } else { 1 };
        let per_layer = sa * attn + 2 * attn + ffn + norms;
        let w_in = if c.d_node == d { 0 } else { c.d_node * d };
        c.anchors * d + w_in + c.layers * per_layer + d * c.d_llm
    }

    #[test]
    fn default_parameter_count() {
        let c = DqtConfig::default();
        let m = DqtModel::<f32>::zeroed(c.clone()).unwrap();
        assert_eq!(m.num_params(), count(&c));
        assert_eq!(m.num_params(), 42_205_184);
        let sep = DqtConfig { separate_self_attn: true, d_node: 512, ..c };
        assert_eq!(DqtModel::<f32>::zeroed(sep.clone()).unwrap().num_params(), count(&sep));
    }

    #[test]
    fn invalid_configs() {
        let c = DqtConfig { d: 8, heads: 3, ..Default::default() };
        assert!(matches!(DqtModel::<f32>::init(c, 0), Err(DqtError::InvalidConfig(_))));
        let c = DqtConfig { anchors: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = DqtModel::<f32>::init(small(), 5).unwrap();
        let b = DqtModel::<f32>::init(small(), 5).unwrap();
        let c = DqtModel::<f32>::init(small(), 6).unwrap();
        assert!(a.params().bit_identical(b.params()));
        assert!(!a.params().bit_identical(c.params()));
    }

    #[test]
    fn output_shapes() {
        let c = DqtConfig { d: 32, layers: 1, heads: 4, anchors: 16, max_dynamic: 64, d_llm: 256, d_node: 8, ..Default::default() };
        let m = DqtModel::<f32>::init(c, 1).unwrap();
        let x = randn(5, 8, 1);
        let out = m.forward(&randn(10, 32, 2), &x, &[false; 10]).unwrap();
        assert_eq!(out.u.shape(), &[26, 256]);
        assert_eq!(out.attention[0].shape(), &[26, 5]);
        let out = m.forward(&Tensor::zeros(&[0, 32]), &x, &[]).unwrap();
        assert_eq!(out.u.shape(), &[16, 256]);
        let out = m.forward(&randn(64, 8, 3), &x, &[false; 64]).unwrap();
        assert_eq!(out.u.shape(), &[80, 256]);
        assert!(matches!(
            m.forward(&randn(65, 8, 3), &x, &[false; 65]),
            Err(DqtError::TooManyDynamicTokens { m: 65, max: 64 })
        ));
        assert!(matches!(m.forward(&randn(2, 7, 3), &x, &[false; 2]), Err(DqtError::DimensionMismatch(_))));
    }

    #[test]
    fn attention_rows_are_normalised() {
        let m = DqtModel::<f32>::init(small(), 2).unwrap();
        let out = m.forward(&randn(4, 16, 1), &randn(7, 10, 2), &[false, true, false, false]).unwrap();
        assert_eq!(out.u.rows(), 3 + 3);
        for layer in &out.attention {
            assert_eq!(layer.shape(), &[6, 7]);
            for r in 0..layer.rows() {
                assert!((layer.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn single_node_cross_attention_is_its_value() {
        // With one key every cross-attention weight is 1.
        let m = DqtModel::<f32>::init(small(), 3).unwrap();
        let out = m.forward(&randn(2, 16, 4), &randn(1, 10, 5), &[false, false]).unwrap();
        for layer in &out.attention {
            assert!(layer.data().iter().all(|&w| (w - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn anchors_invariant_under_dynamic_permutation() {
        let m = DqtModel::<f32>::init(small(), 4).unwrap();
        let z = randn(5, 16, 6);
        let x = randn(6, 10, 7);
        let base = m.forward(&z, &x, &[false; 5]).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let zp = Tensor::from_fn(5, 16, |r, c| z.get(perm[r], c));
        let out = m.forward(&zp, &x, &[false; 5]).unwrap();
        let k = 3;
        for r in 0..k {
            for c in 0..12 {
                assert!((base.u.get(r, c) - out.u.get(r, c)).abs() <= 1e-5);
            }
        }
        for (i, &src) in perm.iter().enumerate() {
            for c in 0..12 {
                assert!((base.u.get(k + src, c) - out.u.get(k + i, c)).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn padded_slots_do_not_leak() {
        for separate in [false, true] {
            let c = DqtConfig { separate_self_attn: separate, ..small() };
            let m = DqtModel::<f32>::init(c, 8).unwrap();
            let x = randn(4, 10, 1);
            let z = randn(4, 16, 2);
            let pad = [false, true, false, true];
            let mut z2 = z.clone();
            for j in 0..16 {
                z2.row_mut(1)[j] = 100.0;
                z2.row_mut(3)[j] = -7.0 * j as f32;
            }
            let a = m.forward(&z, &x, &pad).unwrap();
            let b = m.forward(&z2, &x, &pad).unwrap();
            assert_eq!(a.u.rows(), 5);
            assert!(a.u.data().iter().zip(b.u.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn model_dim_inputs_skip_adapter() {
        let c = DqtConfig { d_node: 16, ..small() };
        let m = DqtModel::<f32>::init(c, 1).unwrap();
        assert!(m.params().find("w_in.w").is_none());
        assert_eq!(m.forward(&randn(2, 16, 1), &randn(3, 16, 2), &[false; 2]).unwrap().u.shape(), &[5, 12]);
    }

    fn dqt_grad_error(separate: bool) -> f64 {
        let c = DqtConfig {
            d: 16,
            layers: 1,
            heads: 2,
            anchors: 2,
            max_dynamic: 4,
            d_llm: 5,
            d_node: 6,
            separate_self_attn: separate,
            ..Default::default()
        };
        let model = DqtModel::<f32>::init(c, 3).unwrap().cast::<f64>();
        let z = randn(2, 16, 10).cast::<f64>();
        let x = randn(3, 6, 11).cast::<f64>();
        let readout = std::rc::Rc::new(Tensor::from_fn(4, 5, |r, c| ((r * 5 + c) as f64 * 0.61).sin()));
        let mut params: Vec<Tensor<f64>> = model.params().tensors().cloned().collect();
        params.push(z);
        params.push(x);
        let np = model.params().len();
        let opts = GradCheckOptions { h: 1e-4, stencil: Stencil::Central4, ..Default::default() };
        grad_check_with(&params, &opts, |tape: &mut Tape<f64>, vars: &[Var]| {
            let bound = Bound::from_vars(vars[..np].to_vec());
            let out = model.forward_on_tape(tape, &bound, Some(vars[np]), vars[np + 1], &[false, false])?;
            let w = tape.mul_const(out.u, readout.clone())?;
            Ok::<_, DqtError>(tape.sum(w)?)
        })
        .unwrap()
        .max_rel_error
    }

    #[test]
    fn gradients_match_finite_differences() {
        for separate in [false, true] {
            let err = dqt_grad_error(separate);
            assert!(err <= 1e-5, "separate={separate}: {err}");
        }
    }
}
