//! Next-atom predictor: a GPT-2 style causal transformer over atom ids, and
//! the surprisal trace it induces on a molecule.

mod train;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::layers::{causal_mask, dropout, Attention, Dropout, LayerNorm, Linear, Mlp};
use crate::numeric::{kernels, Bound, NumericError, ParamKind, ParamStore, Real, Tape, Tensor, Var};
use crate::rng;
use crate::smiles::{TokenizedSmiles, Vocabulary};

pub use train::{pack_sequences, train_nap, train_nap_from, TrainReport};

#[derive(Debug, Error)]
pub enum NapError {
    #[error("invalid NAP config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds the context window of {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    InvalidToken { id: u32, vocab: usize },
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Architecture and training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NapConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub max_positions: usize,
    pub context: usize,
    pub dropout_resid: f64,
    pub dropout_embed: f64,
    pub dropout_attn: f64,
    pub ln_eps: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub pack_length: usize,
    pub concat_data: bool,
}

impl Default for NapConfig {
    fn default() -> Self {
        Self {
            vocab_size: 39,
            layers: 2,
            heads: 2,
            hidden: 128,
            max_positions: 1024,
            context: 512,
            dropout_resid: 0.10,
            dropout_embed: 0.10,
            dropout_attn: 0.10,
            ln_eps: 1e-5,
            lr: 1e-4,
            batch_size: 64,
            epochs: 1,
            weight_decay: 0.01,
            pack_length: 128,
            concat_data: true,
        }
    }
}

impl NapConfig {
    pub fn validate(&self) -> Result<(), NapError> {
        let bad = |m: String| Err(NapError::InvalidConfig(m));
        if self.vocab_size < 3 {
            return bad(format!("vocab_size {} < 3", self.vocab_size));
        }
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.layers == 0 {
            return bad("layers must be positive".into());
        }
        if self.context == 0 || self.context > self.max_positions {
            return bad(format!("context {} not in 1..={}", self.context, self.max_positions));
        }
        if self.pack_length < 2 || self.pack_length > self.context {
            return bad(format!("pack_length {} not in 2..={}", self.pack_length, self.context));
        }
        for (name, r) in [
            ("dropout_resid", self.dropout_resid),
            ("dropout_embed", self.dropout_embed),
            ("dropout_attn", self.dropout_attn),
        ] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} {r} not in [0, 1)"));
            }
        }
        if self.ln_eps <= 0.0 || self.lr < 0.0 || self.weight_decay < 0.0 {
            return bad("ln_eps must be positive; lr and weight_decay non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Forward-pass mode. Training draws dropout masks from the given stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: crate::numeric::ParamId,
    pos_emb: crate::numeric::ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl Layout {
    fn build<F: Real>(c: &NapConfig) -> (Self, ParamStore<F>) {
        let mut s = ParamStore::new();
        let h = c.hidden;
        let tok_emb = s.push("wte", ParamKind::Weight, Tensor::zeros(&[c.vocab_size, h]));
        let pos_emb = s.push("wpe", ParamKind::Weight, Tensor::zeros(&[c.max_positions, h]));
        let blocks = (0..c.layers)
            .map(|l| Block {
                ln1: LayerNorm::register(&mut s, &format!("h.{l}.ln_1"), h, c.ln_eps),
                attn: Attention::register(&mut s, &format!("h.{l}.attn"), h, h, h, c.heads),
                ln2: LayerNorm::register(&mut s, &format!("h.{l}.ln_2"), h, c.ln_eps),
                mlp: Mlp::register(&mut s, &format!("h.{l}.mlp"), h, 4 * h),
            })
            .collect();
        let ln_f = LayerNorm::register(&mut s, "ln_f", h, c.ln_eps);
        let head = Linear::register(&mut s, "lm_head", h, c.vocab_size, false);
        (Self { tok_emb, pos_emb, blocks, ln_f, head }, s)
    }
}

/// Next-atom predictor parameters.
#[derive(Debug, Clone)]
pub struct NapModel<F = f32> {
    config: NapConfig,
    params: ParamStore<F>,
    layout: Layout,
}

impl<F: Real> NapModel<F> {
    /// All weights zero, layer-norm gains one.
    pub fn zeroed(config: NapConfig) -> Result<Self, NapError> {
        config.validate()?;
        let (layout, params) = Layout::build(&config);
        Ok(Self { config, params, layout })
    }

    /// GPT-2 initialisation: `N(0, 0.02)` weights, residual projections
    /// scaled by `1/√(2·layers)`, zero biases.
    pub fn init(config: NapConfig, seed: u64) -> Result<Self, NapError> {
        let mut model = Self::zeroed(config)?;
        let mut r = rng::stream(seed, rng::NAP_INIT);
        let base = Normal::new(0.0, 0.02).expect("valid std");
        let resid = Normal::new(0.0, 0.02 / (2.0 * model.config.layers as f64).sqrt()).expect("valid std");
        for p in model.params.params_mut() {
            if p.kind != ParamKind::Weight {
                continue;
            }
            let dist = if p.name.ends_with("attn.o.w") || p.name.ends_with("mlp.proj.w") {
                &resid
            } else {
                &base
            };
            for v in p.tensor.data_mut() {
                *v = F::lit(dist.sample(&mut r));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &NapConfig {
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

    /// Zeroes the output head so every position predicts the uniform
    /// distribution.
    pub fn zero_head(&mut self) {
        for v in self.params.get_mut(self.layout.head.w).data_mut() {
            *v = F::zero();
        }
    }

    pub fn cast<G: Real>(&self) -> NapModel<G> {
        NapModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Logits `[len(ids)×V]` on `tape`, with parameters bound as `p`.
    pub fn forward(&self, tape: &mut Tape<F>, p: &Bound, ids: &[u32], mode: Mode<'_>) -> Result<Var, NapError> {
        let c = &self.config;
        let t = ids.len();
        if t > c.context {
            return Err(NapError::ContextOverflow { len: t, context: c.context });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(NapError::InvalidToken { id, vocab: c.vocab_size });
        }
        let mut rng = match mode {
            Mode::Eval => None,
            Mode::Train(r) => Some(r),
        };

        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..t).collect();
        let tok = tape.gather_rows(p.var(self.layout.tok_emb), &ids)?;
        let pos = tape.gather_rows(p.var(self.layout.pos_emb), &positions)?;
        let mut x = tape.add(tok, pos)?;
        x = dropout(tape, x, drop(c.dropout_embed, &mut rng).as_mut())?;
        let mask = causal_mask(t);
        for b in &self.layout.blocks {
            let h = b.ln1.forward(tape, p, x)?;
            let mut attn_drop = drop(c.dropout_attn, &mut rng);
            let a = b.attn.forward(tape, p, h, h, Some(&mask), attn_drop.as_mut())?;
            let a = dropout(tape, a.out, drop(c.dropout_resid, &mut rng).as_mut())?;
            x = tape.add(x, a)?;
            let h = b.ln2.forward(tape, p, x)?;
            let m = b.mlp.forward(tape, p, h)?;
            let m = dropout(tape, m, drop(c.dropout_resid, &mut rng).as_mut())?;
            x = tape.add(x, m)?;
        }
        let x = self.layout.ln_f.forward(tape, p, x)?;
        Ok(self.layout.head.forward(tape, p, x)?)
    }

    /// Teacher-forced loss on `tape`: position `t` predicts `ids[t + 1]`;
    /// targets flagged in `pad` are excluded.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        ids: &[u32],
        pad: &[bool],
        mode: Mode<'_>,
    ) -> Result<Var, NapError> {
        if ids.len() < 2 {
            return Err(NumericError::EmptyMask.into());
        }
        if pad.len() != ids.len() {
            return Err(NapError::InvalidConfig(format!(
                "pad mask of {} for {} ids",
                pad.len(),
                ids.len()
            )));
        }
        let n = ids.len() - 1;
        let logits = self.forward(tape, p, &ids[..n], mode)?;
        let targets: Vec<usize> = ids[1..].iter().map(|&i| i as usize).collect();
        let mask: Vec<bool> = pad[1..].iter().map(|&padded| !padded).collect();
        Ok(tape.cross_entropy(logits, &targets, &mask)?)
    }

    /// Eval-mode logits.
    pub fn logits(&self, ids: &[u32]) -> Result<Tensor<F>, NapError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &p, ids, Mode::Eval)?;
        Ok(tape.value(out).clone())
    }
}

/// Eval-mode teacher-forced loss (nats per target token).
pub fn nap_loss<F: Real>(model: &NapModel<F>, ids: &[u32], pad: &[bool]) -> Result<f64, NapError> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let out = model.loss_on_tape(&mut tape, &p, ids, pad, Mode::Eval)?;
    Ok(tape.value(out).item().as_f64())
}

fn drop<'a>(rate: f64, rng: &'a mut Option<&mut ChaCha8Rng>) -> Option<Dropout<'a, ChaCha8Rng>> {
    rng.as_deref_mut().map(|r| Dropout { rate, rng: r })
}

/// Surprisal `e_t = −ln p(a_{t+1} | <bos>, a_1..a_t)` for `t = 1..T−1`, in
/// nats. `values()[t − 1]` holds `e_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyTrace {
    values: Vec<f64>,
}

impl EntropyTrace {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of atoms `T` the trace belongs to.
    pub fn atom_count(&self) -> usize {
        self.values.len() + 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `e_t` for 1-based transition `t`.
    pub fn at(&self, t: usize) -> f64 {
        self.values[t - 1]
    }
}

/// Per-transition surprisal of `tokenized` under `model` (eval mode).
pub fn surprisal_trace<F: Real>(model: &NapModel<F>, tokenized: &TokenizedSmiles) -> Result<EntropyTrace, NapError> {
    let vocab = Vocabulary::new();
    if model.config.vocab_size != vocab.len() {
        return Err(NapError::InvalidConfig(format!(
            "surprisal needs the {}-token atom vocabulary, model has {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let ids = crate::smiles::encode_ids(tokenized, &vocab, true, false);
    if ids.len() > model.config.context {
        return Err(NapError::ContextOverflow {
            len: ids.len(),
            context: model.config.context,
        });
    }
    let t = tokenized.len();
    if t == 1 {
        return Ok(EntropyTrace::new(Vec::new()));
    }
    // Row `t` has consumed <bos>, a_1..a_t and predicts a_{t+1} = ids[t + 1].
    let logits = model.logits(&ids[..t])?;
    let values = (1..t)
        .map(|row| {
            let lp = kernels::log_softmax_row(logits.row(row));
            (-lp[ids[row + 1] as usize]).as_f64().max(0.0)
        })
        .collect();
    Ok(EntropyTrace::new(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check_with, GradCheckOptions, Stencil};
    use crate::smiles::tokenize_atoms;

    fn tiny() -> NapConfig {
        NapConfig {
            vocab_size: 7,
            layers: 1,
            heads: 2,
            hidden: 16,
            max_positions: 16,
            context: 8,
            pack_length: 8,
            ..Default::default()
        }
    }

    #[test]
    fn default_parameter_count_near_half_million() {
        let m = NapModel::<f32>::zeroed(NapConfig::default()).unwrap();
        let n = m.num_params() as f64;
        // GPT-2 layout without key biases.
        assert_eq!(m.num_params(), 537_600);
        assert!((n - 538_000.0).abs() / 538_000.0 < 0.05);
    }

    #[test]
    fn config_validation() {
        let mut c = NapConfig::default();
        c.heads = 3;
        assert!(matches!(NapModel::<f32>::zeroed(c).unwrap_err(), NapError::InvalidConfig(_)));
        let mut c = NapConfig::default();
        c.context = 2048;
        assert!(c.validate().is_err());
        let mut c = NapConfig::default();
        c.dropout_attn = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn logits_shape_and_overflow() {
        let m = NapModel::<f32>::init(NapConfig::default(), 3).unwrap();
        let v = Vocabulary::new();
        let ids = [v.bos_id(), v.id("C").unwrap(), v.id("C").unwrap(), v.id("O").unwrap()];
        assert_eq!(m.logits(&ids).unwrap().shape(), &[4, 39]);
        let long = vec![5u32; 513];
        assert!(matches!(m.logits(&long), Err(NapError::ContextOverflow { len: 513, context: 512 })));
        assert!(matches!(m.logits(&[40]), Err(NapError::InvalidToken { id: 40, .. })));
    }

    #[test]
    fn zeroed_model_is_uniform() {
        let m = NapModel::<f32>::zeroed(NapConfig::default()).unwrap();
        let logits = m.logits(&[1, 30, 31, 32]).unwrap();
        for r in 0..4 {
            assert!(logits.row(r).iter().all(|&x| x == logits.get(r, 0)));
        }
        let loss = nap_loss(&m, &[1, 30, 31, 32], &[false; 4]).unwrap();
        assert!((loss - 39f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn zero_head_gives_ln_v() {
        let mut m = NapModel::<f32>::init(NapConfig::default(), 11).unwrap();
        m.zero_head();
        let ids = [1, 33, 33, 35, 2];
        assert!((nap_loss(&m, &ids, &[false; 5]).unwrap() - 39f64.ln()).abs() < 1e-6);
        let t = tokenize_atoms("CC(=O)OC1=CC=CC=C1C(=O)O").unwrap();
        let trace = surprisal_trace(&m, &t).unwrap();
        assert_eq!(trace.len(), 12);
        for &e in trace.values() {
            assert!((e - 39f64.ln()).abs() < 1e-4);
        }
    }

    #[test]
    fn causal_logits_ignore_suffix() {
        let m = NapModel::<f32>::init(NapConfig::default(), 5).unwrap();
        let a = [1u32, 33, 33, 35, 34, 33];
        let mut b = a;
        b[4] = 20;
        b[5] = 3;
        let (la, lb) = (m.logits(&a).unwrap(), m.logits(&b).unwrap());
        for r in 0..4 {
            let same = la.row(r).iter().zip(lb.row(r)).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "row {r} changed");
        }
        assert_ne!(la.row(4), lb.row(4));
    }

    #[test]
    fn hand_loss_with_constant_logits() {
        // Zero weights except the final LN shift and head: every position's
        // logits equal β·W.
        let mut m = NapModel::<f64>::zeroed(tiny()).unwrap();
        let beta_id = m.params.find("ln_f.beta").unwrap();
        let head_id = m.params.find("lm_head.w").unwrap();
        for (j, v) in m.params.get_mut(beta_id).data_mut().iter_mut().enumerate() {
            *v = if j < 3 { 1.0 } else { 0.0 };
        }
        for (k, v) in m.params.get_mut(head_id).data_mut().iter_mut().enumerate() {
            let (row, col) = (k / 7, k % 7);
            *v = if row < 3 { (col as f64) * 0.1 * (row as f64 + 1.0) } else { 0.0 };
        }
        // logits[col] = 0.1·col·(1 + 2 + 3) = 0.6·col
        let logits: Vec<f64> = (0..7).map(|c| 0.6 * c as f64).collect();
        let lse = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
        let ids = [1u32, 4, 6];
        let hand = ((lse - logits[4]) + (lse - logits[6])) / 2.0;
        let got = nap_loss(&m, &ids, &[false; 3]).unwrap();
        assert!((got - hand).abs() < 1e-12, "{got} vs {hand}");
        // masking the last target leaves only the first term
        let got = nap_loss(&m, &ids, &[false, false, true]).unwrap();
        assert!((got - (lse - logits[4])).abs() < 1e-12);
        assert!(matches!(nap_loss(&m, &ids, &[false, true, true]), Err(NapError::Numeric(NumericError::EmptyMask))));
    }

    #[test]
    fn single_position_confident_loss_is_small() {
        let mut m = NapModel::<f64>::zeroed(tiny()).unwrap();
        let beta_id = m.params.find("ln_f.beta").unwrap();
        let head_id = m.params.find("lm_head.w").unwrap();
        m.params.get_mut(beta_id).data_mut()[0] = 1.0;
        m.params.get_mut(head_id).data_mut()[3] = 50.0;
        assert!(nap_loss(&m, &[1, 3], &[false, false]).unwrap() < 1e-12);
    }

    fn nap_grad_error(train: bool) -> f64 {
        let model = NapModel::<f32>::init(tiny(), 9).unwrap().cast::<f64>();
        let params: Vec<Tensor<f64>> = model.params.tensors().cloned().collect();
        let ids = [1u32, 4, 5, 3, 6];
        let pad = [false, false, false, false, true];
        let opts = GradCheckOptions { h: 1e-3, stencil: Stencil::Central4, ..Default::default() };
        let report = grad_check_with(&params, &opts, |tape: &mut Tape<f64>, vars: &[Var]| {
            let bound = Bound::from_vars(vars.to_vec());
            let mut r = rng::stream(1, rng::NAP_DROPOUT);
            let mode = if train { Mode::Train(&mut r) } else { Mode::Eval };
            model.loss_on_tape(tape, &bound, &ids, &pad, mode)
        })
        .unwrap();
        report.max_rel_error
    }

    #[test]
    fn gradients_match_finite_differences_eval() {
        let err = nap_grad_error(false);
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn gradients_match_finite_differences_with_dropout() {
        let err = nap_grad_error(true);
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn short_molecule_has_empty_trace() {
        let m = NapModel::<f32>::init(NapConfig::default(), 1).unwrap();
        let t = tokenize_atoms("[Na+]").unwrap();
        assert!(surprisal_trace(&m, &t).unwrap().is_empty());
        let big = "C".repeat(512);
        let t = tokenize_atoms(&big).unwrap();
        assert!(matches!(surprisal_trace(&m, &t), Err(NapError::ContextOverflow { len: 513, .. })));
    }

    #[test]
    fn surprisal_is_nonnegative() {
        let m = NapModel::<f32>::init(NapConfig::default(), 2).unwrap();
        let t = tokenize_atoms("OC(=O)c1ccc(Cl)cc1N").unwrap();
        let trace = surprisal_trace(&m, &t).unwrap();
        assert_eq!(trace.atom_count(), t.len());
        assert!(trace.values().iter().all(|&e| e >= 0.0 && e.is_finite()));
    }
}
