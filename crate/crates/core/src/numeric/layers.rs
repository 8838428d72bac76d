//! Transformer building blocks over a [`ParamStore`].

use std::rc::Rc;

use rand::Rng;

use super::params::{Bound, ParamId, ParamKind, ParamStore};
use super::{NumericError, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Registers a zero `[fan_in×fan_out]` weight (and bias).
    pub fn register<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.push(format!("{name}.w"), ParamKind::Weight, Tensor::zeros(&[fan_in, fan_out]));
        let b = bias.then(|| store.push(format!("{name}.b"), ParamKind::Bias, Tensor::zeros(&[fan_out])));
        Self { w, b }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var, NumericError> {
        let y = tape.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => tape.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn register<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize, eps: f64) -> Self {
        let gamma = store.push(format!("{name}.gamma"), ParamKind::Norm, Tensor::full(&[dim], F::one()));
        let beta = store.push(format!("{name}.beta"), ParamKind::Norm, Tensor::zeros(&[dim]));
        Self { gamma, beta, eps }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var, NumericError> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), self.eps)
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc: Linear,
    pub proj: Linear,
}

impl Mlp {
    pub fn register<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc: Linear::register(store, &format!("{name}.fc"), dim, hidden, true),
            proj: Linear::register(store, &format!("{name}.proj"), hidden, dim, true),
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var, NumericError> {
        let h = self.fc.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.proj.forward(tape, p, h)
    }
}

/// Inverted dropout driven by a caller-owned stream; `None` in eval mode.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

pub fn dropout<F: Real, R: Rng>(
    tape: &mut Tape<F>,
    x: Var,
    drop: Option<&mut Dropout<'_, R>>,
) -> Result<Var, NumericError> {
    let Some(d) = drop else { return Ok(x) };
    if d.rate <= 0.0 {
        return Ok(x);
    }
    let keep = F::lit(1.0 / (1.0 - d.rate));
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<F> = (0..n)
        .map(|_| if d.rng.random::<f64>() < d.rate { F::zero() } else { keep })
        .collect();
    tape.mul_const(x, Rc::new(Tensor::new(shape, mask)?))
}

/// Multi-head attention. Keys carry no bias: a key bias only shifts every
/// score of a row by the same amount, so softmax ignores it.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// Post-softmax weights per head (before dropout), each `[q×n]`.
    pub probs: Vec<Var>,
}

impl Attention {
    pub fn register<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        dim: usize,
        heads: usize,
    ) -> Self {
        Self {
            q: Linear::register(store, &format!("{name}.q"), q_dim, dim, true),
            k: Linear::register(store, &format!("{name}.k"), kv_dim, dim, false),
            v: Linear::register(store, &format!("{name}.v"), kv_dim, dim, true),
            o: Linear::register(store, &format!("{name}.o"), dim, dim, true),
            heads,
        }
    }

    /// `visible` is a row-major `[q×n]` mask over keys.
    pub fn forward<F: Real, R: Rng>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        xq: Var,
        xkv: Var,
        visible: Option<&[bool]>,
        mut drop: Option<&mut Dropout<'_, R>>,
    ) -> Result<AttentionOutput, NumericError> {
        let q = self.q.forward(tape, p, xq)?;
        let k = self.k.forward(tape, p, xkv)?;
        let v = self.v.forward(tape, p, xkv)?;
        let dim = tape.value(q).cols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let s = tape.matmul_t(qh, kh)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax(s, visible)?;
            probs.push(a);
            let a = dropout(tape, a, drop.as_deref_mut())?;
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let out = self.o.forward(tape, p, cat)?;
        Ok(AttentionOutput { out, probs })
    }
}

/// Causal mask for `t` positions: row `i` sees keys `0..=i`.
pub fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|k| k % t <= k / t).collect()
}

/// Mean of per-head attention weights.
pub fn head_average<F: Real>(tape: &Tape<F>, probs: &[Var]) -> Tensor<F> {
    let mut acc = tape.value(probs[0]).clone();
    for &p in &probs[1..] {
        for (a, &b) in acc.data_mut().iter_mut().zip(tape.value(p).data()) {
            *a += b;
        }
    }
    let n = F::lit(probs.len() as f64);
    acc.map(|x| x / n)
}
