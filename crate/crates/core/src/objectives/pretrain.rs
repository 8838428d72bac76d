//! Toy two-modality pretraining of the connector.
//!
//! The two modalities are the hashed node featurizer under two independent
//! seeds. Each step masks a fraction of every molecule's dynamic tokens with
//! a learned vector and optimises the weighted sum of the three losses.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{info_nce_on_tape, masked_recon_on_tape, modality_match_on_tape, ObjectiveConfig, ObjectiveError};
use crate::dqt::{toy_node_embed, DqtModel};
use crate::numeric::layers::Linear;
use crate::numeric::{AdamW, AdamWConfig, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use crate::patching::{pool_tokens, Segmentation};
use crate::rng;
use crate::smiles::{parse_graph, TokenizedSmiles, Vocabulary};

pub const MODALITIES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqtTrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub steps: usize,
}

impl Default for DqtTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 48,
            lr: 1e-4,
            min_lr: 1e-5,
            warmup_lr: 1e-6,
            warmup_steps: 500,
            weight_decay: 0.05,
            steps: 1000,
        }
    }
}

impl DqtTrainConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.batch_size == 0 {
            return Err(ObjectiveError::InvalidConfig("batch_size must be positive".into()));
        }
        let rates = [self.lr, self.min_lr, self.warmup_lr, self.weight_decay];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(ObjectiveError::InvalidConfig("rates must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

/// Linear warmup from `warmup_lr` to `lr`, then cosine decay to `min_lr`
/// at step `steps`. `step` is 0-based.
pub fn lr_at(c: &DqtTrainConfig, step: usize) -> f64 {
    if step < c.warmup_steps {
        return c.warmup_lr + (c.lr - c.warmup_lr) * step as f64 / c.warmup_steps as f64;
    }
    let span = c.steps.saturating_sub(c.warmup_steps).max(1) as f64;
    let progress = ((step - c.warmup_steps) as f64 / span).min(1.0);
    c.min_lr + 0.5 * (c.lr - c.min_lr) * (1.0 + (PI * progress).cos())
}

/// Featurized molecule: per-modality node embeddings and pooled dynamic
/// tokens, plus one reconstruction target per dynamic token.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSample {
    pub x: [Tensor<f32>; MODALITIES],
    pub z: [Tensor<f32>; MODALITIES],
    pub targets: Vec<usize>,
}

/// Vocabulary id of the most frequent element in each segment; ties go to
/// the element occurring first.
pub fn majority_targets(tokenized: &TokenizedSmiles, seg: &Segmentation) -> Vec<usize> {
    let vocab = Vocabulary::new();
    seg.segments()
        .iter()
        .map(|&(a, b)| {
            let atoms = &tokenized.atoms()[a - 1..b];
            let mut best = (0usize, &atoms[0]);
            for sym in atoms {
                let n = atoms.iter().filter(|s| *s == sym).count();
                if n > best.0 {
                    best = (n, sym);
                }
            }
            vocab.id(best.1).expect("tokenized atoms are in the vocabulary") as usize
        })
        .collect()
}

fn modality_seed(seed: u64, m: usize) -> u64 {
    seed ^ (m as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn prepare_sample(
    tokenized: &TokenizedSmiles,
    seg: &Segmentation,
    d_node: usize,
    seed: u64,
) -> Result<PretrainSample, ObjectiveError> {
    let (graph, map) = parse_graph(tokenized)?;
    let x: [Tensor<f32>; MODALITIES] = std::array::from_fn(|m| toy_node_embed(&graph, d_node, modality_seed(seed, m)));
    let z0 = pool_tokens(seg, &map, &x[0])?.tokens;
    let z1 = pool_tokens(seg, &map, &x[1])?.tokens;
    Ok(PretrainSample {
        x,
        z: [z0, z1],
        targets: majority_targets(tokenized, seg),
    })
}

/// Parameters used only during pretraining.
#[derive(Debug, Clone)]
pub struct PretrainHeads {
    pub store: ParamStore<f32>,
    mask: ParamId,
    match_w: ParamId,
    decoders: [Linear; MODALITIES],
}

impl PretrainHeads {
    pub fn init(d_node: usize, d_llm: usize, seed: u64) -> Self {
        let v = Vocabulary::new().len();
        let mut store = ParamStore::new();
        let mask = store.push("mask_token", ParamKind::Weight, Tensor::zeros(&[1, d_node]));
        let match_w = store.push("match.w", ParamKind::Weight, Tensor::zeros(&[d_llm, MODALITIES]));
        let decoders = std::array::from_fn(|m| Linear::register(&mut store, &format!("dec.{m}"), d_llm, v, true));
        let mut r = rng::substream(seed, rng::DQT_INIT, 1);
        for p in store.params_mut() {
            if p.kind == ParamKind::Weight {
                let bound = 1.0 / (p.tensor.shape()[0] as f64).sqrt();
                for x in p.tensor.data_mut() {
                    *x = r.random_range(-bound..bound) as f32;
                }
            }
        }
        Self {
            store,
            mask,
            match_w,
            decoders,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLosses {
    pub step: usize,
    pub lr: f64,
    pub contrast: f64,
    pub matching: f64,
    pub recon: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub steps: Vec<StepLosses>,
    pub heads: PretrainHeads,
}

impl PartialEq for PretrainHeads {
    fn eq(&self, other: &Self) -> bool {
        self.store.bit_identical(&other.store)
    }
}

fn masked_count(m: usize, fraction: f64) -> usize {
    if fraction <= 0.0 || m == 0 {
        0
    } else {
        ((fraction * m as f64).round() as usize).clamp(1, m)
    }
}

/// Runs `train.steps` optimiser steps on `model`.
pub fn pretrain_dqt(
    model: &mut DqtModel<f32>,
    samples: &[PretrainSample],
    train: &DqtTrainConfig,
    obj: &ObjectiveConfig,
    seed: u64,
) -> Result<PretrainReport, ObjectiveError> {
    train.validate()?;
    obj.validate()?;
    if samples.is_empty() {
        return Err(ObjectiveError::InvalidBatch("no training molecules".into()));
    }
    let cfg = model.config().clone();
    let mut heads = PretrainHeads::init(cfg.d_node, cfg.d_llm, seed);
    let adam = AdamWConfig {
        weight_decay: train.weight_decay,
        ..Default::default()
    };
    let mut opt_model = AdamW::new(adam, model.params());
    let mut opt_heads = AdamW::new(adam, &heads.store);
    let batch = train.batch_size.min(samples.len());
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut steps = Vec::with_capacity(train.steps);

    for step in 0..train.steps {
        let mut items = Vec::with_capacity(batch);
        while items.len() < batch {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng::substream(seed, rng::DQT_BATCH, epoch));
                order.reverse();
                epoch += 1;
            }
            items.push(order.pop().expect("refilled"));
        }

        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape);
        let h = heads.store.bind(&mut tape);
        let mut mask_rng = rng::substream(seed, rng::MASK, step as u64);
        let mut pooled: [Vec<Var>; MODALITIES] = Default::default();
        let mut anchor_means = Vec::new();
        let mut labels = Vec::new();
        let mut recon_logits = Vec::new();
        let mut recon_targets = Vec::new();
        for &i in &items {
            let s = &samples[i];
            for m in 0..MODALITIES {
                let rows = s.z[m].rows();
                let masked = sample(&mut mask_rng, rows, masked_count(rows, obj.mask_fraction)).into_vec();
                let z_leaf = tape.leaf(s.z[m].clone());
                let mask_var = h.var(heads.mask);
                let picks: Vec<(Var, usize)> = (0..rows)
                    .map(|r| if masked.contains(&r) { (mask_var, 0) } else { (z_leaf, r) })
                    .collect();
                let z_in = tape.stack_rows(&picks)?;
                let x = tape.leaf(s.x[m].clone());
                let out = model.forward_on_tape(&mut tape, &p, Some(z_in), x, &vec![false; rows])?;
                pooled[m].push(tape.mean_rows(out.u)?);
                let anchors = tape.slice_rows(out.u, 0, cfg.anchors)?;
                anchor_means.push(tape.mean_rows(anchors)?);
                labels.push(m);
                if !masked.is_empty() {
                    let mut sorted = masked.clone();
                    sorted.sort_unstable();
                    let sel: Vec<(Var, usize)> = sorted.iter().map(|&r| (out.u, cfg.anchors + r)).collect();
                    let rows_u = tape.stack_rows(&sel)?;
                    recon_logits.push(heads.decoders[m].forward(&mut tape, &h, rows_u)?);
                    recon_targets.extend(sorted.iter().map(|&r| s.targets[r]));
                }
            }
        }
        let a = tape.concat_rows(&pooled[0])?;
        let b = tape.concat_rows(&pooled[1])?;
        let l1 = info_nce_on_tape(&mut tape, a, b, obj.tau)?;
        let means = tape.concat_rows(&anchor_means)?;
        let l2 = modality_match_on_tape(&mut tape, means, h.var(heads.match_w), &labels)?;
        let mut terms = vec![(l1, obj.lambda1), (l2, obj.lambda2)];
        let mut recon = 0.0;
        if !recon_logits.is_empty() {
            let logits = tape.concat_rows(&recon_logits)?;
            let l3 = masked_recon_on_tape(&mut tape, logits, &recon_targets)?;
            recon = f64::from(tape.value(l3).item());
            terms.push((l3, obj.lambda3));
        }
        let total = tape.weighted_sum(&terms)?;
        let grads = tape.backward(total)?;
        let collect = |store: &ParamStore<f32>, vars: &[Var]| -> Vec<Tensor<f32>> {
            store
                .tensors()
                .zip(vars)
                .map(|(t, &v)| grads.get_or_zeros(v, t))
                .collect()
        };
        let g_model = collect(model.params(), p.vars());
        let g_heads = collect(&heads.store, h.vars());
        let lr = lr_at(train, step);
        opt_model.step(model.params_mut(), &g_model, lr);
        opt_heads.step(&mut heads.store, &g_heads, lr);

        let rec = StepLosses {
            step: step + 1,
            lr,
            contrast: f64::from(tape.value(l1).item()),
            matching: f64::from(tape.value(l2).item()),
            recon,
            total: f64::from(tape.value(total).item()),
        };
        log::info!(
            "step {} contrast {:.4} match {:.4} recon {:.4} total {:.4}",
            rec.step,
            rec.contrast,
            rec.matching,
            rec.recon,
            rec.total
        );
        steps.push(rec);
    }
    Ok(PretrainReport { steps, heads })
}
