//! Packed-sequence AdamW training of the next-atom predictor.

use rand::seq::SliceRandom;

use super::{Mode, NapConfig, NapError, NapModel};
use crate::numeric::{AdamW, AdamWConfig, Tape, Tensor};
use crate::rng;
use crate::smiles::{encode_ids, TokenizedSmiles, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    /// Token-weighted mean training loss of every optimiser step.
    pub step_losses: Vec<f64>,
}

/// Splits encoded molecules into training examples. With `concat`, all
/// sequences are joined and cut into `pack_length` chunks (a trailing chunk
/// shorter than two tokens is dropped); otherwise each sequence is truncated
/// to `pack_length`.
pub fn pack_sequences(seqs: &[Vec<u32>], pack_length: usize, concat: bool) -> Vec<Vec<u32>> {
    if concat {
        let stream: Vec<u32> = seqs.iter().flatten().copied().collect();
        stream
            .chunks(pack_length)
            .filter(|c| c.len() >= 2)
            .map(<[u32]>::to_vec)
            .collect()
    } else {
        seqs.iter()
            .filter(|s| s.len() >= 2)
            .map(|s| s[..s.len().min(pack_length)].to_vec())
            .collect()
    }
}

/// Initialises a model from `seed` and trains it on `corpus`.
pub fn train_nap(
    corpus: &[TokenizedSmiles],
    config: &NapConfig,
    seed: u64,
) -> Result<(NapModel<f32>, TrainReport), NapError> {
    let mut model = NapModel::init(config.clone(), seed)?;
    let report = train_nap_from(&mut model, corpus, seed)?;
    Ok((model, report))
}

/// Trains `model` in place with the training settings of its config.
pub fn train_nap_from(
    model: &mut NapModel<f32>,
    corpus: &[TokenizedSmiles],
    seed: u64,
) -> Result<TrainReport, NapError> {
    let config = model.config().clone();
    let vocab = Vocabulary::new();
    if config.vocab_size != vocab.len() {
        return Err(NapError::InvalidConfig(format!(
            "training needs vocab_size {}, got {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let seqs: Vec<Vec<u32>> = corpus.iter().map(|t| encode_ids(t, &vocab, true, true)).collect();
    let examples = pack_sequences(&seqs, config.pack_length, config.concat_data);
    if examples.is_empty() {
        return Err(NapError::EmptyCorpus);
    }

    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..Default::default()
        },
        model.params(),
    );
    let mut dropout_rng = rng::stream(seed, rng::NAP_DROPOUT);
    let mut report = TrainReport {
        steps: 0,
        step_losses: Vec::new(),
    };
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng::substream(seed, rng::NAP_BATCH, epoch as u64));
        for batch in order.chunks(config.batch_size) {
            let total: usize = batch.iter().map(|&i| examples[i].len() - 1).sum();
            let mut acc: Vec<Tensor<f32>> = model.params().tensors().map(|t| Tensor::zeros(t.shape())).collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let ids = &examples[i];
                let weight = (ids.len() - 1) as f32 / total as f32;
                let pad = vec![false; ids.len()];
                let mut tape = Tape::new();
                let p = model.params().bind(&mut tape);
                let loss = model.loss_on_tape(&mut tape, &p, ids, &pad, Mode::Train(&mut dropout_rng))?;
                batch_loss += f64::from(tape.value(loss).item() * weight);
                let grads = tape.backward(loss)?;
                for (a, &v) in acc.iter_mut().zip(p.vars()) {
                    if let Some(g) = grads.get(v) {
                        for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += weight * y;
                        }
                    }
                }
            }
            opt.step(model.params_mut(), &acc, config.lr);
            report.steps += 1;
            report.step_losses.push(batch_loss);
            if report.steps % 100 == 0 {
                log::info!("step {} loss {:.4}", report.steps, batch_loss);
            }
        }
    }
    Ok(report)
}
