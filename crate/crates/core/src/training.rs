//! Shared training machinery: padded batches, masked LM loss, the epoch loop.

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Next-token cross-entropy averaged over unmasked positions of each example, then over
/// the batch. `logits` is `[b, t, v]`; `targets` (u32) and `mask` (float, 0/1) are `[b, t]`.
/// Masked positions may hold any target id.
pub fn masked_lm_loss(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let picked = logp.gather(&targets.unsqueeze(2)?, 2)?.squeeze(2)?;
    let mask = mask.to_dtype(logits.dtype())?;
    let per_token = (picked.neg()? * &mask)?;
    let counts = mask.sum(1)?.clamp(1.0, f64::INFINITY)?;
    let per_example = per_token.sum(1)?.div(&counts)?;
    Ok(per_example.mean_all()?)
}

/// Right-padded `[b, t]` token and mask tensors for language-model training: the model
/// consumes `seq[..n-1]` and predicts `seq[1..]`.
pub struct LmBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub mask: Tensor,
}

impl LmBatch {
    pub fn new(seqs: &[&[u32]], pad_id: u32, device: &Device) -> Result<Self> {
        let width = seqs.iter().map(|s| s.len().saturating_sub(1)).max().unwrap_or(0).max(1);
        let b = seqs.len();
        let mut inputs = vec![pad_id; b * width];
        let mut targets = vec![pad_id; b * width];
        let mut mask = vec![0f32; b * width];
        for (i, s) in seqs.iter().enumerate() {
            for j in 0..s.len().saturating_sub(1) {
                inputs[i * width + j] = s[j];
                targets[i * width + j] = s[j + 1];
                mask[i * width + j] = 1.0;
            }
        }
        Ok(Self {
            inputs: Tensor::from_vec(inputs, (b, width), device)?,
            targets: Tensor::from_vec(targets, (b, width), device)?,
            mask: Tensor::from_vec(mask, (b, width), device)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub epochs: Vec<EpochLoss>,
    pub stopped_early: bool,
}

impl LossLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop once validation loss has failed to improve this many epochs in a row.
    pub patience: Option<usize>,
}

/// Runs `epochs` passes of seeded-shuffled minibatches with Adam (default betas, no
/// weight decay, constant learning rate). `batch_loss` receives example indices.
pub fn fit(
    vars: Vec<Var>,
    n_examples: usize,
    cfg: &LoopConfig,
    mut batch_loss: impl FnMut(&[usize]) -> Result<Tensor>,
    mut validate: Option<&mut dyn FnMut() -> Result<f64>>,
) -> Result<LossLog> {
    if n_examples == 0 {
        return Err(Error::config("training set is empty"));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::config("batch size and learning rate must be positive"));
    }
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut log = LossLog::default();
    let mut order: Vec<usize> = (0..n_examples).collect();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let loss = batch_loss(chunk)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {value} at epoch {epoch}, batch {bi}"
                )));
            }
            opt.backward_step(&loss)?;
            total += value;
            batches += 1;
        }
        let train_loss = total / batches as f64;
        let val_loss = match validate.as_mut() {
            Some(v) => Some(v()?),
            None => None,
        };
        tracing::info!(epoch, train_loss, ?val_loss, "epoch finished");
        log.epochs.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
        if let (Some(patience), Some(val)) = (cfg.patience, val_loss) {
            if val < best {
                best = val;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(log)
}
