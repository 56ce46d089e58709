//! Contrastive training: in-batch sampled-softmax loss over cosine
//! similarities, shuffled batching, linear learning-rate decay, and the
//! optimizer step. One training loop per model instance, single-threaded.

pub mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::QAPair;
use crate::encoder::{tokenize, TokenizerSpec};
use crate::error::{Error, Result};
use crate::sharing::{DualEncoderModel, Tower};
use crate::tensor::{Tape, TensorId};

pub use optim::{Optimizer, OptimizerKind};

/// Loss settings. Similarity is fixed to cosine; the temperature divides the
/// similarity logits before the softmax.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.05 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Training-loop settings. The learning rate decays linearly from `peak_lr`
/// toward zero at the final step boundary.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Drop in-batch duplicate answers (they are false negatives otherwise).
    pub dedup_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            peak_lr: 1e-3,
            optimizer: OptimizerKind::Adafactor,
            seed: 0,
            dedup_batch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".to_string()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config(format!(
                "peak_lr must be positive, got {}",
                self.peak_lr
            )));
        }
        Ok(())
    }
}

/// One tokenized training batch; the i-th answer is the positive for the
/// i-th question, every other answer in the batch is a negative.
#[derive(Debug, Clone)]
pub struct Batch {
    pub question_ids: Vec<usize>,
    pub question_mask: Vec<f64>,
    pub answer_ids: Vec<usize>,
    pub answer_mask: Vec<f64>,
    /// Indices of the source pairs in the dataset.
    pub pair_indices: Vec<usize>,
    pub size: usize,
    pub seq_len: usize,
}

/// Applied learning rate at a 0-based step index.
pub fn lr_at_step(peak_lr: f64, step: usize, total_steps: usize) -> f64 {
    peak_lr * (1.0 - step as f64 / total_steps as f64)
}

/// Contrastive loss of one batch: S[i][j] = cos(q_i, a_j), loss = mean over i
/// of -log softmax_j(S[i][j]/temperature) at j = i. Differentiable end to end.
pub fn batch_loss(
    tape: &mut Tape,
    model: &DualEncoderModel,
    batch: &Batch,
    loss_config: &LossConfig,
) -> Result<TensorId> {
    loss_config.validate()?;
    let q = model.encode_tower_batch(
        tape,
        Tower::Question,
        &batch.question_ids,
        &batch.question_mask,
        batch.size,
    )?;
    let a = model.encode_tower_batch(
        tape,
        Tower::Answer,
        &batch.answer_ids,
        &batch.answer_mask,
        batch.size,
    )?;
    for (side, enc) in [("question", q.embedding), ("answer", a.embedding)] {
        let emb = tape.value(enc);
        for i in 0..batch.size {
            if emb.row(i).iter().all(|&v| v == 0.0) {
                return Err(Error::DegenerateVector(format!(
                    "{side} example {i} produced a zero-norm embedding"
                )));
            }
        }
    }
    let qn = tape.l2_normalize_rows(q.embedding)?;
    let an = tape.l2_normalize_rows(a.embedding)?;
    let an_t = tape.transpose(an)?;
    let sims = tape.matmul(qn, an_t)?;
    let logits = tape.scale(sims, 1.0 / loss_config.temperature)?;
    tape.in_batch_softmax_nll(logits)
}

/// Per-step training metrics, mirrored into the metrics CSV.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepMetrics>,
}

impl TrainLog {
    /// Columns: step, lr, loss, wall_ms. Only wall_ms varies between
    /// identically configured runs.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["step", "lr", "loss", "wall_ms"]).map_err(csv_err)?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.lr.to_string(),
                s.loss.to_string(),
                format!("{:.3}", s.wall_ms),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

struct TokenizedPair {
    q_ids: Vec<usize>,
    q_mask: Vec<f64>,
    a_ids: Vec<usize>,
    a_mask: Vec<f64>,
}

/// Runs exactly `steps` optimizer steps over shuffled batches (reshuffled
/// every epoch, deterministic per seed). Frozen parameters receive no
/// updates. Incomplete trailing batches are dropped, never padded.
pub fn train(
    model: &mut DualEncoderModel,
    pairs: &[QAPair],
    tokenizer: &TokenizerSpec,
    train_config: &TrainConfig,
    loss_config: &LossConfig,
) -> Result<TrainLog> {
    train_config.validate()?;
    loss_config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("training dataset is empty".to_string()));
    }
    if pairs.len() < train_config.batch_size {
        return Err(Error::Config(format!(
            "dataset of {} pairs is smaller than batch_size {} (batches are never padded)",
            pairs.len(),
            train_config.batch_size
        )));
    }

    let seq_len = model.config.max_seq_len;
    let tokenized: Vec<TokenizedPair> = pairs
        .iter()
        .map(|p| {
            let (q_ids, q_mask) = tokenize(&p.question, tokenizer, seq_len)?;
            let (a_ids, a_mask) = tokenize(&p.answer, tokenizer, seq_len)?;
            Ok(TokenizedPair {
                q_ids,
                q_mask,
                a_ids,
                a_mask,
            })
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = usize::MAX; // force initial shuffle
    let mut optimizer = Optimizer::new(train_config.optimizer);
    let mut log = TrainLog::default();

    for step in 0..train_config.steps {
        if cursor == usize::MAX || cursor + train_config.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let mut chosen: Vec<usize> = order[cursor..cursor + train_config.batch_size].to_vec();
        cursor += train_config.batch_size;
        if train_config.dedup_batch {
            let mut seen = std::collections::HashSet::new();
            chosen.retain(|&i| seen.insert(pairs[i].answer.as_str()));
        }
        let batch = assemble_batch(&tokenized, &chosen, seq_len);

        let started = Instant::now();
        let lr = lr_at_step(train_config.peak_lr, step, train_config.steps);
        let mut tape = Tape::new();
        let loss_id = batch_loss(&mut tape, model, &batch, loss_config)
            .map_err(|e| at_step(e, step + 1))?;
        let loss = tape.value(loss_id).item()?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss} at step {}",
                step + 1
            )));
        }
        tape.backward(loss_id).map_err(|e| at_step(e, step + 1))?;

        for (name, leaf, trainable) in tape.bindings() {
            if !trainable {
                continue;
            }
            let Some(grad) = tape.grad(leaf) else {
                continue;
            };
            let param = model.params.get_mut(name)?;
            optimizer.step_param(name, &mut param.value, grad, lr)?;
            param
                .value
                .ensure_finite(&format!("parameter {name} after step {}", step + 1))?;
        }

        log.steps.push(StepMetrics {
            step: step + 1,
            lr,
            loss,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(log)
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("{msg} (step {step})")),
        other => other,
    }
}

fn assemble_batch(tokenized: &[TokenizedPair], chosen: &[usize], seq_len: usize) -> Batch {
    let size = chosen.len();
    let mut batch = Batch {
        question_ids: Vec::with_capacity(size * seq_len),
        question_mask: Vec::with_capacity(size * seq_len),
        answer_ids: Vec::with_capacity(size * seq_len),
        answer_mask: Vec::with_capacity(size * seq_len),
        pair_indices: chosen.to_vec(),
        size,
        seq_len,
    };
    for &i in chosen {
        batch.question_ids.extend_from_slice(&tokenized[i].q_ids);
        batch.question_mask.extend_from_slice(&tokenized[i].q_mask);
        batch.answer_ids.extend_from_slice(&tokenized[i].a_ids);
        batch.answer_mask.extend_from_slice(&tokenized[i].a_mask);
    }
    batch
}
