//! Fusion-MLP training against a frozen backbone, and checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_atomic, Phase, SplitDataset};
use crate::error::{Error, Result};
use crate::evalharness::{evaluate, EvalConfig};
use crate::model::backbone::{Backbone, BackboneConfig, SequenceEncoder, TfmSettings};
use crate::model::fusion::{Activation, FusionMlp};
use crate::numcore::tape::SoftmaxRow;
use crate::numcore::{DenseMatrix, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_id: usize,
    pub d_text: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub mlp_seed: u64,
    pub backbone: BackboneConfig,
    pub tfm: TfmSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        Self {
            d_id: 50,
            d_text: 50,
            hidden: 2 * backbone.d_model,
            activation: Activation::Gelu,
            mlp_seed: 3,
            backbone,
            tfm: TfmSettings::default(),
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> Result<SequenceEncoder> {
        Ok(SequenceEncoder::new(Backbone::new(self.backbone.clone())?, self.tfm.clone()))
    }

    pub fn init_mlp(&self) -> FusionMlp {
        FusionMlp::new(
            self.d_id + self.d_text,
            self.hidden,
            self.backbone.d_model,
            self.activation,
            self.mlp_seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub n_neg: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 20,
            patience: 3,
            n_neg: 100,
            seed: 17,
        }
    }
}

/// Decoupled weight decay with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
    t: i32,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    pub fn new(shapes: &[(usize, usize)], config: &TrainConfig) -> Self {
        Self {
            m: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
            t: 0,
            lr: config.lr,
            weight_decay: config.weight_decay,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
        }
    }

    pub fn step(&mut self, params: &mut [&mut DenseMatrix], grads: &[DenseMatrix]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[k].as_mut_slice();
            let v = self.v[k].as_mut_slice();
            for (i, (w, gi)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                *w -= self.lr * self.weight_decay * *w;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One training sequence: the model reads `input` and row `position` of each
/// softmax row predicts its first candidate.
#[derive(Debug, Clone)]
pub struct Example {
    pub input: Vec<usize>,
    pub rows: Vec<SoftmaxRow>,
}

/// Next-item rows over a training prefix with `n_neg` uniform negatives per
/// position (resampled when they hit the target). `None` below two items.
pub fn make_example(train: &[usize], n_items: usize, n_neg: usize, rng: &mut impl Rng) -> Option<Example> {
    if train.len() < 2 || n_items < 2 {
        return None;
    }
    let input = train[..train.len() - 1].to_vec();
    let rows = (0..input.len())
        .map(|t| {
            let target = train[t + 1];
            let mut candidates = Vec::with_capacity(n_neg + 1);
            candidates.push(target);
            while candidates.len() <= n_neg {
                let c = rng.random_range(0..n_items);
                if c != target {
                    candidates.push(c);
                }
            }
            SoftmaxRow { position: t, candidates }
        })
        .collect();
    Some(Example { input, rows })
}

/// Loss of one example and its gradient w.r.t. the token rows it touches.
fn example_grad(encoder: &SequenceEncoder, tokens: &DenseMatrix, ex: &Example) -> Result<(f64, Vec<usize>, DenseMatrix)> {
    let mut uniq: Vec<usize> = ex.input.clone();
    uniq.extend(ex.rows.iter().flat_map(|r| r.candidates.iter().copied()));
    uniq.sort_unstable();
    uniq.dedup();
    let local = |i: usize| uniq.binary_search(&i).unwrap();
    let mut tape = Tape::new();
    let table = tape.param(tokens.select_rows(&uniq));
    let idx: Vec<usize> = ex.input.iter().map(|&i| local(i)).collect();
    let x = tape.gather_rows(table, &idx);
    let outs = encoder.backbone.forward_tape(&mut tape, x, &encoder.tfm)?;
    let rows = ex
        .rows
        .iter()
        .map(|r| SoftmaxRow {
            position: r.position,
            candidates: r.candidates.iter().map(|&c| local(c)).collect(),
        })
        .collect();
    let loss = tape.sampled_softmax(*outs.last().unwrap(), table, rows)?;
    let value = tape.value(loss)[(0, 0)];
    let mut grads = tape.backward(loss)?;
    let g = grads.take(table).expect("token table is trainable");
    Ok((value, uniq, g))
}

/// Mean loss over `examples` and its gradient w.r.t. every MLP parameter.
/// Per-example passes run in parallel; reduction order is fixed.
pub fn batch_loss_and_grads(
    mlp: &FusionMlp,
    inputs: &DenseMatrix,
    encoder: &SequenceEncoder,
    examples: &[Example],
) -> Result<(f64, Vec<DenseMatrix>)> {
    if examples.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let mut tape = Tape::new();
    let vars = mlp.register(&mut tape);
    let xin = tape.constant(inputs.clone());
    let tokens_var = mlp.forward_tape(&mut tape, vars, xin);
    let tokens = tape.value(tokens_var).clone();
    let parts: Vec<Result<(f64, Vec<usize>, DenseMatrix)>> = examples
        .par_iter()
        .map(|ex| example_grad(encoder, &tokens, ex))
        .collect();
    let scale = 1.0 / examples.len() as f64;
    let mut g_tokens = DenseMatrix::zeros(tokens.rows(), tokens.cols());
    let mut loss = 0.0;
    for part in parts {
        let (l, uniq, g) = part?;
        loss += l * scale;
        for (r, &item) in uniq.iter().enumerate() {
            for (dst, v) in g_tokens.row_mut(item).iter_mut().zip(g.row(r)) {
                *dst += scale * v;
            }
        }
    }
    let surrogate = tape.inner_const(tokens_var, g_tokens);
    let mut grads = tape.backward(surrogate)?;
    let out = [vars.w1, vars.b1, vars.w2, vars.b2]
        .into_iter()
        .map(|v| grads.take(v).expect("MLP parameters are trainable"))
        .collect();
    Ok((loss, out))
}

/// Mean loss only, for finite-difference checks.
pub fn batch_loss(mlp: &FusionMlp, inputs: &DenseMatrix, encoder: &SequenceEncoder, examples: &[Example]) -> Result<f64> {
    let tokens = mlp.forward(inputs);
    let mut total = 0.0;
    for ex in examples {
        total += example_grad(encoder, &tokens, ex)?.0;
    }
    Ok(total / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub valid_ndcg: f64,
    pub valid_recall: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StopReason {
    Completed,
    EarlyStopped { best_epoch: usize },
    Diverged { step: usize },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation NDCG seen (the initial ones when no
    /// epoch ran).
    pub mlp: FusionMlp,
    pub best_epoch: usize,
    pub best_valid_ndcg: f64,
    pub log: Vec<EpochLog>,
    pub stop: StopReason,
    pub backbone_hash: String,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|e| serde_json::to_string(e).unwrap() + "\n")
            .collect()
    }
}

fn user_rng(seed: u64, epoch: usize, user: usize) -> ChaCha8Rng {
    let mix = seed ^ ((epoch as u64) << 40) ^ (user as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    ChaCha8Rng::seed_from_u64(mix)
}

/// Trains the fusion MLP on `inputs = [e_id ; e_text]` with the backbone frozen,
/// early-stopping on validation NDCG under `eval`. A non-finite batch loss stops
/// training and keeps the last good parameters.
pub fn train(
    split: &SplitDataset,
    inputs: &DenseMatrix,
    model: &ModelConfig,
    config: &TrainConfig,
    eval: &EvalConfig,
) -> Result<TrainOutcome> {
    if inputs.rows() != split.n_items() || inputs.cols() != model.d_id + model.d_text {
        return Err(Error::input(format!(
            "training inputs are {}x{}, expected {}x{}",
            inputs.rows(),
            inputs.cols(),
            split.n_items(),
            model.d_id + model.d_text
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::input("batch size must be positive"));
    }
    let encoder = model.encoder()?;
    let backbone_hash = encoder.backbone.param_hash();
    let mut mlp = model.init_mlp();
    let shapes: Vec<(usize, usize)> = mlp.params().iter().map(|p| p.shape()).collect();
    let mut opt = AdamW::new(&shapes, config);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best = (mlp.clone(), 0usize, f64::NEG_INFINITY);
    let mut log = Vec::new();
    let mut stop = StopReason::Completed;
    let mut step = 0usize;
    let mut since_best = 0usize;

    'epochs: for epoch in 1..=config.epochs {
        let mut users: Vec<usize> = (0..split.n_users()).collect();
        users.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in users.chunks(config.batch_size) {
            let examples: Vec<Example> = chunk
                .iter()
                .filter_map(|&u| {
                    let mut rng = user_rng(config.seed, epoch, u);
                    make_example(split.sequences[u].train(), split.n_items(), config.n_neg, &mut rng)
                })
                .collect();
            if examples.is_empty() {
                log::warn!("epoch {epoch}: empty batch skipped");
                continue;
            }
            step += 1;
            let (loss, grads) = batch_loss_and_grads(&mlp, inputs, &encoder, &examples)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                log::error!("non-finite loss at step {step}; keeping last good parameters");
                stop = StopReason::Diverged { step };
                break 'epochs;
            }
            opt.step(&mut mlp.params_mut(), &grads);
            loss_sum += loss;
            batches += 1;
        }
        let tokens = mlp.forward(inputs);
        let valid = evaluate(&encoder, &tokens, split, Phase::Valid, eval)?;
        let entry = EpochLog {
            epoch,
            loss: if batches > 0 { loss_sum / batches as f64 } else { f64::NAN },
            valid_ndcg: valid.ndcg,
            valid_recall: valid.recall,
            lr: config.lr,
        };
        log::info!(
            "epoch {epoch} loss {:.5} valid ndcg@{k} {:.4} recall@{k} {:.4}",
            entry.loss,
            entry.valid_ndcg,
            entry.valid_recall,
            k = eval.k
        );
        log.push(entry);
        if valid.ndcg > best.2 {
            best = (mlp.clone(), epoch, valid.ndcg);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stop = StopReason::EarlyStopped { best_epoch: best.1 };
                break;
            }
        }
    }
    if matches!(stop, StopReason::Diverged { .. }) && best.1 == 0 {
        best.0 = model.init_mlp();
    }
    let (mlp, best_epoch, best_ndcg) = best;
    Ok(TrainOutcome {
        mlp,
        best_epoch,
        best_valid_ndcg: if best_epoch == 0 { f64::NAN } else { best_ndcg },
        log,
        stop,
        backbone_hash,
    })
}

const MAGIC: &[u8; 8] = b"FQLCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub backbone_hash: String,
    pub best_epoch: usize,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub mlp: FusionMlp,
}

impl Checkpoint {
    /// Magic, header length (u64 LE), JSON header, then per block
    /// `rows, cols` (u64 LE) and row-major f64 LE values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for block in self.mlp.params() {
            out.extend_from_slice(&(block.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(block.cols() as u64).to_le_bytes());
            for v in block.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::input(format!("corrupt checkpoint: {msg}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let mut pos = 8;
        let read_u64 = |pos: &mut usize| -> Result<u64> {
            let chunk = bytes.get(*pos..*pos + 8).ok_or_else(|| bad("truncated"))?;
            *pos += 8;
            Ok(u64::from_le_bytes(chunk.try_into().unwrap()))
        };
        let hlen = read_u64(&mut pos)? as usize;
        let hbytes = bytes.get(pos..pos + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(hbytes)?;
        pos += hlen;
        let mut blocks = Vec::with_capacity(4);
        for _ in 0..4 {
            let rows = read_u64(&mut pos)? as usize;
            let cols = read_u64(&mut pos)? as usize;
            let n = rows.checked_mul(cols).ok_or_else(|| bad("block size overflow"))?;
            let body = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated block"))?;
            pos += 8 * n;
            let data = body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blocks.push(DenseMatrix::from_vec(rows, cols, data)?);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let mlp = FusionMlp::from_params(&blocks, header.model.activation)?;
        Ok(Self { header, mlp })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the frozen encoder and checks it against the recorded hash.
    pub fn encoder(&self) -> Result<SequenceEncoder> {
        let enc = self.header.model.encoder()?;
        let hash = enc.backbone.param_hash();
        if hash != self.header.backbone_hash {
            return Err(Error::input(format!(
                "backbone hash {hash} does not match checkpoint {}",
                self.header.backbone_hash
            )));
        }
        Ok(enc)
    }
}
