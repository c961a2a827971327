//! Frozen causal Transformer stack with optional temporal filtering after every
//! layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{DenseMatrix, Tape, Var};
use crate::tfm::{butterworth_gains, ButterworthSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            heads: 2,
            ffn_mult: 4,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TfmSettings {
    pub enabled: bool,
    pub spec: ButterworthSpec,
    /// Output `H + filter(H)` instead of `filter(H)`.
    pub residual: bool,
    /// Filter only the prefix ending at each position.
    pub causal_safe: bool,
}

impl Default for TfmSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            spec: ButterworthSpec::default(),
            residual: false,
            causal_safe: false,
        }
    }
}

impl TfmSettings {
    pub fn on(spec: ButterworthSpec) -> Self {
        Self {
            enabled: true,
            spec,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerParams {
    ln1_g: DenseMatrix,
    ln1_b: DenseMatrix,
    wq: DenseMatrix,
    wk: DenseMatrix,
    wv: DenseMatrix,
    wo: DenseMatrix,
    ln2_g: DenseMatrix,
    ln2_b: DenseMatrix,
    w1: DenseMatrix,
    b1: DenseMatrix,
    w2: DenseMatrix,
    b2: DenseMatrix,
}

impl LayerParams {
    fn blocks(&self) -> [&DenseMatrix; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.wk, &self.wv, &self.wo, &self.ln2_g, &self.ln2_b, &self.w1,
            &self.b1, &self.w2, &self.b2,
        ]
    }
}

struct LayerVars([Var; 12]);

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    layers: Vec<LayerParams>,
}

/// Hidden states `H^(0)..H^(L)`, each `T × d_model`; `H^(0)` is the input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layers: Vec<DenseMatrix>,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        let d = config.d_model;
        if config.n_layers == 0 || d == 0 || config.heads == 0 || !d.is_multiple_of(config.heads) || config.ffn_mult == 0 {
            return Err(Error::input(format!(
                "invalid backbone: {} layers, width {d}, {} heads",
                config.n_layers, config.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let f = d * config.ffn_mult;
        let mut gauss = |r: usize, c: usize, s: f64| {
            let std = s / (r as f64).sqrt();
            DenseMatrix::from_fn(r, c, |_, _| std * rng.sample::<f64, _>(StandardNormal))
        };
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_g: DenseMatrix::from_fn(1, d, |_, _| 1.0),
                ln1_b: DenseMatrix::zeros(1, d),
                wq: gauss(d, d, 1.0),
                wk: gauss(d, d, 1.0),
                wv: gauss(d, d, 1.0),
                wo: gauss(d, d, out_scale),
                ln2_g: DenseMatrix::from_fn(1, d, |_, _| 1.0),
                ln2_b: DenseMatrix::zeros(1, d),
                w1: gauss(d, f, 1.0),
                b1: DenseMatrix::zeros(1, f),
                w2: gauss(f, d, out_scale),
                b2: DenseMatrix::zeros(1, d),
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// SHA-256 over every parameter block, little-endian.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for layer in &self.layers {
            for block in layer.blocks() {
                for v in block.as_slice() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    fn register(&self, tape: &mut Tape) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| LayerVars(l.blocks().map(|b| tape.constant(b.clone()))))
            .collect()
    }

    /// Runs the stack on `x` (`T × d_model`) and returns every layer's output,
    /// starting with `x` itself.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, tfm: &TfmSettings) -> Result<Vec<Var>> {
        let (t, d) = tape.value(x).shape();
        if d != self.d_model() {
            return Err(Error::input(format!("tokens have width {d}, backbone expects {}", self.d_model())));
        }
        if t == 0 {
            return Err(Error::input("empty sequence"));
        }
        let vars = self.register(tape);
        let dh = d / self.config.heads;
        let att_scale = 1.0 / (dh as f64).sqrt();
        let mut outs = vec![x];
        let mut h = x;
        for LayerVars([ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2]) in vars {
            let a = tape.layer_norm(h, ln1_g, ln1_b);
            let q = tape.matmul(a, wq);
            let k = tape.matmul(a, wk);
            let v = tape.matmul(a, wv);
            let mut heads = Vec::with_capacity(self.config.heads);
            for head in 0..self.config.heads {
                let qh = tape.slice_cols(q, head * dh, dh);
                let kh = tape.slice_cols(k, head * dh, dh);
                let vh = tape.slice_cols(v, head * dh, dh);
                let s = tape.matmul_t(qh, kh);
                let s = tape.scale(s, att_scale);
                let p = tape.causal_softmax(s);
                heads.push(tape.matmul(p, vh));
            }
            let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
            let o = tape.matmul(o, wo);
            let h1 = tape.add(h, o);
            let b = tape.layer_norm(h1, ln2_g, ln2_b);
            let f = tape.matmul(b, w1);
            let f = tape.add_row(f, b1);
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2);
            let f = tape.add_row(f, b2);
            let h2 = tape.add(h1, f);
            h = apply_tfm(tape, h2, tfm)?;
            outs.push(h);
        }
        Ok(outs)
    }
}

fn apply_tfm(tape: &mut Tape, h: Var, tfm: &TfmSettings) -> Result<Var> {
    if !tfm.enabled {
        return Ok(h);
    }
    let t = tape.value(h).rows();
    let filtered = if t == 1 {
        h
    } else if tfm.causal_safe {
        let mut rows = Vec::with_capacity(t);
        for end in 0..t {
            if end == 0 {
                rows.push(tape.gather_rows(h, &[0]));
                continue;
            }
            let idx: Vec<usize> = (0..=end).collect();
            let prefix = tape.gather_rows(h, &idx);
            let gains = butterworth_gains(&tfm.spec, end + 1)?.gains;
            let f = tape.spectral_filter(prefix, &gains)?;
            rows.push(tape.gather_rows(f, &[end]));
        }
        tape.concat_rows(&rows)
    } else {
        let gains = butterworth_gains(&tfm.spec, t)?.gains;
        tape.spectral_filter(h, &gains)?
    };
    Ok(if tfm.residual { tape.add(h, filtered) } else { filtered })
}

/// Inner products `h_u · x_j` in candidate order.
pub fn score(user_rep: &[f64], tokens: &DenseMatrix, candidates: &[usize]) -> Vec<f64> {
    candidates
        .iter()
        .map(|&c| crate::numcore::dot(user_rep, tokens.row(c)))
        .collect()
}

/// Frozen backbone plus its filtering mode; tokens come from outside.
#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    pub backbone: Backbone,
    pub tfm: TfmSettings,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    /// Last row of the final layer.
    pub user_rep: Vec<f64>,
    pub trace: Option<LayerTrace>,
}

impl SequenceEncoder {
    pub fn new(backbone: Backbone, tfm: TfmSettings) -> Self {
        Self { backbone, tfm }
    }

    pub fn encode(&self, tokens: &DenseMatrix, sequence: &[usize], capture: bool) -> Result<Encoded> {
        if let Some(&bad) = sequence.iter().find(|&&i| i >= tokens.rows()) {
            return Err(Error::input(format!(
                "item index {bad} outside the {}-item token table",
                tokens.rows()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.constant(tokens.select_rows(sequence));
        let outs = self.backbone.forward_tape(&mut tape, x, &self.tfm)?;
        let last = tape.value(*outs.last().unwrap());
        if !last.is_finite() {
            return Err(Error::numeric("backbone produced non-finite hidden states"));
        }
        let user_rep = last.row(last.rows() - 1).to_vec();
        let trace = capture.then(|| LayerTrace {
            layers: outs.iter().map(|v| tape.value(*v).clone()).collect(),
        });
        Ok(Encoded { user_rep, trace })
    }
}
