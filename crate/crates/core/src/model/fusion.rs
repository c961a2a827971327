//! Two-layer fusion network mapping `[e_id ; e_text]` to backbone tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::embedding::EmbeddingTable;
use crate::numcore::tape::gelu;
use crate::numcore::{DenseMatrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    /// No nonlinearity; only used to build exact identity cases.
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionMlp {
    pub w1: DenseMatrix,
    pub b1: DenseMatrix,
    pub w2: DenseMatrix,
    pub b2: DenseMatrix,
    pub activation: Activation,
}

/// Tape handles for the four MLP parameters, in `FusionMlp::params` order.
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FusionMlp {
    /// Weights drawn from N(0, 1/fan_in), zero biases.
    pub fn new(d_in: usize, hidden: usize, d_out: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r: usize, c: usize| {
            let s = 1.0 / (r as f64).sqrt();
            DenseMatrix::from_fn(r, c, |_, _| s * rng.sample::<f64, _>(StandardNormal))
        };
        let w1 = draw(d_in, hidden);
        let w2 = draw(hidden, d_out);
        Self {
            w1,
            b1: DenseMatrix::zeros(1, hidden),
            w2,
            b2: DenseMatrix::zeros(1, d_out),
            activation,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w2.cols()
    }

    pub fn params(&self) -> [&DenseMatrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut DenseMatrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn from_params(params: &[DenseMatrix], activation: Activation) -> Result<Self> {
        let [w1, b1, w2, b2] = params else {
            return Err(Error::input("fusion MLP needs exactly four parameter blocks"));
        };
        if b1.shape() != (1, w1.cols()) || w2.rows() != w1.cols() || b2.shape() != (1, w2.cols()) {
            return Err(Error::input("fusion MLP parameter shapes are inconsistent"));
        }
        Ok(Self {
            w1: w1.clone(),
            b1: b1.clone(),
            w2: w2.clone(),
            b2: b2.clone(),
            activation,
        })
    }

    pub fn forward(&self, x: &DenseMatrix) -> DenseMatrix {
        let mut h = x.matmul(&self.w1);
        add_bias(&mut h, &self.b1);
        if self.activation == Activation::Gelu {
            h = h.map(gelu);
        }
        let mut out = h.matmul(&self.w2);
        add_bias(&mut out, &self.b2);
        out
    }

    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            b2: tape.param(self.b2.clone()),
        }
    }

    pub fn forward_tape(&self, tape: &mut Tape, vars: MlpVars, x: Var) -> Var {
        let h = tape.matmul(x, vars.w1);
        let mut h = tape.add_row(h, vars.b1);
        if self.activation == Activation::Gelu {
            h = tape.gelu(h);
        }
        let out = tape.matmul(h, vars.w2);
        tape.add_row(out, vars.b2)
    }
}

fn add_bias(m: &mut DenseMatrix, b: &DenseMatrix) {
    for r in 0..m.rows() {
        for (v, bb) in m.row_mut(r).iter_mut().zip(b.row(0)) {
            *v += bb;
        }
    }
}

/// `[e_id ; e_text]` per item, id columns first.
pub fn concat_inputs(id: &EmbeddingTable, text: &EmbeddingTable) -> Result<DenseMatrix> {
    if id.items != text.items {
        return Err(Error::input(format!(
            "id table ({} items) and text table ({} items) use different vocabularies",
            id.n_items(),
            text.n_items()
        )));
    }
    let (di, dt) = (id.dim(), text.dim());
    Ok(DenseMatrix::from_fn(id.n_items(), di + dt, |r, c| {
        if c < di {
            id.vectors[(r, c)]
        } else {
            text.vectors[(r, c - di)]
        }
    }))
}

/// Token table `MLP([e_id ; e_text])`, one row per item.
pub fn fuse(id: &EmbeddingTable, text: &EmbeddingTable, mlp: &FusionMlp) -> Result<DenseMatrix> {
    let x = concat_inputs(id, text)?;
    if x.cols() != mlp.d_in() {
        return Err(Error::input(format!(
            "MLP expects {} input columns, tables provide {}",
            mlp.d_in(),
            x.cols()
        )));
    }
    Ok(mlp.forward(&x))
}
