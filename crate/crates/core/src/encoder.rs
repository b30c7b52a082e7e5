//! Per-modality Transformer base model.
//!
//! Each layer computes
//!
//! ```text
//! z = MSA(LN(f)) + f
//! f' = MLP(LN(z)) + z,     MLP(y) = W2 * GELU(W1 * y + b1) + b2
//! ```
//!
//! The post-attention activation `z` and the residual-free MLP sub-path are
//! exposed separately because the low-rank decomposers hook in between them.

use rand::Rng;

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Matrix;
use crate::Modality;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    /// Query/key/value projections, `d x (heads * head_dim)`; head `h` owns
    /// column block `h`.
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// Output projection `(heads * head_dim) x d`.
    pub out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderLayer {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = Vec::with_capacity(13);
        v.extend(self.ln1.ids());
        v.extend([self.wq, self.wk, self.wv]);
        v.extend(self.out.ids());
        v.extend(self.ln2.ids());
        v.extend(self.fc1.ids());
        v.extend(self.fc2.ids());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub modality: Modality,
    pub input: Linear,
    pub layers: Vec<EncoderLayer>,
    pub heads: usize,
    pub clips: usize,
    positional: Option<Matrix>,
}

/// Fixed sinusoidal position table, `clips x d`.
fn sinusoidal(clips: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(clips, d);
    for t in 0..clips {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = t as f64 * rate;
            m.set(t, i, if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    m
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, modality: Modality, rng: &mut R) -> Self {
        let name = format!("enc.{}", modality.as_str());
        let std = cfg.init_std;
        let inner = cfg.heads * cfg.head_dim;
        let input = Linear::new(store, &format!("{name}.in"), cfg.d_in, cfg.d, std, true, rng);
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.l{l}");
                EncoderLayer {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), cfg.d, true),
                    wq: store.add(format!("{p}.wq"), Matrix::random_normal(cfg.d, inner, std, rng), true),
                    wk: store.add(format!("{p}.wk"), Matrix::random_normal(cfg.d, inner, std, rng), true),
                    wv: store.add(format!("{p}.wv"), Matrix::random_normal(cfg.d, inner, std, rng), true),
                    out: Linear::new(store, &format!("{p}.wo"), inner, cfg.d, std, true, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), cfg.d, true),
                    fc1: Linear::new(store, &format!("{p}.fc1"), cfg.d, cfg.d_ff, std, true, rng),
                    fc2: Linear::new(store, &format!("{p}.fc2"), cfg.d_ff, cfg.d, std, true, rng),
                }
            })
            .collect();
        Encoder {
            modality,
            input,
            layers,
            heads: cfg.heads,
            clips: cfg.clips,
            positional: cfg.positional_encoding.then(|| sinusoidal(cfg.clips, cfg.d)),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.input.ids().to_vec();
        for l in &self.layers {
            v.extend(l.ids());
        }
        v
    }

    /// Excludes every base-model parameter (input projection included) from
    /// later updates. Idempotent.
    pub fn freeze(&self, store: &mut ParamStore) {
        for id in self.ids() {
            store.set_trainable(id, false);
        }
    }

    fn layer(&self, l: usize) -> Result<&EncoderLayer> {
        self.layers.get(l).ok_or(Error::Index {
            index: l + 1,
            len: self.layers.len(),
        })
    }

    /// Projects stacked raw features `(B*T) x d_in` to `(B*T) x d`.
    pub fn embed(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.input.forward(s, x)?;
        match &self.positional {
            None => Ok(h),
            Some(table) => {
                let rows = s.tape.shape(h).0;
                if rows % self.clips != 0 {
                    return Err(Error::dim("positional", (rows, 0), (self.clips, 0)));
                }
                let tiles: Vec<&Matrix> = (0..rows / self.clips).map(|_| table).collect();
                let pe = s.tape.constant(Matrix::vstack(&tiles)?);
                s.tape.add(h, pe)
            }
        }
    }

    /// `z = MSA(LN(f)) + f` for layer `l`.
    pub fn msa(&self, s: &mut Session, l: usize, f: Var) -> Result<Var> {
        let layer = self.layer(l)?;
        let x = layer.ln1.forward(s, f)?;
        let (wq, wk, wv) = (s.p(layer.wq), s.p(layer.wk), s.p(layer.wv));
        let q = s.tape.matmul(x, wq)?;
        let k = s.tape.matmul(x, wk)?;
        let v = s.tape.matmul(x, wv)?;
        let heads = s.tape.attention(q, k, v, self.clips, self.heads)?;
        let o = layer.out.forward(s, heads)?;
        s.tape.add(o, f)
    }

    /// The residual-free MLP sub-path `W2 * GELU(W1 * LN(z) + b1) + b2`.
    pub fn mlp(&self, s: &mut Session, l: usize, z: Var) -> Result<Var> {
        let layer = self.layer(l)?;
        let x = layer.ln2.forward(s, z)?;
        let h = layer.fc1.forward(s, x)?;
        let h = s.tape.gelu(h);
        layer.fc2.forward(s, h)
    }

    pub fn layer_forward(&self, s: &mut Session, l: usize, f: Var) -> Result<Var> {
        let z = self.msa(s, l, f)?;
        let m = self.mlp(s, l, z)?;
        s.tape.add(m, z)
    }

    /// Raw features to final-layer features, `(B*T) x d`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut f = self.embed(s, x)?;
        for l in 0..self.layers.len() {
            f = self.layer_forward(s, l, f)?;
        }
        Ok(f)
    }
}
