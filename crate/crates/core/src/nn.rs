//! Small parameterised layers shared by the model components.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Matrix;

/// `x * W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            Matrix::random_normal(fan_in, fan_out, std, rng),
            trainable,
        );
        let b = store.add(format!("{name}.b"), Matrix::zeros(1, fan_out), trainable);
        Linear { w, b }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.tape.affine(x, w, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, trainable: bool) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.g"), Matrix::filled(1, width, 1.0), trainable),
            bias: store.add(format!("{name}.b"), Matrix::zeros(1, width), trainable),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gain), s.p(self.bias));
        s.tape.layer_norm(x, g, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}
