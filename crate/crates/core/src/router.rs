//! Decomposition routers.
//!
//! Three single-layer sub-routers produce simplex weights over the `N`
//! decomposers of a site:
//!
//! ```text
//! w_u^m = softmax(R_u^m(TAP(z^m)))            m in {rgb, flow}
//! w_s   = softmax(R_s(TAP([z^r ; z^o])))
//! ```
//!
//! Unique streams merge with `w_u^m`; both shared streams merge with the same
//! `w_s`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Matrix;
use crate::Modality;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Router {
    pub unique: [Linear; 2],
    pub shared: Linear,
    pub n: usize,
}

/// Per-video router outputs on the tape, each `B x N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RouterWeights {
    pub unique: [Var; 2],
    pub shared: Var,
}

impl RouterWeights {
    /// `[w_u^r ; w_u^o ; w_s]`, `B x 3N`. This order is the layout of the
    /// class bank.
    pub fn concat(&self, tape: &mut Tape) -> Result<Var> {
        let u = tape.concat_cols(self.unique[0], self.unique[1])?;
        tape.concat_cols(u, self.shared)
    }
}

impl Router {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, n: usize, std: f64, rng: &mut R) -> Self {
        let unique = Modality::ALL.map(|m| Linear::new(store, &format!("{name}.u.{}", m.as_str()), d, n, std, true, rng));
        let shared = Linear::new(store, &format!("{name}.s"), 2 * d, n, std, true, rng);
        Router { unique, shared, n }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.unique.iter().chain([&self.shared]).flat_map(|l| l.ids()).collect()
    }

    /// Routes a site whose unique and shared decomposers see different
    /// streams: `unique[m]` feeds `R_u^m`, `shared` feeds `R_s`.
    pub fn route(&self, s: &mut Session, unique: [Var; 2], shared: [Var; 2], seg: usize) -> Result<RouterWeights> {
        let mut w_u = [unique[0]; 2];
        for m in Modality::ALL {
            let pooled = s.tape.segment_mean(unique[m.index()], seg)?;
            let logits = self.unique[m.index()].forward(s, pooled)?;
            w_u[m.index()] = s.tape.softmax(logits)?;
        }
        let joint = s.tape.concat_cols(shared[0], shared[1])?;
        let pooled = s.tape.segment_mean(joint, seg)?;
        let logits = self.shared.forward(s, pooled)?;
        let w_s = s.tape.softmax(logits)?;
        Ok(RouterWeights {
            unique: w_u,
            shared: w_s,
        })
    }

    /// Single-stream form: both sub-router families see `[z_r, z_o]`.
    pub fn route_pair(&self, s: &mut Session, z: [Var; 2], seg: usize) -> Result<RouterWeights> {
        self.route(s, z, z, seg)
    }
}

/// Convex combination of one modality's decomposer outputs.
pub fn merge_unique(tape: &mut Tape, outputs: &[Var], w: Var, seg: usize) -> Result<Var> {
    tape.merge(outputs, w, seg)
}

/// Merges both modalities' outputs with the one shared weight vector.
pub fn merge_shared(tape: &mut Tape, outputs: [&[Var]; 2], w_s: Var, seg: usize) -> Result<(Var, Var)> {
    Ok((tape.merge(outputs[0], w_s, seg)?, tape.merge(outputs[1], w_s, seg)?))
}

/// `<w_u^r, w_s> + <w_u^o, w_s>` averaged over the batch.
pub fn router_decorrelation_loss(tape: &mut Tape, w: &RouterWeights) -> Result<Var> {
    let rows = tape.shape(w.shared).0 as f64;
    let r = tape.mul(w.unique[0], w.shared)?;
    let o = tape.mul(w.unique[1], w.shared)?;
    let both = tape.add(r, o)?;
    let total = tape.sum_all(both);
    Ok(tape.scale(total, 1.0 / rows))
}

/// Per-class statistics of source router outputs for one router site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeightBank {
    pub width: usize,
    pub momentum: f64,
    /// Running arithmetic mean instead of the exponential one.
    pub exact: bool,
    means: Vec<Option<Vec<f64>>>,
    counts: Vec<u64>,
    /// Times a target sample's class had no source statistics yet.
    pub warnings: u64,
}

impl ClassWeightBank {
    pub fn new(classes: usize, width: usize, momentum: f64, exact: bool) -> Self {
        ClassWeightBank {
            width,
            momentum,
            exact,
            means: vec![None; classes],
            counts: vec![0; classes],
            warnings: 0,
        }
    }

    /// Rebuilds a bank from saved per-class statistics.
    pub fn restore(
        width: usize,
        momentum: f64,
        exact: bool,
        means: Vec<Option<Vec<f64>>>,
        counts: Vec<u64>,
        warnings: u64,
    ) -> Result<Self> {
        if means.len() != counts.len() || means.iter().flatten().any(|m| m.len() != width) {
            return Err(Error::State("inconsistent class-bank statistics".into()));
        }
        Ok(ClassWeightBank {
            width,
            momentum,
            exact,
            means,
            counts,
            warnings,
        })
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn mean(&self, class: usize) -> Option<&[f64]> {
        self.means.get(class)?.as_deref()
    }

    pub fn count(&self, class: usize) -> u64 {
        self.counts.get(class).copied().unwrap_or(0)
    }

    /// Folds one source observation into its class mean. The first
    /// observation sets the mean.
    pub fn update(&mut self, w: &[f64], class: usize) -> Result<()> {
        if class >= self.means.len() {
            return Err(Error::Index {
                index: class,
                len: self.means.len(),
            });
        }
        if w.len() != self.width {
            return Err(Error::dim("class_bank", (1, self.width), (1, w.len())));
        }
        self.counts[class] += 1;
        let n = self.counts[class];
        match &mut self.means[class] {
            slot @ None => *slot = Some(w.to_vec()),
            Some(mean) => {
                let keep = if self.exact {
                    (n - 1) as f64 / n as f64
                } else {
                    self.momentum
                };
                for (m, &x) in mean.iter_mut().zip(w) {
                    *m = keep * *m + (1.0 - keep) * x;
                }
            }
        }
        Ok(())
    }

    /// Folds every row of a `rows x width` matrix of observations.
    pub fn update_rows(&mut self, w: &Matrix, labels: &[usize]) -> Result<()> {
        for (r, &y) in labels.iter().enumerate() {
            self.update(w.row(r), y)?;
        }
        Ok(())
    }
}

/// Squared distance between target router outputs and the source class means,
/// summed over the given rows and divided by their count.
///
/// `w` is the `B x 3N` concatenation, `rows` the target rows with their
/// labels. Bank means enter as constants. Rows whose class has no source
/// statistics contribute 0 and bump the bank's warning counter.
pub fn activation_consistency_loss(
    tape: &mut Tape,
    w: Var,
    rows: &[(usize, usize)],
    bank: &mut ClassWeightBank,
) -> Result<Var> {
    let width = tape.shape(w).1;
    if width != bank.width {
        return Err(Error::dim("activation_consistency", (1, bank.width), tape.shape(w)));
    }
    let mut warm = Vec::with_capacity(rows.len());
    let mut targets = Vec::with_capacity(rows.len() * width);
    for &(row, label) in rows {
        match bank.mean(label) {
            Some(mean) => {
                warm.push(row);
                targets.extend_from_slice(mean);
            }
            None => bank.warnings += 1,
        }
    }
    if warm.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let picked = tape.gather_rows(w, &warm)?;
    let means = tape.constant(Matrix::from_vec(warm.len(), width, targets)?);
    let diff = tape.sub(picked, means)?;
    let sq = tape.sq_norm_rows(diff);
    let total = tape.sum_all(sq);
    Ok(tape.scale(total, 1.0 / rows.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights(tape: &mut Tape, r: &[f64], o: &[f64], s: &[f64]) -> RouterWeights {
        RouterWeights {
            unique: [tape.constant(Matrix::row_vector(r)), tape.constant(Matrix::row_vector(o))],
            shared: tape.constant(Matrix::row_vector(s)),
        }
    }

    #[test]
    fn route_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let router = Router::new(&mut store, "r", 3, 4, 0.7, &mut rng);
        for id in router.ids() {
            let (r, c) = store.value(id).shape();
            *store.value_mut(id) = Matrix::random_normal(r, c, 0.7, &mut rng);
        }
        let zr = Matrix::random_normal(4, 3, 1.0, &mut rng);
        let zo = Matrix::random_normal(4, 3, 1.0, &mut rng);
        let mut s = Session::new(&store);
        let (vr, vo) = (s.tape.constant(zr.clone()), s.tape.constant(zo.clone()));
        let w = router.route_pair(&mut s, [vr, vo], 2).unwrap();

        let oracle = |x: &[f64], lin: &Linear| -> Vec<f64> {
            let (wm, b) = (store.value(lin.w), store.value(lin.b));
            let logits: Vec<f64> = (0..wm.cols())
                .map(|j| b.get(0, j) + x.iter().enumerate().map(|(i, v)| v * wm.get(i, j)).sum::<f64>())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            logits.iter().map(|l| l.exp() / z).collect()
        };
        for video in 0..2 {
            let mr = zr.row_block(2 * video, 2).mean_rows();
            let mo = zo.row_block(2 * video, 2).mean_rows();
            let joint: Vec<f64> = mr.data().iter().chain(mo.data()).copied().collect();
            let expect = [
                oracle(mr.data(), &router.unique[0]),
                oracle(mo.data(), &router.unique[1]),
                oracle(&joint, &router.shared),
            ];
            let got = [w.unique[0], w.unique[1], w.shared].map(|v| s.tape.value(v).row(video).to_vec());
            for (g, e) in got.iter().zip(&expect) {
                for (a, b) in g.iter().zip(e) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_router_is_uniform_and_pooling_ignores_clip_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let router = Router::new(&mut store, "r", 3, 5, 0.0, &mut rng);
        let z = Matrix::random_normal(3, 3, 1.0, &mut rng);
        let mut s = Session::new(&store);
        let v = s.tape.constant(z);
        let w = router.route_pair(&mut s, [v, v], 3).unwrap();
        for x in [w.unique[0], w.unique[1], w.shared] {
            assert!(s.tape.value(x).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn merges_select_and_share() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let outs: Vec<Var> = (0..3).map(|_| tape.constant(Matrix::random_normal(2, 2, 1.0, &mut rng))).collect();
        let one_hot = tape.constant(Matrix::row_vector(&[0.0, 1.0, 0.0]));
        let m = merge_unique(&mut tape, &outs, one_hot, 2).unwrap();
        assert_eq!(tape.value(m), tape.value(outs[1]));

        let w = [0.2, 0.5, 0.3];
        let wv = tape.constant(Matrix::row_vector(&w));
        let m = merge_unique(&mut tape, &outs, wv, 2).unwrap();
        let mut expect = Matrix::zeros(2, 2);
        for (i, &o) in outs.iter().enumerate() {
            expect.axpy(w[i], tape.value(o));
        }
        assert!(tape.value(m).max_abs_diff(&expect) < 1e-12);

        let same: Vec<Var> = vec![outs[0]; 3];
        let (a, b) = merge_shared(&mut tape, [&same, &same], wv, 2).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn router_decorrelation_reference_values() {
        let mut tape = Tape::new();
        let w = weights(&mut tape, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]);
        let l = router_decorrelation_loss(&mut tape, &w).unwrap();
        assert_eq!(tape.scalar(l), 0.0);

        let u = [1.0 / 6.0; 6];
        let w = weights(&mut tape, &u, &u, &u);
        let l = router_decorrelation_loss(&mut tape, &w).unwrap();
        assert!((tape.scalar(l) - 1.0 / 3.0).abs() < 1e-12);

        let w = weights(&mut tape, &[1.0, 0.0], &[0.5, 0.5], &[1.0, 0.0]);
        let l = router_decorrelation_loss(&mut tape, &w).unwrap();
        assert!(tape.scalar(l) >= 1.0);
    }

    #[test]
    fn bank_ema_and_exact_means() {
        let mut bank = ClassWeightBank::new(2, 2, 0.9, false);
        bank.update(&[1.0, 0.0], 0).unwrap();
        assert_eq!(bank.mean(0).unwrap(), &[1.0, 0.0]);
        bank.update(&[0.0, 1.0], 0).unwrap();
        let m = bank.mean(0).unwrap();
        assert!((m[0] - 0.9).abs() < 1e-15 && (m[1] - 0.1).abs() < 1e-15);
        assert_eq!(bank.count(0), 2);
        assert!(bank.mean(1).is_none());

        let mut exact = ClassWeightBank::new(1, 1, 0.9, true);
        for x in [1.0, 2.0, 6.0] {
            exact.update(&[x], 0).unwrap();
        }
        assert!((exact.mean(0).unwrap()[0] - 3.0).abs() < 1e-12);
        assert!(exact.update(&[1.0], 3).is_err());
    }

    #[test]
    fn consistency_reference_values_and_cold_classes() {
        let mut bank = ClassWeightBank::new(3, 6, 0.9, false);
        bank.update(&[0.5; 6], 1).unwrap();
        let mut tape = Tape::new();
        let w = tape.constant(Matrix::from_rows(&[&[1.0, 0.0, 0.0, 1.0, 1.0, 0.0], &[0.5; 6]]));
        let l = activation_consistency_loss(&mut tape, w, &[(0, 1)], &mut bank).unwrap();
        assert!((tape.scalar(l) - 1.5).abs() < 1e-12);
        let l = activation_consistency_loss(&mut tape, w, &[(1, 1)], &mut bank).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        assert_eq!(bank.warnings, 0);
        let l = activation_consistency_loss(&mut tape, w, &[(0, 2)], &mut bank).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        assert_eq!(bank.warnings, 1);
    }

    #[test]
    fn consistency_does_not_touch_the_bank() {
        let mut bank = ClassWeightBank::new(1, 2, 0.9, false);
        bank.update(&[0.3, 0.7], 0).unwrap();
        let before = bank.clone();
        let mut tape = Tape::new();
        let w = tape.var(Matrix::row_vector(&[0.9, 0.1]));
        let l = activation_consistency_loss(&mut tape, w, &[(0, 0)], &mut bank).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(bank, before);
        let g = tape.grad(w).unwrap();
        assert!((g.get(0, 0) - 2.0 * 0.6).abs() < 1e-12);
    }
}
