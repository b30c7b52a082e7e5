//! Classifier heads, prediction aggregation and the adversarial domain
//! discriminators.

use rand::Rng;

use crate::autodiff::{softmax_into, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Matrix;

/// The three decomposed streams, in the fixed order used everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    RgbUnique,
    FlowUnique,
    Shared,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::RgbUnique, Stream::FlowUnique, Stream::Shared];

    pub fn as_str(self) -> &'static str {
        match self {
            Stream::RgbUnique => "rgb-unique",
            Stream::FlowUnique => "flow-unique",
            Stream::Shared => "shared",
        }
    }
}

/// Elementwise mean of the two modalities' shared features.
pub fn fuse_shared(tape: &mut Tape, rgb: Var, flow: Var) -> Result<Var> {
    let sum = tape.add(rgb, flow)?;
    Ok(tape.scale(sum, 0.5))
}

/// `head(TAP(features))`: `(B*seg) x d` to `B x C` logits.
pub fn classify(s: &mut Session, features: Var, head: &Linear, seg: usize) -> Result<Var> {
    let pooled = s.tape.segment_mean(features, seg)?;
    head.forward(s, pooled)
}

/// Row-wise mean of the softmax distributions of several `B x C` logit
/// matrices.
pub fn mean_probabilities(logits: &[&Matrix]) -> Result<Matrix> {
    let (&first, _) = logits
        .split_first()
        .ok_or_else(|| Error::Config("no logits to aggregate".into()))?;
    let mut mean = Matrix::zeros(first.rows(), first.cols());
    let mut probs = vec![0.0; first.cols()];
    for l in logits {
        if l.shape() != first.shape() {
            return Err(Error::dim("aggregate_predictions", first.shape(), l.shape()));
        }
        for r in 0..l.rows() {
            softmax_into(l.row(r), &mut probs);
            for (m, p) in mean.row_mut(r).iter_mut().zip(&probs) {
                *m += p / logits.len() as f64;
            }
        }
    }
    Ok(mean)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per row: argmax of the mean head probability.
pub fn aggregate_predictions(logits: &[&Matrix]) -> Result<Vec<usize>> {
    let mean = mean_probabilities(logits)?;
    Ok((0..mean.rows()).map(|r| argmax(mean.row(r))).collect())
}

/// Mean of the per-head cross-entropies.
pub fn classification_loss(tape: &mut Tape, logits: &[Var], labels: &[usize]) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::Config("no heads to train".into()));
    }
    let ces = logits
        .iter()
        .map(|&l| tape.cross_entropy(l, labels))
        .collect::<Result<Vec<_>>>()?;
    let sum = tape.add_all(&ces)?;
    Ok(tape.scale(sum, 1.0 / logits.len() as f64))
}

/// The three stream classifiers `psi_u^r`, `psi_u^o`, `psi_s`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamHeads {
    pub heads: [Linear; 3],
}

impl StreamHeads {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, classes: usize, std: f64, rng: &mut R) -> Self {
        StreamHeads {
            heads: Stream::ALL.map(|st| Linear::new(store, &format!("head.{}", st.as_str()), d, classes, std, true, rng)),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.heads.iter().flat_map(|h| h.ids()).collect()
    }

    /// Logits for each stream, in [`Stream::ALL`] order.
    pub fn logits(&self, s: &mut Session, streams: [Var; 3], seg: usize) -> Result<[Var; 3]> {
        let mut out = streams;
        for (o, (h, &x)) in out.iter_mut().zip(self.heads.iter().zip(&streams)) {
            *o = classify(s, x, h, seg)?;
        }
        Ok(out)
    }
}

/// Two-layer domain classifier `d -> hidden -> 2` with a ReLU in between.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Discriminator {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Discriminator {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, std, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, 2, std, true, rng),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.fc1.ids().into_iter().chain(self.fc2.ids()).collect()
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.tape.relu(h);
        self.fc2.forward(s, h)
    }
}

/// For each stream: TAP, gradient reversal with `lambda`, discriminator,
/// domain cross-entropy (batch mean). Returns the sum over streams.
///
/// `domains` holds one 0/1 tag per video.
pub fn adversarial_alignment_loss(
    s: &mut Session,
    streams: &[Var],
    discriminators: &[Discriminator],
    domains: &[usize],
    lambda: f64,
    seg: usize,
) -> Result<Var> {
    if streams.len() != discriminators.len() || streams.is_empty() {
        return Err(Error::Config(format!(
            "{} streams for {} discriminators",
            streams.len(),
            discriminators.len()
        )));
    }
    let mut terms = Vec::with_capacity(streams.len());
    for (&x, disc) in streams.iter().zip(discriminators) {
        let pooled = s.tape.segment_mean(x, seg)?;
        let reversed = s.tape.grad_reverse(pooled, lambda);
        let logits = disc.forward(s, reversed)?;
        terms.push(s.tape.cross_entropy(logits, domains)?);
    }
    s.tape.add_all(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fuse_shared_cases() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Matrix::random_normal(3, 2, 1.0, &mut rng);
        let y = Matrix::random_normal(3, 2, 1.0, &mut rng);
        let (vx, vy, vn) = (tape.constant(x.clone()), tape.constant(y.clone()), tape.constant(x.scale(-1.0)));
        let same = fuse_shared(&mut tape, vx, vx).unwrap();
        assert_eq!(tape.value(same), &x);
        let zero = fuse_shared(&mut tape, vx, vn).unwrap();
        assert!(tape.value(zero).data().iter().all(|&v| v == 0.0));
        let f = fuse_shared(&mut tape, vx, vy).unwrap();
        let expect = x.zip_map(&y, |a, b| (a + b) / 2.0);
        assert!(tape.value(f).max_abs_diff(&expect) < 1e-15);
        let bad = tape.constant(Matrix::zeros(2, 2));
        assert!(fuse_shared(&mut tape, vx, bad).is_err());
    }

    #[test]
    fn classify_is_pool_then_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let head = Linear::new(&mut store, "h", 3, 4, 1.0, true, &mut rng);
        *store.value_mut(head.b) = Matrix::random_normal(1, 4, 1.0, &mut rng);
        let f = Matrix::random_normal(6, 3, 1.0, &mut rng);
        let mut s = Session::new(&store);
        let x = s.tape.constant(f.clone());
        let logits = classify(&mut s, x, &head, 3).unwrap();
        for v in 0..2 {
            let pooled = f.row_block(3 * v, 3).mean_rows();
            let mut expect = pooled.matmul(store.value(head.w)).unwrap();
            expect.add_assign(store.value(head.b));
            assert!(s.tape.value(logits).row_block(v, 1).max_abs_diff(&expect) < 1e-12);
        }

        let zero_store = {
            let mut z = ParamStore::new();
            Linear::new(&mut z, "h", 3, 4, 0.0, true, &mut rng);
            z
        };
        let mut s = Session::new(&zero_store);
        let x = s.tape.constant(f);
        let logits = classify(&mut s, x, &head, 3).unwrap();
        assert!(s.tape.value(logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregation_uses_probability_mean() {
        // Two heads lean to class 1 at 0.6, one is confident in class 2 at 0.9.
        let p = |v: [f64; 3]| Matrix::row_vector(&v.map(f64::ln));
        let a = p([0.2, 0.6, 0.2]);
        let c = p([0.05, 0.05, 0.9]);
        // mean = [0.15, 0.4167, 0.4333]: class 2 wins although it has one vote.
        assert_eq!(aggregate_predictions(&[&a, &a, &c]).unwrap(), vec![2]);
        let t = Matrix::row_vector(&[1.0, 1.0, 0.0]);
        assert_eq!(aggregate_predictions(&[&t, &t, &t]).unwrap(), vec![0]);
        let shifted = t.map(|x| x + 100.0);
        let base = mean_probabilities(&[&t, &a, &c]).unwrap();
        assert!(base.max_abs_diff(&mean_probabilities(&[&shifted, &a, &c]).unwrap()) < 1e-15);
    }

    #[test]
    fn classification_loss_reference_values() {
        let mut tape = Tape::new();
        let u = tape.constant(Matrix::zeros(2, 5));
        let l = classification_loss(&mut tape, &[u, u, u], &[0, 3]).unwrap();
        assert!((tape.scalar(l) - 5f64.ln()).abs() < 1e-12);

        let mut m = Matrix::zeros(1, 3);
        m.set(0, 1, 50.0);
        let c = tape.constant(m);
        let l = classification_loss(&mut tape, &[c, c, c], &[1]).unwrap();
        assert!(tape.scalar(l) < 1e-8);
        assert!(classification_loss(&mut tape, &[c], &[3]).is_err());
    }

    #[test]
    fn zero_discriminator_is_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let discs: Vec<Discriminator> = (0..3)
            .map(|i| Discriminator::new(&mut store, &format!("d{i}"), 4, 2, 0.0, &mut rng))
            .collect();
        let mut s = Session::new(&store);
        let f: Vec<Var> = (0..3).map(|_| s.tape.constant(Matrix::random_normal(8, 4, 1.0, &mut rng))).collect();
        let l = adversarial_alignment_loss(&mut s, &f, &discs, &[0, 1, 0, 1], 1.0, 2).unwrap();
        assert!((s.tape.scalar(l) - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn reversal_scales_feature_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let disc = Discriminator::new(&mut store, "d", 3, 4, 0.8, &mut rng);
        let x0 = Matrix::random_normal(4, 3, 1.0, &mut rng);
        let feature_grad = |lambda: f64| {
            let mut s = Session::new(&store);
            let x = s.tape.var(x0.clone());
            let l = adversarial_alignment_loss(&mut s, &[x], &[disc], &[0, 1], lambda, 2).unwrap();
            s.tape.backward(l).unwrap();
            let w1 = s.p(disc.fc1.w);
            let disc_grad = s.tape.grad(w1).unwrap().clone();
            (s.tape.grad(x).unwrap().clone(), disc_grad)
        };
        let (g_plain, d_plain) = feature_grad(-1.0); // reversal by -1 is the identity map
        let (g_rev, d_rev) = feature_grad(1.0);
        let (g_half, _) = feature_grad(0.5);
        let (g_zero, _) = feature_grad(0.0);
        assert!(g_rev.max_abs_diff(&g_plain.scale(-1.0)) < 1e-15);
        assert!(g_half.max_abs_diff(&g_plain.scale(-0.5)) < 1e-15);
        assert!(g_zero.data().iter().all(|&v| v == 0.0));
        // The discriminator itself still descends.
        assert_eq!(d_rev, d_plain);
    }
}
