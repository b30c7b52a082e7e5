//! Low-rank decomposer banks with progressive cross-modal sharing.
//!
//! Decomposer `i` (1-based) of modality `m` mixes its modality-specific pair
//! with a pair shared by both modalities:
//!
//! ```text
//! a_i   = (N - i) / (N - 1)
//! B_mix = a_i * B^m_i + (1 - a_i) * B^_i
//! A_mix = a_i * A^m_i + (1 - a_i) * A^_i
//! clip:  E_i(z) = z * B_mix * A_mix            + MLP(z)     B: d x r, A: r x d
//! video: E_i(z) = (z^T * B_mix * A_mix^T)^T    + MLP(z)     B: T x r, A: T x r
//! ```
//!
//! The video form is the `T x T` clip-mixing matrix `A_mix * B_mix^T` applied
//! to each video. `MLP` is the frozen base-layer MLP; callers pass its output
//! in so that it is computed once per stream rather than once per decomposer.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Matrix;
use crate::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Clip,
    Video,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Clip => "clip",
            Level::Video => "video",
        }
    }
}

/// One `(B, A)` low-rank pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LowRankPair {
    pub b: ParamId,
    pub a: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecomposerBank {
    pub level: Level,
    pub n: usize,
    pub rank: usize,
    /// `d` at clip level, `T` at video level.
    pub width: usize,
    /// Indexed by `[modality][i - 1]`.
    pub specific: [Vec<LowRankPair>; 2],
    /// Indexed by `i - 1`.
    pub shared: Vec<LowRankPair>,
}

/// Progressive-sharing coefficient for 1-based decomposer `i` of `n`.
pub fn alpha(i: usize, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::Config(format!("decomposer count must be at least 2, got {n}")));
    }
    if i == 0 || i > n {
        return Err(Error::Index { index: i, len: n });
    }
    Ok((n - i) as f64 / (n - 1) as f64)
}

impl DecomposerBank {
    /// B-side matrices start at zero so the low-rank delta is zero until
    /// trained; A-side matrices are normal with `init_std`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        level: Level,
        n: usize,
        rank: usize,
        width: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        alpha(1, n)?;
        let a_shape = match level {
            Level::Clip => (rank, width),
            Level::Video => (width, rank),
        };
        let mut pair = |store: &mut ParamStore, tag: &str, i: usize| LowRankPair {
            b: store.add(format!("{name}.{tag}.{i}.b"), Matrix::zeros(width, rank), true),
            a: store.add(
                format!("{name}.{tag}.{i}.a"),
                Matrix::random_normal(a_shape.0, a_shape.1, init_std, rng),
                true,
            ),
        };
        let mut specific: [Vec<LowRankPair>; 2] = [Vec::with_capacity(n), Vec::with_capacity(n)];
        let mut shared = Vec::with_capacity(n);
        for i in 1..=n {
            for m in Modality::ALL {
                specific[m.index()].push(pair(store, m.as_str(), i));
            }
            shared.push(pair(store, "shared", i));
        }
        Ok(DecomposerBank {
            level,
            n,
            rank,
            width,
            specific,
            shared,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.specific
            .iter()
            .flatten()
            .chain(&self.shared)
            .flat_map(|p| [p.b, p.a])
            .collect()
    }

    pub fn alpha(&self, i: usize) -> Result<f64> {
        alpha(i, self.n)
    }

    /// `(B_mix, A_mix)` for decomposer `i`. At the endpoints the unused
    /// side is skipped entirely, so it cannot influence the result.
    pub fn mixed(&self, s: &mut Session, m: Modality, i: usize) -> Result<(Var, Var)> {
        let a = self.alpha(i)?;
        let own = self.specific[m.index()][i - 1];
        let shared = self.shared[i - 1];
        let mix = |s: &mut Session, x: ParamId, y: ParamId| -> Result<Var> {
            if a == 1.0 {
                Ok(s.p(x))
            } else if a == 0.0 {
                Ok(s.p(y))
            } else {
                let (vx, vy) = (s.p(x), s.p(y));
                let sx = s.tape.scale(vx, a);
                let sy = s.tape.scale(vy, 1.0 - a);
                s.tape.add(sx, sy)
            }
        };
        let b = mix(s, own.b, shared.b)?;
        let a = mix(s, own.a, shared.a)?;
        Ok((b, a))
    }

    /// The low-rank term of decomposer `i` on stacked `(B*T) x d` input.
    pub fn delta(&self, s: &mut Session, z: Var, m: Modality, i: usize) -> Result<Var> {
        let (b, a) = self.mixed(s, m, i)?;
        low_rank_delta(&mut s.tape, self.level, z, b, a)
    }

    /// `E_i(z) = delta_i(z) + mlp`, where `mlp` is the frozen MLP term of `z`.
    pub fn decompose(&self, s: &mut Session, z: Var, mlp: Var, m: Modality, i: usize) -> Result<Var> {
        let d = self.delta(s, z, m, i)?;
        s.tape.add(d, mlp)
    }

    /// All `N` decomposer outputs for one stream.
    pub fn decompose_all(&self, s: &mut Session, z: Var, mlp: Var, m: Modality) -> Result<Vec<Var>> {
        (1..=self.n).map(|i| self.decompose(s, z, mlp, m, i)).collect()
    }
}

/// Low-rank term for already mixed matrices.
pub fn low_rank_delta(tape: &mut Tape, level: Level, z: Var, b: Var, a: Var) -> Result<Var> {
    match level {
        Level::Clip => {
            let zb = tape.matmul(z, b)?;
            tape.matmul(zb, a)
        }
        Level::Video => {
            let t = tape.shape(b).0;
            if tape.shape(a).0 != t {
                return Err(Error::dim("video_decompose", tape.shape(a), tape.shape(b)));
            }
            let bt = tape.transpose(b);
            let mixing = tape.matmul(a, bt)?;
            tape.segment_left_mul(mixing, z, t)
        }
    }
}

/// Sum over modalities and pairs `i < j` of the cosine similarity between
/// flattened per-video decomposer outputs, averaged over the batch.
///
/// `outputs[m]` holds the `N` outputs of modality `m`, each `(B*seg) x d`.
pub fn decorrelation_loss(tape: &mut Tape, outputs: &[Vec<Var>], seg: usize) -> Result<Var> {
    let mut terms = Vec::new();
    for list in outputs {
        for i in 0..list.len() {
            for j in i + 1..list.len() {
                terms.push(tape.segment_cosine(list[i], list[j], seg)?);
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::Config("decorrelation loss needs at least two outputs".into()));
    }
    let per_video = tape.add_all(&terms)?;
    Ok(tape.mean_all(per_video))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(level: Level, n: usize, rank: usize, width: usize, seed: u64) -> (ParamStore, DecomposerBank) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bank = DecomposerBank::new(&mut store, "dec", level, n, rank, width, 0.5, &mut rng).unwrap();
        // Non-zero B so that every matrix matters.
        for p in bank.specific.iter().flatten().chain(&bank.shared) {
            let (r, c) = store.value(p.b).shape();
            *store.value_mut(p.b) = Matrix::random_normal(r, c, 0.5, &mut rng);
        }
        (store, bank)
    }

    fn delta_value(store: &ParamStore, bank: &DecomposerBank, z: &Matrix, m: Modality, i: usize) -> Matrix {
        let mut s = Session::new(store);
        let zv = s.tape.constant(z.clone());
        let d = bank.delta(&mut s, zv, m, i).unwrap();
        s.tape.value(d).clone()
    }

    #[test]
    fn alpha_schedule_and_errors() {
        assert_eq!(alpha(1, 6).unwrap(), 1.0);
        assert_eq!(alpha(6, 6).unwrap(), 0.0);
        assert!((alpha(3, 6).unwrap() - 0.6).abs() < 1e-15);
        assert!(matches!(alpha(1, 1), Err(Error::Config(_))));
        assert!(matches!(alpha(0, 4), Err(Error::Index { .. })));
        assert!(matches!(alpha(5, 4), Err(Error::Index { .. })));
    }

    #[test]
    fn clip_hand_computed_delta() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = DecomposerBank::new(&mut store, "c", Level::Clip, 2, 1, 3, 0.1, &mut rng).unwrap();
        // i = 1 uses only the rgb-specific pair.
        let own = bank.specific[0][0];
        *store.value_mut(own.b) = Matrix::from_rows(&[&[1.0], &[2.0], &[-1.0]]);
        *store.value_mut(own.a) = Matrix::from_rows(&[&[3.0, 0.0, 1.0]]);
        let z = Matrix::from_rows(&[&[1.0, 1.0, 1.0], &[2.0, 0.0, 1.0]]);
        // z * B = [2, 1]^T, times A.
        let expect = Matrix::from_rows(&[&[6.0, 0.0, 2.0], &[3.0, 0.0, 1.0]]);
        let got = delta_value(&store, &bank, &z, Modality::Rgb, 1);
        assert!(got.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn clip_midpoint_mixes_both_pairs() {
        let (store, bank) = bank(Level::Clip, 3, 2, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Matrix::random_normal(6, 4, 1.0, &mut rng);
        let own = bank.specific[1][1];
        let sh = bank.shared[1];
        let mix = |x: ParamId, y: ParamId| {
            let mut m = store.value(x).scale(0.5);
            m.axpy(0.5, store.value(y));
            m
        };
        let expect = z.matmul(&mix(own.b, sh.b)).unwrap().matmul(&mix(own.a, sh.a)).unwrap();
        let got = delta_value(&store, &bank, &z, Modality::Flow, 2);
        assert!(got.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn video_unit_vectors_move_one_clip() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = DecomposerBank::new(&mut store, "v", Level::Video, 2, 1, 3, 0.1, &mut rng).unwrap();
        let own = bank.specific[0][0];
        *store.value_mut(own.b) = Matrix::from_rows(&[&[1.0], &[0.0], &[0.0]]);
        *store.value_mut(own.a) = Matrix::from_rows(&[&[0.0], &[1.0], &[0.0]]);
        let z = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        // A * B^T = e2 e1^T: row 2 of the delta receives clip 1.
        let expect = Matrix::from_rows(&[&[0.0, 0.0], &[1.0, 2.0], &[0.0, 0.0]]);
        let got = delta_value(&store, &bank, &z, Modality::Rgb, 1);
        assert_eq!(got, expect);
    }

    #[test]
    fn video_delta_matches_transposed_formula() {
        let (store, bank) = bank(Level::Video, 4, 2, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let i = 2;
        let a = 2.0 / 3.0;
        let own = bank.specific[0][i - 1];
        let sh = bank.shared[i - 1];
        let mix = |x: ParamId, y: ParamId| {
            let mut m = store.value(x).scale(a);
            m.axpy(1.0 - a, store.value(y));
            m
        };
        let expect = z
            .transpose()
            .matmul(&mix(own.b, sh.b))
            .unwrap()
            .matmul(&mix(own.a, sh.a).transpose())
            .unwrap()
            .transpose();
        let got = delta_value(&store, &bank, &z, Modality::Rgb, i);
        assert!(got.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn video_mixing_is_order_sensitive() {
        let (store, bank) = bank(Level::Video, 2, 1, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = Matrix::random_normal(4, 3, 1.0, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let zp = Matrix::from_rows(&perm.iter().map(|&p| z.row(p).to_vec()).collect::<Vec<_>>());
        let d = delta_value(&store, &bank, &z, Modality::Rgb, 1);
        let dp = delta_value(&store, &bank, &zp, Modality::Rgb, 1);
        let d_permuted = Matrix::from_rows(&perm.iter().map(|&p| d.row(p).to_vec()).collect::<Vec<_>>());
        assert!(dp.max_abs_diff(&d_permuted) > 1e-6);
    }

    #[test]
    fn video_bank_rejects_wrong_clip_count() {
        let (store, bank) = bank(Level::Video, 2, 1, 4, 7);
        let mut s = Session::new(&store);
        let z = s.tape.constant(Matrix::zeros(6, 3));
        assert!(matches!(bank.delta(&mut s, z, Modality::Rgb, 1), Err(Error::Dim { .. })));
    }

    #[test]
    fn zero_matrices_leave_the_mlp_term() {
        let (mut store, bank) = bank(Level::Video, 3, 2, 4, 8);
        for id in bank.ids() {
            let (r, c) = store.value(id).shape();
            *store.value_mut(id) = Matrix::zeros(r, c);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = Session::new(&store);
        let z = s.tape.constant(Matrix::random_normal(8, 3, 1.0, &mut rng));
        let mlp = s.tape.constant(Matrix::random_normal(8, 3, 1.0, &mut rng));
        for out in bank.decompose_all(&mut s, z, mlp, Modality::Flow).unwrap() {
            assert_eq!(s.tape.value(out), s.tape.value(mlp));
        }
    }

    #[test]
    fn endpoint_invariance_under_perturbation() {
        for level in [Level::Clip, Level::Video] {
            let (store, bank) = bank(level, 4, 2, 5, 10);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let z = Matrix::random_normal(5, 5, 1.0, &mut rng);
            let first = delta_value(&store, &bank, &z, Modality::Rgb, 1);
            let last = delta_value(&store, &bank, &z, Modality::Rgb, 4);
            let mut shared_moved = store.clone();
            for p in &bank.shared {
                shared_moved.value_mut(p.a).data_mut().iter_mut().for_each(|x| *x += 1.0);
                shared_moved.value_mut(p.b).data_mut().iter_mut().for_each(|x| *x -= 2.0);
            }
            assert_eq!(delta_value(&shared_moved, &bank, &z, Modality::Rgb, 1), first);
            let mut own_moved = store.clone();
            for p in bank.specific.iter().flatten() {
                own_moved.value_mut(p.a).data_mut().iter_mut().for_each(|x| *x *= 3.0);
                own_moved.value_mut(p.b).data_mut().iter_mut().for_each(|x| *x += 0.5);
            }
            assert_eq!(delta_value(&own_moved, &bank, &z, Modality::Rgb, 4), last);
            assert_eq!(delta_value(&store, &bank, &z, Modality::Flow, 4), last);
        }
    }

    fn cosine_loss(lists: Vec<Vec<Matrix>>, seg: usize) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Vec<Var>> = lists
            .into_iter()
            .map(|l| l.into_iter().map(|m| tape.constant(m)).collect())
            .collect();
        let l = decorrelation_loss(&mut tape, &vars, seg).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn decorrelation_reference_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Matrix::random_normal(4, 3, 1.0, &mut rng);
        let same = vec![vec![x.clone(); 6], vec![x.clone(); 6]];
        assert!((cosine_loss(same, 2) - 30.0).abs() < 1e-9);

        let e = |i: usize| {
            let mut m = Matrix::zeros(1, 3);
            m.set(0, i, 1.0);
            m
        };
        let orth = vec![vec![e(0), e(1), e(2)], vec![e(2), e(0), e(1)]];
        assert!(cosine_loss(orth, 1).abs() < 1e-15);

        let u = Matrix::row_vector(&[1.0, 0.0]);
        let v = Matrix::row_vector(&[0.5, 3f64.sqrt() / 2.0]);
        let sixty = vec![vec![u.clone(), v.clone()], vec![v, u]];
        assert!((cosine_loss(sixty, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decorrelation_averages_over_videos() {
        // Video 1 outputs identical, video 2 outputs opposite.
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, -1.0]]);
        let mut b = a.clone();
        b.row_mut(1).iter_mut().for_each(|x| *x = -*x);
        let loss = cosine_loss(vec![vec![a.clone(), b]], 1);
        assert!((loss - 0.0).abs() < 1e-12);
        let loss = cosine_loss(vec![vec![a.clone(), a]], 1);
        assert!((loss - 1.0).abs() < 1e-12);
    }
}
