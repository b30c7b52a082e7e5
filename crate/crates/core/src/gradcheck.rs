//! Central finite-difference verification of tape gradients.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward implementation it checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::decomposer::{decorrelation_loss, DecomposerBank, Level};
use crate::encoder::Encoder;
use crate::error::Result;
use crate::heads::{adversarial_alignment_loss, classification_loss, Discriminator, StreamHeads};
use crate::params::{ParamId, ParamStore, Session};
use crate::router::{activation_consistency_loss, router_decorrelation_loss, ClassWeightBank, Router};
use crate::tensor::Matrix;
use crate::Modality;

pub const STEP: f64 = 1e-5;
pub const ABS_TOL: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub violations: usize,
    pub max_abs_err: f64,
    /// `(input, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.checked > 0
    }
}

/// Whether an analytic derivative agrees with a numeric one at
/// `max(ABS_TOL, REL_TOL * scale)`.
pub fn within_tolerance(analytic: f64, numeric: f64) -> bool {
    let tol = ABS_TOL.max(REL_TOL * analytic.abs().max(numeric.abs()));
    (analytic - numeric).abs() <= tol && analytic.is_finite()
}

/// Compares the tape gradient of the scalar `f(inputs)` with respect to every
/// entry of every input against central differences with step [`STEP`].
pub fn check<F>(name: &str, inputs: &[Matrix], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.var(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Matrix> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, m)| tape.grad(v).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
        .collect();

    let eval = |perturbed: &[Matrix]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|m| t.constant(m.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.scalar(o))
    };

    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        violations: 0,
        max_abs_err: 0.0,
        worst: None,
    };
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs();
            report.checked += 1;
            if !within_tolerance(a, numeric) {
                report.violations += 1;
            }
            if err >= report.max_abs_err {
                report.max_abs_err = err;
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Reduces any node to a scalar through a fixed random weighting, so that a
/// non-scalar operation can be checked entry by entry.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Matrix::random_normal(r, c, 1.0, &mut rng));
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

/// [`check`] for code that reads parameters through a [`Session`]: every
/// trainable parameter of `store` is checked alongside the explicit inputs.
pub fn check_module<F>(name: &str, store: &ParamStore, inputs: &[Matrix], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let (analytic_inputs, analytic_params) = {
        let mut s = Session::new(store);
        let vars: Vec<Var> = inputs.iter().map(|m| s.tape.var(m.clone())).collect();
        let out = f(&mut s, &vars)?;
        s.tape.backward(out)?;
        let gi: Vec<Matrix> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, m)| s.tape.grad(v).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
            .collect();
        let mut gp: Vec<Option<Matrix>> = vec![None; store.len()];
        for (id, g) in s.param_grads() {
            gp[id.index()] = Some(g);
        }
        (gi, gp)
    };
    let eval = |st: &ParamStore, xs: &[Matrix]| -> Result<f64> {
        let mut s = Session::new(st);
        let vars: Vec<Var> = xs.iter().map(|m| s.tape.constant(m.clone())).collect();
        let o = f(&mut s, &vars)?;
        Ok(s.tape.scalar(o))
    };

    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        violations: 0,
        max_abs_err: 0.0,
        worst: None,
    };
    let record = |report: &mut GradCheckReport, slot: usize, j: usize, a: f64, numeric: f64| {
        let err = (a - numeric).abs();
        report.checked += 1;
        if !within_tolerance(a, numeric) {
            report.violations += 1;
        }
        if err >= report.max_abs_err {
            report.max_abs_err = err;
            report.worst = Some((slot, j, a, numeric));
        }
    };

    let mut work: Vec<Matrix> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let plus = eval(store, &work)?;
            work[i].data_mut()[j] = orig - STEP;
            let minus = eval(store, &work)?;
            work[i].data_mut()[j] = orig;
            record(&mut report, i, j, analytic_inputs[i].data()[j], (plus - minus) / (2.0 * STEP));
        }
    }
    let mut perturbed = store.clone();
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).len();
        for j in 0..n {
            let orig = store.value(id).data()[j];
            perturbed.value_mut(id).data_mut()[j] = orig + STEP;
            let plus = eval(&perturbed, inputs)?;
            perturbed.value_mut(id).data_mut()[j] = orig - STEP;
            let minus = eval(&perturbed, inputs)?;
            perturbed.value_mut(id).data_mut()[j] = orig;
            let a = analytic_params[id.index()].as_ref().map_or(0.0, |g| g.data()[j]);
            record(&mut report, inputs.len() + id.index(), j, a, (plus - minus) / (2.0 * STEP));
        }
    }
    Ok(report)
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0, rng)
}

/// Replaces every parameter with a unit-scale draw so that no gradient path
/// is hidden behind a zero initialisation.
fn randomize(store: &mut ParamStore, std: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let (r, c) = store.value(id).shape();
        *store.value_mut(id) = Matrix::random_normal(r, c, std, rng);
    }
}

/// Small dimensions that keep the finite-difference sweep fast.
pub fn suite_config() -> ModelConfig {
    ModelConfig {
        d_in: 3,
        d: 4,
        heads: 2,
        head_dim: 2,
        layers: 1,
        d_ff: 5,
        clips: 3,
        classes: 3,
        n_clip: 3,
        n_video: 3,
        rank: 2,
        positional_encoding: false,
        disc_hidden: 3,
        init_std: 0.5,
    }
}

/// Finite-difference checks of every tape primitive, every model component
/// and every loss term.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = suite_config();
    let (t, d, b, n) = (cfg.clips, cfg.d, 2usize, cfg.n_clip);
    let rows = b * t;
    let mut out = Vec::new();
    let mut g = |r: usize, c: usize| gaussian(r, c, &mut rng);

    // Primitives.
    let (a34, b42, a34b) = (g(3, 4), g(4, 2), g(3, 4));
    out.push(check("matmul", &[a34.clone(), b42], |tp, v| {
        let y = tp.matmul(v[0], v[1])?;
        project(tp, y, 1)
    })?);
    out.push(check("transpose", &[a34.clone()], |tp, v| {
        let y = tp.transpose(v[0]);
        project(tp, y, 2)
    })?);
    out.push(check("add_sub_mul_scale", &[a34.clone(), a34b.clone()], |tp, v| {
        let s = tp.add(v[0], v[1])?;
        let d = tp.sub(v[0], v[1])?;
        let m = tp.mul(s, d)?;
        let k = tp.scale(m, -0.7);
        let all = tp.add_all(&[k, v[0], m])?;
        project(tp, all, 3)
    })?);
    out.push(check("add_row_affine", &[a34.clone(), g(4, 2), g(1, 2), g(1, 4)], |tp, v| {
        let y = tp.affine(v[0], v[1], v[2])?;
        let z = tp.add_row(v[0], v[3])?;
        let (py, pz) = (project(tp, y, 4)?, project(tp, z, 5)?);
        tp.add(py, pz)
    })?);
    out.push(check("layer_norm", &[g(rows, d), g(1, d), g(1, d)], |tp, v| {
        let y = tp.layer_norm(v[0], v[1], v[2])?;
        project(tp, y, 6)
    })?);
    out.push(check("gelu_relu", &[a34.clone()], |tp, v| {
        let y = tp.gelu(v[0]);
        let r = tp.relu(v[0]);
        let s = tp.add(y, r)?;
        project(tp, s, 7)
    })?);
    out.push(check("softmax", &[a34.clone()], |tp, v| {
        let y = tp.softmax(v[0])?;
        project(tp, y, 8)
    })?);
    out.push(check("segment_mean_concat", &[g(rows, d), g(rows, 2)], |tp, v| {
        let c = tp.concat_cols(v[0], v[1])?;
        let y = tp.segment_mean(c, t)?;
        project(tp, y, 9)
    })?);
    out.push(check("attention", &[g(rows, 4), g(rows, 4), g(rows, 4)], |tp, v| {
        let y = tp.attention(v[0], v[1], v[2], t, 2)?;
        project(tp, y, 10)
    })?);
    out.push(check("segment_left_mul", &[g(t, t), g(rows, d)], |tp, v| {
        let y = tp.segment_left_mul(v[0], v[1], t)?;
        project(tp, y, 11)
    })?);
    out.push(check("merge", &[g(rows, d), g(rows, d), g(rows, d), g(b, 3)], |tp, v| {
        let y = tp.merge(&v[..3], v[3], t)?;
        project(tp, y, 12)
    })?);
    out.push(check("segment_cosine", &[g(rows, d), g(rows, d)], |tp, v| {
        let y = tp.segment_cosine(v[0], v[1], t)?;
        project(tp, y, 13)
    })?);
    out.push(check("reductions", &[a34.clone()], |tp, v| {
        let c = tp.sum_cols(v[0]);
        let n = tp.sq_norm_rows(v[0]);
        let m = tp.mean_all(v[0]);
        let (pc, pn) = (project(tp, c, 14)?, project(tp, n, 15)?);
        let s = tp.sum_all(v[0]);
        tp.add_all(&[pc, pn, m, s])
    })?);
    out.push(check("cross_entropy", &[g(4, 3)], |tp, v| tp.cross_entropy(v[0], &[0, 2, 1, 2]))?);
    out.push(check("gather_rows", &[a34.clone()], |tp, v| {
        let y = tp.gather_rows(v[0], &[2, 0, 2])?;
        project(tp, y, 16)
    })?);
    // A compensating reversal makes the composite an identity map on
    // gradients, so the reversal and its scale are both exercised.
    out.push(check("grad_reverse", &[a34], |tp, v| {
        let a = tp.grad_reverse(v[0], 0.5);
        let y = tp.grad_reverse(a, 2.0);
        project(tp, y, 17)
    })?);

    // Model components, checked through their real parameter bindings.
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg, Modality::Rgb, &mut rng);
    randomize(&mut store, 0.5, &mut rng);
    let x_in = gaussian(rows, cfg.d_in, &mut rng);
    let f = gaussian(rows, d, &mut rng);
    out.push(check_module("msa", &store, &[f.clone()], |s, v| {
        let z = enc.msa(s, 0, v[0])?;
        project(&mut s.tape, z, 20)
    })?);
    out.push(check_module("mlp", &store, &[f.clone()], |s, v| {
        let y = enc.mlp(s, 0, v[0])?;
        project(&mut s.tape, y, 21)
    })?);
    out.push(check_module("encoder", &store, &[x_in], |s, v| {
        let y = enc.forward(s, v[0])?;
        project(&mut s.tape, y, 22)
    })?);

    for (level, width, tag) in [(Level::Clip, d, "clip"), (Level::Video, t, "video")] {
        let mut store = ParamStore::new();
        let bank = DecomposerBank::new(&mut store, "dec", level, n, cfg.rank, width, 0.5, &mut rng)?;
        randomize(&mut store, 0.5, &mut rng);
        let z = gaussian(rows, d, &mut rng);
        let mlp = gaussian(rows, d, &mut rng);
        out.push(check_module(&format!("{tag}_decomposer"), &store, &[z, mlp], |s, v| {
            let mut acc = Vec::new();
            for m in Modality::ALL {
                for i in 1..=n {
                    let e = bank.decompose(s, v[0], v[1], m, i)?;
                    acc.push(project(&mut s.tape, e, 30 + i as u64 + 10 * m.index() as u64)?);
                }
            }
            s.tape.add_all(&acc)
        })?);
    }

    let mut store = ParamStore::new();
    let router = Router::new(&mut store, "router", d, n, 0.5, &mut rng);
    randomize(&mut store, 0.5, &mut rng);
    let streams: Vec<Matrix> = (0..4).map(|_| gaussian(rows, d, &mut rng)).collect();
    out.push(check_module("router", &store, &streams, |s, v| {
        let w = router.route(s, [v[0], v[1]], [v[2], v[3]], t)?;
        let c = w.concat(&mut s.tape)?;
        project(&mut s.tape, c, 40)
    })?);

    // Losses.
    let outputs: Vec<Matrix> = (0..2 * n).map(|_| gaussian(rows, d, &mut rng)).collect();
    out.push(check("decomposer_decorrelation", &outputs, |tp, v| {
        decorrelation_loss(tp, &[v[..n].to_vec(), v[n..].to_vec()], t)
    })?);
    out.push(check_module("router_decorrelation", &store, &streams, |s, v| {
        let w = router.route(s, [v[0], v[1]], [v[2], v[3]], t)?;
        router_decorrelation_loss(&mut s.tape, &w)
    })?);
    let mut bank = ClassWeightBank::new(cfg.classes, 3 * n, 0.9, false);
    for c in 0..cfg.classes {
        let w: Vec<f64> = gaussian(1, 3 * n, &mut rng).data().iter().map(|x| x.abs() / 3.0).collect();
        bank.update(&w, c)?;
    }
    out.push(check_module("activation_consistency", &store, &streams, |s, v| {
        let w = router.route(s, [v[0], v[1]], [v[2], v[3]], t)?;
        let c = w.concat(&mut s.tape)?;
        activation_consistency_loss(&mut s.tape, c, &[(0, 1), (1, 2)], &mut bank.clone())
    })?);

    let mut store = ParamStore::new();
    let discs = ["a", "b", "c"].map(|k| Discriminator::new(&mut store, &format!("disc.{k}"), d, cfg.disc_hidden, 0.5, &mut rng));
    let heads = StreamHeads::new(&mut store, d, cfg.classes, 0.5, &mut rng);
    randomize(&mut store, 0.5, &mut rng);
    let feats: Vec<Matrix> = (0..3).map(|_| gaussian(rows, d, &mut rng)).collect();
    let lambda = 0.5;
    out.push(check_module("adversarial_alignment", &store, &feats, |s, v| {
        // Undo the reversal so the composite gradient is the plain derivative.
        let undone: Vec<Var> = v.iter().map(|&x| s.tape.grad_reverse(x, 1.0 / lambda)).collect();
        adversarial_alignment_loss(s, &undone, &discs, &[0, 1], lambda, t)
    })?);
    out.push(check_module("classification", &store, &feats, |s, v| {
        let logits = heads.logits(s, [v[0], v[1], v[2]], t)?;
        classification_loss(&mut s.tape, &logits, &[2, 0])
    })?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::random_normal(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn matmul_sum_gradient_matches_finite_differences() {
        let a = rand(3, 4, 1);
        let b = rand(4, 2, 2);
        let report = check("matmul", &[a, b], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            Ok(t.sum_all(y))
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_abs_err < 1e-6);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // grad_reverse flips the sign, so comparing against the plain forward
        // must fail everywhere.
        let report = check("reversed", &[rand(2, 2, 3)], |t, v| {
            let r = t.grad_reverse(v[0], 1.0);
            project(t, r, 9)
        })
        .unwrap();
        assert_eq!(report.violations, 4);
    }

    #[test]
    fn full_suite_passes() {
        let reports = run_suite(1).unwrap();
        for r in &reports {
            assert!(r.passed(), "{r:?}");
        }
        assert!(reports.len() >= 25);
    }
}
