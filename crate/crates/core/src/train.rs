//! Two-stage training and evaluation.
//!
//! Pretraining fits both encoders with per-modality heads on source data and
//! then freezes them. Adaptation trains decomposers, routers, stream heads
//! and discriminators on batches that are half source and half labelled
//! target (drawn with replacement), minimising
//!
//! ```text
//! L = L_cls + mean_sites(L_dd) + mean_sites(L_rd) + mean_sites(L_ac) + L_ada
//! ```

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::config::{Stage, TrainConfig};
use crate::data::{Batch, DatasetSplit, Domain, MultimodalSample};
use crate::decomposer::decorrelation_loss;
use crate::error::{Error, Result};
use crate::heads::{adversarial_alignment_loss, aggregate_predictions, classification_loss};
use crate::model::McLrd;
use crate::optim::{global_norm, Adam};
use crate::params::Session;
use crate::router::{activation_consistency_loss, router_decorrelation_loss};

/// Forward passes during evaluation use at most this many videos at once.
pub const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteLosses {
    pub site: String,
    pub dd: f64,
    pub rd: f64,
    pub ac: f64,
}

/// Loss components of one adaptation step. Disabled terms read 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub epoch: usize,
    pub cls: f64,
    pub dd: f64,
    pub rd: f64,
    pub ac: f64,
    pub ada: f64,
    pub total: f64,
    pub sites: Vec<SiteLosses>,
    pub grad_norm: f64,
    /// The batch held only one domain, so the discriminators could win
    /// trivially.
    pub single_domain: bool,
    /// Cumulative cold-class lookups across all class banks.
    pub cold_class_warnings: u64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,cls,dd,rd,ac,ada,total,target_test_acc";

    pub fn csv_row(&self, target_test_acc: Option<f64>) -> String {
        let acc = target_test_acc.map(|a| a.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.cls, self.dd, self.rd, self.ac, self.ada, self.total, acc
        )
    }
}

fn check_stage(cfg: &TrainConfig, stage: Stage) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != stage {
        return Err(Error::Config(format!("expected a {stage:?} config, got {:?}", cfg.stage)));
    }
    Ok(())
}

/// Trains both encoders and their pretraining heads on `source`, then
/// freezes them.
pub fn pretrain(model: &mut McLrd, source: &[MultimodalSample], cfg: &TrainConfig) -> Result<PretrainReport> {
    check_stage(cfg, Stage::Pretrain)?;
    if source.is_empty() {
        return Err(Error::EmptyDataset("no source samples to pretrain on".into()));
    }
    if model.state.pretrained {
        return Err(Error::State("model is already pretrained".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr, cfg.adam, &model.store);
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&MultimodalSample> = chunk.iter().map(|&i| &source[i]).collect();
            let batch = Batch::from_samples(&samples)?;
            let (loss, grads) = {
                let mut s = Session::new(&model.store);
                let logits = model.forward_pretrain(&mut s, &batch)?;
                let loss = classification_loss(&mut s.tape, &logits, &batch.labels)?;
                let value = s.tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { stage: "pretrain", step });
                }
                s.tape.backward(loss)?;
                (value, s.param_grads())
            };
            adam.step(&mut model.store, &grads);
            total += loss * chunk.len() as f64;
            step += 1;
        }
        epoch_losses.push(total / source.len() as f64);
    }
    model.freeze_base();
    model.rng = rng;
    let train_accuracy = evaluate_pretrain(model, source)?.accuracy;
    Ok(PretrainReport {
        epoch_losses,
        train_accuracy,
        steps: step,
    })
}

/// `2 / (1 + exp(-10 p)) - 1`: rises from 0 at `p = 0` towards 1.
pub fn ramp(progress: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0
}

/// Runs adaptation and returns one report per step.
pub fn adapt(model: &mut McLrd, split: &DatasetSplit, cfg: &TrainConfig) -> Result<Vec<LossReport>> {
    adapt_with(model, split, cfg, |_| {})
}

/// [`adapt`] with a callback after every optimiser step.
pub fn adapt_with(
    model: &mut McLrd,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossReport),
) -> Result<Vec<LossReport>> {
    check_stage(cfg, Stage::Adapt)?;
    if !model.state.pretrained {
        return Err(Error::State("adaptation needs a pretrained, frozen base model".into()));
    }
    if split.source_train.is_empty() || split.target_train.is_empty() {
        return Err(Error::EmptyDataset("adaptation needs source and target training samples".into()));
    }
    let t = cfg.toggles;
    if !(t.cls || t.dd || t.rd || t.ac || t.ada) {
        return Err(Error::Config("every loss term is disabled".into()));
    }
    model.reset_class_banks(cfg.ema_momentum, cfg.exact_source_mean);
    // A different stream from pretraining so that equal seeds do not couple
    // the two shuffles.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(cfg.lr, cfg.adam, &model.store);
    let half = (cfg.batch_size / 2).max(1);
    let mut order: Vec<usize> = (0..split.source_train.len()).collect();
    let mut history = Vec::new();
    let mut step = 0;
    let total_steps = cfg.epochs * order.len().div_ceil(half);
    let mut step_cfg = cfg.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(half) {
            let mut samples: Vec<&MultimodalSample> = chunk.iter().map(|&i| &split.source_train[i]).collect();
            for _ in 0..chunk.len() {
                let j = rng.random_range(0..split.target_train.len());
                samples.push(&split.target_train[j]);
            }
            let batch = Batch::from_samples(&samples)?;
            if cfg.lambda_ramp {
                step_cfg.lambda_ada = cfg.lambda_ada * ramp(step as f64 / total_steps as f64);
            }
            let mut report = adapt_step(model, &mut adam, &batch, &step_cfg, step)?;
            report.epoch = epoch;
            on_step(&report);
            history.push(report);
            step += 1;
        }
    }
    model.state.adapted_with = Some(t);
    model.rng = rng;
    Ok(history)
}

/// One forward/backward/update on a mixed batch.
pub fn adapt_step(model: &mut McLrd, adam: &mut Adam, batch: &Batch, cfg: &TrainConfig, step: usize) -> Result<LossReport> {
    let t = cfg.toggles;
    let seg = model.cfg.clips;
    let mut banks = std::mem::take(&mut model.class_banks);
    let result = (|| {
        let mut s = Session::new(&model.store);
        let out = model.forward_adapt(&mut s, batch)?;
        let n_sites = out.sites.len() as f64;
        let domains: Vec<usize> = batch.domains.iter().map(|d| d.index()).collect();
        let source_rows: Vec<usize> = (0..batch.len()).filter(|&r| batch.domains[r] == Domain::Source).collect();
        let target_rows: Vec<(usize, usize)> = (0..batch.len())
            .filter(|&r| batch.domains[r] == Domain::Target)
            .map(|r| (r, batch.labels[r]))
            .collect();

        let mut site_reports = Vec::with_capacity(out.sites.len());
        let (mut dd_terms, mut rd_terms, mut ac_terms) = (Vec::new(), Vec::new(), Vec::new());
        for (k, trace) in out.sites.iter().enumerate() {
            let mut sr = SiteLosses {
                site: model.sites[k].name(),
                dd: 0.0,
                rd: 0.0,
                ac: 0.0,
            };
            if t.dd {
                let sets = trace
                    .outputs
                    .iter()
                    .map(|set| decorrelation_loss(&mut s.tape, set, seg))
                    .collect::<Result<Vec<_>>>()?;
                let sum = s.tape.add_all(&sets)?;
                let v = s.tape.scale(sum, 1.0 / sets.len() as f64);
                sr.dd = s.tape.scalar(v);
                dd_terms.push(v);
            }
            if t.rd {
                let v = router_decorrelation_loss(&mut s.tape, &trace.weights)?;
                sr.rd = s.tape.scalar(v);
                rd_terms.push(v);
            }
            if t.ac {
                let w = trace.weights.concat(&mut s.tape)?;
                let values = s.tape.value(w).clone();
                for &r in &source_rows {
                    banks[k].update(values.row(r), batch.labels[r])?;
                }
                let v = if target_rows.is_empty() {
                    s.tape.constant(crate::tensor::Matrix::scalar(0.0))
                } else {
                    activation_consistency_loss(&mut s.tape, w, &target_rows, &mut banks[k])?
                };
                sr.ac = s.tape.scalar(v);
                ac_terms.push(v);
            }
            site_reports.push(sr);
        }

        let mut terms: Vec<Var> = Vec::with_capacity(5);
        let site_mean = |s: &mut Session, v: &[Var]| -> Result<Option<(Var, f64)>> {
            if v.is_empty() {
                return Ok(None);
            }
            let sum = s.tape.add_all(v)?;
            let mean = s.tape.scale(sum, 1.0 / n_sites);
            Ok(Some((mean, s.tape.scalar(mean))))
        };
        let mut values = [0.0; 5];
        if t.cls {
            let v = classification_loss(&mut s.tape, &out.logits, &batch.labels)?;
            values[0] = s.tape.scalar(v);
            terms.push(v);
        }
        for (slot, list) in [(1, &dd_terms), (2, &rd_terms), (3, &ac_terms)] {
            if let Some((v, x)) = site_mean(&mut s, list)? {
                values[slot] = x;
                terms.push(v);
            }
        }
        if t.ada {
            let v = adversarial_alignment_loss(&mut s, &out.streams, &model.discriminators, &domains, cfg.lambda_ada, seg)?;
            values[4] = s.tape.scalar(v);
            terms.push(v);
        }
        let total = s.tape.add_all(&terms)?;
        let total_value = s.tape.scalar(total);
        if !total_value.is_finite() {
            return Err(Error::NonFiniteLoss { stage: "adapt", step });
        }
        s.tape.backward(total)?;
        let grads = s.param_grads();
        let report = LossReport {
            step,
            epoch: 0,
            cls: values[0],
            dd: values[1],
            rd: values[2],
            ac: values[3],
            ada: values[4],
            total: total_value,
            sites: site_reports,
            grad_norm: global_norm(&grads),
            single_domain: source_rows.is_empty() || target_rows.is_empty(),
            cold_class_warnings: banks.iter().map(|b| b.warnings).sum(),
        };
        Ok((report, grads))
    })();
    model.class_banks = banks;
    let (report, grads) = result?;
    adam.step(&mut model.store, &grads);
    Ok(report)
}

/// Accuracy with per-class counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub n: usize,
    /// `(correct, total)` per class.
    pub per_class: Vec<(usize, usize)>,
}

impl Evaluation {
    pub fn from_predictions(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset("nothing to evaluate".into()));
        }
        let mut per_class = vec![(0, 0); classes];
        let mut correct = 0;
        for (&p, &y) in predictions.iter().zip(labels) {
            let slot = per_class
                .get_mut(y)
                .ok_or(Error::Index { index: y, len: classes })?;
            slot.1 += 1;
            if p == y {
                slot.0 += 1;
                correct += 1;
            }
        }
        Ok(Evaluation {
            accuracy: correct as f64 / labels.len() as f64,
            n: labels.len(),
            per_class,
        })
    }
}

fn chunked<F>(samples: &[MultimodalSample], mut f: F) -> Result<Vec<usize>>
where
    F: FnMut(&Batch) -> Result<Vec<usize>>,
{
    if samples.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&MultimodalSample> = chunk.iter().collect();
        out.extend(f(&Batch::from_samples(&refs)?)?);
    }
    Ok(out)
}

/// Aggregated stream-head predictions.
pub fn predict(model: &McLrd, samples: &[MultimodalSample]) -> Result<Vec<usize>> {
    chunked(samples, |b| {
        let l = model.adapted_logits(b)?;
        aggregate_predictions(&[&l[0], &l[1], &l[2]])
    })
}

/// Predictions of the frozen pretraining heads (mean of both modalities'
/// probabilities).
pub fn predict_pretrain(model: &McLrd, samples: &[MultimodalSample]) -> Result<Vec<usize>> {
    chunked(samples, |b| {
        let l = model.pretrain_logits(b)?;
        aggregate_predictions(&[&l[0], &l[1]])
    })
}

fn labels(samples: &[MultimodalSample]) -> Vec<usize> {
    samples.iter().map(|s| s.label).collect()
}

pub fn evaluate(model: &McLrd, samples: &[MultimodalSample]) -> Result<Evaluation> {
    Evaluation::from_predictions(&predict(model, samples)?, &labels(samples), model.cfg.classes)
}

pub fn evaluate_pretrain(model: &McLrd, samples: &[MultimodalSample]) -> Result<Evaluation> {
    Evaluation::from_predictions(&predict_pretrain(model, samples)?, &labels(samples), model.cfg.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluation_counts() {
        let e = Evaluation::from_predictions(&[0; 10], &[0, 1, 2, 3, 4, 0, 1, 2, 3, 4], 5).unwrap();
        assert!((e.accuracy - 0.2).abs() < 1e-15);
        assert_eq!(e.per_class[0], (2, 2));
        assert_eq!(e.per_class[3], (0, 2));
        let e = Evaluation::from_predictions(&[2, 1, 1], &[2, 1, 0], 3).unwrap();
        assert!((e.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert!(Evaluation::from_predictions(&[], &[], 3).is_err());
    }

    #[test]
    fn csv_row_layout() {
        let r = LossReport {
            step: 3,
            epoch: 0,
            cls: 1.0,
            dd: 0.0,
            rd: 0.5,
            ac: 0.25,
            ada: 2.0,
            total: 3.75,
            sites: vec![],
            grad_norm: 0.0,
            single_domain: false,
            cold_class_warnings: 0,
        };
        assert_eq!(r.csv_row(None), "3,1,0,0.5,0.25,2,3.75,");
        assert_eq!(LossReport::CSV_HEADER.split(',').count(), r.csv_row(Some(0.5)).split(',').count());
    }
}
