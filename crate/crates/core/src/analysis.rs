//! Domain shift carried by each decomposed stream.

use crate::data::{Batch, DatasetSplit, MultimodalSample};
use crate::error::{Error, Result};
use crate::heads::Stream;
use crate::mmd::{default_bandwidths, mmd_with_std_err};
use crate::model::McLrd;
use crate::tensor::Matrix;
use crate::train::EVAL_CHUNK;

/// Permutations behind each reported standard error.
pub const NULL_PERMUTATIONS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftRow {
    pub stream: Stream,
    /// Squared MMD clipped at 0.
    pub mmd: f64,
    pub raw: f64,
    pub std_err: f64,
    pub n_source: usize,
    pub n_target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftReport {
    pub rows: Vec<ShiftRow>,
}

impl ShiftReport {
    pub const CSV_HEADER: &'static str = "stream,mmd,raw,std_err,n_source,n_target";

    pub fn get(&self, stream: Stream) -> Option<&ShiftRow> {
        self.rows.iter().find(|r| r.stream == stream)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.stream.as_str(),
                r.mmd,
                r.raw,
                r.std_err,
                r.n_source,
                r.n_target
            ));
        }
        out
    }
}

/// Pooled final-layer features per stream, `n x d` each.
pub fn pooled_stream_features(model: &McLrd, samples: &[MultimodalSample]) -> Result<[Matrix; 3]> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no samples to featurise".into()));
    }
    let mut parts: [Vec<Matrix>; 3] = Default::default();
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&MultimodalSample> = chunk.iter().collect();
        let f = model.stream_features(&Batch::from_samples(&refs)?)?;
        for (p, m) in parts.iter_mut().zip(f) {
            p.push(m);
        }
    }
    let stack = |v: &Vec<Matrix>| Matrix::vstack(&v.iter().collect::<Vec<_>>());
    Ok([stack(&parts[0])?, stack(&parts[1])?, stack(&parts[2])?])
}

/// MMD between source-test and target-test features of every stream.
///
/// The model must come from an adaptation run without the adversarial
/// alignment term, which would otherwise erase the shift being measured.
pub fn analyze_decomposed_shift(model: &McLrd, split: &DatasetSplit, seed: u64) -> Result<ShiftReport> {
    match model.state.adapted_with {
        None => return Err(Error::State("shift analysis needs an adapted model".into())),
        Some(t) if t.ada => {
            return Err(Error::State(
                "shift analysis needs a model adapted without the alignment loss".into(),
            ))
        }
        Some(_) => {}
    }
    let src = pooled_stream_features(model, &split.source_test)?;
    let tgt = pooled_stream_features(model, &split.target_test)?;
    let mut rows = Vec::with_capacity(3);
    for (k, stream) in Stream::ALL.into_iter().enumerate() {
        let bw = default_bandwidths(&src[k], &tgt[k])?;
        let e = mmd_with_std_err(&src[k], &tgt[k], &bw, NULL_PERMUTATIONS, seed.wrapping_add(k as u64))?;
        rows.push(ShiftRow {
            stream,
            mmd: e.reported,
            raw: e.raw,
            std_err: e.std_err,
            n_source: src[k].rows(),
            n_target: tgt[k].rows(),
        });
    }
    Ok(ShiftReport { rows })
}
