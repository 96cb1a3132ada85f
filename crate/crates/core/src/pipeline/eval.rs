use std::str::FromStr;

use super::engine::{batched_logits, Model};
use super::PipelineError;
use crate::dataio::{Dataset, Preprocessor};
use crate::specialty::LabelMapping;
use crate::tensor::{softmax, Tensor};

const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    Center,
    TenCrop,
}

impl FromStr for CropMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "center" => Ok(CropMode::Center),
            "ten-crop" => Ok(CropMode::TenCrop),
            other => Err(format!("unknown crop mode '{other}' (center, ten-crop)")),
        }
    }
}

impl std::fmt::Display for CropMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CropMode::Center => "center",
            CropMode::TenCrop => "ten-crop",
        })
    }
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Class probabilities of every sample of `ds`.
pub(crate) fn probabilities<M: Model<f32>>(
    model: &M,
    pre: &Preprocessor,
    ds: &Dataset,
    mode: CropMode,
) -> Result<Vec<Vec<f32>>, PipelineError> {
    let mut out = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for batch in all.chunks(EVAL_BATCH) {
        match mode {
            CropMode::Center => {
                let rows = batched_logits(model, &pre.eval_batch(ds, batch))?;
                out.extend(rows.iter().map(|r| softmax(r)));
            }
            CropMode::TenCrop => {
                let views: Vec<Tensor<f32>> = batch.iter().map(|&i| pre.ten_crop(ds, i)).collect();
                let per = views[0].batch();
                let mut shape = views[0].shape().to_vec();
                shape[0] = per * views.len();
                let values = views.into_iter().flat_map(Tensor::into_values).collect();
                let rows = batched_logits(model, &Tensor::new(shape, values)?)?;
                for group in rows.chunks(per) {
                    let mut avg = vec![0.0f32; group[0].len()];
                    for r in group {
                        for (a, p) in avg.iter_mut().zip(softmax(r)) {
                            *a += p;
                        }
                    }
                    avg.iter_mut().for_each(|a| *a /= per as f32);
                    out.push(avg);
                }
            }
        }
    }
    Ok(out)
}

/// Top-scoring output for every sample.
pub fn predict<M: Model<f32>>(model: &M, pre: &Preprocessor, ds: &Dataset, mode: CropMode) -> Result<Vec<usize>, PipelineError> {
    Ok(probabilities(model, pre, ds, mode)?.iter().map(|p| argmax(p)).collect())
}

/// Fraction of samples whose top-scoring class is the label.
pub fn evaluate_top1<M: Model<f32>>(model: &M, pre: &Preprocessor, ds: &Dataset, mode: CropMode) -> Result<f64, PipelineError> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let preds = predict(model, pre, ds, mode)?;
    let correct = preds.iter().zip(&ds.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Fraction of samples a generalist sends to the specialty of their class.
pub fn specialty_accuracy<M: Model<f32>>(
    model: &M,
    pre: &Preprocessor,
    ds: &Dataset,
    mapping: &LabelMapping,
) -> Result<f64, PipelineError> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let preds = predict(model, pre, ds, CropMode::Center)?;
    let correct = preds
        .iter()
        .zip(&ds.labels)
        .filter(|&(&p, &y)| p == mapping.specialty_of(y))
        .count();
    Ok(correct as f64 / ds.len() as f64)
}
