use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{Tape, Tensor};

use super::dataset::SyntheticVideoDataset;

/// Samples per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub loss: f64,
    pub samples: usize,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `[n, classes]` logits whose argmax equals the label.
pub fn top1(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape(format!("top1: logits {shape:?} with {} labels", labels.len())));
    }
    let c = shape[1];
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Logits for every sample, in dataset order.
pub fn predict<M: Network + ?Sized>(model: &M, dataset: &SyntheticVideoDataset) -> Result<Tensor> {
    let c = model.num_classes();
    let mut data = Vec::with_capacity(dataset.len() * c);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, _) = dataset.batch(chunk)?;
        data.extend_from_slice(model.logits(&x)?.data());
    }
    Tensor::new(vec![dataset.len(), c], data)
}

/// Top-1 accuracy and mean cross-entropy over a whole dataset.
pub fn evaluate_report<M: Network + ?Sized>(model: &M, dataset: &SyntheticVideoDataset) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    let logits = predict(model, dataset)?;
    let tape = Tape::inference();
    let loss = tape.constant(&logits).cross_entropy(dataset.labels())?.item();
    Ok(EvalReport {
        top1: top1(&logits, dataset.labels())?,
        loss,
        samples: dataset.len(),
    })
}

pub fn evaluate<M: Network + ?Sized>(model: &M, dataset: &SyntheticVideoDataset) -> Result<f64> {
    Ok(evaluate_report(model, dataset)?.top1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[-1.0, -2.0]), 0);
    }

    #[test]
    fn top1_counts_hits() {
        let logits = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 5.0, 5.0]).unwrap();
        assert_eq!(top1(&logits, &[0, 1, 1]).unwrap(), 2.0 / 3.0);
        assert!(top1(&logits, &[0]).is_err());
    }
}
