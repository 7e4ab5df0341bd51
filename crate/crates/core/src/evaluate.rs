//! Read-only batch evaluation of a model over a corpus.

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fusion::{argmax, ModelParams};
use crate::metrics::{confusion, report, MetricsReport};

fn check_dims(model: &ModelParams, corpus: &Corpus) -> Result<()> {
    if !corpus.is_empty() && corpus.feature_dim != model.config.input_dim {
        return Err(Error::Dimension {
            op: "model input_dim vs corpus feature_dim",
            lhs: vec![model.config.input_dim],
            rhs: vec![corpus.feature_dim],
        });
    }
    Ok(())
}

/// Probability vectors for every utterance, grouped by sequence.
pub fn forward_corpus(
    model: &ModelParams,
    corpus: &Corpus,
    exec: Execution,
) -> Result<Vec<Vec<Vec<f64>>>> {
    check_dims(model, corpus)?;
    exec.map(&corpus.sequences, |s| model.forward(s))
        .into_iter()
        .collect()
}

/// Predicted classes for every utterance, grouped by sequence.
pub fn predict_corpus(
    model: &ModelParams,
    corpus: &Corpus,
    exec: Execution,
) -> Result<Vec<Vec<usize>>> {
    Ok(forward_corpus(model, corpus, exec)?
        .into_iter()
        .map(|probs| probs.iter().map(|p| argmax(p)).collect())
        .collect())
}

/// Flat `(predictions, labels)` over all utterances in corpus order.
pub fn predictions_and_labels(
    model: &ModelParams,
    corpus: &Corpus,
    exec: Execution,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let preds: Vec<usize> = predict_corpus(model, corpus, exec)?.into_iter().flatten().collect();
    let labels = corpus
        .records()
        .map(|r| r.class())
        .collect::<Result<Vec<_>>>()?;
    Ok((preds, labels))
}

pub fn evaluate(model: &ModelParams, corpus: &Corpus, exec: Execution) -> Result<MetricsReport> {
    let (preds, labels) = predictions_and_labels(model, corpus, exec)?;
    report(&confusion(&preds, &labels)?)
}

/// Fraction of utterances classified correctly.
pub fn accuracy(model: &ModelParams, corpus: &Corpus, exec: Execution) -> Result<f64> {
    let (preds, labels) = predictions_and_labels(model, corpus, exec)?;
    if preds.is_empty() {
        return Err(Error::contract("accuracy over an empty corpus"));
    }
    let hits = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}
