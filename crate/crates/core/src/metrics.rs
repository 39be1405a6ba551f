//! Frame error rate and the table arithmetic built on it.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::model::AcousticModel;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Frames whose argmax differs from the label, and total frames.
pub fn count_errors(posteriors: &crate::tensor::Tensor, labels: &[u32]) -> (usize, usize) {
    let errors = labels
        .iter()
        .enumerate()
        .filter(|&(t, &y)| argmax(posteriors.row(t)) != y as usize)
        .count();
    (errors, labels.len())
}

/// Accent id to pass at inference: the utterance's own id when the model
/// routes on accent, nothing otherwise.
fn inference_label(model: &AcousticModel, utt: &Utterance) -> Option<u32> {
    model.requires_accent_label().then_some(utt.accent)
}

fn errors_for(model: &AcousticModel, utt: &Utterance) -> Result<(usize, usize)> {
    let post = model.forward(&utt.features, inference_label(model, utt))?;
    Ok(count_errors(&post, &utt.labels))
}

/// `100 × misclassified frames / frames` over `split`.
pub fn frame_error_rate(model: &AcousticModel, split: &[Utterance]) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::config("frame error rate of an empty split"));
    }
    let counts: Vec<(usize, usize)> = split.par_iter().map(|u| errors_for(model, u)).collect::<Result<_>>()?;
    let (e, n) = counts.iter().fold((0, 0), |(e, n), (a, b)| (e + a, n + b));
    Ok(100.0 * e as f64 / n as f64)
}

/// FER for each accent present in `split`.
pub fn fer_by_accent(model: &AcousticModel, split: &[Utterance]) -> Result<BTreeMap<u32, f64>> {
    let mut groups: BTreeMap<u32, Vec<Utterance>> = BTreeMap::new();
    for u in split {
        groups.entry(u.accent).or_default().push(u.clone());
    }
    groups.into_iter().map(|(a, utts)| Ok((a, frame_error_rate(model, &utts)?))).collect()
}

/// Mean of `per_accent` and its relative reduction (percent) against `baseline_avg`.
pub fn average_and_reduction(per_accent: &[f64], baseline_avg: f64) -> Result<(f64, f64)> {
    if per_accent.is_empty() {
        return Err(Error::config("average of no accents"));
    }
    if !(baseline_avg > 0.0) {
        return Err(Error::config("relative reduction needs a positive reference average"));
    }
    let avg = per_accent.iter().sum::<f64>() / per_accent.len() as f64;
    Ok((avg, relative_reduction(baseline_avg, avg)))
}

/// `100 × (reference − value) / reference`
pub fn relative_reduction(reference: f64, value: f64) -> f64 {
    100.0 * (reference - value) / reference
}

/// Rounds half away from zero to one decimal, as tables are printed.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}
