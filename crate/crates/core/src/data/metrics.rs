//! Toy analogues of Fréchet distance, onset accuracy and token error rate.

use serde::{Deserialize, Serialize};

use super::oracle::{decode_tokens, default_threshold, detect_onsets, identify_speaker};
use super::synth::{PatternDict, SyntheticSample, Task};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Matching tolerance for onsets, in frames.
pub const ONSET_TOLERANCE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub toy_fad: f64,
    pub onset_acc: f64,
    pub token_error_rate: f64,
    pub cond_adherence: f64,
    pub step: usize,
    pub variant: String,
    pub task: Task,
    pub task_mix: String,
    pub cfg_scale: f64,
    pub n_items: usize,
    pub failures: usize,
}

impl MetricsReport {
    /// Metric name and value pairs in a fixed order.
    pub fn values(&self) -> [(&'static str, f64); 4] {
        [
            ("toy_fad", self.toy_fad),
            ("onset_acc", self.onset_acc),
            ("token_error_rate", self.token_error_rate),
            ("cond_adherence", self.cond_adherence),
        ]
    }
}

/// Per-channel mean followed by per-channel standard deviation over time.
pub fn latent_features(latent: &Tensor<f32>) -> Vec<f64> {
    let (rows, d) = (latent.rows(), latent.last_dim());
    let mut mean = vec![0.0; d];
    for r in 0..rows {
        for (m, &v) in mean.iter_mut().zip(latent.row(r)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; d];
    for r in 0..rows {
        for ((s, &v), m) in var.iter_mut().zip(latent.row(r)).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    mean.into_iter().chain(var.into_iter().map(|s| (s / rows as f64).sqrt())).collect()
}

fn moments(set: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if set.len() < 2 {
        return Err(Error::Stats(format!("need at least 2 feature vectors, got {}", set.len())));
    }
    let d = set[0].len();
    if d == 0 || set.iter().any(|v| v.len() != d) {
        return Err(Error::Stats("feature vectors must share a nonzero length".into()));
    }
    let n = set.len() as f64;
    let mut mu = vec![0.0; d];
    for v in set {
        mu.iter_mut().zip(v).for_each(|(m, x)| *m += x);
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for v in set {
        var.iter_mut().zip(v).zip(&mu).for_each(|((s, x), m)| *s += (x - m).powi(2));
    }
    var.iter_mut().for_each(|s| *s /= n - 1.0);
    Ok((mu, var))
}

/// Squared Fréchet distance between diagonal Gaussians fitted to each set.
pub fn frechet_gaussian(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, var_a) = moments(a)?;
    let (mu_b, var_b) = moments(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::Stats("feature sets differ in dimension".into()));
    }
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y).powi(2)).sum();
    let cov_term: f64 = var_a
        .iter()
        .zip(&var_b)
        .map(|(&sa, &sb)| sa + sb - 2.0 * (sa * sb).sqrt())
        .sum();
    Ok((mean_term + cov_term).max(0.0))
}

pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Greedy one-to-one matching of sorted onset lists within `tol` frames.
pub fn matched_onsets(planted: &[usize], detected: &[usize], tol: usize) -> usize {
    let (mut i, mut j, mut hits) = (0, 0, 0);
    while i < planted.len() && j < detected.len() {
        let (p, d) = (planted[i], detected[j]);
        if p.abs_diff(d) <= tol {
            hits += 1;
            i += 1;
            j += 1;
        } else if d < p {
            j += 1;
        } else {
            i += 1;
        }
    }
    hits
}

/// Onset accuracy of one item: matches over the larger of the two counts.
pub fn onset_accuracy(planted: &[usize], detected: &[usize]) -> f64 {
    let denom = planted.len().max(detected.len());
    if denom == 0 {
        1.0
    } else {
        matched_onsets(planted, detected, ONSET_TOLERANCE) as f64 / denom as f64
    }
}

/// Most frequent class; ties go to the smaller id.
pub fn dominant_class(classes: &[usize]) -> Option<usize> {
    let max = *classes.iter().max()?;
    let mut counts = vec![0usize; max + 1];
    classes.iter().for_each(|&c| counts[c] += 1);
    let best = *counts.iter().max()?;
    counts.iter().position(|&c| c == best)
}

/// Metric totals for a set of generated latents scored against their references.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub toy_fad: f64,
    pub onset_acc: f64,
    pub token_error_rate: f64,
    pub cond_adherence: f64,
    pub n_items: usize,
    pub failures: usize,
}

/// Scores generated latents against their reference items. `None` entries are
/// failed generations and are excluded from every average.
pub fn score(refs: &[SyntheticSample], generated: &[Option<Tensor<f32>>], dict: &PatternDict) -> Result<Scores> {
    if refs.len() != generated.len() {
        return Err(Error::Stats(format!("{} references but {} generations", refs.len(), generated.len())));
    }
    if refs.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty".into()));
    }
    let threshold = default_threshold(dict);
    let (mut onset, mut adherence, mut edits, mut tokens, mut ok) = (0.0, 0.0, 0usize, 0usize, 0usize);
    let mut real_feats = Vec::new();
    let mut gen_feats = Vec::new();
    for (r, g) in refs.iter().zip(generated) {
        real_feats.push(latent_features(&r.latent));
        let Some(g) = g else { continue };
        ok += 1;
        gen_feats.push(latent_features(g));

        let detections = detect_onsets(g, dict, threshold)?;
        let frames: Vec<usize> = detections.iter().map(|d| d.frame).collect();
        onset += onset_accuracy(&r.event_times, &frames);

        let mut adheres = true;
        if r.task.has_sound() {
            let planted = dominant_class(&r.event_classes);
            let found = dominant_class(&detections.iter().map(|d| d.class).collect::<Vec<_>>());
            adheres &= planted == found;
        }
        if let Some(track) = &r.track {
            let decoded = decode_tokens(g, track, dict);
            edits += edit_distance(&track.tokens, &decoded);
            tokens += track.tokens.len();
            if r.task.has_speech() && !track.is_empty() {
                adheres &= identify_speaker(g, track, dict) == r.speaker_id;
            }
        }
        adherence += f64::from(u8::from(adheres));
    }
    let failures = refs.len() - ok;
    let toy_fad = if gen_feats.len() >= 2 {
        frechet_gaussian(&gen_feats, &real_feats)?
    } else {
        f64::NAN
    };
    let per = |x: f64| if ok == 0 { f64::NAN } else { x / ok as f64 };
    Ok(Scores {
        toy_fad,
        onset_acc: per(onset),
        token_error_rate: if tokens == 0 { 0.0 } else { edits as f64 / tokens as f64 },
        cond_adherence: per(adherence),
        n_items: refs.len(),
        failures,
    })
}
