//! Ground-truth decoders for synthetic latents.

use super::synth::PatternDict;
use crate::conditioning::PhonemeTrack;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A detected sound event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub frame: usize,
    pub class: usize,
    pub score: f64,
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Mean latent row over each token window.
fn window_means(latent: &Tensor<f32>, track: &PhonemeTrack) -> Vec<Option<Vec<f64>>> {
    let frames = latent.rows();
    let d = latent.last_dim();
    track
        .windows()
        .into_iter()
        .map(|(start, len)| {
            let end = (start + len).min(frames);
            if start >= end {
                return None;
            }
            let mut m = vec![0.0; d];
            for f in start..end {
                for (acc, &v) in m.iter_mut().zip(latent.row(f)) {
                    *acc += v as f64;
                }
            }
            m.iter_mut().for_each(|v| *v /= (end - start) as f64);
            Some(m)
        })
        .collect()
}

fn best_token(mean: &[f64], dict: &PatternDict) -> (usize, f64) {
    let n = norm(mean);
    let mut best = (0, f64::NEG_INFINITY);
    for tok in 0..dict.vocab() {
        let p = dict.token_patterns.row(tok);
        let c: f64 = mean.iter().zip(p).map(|(&m, &q)| m * q as f64).sum();
        let corr = if n > 0.0 { c / n } else { 0.0 };
        if corr > best.1 {
            best = (tok, corr);
        }
    }
    best
}

/// Per token window, the vocabulary entry with the highest cosine to the
/// window mean. Windows lying outside the latent are skipped.
pub fn decode_tokens(latent: &Tensor<f32>, track: &PhonemeTrack, dict: &PatternDict) -> Vec<usize> {
    window_means(latent, track)
        .into_iter()
        .flatten()
        .map(|m| best_token(&m, dict).0)
        .collect()
}

/// Nearest speaker gain to the mean projection of each window onto its
/// decoded token pattern. `None` when no window is readable.
pub fn identify_speaker(latent: &Tensor<f32>, track: &PhonemeTrack, dict: &PatternDict) -> Option<usize> {
    let gains: Vec<f64> = window_means(latent, track)
        .into_iter()
        .flatten()
        .map(|m| {
            let (tok, _) = best_token(&m, dict);
            m.iter().zip(dict.token_patterns.row(tok)).map(|(&a, &b)| a * b as f64).sum()
        })
        .collect();
    if gains.is_empty() {
        return None;
    }
    let g = gains.iter().sum::<f64>() / gains.len() as f64;
    dict.speaker_gain
        .iter()
        .enumerate()
        .min_by(|a, b| (*a.1 as f64 - g).abs().total_cmp(&(*b.1 as f64 - g).abs()))
        .map(|(i, _)| i)
}

/// Matched filter against each class pattern with the event decay profile.
/// Reports local maxima of the best-class score that exceed `threshold`.
pub fn detect_onsets(latent: &Tensor<f32>, dict: &PatternDict, threshold: f64) -> Result<Vec<Detection>> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("onset threshold must be positive, got {threshold}")));
    }
    let frames = latent.rows();
    let taps: Vec<f64> = (0..dict.window).map(|k| dict.decay.powi(k as i32)).collect();
    let envelope: Vec<(f64, usize)> = (0..frames)
        .map(|f| {
            let mut best = (f64::NEG_INFINITY, 0);
            for c in 0..dict.n_classes() {
                let p = dict.class_patterns.row(c);
                let s: f64 = taps
                    .iter()
                    .enumerate()
                    .take_while(|(k, _)| f + k < frames)
                    .map(|(k, &h)| h * dot(latent.row(f + k), p))
                    .sum();
                if s > best.0 {
                    best = (s, c);
                }
            }
            best
        })
        .collect();
    let mut out = Vec::new();
    for f in 0..frames {
        let (s, class) = envelope[f];
        let left = f == 0 || s > envelope[f - 1].0;
        let right = f + 1 == frames || s >= envelope[f + 1].0;
        if left && right && s > threshold {
            out.push(Detection { frame: f, class, score: s });
        }
    }
    Ok(out)
}

/// Half the onset energy of a clean event.
pub fn default_threshold(dict: &PatternDict) -> f64 {
    0.5 * (0..dict.window).map(|k| dict.decay.powi(2 * k as i32)).sum::<f64>()
}
