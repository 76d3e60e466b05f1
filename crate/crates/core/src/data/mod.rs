//! Synthetic sound and speech corpora with known ground truth, their oracle
//! decoders, and the desk-scale metrics computed from them.

mod evalset;
mod metrics;
mod oracle;
mod synth;

pub use evalset::{load_eval_set, save_eval_set, EvalSetManifest, ItemRecord, MANIFEST};
pub use metrics::{
    dominant_class, edit_distance, frechet_gaussian, latent_features, matched_onsets, onset_accuracy, score,
    MetricsReport, Scores, ONSET_TOLERANCE,
};
pub use oracle::{decode_tokens, default_threshold, detect_onsets, identify_speaker, Detection};
pub use synth::{MixMode, PatternDict, Synth, SynthConfig, SyntheticSample, Task, MAX_DURATION, MIN_DURATION};
