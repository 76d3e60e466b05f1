use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::{expand_phonemes, interpolate_video, ConditionBundle, PhonemeTrack};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shortest and longest synthetic token duration, in latent frames.
pub const MIN_DURATION: usize = 2;
pub const MAX_DURATION: usize = 6;
const DURATION_RETRIES: usize = 10;
const MAX_PATTERN_COSINE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "v2s")]
    V2S,
    #[serde(rename = "visual_tts")]
    VisualTTS,
    #[serde(rename = "tts")]
    TTS,
    #[serde(rename = "mix")]
    Mix,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::V2S, Task::VisualTTS, Task::TTS, Task::Mix];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::V2S => "v2s",
            Task::VisualTTS => "visual_tts",
            Task::TTS => "tts",
            Task::Mix => "mix",
        }
    }

    pub fn has_speech(self) -> bool {
        self != Task::V2S
    }

    pub fn has_sound(self) -> bool {
        matches!(self, Task::V2S | Task::Mix)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    Concat,
    Overlay,
}

/// Shape and difficulty of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub latent_len: usize,
    pub latent_dim: usize,
    /// Raw video frame count before resampling onto the latent timeline.
    pub video_len: usize,
    pub d_v: usize,
    pub d_p: usize,
    pub n_classes: usize,
    pub vocab: usize,
    pub n_speakers: usize,
    /// Frames covered by one sound event.
    pub window: usize,
    /// Per-frame amplitude decay inside an event window.
    pub decay: f64,
    /// Background noise on latents.
    pub noise: f64,
    pub video_noise: f64,
    pub max_events: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub dict_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            latent_len: 24,
            latent_dim: 8,
            video_len: 12,
            d_v: 8,
            d_p: 8,
            n_classes: 4,
            vocab: 8,
            n_speakers: 4,
            window: 4,
            decay: 0.6,
            noise: 0.05,
            video_noise: 0.05,
            max_events: 3,
            min_tokens: 2,
            max_tokens: 5,
            dict_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("data.{m}")));
        if self.latent_len < 2 || self.video_len < 2 {
            return fail("latent_len and video_len must be at least 2".into());
        }
        if self.latent_dim < 2 {
            return fail("latent_dim must be at least 2".into());
        }
        if self.n_classes == 0 || self.d_v < self.n_classes + 1 {
            return fail(format!("d_v = {} cannot hold {} class channels plus the lip channel", self.d_v, self.n_classes));
        }
        if self.vocab < 2 {
            return fail("vocab must be at least 2".into());
        }
        if self.d_p == 0 || self.n_speakers == 0 {
            return fail("d_p and n_speakers must be positive".into());
        }
        if self.window == 0 || !(self.decay > 0.0 && self.decay <= 1.0) {
            return fail("window must be positive and decay in (0, 1]".into());
        }
        if self.max_events * self.window > self.latent_len {
            return fail("max_events * window exceeds latent_len".into());
        }
        if !(self.noise >= 0.0 && self.video_noise >= 0.0) {
            return fail("noise levels must be nonnegative".into());
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return fail("need 1 <= min_tokens <= max_tokens".into());
        }
        Ok(())
    }

    /// Latent channels `[0, k)` carry sound, `[k, latent_dim)` carry speech.
    pub fn sound_channels(&self) -> usize {
        self.latent_dim / 2
    }

    /// Matched-filter energy of a clean event at its onset.
    pub fn event_energy(&self) -> f64 {
        (0..self.window).map(|k| self.decay.powi(2 * k as i32)).sum()
    }
}

/// Fixed class and token patterns, speaker gains and the phoneme embedding
/// table, all derived from one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternDict {
    pub seed: u64,
    pub window: usize,
    pub decay: f64,
    /// `[n_classes, latent_dim]`, unit rows supported on the sound channels.
    pub class_patterns: Tensor<f32>,
    /// `[vocab, latent_dim]`, unit rows supported on the speech channels.
    pub token_patterns: Tensor<f32>,
    pub speaker_gain: Vec<f32>,
    /// `[vocab, d_p]`
    pub phoneme_table: Tensor<f32>,
}

impl PatternDict {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.dict_seed);
        let k = cfg.sound_channels();
        let class_patterns = spread_patterns(&mut rng, cfg.n_classes, cfg.latent_dim, 0..k)?;
        let token_patterns = spread_patterns(&mut rng, cfg.vocab, cfg.latent_dim, k..cfg.latent_dim)?;
        let speaker_gain = (0..cfg.n_speakers)
            .map(|s| {
                if cfg.n_speakers == 1 {
                    1.0
                } else {
                    0.6 + 0.8 * s as f32 / (cfg.n_speakers - 1) as f32
                }
            })
            .collect();
        let phoneme_table = Tensor::from_fn(&[cfg.vocab, cfg.d_p], || rng.sample(StandardNormal));
        Ok(Self {
            seed: cfg.dict_seed,
            window: cfg.window,
            decay: cfg.decay,
            class_patterns,
            token_patterns,
            speaker_gain,
            phoneme_table,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_patterns.rows()
    }

    pub fn vocab(&self) -> usize {
        self.token_patterns.rows()
    }
}

/// Unit-norm random rows on `channels`, redrawn until no pair is nearly parallel.
fn spread_patterns(
    rng: &mut ChaCha8Rng,
    n: usize,
    dim: usize,
    channels: std::ops::Range<usize>,
) -> Result<Tensor<f32>> {
    for _ in 0..1000 {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for _ in 0..n {
            let mut r = vec![0.0; dim];
            for c in channels.clone() {
                r[c] = rng.sample(StandardNormal);
            }
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter_mut().for_each(|v| *v /= norm);
            rows.push(r);
        }
        let spread = rows.iter().enumerate().all(|(i, a)| {
            rows[..i]
                .iter()
                .all(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() < MAX_PATTERN_COSINE)
        });
        if spread {
            let data = rows.concat().into_iter().map(|v| v as f32).collect();
            return Tensor::new(&[n, dim], data);
        }
    }
    Err(Error::Config(format!(
        "cannot place {n} distinct patterns on {} channels",
        channels.len()
    )))
}

/// One synthetic training or evaluation item with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub task: Task,
    /// `[video_len, d_v]`
    pub video_raw: Tensor<f32>,
    pub track: Option<PhonemeTrack>,
    pub speaker_id: Option<usize>,
    /// `[latent_len, latent_dim]`
    pub latent: Tensor<f32>,
    pub event_times: Vec<usize>,
    pub event_classes: Vec<usize>,
    pub rng_seed: u64,
}

/// Generator bound to one configuration and its pattern dictionary.
#[derive(Debug, Clone)]
pub struct Synth {
    pub cfg: SynthConfig,
    pub dict: PatternDict,
}

impl Synth {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        let dict = PatternDict::new(&cfg)?;
        Ok(Self { cfg, dict })
    }

    /// Sound events at random frames. Video carries a class-coded bump at each
    /// event; the latent carries the class pattern decaying over `window` frames.
    pub fn sound(&self, rng: &mut impl Rng, n_events: usize) -> Result<SyntheticSample> {
        let seed = rng.gen();
        self.sound_from_seed(seed, n_events)
    }

    pub fn sound_from_seed(&self, seed: u64, n_events: usize) -> Result<SyntheticSample> {
        let cfg = &self.cfg;
        if n_events * cfg.window > cfg.latent_len {
            return Err(Error::Density(format!(
                "{n_events} events of {} frames do not fit in {} frames",
                cfg.window, cfg.latent_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // spacing >= window keeps event windows disjoint
        let slack = cfg.latent_len - n_events * cfg.window;
        let mut offsets: Vec<usize> = (0..n_events).map(|_| rng.gen_range(0..=slack)).collect();
        offsets.sort_unstable();
        let times: Vec<usize> = offsets.iter().enumerate().map(|(i, &o)| o + i * cfg.window).collect();
        let classes: Vec<usize> = (0..n_events).map(|_| rng.gen_range(0..cfg.n_classes)).collect();

        let mut latent = Tensor::zeros(&[cfg.latent_len, cfg.latent_dim]);
        let mut video = Tensor::zeros(&[cfg.video_len, cfg.d_v]);
        for (&f, &c) in times.iter().zip(&classes) {
            self.stamp_event(&mut latent, f, c, cfg.latent_len);
            self.stamp_bump(&mut video, f, 1 + c);
        }
        add_noise(&mut latent, cfg.noise, &mut rng);
        add_noise(&mut video, cfg.video_noise, &mut rng);
        Ok(SyntheticSample {
            task: Task::V2S,
            video_raw: video,
            track: None,
            speaker_id: None,
            latent,
            event_times: times,
            event_classes: classes,
            rng_seed: seed,
        })
    }

    /// Token sequence with random durations rendered as speaker-scaled patterns.
    /// With video, a lip channel pulses at every token onset.
    pub fn speech(&self, rng: &mut impl Rng, n_tokens: usize, with_video: bool) -> Result<SyntheticSample> {
        let seed = rng.gen();
        self.speech_from_seed(seed, n_tokens, with_video)
    }

    pub fn speech_from_seed(&self, seed: u64, n_tokens: usize, with_video: bool) -> Result<SyntheticSample> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens: Vec<usize> = (0..n_tokens).map(|_| rng.gen_range(0..cfg.vocab)).collect();
        let mut durations = Vec::new();
        for _ in 0..DURATION_RETRIES {
            durations = (0..n_tokens).map(|_| rng.gen_range(MIN_DURATION..=MAX_DURATION)).collect();
            if durations.iter().sum::<usize>() <= cfg.latent_len {
                break;
            }
        }
        let track = fit_track(tokens, durations, cfg.latent_len)?;
        let speaker = rng.gen_range(0..cfg.n_speakers);
        self.render_speech(track, speaker, with_video, seed, &mut rng)
    }

    /// Renders a given track; used directly by tests and by `speech`.
    pub fn speech_from_track(
        &self,
        track: PhonemeTrack,
        speaker: usize,
        with_video: bool,
        seed: u64,
    ) -> Result<SyntheticSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.render_speech(track, speaker, with_video, seed, &mut rng)
    }

    fn render_speech(
        &self,
        track: PhonemeTrack,
        speaker: usize,
        with_video: bool,
        seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<SyntheticSample> {
        let cfg = &self.cfg;
        if track.total_frames() > cfg.latent_len {
            return Err(Error::Alignment(format!(
                "track covers {} frames, latent has {}",
                track.total_frames(),
                cfg.latent_len
            )));
        }
        if speaker >= cfg.n_speakers || track.tokens.iter().any(|&t| t >= cfg.vocab) {
            return Err(Error::Config("speaker or token outside the dictionary".into()));
        }
        let gain = self.dict.speaker_gain[speaker];
        let mut latent = Tensor::zeros(&[cfg.latent_len, cfg.latent_dim]);
        for (&tok, (start, len)) in track.tokens.iter().zip(track.windows()) {
            let pattern = self.dict.token_patterns.row(tok);
            for f in start..start + len {
                for (v, &p) in latent.row_mut(f).iter_mut().zip(pattern) {
                    *v += gain * p;
                }
            }
        }
        let mut video = Tensor::zeros(&[cfg.video_len, cfg.d_v]);
        if with_video {
            for onset in track.onsets() {
                self.stamp_bump(&mut video, onset, 0);
            }
        }
        add_noise(&mut latent, cfg.noise, rng);
        if with_video {
            add_noise(&mut video, cfg.video_noise, rng);
        }
        Ok(SyntheticSample {
            task: if with_video { Task::VisualTTS } else { Task::TTS },
            video_raw: video,
            track: Some(track),
            speaker_id: Some(speaker),
            latent,
            event_times: Vec::new(),
            event_classes: Vec::new(),
            rng_seed: seed,
        })
    }

    /// Sound and speech combined by a random time split or by summation.
    pub fn mix(
        &self,
        a: &SyntheticSample,
        b: &SyntheticSample,
        mode: MixMode,
        rng: &mut impl Rng,
    ) -> Result<SyntheticSample> {
        if a.task != Task::V2S || !matches!(b.task, Task::VisualTTS | Task::TTS) {
            return Err(Error::Config(format!("mix needs a v2s and a speech sample, got {} and {}", a.task, b.task)));
        }
        if a.latent.shape() != b.latent.shape() || a.video_raw.shape() != b.video_raw.shape() {
            return Err(Error::dim("mix", "samples differ in shape"));
        }
        let seed = rng.gen();
        match mode {
            MixMode::Overlay => {
                let mut out = b.clone();
                out.task = Task::Mix;
                out.latent = a.latent.add(&b.latent)?;
                out.video_raw = a.video_raw.add(&b.video_raw)?;
                out.event_times = a.event_times.clone();
                out.event_classes = a.event_classes.clone();
                out.rng_seed = seed;
                Ok(out)
            }
            MixMode::Concat => {
                // split on a token boundary so no token is cut
                let onsets = b.track.as_ref().map(PhonemeTrack::onsets).unwrap_or_default();
                let split = onsets.choose(rng).copied().unwrap_or(0);
                let mut out = self.concat_at(a, b, split)?;
                out.rng_seed = seed;
                Ok(out)
            }
        }
    }

    /// `a` before frame `split`, `b` from `split` on, conditions cut identically.
    pub fn concat_at(&self, a: &SyntheticSample, b: &SyntheticSample, split: usize) -> Result<SyntheticSample> {
        let cfg = &self.cfg;
        let mut latent = b.latent.clone();
        for f in 0..split.min(cfg.latent_len) {
            latent.row_mut(f).copy_from_slice(a.latent.row(f));
        }
        let mut video = b.video_raw.clone();
        for j in 0..cfg.video_len {
            if self.video_to_latent(j) < split as f64 {
                video.row_mut(j).copy_from_slice(a.video_raw.row(j));
            }
        }
        let keep: Vec<usize> = (0..a.event_times.len()).filter(|&i| a.event_times[i] < split).collect();
        let track = match &b.track {
            Some(t) => {
                let kept: Vec<usize> = t.windows().iter().enumerate().filter(|(_, w)| w.0 >= split).map(|(i, _)| i).collect();
                let offset = kept.first().map_or(split, |&i| t.windows()[i].0);
                Some(
                    PhonemeTrack::new(
                        kept.iter().map(|&i| t.tokens[i]).collect(),
                        kept.iter().map(|&i| t.durations[i]).collect(),
                    )?
                    .with_offset(offset),
                )
            }
            None => None,
        };
        Ok(SyntheticSample {
            task: Task::Mix,
            video_raw: video,
            track,
            speaker_id: b.speaker_id,
            latent,
            event_times: keep.iter().map(|&i| a.event_times[i]).collect(),
            event_classes: keep.iter().map(|&i| a.event_classes[i]).collect(),
            rng_seed: a.rng_seed ^ b.rng_seed.rotate_left(17),
        })
    }

    /// Draws one item of `task` with random event and token counts.
    pub fn sample<R: Rng>(&self, task: Task, rng: &mut R) -> Result<SyntheticSample> {
        let cfg = &self.cfg;
        let max_events = cfg.max_events;
        let (lo, hi) = (cfg.min_tokens, cfg.max_tokens);
        let n_events = |rng: &mut R| if max_events == 0 { 0 } else { rng.gen_range(1..=max_events) };
        match task {
            Task::V2S => {
                let n = n_events(rng);
                self.sound(rng, n)
            }
            Task::VisualTTS | Task::TTS => {
                let n = rng.gen_range(lo..=hi);
                self.speech(rng, n, task == Task::VisualTTS)
            }
            Task::Mix => {
                let n = n_events(rng);
                let a = self.sound(rng, n)?;
                let n = rng.gen_range(lo..=hi);
                let b = self.speech(rng, n, true)?;
                let mode = if rng.gen::<bool>() { MixMode::Concat } else { MixMode::Overlay };
                self.mix(&a, &b, mode, rng)
            }
        }
    }

    /// `n` items of one task from a dedicated seed.
    pub fn eval_set(&self, task: Task, n: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample(task, &mut rng)).collect()
    }

    /// Frame-aligned conditions with the task's masking applied: sound items
    /// carry no phonemes, audio-only speech carries no video.
    pub fn bundle(&self, s: &SyntheticSample) -> Result<ConditionBundle<f32>> {
        let cfg = &self.cfg;
        let video = interpolate_video(&s.video_raw, cfg.latent_len)?;
        let phoneme = match &s.track {
            Some(t) => expand_phonemes(t, &self.dict.phoneme_table, cfg.latent_len)?,
            None => Tensor::zeros(&[cfg.latent_len, cfg.d_p]),
        };
        let speaker = if s.task.has_speech() { s.speaker_id } else { None };
        let b = ConditionBundle::new(video, phoneme, speaker)?;
        Ok(match s.task {
            Task::V2S => b.null_phoneme(),
            Task::TTS => b.null_video(),
            Task::VisualTTS | Task::Mix => b,
        })
    }

    fn video_to_latent(&self, j: usize) -> f64 {
        j as f64 * (self.cfg.latent_len - 1) as f64 / (self.cfg.video_len - 1) as f64
    }

    fn stamp_event(&self, latent: &mut Tensor<f32>, frame: usize, class: usize, frames: usize) {
        let pattern = self.dict.class_patterns.row(class).to_vec();
        for k in 0..self.cfg.window {
            if frame + k >= frames {
                break;
            }
            let amp = self.cfg.decay.powi(k as i32) as f32;
            for (v, &p) in latent.row_mut(frame + k).iter_mut().zip(&pattern) {
                *v += amp * p;
            }
        }
    }

    /// Gaussian bump on one video channel centred on the latent frame's video time.
    fn stamp_bump(&self, video: &mut Tensor<f32>, latent_frame: usize, channel: usize) {
        let cfg = &self.cfg;
        let centre = latent_frame as f64 * (cfg.video_len - 1) as f64 / (cfg.latent_len - 1) as f64;
        for j in 0..cfg.video_len {
            let d = j as f64 - centre;
            let v = (-d * d / (2.0 * 0.6 * 0.6)).exp();
            if v > 1e-4 {
                let cur = video.at(j, channel);
                video.set(j, channel, cur + v as f32);
            }
        }
    }
}

/// Truncates from the end, then shortens the last token, until the track fits.
fn fit_track(mut tokens: Vec<usize>, mut durations: Vec<usize>, frames: usize) -> Result<PhonemeTrack> {
    while durations.iter().sum::<usize>() > frames && tokens.len() > 1 {
        tokens.pop();
        durations.pop();
    }
    if let Some(d) = durations.last_mut() {
        *d = (*d).min(frames);
    }
    PhonemeTrack::new(tokens, durations)
}

fn add_noise(t: &mut Tensor<f32>, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma > 0.0 {
        for v in t.data_mut() {
            *v += (sigma * rng.sample::<f64, _>(StandardNormal)) as f32;
        }
    }
}
