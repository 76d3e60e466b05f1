//! Frame-aligned condition representations and their routing into the backbone.
//!
//! Video features are resampled onto the latent timeline, phoneme embeddings
//! are repeated by their durations, and each aggregation variant decides
//! whether a condition enters through cross-attention or in-context
//! concatenation with the noisy latent.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Init, Linear};
use crate::nn::ModelConfig;
use crate::nn::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{sc, Scalar, Tensor, Var};

/// Which route each condition takes into the DiT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Video through cross-attention, phonemes in-context.
    CrossV,
    /// Both through cross-attention.
    CrossVS,
    /// Phonemes through cross-attention, video in-context.
    ConcatV,
    /// Both in-context.
    ConcatVS,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::CrossV, Variant::CrossVS, Variant::ConcatV, Variant::ConcatVS];

    pub fn uses_cross_attention(self) -> bool {
        self != Variant::ConcatVS
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s}")))
    }
}

/// How in-context conditions are joined with the latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConcatAxis {
    /// Per-frame fusion along channels before the input projection.
    #[default]
    Channel,
    /// Projected condition frames prepended as extra tokens.
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Cross,
    Channel,
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Routing {
    pub video: Route,
    pub phoneme: Route,
}

pub fn routing(variant: Variant, axis: ConcatAxis) -> Routing {
    let in_context = match axis {
        ConcatAxis::Channel => Route::Channel,
        ConcatAxis::Sequence => Route::Sequence,
    };
    let (video, phoneme) = match variant {
        Variant::CrossV => (Route::Cross, in_context),
        Variant::CrossVS => (Route::Cross, Route::Cross),
        Variant::ConcatV => (in_context, Route::Cross),
        Variant::ConcatVS => (in_context, in_context),
    };
    Routing { video, phoneme }
}

/// Per-sample conditioning, aligned to the latent length.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle<T> {
    pub video: Tensor<T>,
    pub phoneme: Tensor<T>,
    /// Synthetic speaker id, looked up in a learned table by the model.
    pub speaker: Option<usize>,
    pub video_null: bool,
    pub phoneme_null: bool,
}

impl<T: Scalar> ConditionBundle<T> {
    pub fn new(video: Tensor<T>, phoneme: Tensor<T>, speaker: Option<usize>) -> Result<Self> {
        if video.rank() != 2 || phoneme.rank() != 2 {
            return Err(Error::Alignment("condition tensors must be [frames, dim]".into()));
        }
        if video.rows() != phoneme.rows() {
            return Err(Error::Alignment(format!(
                "video has {} frames, phoneme has {}",
                video.rows(),
                phoneme.rows()
            )));
        }
        Ok(Self {
            video,
            phoneme,
            speaker,
            video_null: false,
            phoneme_null: false,
        })
    }

    /// Both conditions null, no speaker.
    pub fn unconditional(frames: usize, d_v: usize, d_p: usize) -> Self {
        Self {
            video: Tensor::zeros(&[frames, d_v]),
            phoneme: Tensor::zeros(&[frames, d_p]),
            speaker: None,
            video_null: true,
            phoneme_null: true,
        }
    }

    pub fn frames(&self) -> usize {
        self.video.rows()
    }

    pub fn null_video(mut self) -> Self {
        self.video = Tensor::zeros(self.video.shape());
        self.video_null = true;
        self
    }

    pub fn null_phoneme(mut self) -> Self {
        self.phoneme = Tensor::zeros(self.phoneme.shape());
        self.phoneme_null = true;
        self
    }

    /// The `∅` condition of classifier-free guidance.
    pub fn null(&self) -> Self {
        Self::unconditional(self.frames(), self.video.last_dim(), self.phoneme.last_dim())
    }

    pub fn check_aligned(&self, frames: usize, d_v: usize, d_p: usize) -> Result<()> {
        if self.video.shape() != [frames, d_v] || self.phoneme.shape() != [frames, d_p] {
            return Err(Error::Alignment(format!(
                "bundle video {:?} / phoneme {:?}, model expects [{frames}, {d_v}] / [{frames}, {d_p}]",
                self.video.shape(),
                self.phoneme.shape()
            )));
        }
        Ok(())
    }
}

/// Token ids with per-token frame durations, starting at frame `offset`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhonemeTrack {
    pub tokens: Vec<usize>,
    pub durations: Vec<usize>,
    #[serde(default)]
    pub offset: usize,
}

impl PhonemeTrack {
    pub fn new(tokens: Vec<usize>, durations: Vec<usize>) -> Result<Self> {
        if tokens.len() != durations.len() {
            return Err(Error::Alignment(format!(
                "{} tokens but {} durations",
                tokens.len(),
                durations.len()
            )));
        }
        if durations.contains(&0) {
            return Err(Error::Alignment("durations must be positive".into()));
        }
        Ok(Self { tokens, durations, offset: 0 })
    }

    /// Shifts the whole track to start at `offset`.
    pub fn with_offset(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// One past the last covered frame.
    pub fn total_frames(&self) -> usize {
        self.offset + self.durations.iter().sum::<usize>()
    }

    /// `(start, len)` of every token window.
    pub fn windows(&self) -> Vec<(usize, usize)> {
        let mut start = self.offset;
        self.durations
            .iter()
            .map(|&d| {
                let w = (start, d);
                start += d;
                w
            })
            .collect()
    }

    /// Start frame of every token.
    pub fn onsets(&self) -> Vec<usize> {
        self.windows().into_iter().map(|(s, _)| s).collect()
    }
}

/// Linear resampling of `[T_v, D]` onto `frames` points spread uniformly over
/// `[0, T_v - 1]`; both endpoints are copied exactly.
pub fn interpolate_video<T: Scalar>(raw: &Tensor<T>, frames: usize) -> Result<Tensor<T>> {
    if raw.is_empty() || raw.rank() != 2 {
        return Err(Error::EmptyInput("video features need at least one frame".into()));
    }
    if frames == 0 {
        return Err(Error::EmptyInput("target length is zero".into()));
    }
    let (tv, d) = (raw.rows(), raw.last_dim());
    let mut out = Tensor::zeros(&[frames, d]);
    for i in 0..frames {
        let (lo, hi, w) = if frames == 1 || tv == 1 {
            (0, 0, 0.0)
        } else if i == frames - 1 {
            (tv - 1, tv - 1, 0.0)
        } else {
            let pos = i as f64 * (tv - 1) as f64 / (frames - 1) as f64;
            let lo = pos.floor() as usize;
            (lo, (lo + 1).min(tv - 1), pos - lo as f64)
        };
        let w = sc::<T>(w);
        for c in 0..d {
            let a = raw.at(lo, c);
            let v = if w == T::zero() { a } else { a + w * (raw.at(hi, c) - a) };
            out.set(i, c, v);
        }
    }
    Ok(out)
}

/// Repeats each token embedding for its duration and zero-pads to `frames`.
pub fn expand_phonemes<T: Scalar>(track: &PhonemeTrack, table: &Tensor<T>, frames: usize) -> Result<Tensor<T>> {
    let total = track.total_frames();
    if total > frames {
        return Err(Error::Alignment(format!(
            "durations cover {total} frames, latent has {frames}"
        )));
    }
    let vocab = table.rows();
    let mut out = Tensor::zeros(&[frames, table.last_dim()]);
    for ((&tok, &dur), (start, _)) in track.tokens.iter().zip(&track.durations).zip(track.windows()) {
        if tok >= vocab {
            return Err(Error::Alignment(format!("token {tok} outside vocabulary of {vocab}")));
        }
        for f in start..start + dur {
            out.row_mut(f).copy_from_slice(table.row(tok));
        }
    }
    Ok(out)
}

/// Independently nulls video with probability `p_v` and phonemes with `p_p`.
pub fn drop_conditions<T: Scalar>(
    bundle: ConditionBundle<T>,
    p_v: f64,
    p_p: f64,
    rng: &mut impl Rng,
) -> ConditionBundle<T> {
    // Always consume two draws so the stream position does not depend on the outcome.
    let drop_v = rng.gen::<f64>() < p_v;
    let drop_p = rng.gen::<f64>() < p_p;
    let mut b = bundle;
    if drop_v {
        b = b.null_video();
    }
    if drop_p {
        b = b.null_phoneme();
    }
    b
}

/// A token sequence entering the backbone, with its rotary positions.
#[derive(Debug, Clone)]
pub struct Placed {
    pub tokens: Var,
    pub positions: Vec<usize>,
}

/// Condition inputs split by route.
#[derive(Debug, Clone)]
pub struct Assembled<T> {
    /// Keys/values for every cross-attention layer.
    pub cross: Option<Placed>,
    /// Raw features to concatenate with the latent along channels.
    pub in_context: Option<Tensor<T>>,
    /// Extra tokens placed between the timestep token and the latent.
    pub prefixes: Vec<Placed>,
}

/// Learned projections that bring conditions to the model width.
#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    pub routing: Routing,
    pub d_v: usize,
    pub d_p: usize,
    video_proj: Option<Linear>,
    phoneme_proj: Option<Linear>,
    speaker_table: Option<ParamId>,
    speaker_proj: Option<Linear>,
}

impl ConditionEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (d_model, d_v, d_p, n_speakers) = (cfg.d_model, cfg.d_v, cfg.d_p, cfg.n_speakers);
        let routing = routing(cfg.variant, cfg.concat_axis);
        let projected = |r: Route| r != Route::Channel;
        let video_proj = projected(routing.video)
            .then(|| Linear::new(store, "cond.video", d_v, d_model, true, Init::Scaled, rng));
        let phoneme_proj = projected(routing.phoneme)
            .then(|| Linear::new(store, "cond.phoneme", d_p, d_model, true, Init::Scaled, rng));
        let speaker_table = (n_speakers > 0).then(|| store.add_normal("cond.speaker", &[n_speakers, d_v], 1.0, rng));
        let speaker_proj = (n_speakers > 0 && routing.video != Route::Cross)
            .then(|| Linear::new(store, "cond.speaker_proj", d_v, d_model, true, Init::Scaled, rng));
        Self {
            routing,
            d_v,
            d_p,
            video_proj,
            phoneme_proj,
            speaker_table,
            speaker_proj,
        }
    }

    /// In-context channels added to the latent before the input projection.
    pub fn in_context_channels(&self) -> usize {
        let mut c = 0;
        if self.routing.video == Route::Channel {
            c += self.d_v;
        }
        if self.routing.phoneme == Route::Channel {
            c += self.d_p;
        }
        c
    }

    pub fn assemble<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, bundle: &ConditionBundle<T>) -> Result<Assembled<T>> {
        let frames = bundle.frames();
        let frame_pos: Vec<usize> = (0..frames).collect();

        let speaker_row = match (bundle.speaker, self.speaker_table) {
            (Some(id), Some(table)) => {
                let t = ctx.p(table);
                Some(ctx.tape.gather_rows(t, &[id])?)
            }
            (Some(id), None) => {
                return Err(Error::Config(format!("speaker {id} given but the model has no speaker table")))
            }
            (None, _) => None,
        };

        let mut cross: Vec<Placed> = Vec::new();
        let mut channel: Vec<&Tensor<T>> = Vec::new();
        let mut prefixes: Vec<Placed> = Vec::new();

        // video, with the speaker prefix following its route
        let video = ctx.constant(bundle.video.clone());
        match self.routing.video {
            Route::Cross => {
                let (rows, positions) = match speaker_row {
                    Some(s) => (ctx.tape.concat_rows(&[s, video])?, prefixed(&frame_pos)),
                    None => (video, frame_pos.clone()),
                };
                let tokens = self.video_proj.expect("video projection").forward(ctx, rows)?;
                cross.push(Placed { tokens, positions });
            }
            route => {
                if let Some(s) = speaker_row {
                    let tokens = self.speaker_proj.expect("speaker projection").forward(ctx, s)?;
                    prefixes.push(Placed { tokens, positions: vec![0] });
                }
                if route == Route::Channel {
                    channel.push(&bundle.video);
                } else {
                    let tokens = self.video_proj.expect("video projection").forward(ctx, video)?;
                    prefixes.push(Placed { tokens, positions: frame_pos.clone() });
                }
            }
        }

        match self.routing.phoneme {
            Route::Channel => channel.push(&bundle.phoneme),
            route => {
                let ph = ctx.constant(bundle.phoneme.clone());
                let tokens = self.phoneme_proj.expect("phoneme projection").forward(ctx, ph)?;
                let placed = Placed { tokens, positions: frame_pos.clone() };
                if route == Route::Cross {
                    cross.push(placed);
                } else {
                    prefixes.push(placed);
                }
            }
        }

        let cross = match cross.len() {
            0 => None,
            1 => cross.pop(),
            _ => {
                let vars: Vec<Var> = cross.iter().map(|p| p.tokens).collect();
                let tokens = ctx.tape.concat_rows(&vars)?;
                let positions = cross.into_iter().flat_map(|p| p.positions).collect();
                Some(Placed { tokens, positions })
            }
        };

        let in_context = match channel.as_slice() {
            [] => None,
            [one] => Some((*one).clone()),
            many => {
                let d: usize = many.iter().map(|t| t.last_dim()).sum();
                let mut out = Tensor::zeros(&[frames, d]);
                for f in 0..frames {
                    let mut off = 0;
                    for t in many {
                        let w = t.last_dim();
                        out.row_mut(f)[off..off + w].copy_from_slice(t.row(f));
                        off += w;
                    }
                }
                Some(out)
            }
        };

        Ok(Assembled {
            cross,
            in_context,
            prefixes,
        })
    }
}

fn prefixed(frame_pos: &[usize]) -> Vec<usize> {
    std::iter::once(0).chain(frame_pos.iter().copied()).collect()
}
