//! Verlet motion tokenizer.
//!
//! A track is cut into 0.5 s segments. Each segment displacement is expressed
//! either in the agent's frame at the segment start (agent-centric) or in the
//! scene frame (scene-centric), quantised per axis into 128 bins over ±18 m,
//! and the token is the per-axis difference to the previous segment's bin,
//! clamped to ±6. 13 × 13 differences give the 169-symbol vocabulary.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{Pose2, Vec2};
use crate::math;
use crate::scenario::{AgentTrack, Scenario, NATIVE_DT};

pub const VOCAB_SIZE: usize = 169;
/// `(dx, dy) = (0, 0)`: repeat the previous segment's displacement.
pub const KEEP_TOKEN: MotionToken = MotionToken(84);
/// Below this speed the frame heading is carried forward.
pub const MIN_HEADING_SPEED: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TokenizeError {
    #[error("track {id} has no valid state at t = {time:.2} s")]
    Gap { id: u32, time: f64 },
    #[error("token index {0} outside vocabulary")]
    BadToken(u32),
    #[error("window needs at least two segments, got {0}")]
    ShortWindow(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    AgentCentric,
    SceneCentric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub dt: f64,
    pub bins_per_axis: u32,
    pub range: f64,
    pub verlet_span: i32,
    pub mode: TokenizerMode,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { dt: 0.5, bins_per_axis: 128, range: 18.0, verlet_span: 6, mode: TokenizerMode::AgentCentric }
    }
}

impl TokenizerConfig {
    pub fn scene_centric() -> Self {
        Self { mode: TokenizerMode::SceneCentric, ..Self::default() }
    }

    pub fn bin_width(&self) -> f64 {
        2.0 * self.range / self.bins_per_axis as f64
    }

    pub fn vocab_size(&self) -> usize {
        let side = (2 * self.verlet_span + 1) as usize;
        side * side
    }

    /// Half-open bins `[lo, lo + w)` with floor indexing, clamped into range.
    pub fn quantize(&self, d: f64) -> i32 {
        let b = math::floor((d + self.range) / self.bin_width());
        b.clamp(0.0, (self.bins_per_axis - 1) as f64) as i32
    }

    pub fn bin_center(&self, b: i32) -> f64 {
        -self.range + (b as f64 + 0.5) * self.bin_width()
    }

    /// Bin used for a segment displacement. The half-bin offset makes this a
    /// round-to-nearest on the grid `-range + k w`, so zero motion sits in
    /// the middle of bin 64 instead of on its lower edge.
    pub fn encode_axis(&self, d: f64) -> i32 {
        self.quantize(d + 0.5 * self.bin_width())
    }

    /// Inverse of [`TokenizerConfig::encode_axis`]: the bin centre shifted back.
    pub fn decode_axis(&self, b: i32) -> f64 {
        self.bin_center(b) - 0.5 * self.bin_width()
    }

    pub fn token(&self, dx: i32, dy: i32) -> MotionToken {
        let span = self.verlet_span;
        debug_assert!(dx.abs() <= span && dy.abs() <= span);
        MotionToken(((dx + span) * (2 * span + 1) + (dy + span)) as u32)
    }

    pub fn components(&self, t: MotionToken) -> (i32, i32) {
        let side = 2 * self.verlet_span + 1;
        let i = t.0 as i32;
        (i / side - self.verlet_span, i % side - self.verlet_span)
    }

    pub fn check_token(&self, t: MotionToken) -> Result<(), TokenizeError> {
        if (t.0 as usize) < self.vocab_size() {
            Ok(())
        } else {
            Err(TokenizeError::BadToken(t.0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MotionToken(pub u32);

impl MotionToken {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedTrack {
    pub reference_bins: (i32, i32),
    pub tokens: Vec<MotionToken>,
    /// Pose at the window start; its heading is the first agent frame.
    pub start_state: Pose2,
    /// Continuous displacement of the reference segment, tokenization frame.
    pub reference_displacement: Vec2,
    /// Number of clamped difference components.
    pub clamped: usize,
}

/// Incremental Verlet decoder: the state needed to turn one more token into
/// one more 0.5 s segment. Used by [`detokenize`] and by rollouts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerletState {
    pub position: Vec2,
    /// Heading of the frame the next segment is expressed in.
    pub frame_heading: f64,
    pub bins: (i32, i32),
}

impl VerletState {
    /// State after decoding the reference segment.
    pub fn from_reference(start: Pose2, reference_bins: (i32, i32), cfg: &TokenizerConfig) -> (Self, Vec2) {
        let mut s = VerletState {
            position: start.position(),
            frame_heading: match cfg.mode {
                TokenizerMode::AgentCentric => start.heading,
                TokenizerMode::SceneCentric => 0.0,
            },
            bins: reference_bins,
        };
        let seg = s.advance_bins(reference_bins, cfg);
        (s, seg)
    }

    fn advance_bins(&mut self, bins: (i32, i32), cfg: &TokenizerConfig) -> Vec2 {
        self.bins = bins;
        let local = Vec2::new(cfg.decode_axis(bins.0), cfg.decode_axis(bins.1));
        let world = local.rotate(self.frame_heading);
        self.position = self.position + world;
        if cfg.mode == TokenizerMode::AgentCentric && world.norm() >= MIN_HEADING_SPEED * cfg.dt {
            self.frame_heading = world.angle();
        }
        world
    }

    /// Applies one token; returns the decoded world displacement.
    pub fn advance(&mut self, token: MotionToken, cfg: &TokenizerConfig) -> Vec2 {
        let (dx, dy) = cfg.components(token);
        let max_bin = cfg.bins_per_axis as i32 - 1;
        let bins = ((self.bins.0 + dx).clamp(0, max_bin), (self.bins.1 + dy).clamp(0, max_bin));
        self.advance_bins(bins, cfg)
    }

    /// Pose with the heading of the last decoded motion.
    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.position.x, self.position.y, self.frame_heading)
    }

    /// Velocity of the last decoded segment in the frame it was decoded in.
    pub fn local_velocity(&self, cfg: &TokenizerConfig) -> Vec2 {
        Vec2::new(cfg.decode_axis(self.bins.0), cfg.decode_axis(self.bins.1)) * (1.0 / cfg.dt)
    }
}

/// Samples a track at `dt` spacing starting at absolute time `start`.
pub fn sample_track(track: &AgentTrack, start: f64, n_segments: usize, dt: f64) -> Result<Vec<Pose2>, TokenizeError> {
    (0..=n_segments)
        .map(|j| {
            let t = start + j as f64 * dt;
            let step = math::floor(t / NATIVE_DT + 0.5);
            if step < 0.0 {
                return Err(TokenizeError::Gap { id: track.id, time: t });
            }
            track.pose_at_step(step as usize).ok_or(TokenizeError::Gap { id: track.id, time: t })
        })
        .collect()
}

/// Tokenizes `n_segments` segments of a track starting at absolute time `start`.
/// The first segment is the reference; the result has `n_segments - 1` tokens.
pub fn tokenize_window(
    track: &AgentTrack,
    start: f64,
    n_segments: usize,
    cfg: &TokenizerConfig,
) -> Result<TokenizedTrack, TokenizeError> {
    let poses = sample_track(track, start, n_segments, cfg.dt)?;
    tokenize_poses(&poses, cfg)
}

/// Tokenizes the default window: from the first state over the full track.
pub fn tokenize(track: &AgentTrack, cfg: &TokenizerConfig) -> Result<TokenizedTrack, TokenizeError> {
    let duration = track.states.len().saturating_sub(1) as f64 * NATIVE_DT;
    let n_segments = math::floor(duration / cfg.dt + 1e-9) as usize;
    tokenize_window(track, 0.0, n_segments, cfg)
}

pub fn tokenize_poses(poses: &[Pose2], cfg: &TokenizerConfig) -> Result<TokenizedTrack, TokenizeError> {
    let n_segments = poses.len().saturating_sub(1);
    if n_segments < 2 {
        return Err(TokenizeError::ShortWindow(n_segments));
    }
    let span = cfg.verlet_span;
    let max_bin = cfg.bins_per_axis as i32 - 1;
    let mut frame = match cfg.mode {
        TokenizerMode::AgentCentric => poses[0].heading,
        TokenizerMode::SceneCentric => 0.0,
    };
    let mut reference_bins = (0, 0);
    let mut reference_displacement = Vec2::ZERO;
    let mut decoded = (0, 0);
    let mut tokens = Vec::with_capacity(n_segments - 1);
    let mut clamped = 0;
    for j in 0..n_segments {
        let world = poses[j + 1].position() - poses[j].position();
        let local = world.rotate(-frame);
        let bins = (cfg.encode_axis(local.x), cfg.encode_axis(local.y));
        if j == 0 {
            reference_bins = bins;
            reference_displacement = local;
            decoded = bins;
        } else {
            let raw = (bins.0 - decoded.0, bins.1 - decoded.1);
            let d = (raw.0.clamp(-span, span), raw.1.clamp(-span, span));
            clamped += (d.0 != raw.0) as usize + (d.1 != raw.1) as usize;
            decoded = ((decoded.0 + d.0).clamp(0, max_bin), (decoded.1 + d.1).clamp(0, max_bin));
            tokens.push(cfg.token(d.0, d.1));
        }
        if cfg.mode == TokenizerMode::AgentCentric && world.norm() >= MIN_HEADING_SPEED * cfg.dt {
            frame = world.angle();
        }
    }
    Ok(TokenizedTrack { reference_bins, tokens, start_state: poses[0], reference_displacement, clamped })
}

/// Reconstructs the 2 Hz trajectory (one pose per segment boundary, starting
/// with `start_state`).
pub fn detokenize(tt: &TokenizedTrack, cfg: &TokenizerConfig) -> Vec<Pose2> {
    let mut out = Vec::with_capacity(tt.tokens.len() + 2);
    out.push(tt.start_state);
    let (mut st, _) = VerletState::from_reference(tt.start_state, tt.reference_bins, cfg);
    out.push(st.pose());
    for &t in &tt.tokens {
        st.advance(t, cfg);
        out.push(st.pose());
    }
    out
}

/// Bin sequence implied by a tokenized track (reference first).
pub fn bin_sequence(tt: &TokenizedTrack, cfg: &TokenizerConfig) -> Vec<(i32, i32)> {
    let mut out = Vec::with_capacity(tt.tokens.len() + 1);
    let (mut st, _) = VerletState::from_reference(tt.start_state, tt.reference_bins, cfg);
    out.push(st.bins);
    for &t in &tt.tokens {
        st.advance(t, cfg);
        out.push(st.bins);
    }
    out
}

/// Tokenizes every agent valid over the whole track, before and after a rigid
/// motion of the scene, and reports per mode whether all tokens survived.
pub fn mode_consistency_probe(scenario: &Scenario, rigid: &Pose2) -> (bool, bool) {
    let moved = scenario.transformed(rigid);
    let same = |cfg: TokenizerConfig| {
        scenario.agents.iter().zip(&moved.agents).all(|(a, b)| match (tokenize(a, &cfg), tokenize(b, &cfg)) {
            (Ok(x), Ok(y)) => x.tokens == y.tokens,
            (Err(_), Err(_)) => true,
            _ => false,
        })
    };
    (same(TokenizerConfig::default()), same(TokenizerConfig::scene_centric()))
}
