//! Positional embeddings: none, additive sinusoidal, and the rotary pose
//! embedding with alternating positional / directional heads.
//!
//! Positional heads rotate 4-dim blocks: the first pair by `x * theta_l`, the
//! second by `y * theta_l`. Directional heads rotate every pair by the heading.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnPattern, AutodiffError, Graph, Tensor, Var};
use crate::geometry::Pose2;
use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbeddingError {
    #[error("vector length {len} is not a multiple of {block}")]
    BlockSize { len: usize, block: usize },
    #[error("expected {expected} poses, got {got}")]
    MissingPose { expected: usize, got: usize },
    #[error("d_model {d_model} does not split into {heads} heads of a multiple of 4")]
    HeadSplit { d_model: usize, heads: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeVariant {
    None,
    Vanilla,
    Drope,
    GlobalDrope,
}

impl PeVariant {
    pub fn is_rotary(self) -> bool {
        matches!(self, PeVariant::Drope | PeVariant::GlobalDrope)
    }

    /// Whether instance features are expressed in the instance's own frame.
    pub fn local_features(self) -> bool {
        self == PeVariant::Drope
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(PeVariant::None),
            "vanilla" => Some(PeVariant::Vanilla),
            "drope" => Some(PeVariant::Drope),
            "global_drope" => Some(PeVariant::GlobalDrope),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadTag {
    Positional,
    Directional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeConfig {
    pub variant: PeVariant,
    /// Period in meters of the slowest positional frequency.
    pub max_period: f64,
}

impl Default for PeConfig {
    fn default() -> Self {
        PeConfig { variant: PeVariant::Drope, max_period: 200.0 }
    }
}

impl PeConfig {
    /// Alternating tags starting with positional; an odd extra head is positional.
    pub fn head_assignment(&self, heads: usize) -> Vec<HeadTag> {
        (0..heads).map(|h| if h % 2 == 0 { HeadTag::Positional } else { HeadTag::Directional }).collect()
    }

    /// Angular frequencies for a positional head of width `head_dim`: one per
    /// 4-dim block, geometric with ratio `10000^(2/head_dim)`, slowest last.
    pub fn theta_schedule(&self, head_dim: usize) -> Vec<f64> {
        let n = head_dim / 4;
        let base = math::TAU / self.max_period;
        (0..n)
            .map(|l| base * math::pow(10000.0, 2.0 * (n - 1 - l) as f64 / head_dim as f64))
            .collect()
    }

    /// Per-pair rotation angles for one instance across all heads
    /// (length `d_model / 2`), as consumed by [`Graph::rotary`].
    pub fn rotary_angles(&self, pose: &Pose2, d_model: usize, heads: usize) -> Vec<f64> {
        let dh = d_model / heads;
        let thetas = self.theta_schedule(dh);
        let mut out = Vec::with_capacity(d_model / 2);
        for tag in self.head_assignment(heads) {
            match tag {
                HeadTag::Positional => {
                    for &t in &thetas {
                        out.push(pose.x * t);
                        out.push(pose.y * t);
                    }
                }
                HeadTag::Directional => out.extend(core::iter::repeat(pose.heading).take(dh / 2)),
            }
        }
        out
    }

    pub fn check(&self, d_model: usize, heads: usize) -> Result<(), EmbeddingError> {
        if heads == 0 || d_model % heads != 0 || (d_model / heads) % 4 != 0 {
            return Err(EmbeddingError::HeadSplit { d_model, heads });
        }
        Ok(())
    }
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(...)`.
pub fn sinusoidal_pe(pos: usize, d_model: usize) -> Vec<f64> {
    let mut out = vec![0.0; d_model];
    for i in 0..d_model / 2 {
        let a = pos as f64 / math::pow(10000.0, 2.0 * i as f64 / d_model as f64);
        out[2 * i] = math::sin(a);
        out[2 * i + 1] = math::cos(a);
    }
    out
}

/// Additive sinusoidal code of a planar position: blocks of
/// `[sin x t, cos x t, sin y t, cos y t]` over the positional frequencies.
pub fn sinusoidal_position(pose: &Pose2, d_model: usize, cfg: &PeConfig) -> Vec<f64> {
    let thetas = cfg.theta_schedule(d_model);
    let mut out = Vec::with_capacity(d_model);
    for t in thetas {
        out.push(math::sin(pose.x * t));
        out.push(math::cos(pose.x * t));
        out.push(math::sin(pose.y * t));
        out.push(math::cos(pose.y * t));
    }
    out.resize(d_model, 0.0);
    out
}

fn rotate_pair(x: &mut [f64], a: f64) {
    let (s, c) = math::sin_cos(a);
    let (u, v) = (x[0], x[1]);
    x[0] = c * u - s * v;
    x[1] = s * u + c * v;
}

/// Block rotation of one positional head vector by a planar position.
pub fn rope_position(x: &[f64], pos: (f64, f64), thetas: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
    if x.len() % 4 != 0 || x.len() / 4 != thetas.len() {
        return Err(EmbeddingError::BlockSize { len: x.len(), block: 4 });
    }
    let mut out = x.to_vec();
    for (l, &t) in thetas.iter().enumerate() {
        rotate_pair(&mut out[4 * l..4 * l + 2], pos.0 * t);
        rotate_pair(&mut out[4 * l + 2..4 * l + 4], pos.1 * t);
    }
    Ok(out)
}

/// Rotation of every pair by the heading `alpha`.
pub fn rope_direction(x: &[f64], alpha: f64) -> Result<Vec<f64>, EmbeddingError> {
    if x.len() % 2 != 0 {
        return Err(EmbeddingError::BlockSize { len: x.len(), block: 2 });
    }
    let mut out = x.to_vec();
    for p in out.chunks_mut(2) {
        rotate_pair(p, alpha);
    }
    Ok(out)
}

/// Angle tensor for a set of instance poses.
pub fn angle_tensor(poses: &[Pose2], d_model: usize, heads: usize, cfg: &PeConfig) -> Tensor {
    let mut data = Vec::with_capacity(poses.len() * d_model / 2);
    for p in poses {
        data.extend(cfg.rotary_angles(p, d_model, heads));
    }
    Tensor { rows: poses.len(), cols: d_model / 2, data }
}

/// Applies the configured embedding to attention inputs. Rotary variants
/// rotate `q` by the query poses and `k` by the key poses; the other variants
/// return the inputs unchanged (the additive code enters at the feature level).
pub fn apply_pe(
    g: &mut Graph,
    q: Var,
    k: Var,
    query_poses: &[Pose2],
    key_poses: &[Pose2],
    heads: usize,
    cfg: &PeConfig,
) -> Result<(Var, Var), EmbeddingError> {
    if !cfg.variant.is_rotary() {
        return Ok((q, k));
    }
    let [nq, d] = g.shape(q);
    let nk = g.shape(k)[0];
    if query_poses.len() != nq {
        return Err(EmbeddingError::MissingPose { expected: nq, got: query_poses.len() });
    }
    if key_poses.len() != nk {
        return Err(EmbeddingError::MissingPose { expected: nk, got: key_poses.len() });
    }
    cfg.check(d, heads)?;
    let qa = angle_tensor(query_poses, d, heads, cfg);
    let ka = angle_tensor(key_poses, d, heads, cfg);
    Ok((g.rotary(q, &qa)?, g.rotary(k, &ka)?))
}

/// Pre-softmax attention logits of head `h` over a pattern, for probes.
pub fn attention_logits(g: &Graph, q: Var, k: Var, pattern: &Arc<AttnPattern>, heads: usize, h: usize) -> Vec<f64> {
    let (tq, tk) = (g.value(q), g.value(k));
    let dh = tq.cols / heads;
    let scale = 1.0 / math::sqrt(dh as f64);
    let mut out = Vec::with_capacity(pattern.nnz());
    for i in 0..pattern.n_queries() {
        for &j in pattern.keys_of(i) {
            let a = &tq.row(i)[h * dh..(h + 1) * dh];
            let b = &tk.row(j)[h * dh..(h + 1) * dh];
            out.push(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() * scale);
        }
    }
    out
}
