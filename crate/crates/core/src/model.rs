//! Autoregressive motion policy.
//!
//! Instances (agents, map elements) are encoded by a three-layer point-set
//! network with max-pooling, then refined by alternating agent-to-agent,
//! agent-to-map and map-to-agent attention. The decoder generates one token
//! per interest agent per 0.5 s step through four attention pathways:
//! temporal (causal, per agent), inter-agent (same step, same group), map,
//! and non-interest agents.
//!
//! Decoder rows are ordered sample-major, then step-major, then trace. The
//! same forward code runs a whole teacher-forced sequence at once or one step
//! at a time against a key/value cache.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnPattern, AutodiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::embedding::{angle_tensor, sinusoidal_position, EmbeddingError, PeConfig};
use crate::environment::{Rollout, RolloutBatch};
use crate::geometry::{transform_to_frame, Pose2, Vec2};
use crate::math;
use crate::scenario::{MapType, Scenario, NATIVE_DT};
use crate::tokenizer::{tokenize_window, MotionToken, TokenizeError, TokenizedTrack, TokenizerConfig, VerletState};

pub const AGENT_FEATURES: usize = 13;
pub const MAP_FEATURES: usize = 9;
pub const MOTION_FEATURES: usize = 6;
/// Future steps predicted in one shot for non-interest agents.
pub const OTHER_HORIZON: usize = 16;
const HISTORY_STEPS: usize = 10;
const POS_SCALE: f64 = 0.1;
const MAX_STEPS: usize = 17;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error("agent {0} lacks one second of history at the anchor")]
    MissingHistory(u32),
    #[error("{0} interest agents exceed the configured maximum {1}")]
    TooManyAgents(usize, usize),
    #[error("scenario has no interest agent valid at the anchor")]
    NoInterest,
    #[error("trace lengths differ within a sample: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("trace needs at least one token")]
    EmptyTrace,
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("invalid model config: {0}")]
    Config(String),
}

type Result<T> = core::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizePreset {
    Mini,
    Medium,
    Big,
    Large,
}

impl SizePreset {
    pub const ALL: [SizePreset; 4] = [SizePreset::Mini, SizePreset::Medium, SizePreset::Big, SizePreset::Large];

    pub fn name(self) -> &'static str {
        match self {
            SizePreset::Mini => "mini",
            SizePreset::Medium => "medium",
            SizePreset::Big => "big",
            SizePreset::Large => "large",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    /// `(d_model, heads, encoder_layers, decoder_layers)`.
    pub fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            SizePreset::Mini => (32, 4, 1, 1),
            SizePreset::Medium => (64, 4, 1, 2),
            SizePreset::Big => (64, 4, 2, 3),
            SizePreset::Large => (96, 6, 2, 4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_interest_agents: usize,
    /// Nearest map elements kept per scene.
    pub max_map_elements: usize,
    pub pe: PeConfig,
    pub size_preset: Option<SizePreset>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            heads: 8,
            encoder_layers: 2,
            decoder_layers: 4,
            ffn_mult: 2,
            vocab_size: 169,
            max_interest_agents: 8,
            max_map_elements: 64,
            pe: PeConfig::default(),
            size_preset: None,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn preset(p: SizePreset) -> Self {
        let (d_model, heads, encoder_layers, decoder_layers) = p.dims();
        ModelConfig { d_model, heads, encoder_layers, decoder_layers, size_preset: Some(p), ..Self::default() }
    }

    /// Applies the preset dimensions, if any.
    pub fn resolved(&self) -> Self {
        match self.size_preset {
            Some(p) => {
                let (d_model, heads, encoder_layers, decoder_layers) = p.dims();
                ModelConfig { d_model, heads, encoder_layers, decoder_layers, ..self.clone() }
            }
            None => self.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.resolved();
        c.pe.check(c.d_model, c.heads)?;
        if c.encoder_layers == 0 || c.decoder_layers == 0 || c.ffn_mult == 0 {
            return Err(ModelError::Config("layer counts and ffn_mult must be positive".into()));
        }
        if c.vocab_size != 169 {
            return Err(ModelError::Config("vocab_size must be 169".into()));
        }
        if c.max_map_elements == 0 || c.max_interest_agents == 0 {
            return Err(ModelError::Config("max_map_elements and max_interest_agents must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Inputs

/// Encoder inputs of one scene at one anchor. Poses are in the scene
/// reference frame (the first interest agent at the anchor).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInput {
    pub anchor_time: f64,
    pub ref_frame: Pose2,
    pub agent_ids: Vec<u32>,
    pub agent_types: Vec<usize>,
    pub agent_rows: Vec<f64>,
    pub agent_offsets: Vec<usize>,
    pub agent_poses: Vec<Pose2>,
    /// World poses at the anchor.
    pub agent_world: Vec<Pose2>,
    /// Positions into the agent list.
    pub interest: Vec<usize>,
    pub others: Vec<usize>,
    pub map_types: Vec<usize>,
    pub map_rows: Vec<f64>,
    pub map_offsets: Vec<usize>,
    pub map_poses: Vec<Pose2>,
}

impl SceneInput {
    pub fn n_agents(&self) -> usize {
        self.agent_poses.len()
    }

    pub fn n_map(&self) -> usize {
        self.map_poses.len()
    }

    /// Drops every map element (degenerate-input probe).
    pub fn without_map(&self) -> Self {
        SceneInput { map_types: vec![], map_rows: vec![], map_offsets: vec![0], map_poses: vec![], ..self.clone() }
    }
}

fn push_agent_vector(out: &mut Vec<f64>, p0: Vec2, p1: Vec2, heading: f64, frame: &Pose2, dims: (f64, f64), ty: usize, k: usize) {
    let a = transform_to_frame(p0, frame);
    let b = transform_to_frame(p1, frame);
    let rel = heading - frame.heading;
    let speed = (p1 - p0).norm() / NATIVE_DT;
    out.extend([a.x * POS_SCALE, a.y * POS_SCALE, b.x * POS_SCALE, b.y * POS_SCALE, math::cos(rel), math::sin(rel)]);
    out.extend([speed * POS_SCALE, dims.0 / 5.0, dims.1 / 5.0]);
    out.extend((0..3).map(|t| (t == ty) as u8 as f64));
    out.push(k as f64 / HISTORY_STEPS as f64);
}

/// Builds encoder inputs at `anchor_time` (absolute seconds).
pub fn build_scene_input(scenario: &Scenario, anchor_time: f64, cfg: &ModelConfig) -> Result<SceneInput> {
    let local = cfg.pe.variant.local_features();
    let anchor_step = math::floor(anchor_time / NATIVE_DT + 0.5) as usize;
    let interest_idx = scenario.interest_indices();
    if interest_idx.len() > cfg.max_interest_agents {
        return Err(ModelError::TooManyAgents(interest_idx.len(), cfg.max_interest_agents));
    }
    for &i in &interest_idx {
        let a = &scenario.agents[i];
        if anchor_step < HISTORY_STEPS || (anchor_step - HISTORY_STEPS..=anchor_step).any(|s| a.pose_at_step(s).is_none()) {
            return Err(ModelError::MissingHistory(a.id));
        }
    }
    let first = *interest_idx.first().ok_or(ModelError::NoInterest)?;
    let ref_frame = scenario.agents[first].pose_at_step(anchor_step).ok_or(ModelError::NoInterest)?;

    let mut s = SceneInput {
        anchor_time,
        ref_frame,
        agent_ids: vec![],
        agent_types: vec![],
        agent_rows: vec![],
        agent_offsets: vec![0],
        agent_poses: vec![],
        agent_world: vec![],
        interest: vec![],
        others: vec![],
        map_types: vec![],
        map_rows: vec![],
        map_offsets: vec![0],
        map_poses: vec![],
    };
    for (i, a) in scenario.agents.iter().enumerate() {
        let Some(anchor_pose) = a.pose_at_step(anchor_step) else { continue };
        let pos = s.agent_ids.len();
        if interest_idx.contains(&i) {
            s.interest.push(pos);
        } else {
            s.others.push(pos);
        }
        let frame = if local { anchor_pose } else { ref_frame };
        let ty = a.ty.index();
        let before = s.agent_rows.len();
        for k in 0..HISTORY_STEPS {
            let st = (anchor_step + k).checked_sub(HISTORY_STEPS);
            let pair = st.and_then(|st| Some((a.pose_at_step(st)?, a.pose_at_step(st + 1)?)));
            if let Some((p0, p1)) = pair {
                push_agent_vector(&mut s.agent_rows, p0.position(), p1.position(), p1.heading, &frame, (a.length, a.width), ty, k);
            }
        }
        if s.agent_rows.len() == before {
            let p = anchor_pose.position();
            push_agent_vector(&mut s.agent_rows, p, p, anchor_pose.heading, &frame, (a.length, a.width), ty, HISTORY_STEPS);
        }
        s.agent_offsets.push(s.agent_rows.len() / AGENT_FEATURES);
        s.agent_ids.push(a.id);
        s.agent_types.push(ty);
        s.agent_poses.push(ref_frame.relative(&anchor_pose));
        s.agent_world.push(anchor_pose);
    }
    // rows of the interest agents must come in scenario interest order
    s.interest.sort_by_key(|&p| interest_idx.iter().position(|&i| scenario.agents[i].id == s.agent_ids[p]));

    let anchors: Vec<Vec2> = s.interest.iter().map(|&p| s.agent_world[p].position()).collect();
    let mut ranked: Vec<(f64, usize)> = scenario
        .map_elements
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let c = e.center_pose().position();
            (anchors.iter().map(|a| a.dist(c)).fold(f64::INFINITY, f64::min), i)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = ranked.iter().take(cfg.max_map_elements).map(|r| r.1).collect();
    keep.sort_unstable();
    for i in keep {
        let e = &scenario.map_elements[i];
        let center = e.center_pose();
        let frame = if local { center } else { ref_frame };
        let ty = match e.ty {
            MapType::Lane => 0,
            MapType::RoadEdge => 1,
        };
        for v in &e.vectors {
            let a = transform_to_frame(v.start(), &frame);
            let b = transform_to_frame(v.end(), &frame);
            let rel = v.th - frame.heading;
            s.map_rows.extend([a.x * POS_SCALE, a.y * POS_SCALE, b.x * POS_SCALE, b.y * POS_SCALE]);
            s.map_rows.extend([math::cos(rel), math::sin(rel), v.le * POS_SCALE]);
            s.map_rows.extend([(ty == 0) as u8 as f64, (ty == 1) as u8 as f64]);
        }
        s.map_offsets.push(s.map_rows.len() / MAP_FEATURES);
        s.map_types.push(ty);
        s.map_poses.push(ref_frame.relative(&center));
    }
    Ok(s)
}

/// Decoder input sequence of one interest agent: the tokens fed in and the
/// decoded state after each of them.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrace {
    /// Position in `SceneInput::interest`.
    pub slot: usize,
    /// Traces attend to each other at a step only within a group.
    pub group: usize,
    pub tokens: Vec<MotionToken>,
    pub states: Vec<VerletState>,
}

impl AgentTrace {
    /// Trace starting from the history token, followed by `future` tokens.
    pub fn new(slot: usize, group: usize, history_token: MotionToken, start: VerletState, future: &[MotionToken], tok: &TokenizerConfig) -> Self {
        let mut tokens = Vec::with_capacity(future.len() + 1);
        let mut states = Vec::with_capacity(future.len() + 1);
        tokens.push(history_token);
        states.push(start);
        let mut st = start;
        for &t in future {
            st.advance(t, tok);
            tokens.push(t);
            states.push(st);
        }
        AgentTrace { slot, group, tokens, states }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Decoder state after the history token, moved onto the true anchor position.
pub fn anchored_state(tt: &TokenizedTrack, anchor: &Pose2, tok: &TokenizerConfig) -> VerletState {
    let (mut st, _) = VerletState::from_reference(tt.start_state, tt.reference_bins, tok);
    st.advance(tt.tokens[0], tok);
    st.position = anchor.position();
    st
}

/// Tokenizes `n_segments` from one second before the anchor, returning the
/// tokenized window and the anchored start state.
pub fn tokenize_from_anchor(
    scenario: &Scenario,
    agent_index: usize,
    anchor_time: f64,
    n_segments: usize,
    tok: &TokenizerConfig,
) -> Result<(TokenizedTrack, VerletState)> {
    let a = &scenario.agents[agent_index];
    let tt = tokenize_window(a, anchor_time - 1.0, n_segments, tok)?;
    let anchor = a.pose_at_step(math::floor(anchor_time / NATIVE_DT + 0.5) as usize).ok_or(ModelError::MissingHistory(a.id))?;
    let st = anchored_state(&tt, &anchor, tok);
    Ok((tt, st))
}

/// Teacher-forcing traces of all interest agents over `n_future` steps from
/// the anchor, in group 0, with their target token indices per trace.
pub fn ground_truth_traces(
    scenario: &Scenario,
    anchor_time: f64,
    n_future: usize,
    tok: &TokenizerConfig,
) -> Result<(Vec<AgentTrace>, Vec<Vec<usize>>)> {
    if n_future == 0 {
        return Err(ModelError::EmptyTrace);
    }
    let mut traces = Vec::new();
    let mut targets = Vec::new();
    for (slot, &i) in scenario.interest_indices().iter().enumerate() {
        let (tt, st) = tokenize_from_anchor(scenario, i, anchor_time, 2 + n_future, tok)?;
        let fut = &tt.tokens[1..];
        traces.push(AgentTrace::new(slot, 0, tt.tokens[0], st, &fut[..n_future - 1], tok));
        targets.push(fut.iter().map(|t| t.index()).collect());
    }
    Ok((traces, targets))
}

/// Future steps available after `anchor_time`, capped at `max`.
pub fn available_steps(scenario: &Scenario, anchor_time: f64, max: usize) -> usize {
    let end = scenario.agents.iter().map(|a| a.states.len()).max().unwrap_or(0).saturating_sub(1) as f64 * NATIVE_DT;
    let n = math::floor((end - anchor_time) / 0.5 + 1e-9);
    if n <= 0.0 {
        0
    } else {
        (n as usize).min(max)
    }
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    ln_q: Norm,
    ln_kv: Norm,
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    ln: Norm,
    l1: Lin,
    l2: Lin,
}

#[derive(Debug, Clone, Copy)]
struct ShapeNet {
    l1: Lin,
    l2: Lin,
    l3: Lin,
    ln: Norm,
}

#[derive(Debug, Clone, Copy)]
struct EncLayer {
    a2a: Attn,
    a2a_ffn: Ffn,
    a2m: Attn,
    a2m_ffn: Ffn,
    m2a: Attn,
    m2a_ffn: Ffn,
}

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    temporal: Attn,
    inter: Attn,
    map: Attn,
    other: Attn,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct Params {
    agent_net: ShapeNet,
    map_net: ShapeNet,
    agent_type: ParamId,
    map_type: ParamId,
    enc: Vec<EncLayer>,
    token_emb: ParamId,
    time_emb: ParamId,
    ctx: Lin,
    motion: Lin,
    dec: Vec<DecLayer>,
    ln_f: Norm,
    head: Lin,
    value: Lin,
    other_attn: Attn,
    other_ffn: Ffn,
    other_out: Lin,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|_| ModelError::Config("bad init std".into()))?;
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        Ok(self.store.add(name, Tensor::from_vec(rows, cols, data)?)?)
    }

    fn constant(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> Result<ParamId> {
        Ok(self.store.add(name, Tensor::filled(rows, cols, v))?)
    }

    fn lin(&mut self, name: &str, i: usize, o: usize, gain: f64) -> Result<Lin> {
        let w = self.normal(&alloc::format!("{name}.w"), i, o, gain / math::sqrt(i as f64))?;
        let b = self.constant(&alloc::format!("{name}.b"), 1, o, 0.0)?;
        Ok(Lin { w, b })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm { g: self.constant(&alloc::format!("{name}.g"), 1, d, 1.0)?, b: self.constant(&alloc::format!("{name}.b"), 1, d, 0.0)? })
    }

    fn attn(&mut self, name: &str, d: usize, out_gain: f64) -> Result<Attn> {
        Ok(Attn {
            ln_q: self.norm(&alloc::format!("{name}.ln_q"), d)?,
            ln_kv: self.norm(&alloc::format!("{name}.ln_kv"), d)?,
            q: self.lin(&alloc::format!("{name}.q"), d, d, 1.0)?,
            k: self.lin(&alloc::format!("{name}.k"), d, d, 1.0)?,
            v: self.lin(&alloc::format!("{name}.v"), d, d, 1.0)?,
            o: self.lin(&alloc::format!("{name}.o"), d, d, out_gain)?,
        })
    }

    fn ffn(&mut self, name: &str, d: usize, mult: usize, out_gain: f64) -> Result<Ffn> {
        Ok(Ffn {
            ln: self.norm(&alloc::format!("{name}.ln"), d)?,
            l1: self.lin(&alloc::format!("{name}.l1"), d, d * mult, 1.0)?,
            l2: self.lin(&alloc::format!("{name}.l2"), d * mult, d, out_gain)?,
        })
    }

    fn shapenet(&mut self, name: &str, f: usize, d: usize) -> Result<ShapeNet> {
        Ok(ShapeNet {
            l1: self.lin(&alloc::format!("{name}.l1"), f, d, 1.0)?,
            l2: self.lin(&alloc::format!("{name}.l2"), 2 * d, d, 1.0)?,
            l3: self.lin(&alloc::format!("{name}.l3"), 2 * d, d, 1.0)?,
            ln: self.norm(&alloc::format!("{name}.ln"), d)?,
        })
    }
}

fn build_params(cfg: &ModelConfig, store: &mut ParamStore) -> Result<Params> {
    let d = cfg.d_model;
    let m = cfg.ffn_mult;
    let out_gain = 1.0 / math::sqrt(2.0 * (cfg.encoder_layers + cfg.decoder_layers) as f64);
    let mut it = Init { store, rng: ChaCha8Rng::seed_from_u64(cfg.init_seed) };
    let agent_net = it.shapenet("agent_net", AGENT_FEATURES, d)?;
    let map_net = it.shapenet("map_net", MAP_FEATURES, d)?;
    let agent_type = it.normal("agent_type", 3, d, 0.1)?;
    let map_type = it.normal("map_type", 2, d, 0.1)?;
    let mut enc = Vec::new();
    for l in 0..cfg.encoder_layers {
        let n = |s: &str| alloc::format!("enc.{l}.{s}");
        enc.push(EncLayer {
            a2a: it.attn(&n("a2a"), d, out_gain)?,
            a2a_ffn: it.ffn(&n("a2a_ffn"), d, m, out_gain)?,
            a2m: it.attn(&n("a2m"), d, out_gain)?,
            a2m_ffn: it.ffn(&n("a2m_ffn"), d, m, out_gain)?,
            m2a: it.attn(&n("m2a"), d, out_gain)?,
            m2a_ffn: it.ffn(&n("m2a_ffn"), d, m, out_gain)?,
        });
    }
    let token_emb = it.normal("token_emb", cfg.vocab_size, d, 1.0)?;
    let time_emb = it.normal("time_emb", MAX_STEPS, d, 0.1)?;
    let ctx = it.lin("ctx", d, d, 1.0)?;
    let motion = it.lin("motion", MOTION_FEATURES, d, 1.0)?;
    let mut dec = Vec::new();
    for l in 0..cfg.decoder_layers {
        let n = |s: &str| alloc::format!("dec.{l}.{s}");
        dec.push(DecLayer {
            temporal: it.attn(&n("temporal"), d, out_gain)?,
            inter: it.attn(&n("inter"), d, out_gain)?,
            map: it.attn(&n("map"), d, out_gain)?,
            other: it.attn(&n("other"), d, out_gain)?,
            ffn: it.ffn(&n("ffn"), d, m, out_gain)?,
        });
    }
    let ln_f = it.norm("ln_f", d)?;
    let head = Lin { w: it.constant("head.w", d, cfg.vocab_size, 0.0)?, b: it.constant("head.b", 1, cfg.vocab_size, 0.0)? };
    let value = it.lin("value", d, 1, 0.1)?;
    let other_attn = it.attn("other_head.attn", d, 1.0)?;
    let other_ffn = it.ffn("other_head.ffn", d, m, 1.0)?;
    let other_out = it.lin("other_head.out", d, 2 * OTHER_HORIZON, 0.1)?;
    Ok(Params {
        agent_net,
        map_net,
        agent_type,
        map_type,
        enc,
        token_emb,
        time_emb,
        ctx,
        motion,
        dec,
        ln_f,
        head,
        value,
        other_attn,
        other_ffn,
        other_out,
    })
}

// ---------------------------------------------------------------------------
// Forward building blocks

/// Binds parameters onto a graph once per graph.
struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    fn new(store: &'a ParamStore) -> Self {
        Binder { store, vars: vec![None; store.len()] }
    }

    fn p(&mut self, g: &mut Graph, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| g.param(self.store, id))
    }

    fn lin(&mut self, g: &mut Graph, l: Lin, x: Var) -> Result<Var> {
        let w = self.p(g, l.w);
        let b = self.p(g, l.b);
        Ok(g.linear(x, w, b)?)
    }

    fn norm(&mut self, g: &mut Graph, n: Norm, x: Var) -> Result<Var> {
        let ga = self.p(g, n.g);
        let be = self.p(g, n.b);
        Ok(g.layer_norm(x, ga, be)?)
    }

    fn ffn(&mut self, g: &mut Graph, f: Ffn, x: Var) -> Result<Var> {
        let h = self.norm(g, f.ln, x)?;
        let h = self.lin(g, f.l1, h)?;
        let h = g.gelu(h);
        let h = self.lin(g, f.l2, h)?;
        Ok(g.add(x, h)?)
    }

    /// Rotated keys and values of a key set.
    fn keys_values(&mut self, g: &mut Graph, a: Attn, x: Var, poses: &[Pose2], cfg: &ModelConfig) -> Result<(Var, Var)> {
        let h = self.norm(g, a.ln_kv, x)?;
        let k = self.lin(g, a.k, h)?;
        let v = self.lin(g, a.v, h)?;
        let k = if cfg.pe.variant.is_rotary() { g.rotary(k, &angle_tensor(poses, cfg.d_model, cfg.heads, &cfg.pe))? } else { k };
        Ok((k, v))
    }

    /// Residual attention of `x` over precomputed keys and values.
    fn attend(
        &mut self,
        g: &mut Graph,
        a: Attn,
        x: Var,
        poses: &[Pose2],
        kv: (Var, Var),
        pattern: Arc<AttnPattern>,
        cfg: &ModelConfig,
    ) -> Result<Var> {
        let h = self.norm(g, a.ln_q, x)?;
        let q = self.lin(g, a.q, h)?;
        let q = if cfg.pe.variant.is_rotary() { g.rotary(q, &angle_tensor(poses, cfg.d_model, cfg.heads, &cfg.pe))? } else { q };
        let o = g.sparse_attention(q, kv.0, kv.1, pattern, cfg.heads)?;
        let o = self.lin(g, a.o, o)?;
        Ok(g.add(x, o)?)
    }

    fn shapenet(&mut self, g: &mut Graph, n: ShapeNet, rows: Var, offsets: &[usize]) -> Result<Var> {
        let seg: Vec<usize> = (0..offsets.len() - 1).flat_map(|s| core::iter::repeat(s).take(offsets[s + 1] - offsets[s])).collect();
        let h1 = self.lin(g, n.l1, rows)?;
        let h1 = g.relu(h1);
        let p1 = g.segment_max(h1, offsets)?;
        let b1 = g.gather_rows(p1, &seg)?;
        let c1 = g.concat_cols(&[h1, b1])?;
        let h2 = self.lin(g, n.l2, c1)?;
        let h2 = g.relu(h2);
        let p2 = g.segment_max(h2, offsets)?;
        let b2 = g.gather_rows(p2, &seg)?;
        let c2 = g.concat_cols(&[h2, b2])?;
        let h3 = self.lin(g, n.l3, c2)?;
        let pooled = g.segment_max(h3, offsets)?;
        self.norm(g, n.ln, pooled)
    }
}

/// Encoder output for a batch of scenes, instances concatenated.
#[derive(Debug, Clone)]
struct Encoded {
    agents: Var,
    map: Option<Var>,
    agent_base: Vec<usize>,
    map_base: Vec<usize>,
    agent_poses: Vec<Pose2>,
    map_poses: Vec<Pose2>,
}

/// Per-instance matrix rows of a batch of scenes.
fn stack_rows(parts: &[(&[f64], &[usize])], width: usize) -> (Tensor, Vec<usize>) {
    let mut data = Vec::new();
    let mut offsets = vec![0];
    for (rows, offs) in parts {
        let base = data.len() / width;
        data.extend_from_slice(rows);
        offsets.extend(offs[1..].iter().map(|o| o + base));
    }
    let n = data.len() / width;
    (Tensor { rows: n, cols: width, data }, offsets)
}

/// Decoder row descriptor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowRef {
    pub sample: usize,
    pub trace: usize,
    pub step: usize,
}

#[derive(Debug, Clone)]
struct RowMeta {
    sample: usize,
    trace: usize,
    step: usize,
    group: usize,
}

/// Key/value state of the decoder for step-by-step generation.
#[derive(Debug, Clone, Default)]
struct DecCache {
    temporal: Vec<Option<(Var, Var)>>,
    rows: Vec<RowMeta>,
    statics: Vec<[(Var, Var); 2]>,
}

pub struct PolicyModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    p: Params,
    pub tokenizer: TokenizerConfig,
}

impl Clone for PolicyModel {
    fn clone(&self) -> Self {
        PolicyModel { config: self.config.clone(), params: self.params.clone(), p: self.p.clone(), tokenizer: self.tokenizer }
    }
}

impl core::fmt::Debug for PolicyModel {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("PolicyModel").field("config", &self.config).field("num_params", &self.num_params()).finish()
    }
}

/// Scene encodings as plain matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEncoding {
    pub agent_tokens: Tensor,
    pub map_tokens: Tensor,
}

/// Output handles of a teacher-forced pass.
pub struct DecoderOutput {
    pub logits: Var,
    pub hidden: Var,
    pub rows: Vec<RowRef>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    pub n_rollouts: usize,
    pub horizon: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions { n_rollouts: 32, horizon: 16, temperature: 1.0, seed: 0 }
    }
}

impl PolicyModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let mut params = ParamStore::new();
        let p = build_params(&config, &mut params)?;
        Ok(PolicyModel { config, params, p, tokenizer: TokenizerConfig::default() })
    }

    /// Rebuilds the layout from `config` and takes tensors from `params` by name.
    pub fn from_params(config: &ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut m = Self::new(config)?;
        let ids: Vec<(ParamId, String)> = m.params.iter().map(|(id, n, _)| (id, n.into())).collect();
        for (id, name) in ids {
            let src = params.find(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            let t = params.get(src);
            if t.shape() != m.params.get(id).shape() {
                return Err(AutodiffError::Shape { op: "load", a: t.shape(), b: m.params.get(id).shape() }.into());
            }
            *m.params.get_mut(id) = t.clone();
        }
        Ok(m)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn encode(&self, g: &mut Graph, b: &mut Binder, scenes: &[&SceneInput]) -> Result<Encoded> {
        let cfg = &self.config;
        let p = &self.p;
        let (arows, aoffs) = stack_rows(&scenes.iter().map(|s| (&s.agent_rows[..], &s.agent_offsets[..])).collect::<Vec<_>>(), AGENT_FEATURES);
        let (mrows, moffs) = stack_rows(&scenes.iter().map(|s| (&s.map_rows[..], &s.map_offsets[..])).collect::<Vec<_>>(), MAP_FEATURES);
        let mut agent_base = vec![0];
        let mut map_base = vec![0];
        let mut agent_poses = Vec::new();
        let mut map_poses = Vec::new();
        let mut agent_types = Vec::new();
        let mut map_types = Vec::new();
        for s in scenes {
            agent_base.push(agent_base.last().unwrap() + s.n_agents());
            map_base.push(map_base.last().unwrap() + s.n_map());
            agent_poses.extend_from_slice(&s.agent_poses);
            map_poses.extend_from_slice(&s.map_poses);
            agent_types.extend_from_slice(&s.agent_types);
            map_types.extend_from_slice(&s.map_types);
        }
        let ar = g.constant(arows);
        let mut a = b.shapenet(g, p.agent_net, ar, &aoffs)?;
        let at = b.p(g, p.agent_type);
        let at = g.embedding(at, &agent_types)?;
        a = g.add(a, at)?;
        let mut m = if map_poses.is_empty() {
            None
        } else {
            let mr = g.constant(mrows);
            let mut m = b.shapenet(g, p.map_net, mr, &moffs)?;
            let mt = b.p(g, p.map_type);
            let mt = g.embedding(mt, &map_types)?;
            m = g.add(m, mt)?;
            Some(m)
        };
        if cfg.pe.variant == crate::embedding::PeVariant::Vanilla {
            let code = |poses: &[Pose2]| {
                let mut data = Vec::new();
                for q in poses {
                    data.extend(sinusoidal_position(q, cfg.d_model, &cfg.pe));
                }
                Tensor { rows: poses.len(), cols: cfg.d_model, data }
            };
            let ac = g.constant(code(&agent_poses));
            a = g.add(a, ac)?;
            if let Some(mv) = m {
                let mc = g.constant(code(&map_poses));
                m = Some(g.add(mv, mc)?);
            }
        }
        let block = |base: &[usize], kbase: &[usize]| {
            let mut pat = AttnPattern::new();
            for s in 0..base.len() - 1 {
                for _ in base[s]..base[s + 1] {
                    pat.push_query(kbase[s]..kbase[s + 1]);
                }
            }
            Arc::new(pat)
        };
        let a2a = block(&agent_base, &agent_base);
        let a2m = block(&agent_base, &map_base);
        let m2a = block(&map_base, &agent_base);
        for l in &p.enc {
            let kv = b.keys_values(g, l.a2a, a, &agent_poses, cfg)?;
            a = b.attend(g, l.a2a, a, &agent_poses, kv, a2a.clone(), cfg)?;
            a = b.ffn(g, l.a2a_ffn, a)?;
            if let Some(mv) = m {
                let kv = b.keys_values(g, l.a2m, mv, &map_poses, cfg)?;
                a = b.attend(g, l.a2m, a, &agent_poses, kv, a2m.clone(), cfg)?;
                a = b.ffn(g, l.a2m_ffn, a)?;
                let kv = b.keys_values(g, l.m2a, a, &agent_poses, cfg)?;
                let mv = b.attend(g, l.m2a, mv, &map_poses, kv, m2a.clone(), cfg)?;
                m = Some(b.ffn(g, l.m2a_ffn, mv)?);
            }
        }
        Ok(Encoded { agents: a, map: m, agent_base, map_base, agent_poses, map_poses })
    }

    /// Encodes one scene.
    pub fn encode_scene(&self, scene: &SceneInput) -> Result<SceneEncoding> {
        let mut g = Graph::inference();
        let mut b = Binder::new(&self.params);
        let e = self.encode(&mut g, &mut b, &[scene])?;
        let map_tokens = match e.map {
            Some(m) => g.value(m).clone(),
            None => Tensor::zeros(0, self.config.d_model),
        };
        Ok(SceneEncoding { agent_tokens: g.value(e.agents).clone(), map_tokens })
    }

    /// Map and other-agent keys/values per decoder layer.
    fn decoder_statics(&self, g: &mut Graph, b: &mut Binder, enc: &Encoded, scenes: &[&SceneInput]) -> Result<(Vec<[(Var, Var); 2]>, Vec<usize>)> {
        let cfg = &self.config;
        let mut other_rows = Vec::new();
        let mut other_base = vec![0];
        for (s, sc) in scenes.iter().enumerate() {
            other_rows.extend(sc.others.iter().map(|&o| enc.agent_base[s] + o));
            other_base.push(other_rows.len());
        }
        let other_poses: Vec<Pose2> = other_rows.iter().map(|&r| enc.agent_poses[r]).collect();
        let others = g.gather_rows(enc.agents, &other_rows)?;
        let d = cfg.d_model;
        let mut out = Vec::new();
        for l in &self.p.dec {
            let map_kv = match enc.map {
                Some(m) => b.keys_values(g, l.map, m, &enc.map_poses, cfg)?,
                None => {
                    let z = g.constant(Tensor::zeros(0, d));
                    (z, z)
                }
            };
            let oth_kv = b.keys_values(g, l.other, others, &other_poses, cfg)?;
            out.push([map_kv, oth_kv]);
        }
        Ok((out, other_base))
    }

    /// Row input features for a set of rows.
    fn row_inputs(&self, g: &mut Graph, b: &mut Binder, enc: &Encoded, scenes: &[&SceneInput], traces: &[&[AgentTrace]], rows: &[RowMeta]) -> Result<(Var, Vec<Pose2>)> {
        let local = self.config.pe.variant.local_features();
        let tok = &self.tokenizer;
        let mut ids = Vec::with_capacity(rows.len());
        let mut steps = Vec::with_capacity(rows.len());
        let mut ctx_rows = Vec::with_capacity(rows.len());
        let mut feats = Vec::with_capacity(rows.len() * MOTION_FEATURES);
        let mut poses = Vec::with_capacity(rows.len());
        for r in rows {
            let sc = scenes[r.sample];
            let tr = &traces[r.sample][r.trace];
            let st = tr.states[r.step];
            let agent = sc.interest[tr.slot];
            ids.push(tr.tokens[r.step].index());
            steps.push(r.step.min(MAX_STEPS - 1));
            ctx_rows.push(enc.agent_base[r.sample] + agent);
            let pose = st.pose();
            let frame = if local { sc.agent_world[agent] } else { sc.ref_frame };
            let rel = frame.relative(&pose);
            let vel = st.local_velocity(tok);
            feats.extend([rel.x * POS_SCALE, rel.y * POS_SCALE, math::cos(rel.heading), math::sin(rel.heading)]);
            feats.extend([vel.x * POS_SCALE, vel.y * POS_SCALE]);
            poses.push(sc.ref_frame.relative(&pose));
        }
        let te = b.p(g, self.p.token_emb);
        let te = g.embedding(te, &ids)?;
        let tm = b.p(g, self.p.time_emb);
        let tm = g.embedding(tm, &steps)?;
        let cx = g.gather_rows(enc.agents, &ctx_rows)?;
        let cx = b.lin(g, self.p.ctx, cx)?;
        let mf = g.constant(Tensor { rows: rows.len(), cols: MOTION_FEATURES, data: feats });
        let mf = b.lin(g, self.p.motion, mf)?;
        let x = g.add(te, tm)?;
        let x = g.add(x, cx)?;
        Ok((g.add(x, mf)?, poses))
    }

    /// Runs `rows` through the decoder, extending the temporal cache.
    #[allow(clippy::too_many_arguments)]
    fn decode_rows(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        enc: &Encoded,
        scenes: &[&SceneInput],
        traces: &[&[AgentTrace]],
        rows: Vec<RowMeta>,
        other_base: &[usize],
        cache: &mut DecCache,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (mut x, poses) = self.row_inputs(g, b, enc, scenes, traces, &rows)?;
        let n_old = cache.rows.len();
        // temporal: same (sample, trace), earlier or equal step, over cached ++ new rows
        let mut chains: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
        for (i, r) in cache.rows.iter().chain(rows.iter()).enumerate() {
            chains.entry((r.sample, r.trace)).or_default().push((r.step, i));
        }
        let mut temporal = AttnPattern::new();
        let mut inter = AttnPattern::new();
        let mut map = AttnPattern::new();
        let mut other = AttnPattern::new();
        let mut same_step: BTreeMap<(usize, usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, r) in rows.iter().enumerate() {
            same_step.entry((r.sample, r.step, r.group)).or_default().push(i);
        }
        for r in &rows {
            temporal.push_query(chains[&(r.sample, r.trace)].iter().filter(|(s, _)| *s <= r.step).map(|(_, i)| *i));
            inter.push_query(same_step[&(r.sample, r.step, r.group)].iter().copied());
            map.push_query(enc.map_base[r.sample]..enc.map_base[r.sample + 1]);
            other.push_query(other_base[r.sample]..other_base[r.sample + 1]);
        }
        let (temporal, inter, map, other) = (Arc::new(temporal), Arc::new(inter), Arc::new(map), Arc::new(other));
        for (l, layer) in self.p.dec.iter().enumerate() {
            let (k_new, v_new) = b.keys_values(g, layer.temporal, x, &poses, cfg)?;
            let (k, v) = match cache.temporal[l] {
                Some((k_old, v_old)) => (g.concat_rows(&[k_old, k_new])?, g.concat_rows(&[v_old, v_new])?),
                None => (k_new, v_new),
            };
            cache.temporal[l] = Some((k, v));
            x = b.attend(g, layer.temporal, x, &poses, (k, v), temporal.clone(), cfg)?;
            let kv = b.keys_values(g, layer.inter, x, &poses, cfg)?;
            x = b.attend(g, layer.inter, x, &poses, kv, inter.clone(), cfg)?;
            if enc.map.is_some() {
                x = b.attend(g, layer.map, x, &poses, cache.statics[l][0], map.clone(), cfg)?;
            }
            x = b.attend(g, layer.other, x, &poses, cache.statics[l][1], other.clone(), cfg)?;
            x = b.ffn(g, layer.ffn, x)?;
        }
        debug_assert_eq!(n_old, cache.rows.len());
        cache.rows.extend(rows);
        b.norm(g, self.p.ln_f, x)
    }

    fn logits_of(&self, g: &mut Graph, b: &mut Binder, hidden: Var) -> Result<Var> {
        b.lin(g, self.p.head, hidden)
    }

    /// Teacher-forced pass over a batch. Row `(s, t, i)` is fed token `t` of
    /// trace `i` of sample `s` and its logits predict token `t + 1`.
    pub fn forward(&self, g: &mut Graph, batch: &[(&SceneInput, &[AgentTrace])]) -> Result<DecoderOutput> {
        let mut b = Binder::new(&self.params);
        Ok(self.forward_inner(g, &mut b, batch)?.0)
    }

    fn forward_inner(&self, g: &mut Graph, b: &mut Binder, batch: &[(&SceneInput, &[AgentTrace])]) -> Result<(DecoderOutput, Encoded)> {
        let scenes: Vec<&SceneInput> = batch.iter().map(|x| x.0).collect();
        let traces: Vec<&[AgentTrace]> = batch.iter().map(|x| x.1).collect();
        for tr in &traces {
            let len = tr.first().map_or(0, |t| t.len());
            if let Some(t) = tr.iter().find(|t| t.len() != len) {
                return Err(ModelError::LengthMismatch(len, t.len()));
            }
            if tr.iter().any(|t| t.is_empty() || t.states.len() != t.tokens.len()) {
                return Err(ModelError::EmptyTrace);
            }
        }
        let enc = self.encode(g, b, &scenes)?;
        let (statics, other_base) = self.decoder_statics(g, b, &enc, &scenes)?;
        let mut cache = DecCache { temporal: vec![None; self.p.dec.len()], rows: vec![], statics };
        let mut rows = Vec::new();
        for (s, tr) in traces.iter().enumerate() {
            let len = tr.first().map_or(0, |t| t.len());
            for step in 0..len {
                for (i, t) in tr.iter().enumerate() {
                    rows.push(RowMeta { sample: s, trace: i, step, group: t.group });
                }
            }
        }
        let refs = rows.iter().map(|r| RowRef { sample: r.sample, trace: r.trace, step: r.step }).collect();
        let hidden = self.decode_rows(g, b, &enc, &scenes, &traces, rows, &other_base, &mut cache)?;
        let logits = self.logits_of(g, b, hidden)?;
        Ok((DecoderOutput { logits, hidden, rows: refs }, enc))
    }

    /// Per-row state values (`rows x 1`) from decoder hidden states.
    pub fn values(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let mut b = Binder::new(&self.params);
        b.lin(g, self.p.value, hidden)
    }

    /// Logits for the next token of every trace, given their full histories.
    pub fn next_token_logits(&self, scene: &SceneInput, traces: &[AgentTrace]) -> Result<Tensor> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, &[(scene, traces)])?;
        let all = g.value(out.logits);
        let last = traces.first().map_or(0, |t| t.len()) - 1;
        let mut data = Vec::new();
        for (k, r) in out.rows.iter().enumerate() {
            if r.step == last {
                data.extend_from_slice(all.row(k));
            }
        }
        Ok(Tensor { rows: traces.len(), cols: all.cols, data })
    }

    /// One-shot future positions of the non-interest agents in each agent's
    /// anchor frame, scaled by 0.1 (`n_others x 2*16`).
    pub fn other_agent_predictions(&self, g: &mut Graph, scenes: &[&SceneInput]) -> Result<(Var, Vec<usize>)> {
        let mut b = Binder::new(&self.params);
        let enc = self.encode(g, &mut b, scenes)?;
        self.other_head(g, &mut b, &enc, scenes)
    }

    fn other_head(&self, g: &mut Graph, b: &mut Binder, enc: &Encoded, scenes: &[&SceneInput]) -> Result<(Var, Vec<usize>)> {
        let cfg = &self.config;
        let mut rows = Vec::new();
        let mut pat = AttnPattern::new();
        let mut base = vec![0];
        for (s, sc) in scenes.iter().enumerate() {
            for &o in &sc.others {
                rows.push(enc.agent_base[s] + o);
                pat.push_query(enc.map_base[s]..enc.map_base[s + 1]);
            }
            base.push(rows.len());
        }
        let poses: Vec<Pose2> = rows.iter().map(|&r| enc.agent_poses[r]).collect();
        let mut x = g.gather_rows(enc.agents, &rows)?;
        if let Some(m) = enc.map {
            let kv = b.keys_values(g, self.p.other_attn, m, &enc.map_poses, cfg)?;
            x = b.attend(g, self.p.other_attn, x, &poses, kv, Arc::new(pat), cfg)?;
        }
        x = b.ffn(g, self.p.other_ffn, x)?;
        Ok((b.lin(g, self.p.other_out, x)?, base))
    }

    /// Teacher-forced pass plus the other-agent head on the same encoding.
    /// The second output has rows grouped per sample as given by the offsets.
    pub fn forward_with_others(&self, g: &mut Graph, batch: &[(&SceneInput, &[AgentTrace])]) -> Result<(DecoderOutput, Var, Vec<usize>)> {
        let mut b = Binder::new(&self.params);
        let (out, enc) = self.forward_inner(g, &mut b, batch)?;
        let scenes: Vec<&SceneInput> = batch.iter().map(|x| x.0).collect();
        let (o, base) = self.other_head(g, &mut b, &enc, &scenes)?;
        Ok((out, o, base))
    }

    /// Samples `n_rollouts` futures of all interest agents from the scenario anchor.
    pub fn rollout(&self, scenario: &Scenario, opts: &RolloutOptions) -> Result<RolloutBatch> {
        let anchor = scenario.anchor_time;
        let scene = build_scene_input(scenario, anchor, &self.config)?;
        let interest = scenario.interest_indices();
        let mut starts = Vec::new();
        for &i in &interest {
            let (tt, st) = tokenize_from_anchor(scenario, i, anchor, 2, &self.tokenizer)?;
            starts.push((tt.tokens[0], st));
        }
        let mut root = ChaCha8Rng::seed_from_u64(opts.seed);
        let seeds: Vec<u64> = (0..opts.n_rollouts).map(|_| root.gen()).collect();
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let n_agents = interest.len();
        let mut traces: Vec<AgentTrace> = Vec::with_capacity(opts.n_rollouts * n_agents);
        for r in 0..opts.n_rollouts {
            for (slot, &(tok0, st)) in starts.iter().enumerate() {
                traces.push(AgentTrace { slot, group: r, tokens: vec![tok0], states: vec![st] });
            }
        }
        let mut log_probs = vec![Vec::with_capacity(opts.horizon); traces.len()];

        let mut g = Graph::inference();
        let mut b = Binder::new(&self.params);
        let scenes = [&scene];
        let enc = self.encode(&mut g, &mut b, &scenes)?;
        let (statics, other_base) = self.decoder_statics(&mut g, &mut b, &enc, &scenes)?;
        let mut cache = DecCache { temporal: vec![None; self.p.dec.len()], rows: vec![], statics };
        for step in 0..opts.horizon {
            let rows: Vec<RowMeta> = traces.iter().enumerate().map(|(i, t)| RowMeta { sample: 0, trace: i, step, group: t.group }).collect();
            let tr_slices = [&traces[..]];
            let hidden = self.decode_rows(&mut g, &mut b, &enc, &scenes, &tr_slices, rows, &other_base, &mut cache)?;
            let logits = self.logits_of(&mut g, &mut b, hidden)?;
            let lt = g.value(logits).clone();
            for (i, tr) in traces.iter_mut().enumerate() {
                let row = lt.row(i);
                let lse = math::log_sum_exp(row);
                let tok = sample_token(row, opts.temperature, &mut rngs[tr.group]);
                log_probs[i].push(row[tok] - lse);
                let mut st = *tr.states.last().unwrap();
                st.advance(MotionToken(tok as u32), &self.tokenizer);
                tr.tokens.push(MotionToken(tok as u32));
                tr.states.push(st);
            }
        }
        let start_poses = interest.iter().map(|&i| scenario.agents[i].pose_at_step(math::floor(anchor / NATIVE_DT + 0.5) as usize).unwrap()).collect();
        let mut rollouts = Vec::with_capacity(opts.n_rollouts);
        for r in 0..opts.n_rollouts {
            let ts = &traces[r * n_agents..(r + 1) * n_agents];
            rollouts.push(Rollout {
                seed: seeds[r],
                poses: ts.iter().map(|t| t.states[1..].iter().map(|s| s.pose()).collect()).collect(),
                tokens: ts.iter().map(|t| t.tokens[1..].to_vec()).collect(),
                log_probs: log_probs[r * n_agents..(r + 1) * n_agents].to_vec(),
                rewards: Vec::new(),
                terminal: Vec::new(),
            });
        }
        Ok(RolloutBatch {
            n_rollouts: opts.n_rollouts,
            anchor_time: anchor,
            horizon: opts.horizon,
            agent_ids: scenario.interest_ids.clone(),
            start_poses,
            rollouts,
        })
    }

    /// Traces reproducing a rollout for teacher-forced rescoring. Trace
    /// `r * n_agents + a` holds agent `a` of rollout `r`, in group `r`; the
    /// last sampled token is a target only and is not fed.
    pub fn rollout_traces(&self, scenario: &Scenario, batch: &RolloutBatch) -> Result<Vec<AgentTrace>> {
        let mut starts = Vec::new();
        for &i in &scenario.interest_indices() {
            let (tt, st) = tokenize_from_anchor(scenario, i, batch.anchor_time, 2, &self.tokenizer)?;
            starts.push((tt.tokens[0], st));
        }
        let mut out = Vec::new();
        for (r, ro) in batch.rollouts.iter().enumerate() {
            for (a, &(tok0, st)) in starts.iter().enumerate() {
                let fed = &ro.tokens[a][..ro.tokens[a].len().saturating_sub(1)];
                out.push(AgentTrace::new(a, r, tok0, st, fed, &self.tokenizer));
            }
        }
        Ok(out)
    }
}

/// Samples from `softmax(logits / temperature)`; temperature 0 is argmax
/// with ties to the lowest index.
pub fn sample_token(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature <= 1e-6 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&v| math::exp((v - m) / temperature)).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &x) in w.iter().enumerate() {
        if u < x {
            return i;
        }
        u -= x;
    }
    w.len() - 1
}
