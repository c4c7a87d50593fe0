//! Decay-informed prompts and the conditional noise predictor.
//!
//! Parameter layout (`W` spatial width, `w` day-of-week width, `m` model
//! width, `k` attention width):
//!
//! ```text
//! codec.D                  L x W      private, frozen
//! codec.P                  7 x w      private
//! codec.Z                  T_h x W    private
//! prompt.l{i}.W / .b       MLP 3 -> hidden... -> d_c, shared
//! prompt.null              1 x d_c    shared
//! predictor.t_proj.W / .b  128 x m    shared
//! predictor.in_proj.W / .b (2W+w) x m private
//! predictor.layers.{l}.*   pre-norm self-attention + feed-forward, shared
//! predictor.cross.*        pre-norm cross-attention onto the prompt, shared
//! predictor.head.*         norm -> dense -> SiLU -> dense to W, private
//! ```

use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, DAYS_PER_WEEK};
use crate::error::{Error, Result};
use crate::mobility::GridSpec;
use crate::nn::layers::{dense, multi_head, AttnWeights};
use crate::nn::{glorot, Graph, ParamSet, Parameter, Tag, Tensor, Var};
use crate::physics::DecayModel;

pub const T_EMB_WIDTH: usize = 128;
pub const PROMPT_FEATURES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_model_width")]
    pub model_width: usize,
    /// Total query/key/value width across heads.
    #[serde(default = "default_model_width")]
    pub d_k: usize,
    #[serde(default = "default_d_c")]
    pub d_c: usize,
    #[serde(default = "default_prompt_widths")]
    pub prompt_mlp_widths: Vec<usize>,
    #[serde(default = "default_ffn_width")]
    pub ffn_width: usize,
    #[serde(default = "default_t_emb")]
    pub t_emb_width: usize,
}

fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_model_width() -> usize {
    64
}
fn default_d_c() -> usize {
    16
}
fn default_prompt_widths() -> Vec<usize> {
    vec![32]
}
fn default_ffn_width() -> usize {
    128
}
fn default_t_emb() -> usize {
    T_EMB_WIDTH
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            layers: default_layers(),
            heads: default_heads(),
            model_width: default_model_width(),
            d_k: default_model_width(),
            d_c: default_d_c(),
            prompt_mlp_widths: default_prompt_widths(),
            ffn_width: default_ffn_width(),
            t_emb_width: T_EMB_WIDTH,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        for (path, v) in [
            ("model.predictor.layers", self.layers),
            ("model.predictor.heads", self.heads),
            ("model.predictor.model_width", self.model_width),
            ("model.predictor.d_k", self.d_k),
            ("model.predictor.d_c", self.d_c),
            ("model.predictor.ffn_width", self.ffn_width),
        ] {
            if v == 0 {
                return Err(Error::config(path, "must be >= 1"));
            }
        }
        if self.model_width % self.heads != 0 {
            return Err(Error::config("model.predictor.heads", "must divide model_width"));
        }
        if self.d_k % self.heads != 0 {
            return Err(Error::config("model.predictor.heads", "must divide d_k"));
        }
        if self.prompt_mlp_widths.contains(&0) {
            return Err(Error::config("model.predictor.prompt_mlp_widths", "widths must be >= 1"));
        }
        if self.t_emb_width != T_EMB_WIDTH {
            return Err(Error::config("model.predictor.t_emb_width", format!("must be {T_EMB_WIDTH}")));
        }
        Ok(())
    }
}

/// 64 sines then 64 cosines of `t * 10^(j * 4 / 63)`, `j = 0..63`.
pub fn time_embedding(t: f64) -> Vec<f64> {
    let half = T_EMB_WIDTH / 2;
    let freqs: Vec<f64> = (0..half).map(|j| 10f64.powf(j as f64 * 4.0 / 63.0)).collect();
    let mut out: Vec<f64> = freqs.iter().map(|f| (f * t).sin()).collect();
    out.extend(freqs.iter().map(|f| (f * t).cos()));
    out
}

fn push_dense(ps: &mut ParamSet, seed: u64, name: &str, fan_in: usize, fan_out: usize, tag: &Tag) -> Result<()> {
    ps.insert(Parameter::new(format!("{name}.W"), glorot(seed, &format!("{name}.W"), fan_in, fan_out, &[fan_in, fan_out]), tag.clone()))?;
    ps.insert(Parameter::new(format!("{name}.b"), Tensor::zeros(&[1, fan_out]), tag.clone()))?;
    Ok(())
}

fn push_norm(ps: &mut ParamSet, name: &str, width: usize, tag: &Tag) -> Result<()> {
    ps.insert(Parameter::new(format!("{name}.g"), Tensor::from_vec(&[1, width], vec![1.0; width])?, tag.clone()))?;
    ps.insert(Parameter::new(format!("{name}.b"), Tensor::zeros(&[1, width]), tag.clone()))?;
    Ok(())
}

fn push_attn(ps: &mut ParamSet, seed: u64, name: &str, q_in: usize, kv_in: usize, d_k: usize, out: usize) -> Result<()> {
    for (w, rows, cols) in [("W_Q", q_in, d_k), ("W_K", kv_in, d_k), ("W_V", kv_in, d_k), ("W_O", d_k, out)] {
        let full = format!("{name}.{w}");
        ps.insert(Parameter::new(full.clone(), glorot(seed, &full, rows, cols, &[rows, cols]), Tag::Shared))?;
    }
    Ok(())
}

/// Freshly initialized shared parameters (prompt MLP, null row, step
/// projection, transformer, cross-attention).
pub fn init_shared(cfg: &PredictorConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    let tag = Tag::Shared;
    let mut fan_in = PROMPT_FEATURES;
    for (i, &w) in cfg.prompt_mlp_widths.iter().chain(std::iter::once(&cfg.d_c)).enumerate() {
        push_dense(&mut ps, seed, &format!("prompt.l{i}"), fan_in, w, &tag)?;
        fan_in = w;
    }
    ps.insert(Parameter::new("prompt.null", glorot(seed, "prompt.null", 1, cfg.d_c, &[1, cfg.d_c]), tag.clone()))?;
    push_dense(&mut ps, seed, "predictor.t_proj", T_EMB_WIDTH, cfg.model_width, &tag)?;
    let m = cfg.model_width;
    for l in 0..cfg.layers {
        let base = format!("predictor.layers.{l}");
        push_norm(&mut ps, &format!("{base}.ln1"), m, &tag)?;
        push_attn(&mut ps, seed, &format!("{base}.attn"), m, m, cfg.d_k, m)?;
        push_norm(&mut ps, &format!("{base}.ln2"), m, &tag)?;
        push_dense(&mut ps, seed, &format!("{base}.ffn1"), m, cfg.ffn_width, &tag)?;
        push_dense(&mut ps, seed, &format!("{base}.ffn2"), cfg.ffn_width, m, &tag)?;
    }
    push_norm(&mut ps, "predictor.cross.ln", m, &tag)?;
    push_attn(&mut ps, seed, "predictor.cross", m, cfg.d_c, cfg.d_k, m)?;
    Ok(ps)
}

/// Freshly initialized private parameters for one city: embedding tables,
/// input projection and output head. `codec.D` is the fixed spectral
/// embedding of the city's grid.
pub fn init_private(cfg: &PredictorConfig, codec: &CodecConfig, grid: &GridSpec, city: &str, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    codec.validate()?;
    let tag = Tag::Private(city.to_string());
    let (sw, tw, m) = (codec.spatial_width, codec.temporal_width, cfg.model_width);
    let mut ps = ParamSet::new();
    let mut d = codec.location_embedding(grid)?;
    d.quantize();
    ps.insert(Parameter::new("codec.D", d, tag.clone()).frozen())?;
    ps.insert(Parameter::new("codec.P", glorot(seed, "codec.P", DAYS_PER_WEEK, tw, &[DAYS_PER_WEEK, tw]), tag.clone()))?;
    let t_h = grid.slots_per_day;
    ps.insert(Parameter::new("codec.Z", glorot(seed, "codec.Z", t_h, sw, &[t_h, sw]), tag.clone()))?;
    push_dense(&mut ps, seed, "predictor.in_proj", codec.row_width(), m, &tag)?;
    push_norm(&mut ps, "predictor.head.ln", m, &tag)?;
    push_dense(&mut ps, seed, "predictor.head.l0", m, m, &tag)?;
    push_dense(&mut ps, seed, "predictor.head.l1", m, sw, &tag)?;
    Ok(ps)
}

/// Decay-model lookups behind the prompt. `decay = None` stands for a zero
/// field: every ratio is 1 and every intensity 0.
#[derive(Debug, Clone)]
pub struct PromptContext {
    pub decay: Option<DecayModel>,
    pub slots_per_day: usize,
}

impl PromptContext {
    pub fn no_disaster(grid: &GridSpec) -> Self {
        Self { decay: None, slots_per_day: grid.slots_per_day }
    }

    pub fn with_decay(model: DecayModel, grid: &GridSpec) -> Self {
        Self { decay: Some(model), slots_per_day: grid.slots_per_day }
    }

    /// `[H(loc, slot), slot-of-day / T_h, intensity / max intensity]`.
    pub fn features(&self, loc: usize, slot: usize) -> [f64; PROMPT_FEATURES] {
        let tod = (slot % self.slots_per_day) as f64 / self.slots_per_day as f64;
        match &self.decay {
            Some(m) if slot < m.n_slots() => [m.ratio(loc, slot), tod, m.normalized_intensity(loc, slot)],
            _ => [1.0, tod, 0.0],
        }
    }
}

/// Prompt MLP over stacked feature rows (`n x 3`), giving `n x d_c`.
pub fn prompt_mlp(g: &mut Graph, features: Var) -> Result<Var> {
    let mut h = features;
    let mut i = 0;
    loop {
        let (w, b) = match (g.param(&format!("prompt.l{i}.W")), g.param(&format!("prompt.l{i}.b"))) {
            (Ok(w), Ok(b)) => (w, b),
            _ if i == 0 => return Err(Error::InvalidInput("model has no prompt MLP".into())),
            _ => break,
        };
        let y = dense(g, h, w, b)?;
        let last = g.params().id(&format!("prompt.l{}.W", i + 1)).is_none();
        h = if last { y } else { g.silu(y) };
        i += 1;
        if last {
            break;
        }
    }
    Ok(h)
}

/// Locations decoded from noised spatial rows and the prompt built from them.
pub struct Prompt {
    pub rows: Var,
    pub locations: Vec<usize>,
}

/// Decodes each noised spatial row (`x_t`, `n x W`) against `codec.D`, looks
/// up the decay ratio at the decoded location and the row's slot, and maps the
/// features through the prompt MLP.
pub fn build_prompt(g: &mut Graph, x_t: &Tensor, slots: &[usize], ctx: Option<&PromptContext>) -> Result<Prompt> {
    let ctx = ctx.ok_or_else(|| Error::Precondition("prompt needs fitted decay parameters".into()))?;
    if x_t.rows() != slots.len() {
        return Err(Error::InvalidInput(format!("{} rows for {} slots", x_t.rows(), slots.len())));
    }
    let d = &g.params().get("codec.D").ok_or_else(|| Error::InvalidInput("model has no codec.D".into()))?.value;
    let decoded = crate::codec::decode(x_t, d)?;
    let mut feats = Vec::with_capacity(slots.len() * PROMPT_FEATURES);
    for (&loc, &slot) in decoded.locations.iter().zip(slots) {
        feats.extend_from_slice(&ctx.features(loc, slot));
    }
    let f = g.constant_rows(slots.len(), PROMPT_FEATURES, feats)?;
    let rows = prompt_mlp(g, f)?;
    Ok(Prompt { rows, locations: decoded.locations })
}

/// `n` copies of the learned null row.
pub fn null_condition(g: &mut Graph, n: usize) -> Result<Var> {
    let null = g.param("prompt.null")?;
    Ok(g.repeat_rows(null, n))
}

/// Inputs of one predictor call: `blocks` sequences of equal length stacked
/// along rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorInput {
    pub blocks: usize,
    /// Noised spatial segments, `(blocks * n) x W`.
    pub x_t: Tensor,
    pub day_of_week: Vec<usize>,
    pub slot_of_day: Vec<usize>,
    /// Diffusion step per block.
    pub steps: Vec<usize>,
}

impl PredictorInput {
    pub fn rows_per_block(&self) -> usize {
        self.x_t.rows() / self.blocks.max(1)
    }

    fn validate(&self) -> Result<()> {
        let n = self.x_t.rows();
        if self.blocks == 0 || n % self.blocks != 0 {
            return Err(Error::InvalidInput(format!("{n} rows do not split into {} sequences", self.blocks)));
        }
        if self.day_of_week.len() != n || self.slot_of_day.len() != n || self.steps.len() != self.blocks {
            return Err(Error::InvalidInput("predictor input lengths disagree".into()));
        }
        Ok(())
    }
}

fn norm(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let (gm, bt) = (g.param(&format!("{name}.g"))?, g.param(&format!("{name}.b"))?);
    g.layer_norm(x, gm, bt)
}

fn dense_named(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let (w, b) = (g.param(&format!("{name}.W"))?, g.param(&format!("{name}.b"))?);
    dense(g, x, w, b)
}

fn attn_weights(g: &mut Graph, name: &str) -> Result<AttnWeights> {
    Ok(AttnWeights {
        wq: g.param(&format!("{name}.W_Q"))?,
        wk: g.param(&format!("{name}.W_K"))?,
        wv: g.param(&format!("{name}.W_V"))?,
        wo: g.param(&format!("{name}.W_O"))?,
    })
}

/// Predicted noise for the spatial segment, `(blocks * n) x W`, given one
/// conditioning row per input row in `c`.
pub fn predict_noise(g: &mut Graph, cfg: &PredictorConfig, input: &PredictorInput, c: Var) -> Result<Var> {
    input.validate()?;
    let rows = input.x_t.rows();
    if g.shape(c).0 != rows {
        return Err(Error::InvalidInput(format!("{} prompt rows for {rows} trajectory rows", g.shape(c).0)));
    }
    let n = input.rows_per_block();
    let p = g.param("codec.P")?;
    let z = g.param("codec.Z")?;
    let x = g.constant(&input.x_t);
    let pd = g.gather_rows(p, &input.day_of_week)?;
    let zs = g.gather_rows(z, &input.slot_of_day)?;
    let e = g.concat_cols(&[x, pd, zs])?;
    let mut h = dense_named(g, e, "predictor.in_proj")?;

    let temb: Vec<f64> = input.steps.iter().flat_map(|&t| time_embedding(t as f64)).collect();
    let temb = g.constant_rows(input.blocks, T_EMB_WIDTH, temb)?;
    let tp = dense_named(g, temb, "predictor.t_proj")?;
    let tp = g.repeat_rows(tp, n);
    h = g.add(h, tp)?;

    for l in 0..cfg.layers {
        let base = format!("predictor.layers.{l}");
        let a_in = norm(g, h, &format!("{base}.ln1"))?;
        let w = attn_weights(g, &format!("{base}.attn"))?;
        let a = multi_head(g, a_in, a_in, &w, cfg.heads, input.blocks)?;
        h = g.add(h, a)?;
        let f_in = norm(g, h, &format!("{base}.ln2"))?;
        let f = dense_named(g, f_in, &format!("{base}.ffn1"))?;
        let f = g.silu(f);
        let f = dense_named(g, f, &format!("{base}.ffn2"))?;
        h = g.add(h, f)?;
    }

    let q_in = norm(g, h, "predictor.cross.ln")?;
    let w = attn_weights(g, "predictor.cross")?;
    let ca = multi_head(g, q_in, c, &w, cfg.heads, input.blocks)?;
    h = g.add(h, ca)?;

    let o = norm(g, h, "predictor.head.ln")?;
    let o = dense_named(g, o, "predictor.head.l0")?;
    let o = g.silu(o);
    dense_named(g, o, "predictor.head.l1")
}
