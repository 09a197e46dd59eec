//! Backbone encoder, box head and the full prompted forward pass.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::fusion::{FusionParams, ProjectionMode};
use crate::params::{Conv1x1, Graph, ParamId, ParamStore};
use crate::prompt::{PromptBlockParams, DEFAULT_LAMBDA, DEFAULT_REDUCTION};
use crate::tokenizer::{Modality, PatchEmbedConfig, Tokenizer};

const LN_EPS: f64 = 1e-6;

/// Which modalities feed the tracker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum ModalitySet {
    #[serde(rename = "rgb")]
    Rgb,
    #[serde(rename = "rgb+d")]
    RgbDepth,
    #[serde(rename = "rgb+t")]
    RgbTir,
    #[default]
    #[serde(rename = "rgb+d+t")]
    RgbDepthTir,
}

impl ModalitySet {
    pub const ALL: [ModalitySet; 4] = [Self::Rgb, Self::RgbDepth, Self::RgbTir, Self::RgbDepthTir];

    pub fn has_depth(self) -> bool {
        matches!(self, Self::RgbDepth | Self::RgbDepthTir)
    }

    pub fn has_tir(self) -> bool {
        matches!(self, Self::RgbTir | Self::RgbDepthTir)
    }

    /// Prompt blocks exist whenever an auxiliary modality does.
    pub fn uses_prompts(self) -> bool {
        self != Self::Rgb
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Rgb => "rgb",
            Self::RgbDepth => "rgb+d",
            Self::RgbTir => "rgb+t",
            Self::RgbDepthTir => "rgb+d+t",
        }
    }
}

impl std::str::FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::Argument(format!("unknown modality set {s:?} (expected rgb, rgb+d, rgb+t or rgb+d+t)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch: PatchEmbedConfig,
    /// Number of encoder layers `L`.
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub reduction: usize,
    pub lambda: f64,
    pub modalities: ModalitySet,
    pub projection_mode: ProjectionMode,
    /// Ablation switch: when false, depth and thermal are fused without
    /// the projection step.
    pub projection: bool,
    /// Ablation switch: keep `alpha = beta = 1` fixed.
    pub freeze_alpha_beta: bool,
    /// Template crop side as a multiple of `sqrt(w * h)`.
    pub template_factor: f64,
    /// Search crop side as a multiple of `sqrt(w * h)`.
    pub search_factor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: PatchEmbedConfig::default(),
            layers: 4,
            heads: 4,
            mlp_ratio: 2,
            reduction: DEFAULT_REDUCTION,
            lambda: DEFAULT_LAMBDA,
            modalities: ModalitySet::RgbDepthTir,
            projection_mode: ProjectionMode::Normalized,
            projection: true,
            freeze_alpha_beta: false,
            template_factor: 2.0,
            search_factor: 4.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        let c = self.patch.embed_dim;
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.heads == 0 || c % self.heads != 0 {
            return Err(Error::Config(format!("heads {} must divide embed_dim {c}", self.heads)));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if self.reduction == 0 || c % self.reduction != 0 {
            return Err(Error::Config(format!("reduction {} must divide embed_dim {c}", self.reduction)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.template_factor > 0.0 && self.search_factor > 0.0) {
            return Err(Error::Config("crop factors must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, group: &str, c: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), group, Array2::ones((c, 1)), true);
        let beta = store.add(format!("{name}.beta"), group, Array2::zeros((c, 1)), true);
        Self { gamma, beta }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let n = g.tape.normalize_cols(x, LN_EPS);
        let n = g.tape.mul_column(n, gamma);
        g.tape.add_column(n, beta)
    }
}

/// Pre-norm transformer layer over the joint template + search tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub qkv: Conv1x1,
    pub proj: Conv1x1,
    pub norm2: LayerNorm,
    pub fc1: Conv1x1,
    pub fc2: Conv1x1,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, index: usize, c: usize, mlp_ratio: usize) -> Self {
        let group = "backbone";
        let p = format!("backbone.layer{index}");
        let std = (1.0 / c as f64).sqrt();
        let hidden = c * mlp_ratio;
        Self {
            norm1: LayerNorm::new(store, &format!("{p}.norm1"), group, c),
            qkv: Conv1x1::new(store, rng, &format!("{p}.qkv"), group, c, 3 * c, std, true),
            proj: Conv1x1::new(store, rng, &format!("{p}.proj"), group, c, c, std * 0.5, true),
            norm2: LayerNorm::new(store, &format!("{p}.norm2"), group, c),
            fc1: Conv1x1::new(store, rng, &format!("{p}.fc1"), group, c, hidden, std, true),
            fc2: Conv1x1::new(store, rng, &format!("{p}.fc2"), group, hidden, c, (1.0 / hidden as f64).sqrt() * 0.5, true),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var, heads: usize) -> Var {
        let c = g.tape.shape(x).0;
        let dh = c / heads;
        let n1 = self.norm1.apply(g, x);
        let qkv = self.qkv.apply(g, n1);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = g.tape.slice_rows(qkv, h * dh, (h + 1) * dh);
            let k = g.tape.slice_rows(qkv, c + h * dh, c + (h + 1) * dh);
            let v = g.tape.slice_rows(qkv, 2 * c + h * dh, 2 * c + (h + 1) * dh);
            let qt = g.tape.transpose(q);
            let logits = g.tape.matmul(qt, k);
            let logits = g.tape.scale(logits, scale);
            // Row i holds the attention of query token i over all keys.
            let attn = g.tape.softmax_rows(logits);
            let attn_t = g.tape.transpose(attn);
            outs.push(g.tape.matmul(v, attn_t));
        }
        let joined = if heads == 1 { outs[0] } else { g.tape.concat_rows(&outs) };
        let attn_out = self.proj.apply(g, joined);
        let x = g.tape.add(x, attn_out);
        let n2 = self.norm2.apply(g, x);
        let hidden = self.fc1.apply(g, n2);
        let hidden = g.tape.gelu(hidden);
        let mlp = self.fc2.apply(g, hidden);
        g.tape.add(x, mlp)
    }
}

/// Column indices of the 3×3 neighbourhood of every cell of a `grid × grid`
/// map, one list per kernel tap; `None` marks zero padding.
pub fn neighbour_index(grid: usize) -> Vec<Vec<Option<usize>>> {
    let mut taps = Vec::with_capacity(9);
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let idx = (0..grid * grid)
                .map(|cell| {
                    let (x, y) = ((cell % grid) as i64 + dx, (cell / grid) as i64 + dy);
                    let inside = (0..grid as i64).contains(&x) && (0..grid as i64).contains(&y);
                    inside.then(|| (y * grid as i64 + x) as usize)
                })
                .collect();
            taps.push(idx);
        }
    }
    taps
}

/// 3×3 convolution over the search grid, GELU, then a 1×1 output layer and
/// a sigmoid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branch {
    pub conv: Conv1x1,
    pub out: Conv1x1,
}

impl Branch {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize, hidden: usize, out: usize) -> Self {
        Self {
            conv: Conv1x1::new(store, rng, &format!("{name}.conv"), "head", 9 * c, hidden, (1.0 / (9 * c) as f64).sqrt(), true),
            out: Conv1x1::new(store, rng, &format!("{name}.out"), "head", hidden, out, 0.1 / (hidden as f64).sqrt(), true),
        }
    }

    fn apply(&self, g: &mut Graph<'_>, x: Var, taps: &[Vec<Option<usize>>]) -> Var {
        let shifted: Vec<Var> = taps.iter().map(|idx| g.tape.gather_cols(x, idx.clone())).collect();
        let stacked = g.tape.concat_rows(&shifted);
        let h = self.conv.apply(g, stacked);
        let h = g.tape.gelu(h);
        let out = self.out.apply(g, h);
        g.tape.sigmoid(out)
    }
}

/// Per-cell head on the search tokens with separate score, sub-cell offset
/// and box-size branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoxHead {
    pub score: Branch,
    pub offset: Branch,
    pub size: Branch,
}

impl BoxHead {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, c: usize) -> Self {
        let hidden = (c / 2).max(1);
        let score = Branch::new(store, rng, "head.score", c, hidden, 1);
        // Start with low scores everywhere.
        store.value_mut(score.out.bias)[[0, 0]] = -2.0;
        let offset = Branch::new(store, rng, "head.offset", c, hidden, 2);
        let size = Branch::new(store, rng, "head.size", c, hidden, 2);
        Self { score, offset, size }
    }

    /// Returns `(score 1×n, offset 2×n, size 2×n)`, all in `(0, 1)`.
    pub fn apply(&self, g: &mut Graph<'_>, x: Var, grid: usize) -> HeadVars {
        let taps = neighbour_index(grid);
        HeadVars {
            score: self.score.apply(g, x, &taps),
            offset: self.offset.apply(g, x, &taps),
            size: self.size.apply(g, x, &taps),
        }
    }
}

/// Head outputs recorded on a tape. Column `i` is search cell `i`
/// (row-major over the `h_X × h_X` grid).
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub score: Var,
    pub offset: Var,
    pub size: Var,
}

/// Head outputs as plain arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    /// `h_X × h_X` score map.
    pub score: Array2<f64>,
    /// `2 × h_X²`: sub-cell `(x, y)` offsets in cell units.
    pub offset: Array2<f64>,
    /// `2 × h_X²`: `(w, h)` as fractions of the search crop side.
    pub size: Array2<f64>,
}

impl HeadOutput {
    pub fn grid(&self) -> usize {
        self.score.nrows()
    }

    /// Index of the highest-scoring cell; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &s) in self.score.iter().enumerate() {
            if s > best.1 {
                best = (i, s);
            }
        }
        best.0
    }

    /// Box `(cx, cy, w, h)` decoded at `cell`, normalized to the crop side.
    pub fn decode(&self, cell: usize) -> [f64; 4] {
        let grid = self.grid();
        let (gx, gy) = ((cell % grid) as f64, (cell / grid) as f64);
        [
            (gx + self.offset[[0, cell]]) / grid as f64,
            (gy + self.offset[[1, cell]]) / grid as f64,
            self.size[[0, cell]],
            self.size[[1, cell]],
        ]
    }
}

/// Patch matrices of one template/search pair for every modality in use.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchInputs {
    pub rgb: (Array2<f64>, Array2<f64>),
    pub depth: Option<(Array2<f64>, Array2<f64>)>,
    pub tir: Option<(Array2<f64>, Array2<f64>)>,
}

/// A complete tracker: tokenizer, encoder, head and, for multi-modal
/// configurations, the fusion module and one prompt block per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackerModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
    pub head: BoxHead,
    pub fusion: Option<FusionParams>,
    pub prompts: Vec<PromptBlockParams>,
}

impl TrackerModel {
    /// Builds a freshly initialized model. Every parameter starts trainable;
    /// see [`TrackerModel::freeze_backbone`].
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.patch.embed_dim;
        let tokenizer = Tokenizer::new(&mut store, &mut rng, config.patch)?;
        let layers = (0..config.layers)
            .map(|i| EncoderLayer::new(&mut store, &mut rng, i, c, config.mlp_ratio))
            .collect();
        let final_norm = LayerNorm::new(&mut store, "backbone.final_norm", "backbone", c);
        let head = BoxHead::new(&mut store, &mut rng, c);
        let mut fusion = None;
        let mut prompts = Vec::new();
        if config.modalities.uses_prompts() {
            if config.modalities == ModalitySet::RgbDepthTir {
                let f = FusionParams::new(&mut store, &mut rng, c, config.projection_mode, config.projection);
                if config.freeze_alpha_beta {
                    store.set_trainable(f.alpha, false);
                    store.set_trainable(f.beta, false);
                }
                fusion = Some(f);
            }
            for l in 0..config.layers {
                prompts.push(PromptBlockParams::new(
                    &mut store,
                    &mut rng,
                    l,
                    c,
                    config.reduction,
                    config.lambda,
                )?);
            }
        }
        Ok(Self {
            config,
            store,
            tokenizer,
            layers,
            final_norm,
            head,
            fusion,
            prompts,
        })
    }

    /// Parameters owned by fusion and prompt blocks.
    pub fn adapter_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.fusion.iter().flat_map(|f| f.param_ids()).collect();
        ids.extend(self.prompts.iter().flat_map(|p| p.param_ids()));
        ids
    }

    /// Freezes everything except the fusion module and prompt blocks, and
    /// keeps `alpha`/`beta` frozen when the configuration says so.
    pub fn freeze_backbone(&mut self) {
        self.store.freeze_all();
        for id in self.adapter_params() {
            self.store.set_trainable(id, true);
        }
        if let Some(f) = &self.fusion {
            if !f.projection || self.config.freeze_alpha_beta {
                self.store.set_trainable(f.alpha, false);
                self.store.set_trainable(f.beta, false);
            }
        }
    }

    /// Copies every same-named, same-shaped parameter from `other`, then
    /// seeds the depth and thermal patch embeddings with the RGB one.
    /// Returns the number of copied tensors.
    pub fn load_backbone_from(&mut self, other: &TrackerModel) -> usize {
        let mut copied = 0;
        for (_, p) in other.store.iter() {
            if let Some(id) = self.store.find(&p.name) {
                if self.store.value(id).dim() == p.value.dim() {
                    *self.store.value_mut(id) = p.value.clone();
                    copied += 1;
                }
            }
        }
        let rgb = self.tokenizer.rgb;
        for target in [self.tokenizer.depth, self.tokenizer.tir] {
            let w = self.store.value(rgb.weight).clone();
            let b = self.store.value(rgb.bias).clone();
            *self.store.value_mut(target.weight) = w;
            *self.store.value_mut(target.bias) = b;
        }
        copied
    }

    /// Records the forward pass; returns the head outputs.
    pub fn forward_on(&self, g: &mut Graph<'_>, inputs: &PatchInputs) -> Result<HeadVars> {
        let (t_rgb, aux) = self.embed_inputs(g, inputs)?;
        Ok(self.forward_tokens(g, t_rgb, aux))
    }

    /// RGB tokens and, for prompted configurations, the auxiliary tokens fed
    /// to the first prompt block (fused for `rgb+d+t`, passed through for the
    /// dual-modal sets).
    pub fn embed_inputs(&self, g: &mut Graph<'_>, inputs: &PatchInputs) -> Result<(Var, Option<Var>)> {
        let mods = self.config.modalities;
        let embed = |g: &mut Graph<'_>, pair: &(Array2<f64>, Array2<f64>), m: Modality| {
            let z = g.tape.constant(pair.0.clone());
            let x = g.tape.constant(pair.1.clone());
            self.tokenizer.embed_on(g, z, x, m)
        };
        let t_rgb = embed(g, &inputs.rgb, Modality::Rgb);
        if !mods.uses_prompts() {
            return Ok((t_rgb, None));
        }
        let t_d = match (&inputs.depth, mods.has_depth()) {
            (Some(pair), true) => Some(embed(g, pair, Modality::Depth)),
            (None, true) => return Err(Error::Argument("depth input missing".into())),
            _ => None,
        };
        let t_t = match (&inputs.tir, mods.has_tir()) {
            (Some(pair), true) => Some(embed(g, pair, Modality::Tir)),
            (None, true) => return Err(Error::Argument("thermal input missing".into())),
            _ => None,
        };
        let aux = match (t_d, t_t) {
            (Some(d), Some(t)) => {
                let fusion = self.fusion.as_ref().expect("fusion exists for rgb+d+t");
                fusion.fuse_on(g, d, t)
            }
            (Some(d), None) => d,
            (None, Some(t)) => t,
            (None, None) => unreachable!("prompted configurations carry an auxiliary modality"),
        };
        Ok((t_rgb, Some(aux)))
    }

    /// Encoder and head on already embedded tokens. `aux` is ignored by
    /// configurations without prompt blocks.
    pub fn forward_tokens(&self, g: &mut Graph<'_>, t_rgb: Var, aux: Option<Var>) -> HeadVars {
        let n_template = self.config.patch.n_template();
        let mut prompt = match (aux, self.prompts.first()) {
            (Some(aux), Some(block)) => Some(block.apply_on(g, t_rgb, aux, n_template)),
            _ => None,
        };
        let mut h = t_rgb;
        for (l, layer) in self.layers.iter().enumerate() {
            let input = match prompt {
                Some(p) => g.tape.add(h, p),
                None => h,
            };
            let next = layer.apply(g, input, self.config.heads);
            if let Some(p) = prompt {
                if l + 1 < self.prompts.len() {
                    prompt = Some(self.prompts[l + 1].apply_on(g, h, p, n_template));
                }
            }
            h = next;
        }
        let h = self.final_norm.apply(g, h);
        let n = self.config.patch.n_tokens();
        let search = g.tape.slice_cols(h, n_template, n);
        self.head.apply(g, search, self.config.patch.search_grid())
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, inputs: &PatchInputs) -> Result<HeadOutput> {
        let mut g = Graph::inference(&self.store);
        let out = self.forward_on(&mut g, inputs)?;
        Ok(head_output(&g, out, self.config.patch.search_grid()))
    }
}

/// Copies head outputs off a tape.
pub fn head_output(g: &Graph<'_>, vars: HeadVars, grid: usize) -> HeadOutput {
    let score = g.tape.value(vars.score).clone().into_shape_with_order((grid, grid)).expect("grid² scores");
    HeadOutput {
        score,
        offset: g.tape.value(vars.offset).clone(),
        size: g.tape.value(vars.size).clone(),
    }
}
