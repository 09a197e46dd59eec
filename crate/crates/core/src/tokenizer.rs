//! Patch embedding of template and search crops into token matrices.
//!
//! For a modality `M`, the token matrix is the column-wise concatenation
//! `[PE(Z_M) + Pos_Z | PE(X_M) + Pos_X]`, where `PE` is a learned linear map of
//! flattened, non-overlapping patches. Tokens are stored channel-major
//! (`C × n_tokens`), template tokens first.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::data_model::Image;
use crate::error::{Error, Result};
use crate::params::{normal_matrix, Conv1x1, Graph, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
    Tir,
    /// Output of the depth/thermal fusion.
    Fused,
}

/// Patch and crop geometry. Crops are square.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchEmbedConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub template_size: usize,
    pub search_size: usize,
}

impl Default for PatchEmbedConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            template_size: 32,
            search_size: 64,
        }
    }
}

impl PatchEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 {
            return Err(Error::Argument("patch_size and embed_dim must be positive".into()));
        }
        for (what, size) in [("template_size", self.template_size), ("search_size", self.search_size)] {
            if size == 0 || size % self.patch_size != 0 {
                return Err(Error::Argument(format!(
                    "{what} {size} is not a positive multiple of patch_size {}",
                    self.patch_size
                )));
            }
        }
        Ok(())
    }

    /// Template grid side, `h_Z`.
    pub fn template_grid(&self) -> usize {
        self.template_size / self.patch_size
    }

    /// Search grid side, `h_X`.
    pub fn search_grid(&self) -> usize {
        self.search_size / self.patch_size
    }

    pub fn n_template(&self) -> usize {
        self.template_grid().pow(2)
    }

    pub fn n_search(&self) -> usize {
        self.search_grid().pow(2)
    }

    pub fn n_tokens(&self) -> usize {
        self.n_template() + self.n_search()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Concatenated template + search tokens of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    /// `C × (n_template + n_search)`.
    pub tokens: Array2<f64>,
    pub modality: Modality,
    pub n_template: usize,
    pub n_search: usize,
}

impl TokenSet {
    pub fn new(tokens: Array2<f64>, modality: Modality, n_template: usize, n_search: usize) -> Result<Self> {
        if tokens.ncols() != n_template + n_search {
            return Err(Error::shape("token count", n_template + n_search, tokens.ncols()));
        }
        Ok(Self {
            tokens,
            modality,
            n_template,
            n_search,
        })
    }

    pub fn zeros(channels: usize, modality: Modality, n_template: usize, n_search: usize) -> Self {
        Self {
            tokens: Array2::zeros((channels, n_template + n_search)),
            modality,
            n_template,
            n_search,
        }
    }

    pub fn channels(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn len(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.ncols() == 0
    }

    /// Same channel count and template/search split.
    pub fn same_layout(&self, other: &TokenSet) -> bool {
        self.tokens.dim() == other.tokens.dim()
            && self.n_template == other.n_template
            && self.n_search == other.n_search
    }
}

/// Replicates a single-channel image into three identical channels.
/// Three-channel images pass through unchanged.
pub fn to_three_channel(img: &Image) -> Image {
    match img.channels() {
        3 => img.clone(),
        1 => {
            let plane = img.data().index_axis(ndarray::Axis(0), 0);
            let stacked = ndarray::stack(ndarray::Axis(0), &[plane, plane, plane]).expect("same shape");
            Image::from_array(stacked)
        }
        c => panic!("to_three_channel: unsupported channel count {c}"),
    }
}

/// Fixed pixel standardization applied while extracting patches.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Flattens non-overlapping `patch × patch` tiles into columns, row-major
/// over the tile grid. Each column is ordered `(channel, row, col)` and
/// holds standardized values `(v - PIXEL_MEAN) / PIXEL_STD`.
pub fn image_patches(img: &Image, expected_size: usize, patch: usize, what: &str) -> Result<Array2<f64>> {
    if img.channels() != 3 {
        return Err(Error::shape(format!("{what} channels"), 3, img.channels()));
    }
    if img.height() != expected_size {
        return Err(Error::shape(format!("{what} height"), expected_size, img.height()));
    }
    if img.width() != expected_size {
        return Err(Error::shape(format!("{what} width"), expected_size, img.width()));
    }
    let grid = expected_size / patch;
    let data = img.data();
    let mut out = Array2::zeros((3 * patch * patch, grid * grid));
    for gy in 0..grid {
        for gx in 0..grid {
            let col = gy * grid + gx;
            let mut row = 0;
            for c in 0..3 {
                for py in 0..patch {
                    for px in 0..patch {
                        out[[row, col]] = (data[[c, gy * patch + py, gx * patch + px]] as f64 - PIXEL_MEAN) / PIXEL_STD;
                        row += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-modality patch projections plus shared positional encodings.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    pub config: PatchEmbedConfig,
    pub rgb: Conv1x1,
    pub depth: Conv1x1,
    pub tir: Conv1x1,
    pub pos_template: ParamId,
    pub pos_search: ParamId,
}

impl Tokenizer {
    /// Registers the tokenizer's parameters under `patch_embed.*`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, config: PatchEmbedConfig) -> Result<Self> {
        config.validate()?;
        let (pd, c) = (config.patch_dim(), config.embed_dim);
        let std = (1.0 / pd as f64).sqrt();
        let rgb = Conv1x1::new(store, rng, "patch_embed.rgb", "patch_embed", pd, c, std, true);
        let depth = Conv1x1::new(store, rng, "patch_embed.depth", "patch_embed", pd, c, std, true);
        let tir = Conv1x1::new(store, rng, "patch_embed.tir", "patch_embed", pd, c, std, true);
        let pos_template = store.add(
            "patch_embed.pos_template",
            "patch_embed",
            normal_matrix(rng, c, config.n_template(), 0.02),
            true,
        );
        let pos_search = store.add(
            "patch_embed.pos_search",
            "patch_embed",
            normal_matrix(rng, c, config.n_search(), 0.02),
            true,
        );
        Ok(Self {
            config,
            rgb,
            depth,
            tir,
            pos_template,
            pos_search,
        })
    }

    pub fn projection(&self, modality: Modality) -> Conv1x1 {
        match modality {
            Modality::Rgb => self.rgb,
            Modality::Depth => self.depth,
            Modality::Tir => self.tir,
            Modality::Fused => panic!("the fused modality has no patch projection"),
        }
    }

    /// Patch matrices for a template/search crop pair, after three-channel
    /// replication of single-channel inputs.
    pub fn patches(&self, template: &Image, search: &Image) -> Result<(Array2<f64>, Array2<f64>)> {
        let cfg = &self.config;
        let z = image_patches(&to_three_channel(template), cfg.template_size, cfg.patch_size, "template")?;
        let x = image_patches(&to_three_channel(search), cfg.search_size, cfg.patch_size, "search")?;
        Ok((z, x))
    }

    /// Records the embedding on a graph; returns the `C × n_tokens` node.
    pub fn embed_on(&self, g: &mut Graph<'_>, template_patches: Var, search_patches: Var, modality: Modality) -> Var {
        let proj = self.projection(modality);
        let z = proj.apply(g, template_patches);
        let x = proj.apply(g, search_patches);
        let pz = g.param(self.pos_template);
        let px = g.param(self.pos_search);
        let z = g.tape.add(z, pz);
        let x = g.tape.add(x, px);
        g.tape.concat_cols(&[z, x])
    }

    /// Embeds a template/search crop pair of one modality.
    pub fn embed(&self, store: &ParamStore, template: &Image, search: &Image, modality: Modality) -> Result<TokenSet> {
        let (z, x) = self.patches(template, search)?;
        let mut g = Graph::inference(store);
        let zv = g.tape.constant(z);
        let xv = g.tape.constant(x);
        let out = self.embed_on(&mut g, zv, xv, modality);
        TokenSet::new(
            g.tape.value(out).clone(),
            modality,
            self.config.n_template(),
            self.config.n_search(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, s: usize) -> Image {
        Image::from_array(ndarray::Array3::from_shape_simple_fn((c, s, s), || rng.random::<f32>()))
    }

    #[test]
    fn three_channel_replication() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gray = random_image(&mut rng, 1, 5);
        let out = to_three_channel(&gray);
        for c in 0..3 {
            assert_eq!(out.data().index_axis(ndarray::Axis(0), c), gray.data().index_axis(ndarray::Axis(0), 0));
        }
        let rgb = random_image(&mut rng, 3, 5);
        assert_eq!(to_three_channel(&rgb), rgb);
        let half = to_three_channel(&Image::filled(1, 4, 4, 0.5));
        assert!(half.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn token_count_follows_grid_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let tok = Tokenizer::new(&mut store, &mut rng, PatchEmbedConfig::default()).unwrap();
        let z = random_image(&mut rng, 3, 32);
        let x = random_image(&mut rng, 1, 64);
        let t = tok.embed(&store, &z, &x, Modality::Depth).unwrap();
        assert_eq!((t.n_template, t.n_search, t.len(), t.channels()), (16, 64, 80, 64));
    }

    #[test]
    fn size_mismatch_names_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let tok = Tokenizer::new(&mut store, &mut rng, PatchEmbedConfig::default()).unwrap();
        let err = tok
            .embed(&store, &Image::zeros(3, 32, 32), &Image::zeros(3, 64, 60), Modality::Rgb)
            .unwrap_err();
        match err {
            Error::Shape { dimension, .. } => assert_eq!(dimension, "search width"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_must_divide() {
        let cfg = PatchEmbedConfig {
            template_size: 30,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
