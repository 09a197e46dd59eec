//! Depth/thermal fusion with mutual orthogonal projection.
//!
//! Depth and thermal tokens are split into template and search regions and
//! viewed as `C × h × h` maps. Each modality passes through its own 1×1
//! convolution, then each map has the component parallel to the other map
//! removed, per spatial location:
//!
//! ```text
//! F_D   <- F_D   - alpha * <F_D, F_TIR> / (|F_TIR| + eps) * F_TIR
//! F_TIR <- F_TIR - beta  * <F_TIR, F_D> / (|F_D|   + eps) * F_D
//! ```
//!
//! Both updates read the original inputs. [`ProjectionMode::Strict`] divides
//! by the squared norm instead, which makes the update an exact projection.
//! The two maps are then concatenated along channels, reduced back to `C`
//! channels by a 1×1 convolution and flattened to tokens again.
//!
//! Every step above acts on each spatial location independently, so on the
//! graph the whole pipeline runs directly on the token matrix; the region
//! split only matters for the shape contract checked by [`tokens_to_maps`].

use ndarray::{s, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{normal_matrix, Conv1x1, Graph, ParamId, ParamStore};
use crate::tokenizer::{Modality, TokenSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    /// Divide by `|F| + eps`.
    #[default]
    Normalized,
    /// Divide by `|F|^2 + eps` (exact projection).
    Strict,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Template,
    Search,
}

/// Channel-major spatial grid `C × h × h`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub region: Region,
    pub modality: Modality,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn side(&self) -> usize {
        self.data.dim().1
    }

    /// Flattens the grid row-major into `C × h²` tokens.
    pub fn to_tokens(&self) -> Array2<f64> {
        let (c, h, w) = self.data.dim();
        self.data
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h * w))
            .expect("contiguous")
    }

    fn from_tokens(tokens: Array2<f64>, side: usize, region: Region, modality: Modality) -> Self {
        let c = tokens.nrows();
        let data = tokens
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, side, side))
            .expect("token count is side squared");
        Self { data, region, modality }
    }
}

fn square_side(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Splits a token set into its template and search maps.
pub fn tokens_to_maps(tokens: &TokenSet) -> Result<(FeatureMap, FeatureMap)> {
    if tokens.n_template + tokens.n_search != tokens.len() {
        return Err(Error::shape("token count", tokens.n_template + tokens.n_search, tokens.len()));
    }
    let hz = square_side(tokens.n_template)
        .ok_or_else(|| Error::shape("template token count", "a perfect square", tokens.n_template))?;
    let hx = square_side(tokens.n_search)
        .ok_or_else(|| Error::shape("search token count", "a perfect square", tokens.n_search))?;
    let z = tokens.tokens.slice(s![.., ..tokens.n_template]).to_owned();
    let x = tokens.tokens.slice(s![.., tokens.n_template..]).to_owned();
    Ok((
        FeatureMap::from_tokens(z, hz, Region::Template, tokens.modality),
        FeatureMap::from_tokens(x, hx, Region::Search, tokens.modality),
    ))
}

/// Inverse of [`tokens_to_maps`].
pub fn maps_to_tokens(template: &FeatureMap, search: &FeatureMap) -> Result<TokenSet> {
    if template.channels() != search.channels() {
        return Err(Error::shape("channels", template.channels(), search.channels()));
    }
    let z = template.to_tokens();
    let x = search.to_tokens();
    let (nz, nx) = (z.ncols(), x.ncols());
    let tokens = ndarray::concatenate(ndarray::Axis(1), &[z.view(), x.view()]).expect("same rows");
    TokenSet::new(tokens, template.modality, nz, nx)
}

/// Scalars of the projection step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionSettings {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub mode: ProjectionMode,
}

impl Default for ProjectionSettings {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            epsilon: DEFAULT_EPSILON,
            mode: ProjectionMode::Normalized,
        }
    }
}

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Records the simultaneous mutual projection of two `C × n` matrices.
pub fn project_on(
    tape: &mut Tape,
    d: Var,
    t: Var,
    alpha: Var,
    beta: Var,
    epsilon: f64,
    mode: ProjectionMode,
) -> (Var, Var) {
    let dt = tape.mul(d, t);
    let dot = tape.sum_rows(dt);
    let denominator = |tape: &mut Tape, x: Var| {
        let sq = tape.square(x);
        let norm2 = tape.sum_rows(sq);
        let base = match mode {
            ProjectionMode::Normalized => tape.sqrt(norm2),
            ProjectionMode::Strict => norm2,
        };
        tape.add_scalar(base, epsilon)
    };
    let den_t = denominator(tape, t);
    let den_d = denominator(tape, d);

    let coef_d = tape.div(dot, den_t);
    let along_t = tape.mul_row(t, coef_d);
    let along_t = tape.scale_by(along_t, alpha);
    let out_d = tape.sub(d, along_t);

    let coef_t = tape.div(dot, den_d);
    let along_d = tape.mul_row(d, coef_t);
    let along_d = tape.scale_by(along_d, beta);
    let out_t = tape.sub(t, along_d);
    (out_d, out_t)
}

/// Mutual orthogonal projection of a depth and a thermal map.
pub fn orthogonal_project(
    f_d: &FeatureMap,
    f_tir: &FeatureMap,
    settings: &ProjectionSettings,
) -> Result<(FeatureMap, FeatureMap)> {
    if f_d.data.dim() != f_tir.data.dim() {
        return Err(Error::shape(
            "feature map",
            format!("{:?}", f_d.data.dim()),
            format!("{:?}", f_tir.data.dim()),
        ));
    }
    if f_d.region != f_tir.region {
        return Err(Error::shape("region", format!("{:?}", f_d.region), format!("{:?}", f_tir.region)));
    }
    let mut tape = Tape::new();
    let d = tape.constant(f_d.to_tokens());
    let t = tape.constant(f_tir.to_tokens());
    let a = tape.scalar_constant(settings.alpha);
    let b = tape.scalar_constant(settings.beta);
    let (od, ot) = project_on(&mut tape, d, t, a, b, settings.epsilon, settings.mode);
    let side = f_d.side();
    Ok((
        FeatureMap::from_tokens(tape.value(od).clone(), side, f_d.region, f_d.modality),
        FeatureMap::from_tokens(tape.value(ot).clone(), side, f_tir.region, f_tir.modality),
    ))
}

/// Trainable parameters of the fusion module.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub conv_d: Conv1x1,
    pub conv_tir: Conv1x1,
    /// `2C -> C`, applied to `[depth ; thermal]` stacked along channels.
    pub conv_fuse: Conv1x1,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub epsilon: f64,
    pub mode: ProjectionMode,
    /// When false the projection step is skipped entirely.
    pub projection: bool,
}

fn identity_plus_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let mut m = normal_matrix(rng, rows, cols, std);
    for i in 0..rows {
        m[[i, i % cols]] += 1.0;
    }
    m
}

impl FusionParams {
    /// Registers `fusion.*` parameters for `channels`-wide tokens.
    ///
    /// The per-modality convolutions start near identity and the fusing
    /// convolution near an average of the two halves. `alpha` and `beta`
    /// start at 1.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        channels: usize,
        mode: ProjectionMode,
        projection: bool,
    ) -> Self {
        let c = channels;
        let std = 0.02;
        let conv_d = Conv1x1::new(store, rng, "fusion.conv_d", "fusion", c, c, std, true);
        let conv_tir = Conv1x1::new(store, rng, "fusion.conv_tir", "fusion", c, c, std, true);
        let conv_fuse = Conv1x1::new(store, rng, "fusion.conv_fuse", "fusion", 2 * c, c, std, true);
        *store.value_mut(conv_d.weight) = identity_plus_noise(rng, c, c, std);
        *store.value_mut(conv_tir.weight) = identity_plus_noise(rng, c, c, std);
        let mut fuse_w = normal_matrix(rng, c, 2 * c, std);
        for i in 0..c {
            fuse_w[[i, i]] += 0.5;
            fuse_w[[i, c + i]] += 0.5;
        }
        *store.value_mut(conv_fuse.weight) = fuse_w;
        let alpha = store.add("fusion.alpha", "fusion", Array2::ones((1, 1)), projection);
        let beta = store.add("fusion.beta", "fusion", Array2::ones((1, 1)), projection);
        Self {
            conv_d,
            conv_tir,
            conv_fuse,
            alpha,
            beta,
            epsilon: DEFAULT_EPSILON,
            mode,
            projection,
        }
    }

    pub fn settings(&self, store: &ParamStore) -> ProjectionSettings {
        ProjectionSettings {
            alpha: store.scalar(self.alpha),
            beta: store.scalar(self.beta),
            epsilon: self.epsilon,
            mode: self.mode,
        }
    }

    /// Every parameter id owned by the module.
    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.conv_d.weight,
            self.conv_d.bias,
            self.conv_tir.weight,
            self.conv_tir.bias,
            self.conv_fuse.weight,
            self.conv_fuse.bias,
            self.alpha,
            self.beta,
        ]
    }

    /// Records the fusion of two `C × n` token matrices, returning `T_{D-TIR}`.
    pub fn fuse_on(&self, g: &mut Graph<'_>, d: Var, t: Var) -> Var {
        let mut fd = self.conv_d.apply(g, d);
        let mut ft = self.conv_tir.apply(g, t);
        if self.projection {
            let a = g.param(self.alpha);
            let b = g.param(self.beta);
            (fd, ft) = project_on(&mut g.tape, fd, ft, a, b, self.epsilon, self.mode);
        }
        let stacked = g.tape.concat_rows(&[fd, ft]);
        self.conv_fuse.apply(g, stacked)
    }
}

/// Fuses depth and thermal tokens into the `D-TIR` token set.
pub fn fuse(store: &ParamStore, params: &FusionParams, d_tokens: &TokenSet, tir_tokens: &TokenSet) -> Result<TokenSet> {
    if !d_tokens.same_layout(tir_tokens) {
        return Err(Error::shape(
            "depth/thermal tokens",
            format!("{:?} ({} template)", d_tokens.tokens.dim(), d_tokens.n_template),
            format!("{:?} ({} template)", tir_tokens.tokens.dim(), tir_tokens.n_template),
        ));
    }
    let c = params.conv_d.in_channels(store);
    if d_tokens.channels() != c {
        return Err(Error::shape("token channels", c, d_tokens.channels()));
    }
    tokens_to_maps(d_tokens)?;
    let mut g = Graph::inference(store);
    let d = g.tape.constant(d_tokens.tokens.clone());
    let t = g.tape.constant(tir_tokens.tokens.clone());
    let out = params.fuse_on(&mut g, d, t);
    TokenSet::new(g.tape.value(out).clone(), Modality::Fused, d_tokens.n_template, d_tokens.n_search)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(data: Array3<f64>, modality: Modality) -> FeatureMap {
        FeatureMap {
            data,
            region: Region::Search,
            modality,
        }
    }

    fn pixel_pair(d: [f64; 2], t: [f64; 2]) -> (FeatureMap, FeatureMap) {
        (
            map(Array3::from_shape_vec((2, 1, 1), d.to_vec()).unwrap(), Modality::Depth),
            map(Array3::from_shape_vec((2, 1, 1), t.to_vec()).unwrap(), Modality::Tir),
        )
    }

    #[test]
    fn zero_coefficients_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = map(Array3::from_shape_simple_fn((4, 3, 3), || rng.random::<f64>()), Modality::Depth);
        let t = map(Array3::from_shape_simple_fn((4, 3, 3), || rng.random::<f64>()), Modality::Tir);
        let s = ProjectionSettings {
            alpha: 0.0,
            beta: 0.0,
            ..Default::default()
        };
        let (od, ot) = orthogonal_project(&d, &t, &s).unwrap();
        assert_eq!(od, d);
        assert_eq!(ot, t);
    }

    #[test]
    fn strict_hand_projection() {
        let (d, t) = pixel_pair([1.0, 1.0], [1.0, 0.0]);
        let s = ProjectionSettings {
            mode: ProjectionMode::Strict,
            ..Default::default()
        };
        let (od, _) = orthogonal_project(&d, &t, &s).unwrap();
        // <(1,1),(1,0)> / (|(1,0)|^2 + eps) = 1 / (1 + 1e-6)
        assert!((od.data[[0, 0, 0]] - 1e-6 / (1.0 + 1e-6)).abs() < 1e-15);
        assert_eq!(od.data[[1, 0, 0]], 1.0);
    }

    #[test]
    fn strict_self_projection_vanishes() {
        let (d, t) = pixel_pair([0.6, -0.8], [0.6, -0.8]);
        let s = ProjectionSettings {
            mode: ProjectionMode::Strict,
            ..Default::default()
        };
        let (od, ot) = orthogonal_project(&d, &t, &s).unwrap();
        assert!(od.data.iter().all(|v| v.abs() < 1e-6));
        assert!(ot.data.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn updates_read_original_inputs() {
        let (d, t) = pixel_pair([2.0, 1.0], [1.0, 3.0]);
        let s = ProjectionSettings {
            alpha: 0.7,
            beta: 0.3,
            ..Default::default()
        };
        let (od, ot) = orthogonal_project(&d, &t, &s).unwrap();
        let dot = 2.0 * 1.0 + 1.0 * 3.0;
        let nt = 10f64.sqrt() + 1e-6;
        let nd = 5f64.sqrt() + 1e-6;
        assert!((od.data[[0, 0, 0]] - (2.0 - 0.7 * dot / nt * 1.0)).abs() < 1e-12);
        assert!((ot.data[[1, 0, 0]] - (3.0 - 0.3 * dot / nd * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_maps() {
        let d = map(Array3::zeros((2, 2, 2)), Modality::Depth);
        let t = map(Array3::zeros((2, 3, 3)), Modality::Tir);
        assert!(orthogonal_project(&d, &t, &ProjectionSettings::default()).is_err());
    }

    #[test]
    fn map_round_trip_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tokens = TokenSet::new(
            Array2::from_shape_simple_fn((64, 80), || rng.random::<f64>()),
            Modality::Depth,
            16,
            64,
        )
        .unwrap();
        let (z, x) = tokens_to_maps(&tokens).unwrap();
        assert_eq!(z.data.dim(), (64, 4, 4));
        assert_eq!(x.data.dim(), (64, 8, 8));
        assert_eq!(maps_to_tokens(&z, &x).unwrap(), tokens);
    }

    #[test]
    fn non_square_search_count_rejected() {
        let tokens = TokenSet::new(Array2::zeros((8, 81)), Modality::Depth, 16, 65).unwrap();
        assert!(matches!(tokens_to_maps(&tokens), Err(Error::Shape { .. })));
    }

    #[test]
    fn fuse_zero_in_zero_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let p = FusionParams::new(&mut store, &mut rng, 8, ProjectionMode::Normalized, true);
        let z = TokenSet::zeros(8, Modality::Depth, 4, 16);
        let out = fuse(&store, &p, &z, &TokenSet { modality: Modality::Tir, ..z.clone() }).unwrap();
        assert_eq!(out.tokens.dim(), (8, 20));
        assert_eq!(out.modality, Modality::Fused);
        assert!(out.tokens.iter().all(|&v| v == 0.0));
    }
}
