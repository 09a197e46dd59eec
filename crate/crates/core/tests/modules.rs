mod common;

use common::*;
use ndarray::{Array2, Array3};
use rand::Rng;
use trimodal::data_model::Image;
use trimodal::fusion::{fuse, orthogonal_project, FeatureMap, FusionParams, ProjectionMode, ProjectionSettings, Region};
use trimodal::params::{Graph, ParamStore};
use trimodal::prompt::{initial_prompt, prompt_block, PromptBlockParams};
use trimodal::tokenizer::{Modality, PatchEmbedConfig, TokenSet, Tokenizer};
use trimodal::tracker::{HeadVars, ModalitySet, TrackerModel};

fn random_tokens(rng: &mut impl Rng, c: usize, nz: usize, nx: usize, m: Modality) -> TokenSet {
    TokenSet::new(Array2::from_shape_simple_fn((c, nz + nx), || rng.random_range(-1.0..1.0)), m, nz, nx).unwrap()
}

fn zero_biases(store: &mut ParamStore) {
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.ends_with(".bias")).map(|(id, _)| id).collect();
    for id in ids {
        store.value_mut(id).fill(0.0);
    }
}

#[test]
fn zero_images_give_zero_tokens() {
    let mut store = ParamStore::new();
    let tok = Tokenizer::new(&mut store, &mut seeded(1), PatchEmbedConfig::default()).unwrap();
    store.value_mut(tok.pos_template).fill(0.0);
    store.value_mut(tok.pos_search).fill(0.0);
    store.value_mut(tok.rgb.bias).fill(0.0);
    // Standardization maps the pixel mean to zero.
    let z = Image::filled(3, 32, 32, 0.5);
    let x = Image::filled(3, 64, 64, 0.5);
    let t = tok.embed(&store, &z, &x, Modality::Rgb).unwrap();
    assert!(t.tokens.iter().all(|&v| v == 0.0));
}

#[test]
fn template_position_shift_is_linear() {
    let mut rng = seeded(2);
    let mut store = ParamStore::new();
    let tok = Tokenizer::new(&mut store, &mut rng, PatchEmbedConfig::default()).unwrap();
    let z = Image::from_array(Array3::from_shape_simple_fn((3, 32, 32), || rng.random::<f32>()));
    let x = Image::from_array(Array3::from_shape_simple_fn((3, 64, 64), || rng.random::<f32>()));
    let before = tok.embed(&store, &z, &x, Modality::Tir).unwrap();
    let v: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    for (c, row) in store.value_mut(tok.pos_template).rows_mut().into_iter().enumerate() {
        row.into_iter().for_each(|e| *e += v[c]);
    }
    let after = tok.embed(&store, &z, &x, Modality::Tir).unwrap();
    for c in 0..64 {
        for j in 0..80 {
            let expected = before.tokens[[c, j]] + if j < 16 { v[c] } else { 0.0 };
            assert!((after.tokens[[c, j]] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn normalized_projection_shrinks_inner_product() {
    // 32 × 32 = 1024 random unit-norm pixel vectors per modality.
    let (c, side) = (8, 32);
    let mut rng = seeded(3);
    let mut unit_map = |m| {
        let mut data = Array3::from_shape_simple_fn((c, side, side), || rng.random_range(-1.0..1.0));
        for y in 0..side {
            for x in 0..side {
                let n = (0..c).map(|k| data[[k, y, x]] * data[[k, y, x]]).sum::<f64>().sqrt();
                (0..c).for_each(|k| data[[k, y, x]] /= n);
            }
        }
        FeatureMap {
            data,
            region: Region::Search,
            modality: m,
        }
    };
    let (fd, ft) = (unit_map(Modality::Depth), unit_map(Modality::Tir));
    let (od, _) = orthogonal_project(&fd, &ft, &ProjectionSettings::default()).unwrap();
    for y in 0..side {
        for x in 0..side {
            let before: f64 = (0..c).map(|k| fd.data[[k, y, x]] * ft.data[[k, y, x]]).sum();
            let after: f64 = (0..c).map(|k| od.data[[k, y, x]] * ft.data[[k, y, x]]).sum();
            assert!(after.abs() < before.abs(), "pixel ({y}, {x}): {after} vs {before}");
        }
    }
}

#[test]
fn identity_fusion_averages_inputs() {
    let c = 6;
    let mut store = ParamStore::new();
    let f = FusionParams::new(&mut store, &mut seeded(4), c, ProjectionMode::Normalized, true);
    *store.value_mut(f.conv_d.weight) = Array2::eye(c);
    *store.value_mut(f.conv_tir.weight) = Array2::eye(c);
    let mut avg = Array2::zeros((c, 2 * c));
    for i in 0..c {
        avg[[i, i]] = 0.5;
        avg[[i, c + i]] = 0.5;
    }
    *store.value_mut(f.conv_fuse.weight) = avg;
    store.set_scalar(f.alpha, 0.0);
    store.set_scalar(f.beta, 0.0);
    let mut rng = seeded(5);
    let d = random_tokens(&mut rng, c, 4, 16, Modality::Depth);
    let t = random_tokens(&mut rng, c, 4, 16, Modality::Tir);
    let out = fuse(&store, &f, &d, &t).unwrap();
    assert_eq!(out.tokens.dim(), (c, 20));
    let expected = (&d.tokens + &t.tokens) / 2.0;
    assert!(out.tokens.iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-15));
}

#[test]
fn prompt_block_contracts() {
    let (c, nz, nx) = (16, 4, 16);
    let mut store = ParamStore::new();
    let block = PromptBlockParams::new(&mut store, &mut seeded(6), 0, c, 4, 1.0).unwrap();
    zero_biases(&mut store);
    let zero = TokenSet::zeros(c, Modality::Rgb, nz, nx);
    let p = prompt_block(&store, &block, &zero, &zero).unwrap();
    assert!(p.tokens.iter().all(|&v| v == 0.0));

    let mut rng = seeded(7);
    let h = random_tokens(&mut rng, c, nz, nx, Modality::Rgb);
    let prev = random_tokens(&mut rng, c, nz, nx, Modality::Fused);
    let a = prompt_block(&store, &block, &h, &prev).unwrap();
    assert_eq!(a.tokens.dim(), h.tokens.dim());
    assert_eq!(a, prompt_block(&store, &block, &h, &prev).unwrap());

    let p0 = initial_prompt(&store, &block, &h, &TokenSet::zeros(c, Modality::Fused, nz, nx)).unwrap();
    let baseline = prompt_block(&store, &block, &h, &zero).unwrap();
    assert_eq!(p0.tokens, baseline.tokens);
}

#[test]
fn lambda_gradient_matches_finite_difference() {
    let (c, nz, nx) = (16, 4, 16);
    let mut store = ParamStore::new();
    let block = PromptBlockParams::new(&mut store, &mut seeded(8), 1, c, 4, 1.3).unwrap();
    let mut rng = seeded(9);
    let h = random_tokens(&mut rng, c, nz, nx, Modality::Rgb);
    let p = random_tokens(&mut rng, c, nz, nx, Modality::Rgb);
    let w = Array2::from_shape_simple_fn((c, nz + nx), || rng.random_range(-1.0..1.0));
    let objective = |lambda: f64| {
        let b = PromptBlockParams { lambda, ..block.clone() };
        (&prompt_block(&store, &b, &h, &p).unwrap().tokens * &w).sum()
    };
    let mut g = Graph::inference(&store);
    let hv = g.tape.constant(h.tokens.clone());
    let pv = g.tape.constant(p.tokens.clone());
    let lv = g.tape.variable(Array2::from_elem((1, 1), block.lambda));
    let out = block.apply_with_lambda(&mut g, hv, pv, lv, nz);
    let wv = g.tape.constant(w.clone());
    let prod = g.tape.mul(out, wv);
    let total = g.tape.sum_all(prod);
    let analytic = g.tape.backward(total).get(lv).unwrap()[[0, 0]];
    let step = 1e-6;
    let numeric = (objective(block.lambda + step) - objective(block.lambda - step)) / (2.0 * step);
    assert!((analytic - numeric).abs() / analytic.abs().max(1e-8) < 1e-4, "{analytic} vs {numeric}");
}

fn head_values(g: &Graph<'_>, v: &HeadVars) -> Vec<f64> {
    [v.score, v.offset, v.size].iter().flat_map(|&x| g.tape.value(x).iter().copied().collect::<Vec<_>>()).collect()
}

#[test]
fn model_output_shape_and_determinism() {
    let cfg = tiny_config();
    let model = TrackerModel::new(cfg.clone(), 10).unwrap();
    let inputs = random_patches(&mut seeded(11), &cfg);
    let a = model.predict(&inputs).unwrap();
    let grid = cfg.patch.search_grid();
    assert_eq!(a.score.dim(), (grid, grid));
    assert_eq!(a, model.predict(&inputs).unwrap());
}

#[test]
fn zero_auxiliary_fusion_matches_zero_prompt_baseline() {
    let cfg = tiny_config();
    let mut model = TrackerModel::new(cfg.clone(), 12).unwrap();
    let fusion = model.fusion.clone().unwrap();
    for id in [fusion.conv_d.bias, fusion.conv_tir.bias, fusion.conv_fuse.bias] {
        model.store.value_mut(id).fill(0.0);
    }
    model.store.set_scalar(fusion.alpha, 0.0);
    model.store.set_scalar(fusion.beta, 0.0);
    let inputs = random_patches(&mut seeded(13), &cfg);
    let n = cfg.patch.n_tokens();
    let c = cfg.patch.embed_dim;

    let mut g = Graph::inference(&model.store);
    let (t_rgb, _) = model.embed_inputs(&mut g, &inputs).unwrap();
    let zd = g.tape.constant(Array2::zeros((c, n)));
    let zt = g.tape.constant(Array2::zeros((c, n)));
    let fused = fusion.fuse_on(&mut g, zd, zt);
    let tri = model.forward_tokens(&mut g, t_rgb, Some(fused));
    let tri = head_values(&g, &tri);

    let baseline_model = TrackerModel {
        config: trimodal::tracker::ModelConfig {
            modalities: ModalitySet::RgbDepth,
            ..cfg.clone()
        },
        fusion: None,
        ..model.clone()
    };
    let mut g = Graph::inference(&baseline_model.store);
    let (t_rgb, _) = baseline_model.embed_inputs(&mut g, &inputs).unwrap();
    let zero = g.tape.constant(Array2::zeros((c, n)));
    let base = baseline_model.forward_tokens(&mut g, t_rgb, Some(zero));
    let base = head_values(&g, &base);
    assert_eq!(tri.len(), base.len());
    assert!(tri.iter().zip(&base).all(|(a, b)| a == b));
}
