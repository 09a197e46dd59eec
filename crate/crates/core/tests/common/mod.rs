#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trimodal::data_model::BoundingBox;
use trimodal::params::{Graph, ParamId};
use trimodal::tokenizer::PatchEmbedConfig;
use trimodal::tracker::{loss_on, LossTarget, LossWeights, ModelConfig, PatchInputs, TrackerModel};

/// L = 2, C = 16, 16×16 template, 32×32 search.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        patch: PatchEmbedConfig {
            patch_size: 8,
            embed_dim: 16,
            template_size: 16,
            search_size: 32,
        },
        layers: 2,
        heads: 2,
        ..ModelConfig::default()
    }
}

pub fn random_patches(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> PatchInputs {
    let pd = cfg.patch.patch_dim();
    let mut pair = || {
        (
            Array2::from_shape_simple_fn((pd, cfg.patch.n_template()), || rng.random::<f64>()),
            Array2::from_shape_simple_fn((pd, cfg.patch.n_search()), || rng.random::<f64>()),
        )
    };
    PatchInputs {
        rgb: pair(),
        depth: Some(pair()),
        tir: Some(pair()),
    }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A target box inside the tiny search crop.
pub fn tiny_target(cfg: &ModelConfig) -> LossTarget {
    let side = cfg.patch.search_size as f64;
    let gt = BoundingBox::new(0.3 * side, 0.35 * side, 0.25 * side, 0.2 * side).unwrap();
    LossTarget::new(&gt, side, cfg.patch.search_grid()).unwrap()
}

pub fn total_loss(model: &TrackerModel, inputs: &PatchInputs, target: &LossTarget) -> f64 {
    let mut g = Graph::inference(&model.store);
    let head = model.forward_on(&mut g, inputs).unwrap();
    let l = loss_on(&mut g.tape, head, target, &LossWeights::default());
    g.tape.scalar(l.total)
}

pub fn analytic_grads(model: &TrackerModel, inputs: &PatchInputs, target: &LossTarget) -> Vec<(ParamId, Array2<f64>)> {
    let mut g = Graph::new(&model.store);
    let head = model.forward_on(&mut g, inputs).unwrap();
    let l = loss_on(&mut g.tape, head, target, &LossWeights::default());
    let grads = g.tape.backward(l.total);
    g.param_grads(&grads)
}

/// Largest relative error per parameter group between the analytic
/// gradient and a central difference with step 1e-6, checking every entry
/// or `per_group` random entries of each group. The relative error is
/// `|a - n| / max(|a|, |n|, 1e-4)`.
pub fn group_errors(model: &mut TrackerModel, per_group: Option<usize>, seed: u64) -> BTreeMap<String, f64> {
    let mut rng = seeded(seed);
    let inputs = random_patches(&mut rng, &model.config);
    let target = tiny_target(&model.config);
    let analytic = analytic_grads(model, &inputs, &target);
    let mut by_group: BTreeMap<String, Vec<(ParamId, usize, f64)>> = BTreeMap::new();
    for (id, g) in &analytic {
        let group = model.store.get(*id).group.clone();
        for (k, &v) in g.iter().enumerate() {
            by_group.entry(group.clone()).or_default().push((*id, k, v));
        }
    }
    let h = 1e-6;
    let mut out = BTreeMap::new();
    for (group, entries) in by_group {
        let picks: Vec<_> = match per_group {
            Some(n) if n < entries.len() => (0..n).map(|_| entries[rng.random_range(0..entries.len())]).collect(),
            _ => entries,
        };
        let mut worst: f64 = 0.0;
        for (id, k, a) in picks {
            let orig = model.store.value(id).as_slice().unwrap()[k];
            model.store.value_mut(id).as_slice_mut().unwrap()[k] = orig + h;
            let lp = total_loss(model, &inputs, &target);
            model.store.value_mut(id).as_slice_mut().unwrap()[k] = orig - h;
            let lm = total_loss(model, &inputs, &target);
            model.store.value_mut(id).as_slice_mut().unwrap()[k] = orig;
            let n = (lp - lm) / (2.0 * h);
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
            worst = worst.max(err);
        }
        out.insert(group, worst);
    }
    out
}
