//! Synthetic benchmarks, the ablation matrix and parallel evaluation.

use std::fmt::Write as _;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::data_model::{
    generate_with_scene, BoundingBox, DarkenInterval, DegradationProfile, FrameRange, SceneConfig, Sequence,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_ope, OpeReport};
use crate::tracker::{
    pretrain_backbone, prompted_from_backbone, train, ModalitySet, ModelConfig, TrackerModel, TrainConfig,
    TrainReport, TrainState,
};

/// How degradations are laid out over a synthetic set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationPlan {
    /// Clean sequences.
    #[default]
    None,
    /// Two degraded windows per sequence; which modalities fail rotates
    /// with the sequence index. See [`rotating_profile`].
    Rotating,
}

/// RGB intensity multiplier used by [`rotating_profile`].
pub const ROTATING_DARKEN: f32 = 0.1;

/// Degradations for sequence `index` of a rotating set. Two windows,
/// `[L/4, L/2)` and `[5L/8, 7L/8)`, cycle through three patterns:
///
/// | `index % 3` | first window        | second window        |
/// |-------------|---------------------|----------------------|
/// | 0           | dark RGB, flat depth | dark RGB, thermal crossover |
/// | 1           | dark RGB, thermal crossover | dark RGB, flat depth |
/// | 2           | dark RGB            | flat depth, thermal crossover |
pub fn rotating_profile(length: usize, index: usize) -> DegradationProfile {
    let a = FrameRange::new(length / 4, length / 2);
    let b = FrameRange::new(5 * length / 8, 7 * length / 8);
    let dark = |r: FrameRange| DarkenInterval {
        start: r.start,
        end: r.end,
        factor: ROTATING_DARKEN,
    };
    let mut p = DegradationProfile::none();
    match index % 3 {
        0 => {
            p.rgb_darken = vec![dark(a), dark(b)];
            p.depth_flatten = vec![a];
            p.tir_crossover = vec![b];
        }
        1 => {
            p.rgb_darken = vec![dark(a), dark(b)];
            p.tir_crossover = vec![a];
            p.depth_flatten = vec![b];
        }
        _ => {
            p.rgb_darken = vec![dark(a)];
            p.depth_flatten = vec![b];
            p.tir_crossover = vec![b];
        }
    }
    p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticBenchmark {
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub length: usize,
    /// Seed of the first training sequence; test sequences follow the
    /// training ones.
    pub seed: u64,
    pub degradations: DegradationPlan,
    pub scene: SceneConfig,
}

impl Default for SyntheticBenchmark {
    fn default() -> Self {
        Self {
            train_sequences: 20,
            test_sequences: 5,
            length: 60,
            seed: 1000,
            degradations: DegradationPlan::None,
            scene: SceneConfig::default(),
        }
    }
}

impl SyntheticBenchmark {
    fn profile(&self, index: usize) -> DegradationProfile {
        match self.degradations {
            DegradationPlan::None => DegradationProfile::none(),
            DegradationPlan::Rotating => rotating_profile(self.length, index),
        }
    }

    fn render(&self, range: std::ops::Range<usize>, clean: bool) -> Result<Vec<Sequence>> {
        range
            .map(|i| {
                let profile = if clean { DegradationProfile::none() } else { self.profile(i) };
                generate_with_scene(self.length, &profile, &self.scene, self.seed + i as u64)
            })
            .collect()
    }

    pub fn train_set(&self) -> Result<Vec<Sequence>> {
        self.render(0..self.train_sequences, false)
    }

    /// The training scenes without any degradation, for RGB pretraining.
    pub fn clean_train_set(&self) -> Result<Vec<Sequence>> {
        self.render(0..self.train_sequences, true)
    }

    pub fn test_set(&self) -> Result<Vec<Sequence>> {
        self.render(self.train_sequences..self.train_sequences + self.test_sequences, false)
    }
}

/// One row of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub modalities: ModalitySet,
    #[serde(default)]
    pub disable_orthogonal_projection: bool,
    #[serde(default)]
    pub freeze_alpha_beta: bool,
}

impl Variant {
    pub const fn new(modalities: ModalitySet) -> Self {
        Self {
            modalities,
            disable_orthogonal_projection: false,
            freeze_alpha_beta: false,
        }
    }

    /// Modality combinations followed by the two fusion ablations.
    pub fn matrix() -> Vec<Variant> {
        let mut rows: Vec<Variant> = ModalitySet::ALL.into_iter().map(Variant::new).collect();
        rows.push(Variant {
            disable_orthogonal_projection: true,
            ..Variant::new(ModalitySet::RgbDepthTir)
        });
        rows.push(Variant {
            freeze_alpha_beta: true,
            ..Variant::new(ModalitySet::RgbDepthTir)
        });
        rows
    }

    pub fn label(&self) -> String {
        let mut s = self.modalities.label().to_string();
        if self.disable_orthogonal_projection {
            s.push_str("-no-projection");
        }
        if self.freeze_alpha_beta {
            s.push_str("-fixed-alpha-beta");
        }
        s
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            modalities: self.modalities,
            projection: base.projection && !self.disable_orthogonal_projection,
            freeze_alpha_beta: base.freeze_alpha_beta || self.freeze_alpha_beta,
            ..base.clone()
        }
    }
}

/// Runs `track_sequence` on every sequence, `jobs` threads at a time.
pub fn track_all(model: &TrackerModel, sequences: &[Sequence], jobs: usize) -> Result<Vec<Vec<BoundingBox>>> {
    let jobs = jobs.max(1).min(sequences.len().max(1));
    if jobs == 1 {
        return sequences.iter().map(|s| model.track_sequence(s)).collect();
    }
    let chunk = sequences.len().div_ceil(jobs);
    thread::scope(|scope| {
        let handles: Vec<_> = sequences
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| model.track_sequence(s)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(sequences.len());
        for h in handles {
            out.extend(h.join().expect("tracking thread panicked")?);
        }
        Ok(out)
    })
}

/// Scores predictions on every annotated frame after the initialization
/// frame.
pub fn evaluate_predictions(sequences: &[Sequence], predictions: Vec<Vec<BoundingBox>>) -> Result<OpeReport> {
    let runs = sequences
        .iter()
        .zip(predictions)
        .map(|(s, p)| {
            if p.len() != s.len() {
                return Err(Error::Evaluation {
                    sequence: s.name.clone(),
                    reason: format!("{} predictions for {} frames", p.len(), s.len()),
                });
            }
            let (pred, gt): (Vec<_>, Vec<_>) = s.annotations.range(1..).map(|(&i, g)| (p[i], *g)).unzip();
            Ok((s.name.clone(), pred, gt))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_ope(&runs)
}

pub fn evaluate_model(model: &TrackerModel, sequences: &[Sequence], jobs: usize) -> Result<OpeReport> {
    let predictions = track_all(model, sequences, jobs)?;
    evaluate_predictions(sequences, predictions)
}

/// Settings for [`run_ablation`].
#[derive(Clone, Debug, PartialEq)]
pub struct AblationSpec {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub dp_20: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// `(dp_20, auc)` averaged over seeds.
    pub fn mean(&self, variant: &str) -> Option<(f64, f64)> {
        let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == variant).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.dp_20).sum::<f64>() / n,
            rows.iter().map(|r| r.auc).sum::<f64>() / n,
        ))
    }

    pub fn variants(&self) -> Vec<String> {
        let mut seen: Vec<String> = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.variant) {
                seen.push(r.variant.clone());
            }
        }
        seen
    }

    /// `variant,seed,dp20,auc` rows, then one `variant,mean,dp20,auc` row per variant.
    pub fn csv(&self) -> String {
        let mut s = String::from("variant,seed,dp20,auc\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.variant, r.seed, r.dp_20, r.auc).unwrap();
        }
        for v in self.variants() {
            let (dp, auc) = self.mean(&v).expect("variant has rows");
            writeln!(s, "{v},mean,{dp},{auc}").unwrap();
        }
        s
    }
}

/// Pretrains one RGB backbone, then fine-tunes and evaluates every variant
/// for every seed. RGB-only variants are the frozen backbone itself.
pub fn run_ablation(
    spec: &AblationSpec,
    clean_train: &[Sequence],
    train_set: &[Sequence],
    test_set: &[Sequence],
    mut log: impl FnMut(&str),
) -> Result<(AblationReport, TrackerModel)> {
    let (backbone, _) = pretrain_backbone(&spec.model, clean_train, &spec.pretrain, spec.pretrain.seed)?;
    log("backbone pretrained");
    let mut report = AblationReport::default();
    for variant in &spec.variants {
        for &seed in &spec.seeds {
            let cfg = variant.apply(&spec.model);
            let mut model = prompted_from_backbone(&cfg, &backbone, seed)?;
            if cfg.modalities.uses_prompts() {
                let tc = TrainConfig {
                    seed,
                    ..spec.finetune.clone()
                };
                train(&mut model, train_set, &tc, &mut TrainState::default())?;
            }
            let eval = evaluate_model(&model, test_set, spec.jobs)?;
            log(&format!("{} seed {seed}: dp20 {:.4} auc {:.4}", variant.label(), eval.dp_20, eval.auc));
            report.rows.push(AblationRow {
                variant: variant.label(),
                seed,
                dp_20: eval.dp_20,
                auc: eval.auc,
            });
        }
    }
    Ok((report, backbone))
}

/// Pretrains a backbone on `clean_train` and fine-tunes a prompted model on
/// `train_set`.
pub fn train_desk_model(
    model: &ModelConfig,
    pretrain: &TrainConfig,
    finetune: &TrainConfig,
    clean_train: &[Sequence],
    train_set: &[Sequence],
) -> Result<(TrackerModel, TrainReport)> {
    let (backbone, _) = pretrain_backbone(model, clean_train, pretrain, pretrain.seed)?;
    let mut prompted = prompted_from_backbone(model, &backbone, finetune.seed)?;
    if !model.modalities.uses_prompts() {
        return Ok((backbone, TrainReport::default()));
    }
    let report = train(&mut prompted, train_set, finetune, &mut TrainState::default())?;
    Ok((prompted, report))
}
