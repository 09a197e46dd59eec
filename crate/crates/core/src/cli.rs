//! Command line front end of the `trimodal` binary.
//!
//! Errors go to standard error as `ERROR:<code>: <message>`; the exit code is
//! zero iff the command succeeded. The output directory comes from `--out`,
//! then the `TRIMODAL_OUT` environment variable, then the config file's `out`
//! key, then `trimodal-out`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{load_experiment, load_synth, ExperimentConfig, SynthConfig};
use crate::data_model::{
    format_groundtruth, generate_with_scene, list_sequences, load_image, load_sequence, save_image, save_sequence,
    BoundingBox, Sequence,
};
use crate::dataset_tools::{apply_alignment, estimate_alignment_with, select_representative_frames, MotionModel, Point};
use crate::error::{Error, Result};
use crate::experiment::{evaluate_predictions, rotating_profile, track_all, Variant};
use crate::metrics::{parse_curve_csv, Curve, OpeReport};
use crate::tracker::{
    load_checkpoint, pretrain_backbone, prompted_from_backbone, save_checkpoint, train::train_with_progress,
    TrackerModel, TrainReport, TrainState,
};

pub const OUT_ENV: &str = "TRIMODAL_OUT";
pub const DEFAULT_OUT: &str = "trimodal-out";

#[derive(Debug, Parser)]
#[command(name = "trimodal", version, about = "Tri-modal RGB + depth + thermal tracking experiments")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic sequences in the dataset layout.
    Synth,
    /// Pretrain the RGB backbone and fine-tune fusion and prompts.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train every `[matrix]` variant for every matrix seed.
        #[arg(long, conflicts_with = "resume")]
        matrix: bool,
    },
    /// One-pass evaluation of checkpoints on a dataset.
    Eval {
        /// Checkpoint to evaluate; repeat for several models.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Dataset root; every sequence under it is evaluated.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also score a predictor that returns the ground truth.
        #[arg(long)]
        oracle: bool,
    },
    /// Estimate a cross-modal alignment from point correspondences.
    Align {
        /// Lines of `x y x' y'` mapping source to destination pixels.
        #[arg(long)]
        points: PathBuf,
        /// Directory of PNGs to warp with the estimated map.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Fit an affine map instead of a homography.
        #[arg(long)]
        affine: bool,
    },
    /// Pick representative frames of a sequence by k-means clustering.
    SelectFrames {
        /// Sequence directory.
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Merge curves of several evaluation runs into plot-ready CSVs.
    PlotData {
        /// Evaluation output directory; repeat for every run.
        #[arg(long = "eval", required = true)]
        evals: Vec<PathBuf>,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("ERROR:usage: {first}");
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ERROR:{}: {e}", e.code());
            1
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth => cmd_synth(cli),
        Command::Train { resume, matrix } => cmd_train(cli, resume.as_deref(), *matrix),
        Command::Eval {
            checkpoint,
            data,
            oracle,
        } => cmd_eval(cli, checkpoint, data.as_deref(), *oracle),
        Command::Align {
            points,
            images,
            affine,
        } => cmd_align(cli, points, images.as_deref(), *affine),
        Command::SelectFrames { sequence, k } => cmd_select_frames(cli, sequence, *k),
        Command::PlotData { evals } => cmd_plot_data(cli, evals),
    }
}

fn output_dir(cli: &Cli, configured: Option<&Path>) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    if let Some(env) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(env);
    }
    configured.map_or_else(|| PathBuf::from(DEFAULT_OUT), Path::to_path_buf)
}

/// Creates `dir`, refusing a non-empty one unless `--force` is given.
fn prepare_output(cli: &Cli, configured: Option<&Path>) -> Result<PathBuf> {
    let dir = output_dir(cli, configured);
    if dir.is_dir() && !cli.force && fs::read_dir(&dir)?.next().is_some() {
        return Err(Error::Argument(format!(
            "output directory {} is not empty (pass --force to write into it)",
            dir.display()
        )));
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn experiment_config(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(path) => load_experiment(path)?,
        None => ExperimentConfig::default(),
    };
    Ok(match cli.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn cmd_synth(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => load_synth(path)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = prepare_output(cli, None)?;
    for i in 0..cfg.count {
        let profile = if cfg.rotating {
            rotating_profile(cfg.length, i)
        } else {
            cfg.profile.clone()
        };
        let seq = generate_with_scene(cfg.length, &profile, &cfg.scene, cfg.seed + i as u64)?;
        let dir = save_sequence(&seq, &out)?;
        println!("{}", dir.display());
    }
    Ok(())
}

fn load_named(root: &Path, names: &[String]) -> Result<Vec<Sequence>> {
    let names = if names.is_empty() {
        list_sequences(root)?
    } else {
        names.to_vec()
    };
    if names.is_empty() {
        return Err(Error::Load {
            path: root.to_path_buf(),
            reason: "no sequences found".into(),
        });
    }
    names.iter().map(|n| load_sequence(root, n)).collect()
}

/// Training sequences and their clean counterparts for backbone pretraining.
fn training_data(cfg: &ExperimentConfig) -> Result<(Vec<Sequence>, Vec<Sequence>)> {
    if let Some(bench) = &cfg.data.synthetic {
        return Ok((bench.train_set()?, bench.clean_train_set()?));
    }
    if let Some(root) = &cfg.data.root {
        let seqs = load_named(root, &cfg.data.train)?;
        return Ok((seqs.clone(), seqs));
    }
    Err(Error::Config("no training data: set data.root or data.synthetic".into()))
}

fn epochs_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,lr,loss,cls,giou,l1\n");
    for e in &report.epochs {
        writeln!(s, "{},{},{},{},{},{}", e.epoch, e.lr, e.loss, e.cls, e.giou, e.l1).unwrap();
    }
    s
}

fn steps_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,step,lr,loss\n");
    for r in &report.steps {
        writeln!(s, "{},{},{},{}", r.epoch, r.step, r.lr, r.loss).unwrap();
    }
    s
}

fn write_logs(dir: &Path, report: &TrainReport) -> Result<()> {
    fs::write(dir.join("loss.csv"), epochs_csv(report))?;
    fs::write(dir.join("steps.csv"), steps_csv(report))?;
    Ok(())
}

fn log_epoch(tag: &str) -> impl FnMut(&crate::tracker::train::EpochRecord) + '_ {
    move |e| eprintln!("{tag} epoch {} lr {:e} loss {:.4}", e.epoch, e.lr, e.loss)
}

/// Loads the configured backbone or pretrains one into `out/backbone.json`.
fn backbone(cfg: &ExperimentConfig, clean: &[Sequence], out: &Path) -> Result<TrackerModel> {
    if let Some(path) = &cfg.backbone {
        return Ok(load_checkpoint(path)?.0);
    }
    let (model, report) = pretrain_backbone(&cfg.effective_model(), clean, &cfg.pretrain_config(), cfg.seed)?;
    save_checkpoint(&out.join("backbone.json"), &model, None)?;
    fs::write(out.join("backbone_loss.csv"), epochs_csv(&report))?;
    Ok(model)
}

/// Fine-tunes `model` and writes its checkpoint and logs into `dir`.
fn finetune_into(
    dir: &Path,
    mut model: TrackerModel,
    mut state: TrainState,
    seqs: &[Sequence],
    cfg: &crate::tracker::TrainConfig,
    tag: &str,
) -> Result<()> {
    let report = if model.config.modalities.uses_prompts() {
        train_with_progress(&mut model, seqs, cfg, &mut state, log_epoch(tag))?
    } else {
        TrainReport::default()
    };
    fs::create_dir_all(dir)?;
    save_checkpoint(&dir.join("checkpoint.json"), &model, Some(&state))?;
    write_logs(dir, &report)
}

fn cmd_train(cli: &Cli, resume: Option<&Path>, matrix: bool) -> Result<()> {
    let cfg = experiment_config(cli)?;
    let out = prepare_output(cli, cfg.out.as_deref())?;
    let (seqs, clean) = training_data(&cfg)?;
    let resolved = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(out.join("config.toml"), resolved)?;

    if let Some(path) = resume {
        let (model, state) = load_checkpoint(path)?;
        let state = state.unwrap_or_default();
        eprintln!("resuming after epoch {}", state.epochs_completed);
        return finetune_into(&out, model, state, &seqs, &cfg.finetune_config(), "train");
    }

    let backbone = backbone(&cfg, &clean, &out)?;
    if !matrix {
        let model = prompted_from_backbone(&cfg.effective_model(), &backbone, cfg.seed)?;
        return finetune_into(&out, model, TrainState::default(), &seqs, &cfg.finetune_config(), "train");
    }
    for variant in &cfg.matrix.variants {
        for seed in cfg.matrix_seeds() {
            let tag = format!("{}-seed{seed}", variant.label());
            let model = prompted_from_backbone(&variant.apply(&cfg.model), &backbone, seed)?;
            let tc = crate::tracker::TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let dir = out.join(&tag);
            finetune_into(&dir, model, TrainState::default(), &seqs, &tc, &tag)?;
            println!("{}", dir.join("checkpoint.json").display());
        }
    }
    Ok(())
}

fn evaluation_data(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Vec<Sequence>> {
    if let Some(root) = data {
        return load_named(root, &[]);
    }
    if let Some(bench) = &cfg.data.synthetic {
        return bench.test_set();
    }
    if let Some(root) = &cfg.data.root {
        return load_named(root, &cfg.data.test);
    }
    Err(Error::Config("no evaluation data: pass --data or set data.root or data.synthetic".into()))
}

/// Ground truth where annotated, otherwise the last annotated box.
fn oracle_predictions(seq: &Sequence) -> Vec<BoundingBox> {
    let mut last = seq.annotations[&0];
    (0..seq.len())
        .map(|i| {
            if let Some(b) = seq.annotations.get(&i) {
                last = *b;
            }
            last
        })
        .collect()
}

fn write_run(dir: &Path, seqs: &[Sequence], predictions: &[Vec<BoundingBox>], report: &OpeReport) -> Result<()> {
    report.write(dir)?;
    let pred_dir = dir.join("predictions");
    fs::create_dir_all(&pred_dir)?;
    for (s, p) in seqs.iter().zip(predictions) {
        let dense = p.iter().copied().enumerate().collect();
        fs::write(pred_dir.join(format!("{}.txt", s.name)), format_groundtruth(&dense, p.len()))?;
    }
    Ok(())
}

fn run_name(path: &Path, index: usize) -> String {
    let parent = path
        .parent()
        .and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .filter(|n| !n.is_empty());
    match parent {
        Some(n) => format!("{index:02}-{n}"),
        None => format!("{index:02}"),
    }
}

fn cmd_eval(cli: &Cli, checkpoints: &[PathBuf], data: Option<&Path>, oracle: bool) -> Result<()> {
    if checkpoints.is_empty() && !oracle {
        return Err(Error::Argument("nothing to evaluate: pass --checkpoint or --oracle".into()));
    }
    let cfg = experiment_config(cli)?;
    let seqs = evaluation_data(&cfg, data)?;
    let out = prepare_output(cli, cfg.out.as_deref())?;
    let single = checkpoints.len() + usize::from(oracle) == 1;
    let mut table = String::from("run,variant,dp20,auc\n");
    let mut runs: Vec<(String, String, Vec<Vec<BoundingBox>>)> = Vec::new();
    if oracle {
        runs.push(("oracle".into(), "oracle".into(), seqs.iter().map(oracle_predictions).collect()));
    }
    for (i, path) in checkpoints.iter().enumerate() {
        let (model, _) = load_checkpoint(path)?;
        let variant = Variant {
            modalities: model.config.modalities,
            disable_orthogonal_projection: !model.config.projection,
            freeze_alpha_beta: model.config.freeze_alpha_beta,
        };
        let predictions = track_all(&model, &seqs, cli.jobs)?;
        runs.push((run_name(path, i), variant.label(), predictions));
    }
    for (name, variant, predictions) in runs {
        let report = evaluate_predictions(&seqs, predictions.clone())?;
        let dir = if single { out.clone() } else { out.join(&name) };
        write_run(&dir, &seqs, &predictions, &report)?;
        writeln!(table, "{name},{variant},{},{}", report.dp_20, report.auc).unwrap();
        println!("{name} {variant}: DP@20 {:.4} AUC {:.4}", report.dp_20, report.auc);
    }
    fs::write(out.join("ablation.csv"), table)?;
    Ok(())
}

/// Parses `x y x' y'` lines; blank lines and `#` comments are skipped.
pub fn parse_points(text: &str) -> Result<Vec<(Point, Point)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                reason: format!("{e}"),
            })?;
        if values.len() != 4 {
            return Err(Error::Parse {
                line: i + 1,
                reason: format!("expected 4 numbers, found {}", values.len()),
            });
        }
        out.push(((values[0], values[1]), (values[2], values[3])));
    }
    Ok(out)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Load {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_align(cli: &Cli, points: &Path, images: Option<&Path>, affine: bool) -> Result<()> {
    let text = fs::read_to_string(points).map_err(|e| Error::Load {
        path: points.to_path_buf(),
        reason: e.to_string(),
    })?;
    let model = if affine {
        MotionModel::Affine
    } else {
        MotionModel::Homography
    };
    let map = estimate_alignment_with(&parse_points(&text)?, model)?;
    let out = prepare_output(cli, None)?;
    fs::write(out.join("alignment.txt"), format!("{map}\n"))?;
    println!("rms reprojection error {:.6} px", map.rms_error);
    if let Some(dir) = images {
        let warped = out.join("warped");
        fs::create_dir_all(&warped)?;
        for file in png_files(dir)? {
            let img = load_image(&file)?;
            let (h, w) = img.size();
            let name = file.file_name().expect("listed files have names");
            save_image(&apply_alignment(&map, &img, h, w)?, &warped.join(name))?;
        }
    }
    Ok(())
}

fn cmd_select_frames(cli: &Cli, sequence: &Path, k: usize) -> Result<()> {
    let bad = || Error::Argument(format!("{} is not a sequence directory", sequence.display()));
    let name = sequence.file_name().ok_or_else(bad)?.to_string_lossy().into_owned();
    let root = sequence.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let seq = load_sequence(&root, &name)?;
    let seed = match (cli.seed, &cli.config) {
        (Some(s), _) => s,
        (None, Some(path)) => load_experiment(path)?.seed,
        (None, None) => 0,
    };
    let selection = select_representative_frames(&seq, k, seed)?;
    if selection.collapsed > 0 {
        eprintln!("{} cluster(s) came out empty; selected {} frames", selection.collapsed, selection.indices.len());
    }
    let out = prepare_output(cli, None)?;
    let mut text = String::new();
    for i in &selection.indices {
        writeln!(text, "{i}").unwrap();
    }
    fs::write(out.join("selected_frames.txt"), text)?;
    Ok(())
}

fn read_curve(path: &Path) -> Result<Curve> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_curve_csv(&text)
}

fn merged_curves(labels: &[String], curves: &[Curve]) -> Result<String> {
    let mut s = format!("threshold,{}\n", labels.join(","));
    for (row, (t, _)) in curves[0].iter().enumerate() {
        let mut line = t.to_string();
        for (label, c) in labels.iter().zip(curves) {
            match c.get(row) {
                Some((ct, v)) if ct == t => write!(line, ",{v}").unwrap(),
                _ => {
                    return Err(Error::Parse {
                        line: row + 2,
                        reason: format!("curve thresholds of run {label} differ"),
                    })
                }
            }
        }
        s.push_str(&line);
        s.push('\n');
    }
    Ok(s)
}

fn aggregate_row(path: &Path) -> Result<(f64, f64)> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (i, line) = text
        .lines()
        .enumerate()
        .find(|(_, l)| l.starts_with("AGGREGATE,"))
        .ok_or_else(|| Error::Parse {
            line: 0,
            reason: format!("{} has no AGGREGATE row", path.display()),
        })?;
    let parse = |v: Option<&str>| {
        v.and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| Error::Parse {
            line: i + 1,
            reason: format!("malformed AGGREGATE row {line:?}"),
        })
    };
    let mut fields = line.split(',').skip(1);
    Ok((parse(fields.next())?, parse(fields.next())?))
}

fn cmd_plot_data(cli: &Cli, evals: &[PathBuf]) -> Result<()> {
    let labels: Vec<String> = evals
        .iter()
        .enumerate()
        .map(|(i, d)| {
            d.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("run{i}"))
        })
        .collect();
    let precision = evals.iter().map(|d| read_curve(&d.join("precision.csv"))).collect::<Result<Vec<_>>>()?;
    let success = evals.iter().map(|d| read_curve(&d.join("success.csv"))).collect::<Result<Vec<_>>>()?;
    let mut summary = String::from("run,dp20,auc\n");
    for (label, d) in labels.iter().zip(evals) {
        let (dp, auc) = aggregate_row(&d.join("summary.csv"))?;
        writeln!(summary, "{label},{dp},{auc}").unwrap();
    }
    let out = prepare_output(cli, None)?;
    fs::write(out.join("precision.csv"), merged_curves(&labels, &precision)?)?;
    fs::write(out.join("success.csv"), merged_curves(&labels, &success)?)?;
    fs::write(out.join("summary.csv"), summary)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_file_parsing() {
        let pts = parse_points("# src dst\n1 2 3 4\n\n5,6, 7 8 # trailing\n").unwrap();
        assert_eq!(pts, vec![((1.0, 2.0), (3.0, 4.0)), ((5.0, 6.0), (7.0, 8.0))]);
        match parse_points("1 2 3\n").unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn curves_merge_by_threshold() {
        let a = vec![(0.0, 1.0), (0.5, 0.5)];
        let b = vec![(0.0, 0.9), (0.5, 0.2)];
        let s = merged_curves(&["a".into(), "b".into()], &[a.clone(), b]).unwrap();
        assert_eq!(s, "threshold,a,b\n0,1,0.9\n0.5,0.5,0.2\n");
        assert!(merged_curves(&["a".into(), "c".into()], &[a, vec![(0.0, 1.0)]]).is_err());
    }
}
