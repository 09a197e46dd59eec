use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use trimodal::data_model::load_sequence;
use trimodal::metrics::parse_curve_csv;
use trimodal::tracker::Checkpoint;

const TINY: &str = r#"
seed = 1

[model]
layers = 2
heads = 2

[model.patch]
patch_size = 8
embed_dim = 16
template_size = 16
search_size = 32

[pretrain]
epochs = 1
samples_per_epoch = 32

[train]
epochs = 2
samples_per_epoch = 32
lr_drop_epoch = 1

[data.synthetic]
train_sequences = 2
test_sequences = 2
length = 12
"#;

fn trimodal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trimodal"))
        .current_dir(dir)
        .env_remove("TRIMODAL_OUT")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn error_code(out: &Output) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    let line = stderr.lines().find(|l| l.starts_with("ERROR:")).expect("ERROR line");
    line.trim_start_matches("ERROR:").split(':').next().unwrap().to_string()
}

#[test]
fn synth_writes_loadable_deterministic_sequences() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.toml"), "count = 2\nlength = 5\nseed = 3\n").unwrap();
    ok(&trimodal(dir.path(), &["--config", "s.toml", "--out", "a", "synth"]));
    ok(&trimodal(dir.path(), &["--config", "s.toml", "--out", "b", "synth"]));
    for name in ["synth_000003", "synth_000004"] {
        let seq = load_sequence(dir.path().join("a"), name).unwrap();
        assert_eq!(seq.len(), 5);
        let gt = |root: &str| fs::read(dir.path().join(root).join(name).join("groundtruth.txt")).unwrap();
        assert_eq!(gt("a"), gt("b"));
    }
    // Default profile, no config file.
    ok(&trimodal(dir.path(), &["--out", "c", "synth"]));
    assert_eq!(load_sequence(dir.path().join("c"), "synth_000000").unwrap().len(), 60);
}

#[test]
fn bad_config_key_is_reported_by_name() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.toml"), "[profile]\ndepth_flat = []\n").unwrap();
    let out = trimodal(dir.path(), &["--config", "s.toml", "--out", "a", "synth"]);
    assert_eq!(error_code(&out), "config");
    assert!(String::from_utf8_lossy(&out.stderr).contains("depth_flat"));
    assert_eq!(error_code(&trimodal(dir.path(), &["frobnicate"])), "usage");
}

#[test]
fn output_directory_rules() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("full")).unwrap();
    fs::write(dir.path().join("full/keep.txt"), "x").unwrap();
    let args = ["--out", "full", "synth"];
    assert_eq!(error_code(&trimodal(dir.path(), &args)), "argument");
    ok(&trimodal(dir.path(), &["--out", "full", "--force", "synth"]));
    assert!(dir.path().join("full/keep.txt").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_trimodal"))
        .current_dir(dir.path())
        .env("TRIMODAL_OUT", "from-env")
        .arg("synth")
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("from-env/synth_000000/groundtruth.txt").exists());
}

fn checkpoint(path: &Path) -> Checkpoint {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_resume_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(&trimodal(d, &["--config", "tiny.toml", "--out", "run", "train"]));
    for f in ["checkpoint.json", "backbone.json", "loss.csv", "steps.csv", "config.toml"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let loss = fs::read_to_string(d.join("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);

    fs::write(d.join("more.toml"), TINY.replace("epochs = 2", "epochs = 3")).unwrap();
    ok(&trimodal(d, &["--config", "more.toml", "--out", "resumed", "train", "--resume", "run/checkpoint.json"]));
    let loss = fs::read_to_string(d.join("resumed/loss.csv")).unwrap();
    let epochs: Vec<&str> = loss.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, vec!["2"]);
    assert_eq!(checkpoint(&d.join("resumed/checkpoint.json")).train_state.unwrap().epochs_completed, 3);

    let out = trimodal(d, &["--config", "tiny.toml", "--out", "eval", "eval", "--checkpoint", "run/checkpoint.json"]);
    ok(&out);
    let summary = fs::read_to_string(d.join("eval/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    for line in summary.lines().skip(1) {
        let v: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }
    let p = parse_curve_csv(&fs::read_to_string(d.join("eval/precision.csv")).unwrap()).unwrap();
    assert!(p.windows(2).all(|w| w[0].1 <= w[1].1));
    let s = parse_curve_csv(&fs::read_to_string(d.join("eval/success.csv")).unwrap()).unwrap();
    assert!(s.windows(2).all(|w| w[0].1 >= w[1].1));
    assert!(d.join("eval/predictions").read_dir().unwrap().count() == 2);
}

#[test]
fn oracle_scores_perfect_precision() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&trimodal(d, &["--out", "data", "synth"]));
    ok(&trimodal(d, &["--out", "eval", "eval", "--oracle", "--data", "data"]));
    let summary = fs::read_to_string(d.join("eval/summary.csv")).unwrap();
    let agg = summary.lines().find(|l| l.starts_with("AGGREGATE")).unwrap();
    assert_eq!(agg.split(',').nth(1).unwrap(), "1");
}

#[test]
fn ablation_matrix_gives_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = format!(
        "{TINY}\n[matrix]\nvariants = [{{ modalities = \"rgb\" }}, {{ modalities = \"rgb+d\" }}, {{ modalities = \"rgb+t\" }}, {{ modalities = \"rgb+d+t\" }}, {{ modalities = \"rgb+d+t\", disable_orthogonal_projection = true }}]\n"
    );
    fs::write(d.join("m.toml"), cfg).unwrap();
    let out = trimodal(d, &["--config", "m.toml", "--out", "m", "train", "--matrix"]);
    ok(&out);
    let ckpts: Vec<String> = String::from_utf8(out.stdout).unwrap().lines().map(str::to_string).collect();
    assert_eq!(ckpts.len(), 5);

    let no_op = checkpoint(Path::new(&d.join(&ckpts[4])));
    assert!(!no_op.config.projection);
    for name in ["fusion.alpha", "fusion.beta"] {
        assert!(!no_op.params.iter().find(|p| p.name == name).unwrap().trainable);
    }
    let full = checkpoint(Path::new(&d.join(&ckpts[3])));
    assert!(full.params.iter().find(|p| p.name == "fusion.alpha").unwrap().trainable);

    let mut args = vec!["--config", "m.toml", "--out", "ev", "--jobs", "2", "eval"];
    for c in &ckpts {
        args.extend(["--checkpoint", c.as_str()]);
    }
    ok(&trimodal(d, &args));
    let table = fs::read_to_string(d.join("ev/ablation.csv")).unwrap();
    let variants: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(variants, vec!["rgb", "rgb+d", "rgb+t", "rgb+d+t", "rgb+d+t-no-projection"]);

    let runs: Vec<String> = fs::read_dir(d.join("ev"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| format!("ev/{}", e.file_name().to_string_lossy()))
        .collect();
    let mut args = vec!["--out", "plot", "plot-data"];
    for r in &runs {
        args.extend(["--eval", r.as_str()]);
    }
    ok(&trimodal(d, &args));
    let merged = fs::read_to_string(d.join("plot/success.csv")).unwrap();
    assert_eq!(merged.lines().next().unwrap().split(',').count(), 6);
    assert_eq!(merged.lines().count(), 22);
}

#[test]
fn align_and_select_frames() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut pts = String::from("# x y x' y'\n");
    for (x, y) in [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (10.0, 10.0), (5.0, 3.0), (2.0, 8.0)] {
        pts.push_str(&format!("{x} {y} {} {}\n", x + 5.0, y + 3.0));
    }
    fs::write(d.join("pts.txt"), pts).unwrap();
    ok(&trimodal(d, &["--out", "data", "synth"]));
    let out = trimodal(d, &["--out", "al", "align", "--points", "pts.txt", "--images", "data/synth_000000/tir"]);
    ok(&out);
    let map: trimodal::dataset_tools::AlignmentMap =
        fs::read_to_string(d.join("al/alignment.txt")).unwrap().trim().parse().unwrap();
    assert!((map.matrix[(0, 2)] - 5.0).abs() < 1e-9 && (map.matrix[(1, 2)] - 3.0).abs() < 1e-9);
    assert_eq!(d.join("al/warped").read_dir().unwrap().count(), 60);

    ok(&trimodal(d, &["--out", "sel", "--seed", "2", "select-frames", "--sequence", "data/synth_000000", "--k", "4"]));
    let idx: Vec<usize> = fs::read_to_string(d.join("sel/selected_frames.txt"))
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    assert!(!idx.is_empty() && idx.len() <= 4 && idx.windows(2).all(|w| w[0] < w[1]));

    fs::write(d.join("bad.txt"), "1 2 3\n").unwrap();
    assert_eq!(error_code(&trimodal(d, &["--out", "al2", "align", "--points", "bad.txt"])), "parse");
}
