use std::path::Path;
use std::process::{Command, Output};

use stm_cli::commands::OUTPUT_ROOT_ENV;
use stm_cli::{parse_config_str, ConfigError};

fn stm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stm"))
        .args(args)
        .current_dir(dir)
        .env_remove(OUTPUT_ROOT_ENV)
        .output()
        .expect("spawn stm")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stm failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_line(out: &Output) -> String {
    assert!(!out.status.success());
    let s = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(s.trim_end().lines().count(), 1, "expected one line, got {s:?}");
    s.trim_end().to_string()
}

const TINY: &[(&str, &str)] = &[
    ("gen.size", "8"),
    ("gen.per_class", "8"),
    ("curate.k_per_class", "6"),
    ("curate.train_per_class", "4"),
    ("arch.depth", "1"),
    ("arch.width", "4"),
    ("teacher.epochs", "3"),
    ("teacher.count", "2"),
    ("teacher.batch_size", "16"),
    ("distill.syn_steps", "5"),
    ("distill.max_total_iter", "4"),
    ("distill.checkpoint_every", "2"),
    ("eval.n_nets", "2"),
    ("eval.epochs", "5"),
    ("io.dataset", "curate/curated.stmd"),
    ("io.trajectories", "teacher"),
    ("io.checkpoint", "distill/checkpoint.stms"),
];

/// Writes `run.cfg` (TINY with `extra` replacing or adding keys), then
/// generates, curates and trains teachers in `dir`.
fn tiny_pipeline(dir: &Path, extra: &[(&str, &str)]) {
    let mut text = String::new();
    for (k, v) in TINY.iter().filter(|(k, _)| !extra.iter().any(|(e, _)| e == k)).chain(extra) {
        text += &format!("{k} = {v}\n");
    }
    std::fs::write(dir.join("run.cfg"), text).unwrap();
    ok(stm(dir, &["gen-data", "-c", "run.cfg"]));
    ok(stm(dir, &["curate", "-c", "run.cfg", "--set", "io.dataset=gen-data/dataset.stmd"]));
    ok(stm(dir, &["teacher", "-c", "run.cfg"]));
}

fn manifest(path: impl AsRef<Path>) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

fn has(m: &[String], line: &str) -> bool {
    m.iter().any(|l| l == line)
}

#[test]
fn cifar10_row_is_accepted_and_echoed() {
    let dir = tempfile::tempdir().unwrap();
    tiny_pipeline(
        dir.path(),
        &[
            ("distill.syn_steps", "50"),
            ("distill.lr_pixels", "1000"),
            ("distill.alpha_init", "0.01"),
            ("distill.lr_alpha", "0.01"),
            ("distill.zca", "Y"),
        ],
    );
    ok(stm(dir.path(), &["distill", "-c", "run.cfg", "--set", "distill.max_total_iter=2"]));
    let m = manifest(dir.path().join("distill/manifest.txt"));
    for line in [
        "config.distill.syn_steps=50",
        "config.distill.lr_pixels=1000",
        "config.distill.alpha_init=0.01",
        "config.distill.lr_alpha=0.01",
        "config.distill.zca=true",
        "result.steps=2",
    ] {
        assert!(has(&m, line), "missing {line}");
    }
    assert!(m.iter().any(|l| l.starts_with("input.trajectory.1.sha256=")));
}

#[test]
fn gzoo_row_is_accepted() {
    let cfg = parse_config_str(
        "distill.syn_steps = 50\ndistill.lr_pixels = 10000\ndistill.alpha_init = 0.0001\ndistill.zca = N\n",
        &[],
    )
    .unwrap();
    assert_eq!(cfg.distill_syn_steps, 50);
    assert_eq!(cfg.distill_lr_pixels, 10000.0);
    assert_eq!(cfg.distill_alpha_init, 0.0001);
    assert!(!cfg.distill_zca);
}

#[test]
fn cifar100_ten_ipc_row_parses_exactly() {
    let cfg = parse_config_str("distill.ipc = 10\ndistill.syn_steps = 20\ndistill.lr_pixels = 1000\n", &[]).unwrap();
    assert_eq!((cfg.distill_ipc, cfg.distill_syn_steps, cfg.distill_lr_pixels), (10, 20, 1000.0));
}

#[test]
fn override_wins_over_file() {
    let cfg = parse_config_str("distill.lambda = 5\n", &["distill.lambda=3".into()]).unwrap();
    assert_eq!(cfg.distill_lambda, 3.0);
}

#[test]
fn strict_parsing_errors_are_named() {
    assert!(matches!(
        parse_config_str("distill.lambda = -1\n", &[]),
        Err(ConfigError::Range { key, .. }) if key == "distill.lambda"
    ));
    assert!(matches!(
        parse_config_str("eval.epochs = 3\neval.epochs = 4\n", &[]),
        Err(ConfigError::DuplicateKey { key, .. }) if key == "eval.epochs"
    ));
    assert!(matches!(
        parse_config_str("teacher.lr = fast\n", &[]),
        Err(ConfigError::Type { key, .. }) if key == "teacher.lr"
    ));
    assert!(matches!(
        parse_config_str("curate.k_per_class = 5\ncurate.train_per_class = 5\n", &[]),
        Err(ConfigError::Range { key, .. }) if key == "curate.train_per_class"
    ));
}

#[test]
fn unknown_key_exits_nonzero_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "distill.lambda = 5\nlearnin_rate = 0.1\n").unwrap();
    let out = stm(dir.path(), &["distill", "-c", "bad.cfg"]);
    let line = stderr_line(&out);
    assert!(line.starts_with("error kind=config"), "{line}");
    assert!(line.contains("learnin_rate") && line.contains("line 2"), "{line}");
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = stm(dir.path(), &["teacher", "--set", "io.dataset=nowhere.stmd"]);
    let line = stderr_line(&out);
    assert!(line.starts_with("error kind=input") && line.contains("nowhere.stmd"), "{line}");
}

#[test]
fn manifest_rerun_reproduces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    tiny_pipeline(dir.path(), &[]);
    ok(stm(dir.path(), &["distill", "-c", "run.cfg"]));
    let again = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(again.path().join("curate")).unwrap();
    std::fs::copy(dir.path().join("curate/curated.stmd"), again.path().join("curate/curated.stmd")).unwrap();
    std::fs::create_dir_all(again.path().join("teacher")).unwrap();
    ok(stm(again.path(), &["teacher", "-c", dir.path().join("teacher/manifest.txt").to_str().unwrap()]));
    ok(stm(again.path(), &["distill", "-c", dir.path().join("distill/manifest.txt").to_str().unwrap()]));
    for f in ["teacher/teacher_100.stmt", "teacher/teacher_101.stmt", "distill/checkpoint.stms", "distill/synthetic.stmd", "distill/history.csv", "distill/manifest.txt"] {
        assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(again.path().join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn resumed_distill_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    tiny_pipeline(dir.path(), &[]);
    ok(stm(dir.path(), &["distill", "-c", "run.cfg", "--set", "distill.max_total_iter=6", "--set", "io.out=straight"]));
    ok(stm(dir.path(), &["distill", "-c", "run.cfg", "--set", "distill.max_total_iter=3", "--set", "io.out=split"]));
    let out = ok(stm(
        dir.path(),
        &["distill", "-c", "run.cfg", "--set", "distill.max_total_iter=6", "--set", "io.out=split", "--set", "distill.resume=true"],
    ));
    assert!(out.contains("resuming from step 3"), "{out}");
    for f in ["checkpoint.stms", "synthetic.stmd", "history.csv"] {
        assert_eq!(
            std::fs::read(dir.path().join("straight").join(f)).unwrap(),
            std::fs::read(dir.path().join("split").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn changed_preprocessing_is_rejected_by_distill() {
    let dir = tempfile::tempdir().unwrap();
    tiny_pipeline(dir.path(), &[]);
    let out = stm(dir.path(), &["distill", "-c", "run.cfg", "--set", "distill.zca=true"]);
    assert!(stderr_line(&out).starts_with("error kind=mismatch"));
}

#[test]
fn eval_baseline_history_and_export() {
    let dir = tempfile::tempdir().unwrap();
    tiny_pipeline(dir.path(), &[("distill.ipc", "2")]);
    ok(stm(dir.path(), &["distill", "-c", "run.cfg"]));
    let table = ok(stm(dir.path(), &["eval", "-c", "run.cfg", "--set", "eval.full=true"]));
    assert!(table.contains("Random") && table.contains("distilled wins"));
    let kv = std::fs::read_to_string(dir.path().join("eval/report.kv")).unwrap();
    assert!(kv.contains("distilled.lr_source=distilled_alpha") && kv.contains("random.lr_source=fixed"));
    assert!(kv.contains("comparison.full_mean="));

    ok(stm(dir.path(), &["baseline", "-c", "run.cfg"]));
    assert!(dir.path().join("baseline/random_subset.stmd").exists());

    let hist = ok(stm(dir.path(), &["show-history", "-c", "run.cfg"]));
    assert!(hist.contains("terminated: Budget"));
    assert_eq!(std::fs::read_to_string(dir.path().join("show-history/history.csv")).unwrap().lines().count(), 5);

    ok(stm(dir.path(), &["export-images", "-c", "run.cfg"]));
    let ex = dir.path().join("export-images");
    for k in 0..9 {
        assert!(ex.join(format!("class_{k}.png")).exists() && ex.join(format!("class_{k}.ppm")).exists());
    }
    let grid = image::open(ex.join("grid.png")).unwrap().to_rgb8();
    assert_eq!(grid.dimensions(), (2 * 8, 9 * 8));
    let ppm = std::fs::read(ex.join("grid.ppm")).unwrap();
    let header = b"P6\n16 72\n255\n";
    assert_eq!(&ppm[..header.len()], header);
    assert_eq!(&ppm[header.len()..], grid.as_raw().as_slice());
    assert_eq!(std::fs::read_to_string(ex.join("mapping.txt")).unwrap().lines().count(), 1 + 18);
}

#[test]
fn constant_image_exports_mid_gray() {
    use stm_core::distill::{save_checkpoint, Checkpoint, DistillConfig, Stm, SyntheticDataset};
    use stm_core::nets::ArchDescriptor;
    use stm_core::tensor::Tensor;

    let dir = tempfile::tempdir().unwrap();
    let arch = ArchDescriptor { depth: 1, width: 4, ..ArchDescriptor::convnet(3, 4, 4, 9) };
    let syn = SyntheticDataset::new(Tensor::full(&[9, 3, 4, 4], 0.25), 9, 1, 0.01).unwrap();
    let ckpt = Checkpoint { arch, stm: Stm::new(DistillConfig::default(), syn).unwrap() };
    save_checkpoint(&ckpt, dir.path().join("c.stms")).unwrap();
    ok(stm(dir.path(), &["export-images", "--set", "io.checkpoint=c.stms"]));
    let ppm = std::fs::read(dir.path().join("export-images/grid.ppm")).unwrap();
    let header = b"P6\n4 36\n255\n";
    assert!(ppm[header.len()..].iter().all(|&b| b == 128));
    let row = image::open(dir.path().join("export-images/class_0.png")).unwrap().to_rgb8();
    assert_eq!(row.dimensions(), (4, 4));
}

#[test]
fn output_root_relocates_runs() {
    let dir = tempfile::tempdir().unwrap();
    let root = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_stm"))
        .args(["gen-data", "--set", "gen.size=8", "--set", "gen.per_class=2"])
        .current_dir(dir.path())
        .env(OUTPUT_ROOT_ENV, root.path())
        .output()
        .unwrap();
    ok(out);
    assert!(root.path().join("gen-data/dataset.stmd").exists());
    assert!(!dir.path().join("gen-data").exists());
    let m = manifest(root.path().join("gen-data/manifest.txt"));
    assert_eq!(m[0], "# stm manifest");
    assert!(has(&m, "config.gen.size=8"));
}

#[test]
fn usage_errors_are_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = stm(dir.path(), &["distil"]);
    assert!(stderr_line(&out).starts_with("error kind=usage"));
}
