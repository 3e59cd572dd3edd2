use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use stm_core::curate::{curate_topk, generate_synthetic, import_png_dir, load_dataset, rotate_augment, save_dataset, GeneratorSpec, Split};
use stm_core::distill::{init_syn, load_checkpoint, save_checkpoint, Checkpoint, Stm, Termination};
use stm_core::eval::{compare, evaluate, evaluate_syn, random_baseline};
use stm_core::teacher::{load_trajectory, save_trajectory, train_teachers, TrajectorySet};

use crate::config::RunConfig;
use crate::error::{at, CliError};
use crate::export;
use crate::manifest::Manifest;
use crate::prep::prepare;

/// Environment variable that relocates relative `io.out` directories.
pub const OUTPUT_ROOT_ENV: &str = "STM_OUTPUT_ROOT";

pub const CHECKPOINT_FILE: &str = "checkpoint.stms";

/// The run directory: `io.out` (or the subcommand name), under the output
/// root when relative.
pub fn out_dir(cfg: &RunConfig, subcommand: &str) -> PathBuf {
    let name = if cfg.io_out.is_empty() { subcommand } else { cfg.io_out.as_str() };
    let p = PathBuf::from(name);
    if p.is_absolute() {
        return p;
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(p),
        _ => p,
    }
}

fn require<'a>(value: &'a str, key: &str, subcommand: &str) -> Result<&'a Path, CliError> {
    if value.is_empty() {
        return Err(CliError::new("config", format!("key {key} is required for {subcommand}")));
    }
    Ok(Path::new(value))
}

struct Run<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    manifest: Manifest,
}

impl<'a> Run<'a> {
    fn start(cfg: &'a RunConfig, subcommand: &str) -> Result<Self, CliError> {
        let dir = out_dir(cfg, subcommand);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self { cfg, manifest: Manifest::new(subcommand, cfg), dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        std::fs::write(self.path(name), text).map_err(|e| CliError::io(self.path(name), e))?;
        self.manifest.output(&self.dir, name)
    }

    fn finish(self) -> Result<PathBuf, CliError> {
        self.manifest.write(&self.dir)?;
        Ok(self.dir)
    }

    fn dataset(&mut self, subcommand: &str) -> Result<stm_core::curate::LabeledDataset, CliError> {
        let p = require(&self.cfg.io_dataset, "io.dataset", subcommand)?;
        let ds = load_dataset(p).map_err(at(p))?;
        self.manifest.input("dataset", p)?;
        Ok(ds)
    }

    fn checkpoint(&mut self, subcommand: &str) -> Result<Checkpoint, CliError> {
        let p = require(&self.cfg.io_checkpoint, "io.checkpoint", subcommand)?;
        let c = load_checkpoint(p).map_err(at(p))?;
        self.manifest.input("checkpoint", p)?;
        Ok(c)
    }
}

pub fn gen_data(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let mut run = Run::start(cfg, "gen-data")?;
    let spec = GeneratorSpec { channels: cfg.gen_channels, noise: cfg.gen_noise, ..GeneratorSpec::galaxy9(cfg.gen_size) };
    let ds = generate_synthetic(&spec, cfg.gen_per_class, cfg.gen_seed)?;
    save_dataset(&ds, run.path("dataset.stmd"))?;
    run.manifest.output(&run.dir, "dataset.stmd")?;
    run.manifest.add("seed.gen", cfg.gen_seed);
    run.manifest.add("result.images", ds.len());
    run.manifest.add("result.fingerprint", ds.fingerprint());
    println!("generated {} images ({} classes) -> {}", ds.len(), ds.classes(), run.path("dataset.stmd").display());
    run.finish()
}

pub fn curate(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let mut run = Run::start(cfg, "curate")?;
    let src = require(&cfg.io_dataset, "io.dataset", "curate")?;
    // a CSV sidecar names PNG files next to it
    let ds = if src.extension().is_some_and(|x| x == "csv") {
        let dir = src.parent().unwrap_or(Path::new("."));
        let ds = import_png_dir(dir, src, None).map_err(at(src))?;
        run.manifest.input("labels_csv", src)?;
        ds
    } else {
        run.dataset("curate")?
    };
    let mut out = curate_topk(&ds, cfg.curate_k_per_class, cfg.curate_train_per_class, cfg.curate_seed)?;
    if cfg.curate_rotations > 1 {
        let train = rotate_augment(&out.select_split(Split::Train), cfg.curate_rotation_step, cfg.curate_rotations)?;
        out = train.concat(&out.select_split(Split::Test))?;
    }
    save_dataset(&out, run.path("curated.stmd"))?;
    run.manifest.output(&run.dir, "curated.stmd")?;
    let (train, test) = (out.select_split(Split::Train).len(), out.select_split(Split::Test).len());
    let conf = |d: &stm_core::curate::LabeledDataset| d.mean_confidence().map_or("-".into(), |c| c.to_string());
    run.manifest.add("seed.curate", cfg.curate_seed);
    run.manifest.add("result.train_images", train);
    run.manifest.add("result.test_images", test);
    run.manifest.add("result.input_mean_confidence", conf(&ds));
    run.manifest.add("result.output_mean_confidence", conf(&out));
    println!("curated {train} train / {test} test images, mean confidence {} -> {}", conf(&ds), conf(&out));
    run.finish()
}

pub fn teacher(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let mut run = Run::start(cfg, "teacher")?;
    let ds = run.dataset("teacher")?;
    let prep = prepare(&ds, cfg)?;
    let (c, h, w) = prep.train.dims();
    let arch = cfg.arch(c, h, w, prep.train.classes());
    let seeds: Vec<u64> = (0..cfg.teacher_count as u64).map(|i| cfg.teacher_seed + i).collect();
    let runs = train_teachers(&prep.train, &arch, &cfg.teacher_sgd(), &seeds)?;
    for (s, r) in seeds.iter().zip(&runs) {
        let name = format!("teacher_{s}.stmt");
        save_trajectory(&r.buffer, run.path(&name))?;
        run.manifest.output(&run.dir, &name)?;
        run.manifest.add(&format!("result.teacher_{s}.train_accuracy"), r.final_train_accuracy);
        println!("teacher seed {s}: {} snapshots, train accuracy {:.2}%", r.buffer.len(), 100.0 * r.final_train_accuracy);
    }
    run.manifest.add("seed.teachers", seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
    run.manifest.add("result.arch", arch);
    run.manifest.add("result.train_fingerprint", prep.train.fingerprint());
    run.finish()
}

fn trajectory_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::input(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "stmt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::input(dir, "no .stmt trajectory files"));
    }
    Ok(files)
}

fn save_atomic(ckpt: &Checkpoint, path: &Path) -> Result<(), CliError> {
    let tmp = path.with_extension("stms.tmp");
    save_checkpoint(ckpt, &tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn distill(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let mut run = Run::start(cfg, "distill")?;
    let ds = run.dataset("distill")?;
    let prep = prepare(&ds, cfg)?;
    let dir = require(&cfg.io_trajectories, "io.trajectories", "distill")?;
    let train_fp = prep.train.fingerprint();
    let mut buffers = Vec::new();
    for (i, p) in trajectory_files(dir)?.iter().enumerate() {
        let b = load_trajectory(p).map_err(at(p))?;
        if b.meta().dataset_fingerprint != train_fp {
            return Err(CliError::new(
                "mismatch",
                format!("{} was trained on different (or differently preprocessed) data", p.display()),
            ));
        }
        run.manifest.input(&format!("trajectory.{i}"), p)?;
        buffers.push(b);
    }
    let set = TrajectorySet::from_buffers(buffers)?;
    let arch = *set.arch();
    let (c, h, w) = prep.train.dims();
    let wanted = cfg.arch(c, h, w, prep.train.classes());
    if wanted != arch {
        return Err(CliError::new("mismatch", format!("trajectories use {arch}, config describes {wanted}")));
    }

    let dcfg = cfg.distill();
    let ckpt_path = run.path(CHECKPOINT_FILE);
    let mut stm = if cfg.distill_resume && ckpt_path.exists() {
        let ck = load_checkpoint(&ckpt_path).map_err(at(&ckpt_path))?;
        let same = stm_core::distill::DistillConfig { max_total_iter: dcfg.max_total_iter, ..ck.stm.config().clone() };
        if ck.arch != arch || same != dcfg {
            return Err(CliError::new("mismatch", format!("{} was written by a different configuration", ckpt_path.display())));
        }
        let mut s = ck.stm;
        s.set_budget(dcfg.max_total_iter);
        println!("resuming from step {}", s.state().step());
        s
    } else {
        let syn = init_syn(cfg.distill_init, &prep.train, cfg.distill_ipc, cfg.distill_alpha_init as f32, cfg.distill_seed)?;
        Stm::new(dcfg, syn)?
    };

    let termination = loop {
        if let Some(t) = stm.step(&set)? {
            break t;
        }
        let step = stm.state().step();
        if cfg.distill_checkpoint_every > 0 && step % cfg.distill_checkpoint_every == 0 {
            save_atomic(&Checkpoint { arch, stm: stm.clone() }, &ckpt_path)?;
            let h = stm.history().last().expect("a step was taken");
            println!("step {step}: T={} loss {:.4} alpha {:.5}", h.pool, h.train_loss, h.alpha);
        }
    };
    if let Termination::TrajectoryExhausted { needed, available } = termination {
        eprintln!("warning: trajectory exhausted (pool needs snapshot {needed}, buffers hold {available})");
    }
    save_atomic(&Checkpoint { arch, stm: stm.clone() }, &ckpt_path)?;
    run.manifest.output(&run.dir, CHECKPOINT_FILE)?;
    save_dataset(&stm.syn().to_dataset()?, run.path("synthetic.stmd"))?;
    run.manifest.output(&run.dir, "synthetic.stmd")?;
    let csv = history_csv(&stm);
    run.write_text("history.csv", &csv)?;

    run.manifest.add("seed.distill", cfg.distill_seed);
    run.manifest.add("result.termination", format!("{termination:?}"));
    run.manifest.add("result.steps", stm.state().step());
    run.manifest.add("result.final_pool", stm.state().pool());
    run.manifest.add("result.alpha", stm.syn().alpha());
    let exp: Vec<String> = stm.expansions().iter().map(|e| format!("{}:{}", e.step, e.new_pool)).collect();
    run.manifest.add("result.expansions", exp.join(","));
    println!(
        "distilled {} images in {} steps, T={}, alpha {}, stopped: {termination:?}",
        stm.syn().len(),
        stm.state().step(),
        stm.state().pool(),
        stm.syn().alpha()
    );
    run.finish()
}

fn history_csv(stm: &Stm) -> String {
    let mut s = String::from("step,iter,t,pool,buffer,train_loss,val_loss,alpha\n");
    for h in stm.history() {
        let val = h.val_loss.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(s, "{},{},{},{},{},{},{val},{}", h.step, h.iter, h.t, h.pool, h.buffer, h.train_loss, h.alpha);
    }
    s
}

fn prefixed(prefix: &str, kv: &str) -> String {
    kv.lines().map(|l| format!("{prefix}.{l}\n")).collect()
}

pub fn eval(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let mut run = Run::start(cfg, "eval")?;
    let ckpt = run.checkpoint("eval")?;
    let ds = run.dataset("eval")?;
    let prep = prepare(&ds, cfg)?;
    let syn = ckpt.stm.syn();
    let sgd = cfg.eval_sgd();
    let distilled = evaluate_syn(syn, &prep.test, &ckpt.arch, cfg.eval_n_nets, &sgd, cfg.eval_seed)?;
    let subset = random_baseline(&prep.train, syn.ipc(), cfg.eval_seed)?;
    let random = evaluate(&subset, &prep.test, &ckpt.arch, cfg.eval_n_nets, &sgd, cfg.eval_seed)?;
    let full = if cfg.eval_full {
        Some(evaluate(&prep.train, &prep.test, &ckpt.arch, cfg.eval_n_nets, &sgd, cfg.eval_seed)?)
    } else {
        None
    };
    let cmp = compare(&distilled, &random, full.as_ref())?;
    let mut kv = prefixed("distilled", &distilled.to_key_values());
    kv += &prefixed("random", &random.to_key_values());
    if let Some(f) = &full {
        kv += &prefixed("full", &f.to_key_values());
    }
    kv += &prefixed("comparison", &cmp.to_key_values());
    run.write_text("report.kv", &kv)?;
    run.write_text("report.txt", &cmp.to_table())?;
    run.manifest.add("seed.eval", cfg.eval_seed);
    println!("distilled:\n{}random:\n{}", distilled.to_table(), random.to_table());
    if let Some(f) = &full {
        println!("full:\n{}", f.to_table());
    }
    print!("{}", cmp.to_table());
    run.finish()
}

pub fn baseline(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let mut run = Run::start(cfg, "baseline")?;
    let ds = run.dataset("baseline")?;
    let prep = prepare(&ds, cfg)?;
    let subset = random_baseline(&prep.train, cfg.distill_ipc, cfg.eval_seed)?;
    let (c, h, w) = prep.train.dims();
    let arch = cfg.arch(c, h, w, prep.train.classes());
    let report = evaluate(&subset, &prep.test, &arch, cfg.eval_n_nets, &cfg.eval_sgd(), cfg.eval_seed)?;
    save_dataset(&random_baseline(&ds, cfg.distill_ipc, cfg.eval_seed)?, run.path("random_subset.stmd"))?;
    run.manifest.output(&run.dir, "random_subset.stmd")?;
    run.write_text("baseline.kv", &report.to_key_values())?;
    run.manifest.add("seed.eval", cfg.eval_seed);
    print!("random {} per class:\n{}", cfg.distill_ipc, report.to_table());
    run.finish()
}

pub fn export_images(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let mut run = Run::start(cfg, "export-images")?;
    let ckpt = run.checkpoint("export-images")?;
    let syn = ckpt.stm.syn();
    let mut images = syn.to_dataset()?;
    if !cfg.io_dataset.is_empty() {
        let ds = run.dataset("export-images")?;
        images = prepare(&ds, cfg)?.invert(&images)?;
    }
    let e = export::layout(images.pixels(), syn.dims(), syn.classes(), syn.ipc())?;
    let mut names = Vec::new();
    for (k, row) in e.rows.iter().enumerate() {
        names.extend(row.write(&run.dir, &format!("class_{k}"))?);
    }
    names.extend(e.grid.write(&run.dir, "grid")?);
    for n in &names {
        run.manifest.output(&run.dir, n)?;
    }
    run.write_text("mapping.txt", &export::sidecar(&e, syn.ipc()))?;
    println!("exported {} class rows and a {}x{} grid to {}", e.rows.len(), syn.classes(), syn.ipc(), run.dir.display());
    run.finish()
}

pub fn show_history(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let mut run = Run::start(cfg, "show-history")?;
    let ckpt = run.checkpoint("show-history")?;
    let stm = &ckpt.stm;
    let csv = history_csv(stm);
    run.write_text("history.csv", &csv)?;
    let mut exp = String::from("step,iteration,series_len,r,new_pool\n");
    for e in stm.expansions() {
        let _ = writeln!(exp, "{},{},{},{},{}", e.step, e.iteration, e.series_len, e.r, e.new_pool);
    }
    run.write_text("expansions.csv", &exp)?;
    println!("{:>6} {:>5} {:>3} {:>4} {:>10} {:>10} {:>9}", "step", "iter", "t", "T", "train", "val", "alpha");
    for h in stm.history() {
        let val = h.val_loss.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("{:>6} {:>5} {:>3} {:>4} {:>10.4} {:>10} {:>9.5}", h.step, h.iter, h.t, h.pool, h.train_loss, val, h.alpha);
    }
    for e in stm.expansions() {
        println!("expansion at step {}: T -> {} (r = {:.3} over {} values)", e.step, e.new_pool, e.r, e.series_len);
    }
    if let Some(t) = stm.termination() {
        println!("terminated: {t:?}");
    }
    run.finish()
}
