//! The command implementations behind the `beampred` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::dft_codebook;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::checkpoint::{read_checkpoint_manifest, CHECKPOINT_MANIFEST};
use crate::model::{load_checkpoint, Featurized, Model, ModelKind};
use crate::scene::{
    build_scene, generate_dataset, load_dataset, split_dataset, sweep_trajectories, Dataset, Split,
    MANIFEST_FILE, SAMPLES_FILE,
};
use crate::tensor::{read_tensor_file, Role, MAGIC};
use crate::train::{
    evaluate, few_shot_protocol, EvalReport, FewShotTable, Trainer, CHECKPOINT_BEST, CHECKPOINT_LAST,
};

pub const REPORT_FILE: &str = "report.json";
pub const CURVE_FILE: &str = "loss.csv";
pub const FEWSHOT_JSON: &str = "fewshot.json";
pub const FEWSHOT_CSV: &str = "fewshot.csv";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(false);
    }
    let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    Ok(entries.next().is_some())
}

/// Builds the scene, samples its trajectories and writes the split dataset
/// plus the resolved config to `out`.
pub fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<Dataset> {
    cfg.validate()?;
    if !force && is_nonempty_dir(out)? {
        return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", out.display())));
    }
    let scene = build_scene(&cfg.scene, cfg.seed)?;
    let cb = dft_codebook(&cfg.array);
    let trajectories = match &cfg.data.trajectories {
        Some(t) => t.clone(),
        None => sweep_trajectories(&scene, cfg.data.samples, cfg.data.sample_interval)?,
    };
    let mut ds = generate_dataset(
        &scene,
        &trajectories,
        &cfg.grid,
        &cfg.array,
        &cb,
        cfg.data.sample_interval,
        &cfg.render,
        cfg.seed,
    )?;
    ds.manifest.scene_config = Some(cfg.scene.clone());
    let ds = split_dataset(ds, cfg.data.ratios, cfg.seed)?;
    crate::scene::save_dataset(&ds, out)?;
    cfg.write_resolved(out)?;
    Ok(ds)
}

/// Loads a dataset and refuses it when its labels were produced with a
/// different codebook than the run config's array implies.
pub fn load_checked(cfg: &RunConfig, dataset: &Path) -> Result<Dataset> {
    let ds = load_dataset(dataset)?;
    let expected = dft_codebook(&cfg.array).hash();
    if ds.manifest.codebook_hash != expected {
        return Err(Error::Integrity(format!(
            "dataset labels come from codebook {} but this run uses {}; refusing to train on mismatched labels",
            &ds.manifest.codebook_hash[..12],
            &expected[..12]
        )));
    }
    Ok(ds)
}

pub struct TrainRun {
    pub report: EvalReport,
    pub best: Model,
    pub resumed: bool,
}

/// Trains `kind` on the dataset's train split, selects on validation, scores
/// the test split and writes checkpoints, `report.json` and `loss.csv`.
pub fn train(
    cfg: &RunConfig,
    kind: ModelKind,
    dataset: &Path,
    out: &Path,
    resume: bool,
    mut progress: impl FnMut(&str),
) -> Result<TrainRun> {
    cfg.validate()?;
    let ds = load_checked(cfg, dataset)?;
    let data = Featurized::new(&ds)?;
    let (train_idx, val_idx, test_idx) = (ds.indices(Split::Train), ds.indices(Split::Val), ds.indices(Split::Test));
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = Trainer::new(cfg.model.clone(), cfg.train.clone(), &data, train_idx, val_idx);
    trainer.checkpoint_dir = Some(out.to_path_buf());
    trainer.on_epoch = Some(Box::new(|r| {
        progress(&format!(
            "epoch {:>3}  loss {:.6}  val top1 {:.4}  top3 {:.4}",
            r.epoch, r.train_loss, r.val_top1, r.val_top3
        ))
    }));
    let resumed = resume && out.join(CHECKPOINT_LAST).join(CHECKPOINT_MANIFEST).exists();
    if resumed {
        let stored = read_checkpoint_manifest(&out.join(CHECKPOINT_LAST))?.kind;
        if stored != kind {
            return Err(Error::Config(format!(
                "{} holds a {} run, not {}",
                out.display(),
                stored.name(),
                kind.name()
            )));
        }
    }
    let outcome = if resumed {
        trainer.resume(out)?
    } else {
        let model = Model::new(kind, &cfg.model, &data.spec, cfg.train.seed)?;
        trainer.train(model, cfg.train.seed)?
    };
    drop(trainer);
    let mut report = evaluate(&outcome.best, &data, &test_idx, "test", cfg.train.eval_batch_size)?;
    report.loss_curve = outcome.state.curve.clone();
    write_json(&out.join(REPORT_FILE), &report)?;
    write(&out.join(CURVE_FILE), EvalReport::curve_csv(&report.loss_curve))?;
    cfg.write_resolved(out)?;
    Ok(TrainRun { report, best: outcome.best, resumed })
}

/// Scores a checkpoint directory (or a training output holding
/// `checkpoint_best/`) on one split of a dataset.
pub fn eval(checkpoint: &Path, dataset: &Path, split: Split) -> Result<EvalReport> {
    let dir = resolve_checkpoint(checkpoint);
    let ck = load_checkpoint(&dir)?;
    let ds = load_dataset(dataset)?;
    let data = Featurized::new(&ds)?;
    if &data.spec != ck.model.spec() {
        return Err(Error::Config(format!(
            "checkpoint expects inputs {:?} but the dataset provides {:?}",
            ck.model.spec(),
            data.spec
        )));
    }
    let idx = ds.indices(split);
    let name = match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    };
    let mut report = evaluate(&ck.model, &data, &idx, name, 64)?;
    if let Ok(state) = serde_json::from_value::<crate::train::TrainState>(ck.manifest.state) {
        report.loss_curve = state.curve;
    }
    Ok(report)
}

fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.join(CHECKPOINT_MANIFEST).exists() && path.join("params").exists() {
        path.to_path_buf()
    } else {
        path.join(CHECKPOINT_BEST)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotReport {
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub table: FewShotTable,
}

/// Few-shot grid for every configured model; writes `fewshot.json` and
/// `fewshot.csv`.
pub fn fewshot(cfg: &RunConfig, dataset: &Path, out: &Path, progress: impl FnMut(&str)) -> Result<FewShotReport> {
    cfg.validate()?;
    let ds = load_checked(cfg, dataset)?;
    let data = Featurized::new(&ds)?;
    let (train_idx, val_idx, test_idx) = (ds.indices(Split::Train), ds.indices(Split::Val), ds.indices(Split::Test));
    let fs_cfg = &cfg.fewshot;
    if fs_cfg.models.is_empty() {
        return Err(Error::Config("few-shot grid needs at least one model".into()));
    }
    let mut progress = progress;
    let mut cells = Vec::new();
    for &kind in &fs_cfg.models {
        let t = few_shot_protocol(
            kind,
            &cfg.model,
            &data,
            (&train_idx, &val_idx, &test_idx),
            &fs_cfg.ratios,
            &fs_cfg.seeds,
            &cfg.train,
            &mut progress,
        )?;
        cells.extend(t.cells);
    }
    let report = FewShotReport {
        ratios: fs_cfg.ratios.clone(),
        seeds: fs_cfg.seeds.clone(),
        table: FewShotTable { cells },
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(FEWSHOT_JSON), &report)?;
    write(&out.join(FEWSHOT_CSV), report.table.to_csv())?;
    cfg.write_resolved(out)?;
    Ok(report)
}

/// Human-readable summary of a dataset directory, a checkpoint (or training
/// output) directory, or a single BCTN tensor file.
pub fn inspect(path: &Path) -> Result<String> {
    if path.is_file() {
        return inspect_file(path);
    }
    if path.join(SAMPLES_FILE).exists() || (path.join(MANIFEST_FILE).exists() && !path.join("params").exists()) {
        return inspect_dataset(path);
    }
    let dir = resolve_checkpoint(path);
    if dir.join(CHECKPOINT_MANIFEST).exists() {
        return inspect_checkpoint(&dir);
    }
    Err(Error::Config(format!("{} is neither a dataset, a checkpoint nor a tensor file", path.display())))
}

fn inspect_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Integrity(format!("{}: unknown file magic", path.display())));
    }
    let t = read_tensor_file(path)?;
    Ok(format!("tensor {}\n  shape {:?}\n  norm {:.6e}\n", path.display(), t.shape(), t.norm()))
}

fn inspect_dataset(dir: &Path) -> Result<String> {
    let ds = load_dataset(dir)?;
    let m = &ds.manifest;
    let mut s = String::new();
    let _ = writeln!(s, "dataset {}", dir.display());
    let _ = writeln!(s, "  format {}  seed {}  samples {}", m.format_version, m.seed, m.n_samples);
    let _ = writeln!(
        s,
        "  scene {}x{} m, {} buildings, {} roads, bs at ({:.2}, {:.2}, {:.2})",
        m.scene.length,
        m.scene.width,
        m.scene.buildings.len(),
        m.scene.roads.len(),
        m.scene.bs_position.x,
        m.scene.bs_position.y,
        m.scene.bs_position.z
    );
    let _ = writeln!(s, "  scene hash {}", m.scene_hash);
    let _ = writeln!(s, "  codebook hash {}", m.codebook_hash);
    let _ = writeln!(s, "  array {}x{}  beams {}  views {} at {}x{}", m.array.n_h, m.array.n_v, m.n_beams, m.n_views, m.render.width, m.render.height);
    let _ = writeln!(s, "  split train {} / val {} / test {}", m.counts[0], m.counts[1], m.counts[2]);
    let _ = writeln!(s, "  line of sight {:.4}", m.los_fraction);
    let mut hist = vec![0usize; m.n_beams];
    for smp in &ds.samples {
        hist[smp.label] += 1;
    }
    let _ = writeln!(s, "  label histogram (beam: count)");
    for (row, chunk) in hist.chunks(8).enumerate() {
        let cells: Vec<String> = chunk.iter().enumerate().map(|(j, c)| format!("{:>2}:{c:>5}", row * 8 + j)).collect();
        let _ = writeln!(s, "    {}", cells.join("  "));
    }
    Ok(s)
}

fn inspect_checkpoint(dir: &Path) -> Result<String> {
    let manifest = read_checkpoint_manifest(dir)?;
    let ck = load_checkpoint(dir)?;
    let mut s = String::new();
    let _ = writeln!(s, "checkpoint {} ({})", dir.display(), manifest.kind.name());
    if let Some(a) = &manifest.adam {
        let _ = writeln!(s, "  optimizer step {}  lr {}", a.step, a.config.learning_rate);
    }
    let mut totals = [0usize; 3];
    for p in ck.model.params().iter() {
        let slot = match p.role {
            Role::Trainable => 0,
            Role::Frozen => 1,
            Role::Buffer => 2,
        };
        totals[slot] += p.value.len();
    }
    let _ = writeln!(
        s,
        "  parameters: {} trainable, {} frozen, {} buffer scalars",
        totals[0], totals[1], totals[2]
    );
    for p in ck.model.params().iter() {
        let role = match p.role {
            Role::Trainable => "trainable",
            Role::Frozen => "frozen",
            Role::Buffer => "buffer",
        };
        let _ = writeln!(s, "  {:<28} {:<12} {:<9} norm {:.6e}", p.name, format!("{:?}", p.value.shape()), role, p.value.norm());
    }
    Ok(s)
}
