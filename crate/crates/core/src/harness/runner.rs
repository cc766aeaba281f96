//! Experiment grid runner: one dataset, shared networks per seed, then every
//! (mode, seed) cell, each written to its own directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array3, Axis};
use rayon::prelude::*;

use super::config::RunConfig;
use super::summary::{summarize, CellResult, Summary};
use crate::domain::{DatasetSplit, LabelMap, PixelSpacing};
use crate::error::{Error, Result};
use crate::io::{load_dataset, save_dataset, write_container, ContainerData};
use crate::net::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, SegmentationNet};
use crate::phantom::build_volumes;
use crate::ssl::{run_mode_with, RunOutcome, SharedNets, TrainingMode};

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub summary: Summary,
    pub wall_seconds: f64,
    /// Cells trained in this invocation, as opposed to reused from disk.
    pub cells_run: usize,
}

pub fn cell_name(mode: TrainingMode, seed: u64) -> String {
    format!("{mode}-seed{seed}")
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Refuses to reuse a directory produced by a different configuration.
fn claim_output_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let digest_path = dir.join("config.digest");
    if digest_path.exists() {
        let existing = fs::read_to_string(&digest_path).map_err(|e| Error::io(&digest_path, e))?;
        if existing.trim() != cfg.digest() {
            return Err(Error::Config(format!(
                "{} holds results of configuration {}, not {}",
                dir.display(),
                existing.trim(),
                cfg.digest()
            )));
        }
    }
    create_dir(dir)?;
    write_file(&dir.join("config.toml"), cfg.to_toml()?)?;
    write_file(&digest_path, format!("{}\n", cfg.digest()))
}

/// Loads the saved dataset of `dir`, generating and saving it first if absent.
pub fn prepare_dataset(dir: &Path, cfg: &RunConfig) -> Result<DatasetSplit> {
    let data_dir = dir.join("dataset");
    if !data_dir.join("phantom.json").exists() {
        let spec = cfg.phantom_spec();
        let (train, test) = build_volumes(&spec, cfg.train_volumes, cfg.test_volumes, spec.seed)?;
        let tmp = dir.join(".dataset.tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        save_dataset(&tmp, &spec, &train, &test)?;
        fs::rename(&tmp, &data_dir).map_err(|e| Error::io(&data_dir, e))?;
    }
    load_dataset(&data_dir)
}

pub fn checkpoint_of(net: &SegmentationNet, epochs: usize, weights: &[f64], gamma: Option<f64>, lineage: &str, digest: &str) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            network: net.config().clone(),
            epoch: epochs,
            optimizer_state: false,
            class_weights: weights.to_vec(),
            gamma,
            lineage: lineage.to_string(),
            config_digest: digest.to_string(),
        },
        net: net.clone(),
        velocity: None,
    }
}

/// Stacks label maps into a (n, H, W) array.
pub fn stack_labels(maps: &[LabelMap]) -> Result<Array3<u8>> {
    let views: Vec<_> = maps.iter().map(|m| m.codes().view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::InvalidValue(e.to_string()))
}

fn loss_csv(losses: &[f64], samples: usize, digest: &str) -> String {
    let mut s = String::from("epoch,loss,samples,config_digest\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l:?},{samples},{digest}\n", i + 1));
    }
    s
}

fn write_cell(dir: &Path, outcome: &RunOutcome, cell: &CellResult, weights: &[f64], dataset: &DatasetSplit) -> Result<()> {
    let name = cell_name(cell.mode, cell.seed);
    let tmp = dir.join(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    create_dir(&tmp)?;
    let m = &outcome.manifest;
    write_file(&tmp.join("manifest.json"), serde_json::to_vec_pretty(m)?)?;
    let report = serde_json::json!({ "config_digest": m.config_digest, "report": outcome.report });
    write_file(&tmp.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    write_file(
        &tmp.join("loss.csv"),
        loss_csv(&m.epoch_losses, m.counters.samples_per_epoch, &m.config_digest),
    )?;
    save_checkpoint(
        &tmp.join("model.ckpt"),
        &checkpoint_of(&outcome.net, m.epochs, weights, m.gamma, &m.lineage, &m.config_digest),
    )?;
    let spacing = dataset.test.first().map(|a| a.slice.spacing()).unwrap_or(PixelSpacing::isotropic(1.0));
    write_container(
        &tmp.join("predictions.adsl"),
        &ContainerData::U8(stack_labels(&outcome.predictions)?.into_dyn()),
        spacing,
    )?;
    // written last: its presence marks the cell complete
    write_file(&tmp.join("result.json"), serde_json::to_vec_pretty(cell)?)?;
    let final_dir = dir.join(&name);
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir).map_err(|e| Error::io(&final_dir, e))?;
    }
    fs::rename(&tmp, &final_dir).map_err(|e| Error::io(&final_dir, e))
}

fn read_cell(dir: &Path, mode: TrainingMode, seed: u64, digest: &str) -> Result<Option<CellResult>> {
    let path = dir.join(cell_name(mode, seed)).join("result.json");
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let cell: CellResult = serde_json::from_slice(&bytes)?;
    if cell.config_digest != digest {
        return Err(Error::Config(format!("{} has digest {}", path.display(), cell.config_digest)));
    }
    Ok(Some(cell))
}

fn save_shared(dir: &Path, seed: u64, shared: &SharedNets, epochs: usize, digest: &str) -> Result<()> {
    let sdir = dir.join("shared").join(format!("seed{seed}"));
    create_dir(&sdir)?;
    for (name, out) in [("lesion.ckpt", &shared.step1), ("liver.ckpt", &shared.liver)] {
        let ck = checkpoint_of(&out.net, epochs, out.class_weights.as_slice(), None, &out.lineage, digest);
        save_checkpoint(&sdir.join(name), &ck)?;
    }
    Ok(())
}

/// Runs every configured (mode, seed) cell under `cfg.output_dir`. Cells
/// already completed under the same configuration digest are reused.
pub fn run_experiment(cfg: &RunConfig, verbose: bool) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let dir = cfg.output_dir.clone();
    let digest = cfg.digest();
    claim_output_dir(&dir, cfg)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.effective_workers())
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;

    let dataset = pool.install(|| prepare_dataset(&dir, cfg))?;
    let cells_dir = dir.join("cells");
    create_dir(&cells_dir)?;

    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let mut modes = cfg.modes.clone();
    modes.sort_unstable();
    modes.dedup();

    let mut done = Vec::new();
    let mut todo = Vec::new();
    for &seed in &seeds {
        for &mode in &modes {
            match read_cell(&cells_dir, mode, seed, &digest)? {
                Some(c) => done.push(c),
                None => todo.push((mode, seed)),
            }
        }
    }
    let todo_seeds: Vec<u64> = seeds.iter().copied().filter(|s| todo.iter().any(|t| t.1 == *s)).collect();
    if verbose {
        eprintln!(
            "{} cells to run, {} reused, {} worker(s)",
            todo.len(),
            done.len(),
            pool.current_num_threads()
        );
    }

    let shared: Vec<(u64, SharedNets)> = pool.install(|| {
        todo_seeds
            .par_iter()
            .map(|&seed| {
                let t = Instant::now();
                let nets = SharedNets::train(&dataset, &cfg.ssl_config(seed))?;
                save_shared(&dir, seed, &nets, cfg.epochs, &digest)?;
                if verbose {
                    eprintln!("seed {seed}: shared networks in {:.0}s", t.elapsed().as_secs_f64());
                }
                Ok((seed, nets))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let fresh: Vec<CellResult> = pool.install(|| {
        todo.par_iter()
            .map(|&(mode, seed)| {
                let t = Instant::now();
                let nets = &shared.iter().find(|(s, _)| *s == seed).expect("shared nets trained").1;
                let mut outcome = run_mode_with(mode, &dataset, &cfg.ssl_config(seed), nets)?;
                outcome.manifest.config_digest = digest.clone();
                let cell = CellResult::from_report(mode, seed, &outcome.report, &digest);
                write_cell(&cells_dir, &outcome, &cell, nets.step1.class_weights.as_slice(), &dataset)?;
                if verbose {
                    eprintln!(
                        "{}: dice2 {:.3} acc {:.3} in {:.0}s",
                        cell_name(mode, seed),
                        cell.dice2,
                        cell.acc,
                        t.elapsed().as_secs_f64()
                    );
                }
                Ok(cell)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let cells_run = fresh.len();
    done.extend(fresh);
    let summary = summarize(&done)?;
    write_summary(&dir, &summary)?;
    Ok(ExperimentOutput {
        dir,
        summary,
        wall_seconds: start.elapsed().as_secs_f64(),
        cells_run,
    })
}

pub fn write_summary(dir: &Path, summary: &Summary) -> Result<()> {
    write_file(&dir.join("summary.md"), summary.to_markdown())?;
    write_file(&dir.join("summary.csv"), summary.to_csv())?;
    write_file(&dir.join("summary.json"), serde_json::to_vec_pretty(summary)?)
}

pub fn read_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join("summary.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Trains the shared networks and one mode for a single seed, writing the
/// cell and shared checkpoints under `dir`.
pub fn train_single(cfg: &RunConfig, dataset: &DatasetSplit, mode: TrainingMode, seed: u64, dir: &Path) -> Result<CellResult> {
    cfg.validate()?;
    let digest = cfg.digest();
    create_dir(dir)?;
    let ssl = cfg.ssl_config(seed);
    let nets = SharedNets::train(dataset, &ssl)?;
    save_shared(dir, seed, &nets, cfg.epochs, &digest)?;
    let mut outcome = run_mode_with(mode, dataset, &ssl, &nets)?;
    outcome.manifest.config_digest = digest.clone();
    let cell = CellResult::from_report(mode, seed, &outcome.report, &digest);
    write_cell(dir, &outcome, &cell, nets.step1.class_weights.as_slice(), dataset)?;
    Ok(cell)
}

/// Loads a checkpoint and checks it has `num_classes` output channels.
pub fn load_network(path: &Path, num_classes: usize) -> Result<Checkpoint> {
    let ck: Checkpoint = load_checkpoint(path)?;
    let found = ck.net.config().num_classes;
    if found != num_classes {
        return Err(Error::Config(format!(
            "{} has {found} output classes, expected {num_classes}",
            path.display()
        )));
    }
    Ok(ck)
}
