use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use anatomical_aug::domain::{image_level_class, ImageClass, LabelMap};
use anatomical_aug::error::{Error, Result};
use anatomical_aug::harness::plot::{bar_chart, overlay_panel, save_png, PanelRow};
use anatomical_aug::harness::runner::{cell_name, load_network, prepare_dataset, read_summary, stack_labels, train_single};
use anatomical_aug::harness::{run_experiment, RunConfig};
use anatomical_aug::io::{load_dataset, read_container, save_dataset, write_container, ContainerData};
use anatomical_aug::metrics::evaluate_with;
use anatomical_aug::phantom::build_volumes;
use anatomical_aug::ssl::{pseudo_label, segment, TrainingMode};

#[derive(Parser)]
#[command(name = "anatomical-aug", version, about = "Liver lesion segmentation with pseudo-labeled adjacent slices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured data seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one mode for one seed on a saved dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "baseline")]
        mode: TrainingMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label the adjacent slices of a dataset with trained networks.
    PseudoLabel {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lesion_net: PathBuf,
        #[arg(long)]
        liver_net: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a lesion network on the test split of a dataset.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lesion_net: PathBuf,
        #[arg(long)]
        liver_net: PathBuf,
    },
    /// Run the full (mode, seed) grid of a configuration.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Draw metric bars and overlay panels for an experiment directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 6)]
        rows: usize,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn generate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.data_seed = s;
    }
    let spec = cfg.phantom_spec();
    let (train, test) = build_volumes(&spec, cfg.train_volumes, cfg.test_volumes, spec.seed)?;
    save_dataset(out, &spec, &train, &test)?;
    println!("wrote {} train and {} test volumes to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, mode: TrainingMode, seed: u64, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let dataset = load_dataset(data)?;
    let cell = train_single(&cfg, &dataset, mode, seed, out)?;
    println!("{}", serde_json::to_string_pretty(&cell)?);
    Ok(())
}

fn pseudo(config: Option<&Path>, data: &Path, lesion: &Path, liver: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let dataset = load_dataset(data)?;
    let net = load_network(lesion, 6)?.net;
    let liver_net = load_network(liver, 2)?.net;
    let adj: Vec<_> = dataset
        .train
        .iter()
        .flat_map(|p| {
            let center = (p.labeled.slice.volume_id().to_string(), p.labeled.slice.z_index());
            p.adjacent.iter().map(move |s| (s, center.clone()))
        })
        .collect();
    let labeled = pseudo_label(&net, &liver_net, &adj, cfg.gamma, cfg.area_filter_pseudo)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let maps: Vec<LabelMap> = labeled.iter().map(|p| p.targets.argmax()).collect();
    if let Some(first) = labeled.first() {
        write_container(
            &out.join("pseudo_labels.adsl"),
            &ContainerData::U8(stack_labels(&maps)?.into_dyn()),
            first.slice.spacing(),
        )?;
    }
    let mut index = String::new();
    for p in &labeled {
        let rec = serde_json::json!({
            "volume_id": p.slice.volume_id(),
            "z_index": p.slice.z_index(),
            "source_volume": p.source_center.0,
            "source_z": p.source_center.1,
            "gamma": p.targets.gamma(),
        });
        index.push_str(&rec.to_string());
        index.push('\n');
    }
    write_text(&out.join("pseudo_labels.jsonl"), &index)?;
    println!("pseudo-labeled {} slices into {}", labeled.len(), out.display());
    Ok(())
}

fn evaluate(config: Option<&Path>, data: &Path, lesion: &Path, liver: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let dataset = load_dataset(data)?;
    let net = load_network(lesion, 6)?.net;
    let liver_net = load_network(liver, 2)?.net;
    let slices: Vec<_> = dataset.test.iter().map(|a| &a.slice).collect();
    let preds = segment(&net, Some(&liver_net), &slices, cfg.liver_refine_test, cfg.area_filter_test)?;
    let mut report = evaluate_with(&preds, &dataset.test, cfg.ssl_config(0).eval)?;
    report.per_image.clear();
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn experiment(config: &Path, out: Option<PathBuf>, workers: Option<usize>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    let res = run_experiment(&cfg, true)?;
    print!("{}", res.summary.to_markdown());
    println!(
        "{} cells run in {:.1} min, results in {}",
        res.cells_run,
        res.wall_seconds / 60.0,
        res.dir.display()
    );
    Ok(())
}

fn plot(run: &Path, seed: Option<u64>, rows: usize) -> Result<()> {
    let summary = read_summary(run)?;
    save_png(&bar_chart(&summary), &run.join("metrics.png"))?;
    let cfg = RunConfig::load(&run.join("config.toml"))?;
    let dataset = prepare_dataset(run, &cfg)?;
    let seed = seed.unwrap_or_else(|| summary.cells.iter().map(|c| c.seed).min().unwrap_or(0));
    let lesion_idx: Vec<usize> = (0..dataset.test.len())
        .filter(|&i| image_level_class(&dataset.test[i].labels) != ImageClass::Healthy)
        .take(rows)
        .collect();
    for m in &summary.modes {
        let path = run.join("cells").join(cell_name(m.mode, seed)).join("predictions.adsl");
        let (ContainerData::U8(stack), _) = read_container(&path)? else {
            return Err(Error::format(path, "expected u8 label stack"));
        };
        let preds: Vec<LabelMap> = lesion_idx
            .iter()
            .map(|&i| {
                let codes = stack.index_axis(ndarray::Axis(0), i).to_owned();
                LabelMap::new(codes.into_dimensionality::<ndarray::Ix2>().map_err(|e| Error::InvalidValue(e.to_string()))?)
            })
            .collect::<Result<_>>()?;
        let panel_rows: Vec<PanelRow> = lesion_idx
            .iter()
            .zip(&preds)
            .map(|(&i, pred)| {
                let a = &dataset.test[i];
                PanelRow {
                    slice: &a.slice,
                    ground_truth: &a.labels,
                    prediction: pred,
                    caption: format!("{} z{} {}", a.slice.volume_id(), a.slice.z_index(), image_level_class(&a.labels).name()),
                }
            })
            .collect();
        let out = run.join(format!("overlay_{}_seed{seed}.png", m.mode));
        save_png(&overlay_panel(&panel_rows, 3)?, &out)?;
    }
    println!("figures written to {}", run.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateData { config, seed, out } => generate(config.as_deref(), seed, &out),
        Command::Train {
            config,
            data,
            mode,
            seed,
            out,
        } => train(config.as_deref(), &data, mode, seed, &out),
        Command::PseudoLabel {
            config,
            data,
            lesion_net,
            liver_net,
            out,
        } => pseudo(config.as_deref(), &data, &lesion_net, &liver_net, &out),
        Command::Evaluate {
            config,
            data,
            lesion_net,
            liver_net,
        } => evaluate(config.as_deref(), &data, &lesion_net, &liver_net),
        Command::Experiment { config, out, workers } => experiment(&config, out, workers),
        Command::Plot { run, seed, rows } => plot(&run, seed, rows),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            let _ = writeln!(std::io::stderr(), "error: {msg}");
            ExitCode::FAILURE
        }
    }
}
