//! Runs a miniature (mode, seed) grid through the experiment harness and
//! draws its figures.

use anatomical_aug::harness::plot::{bar_chart, save_png};
use anatomical_aug::harness::{run_experiment, RunConfig};
use anatomical_aug::ssl::TrainingMode;

fn main() -> anatomical_aug::error::Result<()> {
    let dir = std::env::temp_dir().join("anatomical_aug_grid");
    let _ = std::fs::remove_dir_all(&dir);
    let cfg = RunConfig {
        volume_nx: 64,
        volume_ny: 64,
        volume_nz: 12,
        train_volumes: 6,
        test_volumes: 6,
        width_factor: 16,
        dropout_rate: 0.1,
        learning_rate: 0.1,
        batch_size: 4,
        epochs: 40,
        translation_min_px: -3.0,
        translation_max_px: 3.0,
        modes: vec![TrainingMode::Baseline, TrainingMode::Extended, TrainingMode::Anatomical],
        seeds: vec![0, 1],
        output_dir: dir.clone(),
        ..RunConfig::default()
    };
    println!("{}", cfg.to_toml()?);
    let out = run_experiment(&cfg, true)?;
    println!("{}", out.summary.to_markdown());
    save_png(&bar_chart(&out.summary), &dir.join("metrics.png"))?;
    println!("artifacts in {} ({:.0}s)", dir.display(), out.wall_seconds);
    Ok(())
}
