//! Aggregation across run directories and SVG plots.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::run::{FinetuneRow, LossRow, Metrics};
use crate::error::{Error, Result};

/// One line of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub config_hash: String,
    pub noise_kind: String,
    pub noise_rate: f64,
    pub use_unlabeled: bool,
    pub seeds: usize,
    pub mean_overall_acc: f64,
    pub std_overall_acc: f64,
    pub mean_purity_clean_delay: Option<f64>,
    pub mean_purity_clean_replay: Option<f64>,
    pub mean_forgetting: Option<f64>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut reader = csv::Reader::from_path(path).map_err(err)?;
    reader.deserialize().map(|r| r.map_err(err)).collect()
}

pub fn summarize(dir: &Path) -> Result<RunSummary> {
    let path = dir.join("metrics.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let metrics: Metrics = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    let cfg = RunConfig::load(&dir.join("config.resolved"))?;
    let accs: Vec<f64> = metrics.seeds.iter().map(|s| s.overall_acc).collect();
    let mean_acc = mean(&accs).unwrap_or(f64::NAN);
    let var = accs.iter().map(|a| (a - mean_acc).powi(2)).sum::<f64>() / accs.len().max(1) as f64;
    let collect = |f: &dyn Fn(&super::run::SeedMetrics) -> Option<f64>| {
        mean(&metrics.seeds.iter().filter_map(f).collect::<Vec<_>>())
    };
    Ok(RunSummary {
        run: dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
        config_hash: metrics.config_hash.clone(),
        noise_kind: cfg.noise.kind.to_string(),
        noise_rate: cfg.noise.rate,
        use_unlabeled: cfg.finetune.use_unlabeled,
        seeds: metrics.seeds.len(),
        mean_overall_acc: metrics.mean_overall_acc,
        std_overall_acc: var.sqrt(),
        mean_purity_clean_delay: collect(&|s| s.purity_clean_delay),
        mean_purity_clean_replay: collect(&|s| s.purity_clean_replay),
        mean_forgetting: collect(&|s| mean(&s.forgetting)),
    })
}

/// Writes `summary.csv` and `summary.json` into `out`.
pub fn write_summary(out: &Path, summaries: &[RunSummary]) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("summary.csv");
    let err = |e: csv::Error| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(&path).map_err(err)?;
    for s in summaries {
        w.serialize(s).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = out.join("summary.json");
    let json = serde_json::to_string_pretty(summaries).expect("summary serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: format!("plotting failed: {e}"),
    }
}

/// Test accuracy after each fine-tune event, one line per seed.
pub fn plot_accuracy(run_dir: &Path, out: &Path) -> Result<()> {
    let rows: Vec<FinetuneRow> = read_csv(&run_dir.join("finetune_log.csv"))?;
    let mut per_seed: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &rows {
        per_seed
            .entry(r.seed)
            .or_default()
            .push((r.event as f64, r.overall_acc));
    }
    let max_event = rows.iter().map(|r| r.event).max().unwrap_or(0) as f64 + 1.0;
    let root = SVGBackend::new(out, (720, 440)).into_drawing_area();
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("Test accuracy over the stream", ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(0.0..max_event, 0.0..100.0)?;
        chart
            .configure_mesh()
            .x_desc("fine-tune event")
            .y_desc("accuracy (%)")
            .draw()?;
        for (i, (seed, points)) in per_seed.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))?
                .label(format!("seed {seed}"))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| plot_err(out, e))
}

/// Histogram of the separation losses of one cycle, clean and noisy stacked.
pub fn plot_loss_histogram(losses: &[LossRow], seed: u64, cycle: usize, out: &Path) -> Result<()> {
    const BINS: usize = 40;
    let rows: Vec<&LossRow> = losses
        .iter()
        .filter(|r| r.seed == seed && r.cycle == cycle)
        .collect();
    if rows.is_empty() {
        return Err(Error::Input(format!("no losses for seed {seed} cycle {cycle}")));
    }
    let hi = rows.iter().map(|r| r.loss).fold(0.0f64, f64::max).max(1e-9);
    let width = hi / BINS as f64;
    let mut counts = [[0usize; BINS]; 2];
    for r in &rows {
        let bin = ((r.loss / width) as usize).min(BINS - 1);
        counts[usize::from(r.side != "clean")][bin] += 1;
    }
    let top = (0..BINS).map(|b| counts[0][b] + counts[1][b]).max().unwrap_or(1) as f64;
    let root = SVGBackend::new(out, (720, 440)).into_drawing_area();
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(
                format!("Separation losses, seed {seed}, cycle {cycle}"),
                ("sans-serif", 18),
            )
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(0.0..hi, 0.0..top * 1.05)?;
        chart.configure_mesh().x_desc("masked MSE").y_desc("count").draw()?;
        for (side, color) in [(0usize, BLUE), (1, RED)] {
            let bars = (0..BINS).map(|b| {
                let base = if side == 0 { 0 } else { counts[0][b] };
                let x0 = b as f64 * width;
                Rectangle::new(
                    [(x0, base as f64), (x0 + width, (base + counts[side][b]) as f64)],
                    color.mix(0.6).filled(),
                )
            });
            chart
                .draw_series(bars)?
                .label(if side == 0 { "clean" } else { "noisy" })
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| plot_err(out, e))
}

/// Accuracy curve plus loss histograms of the first and last cycle of the
/// first seed. Returns the files written.
pub fn plot_run(run_dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let name = run_dir
        .file_name()
        .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned());
    let mut written = Vec::new();
    let acc = out.join(format!("{name}_accuracy.svg"));
    plot_accuracy(run_dir, &acc)?;
    written.push(acc);
    let losses: Vec<LossRow> = read_csv(&run_dir.join("losses.csv"))?;
    if let Some(seed) = losses.first().map(|r| r.seed) {
        let last = losses
            .iter()
            .filter(|r| r.seed == seed)
            .map(|r| r.cycle)
            .max()
            .unwrap_or(0);
        let mut cycles = vec![0, last];
        cycles.dedup();
        for cycle in cycles {
            let path = out.join(format!("{name}_losses_seed{seed}_cycle{cycle}.svg"));
            plot_loss_histogram(&losses, seed, cycle, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}
