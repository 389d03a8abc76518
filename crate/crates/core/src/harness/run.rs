//! The streaming loop, per-seed results and the run directory layout.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DatasetKind, RunConfig};
use super::metrics::{forgetting, purity, Evaluation, TestSet};
use crate::buffers::{BufferSet, FinetuneSets, Scored};
use crate::data::{self, Sample, TaskSchedule, TaskStream};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::rng;
use crate::separation::separate;
use crate::ssl::{finetune, FinetuneStats};

/// Train and test samples with true labels only.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub classes: usize,
    pub dim: usize,
}

impl Dataset {
    /// Loads MNIST from `data.mnist_dir`, or generates blobs from `seed`.
    pub fn load(cfg: &RunConfig, seed: u64) -> Result<Self> {
        match cfg.data.dataset {
            DatasetKind::Mnist => {
                let dir = &cfg.data.mnist_dir;
                let train = data::load_mnist_idx(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                )?;
                let test = data::load_mnist_idx(
                    &dir.join("t10k-images-idx3-ubyte"),
                    &dir.join("t10k-labels-idx1-ubyte"),
                )?;
                Ok(Dataset {
                    train,
                    test,
                    classes: 10,
                    dim: 784,
                })
            }
            DatasetKind::Blobs => {
                let d = &cfg.data;
                let centers = data::axis_centers(d.blobs_classes, d.blobs_dim, d.blobs_spread)?;
                let per_class = d.blobs_train_per_class + d.blobs_test_per_class;
                let all = data::make_blobs(per_class, &centers, d.blobs_sigma, seed)?;
                let (mut train, mut test) = (Vec::new(), Vec::new());
                for (i, s) in all.into_iter().enumerate() {
                    if i % per_class < d.blobs_train_per_class {
                        train.push(s);
                    } else {
                        test.push(s);
                    }
                }
                Ok(Dataset {
                    train,
                    test,
                    classes: d.blobs_classes,
                    dim: d.blobs_dim,
                })
            }
        }
    }

    /// MNIST is shared by every seed; blobs are regenerated per seed.
    pub fn is_seed_specific(cfg: &RunConfig) -> bool {
        cfg.data.dataset == DatasetKind::Blobs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationRow {
    pub seed: u64,
    pub cycle: usize,
    pub threshold: f64,
    pub clean: usize,
    pub noisy: usize,
    pub clean_purity: Option<f64>,
    pub warmup_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRow {
    pub seed: u64,
    pub event: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub epochs: usize,
    pub loss_x: f64,
    pub loss_u: f64,
    pub loss_reg: f64,
    pub acceptance_rate: Option<f64>,
    pub overall_acc: f64,
}

/// Everything one seed produced.
#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub schedule: TaskSchedule,
    pub stream_len: usize,
    pub final_eval: Evaluation,
    /// Per-task accuracy after each evaluated fine-tune, final row last.
    pub history: Vec<Vec<f64>>,
    pub purity_clean_delay: Option<f64>,
    pub purity_clean_replay: Option<f64>,
    pub separation_log: Vec<SeparationRow>,
    pub finetune_log: Vec<FinetuneRow>,
    /// Masked-MSE losses per cycle: `(cycle, loss, went_clean)`.
    pub losses: Vec<(usize, f64, bool)>,
    /// The stream model at end of stream.
    pub theta: Mlp,
    /// The last fine-tuned model, if any fine-tune ran.
    pub psi: Option<Mlp>,
    /// `S` and `U` of the final fine-tune.
    pub final_sets: FinetuneSets,
    /// Index of the final fine-tune event, which seeds its RNG stream.
    pub final_event: usize,
}

impl SeedOutcome {
    pub fn metrics(&self) -> SeedMetrics {
        SeedMetrics {
            seed: self.seed,
            overall_acc: self.final_eval.overall,
            purity_clean_delay: self.purity_clean_delay,
            purity_clean_replay: self.purity_clean_replay,
            per_task_acc: self.final_eval.per_task.clone(),
            forgetting: forgetting(&self.history),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub overall_acc: f64,
    pub purity_clean_delay: Option<f64>,
    pub purity_clean_replay: Option<f64>,
    pub per_task_acc: Vec<f64>,
    pub forgetting: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub config_hash: String,
    pub seeds: Vec<SeedMetrics>,
    pub mean_overall_acc: f64,
}

impl Metrics {
    pub fn from_seeds(config_hash: String, seeds: Vec<SeedMetrics>) -> Self {
        let mean_overall_acc =
            seeds.iter().map(|s| s.overall_acc).sum::<f64>() / seeds.len().max(1) as f64;
        Metrics {
            config_hash,
            seeds,
            mean_overall_acc,
        }
    }
}

/// One fine-tune from `theta` on `sets`, honouring `finetune.use_unlabeled`.
pub fn finetune_event(
    cfg: &RunConfig,
    seed: u64,
    event: usize,
    theta: &Mlp,
    sets: &FinetuneSets,
) -> Result<Option<(Mlp, FinetuneStats)>> {
    let unlabeled = if cfg.finetune.use_unlabeled {
        sets.unlabeled.as_slice()
    } else {
        &[]
    };
    finetune(
        theta,
        &sets.labeled,
        unlabeled,
        &cfg.ssl_config(),
        &cfg.augment_policy(),
        &mut rng::derive(seed, "finetune", event as u64),
    )
}

struct SeedRun<'a> {
    cfg: &'a RunConfig,
    seed: u64,
    config_hash: &'a str,
    test: TestSet,
    theta: Mlp,
    buffers: BufferSet,
    cycle: usize,
    event: usize,
    clean_total: usize,
    clean_correct: usize,
    psi: Option<Mlp>,
    history: Vec<Vec<f64>>,
    separation_log: Vec<SeparationRow>,
    finetune_log: Vec<FinetuneRow>,
    losses: Vec<(usize, f64, bool)>,
}

impl SeedRun<'_> {
    fn wrap(&self, e: Error) -> Error {
        match e {
            e @ Error::Run { .. } => e,
            e => Error::Run {
                cycle: self.cycle,
                config_hash: self.config_hash.to_string(),
                source: Box::new(e),
            },
        }
    }

    fn record_finetune(
        &mut self,
        event: usize,
        sets: &FinetuneSets,
        result: Option<(Mlp, FinetuneStats)>,
    ) -> Result<()> {
        let Some((psi, stats)) = result else {
            return Ok(());
        };
        let eval = self.test.evaluate(&psi)?;
        log::debug!(
            "seed {} event {event}: |S|={} |U|={} acc={:.2}",
            self.seed,
            sets.labeled.len(),
            sets.unlabeled.len(),
            eval.overall
        );
        self.finetune_log.push(FinetuneRow {
            seed: self.seed,
            event,
            labeled: stats.labeled,
            unlabeled: stats.unlabeled,
            epochs: stats.epochs,
            loss_x: stats.supervised_loss,
            loss_u: stats.unsupervised_loss,
            loss_reg: stats.reg_loss,
            acceptance_rate: stats.acceptance_rate,
            overall_acc: eval.overall,
        });
        self.history.push(eval.per_task);
        self.psi = Some(psi);
        Ok(())
    }

    fn cycle(&mut self) -> Result<()> {
        let delay = self.buffers.delay.reset();
        let extra: Vec<Sample> = if self.cfg.warmup.uses_replay {
            self.buffers
                .clean_replay
                .entries()
                .map(|e| e.sample.clone())
                .collect()
        } else {
            Vec::new()
        };
        let (outcome, warm_loss) = separate(
            &mut self.theta,
            delay,
            &extra,
            &self.cfg.warmup_schedule(),
            &self.cfg.scoring(),
            &self.cfg.augment_policy(),
            &mut rng::derive(self.seed, "warmup", self.cycle as u64),
        )?;
        let clean_purity = purity(outcome.clean.iter().map(|e: &Scored| &e.sample));
        self.clean_total += outcome.clean.len();
        self.clean_correct += outcome.clean.iter().filter(|e| !e.sample.is_corrupted()).count();
        self.separation_log.push(SeparationRow {
            seed: self.seed,
            cycle: self.cycle,
            threshold: outcome.threshold,
            clean: outcome.clean.len(),
            noisy: outcome.noisy.len(),
            clean_purity,
            warmup_loss: warm_loss,
        });
        log::debug!(
            "seed {} cycle {}: threshold {:.4}, {} clean ({:?}% pure), {} noisy",
            self.seed,
            self.cycle,
            outcome.threshold,
            outcome.clean.len(),
            clean_purity,
            outcome.noisy.len()
        );
        for (side, entries) in [(true, &outcome.clean), (false, &outcome.noisy)] {
            self.losses
                .extend(entries.iter().map(|e| (self.cycle, e.loss(), side)));
        }

        let every_event = self.cfg.finetune.every_event;
        let mut events = Vec::new();
        let mut next_event = self.event;
        let (cfg, seed, theta) = (self.cfg, self.seed, &self.theta);
        self.buffers.absorb(outcome.clean, outcome.noisy, |sets| {
            let event = next_event;
            next_event += 1;
            if every_event {
                let result = finetune_event(cfg, seed, event, theta, &sets)?;
                events.push((event, sets, result));
            }
            Ok(())
        })?;
        self.event = next_event;
        for (event, sets, result) in events {
            self.record_finetune(event, &sets, result)?;
        }
        self.cycle += 1;
        Ok(())
    }
}

/// Runs the whole stream for one seed.
pub fn run_seed(cfg: &RunConfig, seed: u64, dataset: &Dataset) -> Result<SeedOutcome> {
    cfg.validate()?;
    let config_hash = cfg.hash();
    let schedule = data::build_task_schedule(
        dataset.classes,
        cfg.data.tasks,
        cfg.data.classes_per_task,
        seed,
    )?;
    let noisy = data::inject_noise(dataset.train.clone(), &cfg.noise_spec(seed), dataset.classes)?;
    let stream = TaskStream::new(noisy, &schedule, cfg.data.per_task_cap, seed);
    let stream_len = stream.len();
    let theta = Mlp::new(
        dataset.dim,
        cfg.model.hidden,
        dataset.classes,
        &mut rng::derive(seed, "init", 0),
    )?;
    let mut run = SeedRun {
        cfg,
        seed,
        config_hash: &config_hash,
        test: TestSet::new(&dataset.test, schedule.tasks())?,
        theta,
        buffers: BufferSet::new(&cfg.buffer_config())?,
        cycle: 0,
        event: 0,
        clean_total: 0,
        clean_correct: 0,
        psi: None,
        history: Vec::new(),
        separation_log: Vec::new(),
        finetune_log: Vec::new(),
        losses: Vec::new(),
    };

    for sample in stream {
        run.buffers.delay.push(sample);
        if run.buffers.delay.is_full() {
            run.cycle().map_err(|e| run.wrap(e))?;
        }
    }
    if !run.buffers.delay.is_empty() {
        run.cycle().map_err(|e| run.wrap(e))?;
    }

    let final_sets = run.buffers.finetune_sets();
    let final_event = run.event;
    let result = finetune_event(cfg, seed, final_event, &run.theta, &final_sets)
        .map_err(|e| run.wrap(e))?;
    let has_final = result.is_some();
    run.record_finetune(final_event, &final_sets, result)?;
    let final_eval = if has_final {
        Evaluation {
            overall: run.finetune_log.last().expect("logged").overall_acc,
            per_task: run.history.last().expect("recorded").clone(),
        }
    } else {
        log::warn!("seed {seed}: no labeled samples for the final fine-tune; evaluating the stream model");
        let eval = run.test.evaluate(&run.theta)?;
        run.history.push(eval.per_task.clone());
        eval
    };

    Ok(SeedOutcome {
        seed,
        schedule,
        stream_len,
        final_eval,
        history: run.history,
        purity_clean_delay: (run.clean_total > 0)
            .then(|| 100.0 * run.clean_correct as f64 / run.clean_total as f64),
        purity_clean_replay: purity(run.buffers.clean_replay.entries().map(|e| &e.sample)),
        separation_log: run.separation_log,
        finetune_log: run.finetune_log,
        losses: run.losses,
        theta: run.theta,
        psi: run.psi,
        final_sets,
        final_event,
    })
}

/// All seeds of a run, in configuration order. Seeds run in parallel.
pub fn run_experiment(cfg: &RunConfig) -> Result<Vec<SeedOutcome>> {
    cfg.validate()?;
    let shared = if Dataset::is_seed_specific(cfg) {
        None
    } else {
        Some(Dataset::load(cfg, 0)?)
    };
    let work = |seed: u64| -> Result<SeedOutcome> {
        let started = Instant::now();
        let outcome = match &shared {
            Some(ds) => run_seed(cfg, seed, ds),
            None => run_seed(cfg, seed, &Dataset::load(cfg, seed)?),
        }?;
        log::info!(
            "seed {seed}: overall {:.2}% in {:.1}s",
            outcome.final_eval.overall,
            started.elapsed().as_secs_f64()
        );
        Ok(outcome)
    };
    let run_all = || cfg.run.seeds.par_iter().map(|&s| work(s)).collect::<Result<Vec<_>>>();
    if cfg.run.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run_all)
    } else {
        run_all()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub seed: u64,
    pub cycle: usize,
    pub loss: f64,
    pub side: String,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut out = csv::Writer::from_path(path).map_err(err)?;
    for row in rows {
        out.serialize(row).map_err(err)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes `config.resolved`, `metrics.json`, `timing.json` and the CSV logs.
pub fn write_run_dir(
    dir: &Path,
    cfg: &RunConfig,
    outcomes: &[SeedOutcome],
    elapsed_seconds: f64,
) -> Result<Metrics> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let io = |path: PathBuf| move |e: std::io::Error| Error::io(&path, e);

    let path = dir.join("config.resolved");
    fs::write(&path, cfg.resolved()).map_err(io(path.clone()))?;

    let metrics = Metrics::from_seeds(cfg.hash(), outcomes.iter().map(SeedOutcome::metrics).collect());
    let path = dir.join("metrics.json");
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    fs::write(&path, json + "\n").map_err(io(path.clone()))?;

    let path = dir.join("timing.json");
    let timing = Timing {
        total_seconds: elapsed_seconds,
    };
    fs::write(&path, serde_json::to_string_pretty(&timing).expect("timing serialize") + "\n")
        .map_err(io(path.clone()))?;

    write_csv(
        &dir.join("separation_log.csv"),
        outcomes.iter().flat_map(|o| &o.separation_log),
    )?;
    write_csv(
        &dir.join("finetune_log.csv"),
        outcomes.iter().flat_map(|o| &o.finetune_log),
    )?;
    write_csv(
        &dir.join("losses.csv"),
        outcomes.iter().flat_map(|o| {
            o.losses.iter().map(|&(cycle, loss, clean)| LossRow {
                seed: o.seed,
                cycle,
                loss,
                side: if clean { "clean" } else { "noisy" }.to_string(),
            })
        }),
    )?;

    Ok(metrics)
}
