//! Run configuration: a sectioned `key = value` file (TOML syntax).
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown sections or keys are rejected with an error naming them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugmentPolicy, ImageAugment, VectorAugment};
use crate::buffers::{BufferConfig, ReplayMode};
use crate::data::{NoiseKind, NoiseSpec};
use crate::error::{Error, Result};
use crate::separation::{ScoringOptions, WarmupSchedule};
use crate::ssl::SslConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Blobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dataset: DatasetKind,
    /// Directory holding the four uncompressed IDX files.
    pub mnist_dir: PathBuf,
    pub tasks: usize,
    pub classes_per_task: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_task_cap: Option<usize>,
    pub blobs_classes: usize,
    pub blobs_dim: usize,
    pub blobs_train_per_class: usize,
    pub blobs_test_per_class: usize,
    pub blobs_spread: f64,
    pub blobs_sigma: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dataset: DatasetKind::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            tasks: 5,
            classes_per_task: 2,
            per_task_cap: None,
            blobs_classes: 2,
            blobs_dim: 2,
            blobs_train_per_class: 1000,
            blobs_test_per_class: 500,
            blobs_spread: 4.0,
            blobs_sigma: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: [usize; 2],
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { hidden: [256, 256] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub kind: NoiseKind,
    pub rate: f64,
    /// Full class map for asymmetric flips; the MNIST similar-digit map when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asymmetric_map: Option<Vec<usize>>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            kind: NoiseKind::Symmetric,
            rate: 0.2,
            asymmetric_map: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuffersSection {
    pub delay: usize,
    pub clean: usize,
    pub noisy: usize,
    pub clean_intake: usize,
    pub noisy_intake: usize,
    pub replay_mode: ReplayMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replay_cap: Option<usize>,
}

impl Default for BuffersSection {
    fn default() -> Self {
        let b = BufferConfig::default();
        BuffersSection {
            delay: b.delay_capacity,
            clean: b.clean_capacity,
            noisy: b.noisy_capacity,
            clean_intake: b.clean_intake,
            noisy_intake: b.noisy_intake,
            replay_mode: b.replay_mode,
            replay_cap: b.replay_cap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Predictions averaged when scoring `D` (1 = one clean pass).
    pub scoring_views: usize,
    /// Add the clean replay buffer to each warm-up set.
    pub uses_replay: bool,
}

impl Default for WarmupSection {
    fn default() -> Self {
        let w = WarmupSchedule::default();
        WarmupSection {
            epochs: w.epochs,
            lr: w.lr,
            batch_size: w.batch_size,
            momentum: w.momentum,
            weight_decay: w.weight_decay,
            scoring_views: ScoringOptions::default().views,
            uses_replay: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub refine_weight: f64,
    pub lambda_u: f64,
    pub lambda_r: f64,
    pub tau: f64,
    pub mixup_alpha: f64,
    pub weak_views: usize,
    /// `false` trains on `S` only (the discard-U ablation).
    pub use_unlabeled: bool,
    /// `false` skips the intermediate fine-tunes and keeps only the final one.
    /// The final model is unaffected; per-task history then has one entry.
    pub every_event: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let s = SslConfig::default();
        FinetuneSection {
            epochs: s.epochs,
            lr: s.lr,
            batch_size: s.batch_size,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            refine_weight: s.refine_weight,
            lambda_u: s.lambda_u,
            lambda_r: s.lambda_r,
            tau: s.tau,
            mixup_alpha: s.mixup_alpha,
            weak_views: s.weak_views,
            use_unlabeled: true,
            every_event: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentChoice {
    /// Image augmentation for MNIST, Gaussian jitter for blobs.
    Auto,
    Identity,
    Image,
    Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub policy: AugmentChoice,
    pub image_weak_shift: usize,
    pub image_strong_shift: usize,
    pub image_cutout: usize,
    pub image_noise_sigma: f64,
    pub vector_weak_sigma: f64,
    pub vector_strong_sigma: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let img = ImageAugment::mnist();
        let vec = VectorAugment::default();
        AugmentSection {
            policy: AugmentChoice::Auto,
            image_weak_shift: img.weak_shift,
            image_strong_shift: img.strong_shift,
            image_cutout: img.cutout,
            image_noise_sigma: img.noise_sigma,
            vector_weak_sigma: vec.weak_sigma,
            vector_strong_sigma: vec.strong_sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Worker threads for parallel seeds; 0 uses every core.
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("runs/default"),
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub noise: NoiseSection,
    pub buffers: BuffersSection,
    pub warmup: WarmupSection,
    pub finetune: FinetuneSection,
    pub augment: AugmentSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Format {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }

    /// Small blob problem: one task holding every class.
    pub fn blobs() -> Self {
        let mut cfg = RunConfig::default();
        cfg.data.dataset = DatasetKind::Blobs;
        cfg.data.tasks = 1;
        cfg.data.classes_per_task = cfg.data.blobs_classes;
        cfg
    }

    /// The fully resolved configuration, every field included.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// SHA-256 over the resolved configuration, ignoring where results are
    /// written and how many threads compute them.
    pub fn hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.run.output_dir = PathBuf::new();
        semantic.run.threads = 0;
        let digest = Sha256::digest(semantic.resolved().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn classes(&self) -> usize {
        match self.data.dataset {
            DatasetKind::Mnist => 10,
            DatasetKind::Blobs => self.data.blobs_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must list at least one seed".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.run.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::Config(format!("seed {dup} is listed twice")));
        }
        if self.data.tasks * self.data.classes_per_task > self.classes() {
            return Err(Error::Config(format!(
                "{} tasks x {} classes exceeds the {} classes of the dataset",
                self.data.tasks,
                self.data.classes_per_task,
                self.classes()
            )));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.augment.policy == AugmentChoice::Image && self.data.dataset != DatasetKind::Mnist {
            return Err(Error::Config("image augmentation needs 28x28 MNIST inputs".into()));
        }
        self.warmup_schedule().validate()?;
        self.ssl_config().validate()?;
        self.noise_spec(0).validate(self.classes())?;
        Ok(())
    }

    pub fn warmup_schedule(&self) -> WarmupSchedule {
        WarmupSchedule {
            epochs: self.warmup.epochs,
            lr: self.warmup.lr,
            batch_size: self.warmup.batch_size,
            momentum: self.warmup.momentum,
            weight_decay: self.warmup.weight_decay,
        }
    }

    pub fn scoring(&self) -> ScoringOptions {
        ScoringOptions {
            views: self.warmup.scoring_views,
        }
    }

    pub fn ssl_config(&self) -> SslConfig {
        let f = &self.finetune;
        SslConfig {
            epochs: f.epochs,
            lr: f.lr,
            batch_size: f.batch_size,
            momentum: f.momentum,
            weight_decay: f.weight_decay,
            refine_weight: f.refine_weight,
            lambda_u: f.lambda_u,
            lambda_r: f.lambda_r,
            tau: f.tau,
            mixup_alpha: f.mixup_alpha,
            weak_views: f.weak_views,
        }
    }

    pub fn buffer_config(&self) -> BufferConfig {
        let b = &self.buffers;
        BufferConfig {
            delay_capacity: b.delay,
            clean_capacity: b.clean,
            noisy_capacity: b.noisy,
            clean_intake: b.clean_intake,
            noisy_intake: b.noisy_intake,
            replay_mode: b.replay_mode,
            replay_cap: b.replay_cap,
        }
    }

    pub fn noise_spec(&self, seed: u64) -> NoiseSpec {
        let classes = self.classes();
        let asymmetric_map = self.noise.asymmetric_map.clone().unwrap_or_else(|| {
            if classes == 10 {
                NoiseSpec::mnist_asymmetric_map()
            } else {
                (0..classes).collect()
            }
        });
        NoiseSpec {
            kind: self.noise.kind,
            rate: self.noise.rate,
            asymmetric_map,
            seed,
        }
    }

    pub fn augment_policy(&self) -> AugmentPolicy {
        let a = &self.augment;
        let image = || {
            AugmentPolicy::Image(ImageAugment {
                weak_shift: a.image_weak_shift,
                strong_shift: a.image_strong_shift,
                cutout: a.image_cutout,
                noise_sigma: a.image_noise_sigma,
                ..ImageAugment::mnist()
            })
        };
        let vector = || {
            AugmentPolicy::Vector(VectorAugment {
                weak_sigma: a.vector_weak_sigma,
                strong_sigma: a.vector_strong_sigma,
            })
        };
        match (a.policy, self.data.dataset) {
            (AugmentChoice::Identity, _) => AugmentPolicy::Identity,
            (AugmentChoice::Image, _) | (AugmentChoice::Auto, DatasetKind::Mnist) => image(),
            (AugmentChoice::Vector, _) | (AugmentChoice::Auto, DatasetKind::Blobs) => vector(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.buffer_config(), BufferConfig::default());
    }

    #[test]
    fn resolved_round_trips() {
        let mut cfg = RunConfig::blobs();
        cfg.data.per_task_cap = Some(10);
        cfg.noise.asymmetric_map = Some(vec![1, 0]);
        let back = RunConfig::parse(&cfg.resolved()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("[buffers]\ndelay_size = 3\n").unwrap_err();
        assert!(err.to_string().contains("delay_size"), "{err}");
        let err = RunConfig::parse("[bufers]\n").unwrap_err();
        assert!(err.to_string().contains("bufers"), "{err}");
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.run.output_dir = "elsewhere".into();
        b.run.threads = 3;
        assert_eq!(a.hash(), b.hash());
        b.noise.rate = 0.4;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::parse("[finetune]\nrefine_weight = 1.5\n").is_err());
        assert!(RunConfig::parse("[run]\nseeds = []\n").is_err());
        assert!(RunConfig::parse("[run]\nseeds = [1, 1]\n").is_err());
        assert!(RunConfig::parse("[data]\ntasks = 6\n").is_err());
        assert!(RunConfig::parse("[noise]\nkind = \"pairwise\"\n").is_err());
    }
}
