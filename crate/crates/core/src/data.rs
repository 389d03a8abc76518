//! The online sample stream: MNIST IDX loading, synthetic Gaussian blobs,
//! class-disjoint task schedules, label-noise injection and the task-ordered
//! stream itself.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// One stream element.
///
/// Training code only ever reads [`Sample::features`] and [`Sample::label`].
/// The true label is carried along for purity and accuracy bookkeeping.
#[derive(Clone, Debug)]
pub struct Sample {
    features: Arc<[f64]>,
    noisy_label: usize,
    true_label: usize,
    stream_index: u64,
}

impl Sample {
    pub fn new(features: impl Into<Arc<[f64]>>, label: usize, stream_index: u64) -> Self {
        Sample {
            features: features.into(),
            noisy_label: label,
            true_label: label,
            stream_index,
        }
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn shared_features(&self) -> Arc<[f64]> {
        Arc::clone(&self.features)
    }

    /// The (possibly corrupted) label the learner sees.
    pub fn label(&self) -> usize {
        self.noisy_label
    }

    /// Ground truth, for evaluation only.
    pub fn true_label(&self) -> usize {
        self.true_label
    }

    pub fn stream_index(&self) -> u64 {
        self.stream_index
    }

    pub fn is_corrupted(&self) -> bool {
        self.noisy_label != self.true_label
    }

    pub fn with_label(mut self, noisy_label: usize) -> Self {
        self.noisy_label = noisy_label;
        self
    }

    pub fn with_stream_index(mut self, stream_index: u64) -> Self {
        self.stream_index = stream_index;
        self
    }

    /// Drops the label entirely.
    pub fn unlabeled(&self) -> Unlabeled {
        Unlabeled {
            features: Arc::clone(&self.features),
            stream_index: self.stream_index,
        }
    }
}

/// A sample whose label is not trusted and therefore not carried at all.
#[derive(Clone, Debug)]
pub struct Unlabeled {
    features: Arc<[f64]>,
    stream_index: u64,
}

impl Unlabeled {
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn stream_index(&self) -> u64 {
        self.stream_index
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(
        path,
        std::io::Error::new(std::io::ErrorKind::UnexpectedEof, format!("truncated {what}")),
    )
}

/// Loads an IDX image/label file pair. Pixels are scaled to `[0, 1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<Sample>> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    let magic = read_be_u32(&images, 0).ok_or_else(|| truncated(images_path, "header"))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: images_path.into(),
            msg: format!("bad image magic {magic:#010x}"),
        });
    }
    let header = |off| read_be_u32(&images, off).ok_or_else(|| truncated(images_path, "header"));
    let (count, rows, cols) = (header(4)? as usize, header(8)? as usize, header(12)? as usize);

    let magic = read_be_u32(&labels, 0).ok_or_else(|| truncated(labels_path, "header"))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: labels_path.into(),
            msg: format!("bad label magic {magic:#010x}"),
        });
    }
    let label_count =
        read_be_u32(&labels, 4).ok_or_else(|| truncated(labels_path, "header"))? as usize;
    if label_count != count {
        return Err(Error::Consistency(format!(
            "{count} images in {} but {label_count} labels in {}",
            images_path.display(),
            labels_path.display()
        )));
    }

    let pixels = rows * cols;
    let body = &images[16..];
    if body.len() < count * pixels {
        return Err(truncated(images_path, "pixel data"));
    }
    let label_body = &labels[8..];
    if label_body.len() < count {
        return Err(truncated(labels_path, "label data"));
    }

    body.chunks_exact(pixels)
        .take(count)
        .zip(label_body)
        .enumerate()
        .map(|(i, (img, &label))| {
            if label > 9 {
                return Err(Error::Format {
                    path: labels_path.into(),
                    msg: format!("label {label} at index {i} is not a digit"),
                });
            }
            let features: Vec<f64> = img.iter().map(|&p| f64::from(p) / 255.0).collect();
            Ok(Sample::new(features, label as usize, i as u64))
        })
        .collect()
}

/// Isotropic Gaussian samples around each center; the label is the center index.
pub fn make_blobs(
    n_per_class: usize,
    centers: &[Vec<f64>],
    sigma: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    if centers.len() < 2 {
        return Err(Error::Config(format!(
            "blobs need at least 2 centers, got {}",
            centers.len()
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("blob sigma must be > 0, got {sigma}")));
    }
    let dim = centers[0].len();
    if dim == 0 || centers.iter().any(|c| c.len() != dim) {
        return Err(Error::Config("blob centers must share one positive dimension".into()));
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut rng = rng::derive(seed, "blobs", 0);
    let mut out = Vec::with_capacity(n_per_class * centers.len());
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            let features: Vec<f64> = center.iter().map(|&m| m + normal.sample(&mut rng)).collect();
            let index = out.len() as u64;
            out.push(Sample::new(features, label, index));
        }
    }
    Ok(out)
}

/// Centers `spread · e_k` on the coordinate axes (requires `dim >= classes`).
pub fn axis_centers(classes: usize, dim: usize, spread: f64) -> Result<Vec<Vec<f64>>> {
    if dim < classes {
        return Err(Error::Config(format!(
            "blob dimension {dim} is smaller than the class count {classes}"
        )));
    }
    Ok((0..classes)
        .map(|k| {
            let mut c = vec![0.0; dim];
            c[k] = spread;
            c
        })
        .collect())
}

/// Ordered, class-disjoint tasks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSchedule {
    tasks: Vec<Vec<usize>>,
}

impl TaskSchedule {
    pub fn new(tasks: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for task in &tasks {
            if task.is_empty() {
                return Err(Error::Config("a task must contain at least one class".into()));
            }
            for &c in task {
                if !seen.insert(c) {
                    return Err(Error::Config(format!("class {c} appears in two tasks")));
                }
            }
        }
        Ok(TaskSchedule { tasks })
    }

    pub fn tasks(&self) -> &[Vec<usize>] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.tasks.iter().position(|t| t.contains(&class))
    }
}

/// Random class groups drawn without replacement.
pub fn build_task_schedule(
    class_count: usize,
    tasks: usize,
    classes_per_task: usize,
    seed: u64,
) -> Result<TaskSchedule> {
    if tasks == 0 || classes_per_task == 0 {
        return Err(Error::Config("need at least one task and one class per task".into()));
    }
    if tasks * classes_per_task > class_count {
        return Err(Error::Config(format!(
            "{tasks} tasks x {classes_per_task} classes exceeds {class_count} classes"
        )));
    }
    let mut classes: Vec<usize> = (0..class_count).collect();
    classes.shuffle(&mut rng::derive(seed, "schedule", 0));
    let groups = classes
        .chunks(classes_per_task)
        .take(tasks)
        .map(|g| g.to_vec())
        .collect();
    TaskSchedule::new(groups)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    None,
    Symmetric,
    Asymmetric,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoiseKind::None),
            "symmetric" => Ok(NoiseKind::Symmetric),
            "asymmetric" => Ok(NoiseKind::Asymmetric),
            other => Err(Error::Config(format!("unknown noise kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseKind::None => "none",
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::Asymmetric => "asymmetric",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    /// Total class → class map used for asymmetric flips.
    pub asymmetric_map: Vec<usize>,
    pub seed: u64,
}

impl NoiseSpec {
    /// Similar-digit flips 2→7, 3→8, 5→6, 6→5, 7→1; other digits map to themselves.
    pub fn mnist_asymmetric_map() -> Vec<usize> {
        let mut map: Vec<usize> = (0..10).collect();
        for (from, to) in [(2, 7), (3, 8), (5, 6), (6, 5), (7, 1)] {
            map[from] = to;
        }
        map
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::Config(format!(
                "noise rate must lie in [0, 1), got {}",
                self.rate
            )));
        }
        if self.kind == NoiseKind::Asymmetric {
            if self.asymmetric_map.len() != classes {
                return Err(Error::Config(format!(
                    "asymmetric map covers {} classes, dataset has {classes}",
                    self.asymmetric_map.len()
                )));
            }
            if let Some(&bad) = self.asymmetric_map.iter().find(|&&t| t >= classes) {
                return Err(Error::Config(format!("asymmetric map target {bad} out of range")));
            }
        }
        Ok(())
    }
}

/// Corrupts each sample independently with probability `rate`.
///
/// Symmetric noise draws the replacement uniformly from the other `classes - 1`
/// labels; asymmetric noise replaces the label with `map[true_label]`.
pub fn inject_noise(samples: Vec<Sample>, spec: &NoiseSpec, classes: usize) -> Result<Vec<Sample>> {
    spec.validate(classes)?;
    if let Some(s) = samples.iter().find(|s| s.true_label >= classes) {
        return Err(Error::Input(format!(
            "label {} out of range for {classes} classes",
            s.true_label
        )));
    }
    if spec.kind == NoiseKind::None || spec.rate == 0.0 {
        return Ok(samples);
    }
    if spec.kind == NoiseKind::Symmetric && classes < 2 {
        return Err(Error::Config("symmetric noise needs at least 2 classes".into()));
    }
    let mut rng = rng::derive(spec.seed, "noise", 0);
    Ok(samples
        .into_iter()
        .map(|s| {
            if !rng.random_bool(spec.rate) {
                return s;
            }
            let truth = s.true_label;
            let flipped = match spec.kind {
                NoiseKind::Symmetric => {
                    let k = rng.random_range(0..classes - 1);
                    if k >= truth {
                        k + 1
                    } else {
                        k
                    }
                }
                NoiseKind::Asymmetric => spec.asymmetric_map[truth],
                NoiseKind::None => truth,
            };
            s.with_label(flipped)
        })
        .collect())
}

/// Task-ordered stream: tasks in schedule order, shuffled within each task.
/// Nothing about task boundaries is exposed through [`TaskStream::next_sample`].
#[derive(Debug)]
pub struct TaskStream {
    order: Vec<Sample>,
    position: usize,
    task_counts: Vec<usize>,
}

impl TaskStream {
    /// Samples whose true class is in no task are left out. `per_task_cap`
    /// truncates each task after shuffling.
    pub fn new(
        samples: Vec<Sample>,
        schedule: &TaskSchedule,
        per_task_cap: Option<usize>,
        seed: u64,
    ) -> Self {
        let mut per_task: Vec<Vec<Sample>> = vec![Vec::new(); schedule.len()];
        for s in samples {
            if let Some(t) = schedule.task_of(s.true_label) {
                per_task[t].push(s);
            }
        }
        let mut order = Vec::new();
        let mut task_counts = Vec::with_capacity(per_task.len());
        for (t, mut group) in per_task.into_iter().enumerate() {
            group.shuffle(&mut rng::derive(seed, "stream", t as u64));
            if let Some(cap) = per_task_cap {
                group.truncate(cap);
            }
            task_counts.push(group.len());
            order.extend(group);
        }
        for (i, s) in order.iter_mut().enumerate() {
            s.stream_index = i as u64;
        }
        TaskStream {
            order,
            position: 0,
            task_counts,
        }
    }

    pub fn next_sample(&mut self) -> Option<Sample> {
        let s = self.order.get(self.position)?.clone();
        self.position += 1;
        Some(s)
    }

    pub fn task_counts(&self) -> &[usize] {
        &self.task_counts
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

impl Iterator for TaskStream {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        self.next_sample()
    }
}

/// CSV with one column per feature followed by `true_label,noisy_label`.
pub fn write_samples_csv<W: Write>(samples: &[Sample], mut out: W) -> std::io::Result<()> {
    let dim = samples.first().map_or(0, |s| s.features.len());
    let mut header: Vec<String> = (0..dim).map(|j| format!("x{j}")).collect();
    header.push("true_label".into());
    header.push("noisy_label".into());
    writeln!(out, "{}", header.join(","))?;
    for s in samples {
        let mut fields: Vec<String> = s.features.iter().map(|v| v.to_string()).collect();
        fields.push(s.true_label.to_string());
        fields.push(s.noisy_label.to_string());
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(n: usize, classes: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample::new(vec![i as f64], i % classes, i as u64))
            .collect()
    }

    #[test]
    fn degenerate_blobs_sit_on_centers() {
        let centers = vec![vec![1.0, -2.0], vec![3.0, 4.0]];
        let samples = make_blobs(50, &centers, 1e-9, 3).unwrap();
        for s in &samples {
            let c = &centers[s.label()];
            for (x, m) in s.features().iter().zip(c) {
                assert!((x - m).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn blobs_are_seeded_and_counted() {
        let centers = axis_centers(2, 3, 2.0).unwrap();
        let a = make_blobs(100, &centers, 0.5, 9).unwrap();
        let b = make_blobs(100, &centers, 0.5, 9).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a.iter().filter(|s| s.label() == 0).count(), 100);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.features(), y.features());
        }
        assert!(matches!(
            make_blobs(10, &centers[..1], 0.5, 9),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mnist_schedule_is_a_pair_partition() {
        let schedule = build_task_schedule(10, 5, 2, 17).unwrap();
        let mut all: Vec<usize> = schedule.tasks().iter().flatten().copied().collect();
        assert!(schedule.tasks().iter().all(|t| t.len() == 2));
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn single_task_schedule() {
        let schedule = build_task_schedule(2, 1, 2, 0).unwrap();
        let mut task = schedule.tasks()[0].clone();
        task.sort_unstable();
        assert_eq!(task, vec![0, 1]);
        assert!(matches!(
            build_task_schedule(5, 3, 2, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_rate_is_a_no_op() {
        let spec = NoiseSpec {
            kind: NoiseKind::Symmetric,
            rate: 0.0,
            asymmetric_map: vec![],
            seed: 1,
        };
        let out = inject_noise(labeled(500, 10), &spec, 10).unwrap();
        assert!(out.iter().all(|s| !s.is_corrupted()));
    }

    #[test]
    fn asymmetric_follows_map() {
        let spec = NoiseSpec {
            kind: NoiseKind::Asymmetric,
            rate: 0.4,
            asymmetric_map: vec![1, 0],
            seed: 5,
        };
        let out = inject_noise(labeled(2000, 2), &spec, 2).unwrap();
        let corrupted: Vec<_> = out.iter().filter(|s| s.is_corrupted()).collect();
        assert!(!corrupted.is_empty());
        for s in corrupted {
            assert_eq!(s.label(), 1 - s.true_label());
        }
    }

    #[test]
    fn rate_of_one_is_rejected() {
        let spec = NoiseSpec {
            kind: NoiseKind::Symmetric,
            rate: 1.0,
            asymmetric_map: vec![],
            seed: 5,
        };
        assert!(matches!(
            inject_noise(labeled(10, 2), &spec, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stream_respects_schedule() {
        let schedule = TaskSchedule::new(vec![vec![3, 1], vec![0, 2]]).unwrap();
        let samples = labeled(400, 4);
        let stream = TaskStream::new(samples.clone(), &schedule, None, 4);
        assert_eq!(stream.task_counts(), &[200, 200]);
        let emitted: Vec<Sample> = stream.collect();
        assert_eq!(emitted.len(), 400);
        assert!(emitted[..200]
            .iter()
            .all(|s| [3, 1].contains(&s.true_label())));
        for (i, s) in emitted.iter().enumerate() {
            assert_eq!(s.stream_index(), i as u64);
        }
        let again: Vec<Sample> = TaskStream::new(samples, &schedule, None, 4).collect();
        let key = |v: &[Sample]| v.iter().map(|s| s.features()[0]).collect::<Vec<_>>();
        assert_eq!(key(&emitted), key(&again));
    }

    #[test]
    fn csv_dump_has_header() {
        let mut out = Vec::new();
        write_samples_csv(&labeled(2, 2), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next(), Some("x0,true_label,noisy_label"));
        assert_eq!(text.lines().count(), 3);
    }
}
