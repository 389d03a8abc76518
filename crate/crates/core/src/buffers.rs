//! Delay, clean/noisy delay and clean/noisy replay buffers, and the state
//! machine that moves scored samples between them.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use crate::data::{Sample, Unlabeled};
use crate::error::{Error, Result};
use crate::separation::ClassMask;

/// The masked-MSE score a sample received when its delay buffer was split.
#[derive(Clone, Debug)]
pub struct LossRecord {
    pub loss: f64,
    pub mask: Arc<ClassMask>,
}

#[derive(Clone, Debug)]
pub struct Scored {
    pub sample: Sample,
    pub record: LossRecord,
}

impl Scored {
    pub fn loss(&self) -> f64 {
        self.record.loss
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PushOutcome {
    Accepted,
    Full,
}

/// Fixed-capacity staging buffer for the incoming stream (`D`).
#[derive(Clone, Debug)]
pub struct DelayBuffer {
    capacity: usize,
    slots: Vec<Sample>,
}

impl DelayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("delay buffer capacity must be positive".into()));
        }
        Ok(DelayBuffer {
            capacity,
            slots: Vec::with_capacity(capacity),
        })
    }

    pub fn push(&mut self, sample: Sample) -> PushOutcome {
        if self.is_full() {
            return PushOutcome::Full;
        }
        self.slots.push(sample);
        PushOutcome::Accepted
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() == self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn samples(&self) -> &[Sample] {
        &self.slots
    }

    /// Empties the buffer, handing back its contents.
    pub fn reset(&mut self) -> Vec<Sample> {
        std::mem::take(&mut self.slots)
    }
}

/// Clean (`C`) or noisy (`N`) delay buffer: scored samples awaiting replay selection.
#[derive(Clone, Debug)]
pub struct LabeledLossBuffer {
    capacity: usize,
    entries: Vec<Scored>,
}

impl LabeledLossBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("loss buffer capacity must be positive".into()));
        }
        Ok(LabeledLossBuffer {
            capacity,
            entries: Vec::with_capacity(capacity),
        })
    }

    /// Moves entries from the front of `pending` until full or `pending` is empty.
    pub fn fill(&mut self, pending: &mut VecDeque<Scored>) {
        while !self.is_full() {
            match pending.pop_front() {
                Some(entry) => self.entries.push(entry),
                None => break,
            }
        }
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[Scored] {
        &self.entries
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(Scored::loss).collect()
    }

    pub fn reset(&mut self) -> Vec<Scored> {
        std::mem::take(&mut self.entries)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    /// Each update appends its intake (variable-length buffer).
    Append,
    /// Each update replaces the whole buffer with its intake.
    Replace,
}

impl std::str::FromStr for ReplayMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "append" => Ok(ReplayMode::Append),
            "replace" => Ok(ReplayMode::Replace),
            other => Err(Error::Config(format!("unknown replay mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for ReplayMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReplayMode::Append => "append",
            ReplayMode::Replace => "replace",
        })
    }
}

/// Clean (`B_C`) or noisy (`B_N`) replay buffer. Entries are never mutated.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    intake: usize,
    mode: ReplayMode,
    cap: Option<usize>,
    entries: VecDeque<Scored>,
}

impl ReplayBuffer {
    pub fn new(intake: usize) -> Self {
        ReplayBuffer {
            intake,
            mode: ReplayMode::Append,
            cap: None,
            entries: VecDeque::new(),
        }
    }

    pub fn with_mode(mut self, mode: ReplayMode) -> Self {
        self.mode = mode;
        self
    }

    /// Oldest entries are evicted first once `cap` is exceeded.
    pub fn with_cap(mut self, cap: Option<usize>) -> Self {
        self.cap = cap;
        self
    }

    pub fn intake(&self) -> usize {
        self.intake
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &Scored> {
        self.entries.iter()
    }

    fn admit(&mut self, selected: Vec<Scored>) -> usize {
        if self.mode == ReplayMode::Replace {
            self.entries.clear();
        }
        let added = selected.len();
        self.entries.extend(selected);
        if let Some(cap) = self.cap {
            while self.entries.len() > cap {
                self.entries.pop_front();
            }
        }
        added
    }
}

/// Indices of the `n` smallest losses; equal losses keep insertion order.
pub fn lowest_indices(losses: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]));
    order.truncate(n);
    order
}

/// Indices of the `n` largest losses; equal losses keep insertion order.
pub fn highest_indices(losses: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
    order.truncate(n);
    order
}

fn pick(entries: &[Scored], indices: Vec<usize>) -> Vec<Scored> {
    indices.into_iter().map(|i| entries[i].clone()).collect()
}

/// Appends the `N1` lowest-loss entries of `C` to `B_C` (all of `C` if smaller).
/// Returns how many entries were taken. Resetting `C` is the caller's job.
pub fn update_clean_replay(clean_replay: &mut ReplayBuffer, clean: &LabeledLossBuffer) -> usize {
    let picked = lowest_indices(&clean.losses(), clean_replay.intake);
    clean_replay.admit(pick(clean.entries(), picked))
}

/// Appends the `N2` highest-loss entries of `N` to `B_N` (all of `N` if smaller).
pub fn update_noisy_replay(noisy_replay: &mut ReplayBuffer, noisy: &LabeledLossBuffer) -> usize {
    let picked = highest_indices(&noisy.losses(), noisy_replay.intake);
    noisy_replay.admit(pick(noisy.entries(), picked))
}

/// Labeled set `S = C ∪ B_C` and unlabeled set `U = N ∪ B_N` for fine-tuning.
#[derive(Clone, Debug, Default)]
pub struct FinetuneSets {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Unlabeled>,
}

/// Snapshots the fine-tuning sets. Labels of `N ∪ B_N` are dropped here.
pub fn drain_for_finetune(
    clean: &LabeledLossBuffer,
    noisy: &LabeledLossBuffer,
    clean_replay: &ReplayBuffer,
    noisy_replay: &ReplayBuffer,
) -> FinetuneSets {
    let labeled = clean
        .entries()
        .iter()
        .chain(clean_replay.entries())
        .map(|e| e.sample.clone())
        .collect();
    let unlabeled = noisy
        .entries()
        .iter()
        .chain(noisy_replay.entries())
        .map(|e| e.sample.unlabeled())
        .collect();
    FinetuneSets { labeled, unlabeled }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferConfig {
    pub delay_capacity: usize,
    pub clean_capacity: usize,
    pub noisy_capacity: usize,
    pub clean_intake: usize,
    pub noisy_intake: usize,
    pub replay_mode: ReplayMode,
    pub replay_cap: Option<usize>,
}

impl Default for BufferConfig {
    fn default() -> Self {
        BufferConfig {
            delay_capacity: 500,
            clean_capacity: 500,
            noisy_capacity: 1000,
            clean_intake: 25,
            noisy_intake: 50,
            replay_mode: ReplayMode::Append,
            replay_cap: None,
        }
    }
}

/// What happened while absorbing one split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AbsorbReport {
    pub clean_replay_updates: usize,
    pub noisy_replay_updates: usize,
    pub finetune_events: usize,
    /// Stream indices of entries that left `C` / `N` through a reset.
    pub flushed_clean: Vec<u64>,
    pub flushed_noisy: Vec<u64>,
}

/// The five buffers and their update rules.
#[derive(Clone, Debug)]
pub struct BufferSet {
    pub delay: DelayBuffer,
    pub clean: LabeledLossBuffer,
    pub noisy: LabeledLossBuffer,
    pub clean_replay: ReplayBuffer,
    pub noisy_replay: ReplayBuffer,
    clean_filled: bool,
    noisy_filled: bool,
}

impl BufferSet {
    pub fn new(cfg: &BufferConfig) -> Result<Self> {
        Ok(BufferSet {
            delay: DelayBuffer::new(cfg.delay_capacity)?,
            clean: LabeledLossBuffer::new(cfg.clean_capacity)?,
            noisy: LabeledLossBuffer::new(cfg.noisy_capacity)?,
            clean_replay: ReplayBuffer::new(cfg.clean_intake)
                .with_mode(cfg.replay_mode)
                .with_cap(cfg.replay_cap),
            noisy_replay: ReplayBuffer::new(cfg.noisy_intake)
                .with_mode(cfg.replay_mode)
                .with_cap(cfg.replay_cap),
            clean_filled: false,
            noisy_filled: false,
        })
    }

    /// Routes a split into `C` and `N`.
    ///
    /// Once both `C` and `N` have filled up since the previous event,
    /// `on_both_full` receives `S` and `U`, taken before the buffer that just
    /// filled is reset. Then each full buffer feeds its replay buffer and is
    /// reset. Entries that did not fit are carried into the emptied buffer, so
    /// nothing is dropped.
    pub fn absorb<F>(
        &mut self,
        clean: Vec<Scored>,
        noisy: Vec<Scored>,
        mut on_both_full: F,
    ) -> Result<AbsorbReport>
    where
        F: FnMut(FinetuneSets) -> Result<()>,
    {
        let mut pending_clean: VecDeque<Scored> = clean.into();
        let mut pending_noisy: VecDeque<Scored> = noisy.into();
        let mut report = AbsorbReport::default();
        loop {
            self.clean.fill(&mut pending_clean);
            self.noisy.fill(&mut pending_noisy);
            let clean_full = self.clean.is_full();
            let noisy_full = self.noisy.is_full();
            self.clean_filled |= clean_full;
            self.noisy_filled |= noisy_full;
            if self.clean_filled && self.noisy_filled {
                on_both_full(self.finetune_sets())?;
                report.finetune_events += 1;
                self.clean_filled = false;
                self.noisy_filled = false;
            }
            if clean_full {
                update_clean_replay(&mut self.clean_replay, &self.clean);
                report.clean_replay_updates += 1;
                report
                    .flushed_clean
                    .extend(self.clean.reset().iter().map(|e| e.sample.stream_index()));
            }
            if noisy_full {
                update_noisy_replay(&mut self.noisy_replay, &self.noisy);
                report.noisy_replay_updates += 1;
                report
                    .flushed_noisy
                    .extend(self.noisy.reset().iter().map(|e| e.sample.stream_index()));
            }
            if pending_clean.is_empty() && pending_noisy.is_empty() {
                return Ok(report);
            }
        }
    }

    pub fn finetune_sets(&self) -> FinetuneSets {
        drain_for_finetune(
            &self.clean,
            &self.noisy,
            &self.clean_replay,
            &self.noisy_replay,
        )
    }

    /// Debug dump: `buffer,stream_index,noisy_label,true_label,loss`.
    pub fn dump_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "buffer,stream_index,noisy_label,true_label,loss")?;
        let groups: [(&str, Box<dyn Iterator<Item = &Scored>>); 4] = [
            ("clean", Box::new(self.clean.entries().iter())),
            ("noisy", Box::new(self.noisy.entries().iter())),
            ("clean_replay", Box::new(self.clean_replay.entries())),
            ("noisy_replay", Box::new(self.noisy_replay.entries())),
        ];
        for (name, entries) in groups {
            for e in entries {
                writeln!(
                    out,
                    "{name},{},{},{},{}",
                    e.sample.stream_index(),
                    e.sample.label(),
                    e.sample.true_label(),
                    e.record.loss
                )?;
            }
        }
        Ok(())
    }
}
