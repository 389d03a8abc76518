//! Accuracy, purity and forgetting.

use ndarray::ArrayView2;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::separation::feature_matrix;

/// Percentage of entries whose noisy label equals the true label; `None` when empty.
pub fn purity<'a, I: IntoIterator<Item = &'a Sample>>(entries: I) -> Option<f64> {
    let (mut clean, mut total) = (0usize, 0usize);
    for s in entries {
        total += 1;
        clean += usize::from(!s.is_corrupted());
    }
    (total > 0).then(|| 100.0 * clean as f64 / total as f64)
}

/// Max historical accuracy minus final accuracy, per task. `history` holds one
/// per-task row per evaluation, the last row being final.
pub fn forgetting(history: &[Vec<f64>]) -> Vec<f64> {
    let Some(last) = history.last() else {
        return Vec::new();
    };
    (0..last.len())
        .map(|t| {
            let peak = history.iter().map(|row| row[t]).fold(f64::NEG_INFINITY, f64::max);
            peak - last[t]
        })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("non-empty row")
}

/// Held-out evaluation data, scored against true labels.
#[derive(Clone, Debug)]
pub struct TestSet {
    features: ndarray::Array2<f64>,
    labels: Vec<usize>,
    /// Row indices per task.
    task_rows: Vec<Vec<usize>>,
}

impl TestSet {
    pub fn new(samples: &[Sample], tasks: &[Vec<usize>]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Input("empty test set".into()))?;
        let dim = first.features().len();
        let features = feature_matrix(samples.iter().map(Sample::features), dim);
        let labels: Vec<usize> = samples.iter().map(Sample::true_label).collect();
        let task_rows = tasks
            .iter()
            .map(|classes| {
                labels
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| classes.contains(l))
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        Ok(TestSet {
            features,
            labels,
            task_rows,
        })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn evaluate(&self, model: &Mlp) -> Result<Evaluation> {
        let probs = model.predict(self.features.view(), 1024)?;
        let correct: Vec<bool> = probs
            .rows()
            .into_iter()
            .zip(&self.labels)
            .map(|(p, &l)| argmax(p.as_slice().expect("row-major")) == l)
            .collect();
        let pct = |rows: &mut dyn Iterator<Item = usize>| {
            let (mut hit, mut n) = (0usize, 0usize);
            for i in rows {
                n += 1;
                hit += usize::from(correct[i]);
            }
            if n == 0 {
                0.0
            } else {
                100.0 * hit as f64 / n as f64
            }
        };
        Ok(Evaluation {
            overall: pct(&mut (0..self.labels.len())),
            per_task: self
                .task_rows
                .iter()
                .map(|rows| pct(&mut rows.iter().copied()))
                .collect(),
        })
    }
}

/// Test accuracies in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub overall: f64,
    pub per_task: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn purity_examples() {
        let clean: Vec<Sample> = (0..4).map(|i| Sample::new(vec![0.0], 1, i)).collect();
        assert_eq!(purity(&clean), Some(100.0));
        let mut mixed = clean.clone();
        mixed[2] = mixed[2].clone().with_label(0);
        assert_eq!(purity(&mixed), Some(75.0));
        assert_eq!(purity(&[]), None);
    }

    #[test]
    fn forgetting_examples() {
        assert_eq!(forgetting(&[vec![50.0], vec![70.0], vec![70.0]]), vec![0.0]);
        assert_eq!(forgetting(&[vec![80.0], vec![60.0]]), vec![20.0]);
        assert_eq!(forgetting(&[vec![42.0, 7.0]]), vec![0.0, 0.0]);
        assert!(forgetting(&[]).is_empty());
    }

    #[test]
    fn evaluation_counts_argmax_hits() {
        use crate::nn::{Dense, ParamTag};
        use ndarray::{arr1, arr2};
        // Identity-ish network on 2 inputs: class = larger coordinate.
        let eye = || Dense {
            weight: arr2(&[[1.0, 0.0], [0.0, 1.0]]),
            bias: arr1(&[0.0, 0.0]),
        };
        let model = Mlp::from_layers(vec![eye(), eye(), eye()], ParamTag::Theta).unwrap();
        let samples = vec![
            Sample::new(vec![1.0, 0.0], 0, 0),
            Sample::new(vec![0.0, 1.0], 1, 1),
            Sample::new(vec![0.0, 2.0], 0, 2),
        ];
        let test = TestSet::new(&samples, &[vec![0], vec![1]]).unwrap();
        let eval = test.evaluate(&model).unwrap();
        assert!((eval.overall - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(eval.per_task, vec![50.0, 100.0]);
    }
}
