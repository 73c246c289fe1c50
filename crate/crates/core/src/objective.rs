//! Spike-count MSE loss, rate targets, prediction and accuracy.
//!
//! Spikes of each output neuron are summed over the simulation and compared
//! against a target count: `Σ_j (c_j − Σ_t z_{j,t})²`, averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub correct_rate: f64,
    pub incorrect_rate: f64,
    pub classes: usize,
    pub steps: usize,
}

impl TargetSpec {
    /// 80% firing for the labelled class, 20% for the others.
    pub fn new(classes: usize, steps: usize) -> Self {
        TargetSpec {
            correct_rate: 0.8,
            incorrect_rate: 0.2,
            classes,
            steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.incorrect_rate && self.incorrect_rate < self.correct_rate && self.correct_rate <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target rates must satisfy 0 <= incorrect < correct <= 1, got {} / {}",
                self.incorrect_rate, self.correct_rate
            )));
        }
        Ok(())
    }
}

/// Target spike counts for one label.
pub fn targets_from_label(label: usize, spec: &TargetSpec) -> Result<Vec<f64>> {
    if label >= spec.classes {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            spec.classes
        )));
    }
    let t = spec.steps as f64;
    Ok((0..spec.classes)
        .map(|j| {
            if j == label {
                spec.correct_rate * t
            } else {
                spec.incorrect_rate * t
            }
        })
        .collect())
}

/// `[N, classes]` target counts for a batch of labels.
pub fn batch_targets(labels: &[usize], spec: &TargetSpec) -> Result<Tensor> {
    let mut data = Vec::with_capacity(labels.len() * spec.classes);
    for &l in labels {
        data.extend(targets_from_label(l, spec)?);
    }
    Tensor::new(vec![labels.len(), spec.classes], data)
}

/// Record the loss on the tape from per-step output spike nodes (`[N, classes]` each).
pub fn spike_count_loss_on_tape(tape: &mut Tape, spikes: &[NodeId], targets: &Tensor) -> Result<NodeId> {
    let counts = tape.add_n(spikes)?;
    tape.squared_error(counts, targets.clone())
}

/// Per-neuron spike totals of a `[T, N, classes]` record, as `[N, classes]`.
pub fn spike_counts(record: &Tensor) -> Result<Tensor> {
    record.expect_rank(3, "spike_counts", "spike record")?;
    let (t, n, c) = (record.shape()[0], record.shape()[1], record.shape()[2]);
    let mut counts = vec![0.0; n * c];
    for step in record.data().chunks_exact(n * c).take(t) {
        for (a, z) in counts.iter_mut().zip(step) {
            *a += z;
        }
    }
    Tensor::new(vec![n, c], counts)
}

/// Loss value of a `[T, N, classes]` spike record against `[N, classes]` targets.
pub fn spike_count_loss(record: &Tensor, targets: &Tensor) -> Result<f64> {
    let counts = spike_counts(record)?;
    if counts.shape() != targets.shape() {
        return Err(Error::shape(
            "spike_count_loss",
            format!("counts {:?} vs targets {:?}", counts.shape(), targets.shape()),
        ));
    }
    let n = counts.shape()[0] as f64;
    let total: f64 = counts
        .data()
        .iter()
        .zip(targets.data())
        .map(|(a, c)| (c - a) * (c - a))
        .sum();
    Ok(total / n)
}

/// Argmax over a `[N, classes]` count matrix, lowest index on ties.
pub fn predict_from_counts(counts: &Tensor) -> Vec<usize> {
    let c = counts.shape()[counts.ndim() - 1];
    counts
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Predicted class per sample of a `[T, N, classes]` spike record.
pub fn predict(record: &Tensor) -> Result<Vec<usize>> {
    Ok(predict_from_counts(&spike_counts(record)?))
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_examples() {
        let spec = TargetSpec::new(10, 100);
        let t = targets_from_label(3, &spec).unwrap();
        assert_eq!(t, vec![20., 20., 20., 80., 20., 20., 20., 20., 20., 20.]);
        assert_eq!(targets_from_label(0, &TargetSpec::new(2, 5)).unwrap(), vec![4.0, 1.0]);
        assert_eq!(targets_from_label(1, &TargetSpec::new(3, 0)).unwrap(), vec![0.0; 3]);
        assert!(targets_from_label(10, &spec).is_err());
    }

    fn record_with(t: usize, classes: usize, fires: impl Fn(usize, usize) -> bool) -> Tensor {
        Tensor::from_fn(&[t, 1, classes], |i| {
            let (step, j) = (i / classes, i % classes);
            if fires(step, j) {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn loss_examples() {
        let spec = TargetSpec::new(10, 100);
        let targets = batch_targets(&[4], &spec).unwrap();
        let only_correct = record_with(100, 10, |_, j| j == 4);
        assert_eq!(spike_count_loss(&only_correct, &targets).unwrap(), 4000.0);
        let silent = record_with(100, 10, |_, _| false);
        assert_eq!(spike_count_loss(&silent, &targets).unwrap(), 10000.0);
        let exact = record_with(100, 10, |t, j| if j == 4 { t < 80 } else { t < 20 });
        assert_eq!(spike_count_loss(&exact, &targets).unwrap(), 0.0);
    }

    #[test]
    fn tape_loss_matches_record_loss() {
        let spec = TargetSpec::new(3, 4);
        let targets = batch_targets(&[2, 0], &spec).unwrap();
        let mut tape = Tape::new();
        let steps: Vec<_> = (0..4)
            .map(|t| tape.leaf(Tensor::from_fn(&[2, 3], |i| ((i + t) % 2) as f64)).unwrap())
            .collect();
        let loss = spike_count_loss_on_tape(&mut tape, &steps, &targets).unwrap();
        let mut data = vec![];
        for &s in &steps {
            data.extend_from_slice(tape.value(s).data());
        }
        let record = Tensor::new(vec![4, 2, 3], data).unwrap();
        assert_eq!(tape.value(loss).data()[0], spike_count_loss(&record, &targets).unwrap());

        // d loss / d z_t = 2 (count − c) / N for every step.
        let g = tape.backward(loss).unwrap();
        let counts = spike_counts(&record).unwrap();
        for &s in &steps {
            for ((gv, a), c) in g.get(s).unwrap().data().iter().zip(counts.data()).zip(targets.data()) {
                assert_eq!(*gv, 2.0 * (a - c) / 2.0);
            }
        }
    }

    #[test]
    fn predict_examples() {
        let counts = Tensor::new(vec![3, 3], vec![3., 7., 2., 5., 5., 0., 0., 0., 0.]).unwrap();
        assert_eq!(predict_from_counts(&counts), vec![1, 0, 0]);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }
}
