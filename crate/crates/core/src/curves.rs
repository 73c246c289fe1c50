//! Loss-curve CSV output and learning-rate trace validation.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::optim::{cosine_lr, lossstep_lr, lrstep_lr, ScheduleKind, ScheduleSpec};
use crate::train::RunRecord;

pub const CURVE_HEADER: &str = "iteration,epoch,lr,loss,loss_ma";

/// Trailing mean over at most `window` values; the first rows average over
/// however many values exist so far.
pub fn moving_average(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::InvalidArgument(
            "moving-average window must be at least 1".into(),
        ));
    }
    let out = (0..values.len())
        .map(|i| {
            let w = &values[(i + 1).saturating_sub(window)..=i];
            // Offsetting by the first value keeps constant runs exact.
            w[0] + w.iter().map(|v| v - w[0]).sum::<f64>() / w.len() as f64
        })
        .collect();
    Ok(out)
}

/// CSV of `(iteration, epoch, lr, loss, loss_ma)`, one row per minibatch.
/// Floats use the shortest representation that parses back exactly.
pub fn emit_curves(record: &RunRecord, window: usize, out: &mut impl Write) -> Result<()> {
    let losses: Vec<f64> = record.iterations.iter().map(|r| r.loss).collect();
    let ma = moving_average(&losses, window)?;
    writeln!(out, "{CURVE_HEADER}")?;
    for (r, m) in record.iterations.iter().zip(ma) {
        writeln!(out, "{},{},{:?},{:?},{:?}", r.iteration, r.epoch, r.lr, r.loss, m)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub iteration: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_ma: f64,
}

pub fn read_curves(input: impl BufRead) -> Result<Vec<CurveRow>> {
    let bad = |line: usize, msg: &str| Error::InvalidArgument(format!("curve CSV line {line}: {msg}"));
    let mut rows = vec![];
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line != CURVE_HEADER {
                return Err(bad(1, "unexpected header"));
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(i + 1, "expected 5 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
        rows.push(CurveRow {
            iteration: f[0].parse().map_err(|_| bad(i + 1, "bad iteration"))?,
            epoch: f[1].parse().map_err(|_| bad(i + 1, "bad epoch"))?,
            lr: num(f[2])?,
            loss: num(f[3])?,
            loss_ma: num(f[4])?,
        });
    }
    Ok(rows)
}

/// Closed-form rate at `iteration`. `epoch_losses` are the mean training
/// losses of the completed epochs, consulted only by the loss-driven schedule.
pub fn expected_lr(spec: &ScheduleSpec, iteration: u64, iters_per_epoch: u64, epoch_losses: &[f64]) -> f64 {
    let epoch = (iteration / iters_per_epoch) as usize;
    match spec.kind {
        ScheduleKind::None => spec.initial_lr,
        ScheduleKind::Cosine => cosine_lr(iteration, spec.initial_lr, spec.cosine_period),
        ScheduleKind::LrStep => lrstep_lr(epoch, spec.initial_lr, spec.step_interval_epochs, spec.step_factor),
        ScheduleKind::LossStep => lossstep_lr(
            &epoch_losses[..epoch.min(epoch_losses.len())],
            spec.initial_lr,
            spec.loss_patience,
            spec.loss_factor,
        ),
    }
}

/// Iterations whose logged rate is not bit-identical to [`expected_lr`].
pub fn lr_trace_mismatches(
    logged: &[(u64, f64)],
    spec: &ScheduleSpec,
    iters_per_epoch: u64,
    epoch_losses: &[f64],
) -> Vec<u64> {
    logged
        .iter()
        .filter(|(it, lr)| expected_lr(spec, *it, iters_per_epoch, epoch_losses) != *lr)
        .map(|(it, _)| *it)
        .collect()
}
