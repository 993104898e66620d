//! Forecast accuracy metrics and report files.
//!
//! MAE, RMSE, and MAPE over de-normalized predictions, reported at the
//! 15/30/60-minute horizons (steps 3/6/12 at the 5-minute resolution) plus
//! an all-steps aggregate. Wall-clock numbers go to a separate timings
//! file so metric reports are byte-reproducible under a fixed seed.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("metrics: shape mismatch between {0:?} and {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("metrics: every truth value is below the MAPE guard threshold")]
    UndefinedMetric,
    #[error("metrics: no samples to aggregate")]
    Empty,
    #[error("metrics: {path} line {line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },
    #[error("metrics: io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Truth values with magnitude below this are excluded from MAPE.
pub const MAPE_GUARD: f64 = 1e-6;

fn check_shapes(pred: &Tensor, truth: &Tensor) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(MetricError::Shape(
            pred.shape().to_vec(),
            truth.shape().to_vec(),
        ));
    }
    Ok(())
}

pub fn mae(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_shapes(pred, truth)?;
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

pub fn rmse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_shapes(pred, truth)?;
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sum / pred.len() as f64).sqrt())
}

/// Mean absolute percentage error in percent. Entries whose truth is
/// within [`MAPE_GUARD`] of zero are excluded from the mean; if that masks
/// everything the metric is undefined.
pub fn mape(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_shapes(pred, truth)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.data().iter().zip(truth.data()) {
        if t.abs() < MAPE_GUARD {
            continue;
        }
        sum += ((p - t) / t).abs();
        count += 1;
    }
    if count == 0 {
        return Err(MetricError::UndefinedMetric);
    }
    Ok(sum / count as f64 * 100.0)
}

/// Metric triple at one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonMetrics {
    /// Horizon in minutes; 0 means the aggregate over every step.
    pub minutes: u32,
    /// 1-based forecast step; 0 for the aggregate row.
    pub step: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

/// The standard reporting horizons at 5-minute step semantics.
pub const STANDARD_HORIZONS: [(u32, usize); 3] = [(15, 3), (30, 6), (60, 12)];

/// Gather the values of one forecast step (1-based) across windows, or all
/// steps for `step == 0`.
fn gather_step(tensors: &[Tensor], step: usize) -> Tensor {
    let mut out = Vec::new();
    for t in tensors {
        let h = t.shape()[2];
        let (n, f) = (t.shape()[0], t.shape()[1]);
        for i in 0..n {
            for c in 0..f {
                if step == 0 {
                    for k in 0..h {
                        out.push(t.at3(i, c, k));
                    }
                } else {
                    out.push(t.at3(i, c, step - 1));
                }
            }
        }
    }
    Tensor::new(vec![out.len()], out).expect("flat gather")
}

/// Per-horizon metrics over a set of prediction/truth window pairs, with
/// the aggregate row first. Horizons beyond the tensors' length are
/// skipped.
pub fn horizon_report(preds: &[Tensor], truths: &[Tensor]) -> Result<Vec<HorizonMetrics>> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let h = preds[0].shape()[2];
    let mut rows = Vec::new();
    let mut steps: Vec<(u32, usize)> = vec![(0, 0)];
    steps.extend(STANDARD_HORIZONS.iter().filter(|&&(_, s)| s <= h));
    for (minutes, step) in steps {
        let p = gather_step(preds, step);
        let t = gather_step(truths, step);
        rows.push(HorizonMetrics {
            minutes,
            step,
            mae: mae(&p, &t)?,
            rmse: rmse(&p, &t)?,
            mape: mape(&p, &t)?,
        });
    }
    Ok(rows)
}

/// Accuracy rows for one period.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodMetrics {
    pub period: u32,
    pub horizons: Vec<HorizonMetrics>,
}

/// Wall-clock accounting for one period's training.
#[derive(Debug, Clone)]
pub struct PeriodTiming {
    pub period: u32,
    pub total_seconds: f64,
    pub epochs: usize,
    pub seconds_per_epoch: f64,
}

/// Full run report: accuracy rows and timing rows, written as two CSV
/// files so the accuracy file stays deterministic.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub periods: Vec<PeriodMetrics>,
    pub timings: Vec<PeriodTiming>,
}

impl MetricReport {
    pub fn write_metrics(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "period,horizon_minutes,horizon_step,mae,rmse,mape")?;
        for period in &self.periods {
            for h in &period.horizons {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    period.period, h.minutes, h.step, h.mae, h.rmse, h.mape
                )?;
            }
        }
        Ok(())
    }

    pub fn write_timings(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "period,total_seconds,epochs,seconds_per_epoch")?;
        for t in &self.timings {
            writeln!(
                out,
                "{},{},{},{}",
                t.period, t.total_seconds, t.epochs, t.seconds_per_epoch
            )?;
        }
        Ok(())
    }

    pub fn read_metrics(path: &Path) -> Result<MetricReport> {
        let file = std::fs::File::open(path)?;
        let bad = |line: usize, message: &str| MetricError::Format {
            path: path.display().to_string(),
            line,
            message: message.to_string(),
        };
        let mut periods: Vec<PeriodMetrics> = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line != "period,horizon_minutes,horizon_step,mae,rmse,mape" {
                    return Err(bad(1, "unexpected header"));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(bad(i + 1, "expected 6 fields"));
            }
            let period: u32 = fields[0].parse().map_err(|_| bad(i + 1, "bad period"))?;
            let minutes: u32 = fields[1].parse().map_err(|_| bad(i + 1, "bad minutes"))?;
            let step: usize = fields[2].parse().map_err(|_| bad(i + 1, "bad step"))?;
            let mut nums = [0.0f64; 3];
            for (slot, field) in nums.iter_mut().zip(&fields[3..6]) {
                *slot = field.parse().map_err(|_| bad(i + 1, "bad metric value"))?;
            }
            let row = HorizonMetrics {
                minutes,
                step,
                mae: nums[0],
                rmse: nums[1],
                mape: nums[2],
            };
            match periods.last_mut() {
                Some(p) if p.period == period => p.horizons.push(row),
                _ => periods.push(PeriodMetrics {
                    period,
                    horizons: vec![row],
                }),
            }
        }
        Ok(MetricReport {
            periods,
            timings: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let x = t(&[1.0, 2.0, 3.0]);
        assert_eq!(mae(&x, &x).unwrap(), 0.0);
        assert_eq!(rmse(&x, &x).unwrap(), 0.0);
        assert_eq!(mape(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn hand_arithmetic_example() {
        // pred (1,2), truth (1,4): MAE 1, RMSE sqrt(2), MAPE 25%.
        let pred = t(&[1.0, 2.0]);
        let truth = t(&[1.0, 4.0]);
        assert_eq!(mae(&pred, &truth).unwrap(), 1.0);
        assert!((rmse(&pred, &truth).unwrap() - 2.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(mape(&pred, &truth).unwrap(), 25.0);
    }

    #[test]
    fn doubling_errors_doubles_mae_and_rmse() {
        let truth = t(&[2.0, -3.0, 5.0, 7.0]);
        let err1 = t(&[2.5, -2.0, 5.5, 6.0]);
        let err2 = t(&[3.0, -1.0, 6.0, 5.0]);
        assert!((2.0 * mae(&err1, &truth).unwrap() - mae(&err2, &truth).unwrap()).abs() < 1e-12);
        assert!((2.0 * rmse(&err1, &truth).unwrap() - rmse(&err2, &truth).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rmse_dominates_mae() {
        let pred = t(&[1.0, 5.0, -2.0, 0.5]);
        let truth = t(&[0.0, 2.0, 1.0, 0.25]);
        assert!(rmse(&pred, &truth).unwrap() >= mae(&pred, &truth).unwrap());
    }

    #[test]
    fn mape_guard_excludes_tiny_truth() {
        let pred = t(&[1.0, 10.0]);
        let truth = t(&[0.0, 8.0]);
        // first entry masked; remaining: |2/8| = 25%
        assert_eq!(mape(&pred, &truth).unwrap(), 25.0);
        let all_zero = t(&[0.0, 0.0]);
        assert!(matches!(
            mape(&pred, &all_zero),
            Err(MetricError::UndefinedMetric)
        ));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = t(&[1.0]);
        let b = t(&[1.0, 2.0]);
        assert!(matches!(mae(&a, &b), Err(MetricError::Shape(_, _))));
    }

    #[test]
    fn horizon_report_includes_aggregate_and_reachable_steps() {
        let pred = Tensor::new(vec![2, 1, 6], vec![1.0; 12]).unwrap();
        let truth = Tensor::new(vec![2, 1, 6], vec![2.0; 12]).unwrap();
        let rows = horizon_report(&[pred], &[truth]).unwrap();
        // aggregate + 15min(step 3) + 30min(step 6); 60min needs 12 steps
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].minutes, 0);
        assert_eq!(rows[1].step, 3);
        assert_eq!(rows[2].step, 6);
        for row in rows {
            assert_eq!(row.mae, 1.0);
        }
    }

    #[test]
    fn report_round_trips_through_csv() {
        let report = MetricReport {
            periods: vec![PeriodMetrics {
                period: 3,
                horizons: vec![
                    HorizonMetrics {
                        minutes: 0,
                        step: 0,
                        mae: 1.25,
                        rmse: 1.5,
                        mape: 12.5,
                    },
                    HorizonMetrics {
                        minutes: 15,
                        step: 3,
                        mae: 0.5,
                        rmse: std::f64::consts::FRAC_1_SQRT_2,
                        mape: 9.0,
                    },
                ],
            }],
            timings: vec![PeriodTiming {
                period: 3,
                total_seconds: 1.5,
                epochs: 10,
                seconds_per_epoch: 0.15,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        report.write_metrics(&path).unwrap();
        let loaded = MetricReport::read_metrics(&path).unwrap();
        assert_eq!(loaded.periods, report.periods);
    }
}
