//! Accuracy bookkeeping and the three summary metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `a[i][j]`: accuracy on task `i` after training through task `j`
/// (0-based). Entries not yet measured are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    a: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            a: vec![vec![None; num_tasks]; num_tasks],
        }
    }

    /// Builds a matrix from rows; missing trailing entries are absent.
    pub fn from_rows(rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let t = rows.len();
        let mut m = Self::new(t);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() > t {
                return Err(Error::shape(format!("row {i} has {} > {t} entries", row.len())));
            }
            for (j, v) in row.into_iter().enumerate() {
                if let Some(v) = v {
                    m.set(i, j, v)?;
                }
            }
        }
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.a.len()
    }

    pub fn get(&self, task: usize, after: usize) -> Option<f64> {
        self.a.get(task)?.get(after).copied().flatten()
    }

    pub fn set(&mut self, task: usize, after: usize, acc: f64) -> Result<()> {
        let t = self.num_tasks();
        if task >= t || after >= t {
            return Err(Error::Index(format!("({task}, {after}) outside {t}x{t}")));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Domain(format!("accuracy {acc} outside [0, 1]")));
        }
        self.a[task][after] = Some(acc);
        Ok(())
    }

    /// Fills column `after` from per-task accuracies.
    pub fn set_column(&mut self, after: usize, accs: &[f64]) -> Result<()> {
        for (task, &acc) in accs.iter().enumerate() {
            self.set(task, after, acc)?;
        }
        Ok(())
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.a
    }
}

/// Accuracy sampled every `delta_n` training samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTrace {
    pub delta_n: usize,
    pub points: Vec<TracePoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub samples_seen: usize,
    pub accuracy: f64,
}

impl AccuracyTrace {
    pub fn new(delta_n: usize) -> Self {
        Self {
            delta_n,
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, samples_seen: usize, accuracy: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::Domain(format!("accuracy {accuracy} outside [0, 1]")));
        }
        if let Some(last) = self.points.last() {
            if samples_seen <= last.samples_seen {
                return Err(Error::Data(format!(
                    "trace point at {samples_seen} after {}",
                    last.samples_seen
                )));
            }
        }
        self.points.push(TracePoint {
            samples_seen,
            accuracy,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Mean accuracy over all tasks after the last one.
pub fn a_final(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.num_tasks();
    if t == 0 {
        return Err(Error::Domain("empty accuracy matrix".into()));
    }
    let mut sum = 0.0;
    for i in 0..t {
        sum += m
            .get(i, t - 1)
            .ok_or_else(|| Error::state(format!("a[{i}][{}] missing", t - 1)))?;
    }
    Ok(sum / t as f64)
}

/// Mean drop from each earlier task's best accuracy before the last task to
/// its final accuracy. The last task is excluded. Negative values mean
/// backward transfer.
pub fn forgetting(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.num_tasks();
    if t < 2 {
        return Err(Error::Domain(format!("forgetting needs >= 2 tasks, got {t}")));
    }
    let last = t - 1;
    let mut sum = 0.0;
    for k in 0..last {
        let best = (k..last)
            .filter_map(|j| m.get(k, j))
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
            .ok_or_else(|| Error::state(format!("task {k} never evaluated before the end")))?;
        let end = m
            .get(k, last)
            .ok_or_else(|| Error::state(format!("a[{k}][{last}] missing")))?;
        sum += best - end;
    }
    Ok(sum / last as f64)
}

/// Anytime accuracy: `(normalized, raw)` where normalized is the mean of the
/// trace and raw is `Σ f · Δn`.
pub fn a_auc(trace: &AccuracyTrace) -> Result<(f64, f64)> {
    if trace.is_empty() {
        return Err(Error::Domain("empty accuracy trace".into()));
    }
    let sum: f64 = trace.points.iter().map(|p| p.accuracy).sum();
    Ok((sum / trace.len() as f64, sum * trace.delta_n as f64))
}

pub const CSV_HEADER: &str = "run_id,seed,method,scenario,a_final,a_auc_norm,a_auc_raw,forgetting";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub method: String,
    pub scenario: String,
    pub a_final: f64,
    pub a_auc_norm: f64,
    pub a_auc_raw: f64,
    /// Absent for single-task streams.
    pub forgetting: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Rows followed by a `summary` row of `mean±std` cells (sample std).
pub fn format_metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::config("no runs to report"));
    }
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let f = r.forgetting.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.3},{}",
            r.run_id, r.seed, r.method, r.scenario, r.a_final, r.a_auc_norm, r.a_auc_raw, f
        )
        .expect("write to string");
    }
    let cell = |xs: Vec<f64>, prec: usize| {
        if xs.is_empty() {
            return String::new();
        }
        let (m, s) = mean_std(&xs);
        format!("{m:.prec$}±{s:.prec$}")
    };
    let same = |get: fn(&MetricsRow) -> &str| {
        let first = get(&rows[0]);
        if rows.iter().all(|r| get(r) == first) {
            first.to_string()
        } else {
            "mixed".to_string()
        }
    };
    writeln!(
        out,
        "summary,,{},{},{},{},{},{}",
        same(|r| &r.method),
        same(|r| &r.scenario),
        cell(rows.iter().map(|r| r.a_final).collect(), 6),
        cell(rows.iter().map(|r| r.a_auc_norm).collect(), 6),
        cell(rows.iter().map(|r| r.a_auc_raw).collect(), 3),
        cell(rows.iter().filter_map(|r| r.forgetting).collect(), 6),
    )
    .expect("write to string");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9
    }

    #[test]
    fn a_final_examples() {
        let m = AccuracyMatrix::from_rows(vec![vec![None, Some(0.5)], vec![None, Some(0.7)]]).unwrap();
        assert!(close(a_final(&m).unwrap(), 0.6));
        let m = AccuracyMatrix::from_rows(vec![
            vec![None, None, Some(0.9)],
            vec![None, None, Some(0.3)],
            vec![None, None, Some(0.6)],
        ])
        .unwrap();
        assert!(close(a_final(&m).unwrap(), 0.6));
        let m = AccuracyMatrix::from_rows(vec![vec![None, Some(0.5)], vec![None, None]]).unwrap();
        assert!(matches!(a_final(&m), Err(Error::State(_))));
    }

    #[test]
    fn forgetting_examples() {
        let m = AccuracyMatrix::from_rows(vec![vec![Some(0.8), Some(0.6)], vec![None, Some(0.9)]]).unwrap();
        assert!(close(forgetting(&m).unwrap(), 0.2));
        let m = AccuracyMatrix::from_rows(vec![vec![Some(0.4), Some(0.6)], vec![None, Some(0.9)]]).unwrap();
        assert!(close(forgetting(&m).unwrap(), -0.2));
        let flat = AccuracyMatrix::from_rows(vec![vec![Some(0.7); 3]; 3]).unwrap();
        assert_eq!(forgetting(&flat).unwrap(), 0.0);
        assert!(matches!(forgetting(&AccuracyMatrix::new(1)), Err(Error::Domain(_))));
    }

    #[test]
    fn a_auc_examples() {
        let mut t = AccuracyTrace::new(1);
        t.push(1, 0.0).unwrap();
        t.push(2, 1.0).unwrap();
        assert_eq!(a_auc(&t).unwrap(), (0.5, 1.0));
        assert!(a_auc(&AccuracyTrace::new(1)).is_err());
        assert!(t.push(2, 0.3).is_err());
        assert!(t.push(3, 1.5).is_err());
    }

    #[test]
    fn csv_summary_row() {
        let row = |seed: u64, a: f64| MetricsRow {
            run_id: format!("r{seed}"),
            seed,
            method: "online-lora".into(),
            scenario: "disjoint".into(),
            a_final: a,
            a_auc_norm: a,
            a_auc_raw: 10.0 * a,
            forgetting: Some(0.1),
        };
        let csv = format_metrics_csv(&[row(0, 0.5), row(1, 0.7)]).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert_eq!(
            lines[3],
            "summary,,online-lora,disjoint,0.600000±0.141421,0.600000±0.141421,6.000±1.414,0.100000±0.000000"
        );
        assert!(format_metrics_csv(&[]).unwrap_err().is_config());
    }
}
