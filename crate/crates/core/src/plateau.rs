//! Loss-window peak/plateau detection.
//!
//! The window slides over the most recent `capacity` batch losses. A *peak*
//! fires when appending a loss raises the window mean by more than the
//! standard deviation the window had before the append. A *plateau* fires
//! when the window mean and (population) variance are both below their
//! thresholds, but only if a peak has been seen since the previous plateau.
//! Both checks need a full window; the peak check additionally needs the
//! window to have been full before the append.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::par_map;

pub const DEFAULT_CAPACITY: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Event {
    None,
    Peak,
    Plateau,
}

impl Event {
    pub fn as_str(self) -> &'static str {
        match self {
            Event::None => "none",
            Event::Peak => "peak",
            Event::Plateau => "plateau",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Event::None),
            "peak" => Ok(Event::Peak),
            "plateau" => Ok(Event::Plateau),
            other => Err(Error::Data(format!("unknown event {other:?}"))),
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Published per-dataset thresholds, `(name, mean, variance)`.
///
/// CORe50 and CUB-200 are assigned the values that lie inside their own
/// search grids.
pub const PRESETS: [(&str, f64, f64); 5] = [
    ("cifar100", 2.6, 0.03),
    ("imagenet-r", 5.2, 0.02),
    ("imagenet-s", 5.6, 0.06),
    ("cub200", 6.0, 0.1),
    ("core50", 24.0, 1.0),
];

/// Search grids `(name, means, variances)` for the presets above.
pub const PRESET_GRIDS: [(&str, &[f64], &[f64]); 3] = [
    ("cifar100", &[2.2, 2.6, 2.8, 3.0], &[0.02, 0.03, 0.04, 0.06, 0.08, 0.1]),
    (
        "imagenet",
        &[5.2, 5.4, 5.6, 5.8, 6.0],
        &[0.02, 0.03, 0.04, 0.06, 0.08, 0.1],
    ),
    ("core50", &[18.0, 24.0, 30.0], &[0.6, 0.8, 1.0, 1.2]),
];

pub fn preset(name: &str) -> Option<(f64, f64)> {
    PRESETS
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|&(_, m, v)| (m, v))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWindow {
    capacity: usize,
    values: VecDeque<f64>,
    mean_threshold: f64,
    var_threshold: f64,
    armed: bool,
}

fn stats(values: &VecDeque<f64>) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

impl LossWindow {
    pub fn new(capacity: usize, mean_threshold: f64, var_threshold: f64) -> Result<Self> {
        if capacity < 2 {
            return Err(Error::config(format!("window capacity {capacity} < 2")));
        }
        if !mean_threshold.is_finite() || !var_threshold.is_finite() {
            return Err(Error::config("window thresholds must be finite"));
        }
        Ok(Self {
            capacity,
            values: VecDeque::with_capacity(capacity + 1),
            mean_threshold,
            var_threshold,
            armed: false,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn thresholds(&self) -> (f64, f64) {
        (self.mean_threshold, self.var_threshold)
    }

    pub fn is_armed(&self) -> bool {
        self.armed
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Mean and variance of the values currently held, `None` when empty.
    pub fn stats(&self) -> Option<(f64, f64)> {
        (!self.values.is_empty()).then(|| stats(&self.values))
    }

    pub fn push(&mut self, loss: f64) -> Result<Event> {
        if !loss.is_finite() {
            return Err(Error::Data(format!("non-finite loss {loss}")));
        }
        let before = (self.values.len() == self.capacity).then(|| stats(&self.values));
        self.values.push_back(loss);
        if self.values.len() > self.capacity {
            self.values.pop_front();
        }
        if self.values.len() < self.capacity {
            return Ok(Event::None);
        }
        let (mean, var) = stats(&self.values);
        if let Some((prev_mean, prev_var)) = before {
            if mean - prev_mean > prev_var.sqrt() {
                self.armed = true;
                return Ok(Event::Peak);
            }
        }
        if self.armed && mean < self.mean_threshold && var < self.var_threshold {
            self.armed = false;
            return Ok(Event::Plateau);
        }
        Ok(Event::None)
    }

    /// Empties the window and disarms it; thresholds are kept.
    pub fn reset(&mut self) {
        self.values.clear();
        self.armed = false;
    }
}

/// One row of the detector's event log.
#[derive(Clone, Debug, PartialEq)]
pub struct EventRow {
    pub step: usize,
    pub loss: f64,
    pub mean: f64,
    pub var: f64,
    pub event: Event,
}

/// Runs a fresh copy of `template` over `losses`.
pub fn replay(template: &LossWindow, losses: &[f64]) -> Result<Vec<EventRow>> {
    let mut w = template.clone();
    w.reset();
    losses
        .iter()
        .enumerate()
        .map(|(step, &loss)| {
            let event = w.push(loss)?;
            let (mean, var) = w.stats().expect("non-empty after push");
            Ok(EventRow {
                step,
                loss,
                mean,
                var,
                event,
            })
        })
        .collect()
}

/// Parses a loss trace with one float per line; blank lines are skipped.
pub fn parse_loss_csv(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse::<f64>()
                .map_err(|e| Error::Data(format!("line {}: {l:?}: {e}", i + 1)))
        })
        .collect()
}

/// One float per line, printed with round-trip precision.
pub fn format_loss_csv(losses: &[f64]) -> String {
    losses.iter().map(|l| format!("{l}\n")).collect()
}

pub fn format_event_csv(rows: &[EventRow]) -> String {
    let mut out = String::from("step,loss,mean,var,event\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.loss, r.mean, r.var, r.event
        ));
    }
    out
}

pub fn parse_event_csv(text: &str) -> Result<Vec<EventRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("step,loss,mean,var,event") => {}
        other => return Err(Error::Data(format!("unexpected header {other:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Data(format!("malformed row {l:?}")));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Data(format!("{s:?}: {e}")))
            };
            Ok(EventRow {
                step: f[0]
                    .parse()
                    .map_err(|e| Error::Data(format!("{:?}: {e}", f[0])))?,
                loss: num(f[1])?,
                mean: num(f[2])?,
                var: num(f[3])?,
                event: Event::parse(f[4])?,
            })
        })
        .collect()
}

/// Exhaustive search over `means × vars` for the pair with the highest
/// validation score. Ties go to the smaller mean, then the smaller variance.
/// Candidate runs are evaluated in parallel when enabled.
pub fn grid_search_thresholds<F>(means: &[f64], vars: &[f64], validation_run: F) -> Result<(f64, f64)>
where
    F: Fn(f64, f64) -> Result<f64> + Sync + Send,
{
    if means.is_empty() || vars.is_empty() {
        return Err(Error::config("threshold grids must be non-empty"));
    }
    let mut pairs: Vec<(f64, f64)> = means
        .iter()
        .flat_map(|&m| vars.iter().map(move |&v| (m, v)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let scores = par_map(&pairs, |&(m, v)| validation_run(m, v));
    let mut best: Option<((f64, f64), f64)> = None;
    for (pair, score) in pairs.into_iter().zip(scores) {
        let score = score?;
        let score = if score.is_nan() { f64::NEG_INFINITY } else { score };
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((pair, score));
        }
    }
    Ok(best.expect("non-empty grid").0)
}
