use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Losses logged at one epoch (UNet33) or generator step (adversarial models).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Total generator objective (UNet33: mean training L2 of the epoch).
    pub generator: f64,
    pub critic: Option<f64>,
    pub penalty: Option<f64>,
    pub l1: Option<f64>,
    pub cosine: Option<f64>,
    pub val_l2: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// `epoch` or `generator_step`.
    pub unit: String,
    pub records: Vec<StepRecord>,
    /// Step with the lowest validation loss.
    pub best_step: Option<usize>,
    pub best_val_l2: Option<f64>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn new(unit: &str) -> Self {
        TrainHistory {
            unit: unit.to_string(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, record: StepRecord) {
        if let Some(v) = record.val_l2 {
            if self.best_val_l2.is_none_or(|b| v < b) {
                self.best_val_l2 = Some(v);
                self.best_step = Some(record.step);
            }
        }
        self.records.push(record);
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record([
            self.unit.as_str(),
            "generator",
            "critic",
            "penalty",
            "l1",
            "cosine",
            "val_l2",
        ])?;
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.10e}")).unwrap_or_default();
        for r in &self.records {
            csv.write_record([
                r.step.to_string(),
                format!("{:.10e}", r.generator),
                opt(r.critic),
                opt(r.penalty),
                opt(r.l1),
                opt(r.cosine),
                opt(r.val_l2),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }
}

/// Stops once the monitored loss has not improved for `patience`
/// consecutive observations.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_step: Option<usize>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_step: None,
            since_best: 0,
        }
    }

    /// Records `loss` at `step`; returns true when training should stop.
    pub fn observe(&mut self, step: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_step = Some(step);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }

    /// True if the most recent observation set a new best.
    pub fn improved(&self) -> bool {
        self.best_step.is_some() && self.since_best == 0
    }

    pub fn best_step(&self) -> Option<usize> {
        self.best_step
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_stops_after_patience() {
        let k = 7;
        let mut es = EarlyStopping::new(10);
        let mut stopped_at = None;
        for epoch in 0..100 {
            let loss = if epoch <= k {
                1.0 / (epoch + 1) as f64
            } else {
                0.5
            };
            if es.observe(epoch, loss) {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(k + 10));
        assert_eq!(es.best_step(), Some(k));
    }

    #[test]
    fn best_marker_tracks_minimum() {
        let mut h = TrainHistory::new("epoch");
        for (s, v) in [(0, 0.5), (1, 0.3), (2, 0.4), (3, 0.3)] {
            h.push(StepRecord {
                step: s,
                generator: v,
                critic: None,
                penalty: None,
                l1: None,
                cosine: None,
                val_l2: Some(v),
            });
        }
        assert_eq!(h.best_step, Some(1));
        let csv = h.to_csv().unwrap();
        assert!(csv.starts_with("epoch,generator,critic"));
        assert_eq!(csv.lines().count(), 5);
    }
}
