use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentSpec;
use crate::api::AccessCounts;
use crate::error::Result;
use crate::relocation::RelocationCounters;
use crate::sampling::SamplingCounters;
use crate::stats::ChiSquareOutcome;
use crate::transport::{Cause, MessageCounts, MessageKind};

/// Message counts keyed by kind and by cause names.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageBreakdown {
    pub total: u64,
    pub by_kind: BTreeMap<String, u64>,
    pub by_cause: BTreeMap<String, u64>,
}

impl From<&MessageCounts> for MessageBreakdown {
    fn from(c: &MessageCounts) -> Self {
        MessageBreakdown {
            total: c.total(),
            by_kind: MessageKind::ALL.iter().map(|k| (k.name().to_string(), c.kind(*k))).collect(),
            by_cause: Cause::ALL.iter().map(|k| (k.name().to_string(), c.cause(*k))).collect(),
        }
    }
}

impl MessageBreakdown {
    pub fn cause(&self, c: Cause) -> u64 {
        self.by_cause.get(c.name()).copied().unwrap_or(0)
    }

    pub fn kind(&self, k: MessageKind) -> u64 {
        self.by_kind.get(k.name()).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Held-out metric after the epoch, as seen by node 0.
    pub test_metric: f64,
    /// Virtual time for simulated runs, wall-clock time otherwise.
    pub duration_secs: f64,
    pub points: u64,
    pub direct_accesses: u64,
    pub sampling_accesses: u64,
    pub messages: MessageBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub spec: ExperimentSpec,
    pub workload: String,
    pub metric: String,
    pub num_keys: usize,
    pub num_replicated: usize,
    pub initial_metric: f64,
    pub epochs: Vec<EpochMetrics>,
    /// Held-out metric after the final synchronization round.
    pub final_metric: f64,
    pub sync_rounds: u64,
    pub sync_frequency_hz: Option<f64>,
    pub messages: MessageBreakdown,
    pub relocation: RelocationCounters,
    pub sampling: Option<SamplingCounters>,
    /// Sampled-key counts of the whole run against the target distribution.
    pub sampled_chi_square: Option<ChiSquareOutcome>,
    pub histogram: Option<AccessCounts>,
    /// Virtual time for simulated runs.
    pub elapsed_secs: f64,
    pub wall_clock_secs: f64,
}

impl Report {
    /// Held-out metric after the last epoch, or before training for 0 epochs.
    pub fn last_metric(&self) -> f64 {
        self.epochs.last().map_or(self.initial_metric, |e| e.test_metric)
    }

    /// Same report with the wall-clock field cleared, for comparing runs.
    pub fn without_timestamps(&self) -> Report {
        Report {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }

    /// Consistency checks every report must pass; returns the violations.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check_messages = |what: &str, m: &MessageBreakdown| {
            let by_cause: u64 = m.by_cause.values().sum();
            let by_kind: u64 = m.by_kind.values().sum();
            if by_cause != m.total || by_kind != m.total {
                out.push(format!(
                    "{what}: {} messages but {by_kind} by kind and {by_cause} by cause",
                    m.total
                ));
            }
        };
        check_messages("run", &self.messages);
        for e in &self.epochs {
            check_messages(&format!("epoch {}", e.epoch), &e.messages);
        }
        let epoch_sum: u64 = self.epochs.iter().map(|e| e.messages.total).sum();
        if epoch_sum > self.messages.total {
            out.push(format!("epochs report {epoch_sum} messages, run only {}", self.messages.total));
        }
        if let Some(h) = &self.histogram {
            let direct: u64 = self.epochs.iter().map(|e| e.direct_accesses).sum();
            let sampling: u64 = self.epochs.iter().map(|e| e.sampling_accesses).sum();
            if h.direct.iter().sum::<u64>() != direct || h.sampling.iter().sum::<u64>() != sampling {
                out.push("access histogram does not match the issued operations".into());
            }
        }
        if self.epochs.len() != self.spec.epochs {
            out.push(format!("{} epoch rows for {} epochs", self.epochs.len(), self.spec.epochs));
        }
        out
    }

    /// Writes `report.json`, `epochs.csv` and, if collected, `histogram.csv`
    /// into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        fs::write(dir.join("report.json"), json)?;
        fs::write(dir.join("epochs.csv"), epochs_csv(self))?;
        if let Some(csv) = access_histogram_csv(self) {
            fs::write(dir.join("histogram.csv"), csv)?;
        }
        Ok(())
    }
}

/// One row per epoch, messages split by kind and cause.
pub fn epochs_csv(report: &Report) -> String {
    let mut s = String::from("epoch,train_loss,test_metric,duration_secs,points,direct_accesses,sampling_accesses,messages");
    for k in MessageKind::ALL {
        write!(s, ",msg_{}", k.name()).unwrap();
    }
    for c in Cause::ALL {
        write!(s, ",cause_{}", c.name()).unwrap();
    }
    s.push('\n');
    for e in &report.epochs {
        write!(
            s,
            "{},{},{},{},{},{},{},{}",
            e.epoch,
            e.train_loss,
            e.test_metric,
            e.duration_secs,
            e.points,
            e.direct_accesses,
            e.sampling_accesses,
            e.messages.total
        )
        .unwrap();
        for k in MessageKind::ALL {
            write!(s, ",{}", e.messages.kind(k)).unwrap();
        }
        for c in Cause::ALL {
            write!(s, ",{}", e.messages.cause(c)).unwrap();
        }
        s.push('\n');
    }
    s
}

/// Access counts of the whole run sorted by total count, most accessed first
/// (ties by key), with direct and sampling accesses in separate columns.
pub fn access_histogram_csv(report: &Report) -> Option<String> {
    let h = report.histogram.as_ref()?;
    let mut order: Vec<usize> = (0..h.direct.len()).collect();
    let total = |k: usize| h.direct[k] + h.sampling[k];
    order.sort_by(|&a, &b| total(b).cmp(&total(a)).then(a.cmp(&b)));
    let mut s = String::from("rank,key,direct,sampling,total\n");
    for (rank, k) in order.into_iter().enumerate() {
        writeln!(s, "{},{},{},{},{}", rank + 1, k, h.direct[k], h.sampling[k], total(k)).unwrap();
    }
    Some(s)
}
