use serde::{Deserialize, Serialize};

use crate::data_synth::{BenchmarkSplit, Role};
use crate::error::{MotifError, Result};

/// Rollout outcome counts for one (embodiment, task) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub embodiment_id: String,
    pub task_id: String,
    pub role: Role,
    pub successes: usize,
    pub rollouts: usize,
}

impl PairResult {
    pub fn rate(&self) -> f64 {
        if self.rollouts == 0 {
            0.0
        } else {
            self.successes as f64 / self.rollouts as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Per-pair rates in split order.
    pub rates: Vec<(String, String, Role, f64)>,
    pub global: f64,
    pub transfer: f64,
    pub rollouts_per_pair: usize,
    pub seeds: Vec<u64>,
}

impl Metrics {
    pub fn rate(&self, embodiment: &str, task: &str) -> Option<f64> {
        self.rates
            .iter()
            .find(|(e, t, _, _)| e == embodiment && t == task)
            .map(|r| r.3)
    }
}

/// Global is the unweighted mean rate over every pair of the split,
/// Transfer the mean over its Few pairs.
pub fn eval_metrics(results: &[(String, String, f64)], split: &BenchmarkSplit) -> Result<Metrics> {
    let mut rates = Vec::with_capacity(split.pairs.len());
    for p in &split.pairs {
        let r = results
            .iter()
            .find(|(e, t, _)| *e == p.embodiment_id && *t == p.task_id)
            .map(|r| r.2)
            .ok_or_else(|| {
                MotifError::Incomplete(format!("no results for {}/{}", p.embodiment_id, p.task_id))
            })?;
        if !(0.0..=1.0).contains(&r) {
            return Err(MotifError::Domain(format!(
                "rate {r} for {}/{} outside [0, 1]",
                p.embodiment_id, p.task_id
            )));
        }
        rates.push((p.embodiment_id.clone(), p.task_id.clone(), p.role, r));
    }
    if rates.is_empty() {
        return Err(MotifError::Incomplete("split has no pairs".into()));
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let all: Vec<f64> = rates.iter().map(|r| r.3).collect();
    let few: Vec<f64> = rates.iter().filter(|r| r.2 == Role::Few).map(|r| r.3).collect();
    if few.is_empty() {
        return Err(MotifError::Incomplete("split has no Few pairs".into()));
    }
    Ok(Metrics {
        global: mean(&all),
        transfer: mean(&few),
        rates,
        rollouts_per_pair: 0,
        seeds: Vec::new(),
    })
}

/// [`eval_metrics`] on rollout counts.
pub fn metrics_from_pairs(results: &[PairResult], split: &BenchmarkSplit, seeds: &[u64]) -> Result<Metrics> {
    let rates: Vec<(String, String, f64)> = results
        .iter()
        .map(|r| (r.embodiment_id.clone(), r.task_id.clone(), r.rate()))
        .collect();
    let mut m = eval_metrics(&rates, split)?;
    m.rollouts_per_pair = results.iter().map(|r| r.rollouts).min().unwrap_or(0);
    m.seeds = seeds.to_vec();
    Ok(m)
}
