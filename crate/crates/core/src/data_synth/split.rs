//! Interleaved Full/Few allocation and the audited training-set view.

use std::cell::RefCell;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use super::Episode;
use crate::error::{MotifError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Full,
    Few,
}

/// Which (embodiment, task) pairs are few-shot targets; every other pair is
/// a full-data source.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub few: Vec<[String; 2]>,
}

impl Layout {
    pub fn from_few(pairs: &[(&str, &str)]) -> Self {
        Self {
            few: pairs
                .iter()
                .map(|(e, t)| [e.to_string(), t.to_string()])
                .collect(),
        }
    }

    pub fn role(&self, embodiment: &str, task: &str) -> Role {
        if self.few.iter().any(|[e, t]| e == embodiment && t == task) {
            Role::Few
        } else {
            Role::Full
        }
    }

    /// Six-task, three-robot simulation allocation.
    pub fn six_task_reference() -> (Vec<&'static str>, Vec<&'static str>, Self) {
        let robots = vec!["Panda", "xArm6", "WidowX AI"];
        let tasks = vec![
            "PushCube",
            "PlaceSphere",
            "PullCube",
            "LiftPegUpright",
            "PickCube",
            "StackCube",
        ];
        let layout = Self::from_few(&[
            ("Panda", "PushCube"),
            ("Panda", "PlaceSphere"),
            ("xArm6", "PullCube"),
            ("xArm6", "LiftPegUpright"),
            ("WidowX AI", "PickCube"),
            ("WidowX AI", "StackCube"),
        ]);
        (robots, tasks, layout)
    }

    /// Every task must be Full on at least one embodiment and Few on
    /// another; every Few entry must name a known pair.
    pub fn check(&self, embodiments: &[&str], tasks: &[&str]) -> Result<()> {
        for [e, t] in &self.few {
            if !embodiments.contains(&e.as_str()) || !tasks.contains(&t.as_str()) {
                return Err(MotifError::Config(format!("layout names unknown pair {e}/{t}")));
            }
        }
        for t in tasks {
            let roles: Vec<Role> = embodiments.iter().map(|e| self.role(e, t)).collect();
            if !roles.contains(&Role::Full) || !roles.contains(&Role::Few) {
                return Err(MotifError::Config(format!(
                    "task {t} must be Full on one embodiment and Few on another"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSplit {
    pub embodiment_id: String,
    pub task_id: String,
    pub role: Role,
    /// Collection-order indices usable for training.
    pub episodes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSplit {
    pub k: usize,
    pub pairs: Vec<PairSplit>,
}

impl BenchmarkSplit {
    pub fn pair(&self, embodiment: &str, task: &str) -> Option<&PairSplit> {
        self.pairs
            .iter()
            .find(|p| p.embodiment_id == embodiment && p.task_id == task)
    }

    pub fn few_pairs(&self) -> impl Iterator<Item = &PairSplit> {
        self.pairs.iter().filter(|p| p.role == Role::Few)
    }
}

/// Few pairs keep the first `k` demonstrations in collection order, Full
/// pairs keep all of them.
pub fn allocate_interleaved(corpus: &Corpus, layout: &Layout, k: usize) -> Result<BenchmarkSplit> {
    let cfg = &corpus.config;
    let embs: Vec<&str> = cfg.embodiments.iter().map(|e| e.id.as_str()).collect();
    let tasks: Vec<&str> = cfg.tasks.iter().map(|t| t.id.as_str()).collect();
    layout.check(&embs, &tasks)?;
    let n = cfg.episodes_per_pair;
    if k == 0 || k > n {
        return Err(MotifError::Config(format!(
            "K = {k} outside 1..={n} available demonstrations"
        )));
    }
    let mut pairs = Vec::new();
    for e in &embs {
        for t in &tasks {
            let role = layout.role(e, t);
            let count = if role == Role::Few { k } else { n };
            pairs.push(PairSplit {
                embodiment_id: e.to_string(),
                task_id: t.to_string(),
                role,
                episodes: (0..count).collect(),
            });
        }
    }
    Ok(BenchmarkSplit { k, pairs })
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Access {
    pub embodiment_id: String,
    pub task_id: String,
    pub index: usize,
}

/// Every episode handed out by a [`TrainingSet`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccessLog {
    pub accesses: Vec<Access>,
}

impl AccessLog {
    /// Accesses outside the split: unknown pairs, or Few-pair indices ≥ K.
    pub fn violations(&self, split: &BenchmarkSplit) -> Vec<Access> {
        self.accesses
            .iter()
            .filter(|a| match split.pair(&a.embodiment_id, &a.task_id) {
                Some(p) => match p.role {
                    Role::Few => a.index >= split.k,
                    Role::Full => !p.episodes.contains(&a.index),
                },
                None => true,
            })
            .cloned()
            .collect()
    }

    pub fn distinct(&self) -> BTreeSet<Access> {
        self.accesses.iter().cloned().collect()
    }

    pub fn extend(&mut self, other: &AccessLog) {
        self.accesses.extend(other.accesses.iter().cloned());
    }
}

/// The episodes a split allows, with every access recorded.
pub struct TrainingSet<'a> {
    corpus: &'a Corpus,
    entries: Vec<(usize, usize, usize)>,
    log: RefCell<AccessLog>,
}

impl<'a> TrainingSet<'a> {
    pub fn new(corpus: &'a Corpus, split: &BenchmarkSplit) -> Result<Self> {
        let cfg = &corpus.config;
        let mut entries = Vec::new();
        for p in &split.pairs {
            let e = cfg.embodiment_index(&p.embodiment_id).ok_or_else(|| {
                MotifError::Config(format!("split names unknown embodiment {}", p.embodiment_id))
            })?;
            let t = cfg.task_index(&p.task_id).ok_or_else(|| {
                MotifError::Config(format!("split names unknown task {}", p.task_id))
            })?;
            for &k in &p.episodes {
                if k >= cfg.episodes_per_pair {
                    return Err(MotifError::Config(format!(
                        "split index {k} beyond {} episodes of {}/{}",
                        cfg.episodes_per_pair, p.embodiment_id, p.task_id
                    )));
                }
                entries.push((e, t, k));
            }
        }
        Ok(Self {
            corpus,
            entries,
            log: RefCell::new(AccessLog::default()),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn corpus(&self) -> &Corpus {
        self.corpus
    }

    /// The `i`-th allowed episode with its embodiment and task indices.
    pub fn get(&self, i: usize) -> (usize, usize, &'a Episode) {
        let (e, t, k) = self.entries[i];
        let cfg = &self.corpus.config;
        self.log.borrow_mut().accesses.push(Access {
            embodiment_id: cfg.embodiments[e].id.clone(),
            task_id: cfg.tasks[t].id.clone(),
            index: k,
        });
        (e, t, &self.corpus.pair(e, t)[k])
    }

    pub fn log(&self) -> AccessLog {
        self.log.borrow().clone()
    }
}
