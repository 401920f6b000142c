use std::path::Path;

use motif_nn::Tensor;
use serde::{Deserialize, Serialize};

use super::split::Layout;
use super::{
    synthesize_episode, EmbodimentSpec, Episode, ProfileKind, Scene, SynthesisParams, TaskSpec,
    OBS_DIM, STATE_DIM,
};
use crate::error::{MotifError, Result};
use crate::geom::Pose2;
use crate::store;

const SCHEMA_VERSION: u32 = 1;

/// Everything needed to regenerate a corpus from a master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub embodiments: Vec<EmbodimentSpec>,
    pub tasks: Vec<TaskSpec>,
    pub episodes_per_pair: usize,
    pub synthesis: SynthesisParams,
    pub layout: Layout,
}

impl Default for BenchmarkConfig {
    /// Three embodiments with different reach, speed, mounting and action
    /// spaces; four tasks; 50 demonstrations per pair.
    fn default() -> Self {
        let embodiments = vec![
            EmbodimentSpec::new("alpha", Pose2::new(0.0, 0.0, 0.0), 1.0, 1.0, 4, 101),
            EmbodimentSpec::new("beta", Pose2::new(1.6, 0.4, 2.1), 0.7, 1.2, 5, 202),
            EmbodimentSpec::new("gamma", Pose2::new(-1.1, 1.3, -1.2), 1.4, 0.85, 6, 303),
        ];
        let tasks = vec![
            TaskSpec::new("place_a", 0, "put the block on marker A", ProfileKind::PlaceAtA),
            TaskSpec::new("place_b", 1, "swing the block over to marker B", ProfileKind::PlaceAtB),
            TaskSpec::new("pull_home", 2, "pull the block back home", ProfileKind::PullHome),
            TaskSpec::new(
                "mid_turn",
                3,
                "turn the block to the middle of the markers",
                ProfileKind::MidpointRotate,
            ),
        ];
        let few = [
            ("alpha", "place_a"),
            ("beta", "place_b"),
            ("gamma", "pull_home"),
            ("alpha", "mid_turn"),
        ];
        Self {
            embodiments,
            tasks,
            episodes_per_pair: 50,
            synthesis: SynthesisParams::default(),
            layout: Layout::from_few(&few),
        }
    }
}

impl BenchmarkConfig {
    pub fn embodiment_index(&self, id: &str) -> Option<usize> {
        self.embodiments.iter().position(|e| e.id == id)
    }

    pub fn task_index(&self, id: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.id == id)
    }

    pub fn embodiment(&self, id: &str) -> Result<&EmbodimentSpec> {
        self.embodiments
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| MotifError::Config(format!("unknown embodiment {id}")))
    }

    pub fn task(&self, id: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| MotifError::Config(format!("unknown task {id}")))
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.embodiments.iter().enumerate() {
            e.validate()?;
            if self.embodiments[..i].iter().any(|o| o.id == e.id) {
                return Err(MotifError::Config(format!("duplicate embodiment id {}", e.id)));
            }
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|o| o.id == t.id) {
                return Err(MotifError::Config(format!("duplicate task id {}", t.id)));
            }
            if t.instruction >= self.tasks.len() {
                return Err(MotifError::Config(format!(
                    "task {}: instruction token {} outside vocabulary of {}",
                    t.id,
                    t.instruction,
                    self.tasks.len()
                )));
            }
            if !(t.success_radius > 0.0) {
                return Err(MotifError::Config(format!("task {}: ε must be positive", t.id)));
            }
        }
        if self.episodes_per_pair == 0 {
            return Err(MotifError::Config("episodes_per_pair must be positive".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        self.tasks.len()
    }
}

/// Seed of episode `k` of pair `(e, t)`.
pub fn episode_seed(master: u64, e: usize, t: usize, k: usize) -> u64 {
    let key = ((e as u64) << 40) ^ ((t as u64) << 20) ^ k as u64;
    splitmix64(master ^ splitmix64(key))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// All demonstrations, ordered by embodiment, then task, then collection
/// index.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: BenchmarkConfig,
    pub master_seed: u64,
    pub episodes: Vec<Episode>,
}

impl Corpus {
    /// Collection-order episodes of one pair.
    pub fn pair(&self, embodiment: usize, task: usize) -> &[Episode] {
        let n = self.config.episodes_per_pair;
        let start = (embodiment * self.config.tasks.len() + task) * n;
        &self.episodes[start..start + n]
    }
}

pub fn generate_corpus(config: &BenchmarkConfig, master_seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut episodes = Vec::new();
    for (e, emb) in config.embodiments.iter().enumerate() {
        for (t, task) in config.tasks.iter().enumerate() {
            for k in 0..config.episodes_per_pair {
                let seed = episode_seed(master_seed, e, t, k);
                episodes.push(synthesize_episode(emb, task, seed, &config.synthesis)?);
            }
        }
    }
    Ok(Corpus {
        config: config.clone(),
        master_seed,
        episodes,
    })
}

#[derive(Serialize, Deserialize)]
struct EpisodeMeta {
    embodiment_id: String,
    task_id: String,
    instruction: usize,
    seed: u64,
    scene: Scene,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    master_seed: u64,
    config: BenchmarkConfig,
    episodes: Vec<EpisodeMeta>,
}

const MANIFEST: &str = "manifest.json";
const ARRAYS: &str = "episodes.bin";

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    store::ensure_dir(dir)?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        master_seed: corpus.master_seed,
        config: corpus.config.clone(),
        episodes: corpus
            .episodes
            .iter()
            .map(|e| EpisodeMeta {
                embodiment_id: e.embodiment_id.clone(),
                task_id: e.task_id.clone(),
                instruction: e.instruction,
                seed: e.seed,
                scene: e.scene,
                len: e.len(),
            })
            .collect(),
    };
    let names: Vec<[String; 3]> = (0..corpus.episodes.len())
        .map(|i| {
            [
                format!("episode {i} states"),
                format!("episode {i} actions"),
                format!("episode {i} observations"),
            ]
        })
        .collect();
    let arrays = corpus.episodes.iter().zip(&names).flat_map(|(e, n)| {
        [
            (n[0].as_str(), &e.states),
            (n[1].as_str(), &e.actions),
            (n[2].as_str(), &e.observations),
        ]
    });
    store::write_arrays(&dir.join(ARRAYS), arrays)?;
    store::write_json(&dir.join(MANIFEST), &manifest)
}

/// Loads a corpus; any missing, truncated or mis-shaped record fails the
/// whole read.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: Manifest = store::read_json(&dir.join(MANIFEST))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(MotifError::parse(
            MANIFEST,
            format!("unsupported schema version {}", manifest.schema_version),
        ));
    }
    manifest.config.validate()?;
    let arrays = store::read_arrays(&dir.join(ARRAYS))?;
    if arrays.len() != 3 * manifest.episodes.len() {
        return Err(MotifError::parse(
            ARRAYS,
            format!(
                "expected {} records for {} episodes, found {}",
                3 * manifest.episodes.len(),
                manifest.episodes.len(),
                arrays.len()
            ),
        ));
    }
    let mut arrays = arrays.into_iter();
    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for (i, meta) in manifest.episodes.into_iter().enumerate() {
        let emb = manifest.config.embodiment(&meta.embodiment_id)?;
        let widths = [STATE_DIM, emb.action_dim, OBS_DIM];
        let mut parts: Vec<Tensor> = Vec::with_capacity(3);
        for (kind, w) in ["states", "actions", "observations"].iter().zip(widths) {
            let (name, t) = arrays.next().expect("record count checked");
            let expected = format!("episode {i} {kind}");
            if name != expected {
                return Err(MotifError::parse(name, format!("expected record {expected}")));
            }
            if t.shape() != [meta.len, w] {
                return Err(MotifError::parse(
                    name,
                    format!("shape {:?}, expected [{}, {w}]", t.shape(), meta.len),
                ));
            }
            parts.push(t);
        }
        let observations = parts.pop().unwrap();
        let actions = parts.pop().unwrap();
        let states = parts.pop().unwrap();
        episodes.push(Episode {
            embodiment_id: meta.embodiment_id,
            task_id: meta.task_id,
            instruction: meta.instruction,
            seed: meta.seed,
            scene: meta.scene,
            states,
            actions,
            observations,
        });
    }
    let corpus = Corpus {
        config: manifest.config,
        master_seed: manifest.master_seed,
        episodes,
    };
    check_order(&corpus)?;
    Ok(corpus)
}

fn check_order(corpus: &Corpus) -> Result<()> {
    let c = &corpus.config;
    let expected = c.embodiments.len() * c.tasks.len() * c.episodes_per_pair;
    if corpus.episodes.len() != expected {
        return Err(MotifError::parse(
            MANIFEST,
            format!("{} episodes, expected {expected}", corpus.episodes.len()),
        ));
    }
    for (i, ep) in corpus.episodes.iter().enumerate() {
        let pair = i / c.episodes_per_pair;
        let (e, t) = (pair / c.tasks.len(), pair % c.tasks.len());
        if ep.embodiment_id != c.embodiments[e].id || ep.task_id != c.tasks[t].id {
            return Err(MotifError::parse(
                format!("episode {i}"),
                format!(
                    "found pair {}/{}, expected {}/{}",
                    ep.embodiment_id, ep.task_id, c.embodiments[e].id, c.tasks[t].id
                ),
            ));
        }
    }
    Ok(())
}
