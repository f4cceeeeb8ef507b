//! Offline transition datasets: collection, the `EQRL` file format and batch sampling.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array4, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{behavior_action, bounds, discounted_return, EnvConfig, GraspEnv, PolicyTag, ENV_NAME};
use crate::error::{Error, Result};
use crate::group::{rotate_plane, CyclicGroup, FactoredAction, PlaneRotation};

pub const MAGIC: &[u8; 4] = b"EQRL";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_BYTES: usize = 8;

/// Discount used for the recorded behavioral return.
pub const BEHAVIOR_GAMMA: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub env_name: String,
    pub env_config_hash: String,
    pub env_config: EnvConfig,
    pub observation_shape: [usize; 3],
    pub action_dim: usize,
    pub episodes: usize,
    pub transitions: usize,
    pub episode_lengths: Vec<usize>,
    pub policy: PolicyTag,
    pub behavioral_return: f64,
    pub seed: u64,
    pub format_version: u32,
}

impl DatasetManifest {
    fn obs_len(&self) -> usize {
        self.observation_shape.iter().product()
    }

    /// Exact blob size implied by the counts.
    pub fn blob_len(&self) -> usize {
        let n = self.transitions;
        HEADER_BYTES + 4 * (2 * n * self.obs_len() + n * self.action_dim + 2 * n)
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {}", self.format_version)));
        }
        if self.action_dim != FactoredAction::DIM {
            return Err(Error::Format(format!("action dimension {} ≠ {}", self.action_dim, FactoredAction::DIM)));
        }
        if self.observation_shape != self.env_config.observation_shape() {
            return Err(Error::Format("observation shape disagrees with the environment config".into()));
        }
        if self.env_config_hash != self.env_config.config_hash() {
            return Err(Error::Format("environment config hash mismatch".into()));
        }
        if self.episode_lengths.len() != self.episodes
            || self.episode_lengths.iter().sum::<usize>() != self.transitions
        {
            return Err(Error::Format("episode counts disagree with the transition count".into()));
        }
        Ok(())
    }
}

/// One stored transition, action in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: ndarray::Array3<f32>,
    pub action: [f32; 5],
    pub reward: f32,
    pub next_state: ndarray::Array3<f32>,
    pub done: bool,
    pub episode: usize,
}

/// An immutable collection of transitions with flat storage.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub manifest: DatasetManifest,
    states: Vec<f32>,
    actions: Vec<f32>,
    rewards: Vec<f32>,
    dones: Vec<f32>,
    next_states: Vec<f32>,
}

/// How much data to collect.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Episodes(usize),
    /// Whole episodes until at least this many transitions.
    Transitions(usize),
}

/// Rolls out the behavior policy from a fresh `ChaCha8Rng` seeded with `seed`.
pub fn collect_dataset(env_cfg: &EnvConfig, policy: PolicyTag, budget: Budget, seed: u64) -> Result<OfflineDataset> {
    match budget {
        Budget::Episodes(0) | Budget::Transitions(0) => {
            return Err(Error::Config("collection budget must be positive".into()))
        }
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = GraspEnv::new(env_cfg.clone())?;
    let (mut states, mut actions, mut rewards, mut dones, mut next_states) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut lengths = Vec::new();
    let mut returns = 0.0;
    loop {
        let finished = match budget {
            Budget::Episodes(n) => lengths.len() >= n,
            Budget::Transitions(n) => rewards.len() >= n,
        };
        if finished {
            break;
        }
        let mut obs = env.reset(&mut rng);
        let mut ep_rewards = Vec::new();
        loop {
            let a = bounds::clip(&behavior_action(env_cfg, env.state(), policy, &mut rng));
            let st = env.step(&a)?;
            states.extend(obs.iter().copied());
            actions.extend(a.to_array().map(|v| v as f32));
            rewards.push(st.reward as f32);
            dones.push(if st.done { 1.0 } else { 0.0 });
            next_states.extend(st.observation.iter().copied());
            ep_rewards.push(st.reward);
            obs = st.observation;
            if st.done {
                break;
            }
        }
        returns += discounted_return(&ep_rewards, BEHAVIOR_GAMMA);
        lengths.push(ep_rewards.len());
    }
    let manifest = DatasetManifest {
        env_name: ENV_NAME.into(),
        env_config_hash: env_cfg.config_hash(),
        env_config: env_cfg.clone(),
        observation_shape: env_cfg.observation_shape(),
        action_dim: FactoredAction::DIM,
        episodes: lengths.len(),
        transitions: rewards.len(),
        behavioral_return: returns / lengths.len() as f64,
        episode_lengths: lengths,
        policy,
        seed,
        format_version: FORMAT_VERSION,
    };
    Ok(OfflineDataset {
        manifest,
        states,
        actions,
        rewards,
        dones,
        next_states,
    })
}

/// `(manifest, blob)` paths for a dataset name; a trailing `.bin` or
/// `.manifest.json` is stripped.
pub fn dataset_paths(path: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let p = path.as_ref().to_string_lossy().into_owned();
    let stem = p
        .strip_suffix(".manifest.json")
        .or_else(|| p.strip_suffix(".bin"))
        .unwrap_or(&p)
        .to_string();
    (PathBuf::from(format!("{stem}.manifest.json")), PathBuf::from(format!("{stem}.bin")))
}

fn push_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8], at: &mut usize, n: usize) -> Vec<f32> {
    let v = bytes[*at..*at + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    *at += 4 * n;
    v
}

impl OfflineDataset {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn obs_len(&self) -> usize {
        self.manifest.obs_len()
    }

    pub fn get(&self, i: usize) -> Result<Transition> {
        if i >= self.len() {
            return Err(Error::Domain(format!("transition {i} out of range")));
        }
        let o = self.obs_len();
        let shape = self.manifest.observation_shape;
        let img = |v: &[f32]| ndarray::Array3::from_shape_vec(shape, v[i * o..(i + 1) * o].to_vec()).expect("shape");
        let mut episode = 0;
        let mut acc = 0;
        for (e, &l) in self.manifest.episode_lengths.iter().enumerate() {
            acc += l;
            if i < acc {
                episode = e;
                break;
            }
        }
        Ok(Transition {
            state: img(&self.states),
            action: std::array::from_fn(|k| self.actions[i * 5 + k]),
            reward: self.rewards[i],
            next_state: img(&self.next_states),
            done: self.dones[i] != 0.0,
            episode,
        })
    }

    /// Serialized blob: magic, version, then states, actions, rewards, dones,
    /// next states as little-endian `f32`.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.manifest.blob_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        push_f32s(&mut out, &self.states);
        push_f32s(&mut out, &self.actions);
        push_f32s(&mut out, &self.rewards);
        push_f32s(&mut out, &self.dones);
        push_f32s(&mut out, &self.next_states);
        out
    }

    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (m, b) = dataset_paths(path);
        if let Some(dir) = m.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&m, self.manifest_json())?;
        std::fs::write(&b, self.to_blob())?;
        Ok(())
    }

    pub fn from_parts(manifest: DatasetManifest, blob: &[u8]) -> Result<Self> {
        manifest.validate()?;
        if blob.len() < HEADER_BYTES || &blob[..4] != MAGIC {
            return Err(Error::Format("missing EQRL magic".into()));
        }
        let version = u32::from_le_bytes([blob[4], blob[5], blob[6], blob[7]]);
        if version != manifest.format_version {
            return Err(Error::Format(format!("blob version {version} ≠ manifest version {}", manifest.format_version)));
        }
        if blob.len() != manifest.blob_len() {
            return Err(Error::Format(format!(
                "blob holds {} bytes but the manifest implies {}",
                blob.len(),
                manifest.blob_len()
            )));
        }
        let (n, o) = (manifest.transitions, manifest.obs_len());
        let mut at = HEADER_BYTES;
        let states = read_f32s(blob, &mut at, n * o);
        let actions = read_f32s(blob, &mut at, n * manifest.action_dim);
        let rewards = read_f32s(blob, &mut at, n);
        let dones = read_f32s(blob, &mut at, n);
        let next_states = read_f32s(blob, &mut at, n * o);
        Ok(Self {
            manifest,
            states,
            actions,
            rewards,
            dones,
            next_states,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (m, b) = dataset_paths(path);
        let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&m)?)?;
        let blob = std::fs::read(&b)?;
        Self::from_parts(manifest, &blob)
    }

    /// Copies transitions `idx` into a batch without augmentation.
    pub fn gather(&self, idx: &[usize]) -> Batch {
        let [c, h, w] = self.manifest.observation_shape;
        let o = self.obs_len();
        let b = idx.len();
        let mut states = Array4::zeros((b, c, h, w));
        let mut next_states = Array4::zeros((b, c, h, w));
        let mut actions = Array2::zeros((b, 5));
        let mut rewards = Array2::zeros((b, 1));
        let mut dones = Array2::zeros((b, 1));
        for (row, &i) in idx.iter().enumerate() {
            let view = |v: &[f32]| ArrayView3::from_shape((c, h, w), &v[i * o..(i + 1) * o]).expect("shape").to_owned();
            states.slice_mut(s![row, .., .., ..]).assign(&view(&self.states));
            next_states.slice_mut(s![row, .., .., ..]).assign(&view(&self.next_states));
            for k in 0..5 {
                actions[[row, k]] = self.actions[i * 5 + k];
            }
            rewards[[row, 0]] = self.rewards[i];
            dones[[row, 0]] = self.dones[i];
        }
        Batch {
            states,
            actions,
            rewards,
            dones,
            next_states,
            indices: idx.to_vec(),
        }
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R, batch_size: usize, mode: Augmentation) -> Result<Batch> {
        if batch_size < 1 {
            return Err(Error::Domain("batch size must be ≥ 1".into()));
        }
        if self.is_empty() {
            return Err(Error::Precondition("cannot sample from an empty dataset".into()));
        }
        let idx = sample_indices(rng, self.len(), batch_size);
        let batch = self.gather(&idx);
        Ok(match mode {
            Augmentation::None => batch,
            Augmentation::RandomSo2 => {
                let rots: Vec<PlaneRotation> = (0..batch_size)
                    .map(|_| PlaneRotation::from_angle(rng.random_range(0.0..std::f64::consts::TAU)))
                    .collect();
                batch.rotated(&rots)
            }
            Augmentation::FullGroupC8 => batch.group_expanded(&CyclicGroup::new(8)?),
        })
    }
}

/// Uniform indices in `0..n`, with replacement.
pub fn sample_indices<R: Rng + ?Sized>(rng: &mut R, n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..n)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    RandomSo2,
    FullGroupC8,
}

/// A sampled minibatch; actions in physical units, `(λ, x, y, z, θ)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: Array4<f32>,
    pub actions: Array2<f32>,
    pub rewards: Array2<f32>,
    pub dones: Array2<f32>,
    pub next_states: Array4<f32>,
    /// Source transition of every row.
    pub indices: Vec<usize>,
}

fn rotate_image_stack(x: &mut Array4<f32>, row: usize, rot: PlaneRotation) {
    for ch in 0..x.shape()[1] {
        let img = rotate_plane(x.slice(s![row, ch, .., ..]), rot);
        x.slice_mut(s![row, ch, .., ..]).assign(&img);
    }
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rotates row `i` (both observations and `a_xy`) by `rots[i]`.
    pub fn rotated(mut self, rots: &[PlaneRotation]) -> Batch {
        assert_eq!(rots.len(), self.len());
        for (row, &rot) in rots.iter().enumerate() {
            if rot.is_identity() {
                continue;
            }
            rotate_image_stack(&mut self.states, row, rot);
            rotate_image_stack(&mut self.next_states, row, rot);
            let (x, y) = rot.apply(self.actions[[row, 1]] as f64, self.actions[[row, 2]] as f64);
            self.actions[[row, 1]] = x as f32;
            self.actions[[row, 2]] = y as f32;
        }
        self
    }

    /// Concatenation of `g · batch` over every group element, element-major.
    pub fn group_expanded(&self, group: &CyclicGroup) -> Batch {
        let parts: Vec<Batch> = group
            .elements()
            .map(|g| self.clone().rotated(&vec![group.rotation(g); self.len()]))
            .collect();
        let cat4 = |f: fn(&Batch) -> &Array4<f32>| {
            let views: Vec<_> = parts.iter().map(|p| f(p).view()).collect();
            ndarray::concatenate(ndarray::Axis(0), &views).expect("same shapes")
        };
        let cat2 = |f: fn(&Batch) -> &Array2<f32>| {
            let views: Vec<_> = parts.iter().map(|p| f(p).view()).collect();
            ndarray::concatenate(ndarray::Axis(0), &views).expect("same shapes")
        };
        Batch {
            states: cat4(|b| &b.states),
            next_states: cat4(|b| &b.next_states),
            actions: cat2(|b| &b.actions),
            rewards: cat2(|b| &b.rewards),
            dones: cat2(|b| &b.dones),
            indices: parts.iter().flat_map(|p| p.indices.iter().copied()).collect(),
        }
    }

    /// Actions mapped to `[-1, 1]^5`.
    pub fn normalized_actions(&self) -> Array2<f32> {
        let mut out = self.actions.clone();
        for mut row in out.rows_mut() {
            let a = FactoredAction::from_array(std::array::from_fn(|k| row[k] as f64));
            let n = bounds::normalize(&a);
            for k in 0..5 {
                row[k] = n[k] as f32;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_strip_known_suffixes() {
        let (m, b) = dataset_paths("out/medium.bin");
        assert_eq!(m, PathBuf::from("out/medium.manifest.json"));
        assert_eq!(b, PathBuf::from("out/medium.bin"));
        assert_eq!(dataset_paths("x.manifest.json").1, PathBuf::from("x.bin"));
    }

    #[test]
    fn zero_budget_is_rejected() {
        assert!(collect_dataset(&EnvConfig::default(), PolicyTag::Expert, Budget::Episodes(0), 0).is_err());
    }
}
