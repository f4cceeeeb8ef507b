//! Checkpoint archives: a JSON header describing every network, followed by
//! raw little-endian `f32` weights keyed by parameter name.
//!
//! Layout: magic `EQCK`, format version `u32`, header length `u64`, header
//! JSON, then the tensors back to back in header order.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::equivariant::{Actor, Critic, NetSpec, ValueNet};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 4] = b"EQCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the weight section, in `f32` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetEntry {
    /// `actor`, `critic` or `value`.
    pub key: String,
    pub spec: NetSpec,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: serde_json::Value,
    nets: Vec<NetEntry>,
}

/// Networks plus free-form metadata (the run config, eval step, return).
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub actor: Option<Actor<f32>>,
    pub critic: Option<Critic<f32>>,
    pub value: Option<ValueNet<f32>>,
}

fn entries(store: &ParamStore<f32>, offset: &mut usize) -> Vec<TensorEntry> {
    store
        .iter()
        .map(|p| {
            let e = TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: *offset,
            };
            *offset += p.value.len();
            e
        })
        .collect()
}

fn fill(store: &mut ParamStore<f32>, entry: &NetEntry, weights: &[f32]) -> Result<()> {
    if store.len() != entry.tensors.len() {
        return Err(Error::Format(format!(
            "{}: archive holds {} tensors, the spec builds {}",
            entry.key,
            entry.tensors.len(),
            store.len()
        )));
    }
    for (i, t) in entry.tensors.iter().enumerate() {
        let p = store.get(i);
        if p.name != t.name || p.value.shape() != t.shape.as_slice() {
            return Err(Error::Format(format!(
                "{}: tensor {} {:?} does not match {} {:?}",
                entry.key,
                t.name,
                t.shape,
                p.name,
                p.value.shape()
            )));
        }
        let n: usize = t.shape.iter().product();
        let data = weights
            .get(t.offset..t.offset + n)
            .ok_or_else(|| Error::Format(format!("{}: tensor {} runs past the end", entry.key, t.name)))?;
        *store.value_mut(i) = ArrayD::from_shape_vec(IxDyn(&t.shape), data.to_vec()).expect("checked length");
    }
    Ok(())
}

impl Checkpoint {
    fn stores(&self) -> Vec<(&'static str, &NetSpec, &ParamStore<f32>)> {
        let mut v = Vec::new();
        if let Some(a) = &self.actor {
            v.push(("actor", &a.spec, &a.params));
        }
        if let Some(c) = &self.critic {
            v.push(("critic", &c.spec, &c.params));
        }
        if let Some(n) = &self.value {
            v.push(("value", &n.spec, &n.params));
        }
        v
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut nets = Vec::new();
        for (key, spec, store) in self.stores() {
            nets.push(NetEntry {
                key: key.into(),
                spec: spec.clone(),
                tensors: entries(store, &mut offset),
            });
        }
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            nets,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, store) in self.stores() {
            for p in store.iter() {
                for x in p.value.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint archive".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let raw = &bytes[16 + len..];
        if raw.len() % 4 != 0 {
            return Err(Error::Format("weight section is not a whole number of f32".into()));
        }
        let weights: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let expected: usize = header
            .nets
            .iter()
            .flat_map(|n| &n.tensors)
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        if expected != weights.len() {
            return Err(Error::Format(format!(
                "header describes {expected} weights, archive holds {}",
                weights.len()
            )));
        }
        let mut ck = Checkpoint {
            meta: header.meta,
            ..Default::default()
        };
        for entry in &header.nets {
            match entry.key.as_str() {
                "actor" => {
                    let mut a = Actor::new(entry.spec.clone(), 0)?;
                    fill(&mut a.params, entry, &weights)?;
                    ck.actor = Some(a);
                }
                "critic" => {
                    let mut c = Critic::new(entry.spec.clone(), 0)?;
                    fill(&mut c.params, entry, &weights)?;
                    ck.critic = Some(c);
                }
                "value" => {
                    let mut v = ValueNet::new(entry.spec.clone(), 0)?;
                    fill(&mut v.params, entry, &weights)?;
                    ck.value = Some(v);
                }
                other => return Err(Error::Format(format!("unknown network key {other}"))),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equivariant::{ActorVariant, ArchConfig, NetRole};

    #[test]
    fn round_trip_preserves_every_weight() {
        let arch = ArchConfig::tiny(4);
        let ck = Checkpoint {
            meta: serde_json::json!({"step": 3}),
            actor: Some(Actor::new(NetSpec::new(NetRole::Actor(ActorVariant::Iql), arch.clone(), true), 1).unwrap()),
            critic: Some(Critic::new(NetSpec::new(NetRole::Critic, arch.clone(), false), 2).unwrap()),
            value: None,
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert!(back.value.is_none());
        let pairs = [
            (&ck.actor.as_ref().unwrap().params, &back.actor.as_ref().unwrap().params),
            (&ck.critic.as_ref().unwrap().params, &back.critic.as_ref().unwrap().params),
        ];
        for (a, b) in pairs {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x == y));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let arch = ArchConfig::tiny(4);
        let ck = Checkpoint {
            value: Some(ValueNet::new(NetSpec::new(NetRole::Value, arch, true), 1).unwrap()),
            ..Default::default()
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
