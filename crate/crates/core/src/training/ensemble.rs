use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::neural::{Architecture, ModelWeights, Tensor4, load_weights, save_weights};

/// Anything that maps a batch of windows to per-pixel probabilities.
pub trait Predictor: Sync {
    /// Window side the predictor consumes.
    fn window(&self) -> usize;
    fn predict(&self, batch: &Tensor4<f32>) -> Result<Tensor4<f32>>;
}

impl Predictor for ModelWeights<f32> {
    fn window(&self) -> usize {
        self.architecture().side
    }

    fn predict(&self, batch: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        self.forward(batch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Forward,
    Corrector,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Forward => "forward",
            Role::Corrector => "corrector",
        }
    }
}

/// Identically structured members whose outputs are averaged.
#[derive(Clone, Debug)]
pub struct Ensemble {
    role: Role,
    members: Vec<ModelWeights<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EnsembleIndex {
    role: Role,
    architecture: Architecture,
    members: Vec<String>,
    fingerprints: Vec<String>,
}

const INDEX_FILE: &str = "ensemble.json";

impl Ensemble {
    pub fn new(role: Role, members: Vec<ModelWeights<f32>>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Parameter("an ensemble needs at least one member".into()))?
            .architecture();
        if let Some(bad) = members.iter().find(|m| m.architecture() != first) {
            return Err(Error::Shape(format!(
                "ensemble members disagree on architecture: {first:?} vs {:?}",
                bad.architecture()
            )));
        }
        Ok(Self { role, members })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn members(&self) -> &[ModelWeights<f32>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn architecture(&self) -> Architecture {
        self.members[0].architecture()
    }

    /// Digest over the members' fingerprints, in order.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for m in &self.members {
            hasher.update(m.fingerprint().as_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Writes `<role>_<i>.fabw` per member plus an `ensemble.json` index.
    pub fn save_dir(&self, dir: impl AsRef<Path>, metadata: &[serde_json::Value]) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::with_capacity(self.len());
        for (i, member) in self.members.iter().enumerate() {
            let name = format!("{}_{i:02}.fabw", self.role.as_str());
            let meta = metadata.get(i).cloned().unwrap_or(serde_json::Value::Null);
            let seed = meta
                .get("seed")
                .and_then(serde_json::Value::as_u64)
                .unwrap_or(0);
            save_weights(member, seed, meta, dir.join(&name))?;
            names.push(name);
        }
        let index = EnsembleIndex {
            role: self.role,
            architecture: self.architecture(),
            members: names,
            fingerprints: self.members.iter().map(ModelWeights::fingerprint).collect(),
        };
        let path = dir.join(INDEX_FILE);
        let json = serde_json::to_vec_pretty(&index).expect("index serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(INDEX_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let index: EnsembleIndex = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(e.column() as u64, format!("invalid {INDEX_FILE}: {e}")))?;
        let mut members = Vec::with_capacity(index.members.len());
        for (name, expected) in index.members.iter().zip(&index.fingerprints) {
            let (w, _) = load_weights(dir.join(name))?;
            if &w.fingerprint() != expected {
                return Err(Error::Invariant(format!(
                    "member {name} does not match its recorded fingerprint"
                )));
            }
            members.push(w);
        }
        Self::new(index.role, members)
    }
}

impl Predictor for Ensemble {
    fn window(&self) -> usize {
        self.architecture().side
    }

    /// Member mean, summed in member order.
    fn predict(&self, batch: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        let mut iter = self.members.iter();
        let mut acc = iter.next().expect("non-empty").forward(batch)?;
        for member in iter {
            let out = member.forward(batch)?;
            for (a, b) in acc.as_mut_slice().iter_mut().zip(out.as_slice()) {
                *a += b;
            }
        }
        let k = self.members.len() as f32;
        if self.members.len() > 1 {
            for v in acc.as_mut_slice() {
                *v /= k;
            }
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_members() {
        let arch = Architecture::reduced(16).unwrap();
        let a = ModelWeights::<f32>::init(arch, 1).unwrap();
        let b = ModelWeights::<f32>::init(arch, 2).unwrap();
        let batch = Tensor4::from_fn([2, 16, 16, 1], |[i, y, x, _]| {
            f32::from((x + y + i) % 4 == 0)
        })
        .unwrap();
        let ens = Ensemble::new(Role::Forward, vec![a.clone(), b.clone()]).unwrap();
        let mean = ens.predict(&batch).unwrap();
        let (pa, pb) = (a.forward(&batch).unwrap(), b.forward(&batch).unwrap());
        for ((m, x), y) in mean.as_slice().iter().zip(pa.as_slice()).zip(pb.as_slice()) {
            assert!((m - (x + y) / 2.0).abs() < 1e-7);
        }
        let single = Ensemble::new(Role::Forward, vec![a.clone()]).unwrap();
        assert_eq!(single.predict(&batch).unwrap(), pa);
    }

    #[test]
    fn rejects_empty_and_mixed() {
        assert!(Ensemble::new(Role::Corrector, vec![]).is_err());
        let a = ModelWeights::<f32>::zeros(Architecture::reduced(16).unwrap()).unwrap();
        let b = ModelWeights::<f32>::zeros(Architecture::reduced(32).unwrap()).unwrap();
        assert!(matches!(
            Ensemble::new(Role::Forward, vec![a, b]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn directory_round_trip() {
        let arch = Architecture::reduced(16).unwrap();
        let members = (0..3)
            .map(|s| ModelWeights::<f32>::init(arch, s).unwrap())
            .collect();
        let ens = Ensemble::new(Role::Corrector, members).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ens.save_dir(dir.path(), &[]).unwrap();
        let back = Ensemble::load_dir(dir.path()).unwrap();
        assert_eq!(back.role(), Role::Corrector);
        assert_eq!(back.fingerprint(), ens.fingerprint());
    }
}
