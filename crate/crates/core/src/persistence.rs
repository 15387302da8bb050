//! Binary checkpoints.
//!
//! Layout: the 8 magic bytes `BHPEFT01`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the JSON manifest, then
//! every array of the manifest as little-endian `f64` values in manifest
//! order. Saving a loaded checkpoint reproduces the original bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BhPeftModel, ModelConfig};
use crate::numerics::Tensor;
use crate::variational::PriorSpec;

pub const MAGIC: &[u8; 8] = b"BHPEFT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: ModelConfig,
    /// Seed the PEFT state was initialized from.
    pub seed: u64,
    /// Number of completed fine-tuning rounds.
    pub round: usize,
    pub backbone_digest: String,
    /// Free-form provenance (tool version, command, data source, ...).
    pub provenance: BTreeMap<String, String>,
    pub arrays: Vec<ArrayEntry>,
}

/// A model together with the bookkeeping stored next to it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: BhPeftModel,
    pub seed: u64,
    pub round: usize,
    pub provenance: BTreeMap<String, String>,
}

fn named_arrays(model: &BhPeftModel) -> Vec<(String, &Tensor)> {
    let mut out = model.backbone.named_arrays();
    for p in model.peft.gaussians() {
        out.push((format!("{}.mu", p.name), &p.mu));
        out.push((format!("{}.g", p.name), &p.g));
    }
    for (p, prior) in model.peft.gaussians().into_iter().zip(&model.priors) {
        out.push((format!("{}.prior_mu", p.name), &prior.mu0));
        out.push((format!("{}.prior_sigma", p.name), &prior.sigma0));
    }
    out.push(("head.weight".into(), &model.peft.head.weight));
    out.push(("head.bias".into(), &model.peft.head.bias));
    out.extend(model.peft.fixed_arrays());
    out
}

/// Mutable views in the order of [`named_arrays`].
fn arrays_mut(model: &mut BhPeftModel) -> Vec<&mut Tensor> {
    let mut out = model.backbone.arrays_mut();
    let crate::model::PeftState {
        prefixes,
        adapters,
        head,
    } = &mut model.peft;
    let mut fixed = Vec::new();
    for (p, a) in prefixes.iter_mut().zip(adapters.iter_mut()) {
        for g in [&mut p.down, &mut p.up, &mut a.down, &mut a.up] {
            out.push(&mut g.mu);
            out.push(&mut g.g);
        }
        fixed.push(&mut p.key_input);
        fixed.push(&mut p.value_input);
    }
    for prior in &mut model.priors {
        out.push(&mut prior.mu0);
        out.push(&mut prior.sigma0);
    }
    out.push(&mut head.weight);
    out.push(&mut head.bias);
    out.extend(fixed);
    out
}

impl Checkpoint {
    pub fn new(model: BhPeftModel, seed: u64) -> Self {
        Self {
            model,
            seed,
            round: 0,
            provenance: BTreeMap::new(),
        }
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            config: self.model.config.clone(),
            seed: self.seed,
            round: self.round,
            backbone_digest: self.model.backbone_digest(),
            provenance: self.provenance.clone(),
            arrays: named_arrays(&self.model)
                .into_iter()
                .map(|(name, t)| ArrayEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        let arrays = named_arrays(&self.model);
        let values: usize = arrays.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(20 + manifest.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = u64::from_le_bytes(r.take(8, "manifest length")?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| Error::Truncated("manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(r.take(len, "manifest")?)?;

        let mut model = BhPeftModel::new(manifest.config.clone(), manifest.seed)?;
        let expected: Vec<(String, Vec<usize>)> = named_arrays(&model)
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != manifest.arrays.len() {
            return Err(Error::input(format!(
                "checkpoint lists {} arrays, model needs {}",
                manifest.arrays.len(),
                expected.len()
            )));
        }
        for ((name, shape), entry) in expected.iter().zip(&manifest.arrays) {
            if *name != entry.name {
                return Err(Error::input(format!("expected array `{name}`, found `{}`", entry.name)));
            }
            if *shape != entry.shape {
                return Err(Error::ArrayShape {
                    name: name.clone(),
                    expected: entry.shape.clone(),
                    found: format!("{shape:?} required by the model config"),
                });
            }
        }
        for (slot, entry) in arrays_mut(&mut model).into_iter().zip(&manifest.arrays) {
            let raw = r.take(8 * slot.len(), &entry.name)?;
            for (dst, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::input(format!(
                "{} trailing bytes after the last array",
                bytes.len() - r.pos
            )));
        }
        if model.backbone_digest() != manifest.backbone_digest {
            return Err(Error::input("backbone digest does not match the stored arrays"));
        }
        let priors = model
            .priors
            .iter()
            .map(|p| PriorSpec::new(p.mu0.clone(), p.sigma0.clone()))
            .collect::<Result<Vec<_>>>()?;
        model.set_priors(priors)?;
        Ok(Self {
            model,
            seed: manifest.seed,
            round: manifest.round,
            provenance: manifest.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(what.to_string()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamic::chain_prior;
    use crate::model::WeightMode;

    fn small() -> Checkpoint {
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            blocks: 2,
            vocab: 30,
            max_len: 6,
            prefix_len: 2,
            prefix_rank: 3,
            adapter_rank: 2,
            ..Default::default()
        };
        let mut model = BhPeftModel::new(cfg, 11).unwrap();
        model.peft.head.bias.data_mut()[0] = 0.125;
        chain_prior(&mut model);
        let mut ck = Checkpoint::new(model, 11);
        ck.round = 3;
        ck.provenance.insert("command".into(), "unit".into());
        ck
    }

    #[test]
    fn round_trip_is_lossless_and_byte_stable() {
        let ck = small();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let toks = [3, 4, 5];
        assert_eq!(
            back.model.forward(&toks, WeightMode::Mean).unwrap(),
            ck.model.forward(&toks, WeightMode::Mean).unwrap()
        );
    }

    #[test]
    fn header_errors() {
        let bytes = small().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..5]), Err(Error::Truncated(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Input(_))));
    }

    #[test]
    fn manifest_shape_mismatch_is_reported() {
        let ck = small();
        let mut manifest = ck.manifest();
        manifest.arrays[0].shape = vec![1, 1];
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::ArrayShape { name, expected, .. }) => {
                assert_eq!(name, "backbone.embedding");
                assert_eq!(expected, vec![1, 1]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tampered_backbone_fails_digest() {
        let ck = small();
        let mut bytes = ck.to_bytes().unwrap();
        let header = 20 + serde_json::to_vec(&ck.manifest()).unwrap().len();
        bytes[header] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Input(_))));
    }
}
