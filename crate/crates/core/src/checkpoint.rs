//! Single-file model archives: named `f32` arrays in safetensors layout plus
//! string metadata (JSON-encoded configs, counters, histories).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{Adam, Module, Param, Sgd};

/// A named array as stored in an archive.
pub type NamedArray = (String, Vec<usize>, Vec<f32>);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub tensors: Vec<NamedArray>,
    pub metadata: BTreeMap<String, String>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) {
        self.tensors.push((name.into(), shape, values));
    }

    /// Adds every parameter of `module` under `prefix`.
    pub fn push_module(&mut self, prefix: &str, module: &mut impl Module) {
        for (name, p) in module.params_mut() {
            self.push(format!("{prefix}.{name}"), p.shape.clone(), p.value.clone());
        }
    }

    pub fn set_json(&mut self, key: &str, value: &impl Serialize) -> Result<()> {
        self.metadata.insert(key.to_string(), serde_json::to_string(value)?);
        Ok(())
    }

    pub fn json<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let raw = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))?;
        Ok(serde_json::from_str(raw)?)
    }

    /// Arrays whose names start with `prefix.`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> Vec<NamedArray> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(n, s, v)| n.strip_prefix(&p).map(|rest| (rest.to_string(), s.clone(), v.clone())))
            .collect()
    }

    pub fn has_group(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.tensors.iter().any(|(n, _, _)| n.starts_with(&p))
    }

    pub fn load_module(&self, prefix: &str, module: &mut impl Module) -> Result<()> {
        module
            .load_state(&self.group(prefix))
            .map_err(|e| Error::Checkpoint(format!("{prefix}: {e}")))
    }

    pub fn push_adam(&mut self, prefix: &str, opt: &Adam) -> Result<()> {
        self.set_json(&format!("{prefix}.step"), &opt.step)?;
        self.set_json(&format!("{prefix}.config"), &opt.config)?;
        for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
            self.push(format!("{prefix}.m.{i}"), vec![m.len()], m.clone());
            self.push(format!("{prefix}.v.{i}"), vec![v.len()], v.clone());
        }
        Ok(())
    }

    pub fn adam(&self, prefix: &str) -> Result<Adam> {
        let mut opt = Adam::new(self.json(&format!("{prefix}.config"))?);
        opt.step = self.json(&format!("{prefix}.step"))?;
        opt.m = self.indexed(&format!("{prefix}.m"));
        opt.v = self.indexed(&format!("{prefix}.v"));
        if opt.m.len() != opt.v.len() {
            return Err(Error::Checkpoint(format!("{prefix}: moment buffers disagree")));
        }
        Ok(opt)
    }

    pub fn push_sgd(&mut self, prefix: &str, opt: &Sgd) -> Result<()> {
        self.set_json(&format!("{prefix}.config"), &opt.config)?;
        for (i, b) in opt.buffers.iter().enumerate() {
            self.push(format!("{prefix}.buf.{i}"), vec![b.len()], b.clone());
        }
        Ok(())
    }

    pub fn sgd(&self, prefix: &str) -> Result<Sgd> {
        let mut opt = Sgd::new(self.json(&format!("{prefix}.config"))?);
        opt.buffers = self.indexed(&format!("{prefix}.buf"));
        Ok(opt)
    }

    fn indexed(&self, prefix: &str) -> Vec<Vec<f32>> {
        let mut items: Vec<(usize, Vec<f32>)> = self
            .group(prefix)
            .into_iter()
            .filter_map(|(n, _, v)| n.parse().ok().map(|i| (i, v)))
            .collect();
        items.sort_by_key(|(i, _)| *i);
        items.into_iter().map(|(_, v)| v).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(n, s, v)| (n.clone(), s.clone(), v.iter().flat_map(|x| x.to_le_bytes()).collect()))
            .collect();
        let views = bytes
            .iter()
            .map(|(n, s, b)| {
                TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(format!("{n}: {e:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Checkpoint(format!("{e:?}")))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(format!("{e:?}")))?;
        let metadata = header.metadata().clone().unwrap_or_default().into_iter().collect();
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(format!("{e:?}")))?;
        let mut tensors = Vec::new();
        for name in sorted_names(&st) {
            let view = st.tensor(&name).map_err(|e| Error::Checkpoint(format!("{e:?}")))?;
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected f32, got {:?}",
                    view.dtype()
                )));
            }
            let values = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, view.shape().to_vec(), values));
        }
        Ok(Self { tensors, metadata })
    }

    /// Writes atomically (temporary file + rename) so an interrupted save
    /// never leaves a truncated archive behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn sorted_names(st: &SafeTensors) -> Vec<String> {
    let mut names: Vec<String> = st.names().into_iter().cloned().collect();
    names.sort();
    names
}

/// Copies parameter values (not gradients) from `src` into `dst`.
pub fn copy_params(dst: &mut impl Module, src: &[(String, Param)]) -> Result<()> {
    let state: Vec<NamedArray> = src
        .iter()
        .map(|(n, p)| (n.clone(), p.shape.clone(), p.value.clone()))
        .collect();
    dst.load_state(&state).map_err(Error::Checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AdamConfig, Conv2d, Init, Layer, PadMode, Sequential};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> Sequential {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Sequential::new(vec![
            Layer::Conv(Conv2d::new(1, 2, 3, 1, 1, PadMode::Zero, true, Init::FanIn, &mut rng)),
            Layer::Relu,
        ])
    }

    #[test]
    fn roundtrip_module_optimizer_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut a = net(1);
        let mut opt = Adam::new(AdamConfig::default());
        for (_, p) in a.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.5);
        }
        opt.step(&mut a.params_mut());
        let mut ar = Archive::new();
        ar.push_module("net", &mut a);
        ar.push_adam("opt", &opt).unwrap();
        ar.set_json("epoch", &7usize).unwrap();
        ar.save(&path).unwrap();

        let back = Archive::load(&path).unwrap();
        let mut b = net(2);
        assert_ne!(a.state(), b.state());
        back.load_module("net", &mut b).unwrap();
        let values = |m: &mut Sequential| m.state().into_iter().map(|(n, p)| (n, p.value)).collect::<Vec<_>>();
        assert_eq!(values(&mut a), values(&mut b));
        assert_eq!(back.adam("opt").unwrap(), opt);
        assert_eq!(back.json::<usize>("epoch").unwrap(), 7);
        assert!(back.json::<usize>("missing").is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut a = net(1);
        let mut ar = Archive::new();
        ar.push_module("net", &mut a);
        ar.tensors[0].1 = vec![2, 1, 9];
        let mut b = net(1);
        assert!(matches!(ar.load_module("net", &mut b), Err(Error::Checkpoint(_))));
    }
}
