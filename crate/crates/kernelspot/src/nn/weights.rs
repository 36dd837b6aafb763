//! Named weight storage with reproducible initialization and a simple
//! on-disk layout: one `.ptm` per tensor plus a `manifest.txt` listing
//! `name dim0 dim1 ...` per line.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{read_ptm_file, write_ptm_file, TensorMap};

/// How a parameter is filled during initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Sampled uniformly from [-0.1, 0.1] when seeded, zero otherwise.
    Uniform,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
    /// LSTM input-side bias: sampled like `Uniform`, then the forget-gate
    /// quarter gets +1.0 so freshly initialized cells retain state.
    LstmBiasInput,
}

#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub kind: ParamKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, dims: &[usize], kind: ParamKind) -> Self {
        Self {
            name: name.into(),
            dims: dims.to_vec(),
            kind,
        }
    }
}

/// Specs for one separable-conv block under `prefix.`: depthwise 3x3,
/// pointwise 1x1, and the trailing BN.
pub fn sep_conv_specs(prefix: &str, c_in: usize, c_out: usize) -> Vec<LayerSpec> {
    let mut v = vec![
        LayerSpec::new(format!("{prefix}.dw"), &[c_in, 3, 3], ParamKind::Uniform),
        LayerSpec::new(
            format!("{prefix}.pw"),
            &[c_out, c_in, 1, 1],
            ParamKind::Uniform,
        ),
    ];
    v.extend(bn_specs(prefix, c_out));
    v
}

pub fn bn_specs(prefix: &str, c: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(format!("{prefix}.bn.gamma"), &[c], ParamKind::BnGamma),
        LayerSpec::new(format!("{prefix}.bn.beta"), &[c], ParamKind::BnBeta),
        LayerSpec::new(format!("{prefix}.bn.mean"), &[c], ParamKind::BnMean),
        LayerSpec::new(format!("{prefix}.bn.var"), &[c], ParamKind::BnVar),
    ]
}

/// All model parameters, keyed by dotted name. BTreeMap keeps iteration
/// order stable so saving and summing are deterministic.
#[derive(Clone, Default)]
pub struct WeightStore {
    tensors: BTreeMap<String, TensorMap>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fills every spec in order from one ChaCha8 stream. Uniform params
    /// draw `len` samples from [-0.1, 0.1]; BN starts as the identity
    /// transform (gamma 1, beta 0, mean 0, var 1).
    pub fn seeded(specs: &[LayerSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for spec in specs {
            let len: usize = spec.dims.iter().product();
            let data = match spec.kind {
                ParamKind::Uniform | ParamKind::LstmBiasInput => {
                    let mut d: Vec<f32> =
                        (0..len).map(|_| rng.random_range(-0.1..0.1)).collect();
                    if spec.kind == ParamKind::LstmBiasInput {
                        let h = len / 4;
                        for v in &mut d[h..2 * h] {
                            *v += 1.0;
                        }
                    }
                    d
                }
                ParamKind::BnGamma | ParamKind::BnVar => vec![1.0; len],
                ParamKind::BnBeta | ParamKind::BnMean => vec![0.0; len],
            };
            store
                .tensors
                .insert(spec.name.clone(), TensorMap::new(spec.dims.clone(), data).unwrap());
        }
        store
    }

    /// Everything zero except BN variance (1), so convolutions and norms
    /// stay well-defined but pass nothing through.
    pub fn zeroed(specs: &[LayerSpec]) -> Self {
        let mut store = Self::new();
        for spec in specs {
            let len: usize = spec.dims.iter().product();
            let fill = match spec.kind {
                ParamKind::BnVar => 1.0,
                _ => 0.0,
            };
            store
                .tensors
                .insert(spec.name.clone(), TensorMap::new(spec.dims.clone(), vec![fill; len]).unwrap());
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: TensorMap) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&TensorMap> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Checks that exactly the spec'd tensors exist with the right dims.
    pub fn validate(&self, specs: &[LayerSpec]) -> Result<()> {
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.dims() != spec.dims.as_slice() {
                return Err(Error::shape(format!(
                    "weight {} has dims {:?}, expected {:?}",
                    spec.name,
                    t.dims(),
                    spec.dims
                )));
            }
        }
        if self.tensors.len() != specs.len() {
            let expected: std::collections::BTreeSet<&str> =
                specs.iter().map(|s| s.name.as_str()).collect();
            let extra: Vec<&str> = self
                .tensors
                .keys()
                .map(|s| s.as_str())
                .filter(|n| !expected.contains(n))
                .collect();
            return Err(Error::invalid(format!(
                "weight store has {} unexpected tensors: {:?}",
                extra.len(),
                extra
            )));
        }
        Ok(())
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (name, tensor) in &self.tensors {
            if !name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_')
            {
                return Err(Error::invalid(format!(
                    "weight name {name:?} is not filesystem-safe"
                )));
            }
            write_ptm_file(tensor, dir.join(format!("{name}.ptm")))?;
            manifest.push_str(name);
            for d in tensor.dims() {
                manifest.push_str(&format!(" {d}"));
            }
            manifest.push('\n');
        }
        let tmp = dir.join("manifest.txt.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(manifest.as_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, dir.join("manifest.txt"))?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest = std::fs::read_to_string(dir.join("manifest.txt")).map_err(|e| {
            Error::invalid(format!(
                "cannot read {}: {e}",
                dir.join("manifest.txt").display()
            ))
        })?;
        let mut store = Self::new();
        for (lineno, line) in manifest.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let name = parts.next().unwrap().to_string();
            let dims: Vec<usize> = parts
                .map(|p| {
                    p.parse::<usize>().map_err(|_| {
                        Error::parse(format!("manifest line {}: bad dim {p:?}", lineno + 1))
                    })
                })
                .collect::<Result<_>>()?;
            if dims.is_empty() {
                return Err(Error::parse(format!(
                    "manifest line {}: no dims for {name}",
                    lineno + 1
                )));
            }
            let tensor = read_ptm_file(&dir.join(format!("{name}.ptm")))?;
            if tensor.dims() != dims.as_slice() {
                return Err(Error::shape(format!(
                    "weight {name}: manifest says {dims:?} but file has {:?}",
                    tensor.dims()
                )));
            }
            store.tensors.insert(name, tensor);
        }
        Ok(store)
    }

    /// Convenience fetch of a separable-conv block's tensors.
    pub fn sep_block(&self, prefix: &str) -> Result<SepBlock<'_>> {
        Ok(SepBlock {
            dw: self.get(&format!("{prefix}.dw"))?,
            pw: self.get(&format!("{prefix}.pw"))?,
            bn: self.bn_block(prefix)?,
        })
    }

    pub fn bn_block(&self, prefix: &str) -> Result<super::ops::BnParams<'_>> {
        Ok(super::ops::BnParams {
            gamma: self.get(&format!("{prefix}.bn.gamma"))?,
            beta: self.get(&format!("{prefix}.bn.beta"))?,
            mean: self.get(&format!("{prefix}.bn.mean"))?,
            var: self.get(&format!("{prefix}.bn.var"))?,
        })
    }
}

pub struct SepBlock<'a> {
    pub dw: &'a TensorMap,
    pub pw: &'a TensorMap,
    pub bn: super::ops::BnParams<'a>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<LayerSpec> {
        let mut v = sep_conv_specs("block", 3, 8);
        v.push(LayerSpec::new("fc.w", &[4, 8], ParamKind::Uniform));
        v.push(LayerSpec::new("lstm.b_ih", &[16], ParamKind::LstmBiasInput));
        v
    }

    #[test]
    fn seeded_is_reproducible_and_in_range() {
        let a = WeightStore::seeded(&specs(), 7);
        let b = WeightStore::seeded(&specs(), 7);
        let c = WeightStore::seeded(&specs(), 8);
        let mut any_diff = false;
        for name in a.names() {
            let (ta, tb) = (a.get(name).unwrap(), b.get(name).unwrap());
            assert_eq!(ta.data(), tb.data(), "{name} differs across same-seed runs");
            if a.get(name).unwrap().data() != c.get(name).unwrap().data() {
                any_diff = true;
            }
        }
        assert!(any_diff, "different seeds should produce different weights");
        let w = a.get("block.dw").unwrap();
        assert!(w.data().iter().all(|&v| (-0.1..0.1).contains(&v)));
        assert!(w.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn seeded_bn_is_identity_and_forget_bias_is_shifted() {
        let s = WeightStore::seeded(&specs(), 1);
        assert!(s.get("block.bn.gamma").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(s.get("block.bn.beta").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(s.get("block.bn.var").unwrap().data().iter().all(|&v| v == 1.0));
        let b = s.get("lstm.b_ih").unwrap();
        // quarters: input, forget, cell, output; only forget is shifted
        assert!(b.data()[4..8].iter().all(|&v| (0.9..1.1).contains(&v)));
        assert!(b.data()[..4].iter().all(|&v| v.abs() < 0.1));
        assert!(b.data()[8..].iter().all(|&v| v.abs() < 0.1));
    }

    #[test]
    fn zeroed_keeps_variance_one() {
        let s = WeightStore::zeroed(&specs());
        assert!(s.get("block.pw").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(s.get("block.bn.var").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(s.get("block.bn.gamma").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn validate_catches_missing_extra_and_wrong_dims() {
        let sp = specs();
        let mut s = WeightStore::seeded(&sp, 3);
        s.validate(&sp).unwrap();
        s.insert("stray", TensorMap::zeros(&[1]));
        assert!(s.validate(&sp).is_err());
        let mut s2 = WeightStore::seeded(&sp, 3);
        s2.insert("fc.w", TensorMap::zeros(&[4, 9]));
        assert!(s2.validate(&sp).is_err());
        let s3 = WeightStore::new();
        assert!(matches!(s3.validate(&sp), Err(Error::MissingWeight(_))));
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let sp = specs();
        let s = WeightStore::seeded(&sp, 99);
        s.save_dir(dir.path()).unwrap();
        let loaded = WeightStore::load_dir(dir.path()).unwrap();
        loaded.validate(&sp).unwrap();
        for name in s.names() {
            let (a, b) = (s.get(name).unwrap(), loaded.get(name).unwrap());
            assert_eq!(a.dims(), b.dims());
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn load_rejects_manifest_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let sp = vec![LayerSpec::new("w", &[2, 2], ParamKind::Uniform)];
        WeightStore::seeded(&sp, 1).save_dir(dir.path()).unwrap();
        std::fs::write(dir.path().join("manifest.txt"), "w 2 3\n").unwrap();
        assert!(WeightStore::load_dir(dir.path()).is_err());
        std::fs::write(dir.path().join("manifest.txt"), "w 2 x\n").unwrap();
        assert!(WeightStore::load_dir(dir.path()).is_err());
        assert!(WeightStore::load_dir(&dir.path().join("nope")).is_err());
    }
}
