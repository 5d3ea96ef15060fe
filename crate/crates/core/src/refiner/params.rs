//! Learnable refiner parameters and their on-disk form.
//!
//! Parameters are stored as f64 but always hold f32-representable values,
//! which is what makes the tensor-directory round trip bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array5, Ix1, Ix2, Ix5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One 3D convolution: weight `[out, in, k, k, k]`, bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3dLayer {
    pub weight: Array5<f64>,
    pub bias: Array1<f64>,
}

impl Conv3dLayer {
    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }
}

/// Affine layer: weight `[out, in]`, bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn in_features(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim().0
    }
}

/// Stack of affine layers with ReLU between consecutive layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn in_features(&self) -> usize {
        self.layers.first().map_or(0, Dense::in_features)
    }

    pub fn out_features(&self) -> usize {
        self.layers.last().map_or(0, Dense::out_features)
    }
}

/// Learnable dustbin scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Dustbin {
    /// Bottom row, one score per aerial patch.
    pub b_row: Array1<f64>,
    /// Right column, one score per ground patch.
    pub b_col: Array1<f64>,
    pub b_theta: f64,
}

impl Dustbin {
    pub fn zeros(patches: usize) -> Self {
        Self {
            b_row: Array1::zeros(patches),
            b_col: Array1::zeros(patches),
            b_theta: 0.0,
        }
    }
}

/// Architecture knobs for [`RefinerParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    /// Grid points per side; the similarity matrix is `n^2 x n^2`.
    pub n: usize,
    /// Channel widths through the local branch, input first.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub global_hidden: usize,
    pub gate_hidden: usize,
}

impl RefinerConfig {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            conv_channels: vec![1, 8, 8, 1],
            kernel: 3,
            global_hidden: 256,
            gate_hidden: 64,
        }
    }

    pub fn patches(&self) -> usize {
        self.n * self.n
    }

    fn validate(&self) -> Result<()> {
        let ch = &self.conv_channels;
        if ch.len() < 2 || ch[0] != 1 || ch[ch.len() - 1] != 1 || ch.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "conv channels {ch:?} must start and end at 1"
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "conv kernel {} must be odd",
                self.kernel
            )));
        }
        if self.n < 2 || self.global_hidden == 0 || self.gate_hidden == 0 {
            return Err(Error::InvalidConfig("empty refiner dimension".into()));
        }
        Ok(())
    }
}

/// All parameters of the similarity refiner.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerParams {
    pub local: Vec<Conv3dLayer>,
    pub global: Mlp,
    /// Ends in a single output squashed by a sigmoid.
    pub gate: Mlp,
    pub dustbin: Dustbin,
}

fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

impl RefinerParams {
    /// Every weight and bias zero.
    pub fn zeros(cfg: &RefinerConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let p = cfg.patches();
        let local = cfg
            .conv_channels
            .windows(2)
            .map(|w| Conv3dLayer {
                weight: Array5::zeros((w[1], w[0], k, k, k)),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        let dense = |i: usize, o: usize| Dense {
            weight: Array2::zeros((o, i)),
            bias: Array1::zeros(o),
        };
        Ok(Self {
            local,
            global: Mlp {
                layers: vec![dense(p, cfg.global_hidden), dense(cfg.global_hidden, p)],
            },
            gate: Mlp {
                layers: vec![dense(p, cfg.gate_hidden), dense(cfg.gate_hidden, 1)],
            },
            dustbin: Dustbin::zeros(p),
        })
    }

    /// Uniform fan-in scaled initialisation, reproducible from `seed`.
    pub fn random(cfg: &RefinerConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fill = |a: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in a {
                *v = f32_exact(rng.random_range(-bound..bound));
            }
        };
        for layer in &mut params.local {
            let fan_in = layer.in_channels() * layer.kernel().pow(3);
            fill(layer.weight.as_slice_mut().unwrap(), fan_in, &mut rng);
            fill(layer.bias.as_slice_mut().unwrap(), fan_in, &mut rng);
        }
        for layer in params.global.layers.iter_mut().chain(&mut params.gate.layers) {
            let fan_in = layer.in_features();
            fill(layer.weight.as_slice_mut().unwrap(), fan_in, &mut rng);
            fill(layer.bias.as_slice_mut().unwrap(), fan_in, &mut rng);
        }
        for v in params
            .dustbin
            .b_row
            .iter_mut()
            .chain(params.dustbin.b_col.iter_mut())
        {
            *v = f32_exact(rng.random_range(-1.0..1.0));
        }
        params.dustbin.b_theta = f32_exact(rng.random_range(-1.0..1.0));
        Ok(params)
    }

    /// Number of patches these parameters were built for.
    pub fn patches(&self) -> usize {
        self.dustbin.b_row.len()
    }

    pub fn validate(&self, patches: usize) -> Result<()> {
        let bad = |what: String| Err(Error::ShapeMismatch(what));
        if self.local.is_empty()
            || self.local[0].in_channels() != 1
            || self.local.last().unwrap().out_channels() != 1
        {
            return bad("local branch must map 1 channel to 1 channel".into());
        }
        for (i, l) in self.local.iter().enumerate() {
            let (_, _, a, b, c) = l.weight.dim();
            if a != b || b != c || a % 2 == 0 || l.bias.len() != l.out_channels() {
                return bad(format!("local layer {i} has weight {:?}", l.weight.shape()));
            }
            if i > 0 && self.local[i - 1].out_channels() != l.in_channels() {
                return bad(format!("local layer {i} input channels do not chain"));
            }
        }
        for (name, mlp, out) in [("global", &self.global, patches), ("gate", &self.gate, 1)] {
            if mlp.layers.is_empty() || mlp.in_features() != patches || mlp.out_features() != out {
                return bad(format!(
                    "{name} MLP maps {} -> {}, expected {patches} -> {out}",
                    mlp.in_features(),
                    mlp.out_features()
                ));
            }
            for (i, w) in mlp.layers.windows(2).enumerate() {
                if w[0].out_features() != w[1].in_features() {
                    return bad(format!("{name} layer {} input does not chain", i + 1));
                }
            }
            if mlp.layers.iter().any(|l| l.bias.len() != l.out_features()) {
                return bad(format!("{name} bias length mismatch"));
            }
        }
        if self.dustbin.b_row.len() != patches || self.dustbin.b_col.len() != patches {
            return bad(format!(
                "dustbin sized {}/{} for {patches} patches",
                self.dustbin.b_row.len(),
                self.dustbin.b_col.len()
            ));
        }
        Ok(())
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.local.iter().enumerate() {
            out.push((format!("local.{i}.weight"), Tensor::from_array(&l.weight)));
            out.push((format!("local.{i}.bias"), Tensor::from_array(&l.bias)));
        }
        for (name, mlp) in [("global", &self.global), ("gate", &self.gate)] {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{name}.{i}.weight"), Tensor::from_array(&l.weight)));
                out.push((format!("{name}.{i}.bias"), Tensor::from_array(&l.bias)));
            }
        }
        out.push(("dustbin.b_row".into(), Tensor::from_array(&self.dustbin.b_row)));
        out.push(("dustbin.b_col".into(), Tensor::from_array(&self.dustbin.b_col)));
        out.push((
            "dustbin.b_theta".into(),
            Tensor::from_array(&Array1::from(vec![self.dustbin.b_theta])),
        ));
        out
    }

    /// Writes one tensor file per parameter plus `manifest.json`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = ParamManifest::default();
        for (name, t) in self.named_tensors() {
            let file = format!("{name}.{}", crate::tensor::EXTENSION);
            t.save(dir.join(&file))?;
            manifest.tensors.insert(
                name,
                ManifestEntry {
                    file,
                    dims: t.dims().to_vec(),
                },
            );
        }
        manifest.local_layers = self.local.len();
        manifest.global_layers = self.global.layers.len();
        manifest.gate_layers = self.gate.layers.len();
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: ParamManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let get = |name: String| -> Result<Tensor> {
            let entry = manifest
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Format(format!("manifest lacks {name}")))?;
            let t = Tensor::load(dir.join(&entry.file))?;
            if t.dims() != entry.dims.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: file dims {:?} vs manifest {:?}",
                    t.dims(),
                    entry.dims
                )));
            }
            Ok(t)
        };
        let local = (0..manifest.local_layers)
            .map(|i| {
                Ok(Conv3dLayer {
                    weight: get(format!("local.{i}.weight"))?.to_array::<Ix5>()?,
                    bias: get(format!("local.{i}.bias"))?.to_array::<Ix1>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mlp = |name: &str, count: usize| -> Result<Mlp> {
            let layers = (0..count)
                .map(|i| {
                    Ok(Dense {
                        weight: get(format!("{name}.{i}.weight"))?.to_array::<Ix2>()?,
                        bias: get(format!("{name}.{i}.bias"))?.to_array::<Ix1>()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Mlp { layers })
        };
        let theta = get("dustbin.b_theta".into())?.to_array::<Ix1>()?;
        if theta.len() != 1 {
            return Err(Error::ShapeMismatch("dustbin.b_theta must hold one value".into()));
        }
        let params = Self {
            local,
            global: mlp("global", manifest.global_layers)?,
            gate: mlp("gate", manifest.gate_layers)?,
            dustbin: Dustbin {
                b_row: get("dustbin.b_row".into())?.to_array::<Ix1>()?,
                b_col: get("dustbin.b_col".into())?.to_array::<Ix1>()?,
                b_theta: theta[0],
            },
        };
        params.validate(params.patches())?;
        Ok(params)
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ParamManifest {
    local_layers: usize,
    global_layers: usize,
    gate_layers: usize,
    tensors: BTreeMap<String, ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    dims: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_architecture_shapes() {
        let cfg = RefinerConfig::new(4);
        let p = RefinerParams::zeros(&cfg).unwrap();
        assert_eq!(p.local.len(), 3);
        assert_eq!(p.local[1].weight.shape(), &[8, 8, 3, 3, 3]);
        assert_eq!(p.global.layers[0].weight.shape(), &[256, 16]);
        assert_eq!(p.gate.layers[1].weight.shape(), &[1, 64]);
        p.validate(16).unwrap();
        assert!(p.validate(9).is_err());
    }

    #[test]
    fn bad_configs_rejected() {
        let mut cfg = RefinerConfig::new(4);
        cfg.kernel = 2;
        assert!(RefinerParams::zeros(&cfg).is_err());
        let mut cfg = RefinerConfig::new(4);
        cfg.conv_channels = vec![2, 8, 1];
        assert!(RefinerParams::zeros(&cfg).is_err());
    }

    #[test]
    fn directory_round_trip_is_bit_exact() {
        let mut cfg = RefinerConfig::new(3);
        cfg.global_hidden = 7;
        cfg.gate_hidden = 5;
        let p = RefinerParams::random(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.save_dir(dir.path()).unwrap();
        let back = RefinerParams::load_dir(dir.path()).unwrap();
        assert_eq!(back, p);
        let bits = |p: &RefinerParams| -> Vec<u64> {
            p.named_tensors()
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits() as u64).collect::<Vec<_>>())
                .collect()
        };
        assert_eq!(bits(&back), bits(&p));
    }

    #[test]
    fn load_detects_manifest_mismatch() {
        let p = RefinerParams::zeros(&RefinerConfig::new(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.save_dir(dir.path()).unwrap();
        Tensor::new(vec![2], vec![0.0, 0.0])
            .unwrap()
            .save(dir.path().join("dustbin.b_row.cvt"))
            .unwrap();
        assert!(matches!(
            RefinerParams::load_dir(dir.path()),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
