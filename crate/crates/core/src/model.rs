//! The full gated model: encoder → gate → identity and sex branches → heads,
//! plus the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "FGCKPT\0\0"
//! version    u32      = 1
//! n_meta     u32
//!   key      u32 length + UTF-8 bytes
//!   value    u32 length + UTF-8 bytes
//! n_tensors  u32
//!   name     u32 length + UTF-8 bytes
//!   ndim     u32
//!   dims     u64 × ndim
//!   values   f64 × prod(dims), little-endian IEEE-754
//! ```
//!
//! The meta section carries `encoder.activations` (comma-separated, one per
//! encoder layer) and the AAM scale and margin.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::branches::{
    self, Activation, AttentionParams, BranchError, BranchParams, ConvLayer, Embedding,
    EmbeddingKind, EncoderParams, HeadParams, Linear,
};
use crate::gate::{self, GateError, GateMask, GateParams, RoutedFeatures};

const CHECKPOINT_MAGIC: &[u8; 8] = b"FGCKPT\0\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub feature_bins: usize,
    pub channels: usize,
    pub encoder_layers: usize,
    pub encoder_width: usize,
    pub gate_width: usize,
    pub attention_dim: usize,
    pub embedding_dim: usize,
    pub speakers: usize,
    pub aam_scale: f64,
    pub aam_margin: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_bins: 20,
            channels: 32,
            encoder_layers: 3,
            encoder_width: 3,
            gate_width: gate::DEFAULT_GATE_WIDTH,
            attention_dim: 16,
            embedding_dim: 16,
            speakers: 8,
            aam_scale: 30.0,
            aam_margin: 0.2,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Branch(#[from] BranchError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("input has {found} feature bins but the model expects {expected}")]
    FeatureMismatch { expected: usize, found: usize },
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub encoder: EncoderParams<T>,
    pub gate: GateParams<T>,
    pub identity: BranchParams<T>,
    pub sex: BranchParams<T>,
    pub heads: HeadParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            encoder: self.encoder.map("encoder", f),
            gate: self.gate.map("gate", f),
            identity: self.identity.map("identity", f),
            sex: self.sex.map("sex", f),
            heads: self.heads.map("heads", f),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&str, &T)) {
        let _ = self.map(&mut |name, t| f(name, t));
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut T)) {
        self.encoder.visit_mut("encoder", f);
        self.gate.visit_mut("gate", f);
        self.identity.visit_mut("identity", f);
        self.sex.visit_mut("sex", f);
        self.heads.visit_mut("heads", f);
    }
}

impl ModelParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        Self {
            encoder: EncoderParams::new(
                cfg.feature_bins,
                c,
                cfg.encoder_layers,
                cfg.encoder_width,
                rng,
            ),
            gate: GateParams::neutral(c, cfg.gate_width, rng),
            identity: BranchParams::new(c, cfg.attention_dim, cfg.embedding_dim, rng),
            sex: BranchParams::new(c, cfg.attention_dim, cfg.embedding_dim, rng),
            heads: HeadParams::new(cfg.embedding_dim, cfg.speakers, rng),
        }
    }

    /// Registers every tensor as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> ModelParams<Var> {
        self.map(&mut |_, t| g.leaf(t.clone()))
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    pub fn feature_bins(&self) -> usize {
        self.encoder.layers[0].weight.shape()[1]
    }
}

/// Graph handles produced by one forward pass over a batch.
#[derive(Debug, Clone, Copy)]
pub struct ForwardPass {
    pub features: Var,
    pub mask: GateMask,
    pub routed: RoutedFeatures,
    pub z_id: Embedding,
    pub z_sex: Embedding,
}

/// Encoder, gate and identity branch only; the path used for verification.
pub fn identity_path(
    g: &mut Graph,
    x: Var,
    encoder: &EncoderParams<Var>,
    gate_params: &GateParams<Var>,
    identity: &BranchParams<Var>,
) -> Result<(Var, GateMask, RoutedFeatures, Embedding), ModelError> {
    let u = branches::encode(g, x, encoder)?;
    let mask = gate::compute_mask(g, u, gate_params)?;
    let routed = gate::route(g, u, mask)?;
    let z_id = branches::extract(g, routed.identity, identity, EmbeddingKind::Identity)?;
    Ok((u, mask, routed, z_id))
}

pub fn forward(g: &mut Graph, x: Var, p: &ModelParams<Var>) -> Result<ForwardPass, ModelError> {
    let (features, mask, routed, z_id) = identity_path(g, x, &p.encoder, &p.gate, &p.identity)?;
    let z_sex = branches::extract(g, routed.sex, &p.sex, EmbeddingKind::Sex)?;
    Ok(ForwardPass {
        features,
        mask,
        routed,
        z_id,
        z_sex,
    })
}

/// Identity embeddings `[B, D]` for a batch `[B, F, T]`.
///
/// Only the encoder, gate and identity-branch tensors are read.
pub fn identity_embeddings(params: &ModelParams, x: &Tensor) -> Result<Tensor, ModelError> {
    check_input(params, x)?;
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let enc = params.encoder.map("encoder", &mut |_, t| g.leaf(t.clone()));
    let gp = params.gate.map("gate", &mut |_, t| g.leaf(t.clone()));
    let id = params.identity.map("identity", &mut |_, t| g.leaf(t.clone()));
    let (_, _, _, z) = identity_path(&mut g, xv, &enc, &gp, &id)?;
    Ok(g.value(z.vectors).clone())
}

/// Gate mask `[B, C, T]` for a batch `[B, F, T]`.
pub fn gate_mask(params: &ModelParams, x: &Tensor) -> Result<Tensor, ModelError> {
    check_input(params, x)?;
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let enc = params.encoder.map("encoder", &mut |_, t| g.leaf(t.clone()));
    let gp = params.gate.map("gate", &mut |_, t| g.leaf(t.clone()));
    let u = branches::encode(&mut g, xv, &enc)?;
    let mask = gate::compute_mask(&mut g, u, &gp)?;
    Ok(g.value(mask.mask).clone())
}

fn check_input(params: &ModelParams, x: &Tensor) -> Result<(), ModelError> {
    let expected = params.feature_bins();
    if x.ndim() != 3 || x.shape()[1] != expected {
        return Err(ModelError::FeatureMismatch {
            expected,
            found: x.shape().get(1).copied().unwrap_or(0),
        });
    }
    Ok(())
}

/// A key→tensor map with string metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, ModelError> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| ModelError::Checkpoint(e.to_string()))
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..read_u32(r)? {
            let k = read_str(r)?;
            let v = read_str(r)?;
            meta.insert(k, v);
        }
        let count = read_u32(r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = read_str(r)?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut b = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let t = Tensor::new(shape, data)
                .map_err(|e| ModelError::Checkpoint(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut f = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

/// Model parameters plus the scoring hyperparameters stored with them.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub params: ModelParams,
    pub aam_scale: f64,
    pub aam_margin: f64,
    pub step: usize,
}

impl SavedModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        let acts: Vec<&str> = self
            .params
            .encoder
            .layers
            .iter()
            .map(|l| l.activation.as_str())
            .collect();
        meta.insert("encoder.activations".into(), acts.join(","));
        meta.insert("aam.scale".into(), self.aam_scale.to_string());
        meta.insert("aam.margin".into(), self.aam_margin.to_string());
        meta.insert("step".into(), self.step.to_string());
        Checkpoint {
            meta,
            tensors: self.params.named_tensors(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, ModelError> {
        let mut map: BTreeMap<String, Tensor> = ck.tensors.into_iter().collect();
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))
        };
        let meta_get = |key: &str| {
            ck.meta
                .get(key)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing meta {key}")))
        };
        let acts = meta_get("encoder.activations")?
            .split(',')
            .map(|s| {
                Activation::parse(s)
                    .ok_or_else(|| ModelError::Checkpoint(format!("unknown activation {s}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut layers = Vec::with_capacity(acts.len());
        for (i, activation) in acts.into_iter().enumerate() {
            layers.push(ConvLayer {
                weight: take(&format!("encoder.{i}.weight"))?,
                bias: take(&format!("encoder.{i}.bias"))?,
                activation,
            });
        }
        let mut branch = |prefix: &str| -> Result<BranchParams, ModelError> {
            Ok(BranchParams {
                pool: AttentionParams {
                    w: take(&format!("{prefix}.pool.w"))?,
                    b: take(&format!("{prefix}.pool.b"))?,
                    v: take(&format!("{prefix}.pool.v"))?,
                },
                proj: Linear {
                    weight: take(&format!("{prefix}.proj.weight"))?,
                    bias: take(&format!("{prefix}.proj.bias"))?,
                },
            })
        };
        let identity = branch("identity")?;
        let sex = branch("sex")?;
        let params = ModelParams {
            encoder: EncoderParams { layers },
            gate: GateParams {
                kernel: take("gate.kernel")?,
                bias: take("gate.bias")?,
            },
            identity,
            sex,
            heads: HeadParams {
                speaker: take("heads.speaker")?,
                sex: Linear {
                    weight: take("heads.sex.weight")?,
                    bias: take("heads.sex.bias")?,
                },
                adversary: Linear {
                    weight: take("heads.adversary.weight")?,
                    bias: take("heads.adversary.bias")?,
                },
            },
        };
        if let Some(extra) = map.keys().next() {
            return Err(ModelError::Checkpoint(format!("unexpected tensor {extra}")));
        }
        let parse_f64 = |key: &str| -> Result<f64, ModelError> {
            meta_get(key)?
                .parse()
                .map_err(|_| ModelError::Checkpoint(format!("bad number for {key}")))
        };
        Ok(Self {
            params,
            aam_scale: parse_f64("aam.scale")?,
            aam_margin: parse_f64("aam.margin")?,
            step: meta_get("step")?
                .parse()
                .map_err(|_| ModelError::Checkpoint("bad step".into()))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}
