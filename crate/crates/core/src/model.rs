//! The full grouping model: head bank plus decoder over one parameter store.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{DecoderParams, PosEncoding};
use crate::error::{Error, Result};
use crate::params::{read_checkpoint, write_checkpoint, ParamStore};
use crate::slot_attention::HeadBank;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub heads: usize,
    pub num_slots: usize,
    pub slot_dim: usize,
    pub feat_dim: usize,
    pub num_patches: usize,
    pub iters: usize,
    pub epsilon: f64,
    pub slot_mlp_hidden: usize,
    pub decoder_hidden: usize,
    pub layer_norm: bool,
    pub pos_encoding: PosEncoding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            num_slots: 6,
            slot_dim: 64,
            feat_dim: 384,
            num_patches: 196,
            iters: 3,
            epsilon: 1e-8,
            slot_mlp_hidden: 128,
            decoder_hidden: 1024,
            layer_norm: true,
            pos_encoding: PosEncoding::Learned,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("heads", self.heads),
            ("num_slots", self.num_slots),
            ("slot_dim", self.slot_dim),
            ("feat_dim", self.feat_dim),
            ("num_patches", self.num_patches),
            ("slot_mlp_hidden", self.slot_mlp_hidden),
            ("decoder_hidden", self.decoder_hidden),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    fn meta(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("meta.heads", self.heads as f64),
            ("meta.num_slots", self.num_slots as f64),
            ("meta.slot_dim", self.slot_dim as f64),
            ("meta.feat_dim", self.feat_dim as f64),
            ("meta.num_patches", self.num_patches as f64),
            ("meta.iters", self.iters as f64),
            ("meta.epsilon", self.epsilon),
            ("meta.slot_mlp_hidden", self.slot_mlp_hidden as f64),
            ("meta.decoder_hidden", self.decoder_hidden as f64),
            ("meta.layer_norm", if self.layer_norm { 1.0 } else { 0.0 }),
            ("meta.pos_encoding", self.pos_encoding.code() as f64),
        ]
    }

    fn from_meta(records: &[(String, Tensor)]) -> Result<Self> {
        let get = |key: &str| -> Result<f64> {
            records
                .iter()
                .find(|(n, t)| n == key && t.numel() == 1)
                .map(|(_, t)| t.data()[0])
                .ok_or_else(|| Error::Format {
                    offset: 0,
                    message: format!("checkpoint lacks `{key}`"),
                })
        };
        let count = |key: &str| -> Result<usize> {
            let v = get(key)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("`{key}` = {v} is not a count"),
                });
            }
            Ok(v as usize)
        };
        let pos_code = count("meta.pos_encoding")?;
        let cfg = Self {
            heads: count("meta.heads")?,
            num_slots: count("meta.num_slots")?,
            slot_dim: count("meta.slot_dim")?,
            feat_dim: count("meta.feat_dim")?,
            num_patches: count("meta.num_patches")?,
            iters: count("meta.iters")?,
            epsilon: get("meta.epsilon")?,
            slot_mlp_hidden: count("meta.slot_mlp_hidden")?,
            decoder_hidden: count("meta.decoder_hidden")?,
            layer_norm: count("meta.layer_norm")? != 0,
            pos_encoding: u8::try_from(pos_code)
                .ok()
                .and_then(PosEncoding::from_code)
                .ok_or_else(|| Error::Format {
                    offset: 0,
                    message: format!("unknown positional encoding code {pos_code}"),
                })?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub bank: HeadBank,
    pub decoder: DecoderParams,
}

impl Model {
    /// Fresh parameters drawn deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bank = HeadBank::register(&mut store, &config, &mut rng)?;
        let decoder = DecoderParams::register(&mut store, &config, &mut rng)?;
        Ok(Self {
            config,
            store,
            bank,
            decoder,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta: Vec<(&str, Tensor)> = self
            .config
            .meta()
            .into_iter()
            .map(|(n, v)| (n, Tensor::scalar(v)))
            .collect();
        let mut buf = Vec::new();
        let records = meta
            .iter()
            .map(|(n, t)| (*n, t))
            .chain(self.store.iter().map(|(_, p)| (p.name.as_str(), &p.value)));
        write_checkpoint(&mut buf, records).expect("writing to memory");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_records(read_checkpoint(bytes)?)
    }

    fn from_records(records: Vec<(String, Tensor)>) -> Result<Self> {
        let config = ModelConfig::from_meta(&records)?;
        let mut model = Self::new(config, 0)?;
        let mut seen = vec![false; model.store.len()];
        for (name, value) in records {
            if name.starts_with("meta.") {
                continue;
            }
            let id = model.store.id(&name).ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("unexpected parameter `{name}`"),
            })?;
            let p = model.store.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(Error::Shape {
                    op: "load_checkpoint",
                    lhs: p.value.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            p.value = value;
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "checkpoint lacks parameter `{}`",
                    model.store.get(crate::params::ParamId(missing)).name
                ),
            });
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        std::io::Write::write_all(&mut w, &self.to_bytes()).map_err(|e| Error::io(path, e))?;
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_records(read_checkpoint(BufReader::new(file))?)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.iter().map(|(_, p)| p.value.numel()).sum()
    }
}
