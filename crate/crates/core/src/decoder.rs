//! Spatial broadcast decoder and the reconstruction objective.
//!
//! Every slot is copied to all `N` patch positions, offset by a positional
//! encoding and mapped through a shared MLP to `D_feats` features plus one alpha
//! logit. Alphas are a softmax across slots per patch and the reconstruction is
//! the alpha-weighted sum of the per-slot features.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::model::ModelConfig;
use crate::nn::Mlp;
use crate::params::{ParamId, ParamStore};
use crate::slot_attention::SlotSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PosEncoding {
    #[default]
    Learned,
    Sinusoidal,
}

impl PosEncoding {
    pub fn code(self) -> u8 {
        match self {
            PosEncoding::Learned => 0,
            PosEncoding::Sinusoidal => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PosEncoding::Learned),
            1 => Some(PosEncoding::Sinusoidal),
            _ => None,
        }
    }
}

impl FromStr for PosEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "sinusoidal" => Ok(Self::Sinusoidal),
            other => Err(Error::Config(format!("unknown positional encoding `{other}`"))),
        }
    }
}

impl fmt::Display for PosEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Learned => "learned",
            Self::Sinusoidal => "sinusoidal",
        })
    }
}

/// `pe[n, 2i] = sin(n / 10000^(2i/d))`, `pe[n, 2i+1] = cos(...)`.
pub fn sinusoidal_table(n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        for c in 0..d {
            let freq = 10000f64.powf((c - c % 2) as f64 / d as f64);
            let angle = pos as f64 / freq;
            data.push(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_parts(vec![n, d], data)
}

#[derive(Clone, Debug)]
pub enum PosParam {
    Learned(ParamId),
    Fixed(Tensor),
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub pos: PosParam,
    pub mlp: Mlp,
    pub num_patches: usize,
    pub feat_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedScene {
    /// `K×N×D_feats`.
    pub per_slot_feats: Tensor,
    /// `K×N`, summing to one over slots.
    pub alphas: Tensor,
    /// `N×D_feats`.
    pub reconstruction: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DecodedVars {
    /// `(K·N)×D_feats`, slot-major.
    pub per_slot_feats: Var,
    pub alphas: Var,
    pub reconstruction: Var,
}

impl DecodedVars {
    pub fn values(&self, g: &Graph) -> DecodedScene {
        let alphas = g.value(self.alphas).clone();
        let (k, n) = (alphas.rows(), alphas.cols());
        let feats = g.value(self.per_slot_feats);
        DecodedScene {
            per_slot_feats: feats.reshape(&[k, n, feats.cols()]).expect("slot-major layout"),
            alphas,
            reconstruction: g.value(self.reconstruction).clone(),
        }
    }
}

impl DecoderParams {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let pos = match cfg.pos_encoding {
            PosEncoding::Learned => {
                let normal = Normal::new(0.0, 0.02).expect("valid std");
                let data = (0..cfg.num_patches * cfg.slot_dim)
                    .map(|_| normal.sample(rng))
                    .collect();
                let t = Tensor::new(vec![cfg.num_patches, cfg.slot_dim], data)?;
                PosParam::Learned(store.register("decoder.pos", t)?)
            }
            PosEncoding::Sinusoidal => PosParam::Fixed(sinusoidal_table(cfg.num_patches, cfg.slot_dim)),
        };
        let widths = [cfg.slot_dim, cfg.decoder_hidden, cfg.decoder_hidden, cfg.feat_dim + 1];
        let mlp = Mlp::register(store, "decoder.mlp", &widths, rng)?;
        Ok(Self {
            pos,
            mlp,
            num_patches: cfg.num_patches,
            feat_dim: cfg.feat_dim,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let PosParam::Learned(id) = self.pos {
            ids.push(id);
        }
        for l in &self.mlp.layers {
            ids.push(l.weight);
            ids.extend(l.bias);
        }
        ids
    }

    pub fn decode_var(&self, g: &mut Graph, store: &ParamStore, slots: Var) -> Result<DecodedVars> {
        let k = g.value(slots).rows();
        let n = self.num_patches;
        let pos = match &self.pos {
            PosParam::Learned(id) => g.param(store, *id),
            PosParam::Fixed(t) => g.constant(t.clone()),
        };
        let broadcast = g.repeat_rows(slots, n)?;
        let pos = g.tile_rows(pos, k)?;
        let x = g.add(broadcast, pos)?;
        let out = self.mlp.forward(g, store, x)?;
        let d = self.feat_dim;
        let feats = g.slice_cols(out, 0, d)?;
        let logits = g.slice_cols(out, d, d + 1)?;
        let logits = g.reshape(logits, &[k, n])?;
        let alphas = g.softmax(logits, 0)?;
        let flat = g.reshape(alphas, &[k * n])?;
        let weighted = g.mul_col(feats, flat)?;
        let stacked = g.reshape(weighted, &[k, n * d])?;
        let summed = g.sum_axis(stacked, 0)?;
        let reconstruction = g.reshape(summed, &[n, d])?;
        Ok(DecodedVars {
            per_slot_feats: feats,
            alphas,
            reconstruction,
        })
    }

    pub fn decode(&self, store: &ParamStore, slots: &SlotSet) -> Result<DecodedScene> {
        let mut g = Graph::new();
        let s = g.constant(slots.slots.clone());
        let vars = self.decode_var(&mut g, store, s)?;
        Ok(vars.values(&g))
    }
}

/// Mean squared error over all `N·D_feats` elements, on the graph.
pub fn reconstruction_loss_var(g: &mut Graph, reconstruction: Var, target: &Tensor) -> Result<Var> {
    if g.shape(reconstruction) != target.shape() {
        return Err(Error::contract(format!(
            "reconstruction {:?} does not match target {:?}",
            g.shape(reconstruction),
            target.shape()
        )));
    }
    let t = g.constant(target.clone());
    let diff = g.sub(reconstruction, t)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

pub fn reconstruction_loss(scene: &DecodedScene, target: &FeatureMap) -> Result<f64> {
    let (r, t) = (&scene.reconstruction, target.tokens());
    if r.shape() != t.shape() {
        return Err(Error::contract(format!(
            "reconstruction {:?} does not match target {:?}",
            r.shape(),
            t.shape()
        )));
    }
    let total: f64 = r.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(total / r.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::TokenKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(num_slots_dim: usize, hidden: usize, feat: usize, n: usize) -> (ParamStore, DecoderParams) {
        let cfg = ModelConfig {
            slot_dim: num_slots_dim,
            decoder_hidden: hidden,
            feat_dim: feat,
            num_patches: n,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let dec = DecoderParams::register(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (store, dec)
    }

    fn slots(rows: &[&[f64]]) -> SlotSet {
        SlotSet {
            slots: Tensor::from_rows(rows).unwrap(),
            head_index: 0,
        }
    }

    #[test]
    fn hand_set_identity_decoder() {
        let (mut store, dec) = tiny(1, 1, 1, 1);
        for (name, value) in [
            ("decoder.pos", Tensor::zeros(&[1, 1])),
            ("decoder.mlp.w1", Tensor::full(&[1, 1], 1.0)),
            ("decoder.mlp.b1", Tensor::zeros(&[1])),
            ("decoder.mlp.w2", Tensor::full(&[1, 1], 1.0)),
            ("decoder.mlp.b2", Tensor::zeros(&[1])),
            ("decoder.mlp.w3", Tensor::full(&[1, 2], 1.0)),
            ("decoder.mlp.b3", Tensor::zeros(&[2])),
        ] {
            let id = store.id(name).unwrap();
            store.get_mut(id).value = value;
        }
        let scene = dec.decode(&store, &slots(&[&[1.0], &[3.0]])).unwrap();
        assert!((scene.alphas.at(0, 0) - 0.11920292202211755).abs() < 1e-12);
        assert!((scene.alphas.at(1, 0) - 0.8807970779778823).abs() < 1e-12);
        let expected = 0.11920292202211755 + 0.8807970779778823 * 3.0;
        assert!((scene.reconstruction.item() - expected).abs() < 1e-12);
        assert!((scene.reconstruction.item() - 2.7616).abs() < 1e-4);
    }

    #[test]
    fn single_slot_owns_every_patch() {
        let (store, dec) = tiny(4, 8, 3, 5);
        let scene = dec.decode(&store, &slots(&[&[0.1, -0.2, 0.3, 0.5]])).unwrap();
        assert!(scene.alphas.data().iter().all(|&a| a == 1.0));
        assert_eq!(scene.reconstruction.data(), scene.per_slot_feats.data());
    }

    #[test]
    fn identical_slots_split_evenly() {
        let (store, dec) = tiny(4, 8, 3, 5);
        let scene = dec
            .decode(&store, &slots(&[&[0.1, -0.2, 0.3, 0.5], &[0.1, -0.2, 0.3, 0.5]]))
            .unwrap();
        assert!(scene.alphas.data().iter().all(|&a| a == 0.5));
    }

    #[test]
    fn permuting_slots_permutes_alphas() {
        let (store, dec) = tiny(4, 8, 3, 6);
        let a = slots(&[&[0.1, -0.2, 0.3, 0.5], &[1.0, 0.0, -1.0, 0.2], &[0.4, 0.4, 0.0, -0.3]]);
        let perm = [2, 0, 1];
        let b = SlotSet {
            slots: a.slots.gather_rows(&perm).unwrap(),
            head_index: 0,
        };
        let sa = dec.decode(&store, &a).unwrap();
        let sb = dec.decode(&store, &b).unwrap();
        assert!(sa.alphas.gather_rows(&perm).unwrap().max_abs_diff(&sb.alphas) < 1e-12);
        assert!(sa.reconstruction.max_abs_diff(&sb.reconstruction) < 1e-12);
        for n in 0..6 {
            let total: f64 = (0..3).map(|k| sa.alphas.at(k, n)).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_examples() {
        let target = FeatureMap::new(1, 2, Tensor::from_rows(&[[0.0], [4.0]]).unwrap(), TokenKind::Key).unwrap();
        let scene = |r: Tensor| DecodedScene {
            per_slot_feats: Tensor::zeros(&[1, 2, 1]),
            alphas: Tensor::full(&[1, 2], 1.0),
            reconstruction: r,
        };
        let s = scene(Tensor::from_rows(&[[1.0], [2.0]]).unwrap());
        assert_eq!(reconstruction_loss(&s, &target).unwrap(), 2.5);
        assert_eq!(
            reconstruction_loss(&scene(target.tokens().clone()), &target).unwrap(),
            0.0
        );
        let shifted = scene(target.tokens().map(|v| v + 0.3));
        assert!((reconstruction_loss(&shifted, &target).unwrap() - 0.09).abs() < 1e-15);
        assert!(reconstruction_loss(&scene(Tensor::zeros(&[3, 1])), &target).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (store, dec) = tiny(3, 5, 2, 4);
        let s = Tensor::from_rows(&[[0.3, -0.1, 0.7], [-0.4, 0.2, 0.05]]).unwrap();
        let target = Tensor::from_rows(&[[0.1, 0.2], [0.0, -0.3], [0.5, 0.5], [1.0, -1.0]]).unwrap();
        let loss_of = |store: &ParamStore, s: &Tensor| {
            let mut g = Graph::new();
            let v = g.variable(s.clone());
            let d = dec.decode_var(&mut g, store, v).unwrap();
            let l = reconstruction_loss_var(&mut g, d.reconstruction, &target).unwrap();
            (g, v, l)
        };
        let (g, v, l) = loss_of(&store, &s);
        let grads = g.backward(l).unwrap();
        let analytic = grads.get(v).unwrap().clone();
        let mut num = Vec::new();
        for i in 0..s.numel() {
            let mut p = s.clone();
            p.data_mut()[i] += 1e-5;
            let mut m = s.clone();
            m.data_mut()[i] -= 1e-5;
            let (gp, _, lp) = loss_of(&store, &p);
            let (gm, _, lm) = loss_of(&store, &m);
            num.push((gp.value(lp).item() - gm.value(lm).item()) / 2e-5);
        }
        let err: f64 = analytic
            .data()
            .iter()
            .zip(&num)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = num.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(err / scale < 1e-4, "{}", err / scale);
    }

    #[test]
    fn sinusoidal_table_shape_and_origin() {
        let t = sinusoidal_table(4, 6);
        assert_eq!(t.shape(), &[4, 6]);
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((t.at(1, 0) - 1f64.sin()).abs() < 1e-15);
        let cfg = ModelConfig {
            pos_encoding: PosEncoding::Sinusoidal,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        DecoderParams::register(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(store.id("decoder.pos").is_none());
    }
}
