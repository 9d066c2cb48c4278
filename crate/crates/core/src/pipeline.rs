//! Inference: every head on the unmasked tokens, fusion, decoding, masks.

use std::fmt;
use std::str::FromStr;

use crate::assignment::Matcher;
use crate::autograd::Graph;
use crate::decoder::DecodedScene;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::fusion::{fuse, Metric, ReferenceHead};
use crate::metrics::{masks_from_alphas, SegmentationResult};
use crate::model::Model;
use crate::slot_attention::{AttentionState, SlotSet};

/// Which per-slot map is turned into segmentation masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskSource {
    #[default]
    Alpha,
    /// Slot-normalized attention of the fused slots under the reference head's query.
    Attention,
}

impl FromStr for MaskSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "attention" => Ok(Self::Attention),
            other => Err(Error::Config(format!("unknown mask source `{other}`"))),
        }
    }
}

impl fmt::Display for MaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Alpha => "alpha",
            Self::Attention => "attention",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InferOptions {
    pub metric: Metric,
    pub matcher: Matcher,
    pub reference: ReferenceHead,
    /// Use only the first `n` heads.
    pub heads: Option<usize>,
    pub mask_source: MaskSource,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOutput {
    pub heads: Vec<(SlotSet, AttentionState)>,
    pub reference: usize,
    pub fused: SlotSet,
    pub decoded: DecodedScene,
    pub segmentation: SegmentationResult,
}

const REFERENCE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn check_features(model: &Model, map: &FeatureMap) -> Result<()> {
    let cfg = &model.config;
    if map.d_feats() != cfg.feat_dim || map.num_patches() != cfg.num_patches {
        return Err(Error::contract(format!(
            "features have D_feats={} over {} patches, checkpoint expects D_feats={} over {} patches",
            map.d_feats(),
            map.num_patches(),
            cfg.feat_dim,
            cfg.num_patches
        )));
    }
    Ok(())
}

/// Runs the model on one image without any token masking.
pub fn infer(model: &Model, map: &FeatureMap, opts: &InferOptions) -> Result<InferenceOutput> {
    check_features(model, map)?;
    let available = model.bank.num_heads();
    let used = opts.heads.unwrap_or(available);
    if used == 0 || used > available {
        return Err(Error::Config(format!(
            "requested {used} heads, checkpoint has {available}"
        )));
    }
    let mut heads = model.bank.run_all_heads(&model.store, map, opts.seed)?;
    heads.truncate(used);
    let reference = opts.reference.resolve(used, opts.seed ^ REFERENCE_SALT)?;
    let sets: Vec<SlotSet> = heads.iter().map(|(s, _)| s.clone()).collect();
    let fused = fuse(&sets, reference, opts.metric, opts.matcher)?;
    let decoded = model.decoder.decode(&model.store, &fused)?;
    let maps = match opts.mask_source {
        MaskSource::Alpha => decoded.alphas.clone(),
        MaskSource::Attention => fused_attention(model, map, &fused)?.attn.transpose(),
    };
    let segmentation = masks_from_alphas(&maps, map.grid_h(), map.grid_w())?;
    Ok(InferenceOutput {
        heads,
        reference,
        fused,
        decoded,
        segmentation,
    })
}

fn fused_attention(model: &Model, map: &FeatureMap, fused: &SlotSet) -> Result<AttentionState> {
    let mut g = Graph::new();
    let tokens = g.constant(map.tokens().clone());
    let (k, v) = model.bank.project(&mut g, &model.store, tokens)?;
    let s = g.constant(fused.slots.clone());
    let att = model.bank.attend(&mut g, &model.store, fused.head_index, k, v, s)?;
    Ok(att.values(&g))
}

/// Plain text dump of slot vectors, one slot per line.
pub fn slots_to_text(set: &SlotSet) -> String {
    let mut s = String::new();
    for r in 0..set.slots.rows() {
        let row: Vec<String> = set.slots.row(r).iter().map(|v| format!("{v:.9e}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{generate_scene, SyntheticSceneSpec};
    use crate::model::ModelConfig;

    fn model(heads: usize) -> Model {
        Model::new(
            ModelConfig {
                heads,
                num_slots: 4,
                slot_dim: 8,
                feat_dim: 16,
                num_patches: 64,
                slot_mlp_hidden: 16,
                decoder_hidden: 16,
                ..ModelConfig::default()
            },
            2,
        )
        .unwrap()
    }

    fn scene() -> FeatureMap {
        generate_scene(&SyntheticSceneSpec::default()).unwrap().0
    }

    #[test]
    fn single_head_equals_plain_decode() {
        let m = model(1);
        let map = scene();
        let out = infer(&m, &map, &InferOptions::default()).unwrap();
        let (slots, _) = m
            .bank
            .run_head(&m.store, &map, 0, &mut crate::slot_attention::head_rng(0, 0))
            .unwrap();
        assert_eq!(out.fused, slots);
        assert_eq!(out.decoded, m.decoder.decode(&m.store, &slots).unwrap());
    }

    #[test]
    fn inference_is_deterministic() {
        let m = model(3);
        let map = scene();
        let opts = InferOptions {
            seed: 5,
            ..Default::default()
        };
        let a = infer(&m, &map, &opts).unwrap();
        let b = infer(&m, &map, &opts).unwrap();
        assert_eq!(a, b);
        let pinned = infer(
            &m,
            &map,
            &InferOptions {
                reference: ReferenceHead::Index(2),
                ..opts
            },
        )
        .unwrap();
        assert_eq!(pinned.reference, 2);
    }

    #[test]
    fn attention_masks_and_head_limits() {
        let m = model(3);
        let map = scene();
        let out = infer(
            &m,
            &map,
            &InferOptions {
                mask_source: MaskSource::Attention,
                heads: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.heads.len(), 2);
        assert_eq!(out.segmentation.labels.len(), 64);
        assert!(infer(
            &m,
            &map,
            &InferOptions {
                heads: Some(4),
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn mismatched_features_name_both_sizes() {
        let m = model(1);
        let (map, _) = generate_scene(&SyntheticSceneSpec {
            d_feats: 12,
            ..Default::default()
        })
        .unwrap();
        let msg = infer(&m, &map, &InferOptions::default()).unwrap_err().to_string();
        assert!(msg.contains("D_feats=12") && msg.contains("D_feats=16"), "{msg}");
    }
}
