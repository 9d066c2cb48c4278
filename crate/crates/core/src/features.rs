//! Patch-token feature files, ground-truth label grids and synthetic scenes.
//!
//! Feature file layout (`SLTK0001`), all integers little-endian:
//!
//! ```text
//! magic[8] | u32 grid_h | u32 grid_w | u32 d_feats | u8 token_kind | grid_h·grid_w·d_feats × f32
//! ```
//!
//! Label grids are plain text: `grid_h` lines of `grid_w` whitespace-separated
//! non-negative integers, row-major, with `0` meaning "no object".

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"SLTK0001";
pub const FEATURE_HEADER_LEN: usize = 8 + 4 + 4 + 4 + 1;

/// Which projection of the backbone's last attention layer the tokens came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum TokenKind {
    #[default]
    Key,
    Query,
    Value,
}

impl TokenKind {
    pub fn code(self) -> u8 {
        match self {
            TokenKind::Key => 0,
            TokenKind::Query => 1,
            TokenKind::Value => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(TokenKind::Key),
            1 => Some(TokenKind::Query),
            2 => Some(TokenKind::Value),
            _ => None,
        }
    }
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenKind::Key => "key",
            TokenKind::Query => "query",
            TokenKind::Value => "value",
        })
    }
}

/// Patch tokens of one image laid out on its patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    grid_h: usize,
    grid_w: usize,
    tokens: Tensor,
    token_kind: TokenKind,
}

impl FeatureMap {
    pub fn new(grid_h: usize, grid_w: usize, tokens: Tensor, token_kind: TokenKind) -> Result<Self> {
        if tokens.rank() != 2 || tokens.rows() != grid_h * grid_w || tokens.cols() == 0 {
            return Err(Error::contract(format!(
                "tokens {:?} do not fit a {grid_h}x{grid_w} grid with D_feats > 0",
                tokens.shape()
            )));
        }
        Ok(Self {
            grid_h,
            grid_w,
            tokens,
            token_kind,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn d_feats(&self) -> usize {
        self.tokens.cols()
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn token_kind(&self) -> TokenKind {
        self.token_kind
    }

    pub fn with_tokens(&self, tokens: Tensor) -> Result<Self> {
        Self::new(self.grid_h, self.grid_w, tokens, self.token_kind)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + self.tokens.numel() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.grid_h as u32).to_le_bytes());
        out.extend_from_slice(&(self.grid_w as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_feats() as u32).to_le_bytes());
        out.push(self.token_kind.code());
        for &v in self.tokens.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != FEATURE_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "missing SLTK0001 magic".into(),
            });
        }
        if bytes.len() < FEATURE_HEADER_LEN {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                message: format!("header needs {FEATURE_HEADER_LEN} bytes, file has {}", bytes.len()),
            });
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        let (grid_h, grid_w, d_feats) = (u32_at(8), u32_at(12), u32_at(16));
        let token_kind = TokenKind::from_code(bytes[20]).ok_or_else(|| Error::Format {
            offset: 20,
            message: format!("unknown token kind {}", bytes[20]),
        })?;
        if d_feats == 0 {
            return Err(Error::Format {
                offset: 16,
                message: "d_feats must be positive".into(),
            });
        }
        let expected = (grid_h * grid_w * d_feats * 4) as u64;
        let payload = &bytes[FEATURE_HEADER_LEN..];
        if payload.len() as u64 != expected {
            return Err(Error::Length {
                expected,
                found: payload.len() as u64,
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Self::new(
            grid_h,
            grid_w,
            Tensor::from_parts(vec![grid_h * grid_w, d_feats], data),
            token_kind,
        )
    }
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    FeatureMap::from_bytes(&bytes)
}

pub fn save_features(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&map.to_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Inclusive cell bounds on the patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)
    }

    /// Tight bounds of the set cells of a row-major mask, `None` when empty.
    pub fn of_mask(mask: &[bool], grid_w: usize) -> Option<Self> {
        let mut bb: Option<BoundingBox> = None;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (r, c) = (i / grid_w, i % grid_w);
            bb = Some(match bb {
                None => BoundingBox {
                    row_min: r,
                    col_min: c,
                    row_max: r,
                    col_max: c,
                },
                Some(b) => BoundingBox {
                    row_min: b.row_min.min(r),
                    col_min: b.col_min.min(c),
                    row_max: b.row_max.max(r),
                    col_max: b.col_max.max(c),
                },
            });
        }
        bb
    }
}

/// Integer label per patch cell, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub labels: Vec<u32>,
}

impl LabelGrid {
    pub fn new(grid_h: usize, grid_w: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != grid_h * grid_w {
            return Err(Error::contract(format!(
                "{} labels for a {grid_h}x{grid_w} grid",
                labels.len()
            )));
        }
        Ok(Self { grid_h, grid_w, labels })
    }

    /// One mask per distinct non-zero label, in ascending label order.
    pub fn masks(&self) -> Vec<Vec<bool>> {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.iter()
            .map(|&id| self.labels.iter().map(|&l| l == id).collect())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in self.labels.chunks(self.grid_w.max(1)) {
            let line: Vec<String> = row.iter().map(u32::to_string).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }
}

impl FromStr for LabelGrid {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut labels = Vec::new();
        let mut grid_w = None;
        let mut grid_h = 0;
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len() as u64;
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>().map_err(|_| Error::Format {
                        offset: start,
                        message: format!("bad label `{tok}` on grid row {grid_h}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            match grid_w {
                None => grid_w = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(Error::Format {
                        offset: start,
                        message: format!("row {grid_h} has {} cells, expected {w}", row.len()),
                    })
                }
                _ => {}
            }
            labels.extend(row);
            grid_h += 1;
        }
        LabelGrid::new(grid_h, grid_w.unwrap_or(0), labels)
    }
}

/// Object instances of one image on its patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub grid_h: usize,
    pub grid_w: usize,
    pub instance_masks: Vec<Vec<bool>>,
    pub boxes: Vec<BoundingBox>,
}

impl GroundTruth {
    pub fn from_masks(grid_h: usize, grid_w: usize, instance_masks: Vec<Vec<bool>>) -> Result<Self> {
        let mut boxes = Vec::with_capacity(instance_masks.len());
        for m in &instance_masks {
            if m.len() != grid_h * grid_w {
                return Err(Error::contract("mask length does not match the grid"));
            }
            boxes.push(BoundingBox::of_mask(m, grid_w).ok_or_else(|| Error::contract("empty instance mask"))?);
        }
        Ok(Self {
            grid_h,
            grid_w,
            instance_masks,
            boxes,
        })
    }

    pub fn from_labels(grid: &LabelGrid) -> Result<Self> {
        Self::from_masks(grid.grid_h, grid.grid_w, grid.masks())
    }

    /// Label `i + 1` for instance `i`; overlapping cells take the later instance.
    pub fn to_labels(&self) -> LabelGrid {
        let mut labels = vec![0u32; self.grid_h * self.grid_w];
        for (i, m) in self.instance_masks.iter().enumerate() {
            for (l, _) in labels.iter_mut().zip(m).filter(|(_, &on)| on) {
                *l = i as u32 + 1;
            }
        }
        LabelGrid {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            labels,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_objects: usize,
    pub d_feats: usize,
    pub background_mean: f64,
    pub object_mean_range: (f64, f64),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            grid_h: 8,
            grid_w: 8,
            n_objects: 2,
            d_feats: 16,
            background_mean: 2.0,
            object_mean_range: (0.0, 0.5),
            noise_std: 0.05,
            seed: 0,
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 1000;

/// Rectangular objects with their own prototype token over a brighter background.
pub fn generate_scene(spec: &SyntheticSceneSpec) -> Result<(FeatureMap, GroundTruth)> {
    let (lo, hi) = spec.object_mean_range;
    if !(spec.background_mean > hi && lo <= hi) {
        return Err(Error::contract(format!(
            "background mean {} must exceed object range ({lo}, {hi})",
            spec.background_mean
        )));
    }
    if spec.grid_h == 0 || spec.grid_w == 0 || spec.d_feats == 0 || spec.noise_std < 0.0 {
        return Err(Error::contract(
            "scene grid, d_feats must be positive and noise non-negative",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (gh, gw) = (spec.grid_h, spec.grid_w);
    let n = gh * gw;

    let side = |dim: usize| {
        let min = if dim >= 4 { 2 } else { 1 };
        (min, (dim / 2).max(min))
    };
    let (h_range, w_range) = (side(gh), side(gw));
    let mut occupied = vec![false; n];
    let mut masks = Vec::with_capacity(spec.n_objects);
    let mut attempts = 0;
    while masks.len() < spec.n_objects {
        if attempts == PLACEMENT_ATTEMPTS {
            return Err(Error::Capacity {
                requested: spec.n_objects,
                attempts,
            });
        }
        attempts += 1;
        let h = rng.random_range(h_range.0..=h_range.1);
        let w = rng.random_range(w_range.0..=w_range.1);
        let r0 = rng.random_range(0..=gh - h);
        let c0 = rng.random_range(0..=gw - w);
        let cells: Vec<usize> = (r0..r0 + h)
            .flat_map(|r| (c0..c0 + w).map(move |c| r * gw + c))
            .collect();
        if cells.iter().any(|&i| occupied[i]) {
            continue;
        }
        let mut mask = vec![false; n];
        for i in cells {
            mask[i] = true;
            occupied[i] = true;
        }
        masks.push(mask);
    }

    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::contract(e.to_string()))?;
    let prototypes: Vec<Vec<f64>> = (0..spec.n_objects)
        .map(|_| (0..spec.d_feats).map(|_| rng.random_range(lo..=hi)).collect())
        .collect();
    let mut data = Vec::with_capacity(n * spec.d_feats);
    for cell in 0..n {
        let owner = masks.iter().position(|m| m[cell]);
        let background = vec![spec.background_mean; spec.d_feats];
        for &base in owner.map_or(&background, |o| &prototypes[o]) {
            data.push(base + noise.sample(&mut rng));
        }
    }
    let map = FeatureMap::new(gh, gw, Tensor::from_parts(vec![n, spec.d_feats], data), TokenKind::Key)?;
    let gt = GroundTruth::from_masks(gh, gw, masks)?;
    Ok((map, gt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn counting_map() -> FeatureMap {
        let data = (0..12).map(f64::from).collect();
        FeatureMap::new(2, 2, Tensor::new(vec![4, 3], data).unwrap(), TokenKind::Key).unwrap()
    }

    #[test]
    fn direct_layout() {
        let back = FeatureMap::from_bytes(&counting_map().to_bytes()).unwrap();
        assert_eq!(back.tokens().at(1, 2), 5.0);
        assert_eq!(back.grid_h(), 2);
        assert_eq!(back.token_kind(), TokenKind::Key);
    }

    #[test]
    fn truncated_payload_reports_byte_counts() {
        let mut bytes = counting_map().to_bytes();
        bytes.truncate(bytes.len() - 4);
        match FeatureMap::from_bytes(&bytes) {
            Err(Error::Length { expected, found }) => {
                assert_eq!(expected, 48);
                assert_eq!(found, 44);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = counting_map().to_bytes();
        bytes[3] = b'X';
        assert!(matches!(
            FeatureMap::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        bytes = counting_map().to_bytes();
        bytes[20] = 9;
        assert!(matches!(
            FeatureMap::from_bytes(&bytes),
            Err(Error::Format { offset: 20, .. })
        ));
    }

    #[test]
    fn single_cell_payload_is_four_bytes() {
        let map = FeatureMap::new(1, 1, Tensor::from_rows(&[[0.25]]).unwrap(), TokenKind::Value).unwrap();
        let bytes = map.to_bytes();
        assert_eq!(bytes.len(), FEATURE_HEADER_LEN + 4);
        assert_eq!(bytes[20], 2);
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.sltk");
        let (map, _) = generate_scene(&SyntheticSceneSpec {
            n_objects: 0,
            ..Default::default()
        })
        .unwrap();
        save_features(&map, &path).unwrap();
        let back = load_features(&path).unwrap();
        let widened = map.tokens().map(|v| v as f32 as f64);
        assert_eq!(back.tokens(), &widened);
        assert!(matches!(
            load_features(dir.path().join("missing.sltk")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn empty_scene_is_all_background() {
        let spec = SyntheticSceneSpec {
            n_objects: 0,
            ..Default::default()
        };
        let (map, gt) = generate_scene(&spec).unwrap();
        assert!(gt.instance_masks.is_empty() && gt.boxes.is_empty());
        let mean = map.tokens().sum() / map.tokens().numel() as f64;
        assert!((mean - 2.0).abs() < 0.02);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSceneSpec {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
    }

    #[test]
    fn overfull_grid_is_a_capacity_error() {
        let spec = SyntheticSceneSpec {
            grid_h: 4,
            grid_w: 4,
            n_objects: 20,
            ..Default::default()
        };
        assert!(matches!(generate_scene(&spec), Err(Error::Capacity { .. })));
    }

    #[test]
    fn background_must_be_brighter() {
        let spec = SyntheticSceneSpec {
            background_mean: 0.1,
            ..Default::default()
        };
        assert!(generate_scene(&spec).is_err());
    }

    /// Background and object means separate cleanly, so mean ranking masks background first.
    #[test]
    fn mean_ranking_separates_background_over_seeds() {
        let mut separated = 0;
        for seed in 0..100 {
            let (map, gt) = generate_scene(&SyntheticSceneSpec {
                seed,
                ..Default::default()
            })
            .unwrap();
            let means: Vec<f64> = (0..map.num_patches())
                .map(|n| map.tokens().row(n).iter().sum::<f64>() / map.d_feats() as f64)
                .collect();
            let is_obj = |n: usize| gt.instance_masks.iter().any(|m| m[n]);
            let min_bg = (0..means.len())
                .filter(|&n| !is_obj(n))
                .map(|n| means[n])
                .fold(f64::INFINITY, f64::min);
            let max_obj = (0..means.len())
                .filter(|&n| is_obj(n))
                .map(|n| means[n])
                .fold(f64::NEG_INFINITY, f64::max);
            // the top half by mean is background-only (or covers every background cell)
            let mut order: Vec<usize> = (0..means.len()).collect();
            order.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
            let top = &order[means.len() / 2..];
            let bg_count = (0..means.len()).filter(|&n| !is_obj(n)).count();
            let ok = if bg_count >= top.len() {
                top.iter().all(|&n| !is_obj(n))
            } else {
                (0..means.len()).filter(|&n| !is_obj(n)).all(|n| top.contains(&n))
            };
            if ok && min_bg > max_obj {
                separated += 1;
            }
        }
        assert!(separated >= 99, "{separated}/100");
    }

    #[test]
    fn label_grid_text_round_trip_and_errors() {
        let grid: LabelGrid = "0 1 1\n0 2 2\n".parse().unwrap();
        assert_eq!((grid.grid_h, grid.grid_w), (2, 3));
        let gt = GroundTruth::from_labels(&grid).unwrap();
        assert_eq!(
            gt.boxes[0],
            BoundingBox {
                row_min: 0,
                col_min: 1,
                row_max: 0,
                col_max: 2
            }
        );
        assert_eq!(gt.to_labels(), grid);
        assert_eq!(grid.to_text().parse::<LabelGrid>().unwrap(), grid);
        assert!(matches!(
            "0 1\n0\n".parse::<LabelGrid>(),
            Err(Error::Format { offset: 4, .. })
        ));
        assert!("0 x\n".parse::<LabelGrid>().is_err());
    }

    proptest! {
        #[test]
        fn feature_round_trip_at_f32(
            gh in 1usize..5, gw in 1usize..5, d in 1usize..6, kind in 0u8..3,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..gh * gw * d).map(|_| rng.random_range(-1e3..1e3f64) as f32 as f64).collect();
            let map = FeatureMap::new(gh, gw, Tensor::new(vec![gh * gw, d], data).unwrap(),
                TokenKind::from_code(kind).unwrap()).unwrap();
            prop_assert_eq!(FeatureMap::from_bytes(&map.to_bytes()).unwrap(), map);
        }

        #[test]
        fn synthetic_boxes_are_tight(seed in any::<u64>(), n_objects in 0usize..4) {
            let spec = SyntheticSceneSpec { seed, n_objects, ..Default::default() };
            let (_, gt) = generate_scene(&spec).unwrap();
            for (m, b) in gt.instance_masks.iter().zip(&gt.boxes) {
                prop_assert_eq!(BoundingBox::of_mask(m, gt.grid_w).unwrap(), *b);
                // rectangles fill their boxes exactly
                prop_assert_eq!(m.iter().filter(|&&x| x).count(), b.area());
            }
            for i in 0..gt.instance_masks.len() {
                for j in i + 1..gt.instance_masks.len() {
                    let overlap = gt.instance_masks[i].iter().zip(&gt.instance_masks[j]).any(|(a, b)| *a && *b);
                    prop_assert!(!overlap);
                }
            }
        }
    }
}
