//! Class-agnostic localization metrics on the patch grid.

use std::fmt::Write as _;

use crate::assignment::{hungarian, Objective};
use crate::error::{Error, Result};
use crate::features::{BoundingBox, GroundTruth, LabelGrid};
use crate::tensor::Tensor;

/// Hard assignment of every patch to one slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    pub grid_h: usize,
    pub grid_w: usize,
    pub labels: Vec<usize>,
    pub per_slot_masks: Vec<Vec<bool>>,
    /// `None` for slots that own no patch.
    pub boxes: Vec<Option<BoundingBox>>,
}

impl SegmentationResult {
    fn from_labels_vec(grid_h: usize, grid_w: usize, labels: Vec<usize>, slots: usize) -> Self {
        let per_slot_masks: Vec<Vec<bool>> = (0..slots).map(|k| labels.iter().map(|&l| l == k).collect()).collect();
        let boxes = per_slot_masks.iter().map(|m| BoundingBox::of_mask(m, grid_w)).collect();
        Self {
            grid_h,
            grid_w,
            labels,
            per_slot_masks,
            boxes,
        }
    }

    /// Reads a predicted label grid; every distinct label (zero included) is a segment.
    pub fn from_label_grid(grid: &LabelGrid) -> Self {
        let mut ids: Vec<u32> = grid.labels.clone();
        ids.sort_unstable();
        ids.dedup();
        let labels = grid
            .labels
            .iter()
            .map(|l| ids.binary_search(l).expect("label is listed"))
            .collect();
        Self::from_labels_vec(grid.grid_h, grid.grid_w, labels, ids.len())
    }

    /// Slot `k` is written as label `k + 1`.
    pub fn to_label_grid(&self) -> LabelGrid {
        LabelGrid {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            labels: self.labels.iter().map(|&l| l as u32 + 1).collect(),
        }
    }

    pub fn nonempty_masks(&self) -> Vec<Vec<bool>> {
        self.per_slot_masks
            .iter()
            .filter(|m| m.iter().any(|&x| x))
            .cloned()
            .collect()
    }

    pub fn present_boxes(&self) -> Vec<BoundingBox> {
        self.boxes.iter().flatten().copied().collect()
    }
}

/// Argmax over slots per patch, ties to the lower slot index.
pub fn masks_from_alphas(alphas: &Tensor, grid_h: usize, grid_w: usize) -> Result<SegmentationResult> {
    if alphas.rank() != 2 || alphas.cols() != grid_h * grid_w || alphas.rows() == 0 {
        return Err(Error::contract(format!(
            "alphas {:?} do not cover a {grid_h}x{grid_w} grid",
            alphas.shape()
        )));
    }
    let k = alphas.rows();
    let labels = (0..alphas.cols())
        .map(|n| {
            let mut best = 0;
            for s in 1..k {
                if alphas.at(s, n) > alphas.at(best, n) {
                    best = s;
                }
            }
            best
        })
        .collect();
    Ok(SegmentationResult::from_labels_vec(grid_h, grid_w, labels, k))
}

/// Intersection over union counted in grid cells.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let r0 = a.row_min.max(b.row_min);
    let r1 = a.row_max.min(b.row_max);
    let c0 = a.col_min.max(b.col_min);
    let c1 = a.col_max.min(b.col_max);
    let inter = if r0 <= r1 && c0 <= c1 {
        (r1 - r0 + 1) * (c1 - c0 + 1)
    } else {
        0
    };
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Whether any predicted box overlaps any ground-truth box with IoU above 0.5.
pub fn corloc_hit(pred: &[BoundingBox], gt: &[BoundingBox]) -> bool {
    pred.iter().any(|p| gt.iter().any(|g| box_iou(p, g) > 0.5))
}

/// Fraction of images with at least one ground-truth box that are hits.
pub fn corloc(results: &[SegmentationResult], gts: &[GroundTruth]) -> Result<f64> {
    check_counts(results.len(), gts.len())?;
    let mut hits = 0usize;
    let mut counted = 0usize;
    for (r, g) in results.iter().zip(gts) {
        if g.boxes.is_empty() {
            continue;
        }
        counted += 1;
        hits += usize::from(corloc_hit(&r.present_boxes(), &g.boxes));
    }
    Ok(if counted == 0 {
        0.0
    } else {
        hits as f64 / counted as f64
    })
}

/// `(mIoU, mBo)` of one image, or `None` without ground-truth masks.
///
/// mIoU pairs masks one-to-one by maximizing total IoU and averages over the
/// ground-truth masks (unmatched ones score zero); mBo averages each
/// ground-truth mask's best IoU with any prediction.
pub fn matched_mask_metrics(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> Option<(f64, f64)> {
    if gt.is_empty() {
        return None;
    }
    let iou: Vec<Vec<f64>> = gt
        .iter()
        .map(|g| pred.iter().map(|p| mask_iou(g, p)).collect())
        .collect();
    let mbo = iou
        .iter()
        .map(|row| row.iter().copied().fold(0.0, f64::max))
        .sum::<f64>()
        / gt.len() as f64;
    let n = gt.len().max(pred.len());
    let mut square = vec![0.0; n * n];
    for (g, row) in iou.iter().enumerate() {
        square[g * n..g * n + row.len()].copy_from_slice(row);
    }
    let matrix = Tensor::from_parts(vec![n, n], square);
    let assignment = hungarian(&matrix, Objective::Maximize).expect("finite square matrix");
    let miou = (0..gt.len()).map(|g| matrix.at(g, assignment.mapping[g])).sum::<f64>() / gt.len() as f64;
    Some((miou, mbo))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub name: String,
    /// `None` when the image has no ground-truth object.
    pub corloc_hit: Option<bool>,
    pub miou: Option<f64>,
    pub mbo: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub corloc: f64,
    pub miou: f64,
    pub mbo: f64,
    pub records: Vec<ImageRecord>,
    /// Images skipped for lacking ground-truth masks.
    pub skipped: usize,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,corloc_hit,miou,mbo\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        for r in &self.records {
            let hit = r.corloc_hit.map_or(String::new(), |h| u8::from(h).to_string());
            let _ = writeln!(s, "{},{},{},{}", r.name, hit, opt(r.miou), opt(r.mbo));
        }
        let _ = writeln!(s, "mean,{:.6},{:.6},{:.6}", self.corloc, self.miou, self.mbo);
        s
    }
}

fn check_counts(pred: usize, gt: usize) -> Result<()> {
    if pred != gt {
        return Err(Error::contract(format!("{pred} predictions for {gt} ground truths")));
    }
    Ok(())
}

/// Per-image metrics averaged over the images that have ground truth.
pub fn evaluate(results: &[SegmentationResult], gts: &[GroundTruth], names: Option<&[String]>) -> Result<EvalReport> {
    check_counts(results.len(), gts.len())?;
    if let Some(n) = names {
        check_counts(n.len(), gts.len())?;
    }
    let mut records = Vec::with_capacity(results.len());
    let (mut hits, mut counted) = (0usize, 0usize);
    let (mut miou_sum, mut mbo_sum, mut scored) = (0.0, 0.0, 0usize);
    for (i, (r, g)) in results.iter().zip(gts).enumerate() {
        if (r.grid_h, r.grid_w) != (g.grid_h, g.grid_w) {
            return Err(Error::contract(format!(
                "image {i}: prediction grid {}x{} vs ground truth {}x{}",
                r.grid_h, r.grid_w, g.grid_h, g.grid_w
            )));
        }
        let hit = (!g.boxes.is_empty()).then(|| corloc_hit(&r.present_boxes(), &g.boxes));
        if let Some(h) = hit {
            counted += 1;
            hits += usize::from(h);
        }
        let mm = matched_mask_metrics(&r.nonempty_masks(), &g.instance_masks);
        if let Some((mi, mb)) = mm {
            miou_sum += mi;
            mbo_sum += mb;
            scored += 1;
        }
        records.push(ImageRecord {
            name: names.map_or_else(|| i.to_string(), |n| n[i].clone()),
            corloc_hit: hit,
            miou: mm.map(|m| m.0),
            mbo: mm.map(|m| m.1),
        });
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(EvalReport {
        corloc: mean(hits as f64, counted),
        miou: mean(miou_sum, scored),
        mbo: mean(mbo_sum, scored),
        skipped: results.len() - scored,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::next_permutation;
    use crate::features::{generate_scene, SyntheticSceneSpec};
    use proptest::prelude::*;

    fn bb(r0: usize, c0: usize, r1: usize, c1: usize) -> BoundingBox {
        BoundingBox {
            row_min: r0,
            col_min: c0,
            row_max: r1,
            col_max: c1,
        }
    }

    #[test]
    fn box_iou_examples() {
        assert_eq!(box_iou(&bb(0, 0, 1, 1), &bb(1, 1, 2, 2)), 1.0 / 7.0);
        assert_eq!(box_iou(&bb(0, 0, 2, 2), &bb(0, 0, 2, 2)), 1.0);
        assert_eq!(box_iou(&bb(0, 0, 0, 0), &bb(1, 1, 1, 1)), 0.0);
    }

    #[test]
    fn two_by_two_boxes() {
        let alphas = Tensor::from_rows(&[[0.9, 0.8, 0.1, 0.3], [0.1, 0.2, 0.9, 0.7]]).unwrap();
        let seg = masks_from_alphas(&alphas, 2, 2).unwrap();
        assert_eq!(seg.labels, vec![0, 0, 1, 1]);
        assert_eq!(seg.boxes, vec![Some(bb(0, 0, 0, 1)), Some(bb(1, 0, 1, 1))]);
    }

    #[test]
    fn single_slot_and_ties() {
        let seg = masks_from_alphas(&Tensor::full(&[1, 6], 1.0), 2, 3).unwrap();
        assert!(seg.labels.iter().all(|&l| l == 0));
        assert_eq!(seg.boxes, vec![Some(bb(0, 0, 1, 2))]);
        let tie = masks_from_alphas(&Tensor::full(&[3, 4], 1.0 / 3.0), 2, 2).unwrap();
        assert!(tie.labels.iter().all(|&l| l == 0));
        assert_eq!(tie.boxes[1], None);
        assert!(masks_from_alphas(&Tensor::full(&[2, 5], 0.5), 2, 2).is_err());
    }

    #[test]
    fn one_hot_alphas_reproduce_the_partition() {
        let labels = [2usize, 0, 1, 1, 2, 0];
        let mut a = Tensor::zeros(&[3, 6]);
        for (n, &l) in labels.iter().enumerate() {
            a.data_mut()[l * 6 + n] = 1.0;
        }
        let seg = masks_from_alphas(&a, 2, 3).unwrap();
        assert_eq!(seg.labels, labels);
        for (k, m) in seg.per_slot_masks.iter().enumerate() {
            for (n, &x) in m.iter().enumerate() {
                assert_eq!(x, labels[n] == k);
            }
        }
    }

    #[test]
    fn one_prediction_two_objects() {
        // a prediction over all 10 cells overlaps the two objects at 0.6 and 0.4
        let n = 10;
        let pred = vec![true; n];
        let gt_a: Vec<bool> = (0..n).map(|i| i < 6).collect();
        let gt_b: Vec<bool> = (0..n).map(|i| i >= 6).collect();
        let (mi, mb) = matched_mask_metrics(&[pred], &[gt_a, gt_b]).unwrap();
        assert!((mi - 0.3).abs() < 1e-15);
        assert!((mb - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_and_disjoint_predictions() {
        let gt = vec![vec![true, true, false, false], vec![false, false, true, false]];
        assert_eq!(matched_mask_metrics(&gt, &gt), Some((1.0, 1.0)));
        let disjoint = vec![vec![false, false, false, true]];
        assert_eq!(matched_mask_metrics(&disjoint, &gt[..1]), Some((0.0, 0.0)));
        assert_eq!(matched_mask_metrics(&gt, &[]), None);
    }

    #[test]
    fn corloc_cases() {
        let gt = |b: BoundingBox| GroundTruth {
            grid_h: 4,
            grid_w: 4,
            instance_masks: vec![],
            boxes: vec![b],
        };
        let seg = |b: BoundingBox| SegmentationResult {
            grid_h: 4,
            grid_w: 4,
            labels: vec![],
            per_slot_masks: vec![],
            boxes: vec![Some(b)],
        };
        let gts = [gt(bb(0, 0, 1, 1)), gt(bb(2, 2, 3, 3))];
        let hit_miss = [seg(bb(0, 0, 1, 1)), seg(bb(0, 0, 0, 0))];
        assert_eq!(corloc(&hit_miss, &gts).unwrap(), 0.5);
        let perfect = [seg(bb(0, 0, 1, 1)), seg(bb(2, 2, 3, 3))];
        assert_eq!(corloc(&perfect, &gts).unwrap(), 1.0);
        let none = [seg(bb(3, 0, 3, 0)), seg(bb(0, 3, 0, 3))];
        assert_eq!(corloc(&none, &gts).unwrap(), 0.0);
        assert!(corloc(&none[..1], &gts).is_err());
    }

    #[test]
    fn evaluate_on_synthetic_scenes() {
        let scenes: Vec<GroundTruth> = (0..5)
            .map(|s| {
                generate_scene(&SyntheticSceneSpec {
                    seed: s,
                    ..Default::default()
                })
                .unwrap()
                .1
            })
            .collect();
        let perfect: Vec<SegmentationResult> = scenes
            .iter()
            .map(|g| SegmentationResult::from_label_grid(&g.to_labels()))
            .collect();
        let report = evaluate(&perfect, &scenes, None).unwrap();
        assert_eq!((report.corloc, report.miou, report.mbo), (1.0, 1.0, 1.0));

        let blank: Vec<SegmentationResult> = scenes
            .iter()
            .map(|_| masks_from_alphas(&Tensor::full(&[1, 64], 1.0), 8, 8).unwrap())
            .collect();
        let report = evaluate(&blank, &scenes, None).unwrap();
        assert_eq!(report.corloc, 0.0);

        let one = evaluate(&perfect[..1], &scenes[..1], Some(&["a".to_string()])).unwrap();
        assert_eq!(Some(one.miou), one.records[0].miou);
        assert!(one
            .to_csv()
            .starts_with("image,corloc_hit,miou,mbo\na,1,1.000000,1.000000\nmean,"));
        assert!(evaluate(&perfect[..2], &scenes, None).is_err());
    }

    #[test]
    fn label_grid_round_trip() {
        let alphas = Tensor::from_rows(&[[0.9, 0.1, 0.1, 0.3], [0.1, 0.9, 0.9, 0.7]]).unwrap();
        let seg = masks_from_alphas(&alphas, 2, 2).unwrap();
        let grid = seg.to_label_grid();
        assert_eq!(grid.labels, vec![1, 2, 2, 2]);
        let back = SegmentationResult::from_label_grid(&grid);
        assert_eq!(back.labels, seg.labels);
        assert_eq!(back.boxes, seg.boxes);
    }

    fn brute_miou(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> f64 {
        let n = gt.len().max(pred.len());
        let mut m = vec![0.0; n * n];
        for (g, gm) in gt.iter().enumerate() {
            for (p, pm) in pred.iter().enumerate() {
                m[g * n + p] = mask_iou(gm, pm);
            }
        }
        let t = Tensor::from_parts(vec![n, n], m);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::MIN;
        loop {
            let s: f64 = (0..gt.len()).map(|g| t.at(g, perm[g])).sum();
            best = best.max(s);
            if !next_permutation(&mut perm) {
                break;
            }
        }
        best / gt.len() as f64
    }

    fn masks(n_masks: usize, cells: usize) -> impl Strategy<Value = Vec<Vec<bool>>> {
        prop::collection::vec(prop::collection::vec(any::<bool>(), cells), n_masks)
    }

    proptest! {
        #[test]
        fn mbo_dominates_miou_and_both_are_bounded(
            gt in (1usize..6).prop_flat_map(|k| masks(k, 16)),
            pred in (0usize..6).prop_flat_map(|k| masks(k, 16)),
        ) {
            let (mi, mb) = matched_mask_metrics(&pred, &gt).unwrap();
            prop_assert!(mb + 1e-12 >= mi);
            prop_assert!((0.0..=1.0).contains(&mi) && (0.0..=1.0).contains(&mb));
            prop_assert!((mi - brute_miou(&pred, &gt)).abs() < 1e-12);
        }

        #[test]
        fn relabeling_slots_changes_nothing(seed in any::<u64>()) {
            let (_, gt) = generate_scene(&SyntheticSceneSpec { seed, ..Default::default() }).unwrap();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let alphas = Tensor::new(vec![4, 64], (0..256).map(|_| rand::Rng::random::<f64>(&mut rng)).collect()).unwrap();
            let perm = [3, 1, 0, 2];
            let a = masks_from_alphas(&alphas, 8, 8).unwrap();
            let b = masks_from_alphas(&alphas.gather_rows(&perm).unwrap(), 8, 8).unwrap();
            let ra = evaluate(&[a], std::slice::from_ref(&gt), None).unwrap();
            let rb = evaluate(&[b], &[gt], None).unwrap();
            prop_assert_eq!((ra.corloc, ra.mbo), (rb.corloc, rb.mbo));
            prop_assert!((ra.miou - rb.miou).abs() < 1e-12);
        }
    }
}
