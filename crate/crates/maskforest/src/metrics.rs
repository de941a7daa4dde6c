//! Segmentation metrics: confusion matrices, accuracy, per-class IoU, mIoU
//! and region-purity reports.

use crate::data::{ClassMask, IGNORE};
use crate::error::{Error, Result};
use crate::forest::ForestModel;
use crate::loss::{region_class_histogram, split_target_for_subset, BlockTarget};
use crate::render::{render_region_map, Raster, RendererConfig};

/// Class confusion counts; rows are ground truth, columns predictions.
/// Ignored pixels are excluded at construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn add(&mut self, gt: usize, pred: usize) {
        self.counts[gt * self.classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Build the confusion matrix of a prediction against ground truth.
///
/// Pixels whose ground truth is 255 or `ignore_class` are excluded.
pub fn confusion(
    pred: &ClassMask,
    gt: &ClassMask,
    classes: usize,
    ignore_class: Option<usize>,
) -> Result<ConfusionMatrix> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::contract(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for y in 0..gt.height {
        for x in 0..gt.width {
            let g = gt.get(x, y);
            if g == IGNORE || Some(g as usize) == ignore_class {
                continue;
            }
            let p = pred.get(x, y);
            if g as usize >= classes {
                return Err(Error::contract(format!(
                    "ground-truth value {g} exceeds class count {classes}"
                )));
            }
            if p as usize >= classes {
                return Err(Error::contract(format!(
                    "prediction value {p} exceeds class count {classes}"
                )));
            }
            cm.add(g as usize, p as usize);
        }
    }
    Ok(cm)
}

/// Fraction of evaluated pixels on the diagonal.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::domain("accuracy of an empty confusion matrix"));
    }
    let correct: u64 = (0..cm.classes).map(|c| cm.count(c, c)).sum();
    Ok(correct as f64 / total as f64)
}

/// Per-class intersection over union; `None` for classes absent from both
/// ground truth and prediction.
pub fn per_class_iou(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.classes)
        .map(|c| {
            let tp = cm.count(c, c);
            let fp: u64 = (0..cm.classes).filter(|g| *g != c).map(|g| cm.count(g, c)).sum();
            let fn_: u64 = (0..cm.classes).filter(|p| *p != c).map(|p| cm.count(c, p)).sum();
            let denom = tp + fp + fn_;
            if denom == 0 {
                None
            } else {
                Some(tp as f64 / denom as f64)
            }
        })
        .collect()
}

/// Mean IoU over the classes present in ground truth or prediction.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    let ious: Vec<f64> = per_class_iou(cm).into_iter().flatten().collect();
    if ious.is_empty() {
        return Err(Error::domain("mIoU of an empty confusion matrix"));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Gini impurity of one region of one block against the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PurityRow {
    pub bx: usize,
    pub by: usize,
    pub subset: usize,
    pub region: usize,
    pub gini: f64,
    /// Soft pixel count of the region.
    pub size: f64,
}

/// Region purities of a whole model against a ground-truth mask.
#[derive(Clone, Debug)]
pub struct PurityReport {
    pub rows: Vec<PurityRow>,
    /// Subset-weighted grand mean, matching the purity loss definition.
    pub mean: f64,
}

/// Per-block, per-region Gini impurity table for a fitted model.
pub fn purity_report(
    model: &ForestModel,
    gt: &ClassMask,
    config: RendererConfig,
) -> Result<PurityReport> {
    let (w, h) = model.native_size();
    if gt.width != w || gt.height != h {
        return Err(Error::contract(format!(
            "ground truth is {}x{}, model renders {w}x{h}",
            gt.width, gt.height
        )));
    }
    let spec = &model.spec;
    let raster = Raster::square(spec.block_size)?;
    let mut rows = Vec::new();
    // Per-subset means combined with |C_j| / |C| weights, like the loss.
    let mut subset_sums = vec![0.0; spec.subsets.len()];
    let mut subset_counts = vec![0usize; spec.subsets.len()];
    for by in 0..model.grid_height {
        for bx in 0..model.grid_width {
            let target =
                BlockTarget::from_mask_block(gt, bx, by, spec.block_size, spec.class_count, None)?;
            let block = model.block(bx, by);
            for (j, (subset, params)) in spec.subsets.iter().zip(&block.subsets).enumerate() {
                let rm = render_region_map::<f64>(
                    &subset.tree,
                    &params.inner,
                    (),
                    raster,
                    config,
                )?;
                let split = split_target_for_subset(&target, &subset.classes);
                let hist = region_class_histogram(&rm, &split, ())?;
                for (region, p) in hist.probs.iter().enumerate() {
                    let g = crate::loss::gini(p, ());
                    rows.push(PurityRow {
                        bx,
                        by,
                        subset: j,
                        region,
                        gini: g,
                        size: hist.sizes[region],
                    });
                    subset_sums[j] += g;
                    subset_counts[j] += 1;
                }
            }
        }
    }
    let mut mean = 0.0;
    for (j, subset) in spec.subsets.iter().enumerate() {
        if subset_counts[j] > 0 {
            mean += subset.classes.len() as f64 * subset_sums[j] / subset_counts[j] as f64;
        }
    }
    mean /= spec.class_count as f64;
    Ok(PurityReport { rows, mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_of(values: &[u8], width: usize) -> ClassMask {
        ClassMask::from_vec(width, values.len() / width, values.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = mask_of(&[0, 1, 2, 0, 1, 2], 3);
        let cm = confusion(&gt, &gt, 3, None).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 1.0);
        assert_eq!(miou(&cm).unwrap(), 1.0);
    }

    #[test]
    fn everything_wrong() {
        let gt = mask_of(&[0, 1], 2);
        let pred = mask_of(&[1, 0], 2);
        let cm = confusion(&pred, &gt, 2, None).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 0.0);
        assert_eq!(miou(&cm).unwrap(), 0.0);
    }

    #[test]
    fn half_right_hand_case() {
        // gt half class 0 / half class 1, prediction all class 0:
        // accuracy 0.5, IoU = (0.5, 0), mIoU 0.25
        let gt = mask_of(&[0, 0, 1, 1], 4);
        let pred = mask_of(&[0, 0, 0, 0], 4);
        let cm = confusion(&pred, &gt, 2, None).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 0.5);
        let iou = per_class_iou(&cm);
        assert_eq!(iou[0], Some(0.5));
        assert_eq!(iou[1], Some(0.0));
        assert_eq!(miou(&cm).unwrap(), 0.25);
    }

    #[test]
    fn ignored_pixels_are_excluded() {
        let gt = mask_of(&[0, IGNORE, 1, 2], 4);
        let pred = mask_of(&[0, 1, 0, 2], 4);
        let cm = confusion(&pred, &gt, 3, Some(1)).unwrap();
        // pixel 1 ignored by 255, pixel 2 ignored by ignore_class=1
        assert_eq!(cm.total(), 2);
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(2, 2), 1);
    }

    #[test]
    fn fully_ignored_matrix_is_an_error() {
        let gt = mask_of(&[IGNORE, IGNORE], 2);
        let pred = mask_of(&[0, 0], 2);
        let cm = confusion(&pred, &gt, 2, None).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(accuracy(&cm).is_err());
        assert!(miou(&cm).is_err());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let gt = mask_of(&[0, 0], 2);
        let pred = mask_of(&[0, 0, 0], 3);
        assert!(confusion(&pred, &gt, 2, None).is_err());
    }

    #[test]
    fn absent_classes_are_excluded_from_miou() {
        // class 2 appears nowhere: mean over classes 0 and 1 only
        let gt = mask_of(&[0, 0, 1, 1], 4);
        let pred = mask_of(&[0, 0, 1, 0], 4);
        let cm = confusion(&pred, &gt, 3, None).unwrap();
        let iou = per_class_iou(&cm);
        assert_eq!(iou[2], None);
        let expect = (iou[0].unwrap() + iou[1].unwrap()) / 2.0;
        assert!((miou(&cm).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn label_permutation_invariance() {
        let gt = mask_of(&[0, 1, 2, 1, 0, 2, 2, 1, 0], 3);
        let pred = mask_of(&[0, 1, 1, 1, 0, 2, 0, 1, 0], 3);
        let cm = confusion(&pred, &gt, 3, None).unwrap();
        let (a0, m0) = (accuracy(&cm).unwrap(), miou(&cm).unwrap());
        // permute labels 0->1, 1->2, 2->0 in both masks
        let perm = |m: &ClassMask| {
            let data: Vec<u8> = m.data().iter().map(|v| (v + 1) % 3).collect();
            ClassMask::from_vec(3, 3, data).unwrap()
        };
        let cm = confusion(&perm(&pred), &perm(&gt), 3, None).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), a0);
        assert!((miou(&cm).unwrap() - m0).abs() < 1e-12);
    }

    #[test]
    fn purity_report_constant_ground_truth_is_zero() {
        let spec = crate::forest::ForestSpec::default_bsp(3);
        let mut params = crate::forest::BlockParams::zeros(&spec);
        params.subsets[0].inner = vec![0.4, 0.3, 0.0, -0.2, 0.7, 0.1, 0.5, -0.6, 0.2];
        let model = ForestModel::new(spec, 1, 1, vec![params]).unwrap();
        let gt = ClassMask::filled(8, 8, 1).unwrap();
        let report = purity_report(&model, &gt, RendererConfig::default()).unwrap();
        assert!(report.mean < 1e-9);
        assert!(report.rows.iter().all(|r| r.gini < 1e-9));
        assert_eq!(report.rows.len(), 4);
    }

    #[test]
    fn purity_report_matches_loss_purity() {
        use crate::loss::{loss_purity, LossWeights};
        let spec = crate::forest::ForestSpec::default_bsp(2);
        let mut params = crate::forest::BlockParams::zeros(&spec);
        params.subsets[0].inner = vec![0.9, 0.1, 0.0, 0.2, 0.8, 0.3, -0.4, 0.5, -0.1];
        let model = ForestModel::new(spec.clone(), 1, 1, vec![params.clone()]).unwrap();
        let mut gt = ClassMask::filled(8, 8, 0).unwrap();
        for y in 0..8 {
            for x in 5..8 {
                gt.set(x, y, 1);
            }
        }
        let config = RendererConfig::default();
        let report = purity_report(&model, &gt, config).unwrap();

        let rm = render_region_map::<f64>(
            &spec.subsets[0].tree,
            &params.subsets[0].inner,
            (),
            Raster::square(8).unwrap(),
            config,
        )
        .unwrap();
        let target = BlockTarget::from_mask_block(&gt, 0, 0, 8, 2, None).unwrap();
        let split = split_target_for_subset(&target, &[0, 1]);
        let hist = region_class_histogram(&rm, &split, ()).unwrap();
        let expect = loss_purity(&[hist], (), LossWeights::defaults(2).use_entropy);
        assert!((report.mean - expect).abs() < 1e-12);
    }

    #[test]
    fn purity_report_hand_case() {
        // 2x2 "block": single kd split at 0, classes split the same way,
        // sharp map -> every region pure; soften lambda -> impurity rises.
        let spec = crate::forest::ForestSpec::single(
            2,
            2,
            crate::forest::TreeShape::kd(1),
        )
        .unwrap();
        let mut params = crate::forest::BlockParams::zeros(&spec);
        params.subsets[0].inner = vec![0.0];
        let model = ForestModel::new(spec, 1, 1, vec![params]).unwrap();
        let gt = mask_of(&[0, 1, 0, 1], 2);
        let sharp = purity_report(&model, &gt, RendererConfig::refined(1e4).unwrap()).unwrap();
        assert!(sharp.mean < 1e-6);
        let soft = purity_report(&model, &gt, RendererConfig::refined(0.1).unwrap()).unwrap();
        assert!(soft.mean > sharp.mean);
    }
}
