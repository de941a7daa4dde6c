//! The training objective: weighted cross-entropy plus the three
//! region-map-specific losses (region purity, minimum region size, boundary
//! sharpness), with class-subset weighting.
//!
//! Everything is generic over [`Scalar`] so the same formulas produce
//! differentiable losses during fitting and plain numbers for reports.

use crate::data::{ClassMask, IGNORE};
use crate::error::{Error, Result};
use crate::grad::{softmax, Scalar};
use crate::render::{PixelLogits, RegionMap};

/// Regions lighter than this are treated as empty (uniform class
/// distribution) when normalizing histograms.
pub const EMPTY_REGION_SIZE: f64 = 1e-8;

/// Loss weights and bookkeeping shared by all components.
#[derive(Clone, Debug)]
pub struct LossWeights {
    /// (mu1, mu2, mu3, mu4) for cross-entropy, purity, min-size, sharpness.
    pub mu: [f64; 4],
    /// Minimum desired region size in pixels.
    pub s_min: f64,
    /// Per-class cross-entropy weights.
    pub class_weights: Vec<f64>,
    /// An additional class treated like the 255 marker.
    pub ignore_index: Option<usize>,
    /// Use guarded entropy instead of Gini as the impurity (comparison
    /// switch; Gini is the default).
    pub use_entropy: bool,
}

impl LossWeights {
    pub fn new(
        mu: [f64; 4],
        s_min: f64,
        class_weights: Vec<f64>,
        ignore_index: Option<usize>,
    ) -> Result<LossWeights> {
        let sum: f64 = mu.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "loss weights must sum to 1, got {sum}"
            )));
        }
        if mu.iter().any(|m| *m < 0.0) {
            return Err(Error::contract("loss weights must be non-negative"));
        }
        if s_min < 0.0 {
            return Err(Error::contract("s_min must be >= 0"));
        }
        for (c, w) in class_weights.iter().enumerate() {
            if Some(c) != ignore_index && !(*w > 0.0) {
                return Err(Error::contract(format!(
                    "class weight {w} for class {c} must be > 0"
                )));
            }
        }
        Ok(LossWeights {
            mu,
            s_min,
            class_weights,
            ignore_index,
            use_entropy: false,
        })
    }

    /// The published defaults: mu = (0.947, 0.034, 0.0095, 0.0095) and
    /// s_min = 8, with unit class weights.
    pub fn defaults(class_count: usize) -> LossWeights {
        LossWeights::new(
            [0.947, 0.034, 0.0095, 0.0095],
            8.0,
            vec![1.0; class_count],
            None,
        )
        .expect("default weights are valid")
    }

    /// Cross-entropy only: mu = (1, 0, 0, 0).
    pub fn ce_only(class_count: usize) -> LossWeights {
        LossWeights::new([1.0, 0.0, 0.0, 0.0], 8.0, vec![1.0; class_count], None)
            .expect("ce-only weights are valid")
    }

    pub fn with_class_weights(mut self, class_weights: Vec<f64>) -> LossWeights {
        self.class_weights = class_weights;
        self
    }
}

/// Inverse-frequency class weights normalized to mean 1 over the classes
/// present in the mask; absent classes get weight 1.
pub fn inverse_frequency_weights(
    mask: &ClassMask,
    class_count: usize,
    ignore_index: Option<usize>,
) -> Vec<f64> {
    let mut freq = vec![0usize; class_count];
    for &v in mask.data() {
        if v == IGNORE {
            continue;
        }
        let c = v as usize;
        if Some(c) == ignore_index || c >= class_count {
            continue;
        }
        freq[c] += 1;
    }
    let mut weights = vec![1.0; class_count];
    let present: Vec<usize> = (0..class_count).filter(|c| freq[*c] > 0).collect();
    if present.is_empty() {
        return weights;
    }
    for &c in &present {
        weights[c] = 1.0 / freq[c] as f64;
    }
    let mean: f64 = present.iter().map(|&c| weights[c]).sum::<f64>() / present.len() as f64;
    for &c in &present {
        weights[c] /= mean;
    }
    weights
}

/// Per-pixel class targets of one block: a one-hot class vector per pixel,
/// stored as the hot index, or `None` for ignored pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockTarget {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pixels: Vec<Option<u16>>,
}

impl BlockTarget {
    pub fn new(width: usize, height: usize, classes: usize, pixels: Vec<Option<u16>>) -> Result<BlockTarget> {
        if pixels.len() != width * height {
            return Err(Error::contract(format!(
                "{} target pixels for a {width}x{height} block",
                pixels.len()
            )));
        }
        if let Some(c) = pixels.iter().flatten().find(|c| **c as usize >= classes) {
            return Err(Error::contract(format!(
                "target class {c} exceeds class count {classes}"
            )));
        }
        Ok(BlockTarget {
            width,
            height,
            classes,
            pixels,
        })
    }

    /// Cut block (bx, by) out of a mask; 255 and `ignore_index` become
    /// ignored pixels.
    pub fn from_mask_block(
        mask: &ClassMask,
        bx: usize,
        by: usize,
        block_size: usize,
        classes: usize,
        ignore_index: Option<usize>,
    ) -> Result<BlockTarget> {
        let x0 = bx * block_size;
        let y0 = by * block_size;
        if x0 + block_size > mask.width || y0 + block_size > mask.height {
            return Err(Error::contract(format!(
                "block ({bx},{by}) exceeds the {}x{} mask",
                mask.width, mask.height
            )));
        }
        let mut pixels = Vec::with_capacity(block_size * block_size);
        for y in 0..block_size {
            for x in 0..block_size {
                let v = mask.get(x0 + x, y0 + y);
                if v == IGNORE || Some(v as usize) == ignore_index {
                    pixels.push(None);
                } else if (v as usize) < classes {
                    pixels.push(Some(v as u16));
                } else {
                    return Err(Error::contract(format!(
                        "mask value {v} exceeds class count {classes}"
                    )));
                }
            }
        }
        BlockTarget::new(block_size, block_size, classes, pixels)
    }

    pub fn class_at(&self, y: usize, x: usize) -> Option<usize> {
        self.pixels[y * self.width + x].map(|c| c as usize)
    }

    pub fn non_ignored(&self) -> usize {
        self.pixels.iter().flatten().count()
    }
}

/// Reduced target for one class subset: classes in the subset keep their
/// position, everything else maps to one extra "other" dimension. Ignored
/// pixels stay ignored.
pub fn split_target_for_subset(target: &BlockTarget, subset_classes: &[usize]) -> BlockTarget {
    let other = subset_classes.len() as u16;
    let pixels = (0..target.height)
        .flat_map(|y| (0..target.width).map(move |x| (y, x)))
        .map(|(y, x)| {
            target.class_at(y, x).map(|c| {
                subset_classes
                    .iter()
                    .position(|&s| s == c)
                    .map(|pos| pos as u16)
                    .unwrap_or(other)
            })
        })
        .collect();
    BlockTarget {
        width: target.width,
        height: target.height,
        classes: subset_classes.len() + 1,
        pixels,
    }
}

/// Region-weighted class histograms of one block: the paper's `Y`, `s` and
/// `P` per region.
pub struct RegionHistogram<N> {
    /// `counts[i][c]`: soft pixel count of class `c` in region `i`.
    pub counts: Vec<Vec<N>>,
    /// Region sizes `s_i` in (soft) pixels.
    pub sizes: Vec<N>,
    /// Class distributions `P_i`; uniform for empty regions.
    pub probs: Vec<Vec<N>>,
    /// Regions that fell below [`EMPTY_REGION_SIZE`] and were normalized
    /// uniformly.
    pub empty: Vec<bool>,
}

/// Accumulate the per-region class histogram `Y_i[c] = sum_p Y_p[c] R_i(p)`.
pub fn region_class_histogram<N: Scalar>(
    region_map: &RegionMap<N>,
    target: &BlockTarget,
    ctx: N::Ctx,
) -> Result<RegionHistogram<N>> {
    if region_map.width != target.width || region_map.height != target.height {
        return Err(Error::contract(format!(
            "region map is {}x{}, target {}x{}",
            region_map.width, region_map.height, target.width, target.height
        )));
    }
    let k = region_map.regions;
    let classes = target.classes;
    let zero = N::lift(ctx, 0.0);
    let mut counts = vec![vec![zero; classes]; k];
    for y in 0..target.height {
        for x in 0..target.width {
            let Some(c) = target.class_at(y, x) else {
                continue;
            };
            let dist = region_map.pixel(y, x);
            for (i, &r) in dist.iter().enumerate() {
                counts[i][c] = counts[i][c] + r;
            }
        }
    }
    let sizes: Vec<N> = counts
        .iter()
        .map(|row| {
            let mut s = zero;
            for &v in row {
                s = s + v;
            }
            s
        })
        .collect();
    let mut probs = Vec::with_capacity(k);
    let mut empty = Vec::with_capacity(k);
    for (row, &s) in counts.iter().zip(&sizes) {
        if s.value() < EMPTY_REGION_SIZE {
            probs.push(vec![N::lift(ctx, 1.0 / classes as f64); classes]);
            empty.push(true);
        } else {
            probs.push(row.iter().map(|&v| v / s).collect());
            empty.push(false);
        }
    }
    Ok(RegionHistogram {
        counts,
        sizes,
        probs,
        empty,
    })
}

/// Gini impurity `1 - sum_c p_c^2`; zero exactly at one-hot distributions.
pub fn gini<N: Scalar>(p: &[N], ctx: N::Ctx) -> N {
    let mut acc = N::lift(ctx, 1.0);
    for &v in p {
        acc = acc - v.square();
    }
    acc
}

/// Guarded entropy `-sum_c p_c ln p_c`; the slower impurity variant kept
/// for comparison.
pub fn entropy<N: Scalar>(p: &[N], ctx: N::Ctx) -> N {
    let mut acc = N::lift(ctx, 0.0);
    for &v in p {
        acc = acc - v * v.log_guarded();
    }
    acc
}

fn impurity<N: Scalar>(p: &[N], ctx: N::Ctx, use_entropy: bool) -> N {
    if use_entropy {
        entropy(p, ctx)
    } else {
        gini(p, ctx)
    }
}

/// Mean impurity over all regions of all histograms (the paper's `L_Y`).
pub fn loss_purity<N: Scalar>(
    histograms: &[RegionHistogram<N>],
    ctx: N::Ctx,
    use_entropy: bool,
) -> N {
    let mut acc = N::lift(ctx, 0.0);
    let mut n = 0usize;
    for hist in histograms {
        for p in &hist.probs {
            acc = acc + impurity(p, ctx, use_entropy);
            n += 1;
        }
    }
    debug_assert!(n > 0);
    acc / N::lift(ctx, n as f64)
}

/// Mean shortfall below the minimum region size (the paper's `L_s`).
pub fn loss_min_region_size<N: Scalar>(
    histograms: &[RegionHistogram<N>],
    s_min: f64,
    ctx: N::Ctx,
) -> N {
    let smin = N::lift(ctx, s_min);
    let mut acc = N::lift(ctx, 0.0);
    let mut n = 0usize;
    for hist in histograms {
        for &s in &hist.sizes {
            acc = acc + (smin - s).relu();
            n += 1;
        }
    }
    debug_assert!(n > 0);
    acc / N::lift(ctx, n as f64)
}

/// Mean impurity of the per-pixel region distributions (the paper's `L_R`).
/// Every pixel counts, including ignored ones: sharpness is geometry, not
/// labels.
pub fn loss_sharpness<N: Scalar>(
    region_maps: &[&RegionMap<N>],
    ctx: N::Ctx,
    use_entropy: bool,
) -> N {
    let mut acc = N::lift(ctx, 0.0);
    let mut n = 0usize;
    for rm in region_maps {
        for y in 0..rm.height {
            for x in 0..rm.width {
                acc = acc + impurity(rm.pixel(y, x), ctx, use_entropy);
                n += 1;
            }
        }
    }
    debug_assert!(n > 0);
    acc / N::lift(ctx, n as f64)
}

/// Class-weighted mean cross-entropy over the non-ignored pixels, with the
/// log guarded at 1e-12. Returns zero when every pixel is ignored.
pub fn loss_cross_entropy<N: Scalar>(
    logits: &PixelLogits<N>,
    target: &BlockTarget,
    class_weights: &[f64],
    ctx: N::Ctx,
) -> Result<N> {
    if logits.width != target.width || logits.height != target.height {
        return Err(Error::contract(format!(
            "logits are {}x{}, target {}x{}",
            logits.width, logits.height, target.width, target.height
        )));
    }
    if logits.classes != target.classes {
        return Err(Error::contract(format!(
            "{} logit classes vs {} target classes",
            logits.classes, target.classes
        )));
    }
    if class_weights.len() != target.classes {
        return Err(Error::contract(format!(
            "{} class weights for {} classes",
            class_weights.len(),
            target.classes
        )));
    }
    let mut acc = N::lift(ctx, 0.0);
    let mut weight_total = 0.0;
    for y in 0..target.height {
        for x in 0..target.width {
            let Some(c) = target.class_at(y, x) else {
                continue;
            };
            let probs = softmax(logits.pixel(y, x), ctx);
            let w = class_weights[c];
            acc = acc + N::lift(ctx, w) * -probs[c].log_guarded();
            weight_total += w;
        }
    }
    if weight_total == 0.0 {
        return Ok(N::lift(ctx, 0.0));
    }
    Ok(acc / N::lift(ctx, weight_total))
}

/// All loss components of one evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown<N> {
    pub total: N,
    pub cross_entropy: N,
    pub purity: N,
    pub min_size: N,
    pub sharpness: N,
}

impl LossBreakdown<crate::grad::Var<'_>> {
    pub fn values(&self) -> LossBreakdown<f64> {
        LossBreakdown {
            total: self.total.value(),
            cross_entropy: self.cross_entropy.value(),
            purity: self.purity.value(),
            min_size: self.min_size.value(),
            sharpness: self.sharpness.value(),
        }
    }
}

/// The full objective of one block:
/// `mu1 L_CE + mu2 L_Y + mu3 L_s + mu4 L_R`, where the three region losses
/// are per-subset values combined with weights `|C_j| / |C|`.
///
/// `subset_maps` and `subset_classes` describe each subset's rendered tree;
/// `full_logits` are the concatenated per-pixel class logits; `target`
/// holds the original class indices.
pub fn loss_total<N: Scalar>(
    subset_maps: &[RegionMap<N>],
    subset_classes: &[&[usize]],
    full_logits: &PixelLogits<N>,
    target: &BlockTarget,
    weights: &LossWeights,
    ctx: N::Ctx,
) -> Result<LossBreakdown<N>> {
    let mu_sum: f64 = weights.mu.iter().sum();
    if (mu_sum - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "loss weights must sum to 1, got {mu_sum}"
        )));
    }
    if subset_maps.len() != subset_classes.len() {
        return Err(Error::contract(
            "one region map per class subset is required",
        ));
    }
    let class_count: usize = subset_classes.iter().map(|c| c.len()).sum();
    if class_count != target.classes {
        return Err(Error::contract(format!(
            "subsets cover {class_count} classes, target has {}",
            target.classes
        )));
    }

    let ce = loss_cross_entropy(full_logits, target, &weights.class_weights, ctx)?;

    // Per-subset region losses, weighted by |C_j| and divided once by |C|
    // so the weights sum to one exactly.
    let zero = N::lift(ctx, 0.0);
    let (mut purity, mut min_size, mut sharpness) = (zero, zero, zero);
    for (rm, classes) in subset_maps.iter().zip(subset_classes) {
        let split = split_target_for_subset(target, classes);
        let hists = [region_class_histogram(rm, &split, ctx)?];
        let w = N::lift(ctx, classes.len() as f64);
        purity = purity + w * loss_purity(&hists, ctx, weights.use_entropy);
        min_size = min_size + w * loss_min_region_size(&hists, weights.s_min, ctx);
        sharpness = sharpness + w * loss_sharpness(&[rm], ctx, weights.use_entropy);
    }
    let total_classes = N::lift(ctx, class_count as f64);
    purity = purity / total_classes;
    min_size = min_size / total_classes;
    sharpness = sharpness / total_classes;

    let total = N::lift(ctx, weights.mu[0]) * ce
        + N::lift(ctx, weights.mu[1]) * purity
        + N::lift(ctx, weights.mu[2]) * min_size
        + N::lift(ctx, weights.mu[3]) * sharpness;
    Ok(LossBreakdown {
        total,
        cross_entropy: ce,
        purity,
        min_size,
        sharpness,
    })
}

/// Write a per-step loss trace as CSV.
pub fn write_loss_csv<W: std::io::Write>(
    out: &mut W,
    rows: &[(usize, LossBreakdown<f64>)],
) -> std::io::Result<()> {
    writeln!(out, "step,L_total,L_CE,L_Y,L_s,L_R")?;
    for (step, b) in rows {
        writeln!(
            out,
            "{step},{},{},{},{},{}",
            b.total, b.cross_entropy, b.purity, b.min_size, b.sharpness
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::TreeShape;
    use crate::render::{render_region_map, Raster, RendererConfig};
    use crate::sdf::SdfKind;

    fn uniform_map(k: usize, side: usize) -> RegionMap<f64> {
        // depth-0 can't give k regions; build via a quad tree with tiny lambda
        assert_eq!(k, 4);
        render_region_map::<f64>(
            &TreeShape::quad(1),
            &[0.0, 0.0],
            (),
            Raster::square(side).unwrap(),
            RendererConfig::refined(1e-12).unwrap(),
        )
        .unwrap()
    }

    fn sharp_kd_map(side: usize) -> RegionMap<f64> {
        render_region_map::<f64>(
            &TreeShape::kd(1),
            &[0.0],
            (),
            Raster::square(side).unwrap(),
            RendererConfig::refined(1e4).unwrap(),
        )
        .unwrap()
    }

    fn constant_target(side: usize, classes: usize, class: u16) -> BlockTarget {
        BlockTarget::new(side, side, classes, vec![Some(class); side * side]).unwrap()
    }

    #[test]
    fn gini_values() {
        assert_eq!(gini(&[1.0, 0.0, 0.0], ()), 0.0);
        assert!((gini(&[0.25; 4], ()) - 0.75).abs() < 1e-15);
        assert!((gini(&[0.5, 0.5, 0.0, 0.0], ()) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn entropy_shares_extremes_with_gini() {
        assert!(entropy(&[1.0, 0.0], ()).abs() < 1e-10);
        let uniform = entropy(&[0.25; 4], ());
        let skewed = entropy(&[0.7, 0.1, 0.1, 0.1], ());
        assert!(uniform > skewed);
    }

    #[test]
    fn histogram_single_class_block() {
        // one-hot region map (sharp kd split), single-class 8x8 block
        let rm = sharp_kd_map(8);
        let target = constant_target(8, 3, 0);
        let hist = region_class_histogram(&rm, &target, ()).unwrap();
        let total: f64 = hist.sizes.iter().sum();
        assert!((total - 64.0).abs() < 1e-6);
        // each half holds 32 pixels
        assert!((hist.sizes[0] - 32.0).abs() < 1e-6);
        assert!((hist.sizes[1] - 32.0).abs() < 1e-6);
        for p in &hist.probs {
            assert!((p[0] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn histogram_uniform_map_splits_evenly() {
        let rm = uniform_map(4, 8);
        let target = constant_target(8, 2, 1);
        let hist = region_class_histogram(&rm, &target, ()).unwrap();
        for s in &hist.sizes {
            assert!((s - 16.0).abs() < 1e-6);
        }
    }

    #[test]
    fn histogram_matching_split() {
        // 2x2 block, two classes split left/right, sharp matching region map
        let rm = sharp_kd_map(2);
        let target = BlockTarget::new(
            2,
            2,
            2,
            vec![Some(0), Some(1), Some(0), Some(1)],
        )
        .unwrap();
        let hist = region_class_histogram(&rm, &target, ()).unwrap();
        for (i, p) in hist.probs.iter().enumerate() {
            assert!((p[i] - 1.0).abs() < 1e-9, "region {i}: {p:?}");
            assert!((hist.sizes[i] - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_region_is_flagged_uniform() {
        // all pixels ignored: every region is empty
        let rm = sharp_kd_map(2);
        let target = BlockTarget::new(2, 2, 3, vec![None; 4]).unwrap();
        let hist = region_class_histogram(&rm, &target, ()).unwrap();
        assert!(hist.empty.iter().all(|e| *e));
        for p in &hist.probs {
            for v in p {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn purity_loss_extremes() {
        let rm = sharp_kd_map(8);
        let pure = region_class_histogram(&rm, &constant_target(8, 2, 0), ()).unwrap();
        assert!(loss_purity(&[pure], (), false) < 1e-9);

        // each region uniform over 2 classes: alternate columns inside each half
        let mut pixels = Vec::new();
        for y in 0..8 {
            let _ = y;
            for x in 0..8 {
                pixels.push(Some((x % 2) as u16));
            }
        }
        let mixed_target = BlockTarget::new(8, 8, 2, pixels).unwrap();
        let mixed = region_class_histogram(&rm, &mixed_target, ()).unwrap();
        assert!((loss_purity(&[mixed], (), false) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn purity_loss_mean_of_mixed_regions() {
        // two regions with Gini 0 and 0.5 average to 0.25
        let rm = sharp_kd_map(8);
        let mut pixels = vec![Some(0u16); 64];
        // right half alternates rows between classes 0 and 1
        for y in 0..8 {
            for x in 4..8 {
                pixels[y * 8 + x] = Some((y % 2) as u16);
            }
        }
        let target = BlockTarget::new(8, 8, 2, pixels).unwrap();
        let hist = region_class_histogram(&rm, &target, ()).unwrap();
        assert!((loss_purity(&[hist], (), false) - 0.25).abs() < 1e-6);
    }

    #[test]
    fn min_region_size_loss() {
        let rm = sharp_kd_map(8); // sizes 32, 32
        let hist = region_class_histogram(&rm, &constant_target(8, 2, 0), ()).unwrap();
        assert_eq!(loss_min_region_size(&[hist], 8.0, ()), 0.0);

        // hand sizes (0,0,0,64): mean shortfall (8+8+8+0)/4 = 6
        let hist = RegionHistogram {
            counts: vec![vec![0.0]; 4],
            sizes: vec![0.0, 0.0, 0.0, 64.0],
            probs: vec![vec![1.0]; 4],
            empty: vec![true, true, true, false],
        };
        assert!((loss_min_region_size(&[hist], 8.0, ()) - 6.0).abs() < 1e-12);

        let hist = RegionHistogram {
            counts: vec![vec![0.0]; 4],
            sizes: vec![0.0, 0.0, 0.0, 64.0],
            probs: vec![vec![1.0]; 4],
            empty: vec![true, true, true, false],
        };
        assert_eq!(loss_min_region_size(&[hist], 0.0, ()), 0.0);
    }

    #[test]
    fn sharpness_loss_extremes() {
        let sharp = sharp_kd_map(8);
        assert!(loss_sharpness(&[&sharp], (), false) < 1e-6);
        let uniform = uniform_map(4, 8);
        assert!((loss_sharpness(&[&uniform], (), false) - 0.75).abs() < 1e-9);
        // half sharp (k=4 needs care): mix one sharp and one uniform map of
        // equal pixel counts; mean of ~0 and 0.75
        let sharp4 = render_region_map::<f64>(
            &TreeShape::quad(1),
            &[0.0, 0.0],
            (),
            Raster::square(8).unwrap(),
            RendererConfig::refined(1e4).unwrap(),
        )
        .unwrap();
        let both = loss_sharpness(&[&sharp4, &uniform], (), false);
        assert!((both - 0.375).abs() < 1e-3, "got {both}");
    }

    #[test]
    fn cross_entropy_strong_correct_logits() {
        let spec = crate::forest::ForestSpec::default_bsp(4);
        let mut params = crate::forest::BlockParams::zeros(&spec);
        // leaf logits: class 2 dominates with margin >= 20 everywhere
        for leaf in 0..4 {
            params.subsets[0].leaf_logits[leaf * 4 + 2] = 25.0;
        }
        let logits = crate::render::render_block_logits::<f64>(
            &spec,
            &params,
            (),
            Raster::square(8).unwrap(),
            RendererConfig::default(),
        )
        .unwrap();
        let target = constant_target(8, 4, 2);
        let ce = loss_cross_entropy(&logits, &target, &[1.0; 4], ()).unwrap();
        assert!(ce < 1e-8, "ce = {ce}");
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_classes() {
        let spec = crate::forest::ForestSpec::default_bsp(4);
        let params = crate::forest::BlockParams::zeros(&spec);
        let logits = crate::render::render_block_logits::<f64>(
            &spec,
            &params,
            (),
            Raster::square(8).unwrap(),
            RendererConfig::default(),
        )
        .unwrap();
        let target = constant_target(8, 4, 1);
        let ce = loss_cross_entropy(&logits, &target, &[1.0; 4], ()).unwrap();
        assert!((ce - 4.0f64.ln()).abs() < 1e-9, "ce = {ce}");
    }

    #[test]
    fn cross_entropy_ignores_masked_pixels() {
        // 2-pixel case recomputed by hand: mask one pixel and the mean
        // becomes the other pixel's value.
        let spec = crate::forest::ForestSpec::single(
            8,
            2,
            TreeShape::bsp(SdfKind::KdAxis(crate::sdf::Axis::X), 1),
        )
        .unwrap();
        let mut params = crate::forest::BlockParams::zeros(&spec);
        params.subsets[0].inner = vec![0.0];
        params.subsets[0].leaf_logits = vec![2.0, -1.0, -0.5, 1.5];
        let logits = crate::render::render_block_logits::<f64>(
            &spec,
            &params,
            (),
            Raster::new(2, 1).unwrap(),
            RendererConfig::default(),
        )
        .unwrap();
        let both = BlockTarget::new(2, 1, 2, vec![Some(0), Some(1)]).unwrap();
        let only_left = BlockTarget::new(2, 1, 2, vec![Some(0), None]).unwrap();
        let only_right = BlockTarget::new(2, 1, 2, vec![None, Some(1)]).unwrap();
        let w = [1.0, 1.0];
        let ce_both = loss_cross_entropy(&logits, &both, &w, ()).unwrap();
        let ce_l = loss_cross_entropy(&logits, &only_left, &w, ()).unwrap();
        let ce_r = loss_cross_entropy(&logits, &only_right, &w, ()).unwrap();
        assert!((ce_both - 0.5 * (ce_l + ce_r)).abs() < 1e-12);
        // all ignored -> defined as zero
        let none = BlockTarget::new(2, 1, 2, vec![None, None]).unwrap();
        assert_eq!(loss_cross_entropy(&logits, &none, &w, ()).unwrap(), 0.0);
    }

    #[test]
    fn split_target_maps_subset_and_other() {
        let target = BlockTarget::new(
            2,
            2,
            5,
            vec![Some(0), Some(3), Some(4), None],
        )
        .unwrap();
        let split = split_target_for_subset(&target, &[3, 4]);
        assert_eq!(split.classes, 3);
        assert_eq!(split.class_at(0, 0), Some(2)); // class 0 -> other
        assert_eq!(split.class_at(0, 1), Some(0)); // class 3 -> position 0
        assert_eq!(split.class_at(1, 0), Some(1)); // class 4 -> position 1
        assert_eq!(split.class_at(1, 1), None); // ignored stays ignored
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(LossWeights::new([0.5, 0.5, 0.5, 0.0], 8.0, vec![1.0], None).is_err());
        assert!(LossWeights::new([0.947, 0.034, 0.0095, 0.0095], 8.0, vec![1.0], None).is_ok());
    }

    #[test]
    fn subset_weights_sum_exactly_to_one() {
        // integer form of the invariant: sum |C_j| = |C|
        let spec = crate::forest::ForestSpec::per_class(
            8,
            3,
            TreeShape::bsp(SdfKind::Line, 1),
        )
        .unwrap();
        let total: usize = spec.subsets.iter().map(|s| s.classes.len()).sum();
        assert_eq!(total, spec.class_count);
    }

    #[test]
    fn inverse_frequency_weighting() {
        let mut mask = ClassMask::filled(4, 4, 0).unwrap();
        // 12 pixels class 0, 4 pixels class 1
        for x in 0..4 {
            mask.set(x, 3, 1);
        }
        let w = inverse_frequency_weights(&mask, 3, None);
        assert!(w[1] > w[0]); // rarer class is heavier
        let mean = (w[0] + w[1]) / 2.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert_eq!(w[2], 1.0); // absent class defaults to 1
    }

    #[test]
    fn total_with_ce_only_weights_equals_cross_entropy() {
        let spec = crate::forest::ForestSpec::default_bsp(3);
        let mut params = crate::forest::BlockParams::zeros(&spec);
        params.subsets[0].inner = vec![0.4, 0.3, 0.0, -0.2, 0.7, 0.1, 0.5, -0.6, 0.2];
        for (i, v) in params.subsets[0].leaf_logits.iter_mut().enumerate() {
            *v = 0.3 * i as f64 - 1.0;
        }
        let raster = Raster::square(8).unwrap();
        let config = RendererConfig::default();
        let rm = render_region_map::<f64>(
            &spec.subsets[0].tree,
            &params.subsets[0].inner,
            (),
            raster,
            config,
        )
        .unwrap();
        let logits = crate::render::render_block_logits::<f64>(&spec, &params, (), raster, config)
            .unwrap();
        let mut pixels = Vec::new();
        for i in 0..64 {
            pixels.push(Some((i % 3) as u16));
        }
        let target = BlockTarget::new(8, 8, 3, pixels).unwrap();
        let weights = LossWeights::ce_only(3);
        let classes: Vec<usize> = (0..3).collect();
        let breakdown = loss_total(
            &[rm],
            &[&classes],
            &logits,
            &target,
            &weights,
            (),
        )
        .unwrap();
        let ce = loss_cross_entropy(&logits, &target, &weights.class_weights, ()).unwrap();
        assert_eq!(breakdown.total, ce);
    }

    #[test]
    fn ideal_configuration_has_negligible_loss() {
        // single class, sharp one-hot map, sizes above s_min, strong logits
        let spec = crate::forest::ForestSpec::single(
            8,
            2,
            TreeShape::bsp(SdfKind::KdAxis(crate::sdf::Axis::X), 1),
        )
        .unwrap();
        let mut params = crate::forest::BlockParams::zeros(&spec);
        params.subsets[0].inner = vec![0.0];
        params.subsets[0].leaf_logits = vec![40.0, 0.0, 40.0, 0.0];
        let raster = Raster::square(8).unwrap();
        // large lambda -> essentially one-hot region map
        let config = RendererConfig::refined(1000.0).unwrap();
        let rm = render_region_map::<f64>(
            &spec.subsets[0].tree,
            &params.subsets[0].inner,
            (),
            raster,
            config,
        )
        .unwrap();
        let logits =
            crate::render::render_block_logits::<f64>(&spec, &params, (), raster, config).unwrap();
        let target = constant_target(8, 2, 0);
        let weights = LossWeights::defaults(2);
        let classes: Vec<usize> = vec![0, 1];
        let b = loss_total(&[rm], &[&classes], &logits, &target, &weights, ()).unwrap();
        assert!(b.total < 1e-6, "total = {}", b.total);
    }

    #[test]
    fn two_singleton_subsets_average_their_purities() {
        // both subsets see the same geometry; L_Y must equal the mean of the
        // per-subset purities (weights 1/2 each).
        let tree = TreeShape::bsp(SdfKind::KdAxis(crate::sdf::Axis::X), 1);
        let spec = crate::forest::ForestSpec::per_class(2, 2, tree.clone()).unwrap();
        let raster = Raster::square(2).unwrap();
        let config = RendererConfig::default();
        let rm0 =
            render_region_map::<f64>(&tree, &[0.1], (), raster, config).unwrap();
        let rm1 =
            render_region_map::<f64>(&tree, &[-0.2], (), raster, config).unwrap();
        let target = BlockTarget::new(2, 2, 2, vec![Some(0), Some(1), Some(1), Some(0)]).unwrap();
        let weights = LossWeights::defaults(2);

        let mut params = crate::forest::BlockParams::zeros(&spec);
        params.subsets[0].inner = vec![0.1];
        params.subsets[1].inner = vec![-0.2];
        let logits =
            crate::render::render_block_logits::<f64>(&spec, &params, (), raster, config).unwrap();
        let c0 = vec![0usize];
        let c1 = vec![1usize];
        let b = loss_total(
            &[rm0, rm1],
            &[&c0, &c1],
            &logits,
            &target,
            &weights,
            (),
        )
        .unwrap();

        let rm0 = render_region_map::<f64>(&tree, &[0.1], (), raster, config).unwrap();
        let rm1 = render_region_map::<f64>(&tree, &[-0.2], (), raster, config).unwrap();
        let h0 =
            region_class_histogram(&rm0, &split_target_for_subset(&target, &[0]), ()).unwrap();
        let h1 =
            region_class_histogram(&rm1, &split_target_for_subset(&target, &[1]), ()).unwrap();
        let mean = 0.5 * (loss_purity(&[h0], (), false) + loss_purity(&[h1], (), false));
        assert!((b.purity - mean).abs() < 1e-12);
    }

    #[test]
    fn loss_csv_format() {
        let mut out = Vec::new();
        write_loss_csv(
            &mut out,
            &[(
                0,
                LossBreakdown {
                    total: 1.5,
                    cross_entropy: 1.0,
                    purity: 0.25,
                    min_size: 0.125,
                    sharpness: 0.125,
                },
            )],
        )
        .unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("step,L_total,L_CE,L_Y,L_s,L_R\n"));
        assert!(text.contains("0,1.5,1,0.25,0.125,0.125"));
    }
}
