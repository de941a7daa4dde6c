//! Differentiable region-map rendering.
//!
//! Every pixel of a block gets a probability distribution over the tree's
//! leaf regions (the region map). Inner nodes deposit evidence into the
//! leaves below each of their child slots; a final softmax across the
//! region dimension normalizes. Class logits attached to the leaves are then
//! blended through the map into per-pixel class logits.
//!
//! The whole pipeline is written against [`Scalar`], so the same code runs
//! on the tape for fitting and on plain `f64` for decoding; forward values
//! agree bit for bit between the two.

use crate::error::{Error, Result};
use crate::forest::{BlockParams, ForestModel, TreeNode, TreeShape};
use crate::grad::{softmax, Scalar};
use crate::sdf::{eval_sdf, Point};

/// Sampling grid over one block. The grid covers the block's [-1, 1]^2
/// domain at pixel centers; the output resolution is whatever density the
/// block is sampled at, independent of the block's size in mask pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Result<Raster> {
        if width == 0 || height == 0 {
            return Err(Error::contract("raster dimensions must be >= 1"));
        }
        Ok(Raster { width, height })
    }

    pub fn square(side: usize) -> Result<Raster> {
        Raster::new(side, side)
    }

    pub fn pixels(self) -> usize {
        self.width * self.height
    }
}

/// Region-map accumulation mode.
///
/// `Refined` is the additive ReLU scheme (starts from zero evidence);
/// `Legacy` is the original multiplicative sigmoid scheme (starts from one).
/// Quad nodes only have an additive published form; under `Legacy` their
/// products are added onto the multiplicative accumulator with `lambda2` as
/// the scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RendererConfig {
    Refined { lambda: f64 },
    Legacy { lambda1: f64, lambda2: f64 },
}

impl RendererConfig {
    pub fn refined(lambda: f64) -> Result<RendererConfig> {
        if !(lambda > 0.0) {
            return Err(Error::contract(format!("lambda must be > 0, got {lambda}")));
        }
        Ok(RendererConfig::Refined { lambda })
    }

    pub fn legacy(lambda1: f64, lambda2: f64) -> Result<RendererConfig> {
        if !(lambda1 > 0.0) || !(lambda2 > 0.0) {
            return Err(Error::contract(format!(
                "lambda1 and lambda2 must be > 0, got {lambda1}, {lambda2}"
            )));
        }
        Ok(RendererConfig::Legacy { lambda1, lambda2 })
    }
}

impl Default for RendererConfig {
    /// The refined mode with lambda = 1.
    fn default() -> Self {
        RendererConfig::Refined { lambda: 1.0 }
    }
}

/// Per-pixel probabilities over a tree's leaf regions, after softmax.
///
/// Stored pixel-major: the distribution of pixel (x, y) is the contiguous
/// slice `pixel(y, x)`.
pub struct RegionMap<N> {
    pub regions: usize,
    pub width: usize,
    pub height: usize,
    probs: Vec<N>,
}

impl<N: Scalar> RegionMap<N> {
    /// Probability that pixel (x, y) belongs to region `i`.
    pub fn prob(&self, region: usize, y: usize, x: usize) -> N {
        self.probs[(y * self.width + x) * self.regions + region]
    }

    /// The full distribution at pixel (x, y).
    pub fn pixel(&self, y: usize, x: usize) -> &[N] {
        let base = (y * self.width + x) * self.regions;
        &self.probs[base..base + self.regions]
    }
}

/// Pre-softmax region scores of a single point.
///
/// This is the paper's update loop: refined mode adds `ReLU(+-lambda f)` to
/// the leaves below the matching child slot; legacy mode multiplies the
/// leaves by `lambda2 sigma(lambda1 f)` resp. `lambda2 (1 - sigma)`. Quad
/// nodes add the four `lambda t t` quadrant products.
fn region_scores_at<N: Scalar>(
    shape: &TreeShape,
    inner_params: &[N],
    ctx: N::Ctx,
    config: RendererConfig,
    p: Point,
) -> Result<Vec<N>> {
    let init = match config {
        RendererConfig::Refined { .. } => 0.0,
        RendererConfig::Legacy { .. } => 1.0,
    };
    let mut scores = vec![N::lift(ctx, init); shape.leaf_count()];
    for &inner in shape.inner_nodes() {
        let inner = inner as usize;
        let params = &inner_params[shape.param_range(inner)];
        match shape.nodes()[inner] {
            TreeNode::Leaf => unreachable!(),
            TreeNode::Bsp(kind) => {
                let f = eval_sdf(kind, params, ctx, p)?;
                let left = shape.leaves_under(inner, 0)?;
                let right = shape.leaves_under(inner, 1)?;
                match config {
                    RendererConfig::Refined { lambda } => {
                        let g = N::lift(ctx, lambda) * f;
                        let pos = g.relu();
                        let neg = (-g).relu();
                        for i in left {
                            scores[i] = scores[i] + pos;
                        }
                        for i in right {
                            scores[i] = scores[i] + neg;
                        }
                    }
                    RendererConfig::Legacy { lambda1, lambda2 } => {
                        let g = (N::lift(ctx, lambda1) * f).sigmoid();
                        let l2 = N::lift(ctx, lambda2);
                        let up_left = l2 * g;
                        let up_right = l2 * (N::lift(ctx, 1.0) - g);
                        for i in left {
                            scores[i] = scores[i] * up_left;
                        }
                        for i in right {
                            scores[i] = scores[i] * up_right;
                        }
                    }
                }
            }
            TreeNode::Quad => {
                let t1 = params[0] - N::lift(ctx, p.p1);
                let t2 = params[1] - N::lift(ctx, p.p2);
                let t3 = t1.relu();
                let t4 = (-t1).relu();
                let t5 = t2.relu();
                let t6 = (-t2).relu();
                let lambda = match config {
                    RendererConfig::Refined { lambda } => lambda,
                    RendererConfig::Legacy { lambda2, .. } => lambda2,
                };
                let l = N::lift(ctx, lambda);
                // Child slots in the order of the four update equations:
                // slot 0 <- t4 t5, slot 1 <- t3 t5, slot 2 <- t4 t6,
                // slot 3 <- t3 t6. Geometrically slot 0 is the quadrant with
                // p1 > x1, p2 < x2, slot 1 mirrors it in p1, and so on.
                let products = [l * (t4 * t5), l * (t3 * t5), l * (t4 * t6), l * (t3 * t6)];
                for (slot, product) in products.into_iter().enumerate() {
                    for i in shape.leaves_under(inner, slot)? {
                        scores[i] = scores[i] + product;
                    }
                }
            }
        }
    }
    Ok(scores)
}

/// Region probabilities of one tree at a single point.
pub fn region_probs_at<N: Scalar>(
    shape: &TreeShape,
    inner_params: &[N],
    ctx: N::Ctx,
    config: RendererConfig,
    p: Point,
) -> Result<Vec<N>> {
    let scores = region_scores_at(shape, inner_params, ctx, config, p)?;
    Ok(softmax(&scores, ctx))
}

/// Render the region map of one tree over a raster.
pub fn render_region_map<N: Scalar>(
    shape: &TreeShape,
    inner_params: &[N],
    ctx: N::Ctx,
    raster: Raster,
    config: RendererConfig,
) -> Result<RegionMap<N>> {
    if inner_params.len() != shape.inner_param_count() {
        return Err(Error::contract(format!(
            "{} inner parameters for a tree expecting {}",
            inner_params.len(),
            shape.inner_param_count()
        )));
    }
    let k = shape.leaf_count();
    let mut probs = Vec::with_capacity(k * raster.pixels());
    for y in 0..raster.height {
        for x in 0..raster.width {
            let p = Point::pixel_center(x, y, raster.width, raster.height);
            probs.extend(region_probs_at(shape, inner_params, ctx, config, p)?);
        }
    }
    Ok(RegionMap {
        regions: k,
        width: raster.width,
        height: raster.height,
        probs,
    })
}

/// Per-pixel class logits, pixel-major like [`RegionMap`].
pub struct PixelLogits<N> {
    pub classes: usize,
    pub width: usize,
    pub height: usize,
    data: Vec<N>,
}

impl<N: Scalar> PixelLogits<N> {
    pub fn pixel(&self, y: usize, x: usize) -> &[N] {
        let base = (y * self.width + x) * self.classes;
        &self.data[base..base + self.classes]
    }

    fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [N] {
        let base = (y * self.width + x) * self.classes;
        &mut self.data[base..base + self.classes]
    }
}

/// Blend leaf logits through a region map: `h[c] = sum_i R_i v_i[c]`.
///
/// `leaf_logits` is row-major `regions x classes`.
pub fn render_logits<N: Scalar>(
    region_map: &RegionMap<N>,
    leaf_logits: &[N],
    classes: usize,
    ctx: N::Ctx,
) -> Result<PixelLogits<N>> {
    if leaf_logits.len() != region_map.regions * classes {
        return Err(Error::contract(format!(
            "{} leaf logits for {} regions x {} classes",
            leaf_logits.len(),
            region_map.regions,
            classes
        )));
    }
    let mut data = Vec::with_capacity(region_map.width * region_map.height * classes);
    for y in 0..region_map.height {
        for x in 0..region_map.width {
            let dist = region_map.pixel(y, x);
            for c in 0..classes {
                let mut acc = N::lift(ctx, 0.0);
                for (i, &r) in dist.iter().enumerate() {
                    acc = acc + r * leaf_logits[i * classes + c];
                }
                data.push(acc);
            }
        }
    }
    Ok(PixelLogits {
        classes,
        width: region_map.width,
        height: region_map.height,
        data,
    })
}

/// Argmax with ties broken toward the lowest class index; NaN never wins.
pub fn argmax_class(logits: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    for (c, &v) in logits.iter().enumerate() {
        if v > best_val {
            best_val = v;
            best = c;
        }
    }
    best
}

/// Render per-pixel logits of one block over all classes by concatenating
/// the subset trees' logits at their class positions.
pub fn render_block_logits<N: Scalar>(
    model_spec: &crate::forest::ForestSpec,
    params: &BlockParams,
    ctx: N::Ctx,
    raster: Raster,
    config: RendererConfig,
) -> Result<PixelLogits<N>> {
    params.validate(model_spec)?;
    let mut subset_logits = Vec::with_capacity(model_spec.subsets.len());
    for (subset, sp) in model_spec.subsets.iter().zip(&params.subsets) {
        let vars: Vec<N> = sp.inner.iter().map(|&v| N::lift(ctx, v)).collect();
        let logits: Vec<N> = sp.leaf_logits.iter().map(|&v| N::lift(ctx, v)).collect();
        let rm = render_region_map(&subset.tree, &vars, ctx, raster, config)?;
        subset_logits.push(render_logits(&rm, &logits, subset.classes.len(), ctx)?);
    }
    assemble_full_logits(model_spec, &subset_logits, ctx)
}

/// Concatenate per-subset logits into full per-pixel class logits. Each
/// subset's logits land at that subset's class positions.
pub fn assemble_full_logits<N: Scalar>(
    spec: &crate::forest::ForestSpec,
    subset_logits: &[PixelLogits<N>],
    ctx: N::Ctx,
) -> Result<PixelLogits<N>> {
    if subset_logits.len() != spec.subsets.len() {
        return Err(Error::contract(
            "one logits grid per class subset is required",
        ));
    }
    let (w, h) = match subset_logits.first() {
        Some(first) => (first.width, first.height),
        None => return Err(Error::contract("no subsets")),
    };
    let mut full = PixelLogits {
        classes: spec.class_count,
        width: w,
        height: h,
        data: vec![N::lift(ctx, 0.0); w * h * spec.class_count],
    };
    for (subset, pl) in spec.subsets.iter().zip(subset_logits) {
        if pl.width != w || pl.height != h || pl.classes != subset.classes.len() {
            return Err(Error::contract("subset logits dimensions disagree"));
        }
        for y in 0..h {
            for x in 0..w {
                let src = pl.pixel(y, x);
                let dst = full.pixel_mut(y, x);
                for (pos, &c) in subset.classes.iter().enumerate() {
                    dst[c] = src[pos];
                }
            }
        }
    }
    Ok(full)
}

/// Class logits of one block evaluated at a single normalized point.
pub fn block_logits_at(
    model_spec: &crate::forest::ForestSpec,
    params: &BlockParams,
    config: RendererConfig,
    p: Point,
) -> Result<Vec<f64>> {
    params.validate(model_spec)?;
    let mut full = vec![0.0; model_spec.class_count];
    for (subset, sp) in model_spec.subsets.iter().zip(&params.subsets) {
        let probs = region_probs_at(&subset.tree, &sp.inner, (), config, p)?;
        let n = subset.classes.len();
        for (pos, &c) in subset.classes.iter().enumerate() {
            let mut acc = 0.0;
            for (i, &r) in probs.iter().enumerate() {
                acc += r * sp.leaf_logits[i * n + pos];
            }
            full[c] = acc;
        }
    }
    Ok(full)
}

/// A forest rendered back to a mask, with the per-pixel class logits.
pub struct RenderedForest {
    pub mask: crate::data::ClassMask,
    pub classes: usize,
    /// Pixel-major logits, `classes` entries per pixel.
    pub logits: Vec<f64>,
}

fn for_each_block_logits<F>(model: &ForestModel, scale: usize, config: RendererConfig, mut f: F) -> Result<()>
where
    F: FnMut(usize, usize, &PixelLogits<f64>) -> Result<()>,
{
    if scale == 0 {
        return Err(Error::contract("scale must be >= 1"));
    }
    let raster = Raster::square(model.spec.block_size * scale)?;
    for by in 0..model.grid_height {
        for bx in 0..model.grid_width {
            let logits =
                render_block_logits::<f64>(&model.spec, model.block(bx, by), (), raster, config)?;
            f(bx, by, &logits)?;
        }
    }
    Ok(())
}

/// Render the whole forest at an integer scale: the argmax class mask plus
/// the full per-pixel logits.
pub fn render_forest(
    model: &ForestModel,
    scale: usize,
    config: RendererConfig,
) -> Result<RenderedForest> {
    let (w, h) = model.native_size();
    let (w, h) = (w * scale, h * scale);
    let classes = model.spec.class_count;
    let mut mask = crate::data::ClassMask::filled(w, h, 0)?;
    let mut logits = vec![0.0; w * h * classes];
    let side = model.spec.block_size * scale;
    for_each_block_logits(model, scale, config, |bx, by, block| {
        for y in 0..side {
            for x in 0..side {
                let gx = bx * side + x;
                let gy = by * side + y;
                let px = block.pixel(y, x);
                logits[(gy * w + gx) * classes..(gy * w + gx) * classes + classes]
                    .copy_from_slice(px);
                mask.set(gx, gy, argmax_class(px) as u8);
            }
        }
        Ok(())
    })?;
    Ok(RenderedForest {
        mask,
        classes,
        logits,
    })
}

/// Render only the argmax mask (no logits kept around).
pub fn render_forest_mask(
    model: &ForestModel,
    scale: usize,
    config: RendererConfig,
) -> Result<crate::data::ClassMask> {
    let (w, h) = model.native_size();
    let mut mask = crate::data::ClassMask::filled(w * scale, h * scale, 0)?;
    let side = model.spec.block_size * scale;
    for_each_block_logits(model, scale, config, |bx, by, block| {
        for y in 0..side {
            for x in 0..side {
                mask.set(bx * side + x, by * side + y, argmax_class(block.pixel(y, x)) as u8);
            }
        }
        Ok(())
    })?;
    Ok(mask)
}

/// Region-map visualization: leaf logits replaced by palette colors.
///
/// Renders `subset`'s tree for every block and blends the palette through
/// the region map, giving the per-region coloring with soft boundaries.
pub fn region_visualization(
    model: &ForestModel,
    subset: usize,
    scale: usize,
    config: RendererConfig,
    palette: &[[u8; 3]],
) -> Result<crate::data::RgbImage> {
    if subset >= model.spec.subsets.len() {
        return Err(Error::contract(format!(
            "subset {subset} out of range ({} subsets)",
            model.spec.subsets.len()
        )));
    }
    let tree = &model.spec.subsets[subset].tree;
    if palette.len() < tree.leaf_count() {
        return Err(Error::contract(format!(
            "palette has {} colors, tree has {} regions",
            palette.len(),
            tree.leaf_count()
        )));
    }
    let side = model.spec.block_size * scale;
    let raster = Raster::square(side)?;
    let (w, h) = model.native_size();
    let mut img = crate::data::RgbImage::new(w * scale, h * scale);
    for by in 0..model.grid_height {
        for bx in 0..model.grid_width {
            let params = &model.block(bx, by).subsets[subset];
            let rm = render_region_map(tree, &params.inner, (), raster, config)?;
            for y in 0..side {
                for x in 0..side {
                    let dist = rm.pixel(y, x);
                    let mut rgb = [0.0f64; 3];
                    for (i, &r) in dist.iter().enumerate() {
                        for ch in 0..3 {
                            rgb[ch] += r * palette[i][ch] as f64;
                        }
                    }
                    img.set(
                        bx * side + x,
                        by * side + y,
                        [
                            rgb[0].round().clamp(0.0, 255.0) as u8,
                            rgb[1].round().clamp(0.0, 255.0) as u8,
                            rgb[2].round().clamp(0.0, 255.0) as u8,
                        ],
                    );
                }
            }
        }
    }
    Ok(img)
}

/// The default region palette: red, green, blue, cyan, extended for deeper
/// trees.
pub const REGION_PALETTE: [[u8; 3]; 16] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [0, 255, 255],
    [255, 0, 255],
    [255, 255, 0],
    [255, 128, 0],
    [128, 0, 255],
    [0, 128, 0],
    [128, 128, 255],
    [255, 128, 128],
    [0, 0, 128],
    [128, 64, 0],
    [0, 128, 128],
    [128, 0, 64],
    [192, 192, 192],
];

/// Impurity visualization: leaf logits replaced by each region's Gini
/// impurity against the ground truth, rendered as grayscale (white = the
/// region mixes classes).
pub fn purity_visualization(
    model: &ForestModel,
    ground_truth: &crate::data::ClassMask,
    subset: usize,
    scale: usize,
    config: RendererConfig,
) -> Result<crate::data::RgbImage> {
    let (w, h) = model.native_size();
    if ground_truth.width != w || ground_truth.height != h {
        return Err(Error::contract(format!(
            "ground truth is {}x{}, model renders {w}x{h}",
            ground_truth.width, ground_truth.height
        )));
    }
    if subset >= model.spec.subsets.len() {
        return Err(Error::contract(format!("subset {subset} out of range")));
    }
    let sub = &model.spec.subsets[subset];
    let side_native = model.spec.block_size;
    let side = side_native * scale;
    let mut img = crate::data::RgbImage::new(w * scale, h * scale);
    for by in 0..model.grid_height {
        for bx in 0..model.grid_width {
            let params = &model.block(bx, by).subsets[subset];
            // Impurity comes from the native-resolution histogram; the
            // visualization raster may be finer.
            let native = render_region_map(
                &sub.tree,
                &params.inner,
                (),
                Raster::square(side_native)?,
                config,
            )?;
            let target = crate::loss::BlockTarget::from_mask_block(
                ground_truth,
                bx,
                by,
                side_native,
                model.spec.class_count,
                None,
            )?;
            let split = crate::loss::split_target_for_subset(&target, &sub.classes);
            let hist = crate::loss::region_class_histogram(&native, &split, ())?;
            let ginis: Vec<f64> = hist
                .probs
                .iter()
                .map(|p| crate::loss::gini(p, ()))
                .collect();
            let rm = render_region_map(&sub.tree, &params.inner, (), Raster::square(side)?, config)?;
            for y in 0..side {
                for x in 0..side {
                    let dist = rm.pixel(y, x);
                    let mut v = 0.0;
                    for (i, &r) in dist.iter().enumerate() {
                        v += r * ginis[i];
                    }
                    let g = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                    img.set(bx * side + x, by * side + y, [g, g, g]);
                }
            }
        }
    }
    Ok(img)
}
