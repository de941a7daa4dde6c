//! The codec encoder: per-block gradient fitting of tree parameters to a
//! target mask.
//!
//! Each block is an independent problem: initialize parameters from a
//! block-local RNG, run Adam with a cosine-annealed step size on the full
//! loss, keep the best of a few restarts. Blocks never share state, so a
//! fitted image is reproducible bit for bit regardless of how many workers
//! process it.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::ClassMask;
use crate::error::{Error, Result};
use crate::forest::{BlockParams, ForestModel, ForestSpec, TreeNode};
use crate::grad::{Tape, Var};
use crate::loss::{loss_total, BlockTarget, LossBreakdown, LossWeights};
use crate::metrics::{accuracy, confusion, miou};
use crate::render::{
    argmax_class, assemble_full_logits, render_forest_mask, render_logits, render_region_map,
    Raster, RendererConfig,
};
use crate::sdf::SdfKind;

/// Optimizer settings for block fitting.
#[derive(Clone, Debug)]
pub struct FitConfig {
    pub steps: usize,
    /// Peak Adam step size; annealed to zero over `steps` by a cosine.
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Independent restarts per block; the result with the lowest final
    /// total loss wins.
    pub restarts: usize,
    /// Extra cosine cycles continued from the best parameters when the
    /// block is still imperfect after all restarts (warm restarts). Each
    /// cycle keeps its result only if the total loss improved.
    pub polish_cycles: usize,
    /// Seed restart 0 with greedy axis-split thresholds and leaf-majority
    /// logits instead of random parameters (axis-capable node kinds only).
    pub informed_init: bool,
    /// Stop a block as soon as its pixel accuracy reaches 100%.
    pub early_stop: bool,
    pub seed: u64,
    /// Record the per-step loss trace of the winning restart.
    pub record_trace: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 300,
            learning_rate: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            restarts: 4,
            polish_cycles: 2,
            informed_init: true,
            early_stop: true,
            seed: 0,
            record_trace: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::contract("steps must be >= 1"));
        }
        if self.restarts == 0 {
            return Err(Error::contract("restarts must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::contract("learning_rate must be > 0"));
        }
        Ok(())
    }
}

/// Outcome of fitting one block.
#[derive(Clone, Debug)]
pub struct FitStats {
    /// Final loss components of the winning restart.
    pub loss: LossBreakdown<f64>,
    /// Pixel accuracy of the fitted block on its target.
    pub accuracy: f64,
    /// Adam steps consumed by the winning restart.
    pub steps_used: usize,
    /// Index of the winning restart.
    pub restart: usize,
    /// Restarts aborted because the loss went non-finite.
    pub aborted_restarts: usize,
    /// Per-step loss trace of the winning restart, if recorded.
    pub trace: Vec<(usize, LossBreakdown<f64>)>,
}

/// RNG of one (block, restart) work item: a pure function of the global
/// seed and the block coordinates, independent of scheduling.
pub fn block_rng(seed: u64, bx: usize, by: usize, restart: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(bx as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(by as u64).to_le_bytes());
    key[24..32].copy_from_slice(&(restart as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn sample_sdf_params<R: RngExt>(kind: SdfKind, rng: &mut R, out: &mut Vec<f64>) {
    let gate = Normal::new(0.0, 0.1).expect("valid normal");
    match kind {
        SdfKind::Line => {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            out.push(theta.cos());
            out.push(theta.sin());
            out.push(rng.random_range(-0.5..0.5));
        }
        SdfKind::Square | SdfKind::Circle => {
            out.push(rng.random_range(-0.5..0.5));
            out.push(rng.random_range(-0.5..0.5));
            out.push(rng.random_range(0.2..0.8));
        }
        SdfKind::Ellipse | SdfKind::Hyperbola => {
            for _ in 0..4 {
                out.push(rng.random_range(-0.5..0.5));
            }
            out.push(rng.random_range(0.2..0.8));
        }
        SdfKind::Parabola => {
            out.push(rng.random_range(-0.5..0.5));
            out.push(rng.random_range(-0.5..0.5));
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            out.push(theta.cos());
            out.push(theta.sin());
            out.push(rng.random_range(-0.5..0.5));
        }
        SdfKind::KdAxis(_) => out.push(rng.random_range(-0.5..0.5)),
        SdfKind::DynKd => {
            out.push(rng.random_range(-0.5..0.5));
            out.push(gate.sample(rng));
            out.push(gate.sample(rng));
        }
    }
}

/// Draw initial block parameters: boundaries that intersect the block with
/// high probability, leaf logits near zero.
pub fn init_params<R: RngExt>(spec: &ForestSpec, rng: &mut R) -> BlockParams {
    let logit_dist = Normal::new(0.0, 0.01).expect("valid normal");
    let subsets = spec
        .subsets
        .iter()
        .map(|subset| {
            let mut inner = Vec::with_capacity(subset.tree.inner_param_count());
            for node in subset.tree.nodes() {
                match node {
                    TreeNode::Bsp(kind) => sample_sdf_params(*kind, rng, &mut inner),
                    TreeNode::Quad => {
                        inner.push(rng.random_range(-0.5..0.5));
                        inner.push(rng.random_range(-0.5..0.5));
                    }
                    TreeNode::Leaf => {}
                }
            }
            let leaf_logits = (0..subset.tree.leaf_count() * subset.classes.len())
                .map(|_| logit_dist.sample(rng))
                .collect();
            crate::forest::SubsetParams { inner, leaf_logits }
        })
        .collect();
    BlockParams { subsets }
}

/// One target pixel in block-normalized coordinates.
#[derive(Clone, Copy)]
struct LabeledPoint {
    p1: f64,
    p2: f64,
    class: u16,
}

fn gini_of_counts(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts
        .iter()
        .map(|&c| (c as f64 / t) * (c as f64 / t))
        .sum::<f64>()
}

/// Best impurity-reducing threshold on one axis: a midpoint between
/// adjacent occupied coordinates. Returns (threshold, gain).
fn best_axis_split(points: &[LabeledPoint], axis: crate::sdf::Axis, classes: usize) -> Option<(f64, f64)> {
    use crate::sdf::Axis;
    let coord = |p: &LabeledPoint| match axis {
        Axis::X => p.p1,
        Axis::Y => p.p2,
    };
    let mut values: Vec<f64> = points.iter().map(coord).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    if values.len() < 2 {
        return None;
    }
    let mut total = vec![0usize; classes];
    for p in points {
        total[p.class as usize] += 1;
    }
    let parent = gini_of_counts(&total);
    let n = points.len() as f64;
    let mut best: Option<(f64, f64)> = None;
    for pair in values.windows(2) {
        let threshold = 0.5 * (pair[0] + pair[1]);
        let mut below = vec![0usize; classes];
        for p in points {
            if coord(p) < threshold {
                below[p.class as usize] += 1;
            }
        }
        let above: Vec<usize> = total.iter().zip(&below).map(|(t, b)| t - b).collect();
        let nb: usize = below.iter().sum();
        let na: usize = above.iter().sum();
        let child = (nb as f64 / n) * gini_of_counts(&below)
            + (na as f64 / n) * gini_of_counts(&above);
        let gain = parent - child;
        if gain > 1e-12 && best.map_or(true, |(_, g)| gain > g) {
            best = Some((threshold, gain));
        }
    }
    best
}

/// Greedy decision-tree initialization: thresholds at the target's class
/// boundaries, leaf logits from class fractions. Node kinds without an
/// axis-threshold interpretation fall back to random parameters.
fn informed_init<R: RngExt>(
    spec: &ForestSpec,
    target: &BlockTarget,
    rng: &mut R,
) -> BlockParams {
    use crate::sdf::Axis;
    let mut subsets = Vec::with_capacity(spec.subsets.len());
    for subset in &spec.subsets {
        let split = crate::loss::split_target_for_subset(target, &subset.classes);
        let classes = split.classes;
        let mut points = Vec::with_capacity(split.width * split.height);
        for y in 0..split.height {
            for x in 0..split.width {
                if let Some(c) = split.class_at(y, x) {
                    let p = crate::sdf::Point::pixel_center(x, y, split.width, split.height);
                    points.push(LabeledPoint {
                        p1: p.p1,
                        p2: p.p2,
                        class: c as u16,
                    });
                }
            }
        }
        let tree = &subset.tree;
        let mut inner = vec![0.0; tree.inner_param_count()];
        let mut leaf_points: Vec<Vec<LabeledPoint>> = vec![Vec::new(); tree.leaf_count()];
        // preorder walk carrying each node's pixel subset
        fn assign(
            tree: &crate::forest::TreeShape,
            node: usize,
            points: Vec<LabeledPoint>,
            classes: usize,
            inner: &mut [f64],
            leaf_points: &mut [Vec<LabeledPoint>],
            rng: &mut impl RngExt,
        ) {
            use crate::forest::TreeNode;
            match tree.nodes()[node] {
                TreeNode::Leaf => {
                    leaf_points[tree.leaf_index(node)] = points;
                }
                TreeNode::Quad => {
                    let tx = best_axis_split(&points, Axis::X, classes)
                        .map(|(t, _)| t)
                        .unwrap_or(0.0);
                    let ty = best_axis_split(&points, Axis::Y, classes)
                        .map(|(t, _)| t)
                        .unwrap_or(0.0);
                    let range = tree.param_range(node);
                    inner[range.start] = tx;
                    inner[range.start + 1] = ty;
                    // slot order matches the renderer's update equations
                    let mut slots: [Vec<LabeledPoint>; 4] = Default::default();
                    for p in points {
                        let idx = match (p.p1 > tx, p.p2 > ty) {
                            (true, false) => 0,
                            (false, false) => 1,
                            (true, true) => 2,
                            (false, true) => 3,
                        };
                        slots[idx].push(p);
                    }
                    let children: Vec<usize> =
                        (0..4).map(|s| tree.child(node, s)).collect();
                    for (slot, child) in children.into_iter().enumerate() {
                        let subset = std::mem::take(&mut slots[slot]);
                        assign(tree, child, subset, classes, inner, leaf_points, rng);
                    }
                }
                TreeNode::Bsp(kind) => {
                    let range = tree.param_range(node);
                    // (axis, threshold) when the node can express one
                    let choice = match kind {
                        SdfKind::KdAxis(axis) => {
                            best_axis_split(&points, axis, classes).map(|(t, _)| (axis, t))
                        }
                        SdfKind::Line | SdfKind::DynKd => {
                            let x = best_axis_split(&points, Axis::X, classes);
                            let y = best_axis_split(&points, Axis::Y, classes);
                            match (x, y) {
                                (Some((tx, gx)), Some((ty, gy))) => Some(if gx >= gy {
                                    (Axis::X, tx)
                                } else {
                                    (Axis::Y, ty)
                                }),
                                (Some((tx, _)), None) => Some((Axis::X, tx)),
                                (None, Some((ty, _))) => Some((Axis::Y, ty)),
                                (None, None) => None,
                            }
                        }
                        _ => None,
                    };
                    match (kind, choice) {
                        (SdfKind::KdAxis(_), c) => {
                            inner[range.start] = c.map(|(_, t)| t).unwrap_or(0.0);
                        }
                        (SdfKind::Line, Some((axis, t))) => {
                            // f = t - p_axis as a line: n = -e_axis, d = -t
                            let (n1, n2) = match axis {
                                Axis::X => (-1.0, 0.0),
                                Axis::Y => (0.0, -1.0),
                            };
                            inner[range.start] = n1;
                            inner[range.start + 1] = n2;
                            inner[range.start + 2] = -t;
                        }
                        (SdfKind::DynKd, Some((axis, t))) => {
                            inner[range.start] = t;
                            let (g1, g2) = match axis {
                                Axis::X => (2.0, -2.0),
                                Axis::Y => (-2.0, 2.0),
                            };
                            inner[range.start + 1] = g1;
                            inner[range.start + 2] = g2;
                        }
                        _ => {
                            // no axis reading: draw random parameters
                            let mut params = Vec::new();
                            sample_sdf_params(kind, rng, &mut params);
                            inner[range.clone()].copy_from_slice(&params);
                        }
                    }
                    // route by the actual signed distance of the chosen params
                    let params: Vec<f64> = inner[range].to_vec();
                    let (mut left, mut right) = (Vec::new(), Vec::new());
                    for p in points {
                        let f = crate::sdf::eval_sdf(
                            kind,
                            &params,
                            (),
                            crate::sdf::Point::new(p.p1, p.p2),
                        )
                        .expect("parameter count fixed by layout");
                        if f > 0.0 {
                            left.push(p);
                        } else {
                            right.push(p);
                        }
                    }
                    let l = tree.child(node, 0);
                    let r = tree.child(node, 1);
                    assign(tree, l, left, classes, inner, leaf_points, rng);
                    assign(tree, r, right, classes, inner, leaf_points, rng);
                }
            }
        }
        let all = points.clone();
        assign(tree, 0, all, classes, &mut inner, &mut leaf_points, rng);

        // leaf logits: 2 * class fraction of the leaf's pixels; the "other"
        // dimension of the split target has no logit slot
        let n_classes = subset.classes.len();
        let mut leaf_logits = vec![0.0; tree.leaf_count() * n_classes];
        for (leaf, pts) in leaf_points.iter().enumerate() {
            if pts.is_empty() {
                continue;
            }
            let mut counts = vec![0usize; classes];
            for p in pts {
                counts[p.class as usize] += 1;
            }
            for pos in 0..n_classes {
                leaf_logits[leaf * n_classes + pos] =
                    2.0 * counts[pos] as f64 / pts.len() as f64;
            }
        }
        subsets.push(crate::forest::SubsetParams { inner, leaf_logits });
    }
    BlockParams { subsets }
}

struct StepOutcome {
    gradient: Vec<f64>,
    loss: LossBreakdown<f64>,
    accuracy: f64,
}

/// One forward/backward pass at the current parameters.
fn evaluate_step(
    tape: &Tape,
    spec: &ForestSpec,
    flat: &[f64],
    target: &BlockTarget,
    weights: &LossWeights,
    renderer: RendererConfig,
    raster: Raster,
) -> Result<StepOutcome> {
    let vars: Vec<Var<'_>> = flat
        .iter()
        .map(|&v| tape.variable(v))
        .collect::<Result<_>>()?;

    let mut region_maps = Vec::with_capacity(spec.subsets.len());
    let mut subset_logits = Vec::with_capacity(spec.subsets.len());
    let mut pos = 0usize;
    for subset in &spec.subsets {
        let ni = subset.tree.inner_param_count();
        let nl = subset.tree.leaf_count() * subset.classes.len();
        let inner = &vars[pos..pos + ni];
        let logits = &vars[pos + ni..pos + ni + nl];
        pos += ni + nl;
        let rm = render_region_map(&subset.tree, inner, tape, raster, renderer)?;
        subset_logits.push(render_logits(&rm, logits, subset.classes.len(), tape)?);
        region_maps.push(rm);
    }
    let full = assemble_full_logits(spec, &subset_logits, tape)?;

    // Block accuracy at the current parameters, before any update.
    let mut correct = 0usize;
    let mut counted = 0usize;
    let mut pixel = vec![0.0; spec.class_count];
    for y in 0..target.height {
        for x in 0..target.width {
            let Some(c) = target.class_at(y, x) else {
                continue;
            };
            for (dst, var) in pixel.iter_mut().zip(full.pixel(y, x)) {
                *dst = var.value();
            }
            counted += 1;
            if argmax_class(&pixel) == c {
                correct += 1;
            }
        }
    }
    let accuracy = if counted == 0 {
        1.0
    } else {
        correct as f64 / counted as f64
    };

    let subset_classes: Vec<&[usize]> = spec.subsets.iter().map(|s| &s.classes[..]).collect();
    let breakdown = loss_total(&region_maps, &subset_classes, &full, target, weights, tape)?;
    if !breakdown.total.value().is_finite() {
        return Ok(StepOutcome {
            gradient: Vec::new(),
            loss: breakdown.values(),
            accuracy,
        });
    }
    let grads = tape.backward(breakdown.total);
    let gradient = vars.iter().map(|&v| grads.wrt(v)).collect();
    Ok(StepOutcome {
        gradient,
        loss: breakdown.values(),
        accuracy,
    })
}

struct RestartResult {
    params: Vec<f64>,
    loss: LossBreakdown<f64>,
    accuracy: f64,
    steps_used: usize,
    trace: Vec<(usize, LossBreakdown<f64>)>,
}

fn run_cycle(
    tape: &mut Tape,
    spec: &ForestSpec,
    target: &BlockTarget,
    weights: &LossWeights,
    renderer: RendererConfig,
    config: &FitConfig,
    start: Vec<f64>,
    peak_lr: f64,
) -> Result<Option<RestartResult>> {
    let mut flat = start;
    let n = flat.len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut trace = Vec::new();
    let raster = Raster::square(target.width)?;

    let mut final_state: Option<(LossBreakdown<f64>, f64, usize)> = None;
    for step in 0..=config.steps {
        let outcome = evaluate_step(tape, spec, &flat, target, weights, renderer, raster)?;
        tape.clear();
        if !outcome.loss.total.is_finite() {
            // Diverged; abort this restart.
            return Ok(None);
        }
        if config.record_trace {
            trace.push((step, outcome.loss));
        }
        let done = step == config.steps || (config.early_stop && outcome.accuracy == 1.0);
        if done {
            final_state = Some((outcome.loss, outcome.accuracy, step));
            break;
        }
        // Adam with cosine-annealed step size.
        let t = (step + 1) as f64;
        let lr = peak_lr
            * 0.5
            * (1.0 + (std::f64::consts::PI * step as f64 / config.steps as f64).cos());
        let bias1 = 1.0 - config.adam_beta1.powf(t);
        let bias2 = 1.0 - config.adam_beta2.powf(t);
        for i in 0..n {
            let g = outcome.gradient[i];
            m[i] = config.adam_beta1 * m[i] + (1.0 - config.adam_beta1) * g;
            v[i] = config.adam_beta2 * v[i] + (1.0 - config.adam_beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            flat[i] -= lr * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    let (loss, acc, steps_used) = final_state.expect("loop always sets the final state");
    Ok(Some(RestartResult {
        params: flat,
        loss,
        accuracy: acc,
        steps_used,
        trace,
    }))
}

/// Fit one block's parameters to its target by Adam, best of
/// `config.restarts` restarts. Deterministic given the seed and the block
/// coordinates.
pub fn fit_block(
    target: &BlockTarget,
    spec: &ForestSpec,
    weights: &LossWeights,
    renderer: RendererConfig,
    config: &FitConfig,
    block: (usize, usize),
) -> Result<(BlockParams, FitStats)> {
    config.validate()?;
    if target.width != spec.block_size || target.height != spec.block_size {
        return Err(Error::contract(format!(
            "target block is {}x{}, spec expects {}",
            target.width, target.height, spec.block_size
        )));
    }
    if target.classes != spec.class_count {
        return Err(Error::contract(format!(
            "target has {} classes, spec {}",
            target.classes, spec.class_count
        )));
    }
    let (bx, by) = block;

    if target.non_ignored() == 0 {
        // Nothing to fit; keep deterministic init parameters.
        let mut rng = block_rng(config.seed, bx, by, 0);
        let params = init_params(spec, &mut rng);
        let zero = LossBreakdown {
            total: 0.0,
            cross_entropy: 0.0,
            purity: 0.0,
            min_size: 0.0,
            sharpness: 0.0,
        };
        return Ok((
            params,
            FitStats {
                loss: zero,
                accuracy: 1.0,
                steps_used: 0,
                restart: 0,
                aborted_restarts: 0,
                trace: Vec::new(),
            },
        ));
    }

    let mut tape = Tape::with_capacity(1 << 14);
    let mut best: Option<(usize, RestartResult)> = None;
    let mut aborted = 0usize;
    for restart in 0..config.restarts {
        let mut rng = block_rng(config.seed, bx, by, restart);
        let start = if restart == 0 && config.informed_init {
            informed_init(spec, target, &mut rng).flatten()
        } else {
            init_params(spec, &mut rng).flatten()
        };
        match run_cycle(
            &mut tape,
            spec,
            target,
            weights,
            renderer,
            config,
            start,
            config.learning_rate,
        )? {
            None => {
                aborted += 1;
                tape.clear();
            }
            Some(result) => {
                let perfect = result.accuracy == 1.0;
                let better = match &best {
                    None => true,
                    Some((_, b)) => result.loss.total < b.loss.total,
                };
                if better {
                    best = Some((restart, result));
                }
                // A perfect reconstruction ends the search.
                if perfect && config.early_stop {
                    break;
                }
            }
        }
    }
    let (restart, mut result) = best.ok_or_else(|| {
        Error::domain(format!(
            "all {} restarts of block ({bx},{by}) diverged",
            config.restarts
        ))
    })?;

    // Warm restarts: blocks that are still imperfect get extra annealing
    // cycles from the best parameters; a cycle's result is kept only when
    // the total loss improved.
    let mut total_steps = result.steps_used;
    for _ in 0..config.polish_cycles {
        if config.early_stop && result.accuracy == 1.0 {
            break;
        }
        let outcome = run_cycle(
            &mut tape,
            spec,
            target,
            weights,
            renderer,
            config,
            result.params.clone(),
            0.5 * config.learning_rate,
        )?;
        match outcome {
            Some(polished) if polished.loss.total < result.loss.total => {
                total_steps += polished.steps_used;
                let offset = result.trace.len();
                result.loss = polished.loss;
                result.accuracy = polished.accuracy;
                result.params = polished.params;
                result
                    .trace
                    .extend(polished.trace.into_iter().map(|(s, b)| (s + offset, b)));
            }
            _ => break,
        }
    }
    result.steps_used = total_steps;

    let params = BlockParams::unflatten(spec, &result.params)?;
    Ok((
        params,
        FitStats {
            loss: result.loss,
            accuracy: result.accuracy,
            steps_used: result.steps_used,
            restart,
            aborted_restarts: aborted,
            trace: result.trace,
        },
    ))
}

/// Per-block statistics plus round-trip quality of a fitted image.
#[derive(Clone, Debug)]
pub struct FitReport {
    /// One entry per block, row-major: coordinates and stats.
    pub blocks: Vec<(usize, usize, FitStats)>,
    /// Pixel accuracy of rendering the model back at native resolution
    /// against the (padded) input mask.
    pub accuracy: f64,
    /// Mean IoU of the round trip.
    pub miou: f64,
    /// Blocks that failed to fit, with the error text; such blocks carry
    /// their initialization parameters.
    pub warnings: Vec<(usize, usize, String)>,
}

/// Fit a whole mask: pad to blocks, fit every block independently, assemble
/// the model and measure the reconstruction.
///
/// With the `parallel` feature enabled blocks are fitted on the current
/// rayon pool; results are identical regardless of worker count.
pub fn fit_image(
    mask: &ClassMask,
    spec: &ForestSpec,
    weights: &LossWeights,
    renderer: RendererConfig,
    config: &FitConfig,
) -> Result<(ForestModel, FitReport)> {
    config.validate()?;
    mask.validate_classes(spec.class_count)?;
    let padded = mask.pad_to_blocks(spec.block_size)?;
    let grid_w = padded.width / spec.block_size;
    let grid_h = padded.height / spec.block_size;

    let fit_one = |index: usize| -> (usize, usize, Result<(BlockParams, FitStats)>) {
        let bx = index % grid_w;
        let by = index / grid_w;
        let result = BlockTarget::from_mask_block(
            &padded,
            bx,
            by,
            spec.block_size,
            spec.class_count,
            weights.ignore_index,
        )
        .and_then(|target| fit_block(&target, spec, weights, renderer, config, (bx, by)));
        (bx, by, result)
    };

    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        (0..grid_w * grid_h).into_par_iter().map(fit_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = (0..grid_w * grid_h).map(fit_one).collect();

    let mut blocks = Vec::with_capacity(results.len());
    let mut stats = Vec::with_capacity(results.len());
    let mut warnings = Vec::new();
    for (bx, by, result) in results {
        match result {
            Ok((params, stat)) => {
                blocks.push(params);
                stats.push((bx, by, stat));
            }
            Err(err) => {
                warnings.push((bx, by, err.to_string()));
                let mut rng = block_rng(config.seed, bx, by, 0);
                blocks.push(init_params(spec, &mut rng));
                stats.push((
                    bx,
                    by,
                    FitStats {
                        loss: LossBreakdown {
                            total: f64::INFINITY,
                            cross_entropy: f64::INFINITY,
                            purity: 0.0,
                            min_size: 0.0,
                            sharpness: 0.0,
                        },
                        accuracy: 0.0,
                        steps_used: 0,
                        restart: 0,
                        aborted_restarts: config.restarts,
                        trace: Vec::new(),
                    },
                ));
            }
        }
    }

    let model = ForestModel::new(spec.clone(), grid_w, grid_h, blocks)?;
    let rendered = render_forest_mask(&model, 1, renderer)?;
    let cm = confusion(&rendered, &padded, spec.class_count, weights.ignore_index)?;
    let report = FitReport {
        blocks: stats,
        accuracy: accuracy(&cm)?,
        miou: miou(&cm)?,
        warnings,
    };
    Ok((model, report))
}

/// Write the per-image fitting report as CSV. The leading comment line
/// carries the round-trip summary.
pub fn write_fit_report_csv<W: std::io::Write>(
    out: &mut W,
    report: &FitReport,
) -> std::io::Result<()> {
    writeln!(
        out,
        "# accuracy={} miou={}",
        report.accuracy, report.miou
    )?;
    writeln!(out, "bx,by,accuracy,L_total,L_CE,L_Y,L_s,L_R,steps,restart")?;
    for (bx, by, s) in &report.blocks {
        writeln!(
            out,
            "{bx},{by},{},{},{},{},{},{},{},{}",
            s.accuracy,
            s.loss.total,
            s.loss.cross_entropy,
            s.loss.purity,
            s.loss.min_size,
            s.loss.sharpness,
            s.steps_used,
            s.restart
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::TreeShape;

    fn constant_target(side: usize, classes: usize, class: u16) -> BlockTarget {
        BlockTarget::new(side, side, classes, vec![Some(class); side * side]).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ForestSpec::default_bsp(4);
        let a = init_params(&spec, &mut block_rng(7, 1, 2, 0));
        let b = init_params(&spec, &mut block_rng(7, 1, 2, 0));
        assert_eq!(a, b);
        let c = init_params(&spec, &mut block_rng(7, 1, 2, 1));
        assert_ne!(a, c);
    }

    #[test]
    fn initial_lines_intersect_the_block() {
        // |n| = 1 and |d| < 0.5: the line's closest point to the origin is
        // within the unit disk, hence inside [-1,1]^2. Monte-Carlo confirm.
        let mut rng = block_rng(11, 0, 0, 0);
        let mut hits = 0;
        for _ in 0..1000 {
            let mut params = Vec::new();
            sample_sdf_params(SdfKind::Line, &mut rng, &mut params);
            let (n1, n2, d) = (params[0], params[1], params[2]);
            // closest point to origin
            let (cx, cy) = (n1 * d, n2 * d);
            if cx.abs() <= 1.0 && cy.abs() <= 1.0 {
                hits += 1;
            }
        }
        assert!(hits >= 990, "{hits}/1000 boundaries intersect");
    }

    #[test]
    fn initial_logits_give_uniform_cross_entropy() {
        let spec = ForestSpec::default_bsp(4);
        let params = init_params(&spec, &mut block_rng(3, 0, 0, 0));
        let logits = crate::render::render_block_logits::<f64>(
            &spec,
            &params,
            (),
            Raster::square(8).unwrap(),
            RendererConfig::default(),
        )
        .unwrap();
        let target = constant_target(8, 4, 2);
        let ce =
            crate::loss::loss_cross_entropy(&logits, &target, &[1.0; 4], ()).unwrap();
        assert!((ce - 4.0f64.ln()).abs() < 0.05, "ce = {ce}");
    }

    #[test]
    fn single_class_block_fits_quickly() {
        let spec = ForestSpec::default_bsp(3);
        let target = constant_target(8, 3, 1);
        let weights = LossWeights::defaults(3);
        let config = FitConfig::default();
        let (params, stats) = fit_block(
            &target,
            &spec,
            &weights,
            RendererConfig::default(),
            &config,
            (0, 0),
        )
        .unwrap();
        assert_eq!(stats.accuracy, 1.0);
        assert!(stats.steps_used <= 50, "took {} steps", stats.steps_used);
        params.validate(&spec).unwrap();
    }

    #[test]
    fn half_split_block_reaches_full_accuracy() {
        // vertical split at 3/8 with a depth-1 line BSP
        let mut pixels = Vec::new();
        for _y in 0..8 {
            for x in 0..8 {
                pixels.push(Some(if x < 3 { 0u16 } else { 1 }));
            }
        }
        let target = BlockTarget::new(8, 8, 2, pixels).unwrap();
        let spec = ForestSpec::single(8, 2, TreeShape::bsp(SdfKind::Line, 1)).unwrap();
        let weights = LossWeights::defaults(2);
        let (_, stats) = fit_block(
            &target,
            &spec,
            &weights,
            RendererConfig::default(),
            &FitConfig::default(),
            (0, 0),
        )
        .unwrap();
        assert_eq!(stats.accuracy, 1.0, "stats: {stats:?}");
    }

    #[test]
    fn checkerboard_is_not_representable_but_fit_returns() {
        let mut pixels = Vec::new();
        for y in 0..8 {
            for x in 0..8 {
                pixels.push(Some(((x + y) % 2) as u16));
            }
        }
        let target = BlockTarget::new(8, 8, 2, pixels).unwrap();
        let spec = ForestSpec::default_bsp(2);
        let weights = LossWeights::defaults(2);
        let config = FitConfig {
            steps: 60,
            restarts: 2,
            ..FitConfig::default()
        };
        let (_, stats) = fit_block(
            &target,
            &spec,
            &weights,
            RendererConfig::default(),
            &config,
            (0, 0),
        )
        .unwrap();
        // 4 polygonal regions cannot reproduce a pixel checkerboard
        assert!(stats.accuracy < 1.0);
        assert!(stats.loss.total.is_finite());
    }

    #[test]
    fn all_ignored_block_is_vacuously_perfect() {
        let target = BlockTarget::new(8, 8, 2, vec![None; 64]).unwrap();
        let spec = ForestSpec::default_bsp(2);
        let (_, stats) = fit_block(
            &target,
            &spec,
            &LossWeights::defaults(2),
            RendererConfig::default(),
            &FitConfig::default(),
            (0, 0),
        )
        .unwrap();
        assert_eq!(stats.accuracy, 1.0);
        assert_eq!(stats.steps_used, 0);
    }

    #[test]
    fn fit_block_is_deterministic() {
        let mut pixels = Vec::new();
        for y in 0..8 {
            for x in 0..8 {
                pixels.push(Some(if x + y < 8 { 0u16 } else { 1 }));
            }
        }
        let target = BlockTarget::new(8, 8, 2, pixels).unwrap();
        let spec = ForestSpec::default_bsp(2);
        let weights = LossWeights::defaults(2);
        let config = FitConfig {
            steps: 40,
            restarts: 2,
            ..FitConfig::default()
        };
        let run = || {
            fit_block(
                &target,
                &spec,
                &weights,
                RendererConfig::default(),
                &config,
                (3, 5),
            )
            .unwrap()
        };
        let (pa, sa) = run();
        let (pb, sb) = run();
        assert_eq!(pa, pb);
        assert_eq!(sa.loss.total, sb.loss.total);
        assert_eq!(sa.steps_used, sb.steps_used);
    }

    #[test]
    fn constant_image_fits_perfectly() {
        let mask = ClassMask::filled(16, 16, 2).unwrap();
        let spec = ForestSpec::default_bsp(3);
        let (model, report) = fit_image(
            &mask,
            &spec,
            &LossWeights::defaults(3),
            RendererConfig::default(),
            &FitConfig::default(),
        )
        .unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.miou, 1.0);
        assert!(report.warnings.is_empty());
        assert_eq!(model.grid_width, 2);
        assert_eq!(model.grid_height, 2);
    }

    #[test]
    fn fit_image_pads_odd_sizes() {
        let mask = ClassMask::filled(9, 8, 1).unwrap();
        let spec = ForestSpec::default_bsp(2);
        let config = FitConfig {
            steps: 30,
            restarts: 1,
            ..FitConfig::default()
        };
        let (model, report) = fit_image(
            &mask,
            &spec,
            &LossWeights::defaults(2),
            RendererConfig::default(),
            &config,
        )
        .unwrap();
        assert_eq!(model.grid_width, 2);
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn report_csv_has_summary_and_rows() {
        let mask = ClassMask::filled(8, 8, 0).unwrap();
        let spec = ForestSpec::default_bsp(2);
        let (_, report) = fit_image(
            &mask,
            &spec,
            &LossWeights::defaults(2),
            RendererConfig::default(),
            &FitConfig {
                steps: 10,
                restarts: 1,
                ..FitConfig::default()
            },
        )
        .unwrap();
        let mut out = Vec::new();
        write_fit_report_csv(&mut out, &report).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("# accuracy=1 miou=1\n"));
        assert!(text.contains("bx,by,accuracy"));
        assert!(text.contains("0,0,1,"));
    }
}
