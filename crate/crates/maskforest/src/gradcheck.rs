//! Finite-difference verification sweeps over the whole differentiable
//! pipeline: every SDF family under both renderer modes, quadtree updates,
//! and each loss component with respect to full block parameters.
//!
//! Probes are drawn from the fitting initializer's distributions; probes
//! that land within `KINK_REJECT` of a subgradient kink (relu/abs at zero,
//! max2 ties) are rejected and redrawn, since central differences straddle
//! kinks.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fit::{block_rng, init_params};
use crate::forest::{ForestSpec, TreeShape};
use crate::grad::{grad_check, Tape, Var};
use crate::loss::{loss_total, BlockTarget, LossWeights};
use crate::render::{
    assemble_full_logits, render_logits, render_region_map, Raster, RendererConfig,
};
use crate::sdf::SdfKind;

/// Rejection distance from subgradient kinks.
pub const KINK_REJECT: f64 = 1e-4;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Acceptance threshold on the max relative error.
pub const MAX_REL_ERR: f64 = 1e-4;

/// Outcome of one sweep row.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub name: String,
    pub trials: usize,
    /// Probes redrawn for being too close to a kink.
    pub rejected: usize,
    pub max_rel_err: f64,
}

impl SweepRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < MAX_REL_ERR
    }
}

/// Scalar outputs checked against finite differences: the plain sum of all
/// region-map entries (softmax normalization makes its gradient cancel; the
/// check verifies the cancellation) and a fixed-weight combination that is
/// sensitive to any wrong partial.
fn region_map_scalar<'t>(
    tape: &'t Tape,
    vars: &[Var<'t>],
    tree: &TreeShape,
    raster: Raster,
    config: RendererConfig,
    weighted: bool,
) -> Result<Var<'t>> {
    let rm = render_region_map(tree, vars, tape, raster, config)?;
    let mut acc = tape.lift(0.0)?;
    let mut w = 0.613;
    for y in 0..rm.height {
        for x in 0..rm.width {
            for &p in rm.pixel(y, x) {
                if weighted {
                    acc = acc + tape.lift(w)? * p;
                    w = (w * 1.3241 + 0.137).fract();
                } else {
                    acc = acc + p;
                }
            }
        }
    }
    Ok(acc)
}

/// Draw inner parameters for `tree` until the forward pass stays clear of
/// every kink; returns the probe and the rejection count.
fn sample_smooth_params(
    tree: &TreeShape,
    raster: Raster,
    config: RendererConfig,
    rng: &mut ChaCha8Rng,
    spec: &ForestSpec,
) -> (Vec<f64>, usize) {
    let mut rejected = 0;
    loop {
        let params = init_params(spec, rng).subsets.remove(0).inner;
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params
            .iter()
            .map(|&v| tape.variable(v).expect("finite init"))
            .collect();
        let ok = render_region_map(&tree.clone(), &vars, &tape, raster, config).is_ok()
            && tape.kink_margin() >= KINK_REJECT;
        if ok {
            return (params, rejected);
        }
        rejected += 1;
    }
}

/// Gradient sweep of the region map for one tree shape and renderer mode.
fn sweep_tree(
    name: &str,
    tree: &TreeShape,
    config: RendererConfig,
    trials: usize,
    seed: u64,
) -> Result<SweepRow> {
    let raster = Raster::square(3)?;
    // single-subset spec wrapping the tree, used only for init sampling
    let spec = ForestSpec::single(8, 2, tree.clone())?;
    let mut rng = block_rng(seed, 0, 0, 0);
    let mut rejected = 0;
    let mut max_err = 0.0f64;
    for _ in 0..trials {
        let (params, r) = sample_smooth_params(tree, raster, config, &mut rng, &spec);
        rejected += r;
        for weighted in [false, true] {
            let err = grad_check(
                |t, vars| region_map_scalar(t, vars, tree, raster, config, weighted),
                &params,
                FD_STEP,
            )?;
            max_err = max_err.max(err);
        }
    }
    Ok(SweepRow {
        name: name.to_string(),
        trials,
        rejected,
        max_rel_err: max_err,
    })
}

/// Which loss component a sweep row differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossComponent {
    CrossEntropy,
    Purity,
    MinSize,
    Sharpness,
    Total,
}

impl LossComponent {
    pub const ALL: [LossComponent; 5] = [
        LossComponent::CrossEntropy,
        LossComponent::Purity,
        LossComponent::MinSize,
        LossComponent::Sharpness,
        LossComponent::Total,
    ];

    fn name(self) -> &'static str {
        match self {
            LossComponent::CrossEntropy => "loss L_CE",
            LossComponent::Purity => "loss L_Y",
            LossComponent::MinSize => "loss L_s",
            LossComponent::Sharpness => "loss L_R",
            LossComponent::Total => "loss L_total",
        }
    }
}

fn build_block_loss<'t>(
    tape: &'t Tape,
    vars: &[Var<'t>],
    target: &BlockTarget,
    spec: &ForestSpec,
    weights: &LossWeights,
    config: RendererConfig,
    raster: Raster,
) -> Result<crate::loss::LossBreakdown<Var<'t>>> {
    let subset = &spec.subsets[0];
    let ni = subset.tree.inner_param_count();
    let rm = render_region_map(&subset.tree, &vars[..ni], tape, raster, config)?;
    let logits = render_logits(&rm, &vars[ni..], subset.classes.len(), tape)?;
    let full = assemble_full_logits(spec, &[logits], tape)?;
    loss_total(&[rm], &[&subset.classes[..]], &full, target, weights, tape)
}

/// Gradient sweep of one loss component w.r.t. all block parameters on a
/// small block with random targets.
fn sweep_loss(component: LossComponent, trials: usize, seed: u64) -> Result<SweepRow> {
    let block_size = 4;
    let classes = 3;
    let spec = ForestSpec::single(block_size, classes, TreeShape::bsp(SdfKind::Line, 2))?;
    let weights = LossWeights::defaults(classes);
    let config = RendererConfig::default();
    let raster = Raster::square(block_size)?;
    let mut rng = block_rng(seed, 1, 1, 0);
    let mut rejected = 0;
    let mut max_err = 0.0f64;

    for _ in 0..trials {
        use rand::RngExt;
        let pixels: Vec<Option<u16>> = (0..block_size * block_size)
            .map(|_| Some(rng.random_range(0..classes as u16)))
            .collect();
        let target = BlockTarget::new(block_size, block_size, classes, pixels)?;
        // reject kink-adjacent probes
        let flat = loop {
            let flat = init_params(&spec, &mut rng).flatten();
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = flat
                .iter()
                .map(|&v| tape.variable(v).expect("finite"))
                .collect();
            let ok = build_block_loss(&tape, &vars, &target, &spec, &weights, config, raster)
                .is_ok()
                && tape.kink_margin() >= KINK_REJECT;
            if ok {
                break flat;
            }
            rejected += 1;
        };
        let err = grad_check(
            |t, vars| {
                let b = build_block_loss(t, vars, &target, &spec, &weights, config, raster)?;
                Ok(match component {
                    LossComponent::CrossEntropy => b.cross_entropy,
                    LossComponent::Purity => b.purity,
                    LossComponent::MinSize => b.min_size,
                    LossComponent::Sharpness => b.sharpness,
                    LossComponent::Total => b.total,
                })
            },
            &flat,
            FD_STEP,
        )?;
        max_err = max_err.max(err);
    }
    Ok(SweepRow {
        name: component.name().to_string(),
        trials,
        rejected,
        max_rel_err: max_err,
    })
}

/// Run the full verification table: every SDF family and the quadtree under
/// both renderer modes, plus every loss component.
pub fn full_sweep(trials: usize, seed: u64) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let modes: [(&str, RendererConfig); 2] = [
        ("refined", RendererConfig::default()),
        ("legacy", RendererConfig::legacy(1.0, 1.0)?),
    ];
    for (mode_name, config) in modes {
        for kind in SdfKind::ALL {
            let tree = TreeShape::bsp(kind, 1);
            rows.push(sweep_tree(
                &format!("{} bsp:{}", mode_name, kind.name()),
                &tree,
                config,
                trials,
                seed,
            )?);
        }
        let quad = TreeShape::quad(1);
        rows.push(sweep_tree(
            &format!("{mode_name} quad"),
            &quad,
            config,
            trials,
            seed,
        )?);
    }
    for component in LossComponent::ALL {
        rows.push(sweep_loss(component, trials, seed)?);
    }
    Ok(rows)
}
