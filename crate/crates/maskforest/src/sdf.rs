//! Signed distance functions for the partition boundaries of inner nodes.
//!
//! Six geometric families (line, square, circle, ellipse, hyperbola,
//! parabola) plus axis-threshold splits for k-d style trees. All functions
//! are evaluated in block-normalized coordinates where each axis of a block
//! spans [-1, 1]. Several families are pseudo distances: the sign is what
//! partitions, the magnitude only has to grow monotonically away from the
//! boundary.

use crate::error::{Error, Result};
use crate::grad::Scalar;

/// Guard added under square roots so gradients stay finite when a sample
/// point coincides with a focus.
const NORM_GUARD: f64 = 1e-12;

/// Fixed split dimension of a k-d node. `X` thresholds the first coordinate,
/// `Y` the second.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
}

/// Boundary family of a partitioning node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SdfKind {
    /// `n . p - d`; n is not normalized, the parameters scale freely.
    Line,
    /// Chebyshev distance to a square of half-size `s` centered at `x`.
    Square,
    /// `|x - p|^2 - r`; the squared-norm form avoids the root, so `r`
    /// plays the role of the squared radius. `r` is left unconstrained; a
    /// negative value simply makes the function positive everywhere.
    Circle,
    /// Two foci and a size constant: boundary at `d1 + d2 = c`.
    Ellipse,
    /// Two foci: boundary at `|d1 - d2| = c`.
    Hyperbola,
    /// Focus point plus directrix line: boundary at `d_point = d_line`.
    Parabola,
    /// Fixed-axis threshold split, `t - p_axis`.
    KdAxis(Axis),
    /// Axis split where the axis itself is learned via a two-way softmax
    /// gate: `t - (a1 p1 + a2 p2)` with `(a1, a2) = softmax(g1, g2)`.
    DynKd,
}

impl SdfKind {
    pub const ALL: [SdfKind; 9] = [
        SdfKind::Line,
        SdfKind::Square,
        SdfKind::Circle,
        SdfKind::Ellipse,
        SdfKind::Hyperbola,
        SdfKind::Parabola,
        SdfKind::KdAxis(Axis::X),
        SdfKind::KdAxis(Axis::Y),
        SdfKind::DynKd,
    ];

    /// Number of learnable parameters of this family.
    pub fn parameter_count(self) -> usize {
        match self {
            SdfKind::Line | SdfKind::Square | SdfKind::Circle => 3,
            SdfKind::Ellipse | SdfKind::Hyperbola | SdfKind::Parabola => 5,
            SdfKind::KdAxis(_) => 1,
            SdfKind::DynKd => 3,
        }
    }

    /// Stable one-byte code used by the forest file format.
    pub fn code(self) -> char {
        match self {
            SdfKind::Line => 'L',
            SdfKind::Square => 'S',
            SdfKind::Circle => 'C',
            SdfKind::Ellipse => 'E',
            SdfKind::Hyperbola => 'H',
            SdfKind::Parabola => 'P',
            SdfKind::KdAxis(Axis::X) => 'X',
            SdfKind::KdAxis(Axis::Y) => 'Y',
            SdfKind::DynKd => 'D',
        }
    }

    pub fn from_code(code: char) -> Option<SdfKind> {
        Some(match code {
            'L' => SdfKind::Line,
            'S' => SdfKind::Square,
            'C' => SdfKind::Circle,
            'E' => SdfKind::Ellipse,
            'H' => SdfKind::Hyperbola,
            'P' => SdfKind::Parabola,
            'X' => SdfKind::KdAxis(Axis::X),
            'Y' => SdfKind::KdAxis(Axis::Y),
            'D' => SdfKind::DynKd,
            _ => return None,
        })
    }

    /// Name accepted by the CLI tree DSL.
    pub fn name(self) -> &'static str {
        match self {
            SdfKind::Line => "line",
            SdfKind::Square => "square",
            SdfKind::Circle => "circle",
            SdfKind::Ellipse => "ellipse",
            SdfKind::Hyperbola => "hyperbola",
            SdfKind::Parabola => "parabola",
            SdfKind::KdAxis(Axis::X) => "kdx",
            SdfKind::KdAxis(Axis::Y) => "kdy",
            SdfKind::DynKd => "dynkd",
        }
    }

    pub fn from_name(name: &str) -> Option<SdfKind> {
        Some(match name {
            "line" => SdfKind::Line,
            "square" => SdfKind::Square,
            "circle" => SdfKind::Circle,
            "ellipse" => SdfKind::Ellipse,
            "hyperbola" => SdfKind::Hyperbola,
            "parabola" => SdfKind::Parabola,
            "kdx" | "kd1" => SdfKind::KdAxis(Axis::X),
            "kdy" | "kd2" => SdfKind::KdAxis(Axis::Y),
            "dynkd" => SdfKind::DynKd,
            _ => return None,
        })
    }
}

/// A sample point in block-normalized coordinates (each axis in [-1, 1]).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub p1: f64,
    pub p2: f64,
}

impl Point {
    pub fn new(p1: f64, p2: f64) -> Point {
        Point { p1, p2 }
    }

    /// Center of pixel (x, y) on a width x height raster covering the block:
    /// ((2x+1)/W - 1, (2y+1)/H - 1).
    pub fn pixel_center(x: usize, y: usize, width: usize, height: usize) -> Point {
        Point {
            p1: (2 * x + 1) as f64 / width as f64 - 1.0,
            p2: (2 * y + 1) as f64 / height as f64 - 1.0,
        }
    }
}

/// `sqrt(dx^2 + dy^2)` with the argument floored at [`NORM_GUARD`].
fn norm<N: Scalar>(dx: N, dy: N, ctx: N::Ctx) -> N {
    let ss = dx.square() + dy.square();
    ss.max2(N::lift(ctx, NORM_GUARD)).sqrt()
}

/// Evaluate the signed distance of `kind` with `params` at `p`.
///
/// Parameter layouts: Line `[n1, n2, d]`, Square `[x1, x2, s]`, Circle
/// `[x1, x2, r]`, Ellipse/Hyperbola `[x1, x2, y1, y2, c]`, Parabola
/// `[x1, x2, n1, n2, d]`, KdAxis `[t]`, DynKd `[t, g1, g2]`.
pub fn eval_sdf<N: Scalar>(kind: SdfKind, params: &[N], ctx: N::Ctx, p: Point) -> Result<N> {
    if params.len() != kind.parameter_count() {
        return Err(Error::contract(format!(
            "{kind:?} takes {} parameters, got {}",
            kind.parameter_count(),
            params.len()
        )));
    }
    let p1 = N::lift(ctx, p.p1);
    let p2 = N::lift(ctx, p.p2);
    Ok(match kind {
        SdfKind::Line => params[0] * p1 + params[1] * p2 - params[2],
        SdfKind::Square => {
            let dx = (params[0] - p1).abs();
            let dy = (params[1] - p2).abs();
            dx.max2(dy) - params[2]
        }
        SdfKind::Circle => (params[0] - p1).square() + (params[1] - p2).square() - params[2],
        SdfKind::Ellipse => {
            let d1 = norm(params[0] - p1, params[1] - p2, ctx);
            let d2 = norm(params[2] - p1, params[3] - p2, ctx);
            d1 + d2 - params[4]
        }
        SdfKind::Hyperbola => {
            let d1 = norm(params[0] - p1, params[1] - p2, ctx);
            let d2 = norm(params[2] - p1, params[3] - p2, ctx);
            (d1 - d2).abs() - params[4]
        }
        SdfKind::Parabola => {
            let d_focus = norm(params[0] - p1, params[1] - p2, ctx);
            let d_line = params[2] * p1 + params[3] * p2 - params[4];
            d_focus - d_line
        }
        SdfKind::KdAxis(axis) => {
            let coord = match axis {
                Axis::X => p1,
                Axis::Y => p2,
            };
            params[0] - coord
        }
        SdfKind::DynKd => {
            let a1 = (params[1] - params[2]).sigmoid();
            let a2 = N::lift(ctx, 1.0) - a1;
            params[0] - (a1 * p1 + a2 * p2)
        }
    })
}
