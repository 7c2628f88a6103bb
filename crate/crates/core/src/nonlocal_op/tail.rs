//! Kernel mass beyond the bounding box,
//! `ζ(x) = ∫_{y ∉ box} |x - y|^{-(d+sp)} dy`.
//!
//! In polar coordinates around `x` the radial integral is explicit,
//! `ζ(x) = (1/sp) ∫_{S^{d-1}} ρ(θ)^{-sp} dθ`, where `ρ(θ)` is the distance
//! from `x` to the box boundary along `θ`. In 1D the sphere is two points.
//! In 2D the circle splits into four sectors, one per face; on the sector
//! of a face at distance `δ` we have `ρ = δ / cos φ` with `φ` measured from
//! the face normal, and each half-sector is a smooth integral of `cos^{sp}`.

use crate::grid::{BoxRegion, Grid};
use crate::quadrature::Rule;

const ANGULAR_NODES: usize = 64;

/// Tail weight of every grid node against the grid's bounding box.
pub fn tail_weights(grid: &Grid, sp: f64) -> Vec<f64> {
    let bbox = grid.bounding_box();
    let d = grid.dimension();
    let rule = Rule::new(ANGULAR_NODES);
    (0..grid.node_count())
        .map(|i| {
            let x = grid.coords(i);
            match d {
                1 => tail_1d(&bbox, x[0], sp),
                _ => tail_2d(&bbox, x, sp, &rule),
            }
        })
        .collect()
}

pub(crate) fn tail_1d(bbox: &BoxRegion, x: f64, sp: f64) -> f64 {
    let iv = bbox.axes[0];
    ((iv.hi - x).powf(-sp) + (x - iv.lo).powf(-sp)) / sp
}

pub(crate) fn tail_2d(bbox: &BoxRegion, x: [f64; 2], sp: f64, rule: &Rule) -> f64 {
    let (ax, ay) = (bbox.axes[0], bbox.axes[1]);
    let left = x[0] - ax.lo;
    let right = ax.hi - x[0];
    let below = x[1] - ay.lo;
    let above = ay.hi - x[1];
    // (distance to face, distances to the two adjacent faces)
    let faces = [
        (right, below, above),
        (left, below, above),
        (above, left, right),
        (below, left, right),
    ];
    let half_sector = |alpha: f64| rule.integrate(0.0, alpha, |phi: f64| phi.cos().powf(sp));
    faces
        .iter()
        .map(|&(dist, a, b)| dist.powf(-sp) * (half_sector((a / dist).atan()) + half_sector((b / dist).atan())))
        .sum::<f64>()
        / sp
}
