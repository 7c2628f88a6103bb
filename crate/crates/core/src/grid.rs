//! Uniform tensor grids over a bounding box, the domain and refuge masks,
//! the absorption coefficient and distance-based profile fields.
//!
//! Nodes are stored row-major with the first axis varying fastest:
//! `index = iy * nx + ix`. The bounding box always carries at least one layer
//! of exterior nodes around the domain, since nodes lying on a face of the
//! domain box are classified as exterior.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Relative tolerance (in units of the spacing) used to snap nodes onto faces.
const FACE_SNAP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Axis-aligned box, one interval per dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub axes: Vec<Interval>,
}

impl BoxRegion {
    pub fn new(axes: Vec<Interval>) -> Self {
        BoxRegion { axes }
    }

    pub fn interval(lo: f64, hi: f64) -> Self {
        BoxRegion {
            axes: vec![Interval::new(lo, hi)],
        }
    }

    pub fn square(lo: f64, hi: f64) -> Self {
        BoxRegion {
            axes: vec![Interval::new(lo, hi), Interval::new(lo, hi)],
        }
    }

    pub fn dimension(&self) -> usize {
        self.axes.len()
    }

    fn contains_box(&self, other: &BoxRegion) -> bool {
        self.axes
            .iter()
            .zip(&other.axes)
            .all(|(a, b)| b.lo >= a.lo && b.hi <= a.hi)
    }

    fn overlaps_open(&self, other: &BoxRegion) -> bool {
        self.axes
            .iter()
            .zip(&other.axes)
            .all(|(a, b)| a.lo < b.hi && b.lo < a.hi)
    }

    /// Strictly inside, with faces snapped by `tol`.
    pub fn contains_strict(&self, x: &[f64], tol: f64) -> bool {
        self.axes
            .iter()
            .zip(x)
            .all(|(iv, &c)| c > iv.lo + tol && c < iv.hi - tol)
    }

    fn contains_closed(&self, x: &[f64], tol: f64) -> bool {
        self.axes
            .iter()
            .zip(x)
            .all(|(iv, &c)| c >= iv.lo - tol && c <= iv.hi + tol)
    }

    fn scaled(&self, factor: f64) -> BoxRegion {
        BoxRegion {
            axes: self
                .axes
                .iter()
                .map(|iv| Interval::new(iv.lo * factor, iv.hi * factor))
                .collect(),
        }
    }
}

/// Description of the computational domain.
///
/// `nodes_per_axis` counts nodes across the closure of the domain box along
/// the first axis (both faces included), which fixes the spacing
/// `h = |Ω|_x / (nodes_per_axis - 1)`. `collar` adds extra exterior layers
/// beyond the faces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub dimension: usize,
    pub omega: BoxRegion,
    #[serde(default)]
    pub holes: Vec<BoxRegion>,
    pub refuge: BoxRegion,
    pub nodes_per_axis: usize,
    #[serde(default)]
    pub collar: usize,
}

impl DomainSpec {
    pub fn interval(omega: (f64, f64), refuge: (f64, f64), nodes_per_axis: usize) -> Self {
        DomainSpec {
            dimension: 1,
            omega: BoxRegion::interval(omega.0, omega.1),
            holes: Vec::new(),
            refuge: BoxRegion::interval(refuge.0, refuge.1),
            nodes_per_axis,
            collar: 0,
        }
    }

    pub fn square(omega: (f64, f64), refuge: (f64, f64), nodes_per_axis: usize) -> Self {
        DomainSpec {
            dimension: 2,
            omega: BoxRegion::square(omega.0, omega.1),
            holes: Vec::new(),
            refuge: BoxRegion::square(refuge.0, refuge.1),
            nodes_per_axis,
            collar: 0,
        }
    }

    /// The default 1D setting: Ω = (-1, 1), Ω₀ = (-0.4, 0.4), 201 nodes.
    pub fn default_1d() -> Self {
        Self::interval((-1.0, 1.0), (-0.4, 0.4), 201)
    }

    /// Same node count, every length multiplied by `factor`.
    pub fn dilated(&self, factor: f64) -> Self {
        DomainSpec {
            dimension: self.dimension,
            omega: self.omega.scaled(factor),
            holes: self.holes.iter().map(|h| h.scaled(factor)).collect(),
            refuge: self.refuge.scaled(factor),
            nodes_per_axis: self.nodes_per_axis,
            collar: self.collar,
        }
    }

    pub fn with_collar(mut self, collar: usize) -> Self {
        self.collar = collar;
        self
    }
}

/// A set of grid nodes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeMask(Vec<bool>);

impl NodeMask {
    pub fn new(bits: Vec<bool>) -> Self {
        NodeMask(bits)
    }

    pub fn empty(len: usize) -> Self {
        NodeMask(vec![false; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, value: bool) {
        self.0[i] = value;
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn is_subset_of(&self, other: &NodeMask) -> bool {
        self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }

    pub fn and(&self, other: &NodeMask) -> NodeMask {
        NodeMask(self.0.iter().zip(&other.0).map(|(&a, &b)| a && b).collect())
    }

    pub fn and_not(&self, other: &NodeMask) -> NodeMask {
        NodeMask(self.0.iter().zip(&other.0).map(|(&a, &b)| a && !b).collect())
    }

    pub fn or(&self, other: &NodeMask) -> NodeMask {
        NodeMask(self.0.iter().zip(&other.0).map(|(&a, &b)| a || b).collect())
    }

    /// Run-length encoding such as `F3T10F3`.
    pub fn to_rle(&self) -> String {
        let mut out = String::new();
        let mut iter = self.0.iter().peekable();
        while let Some(&bit) = iter.next() {
            let mut run = 1usize;
            while iter.peek() == Some(&&bit) {
                iter.next();
                run += 1;
            }
            let _ = write!(out, "{}{}", if bit { 'T' } else { 'F' }, run);
        }
        out
    }

    pub fn from_rle(text: &str) -> Option<NodeMask> {
        let mut bits = Vec::new();
        let mut chars = text.chars().peekable();
        while let Some(c) = chars.next() {
            let bit = match c {
                'T' => true,
                'F' => false,
                _ => return None,
            };
            let mut digits = String::new();
            while let Some(d) = chars.peek().filter(|d| d.is_ascii_digit()) {
                digits.push(*d);
                chars.next();
            }
            let run: usize = digits.parse().ok()?;
            bits.extend(std::iter::repeat_n(bit, run));
        }
        Some(NodeMask(bits))
    }
}

/// Uniform grid over a bounding box with domain and refuge masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    spec: DomainSpec,
    dimension: usize,
    spacing: f64,
    shape: [usize; 2],
    origin: [f64; 2],
    interior: NodeMask,
    refuge: NodeMask,
}

/// Builds the grid for `spec`, validating every structural invariant.
pub fn build_grid(spec: &DomainSpec) -> Result<Arc<Grid>> {
    Grid::new(spec).map(Arc::new)
}

impl Grid {
    pub fn new(spec: &DomainSpec) -> Result<Grid> {
        let d = spec.dimension;
        if d != 1 && d != 2 {
            return Err(Error::InvalidGrid(format!("dimension must be 1 or 2, got {d}")));
        }
        let boxes = std::iter::once(&spec.omega)
            .chain(std::iter::once(&spec.refuge))
            .chain(&spec.holes);
        for b in boxes {
            if b.dimension() != d {
                return Err(Error::InvalidGrid(format!(
                    "box has {} axes, expected {d}",
                    b.dimension()
                )));
            }
            if b.axes
                .iter()
                .any(|iv| !(iv.lo < iv.hi) || !iv.lo.is_finite() || !iv.hi.is_finite())
            {
                return Err(Error::InvalidGrid(format!("degenerate box {:?}", b.axes)));
            }
        }
        if spec.nodes_per_axis < 8 {
            return Err(Error::InvalidGrid(format!(
                "need at least 8 nodes per axis across the domain, got {}",
                spec.nodes_per_axis
            )));
        }
        if !spec.omega.contains_box(&spec.refuge) {
            return Err(Error::InvalidGrid(
                "refuge box is not contained in the domain box".into(),
            ));
        }
        if spec.holes.iter().any(|h| h.overlaps_open(&spec.refuge)) {
            return Err(Error::InvalidGrid("refuge box intersects a hole of the domain".into()));
        }

        let h = spec.omega.axes[0].length() / (spec.nodes_per_axis - 1) as f64;
        let mut shape = [1usize; 2];
        let mut origin = [0.0f64; 2];
        for (axis, iv) in spec.omega.axes.iter().enumerate() {
            let cells = iv.length() / h;
            let rounded = cells.round();
            if (cells - rounded).abs() > 1e-6 {
                return Err(Error::InvalidGrid(format!(
                    "axis {axis} length {} is not a multiple of the spacing {h}",
                    iv.length()
                )));
            }
            shape[axis] = rounded as usize + 1 + 2 * spec.collar;
            origin[axis] = iv.lo - spec.collar as f64 * h;
        }

        let n = shape[0] * shape[1];
        let mut interior = NodeMask::empty(n);
        let mut refuge = NodeMask::empty(n);
        let tol = FACE_SNAP * h;
        for idx in 0..n {
            let x = node_coords(idx, d, shape, origin, h);
            let x = &x[..d];
            let inside =
                spec.omega.contains_strict(x, tol) && !spec.holes.iter().any(|hole| hole.contains_closed(x, tol));
            if inside {
                interior.set(idx, true);
                if spec.refuge.contains_strict(x, tol) {
                    refuge.set(idx, true);
                }
            }
        }

        if refuge.count() == 0 {
            return Err(Error::InvalidGrid(
                "resolution too coarse: the refuge contains no node".into(),
            ));
        }
        if interior.and_not(&refuge).count() == 0 {
            return Err(Error::InvalidGrid(
                "every interior node lies in the refuge; need |Ω \\ Ω₀| > 0".into(),
            ));
        }

        Ok(Grid {
            spec: spec.clone(),
            dimension: d,
            spacing: h,
            shape,
            origin,
            interior,
            refuge,
        })
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dimension as i32)
    }

    /// Nodes per axis (the second entry is 1 in 1D).
    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn node_count(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn coords(&self, idx: usize) -> [f64; 2] {
        node_coords(idx, self.dimension, self.shape, self.origin, self.spacing)
    }

    /// Integer lattice position of a node.
    pub fn lattice(&self, idx: usize) -> [usize; 2] {
        [idx % self.shape[0], idx / self.shape[0]]
    }

    pub fn interior_mask(&self) -> &NodeMask {
        &self.interior
    }

    pub fn refuge_mask(&self) -> &NodeMask {
        &self.refuge
    }

    pub fn exterior_mask(&self) -> NodeMask {
        NodeMask(self.interior.0.iter().map(|&b| !b).collect())
    }

    /// The bounding box covered by the node cells, i.e. the node extent
    /// widened by half a cell on every side. Beyond it the field vanishes
    /// identically and the operator uses an analytic tail.
    pub fn bounding_box(&self) -> BoxRegion {
        let half = 0.5 * self.spacing;
        BoxRegion {
            axes: (0..self.dimension)
                .map(|a| {
                    let lo = self.origin[a] - half;
                    let hi = self.origin[a] + (self.shape[a] - 1) as f64 * self.spacing + half;
                    Interval::new(lo, hi)
                })
                .collect(),
        }
    }

    /// Mask of interior nodes strictly inside `region`.
    pub fn mask_in_box(&self, region: &BoxRegion) -> NodeMask {
        let tol = FACE_SNAP * self.spacing;
        let mut mask = NodeMask::empty(self.node_count());
        for idx in self.interior.indices() {
            let x = self.coords(idx);
            if region.contains_strict(&x[..self.dimension], tol) {
                mask.set(idx, true);
            }
        }
        mask
    }

    /// Stable content hash of the discretization (shape, spacing, masks).
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.dimension as u64).to_le_bytes());
        for s in self.shape {
            hasher.update((s as u64).to_le_bytes());
        }
        for o in self.origin {
            hasher.update(o.to_bits().to_le_bytes());
        }
        hasher.update(self.spacing.to_bits().to_le_bytes());
        hasher.update(self.interior.to_rle().as_bytes());
        hasher.update(b"|");
        hasher.update(self.refuge.to_rle().as_bytes());
        let digest = hasher.finalize();
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn metadata(&self) -> GridMetadata {
        let bbox = self.bounding_box();
        GridMetadata {
            dimension: self.dimension,
            h: self.spacing,
            shape: self.shape[..self.dimension].to_vec(),
            bounding_box: bbox.axes.iter().map(|iv| [iv.lo, iv.hi]).collect(),
            interior_rle: self.interior.to_rle(),
            refuge_rle: self.refuge.to_rle(),
            hash: self.content_hash(),
            distance_model: "node-to-node Euclidean distances, O(h) accurate".into(),
        }
    }
}

fn node_coords(idx: usize, d: usize, shape: [usize; 2], origin: [f64; 2], h: f64) -> [f64; 2] {
    let ix = idx % shape[0];
    let iy = idx / shape[0];
    let x = origin[0] + ix as f64 * h;
    let y = if d == 2 { origin[1] + iy as f64 * h } else { 0.0 };
    [x, y]
}

/// Grid description embedded in JSON run summaries.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridMetadata {
    pub dimension: usize,
    pub h: f64,
    pub shape: Vec<usize>,
    pub bounding_box: Vec<[f64; 2]>,
    pub interior_rle: String,
    pub refuge_rle: String,
    pub hash: String,
    pub distance_model: String,
}

/// Real values on the grid nodes, identically zero outside the domain.
#[derive(Clone, Debug)]
pub struct Field {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl PartialEq for Field {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values && *self.grid == *other.grid
    }
}

impl Field {
    pub fn zeros(grid: &Arc<Grid>) -> Field {
        Field {
            grid: Arc::clone(grid),
            values: vec![0.0; grid.node_count()],
        }
    }

    /// Validates length, finiteness and the exterior condition.
    pub fn from_values(grid: &Arc<Grid>, values: Vec<f64>) -> Result<Field> {
        if values.len() != grid.node_count() {
            return Err(Error::LengthMismatch {
                expected: grid.node_count(),
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidField(format!("non-finite value at node {i}")));
        }
        let interior = grid.interior_mask();
        if let Some(i) = (0..values.len()).find(|&i| !interior.get(i) && values[i] != 0.0) {
            return Err(Error::InvalidField(format!(
                "nonzero value {} at exterior node {i}",
                values[i]
            )));
        }
        Ok(Field {
            grid: Arc::clone(grid),
            values,
        })
    }

    /// Evaluates `f` at interior nodes, zero elsewhere.
    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Field {
        let d = grid.dimension();
        let values = (0..grid.node_count())
            .map(|i| {
                if grid.interior_mask().get(i) {
                    f(&grid.coords(i)[..d])
                } else {
                    0.0
                }
            })
            .collect();
        Field {
            grid: Arc::clone(grid),
            values,
        }
    }

    /// Scatters values given at `nodes` into an otherwise zero field.
    pub fn from_compact(grid: &Arc<Grid>, nodes: &[usize], compact: &[f64]) -> Field {
        let mut values = vec![0.0; grid.node_count()];
        for (&node, &v) in nodes.iter().zip(compact) {
            values[node] = v;
        }
        Field {
            grid: Arc::clone(grid),
            values,
        }
    }

    pub fn gather(&self, nodes: &[usize]) -> Vec<f64> {
        nodes.iter().map(|&i| self.values[i]).collect()
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn same_grid(&self, other: &Field) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    pub fn scaled(&self, c: f64) -> Field {
        Field {
            grid: Arc::clone(&self.grid),
            values: self.values.iter().map(|v| c * v).collect(),
        }
    }

    /// Zeroes every node outside `mask`.
    pub fn restricted(&self, mask: &NodeMask) -> Field {
        Field {
            grid: Arc::clone(&self.grid),
            values: self
                .values
                .iter()
                .enumerate()
                .map(|(i, &v)| if mask.get(i) { v } else { 0.0 })
                .collect(),
        }
    }

    pub fn zip_with(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        Field {
            grid: Arc::clone(&self.grid),
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn linf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_on(&self, mask: &NodeMask) -> f64 {
        mask.indices()
            .into_iter()
            .map(|i| self.values[i])
            .fold(f64::INFINITY, f64::min)
    }

    /// Discrete `L^m` norm over `mask` with cell-volume weights.
    pub fn lm_norm_on(&self, m: f64, mask: &NodeMask) -> f64 {
        let sum: f64 = mask.indices().into_iter().map(|i| self.values[i].abs().powf(m)).sum();
        (sum * self.grid.cell_volume()).powf(1.0 / m)
    }

    pub fn l2(&self) -> f64 {
        self.lm_norm_on(2.0, self.grid.interior_mask())
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }
}

/// The absorption coefficient: `b0` on Ω \ Ω₀, zero on the refuge and outside.
pub fn build_absorption(grid: &Arc<Grid>, amplitude: f64) -> Result<Field> {
    if !(amplitude > 0.0) || !amplitude.is_finite() {
        return Err(Error::param("b0", format!("must be positive, got {amplitude}")));
    }
    let support = grid.interior_mask().and_not(grid.refuge_mask());
    let values = (0..grid.node_count())
        .map(|i| if support.get(i) { amplitude } else { 0.0 })
        .collect();
    Field::from_values(grid, values)
}

/// `d(x, M^c)^s` on the nodes of `target`, zero elsewhere, where the distance
/// is measured to the nearest grid node outside `target`.
///
/// Computed with a separable exact Euclidean distance transform.
pub fn distance_profile(grid: &Arc<Grid>, target: &NodeMask, exponent: f64) -> Result<Field> {
    if target.len() != grid.node_count() {
        return Err(Error::LengthMismatch {
            expected: grid.node_count(),
            actual: target.len(),
        });
    }
    if target.count() == 0 {
        return Err(Error::param("target_mask", "must be nonempty"));
    }
    if target.count() == target.len() {
        return Err(Error::param("target_mask", "must leave at least one node outside"));
    }
    let [nx, ny] = grid.shape();
    // Squared distances in lattice units; BIG stands in for infinity.
    const BIG: f64 = 1e20;
    let mut sq: Vec<f64> = target
        .as_slice()
        .iter()
        .map(|&inside| if inside { BIG } else { 0.0 })
        .collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    for iy in 0..ny {
        line.clear();
        line.extend_from_slice(&sq[iy * nx..(iy + 1) * nx]);
        squared_distance_1d(&line, &mut out);
        sq[iy * nx..(iy + 1) * nx].copy_from_slice(&out);
    }
    if ny > 1 {
        for ix in 0..nx {
            line.clear();
            line.extend((0..ny).map(|iy| sq[iy * nx + ix]));
            squared_distance_1d(&line, &mut out);
            for (iy, v) in out.iter().enumerate() {
                sq[iy * nx + ix] = *v;
            }
        }
    }
    let h = grid.spacing();
    let values: Vec<f64> = (0..grid.node_count())
        .map(|i| {
            if target.get(i) && grid.interior_mask().get(i) {
                (sq[i].sqrt() * h).powf(exponent)
            } else {
                0.0
            }
        })
        .collect();
    Field::from_values(grid, values)
}

/// Lower envelope of parabolas (Felzenszwalb–Huttenlocher).
fn squared_distance_1d(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, 0.0);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: the new parabola dominates the whole prefix
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *o = dq * dq + f[p];
    }
}
