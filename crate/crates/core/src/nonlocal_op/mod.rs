//! Discrete fractional p-Laplacian with exterior Dirichlet condition.
//!
//! For interior nodes `i`,
//!
//! ```text
//! (Lu)_i = 2 [ Σ_{j ≠ i} w_ij Φ_p(u_i - u_j) + ζ_i Φ_p(u_i) ],   w_ij = h^d / |x_i - x_j|^{d+sp}
//! ```
//!
//! where the sum runs over every node of the bounding box and `ζ_i` is the
//! analytic kernel mass beyond it. Since `u` vanishes on exterior nodes, the
//! operator only stores weights between active nodes (packed upper triangle)
//! and folds the exterior in-box nodes into a per-node `collar` sum.
//!
//! The matching energy is
//! `‖u‖^p = h^d [ 2 Σ_{i<j} w_ij |u_i - u_j|^p + 2 Σ_i (collar_i + ζ_i) |u_i|^p ]`
//! so that `∂/∂u_i (‖u‖^p / p) = h^d (Lu)_i`.

mod cache;
mod inequalities;
mod tail;

use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid, NodeMask};

pub use cache::{assemble_cached, cache_file_name};
pub use inequalities::{check_algebraic_inequalities, inequality_constants, InequalityReport};
pub use tail::tail_weights;

/// Number of row blocks used by the parallel traversal. Fixed so that the
/// reduction order does not depend on the thread count.
const PARALLEL_BLOCKS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorParams {
    pub s: f64,
    pub p: f64,
}

impl OperatorParams {
    pub fn new(s: f64, p: f64) -> Result<Self> {
        let params = OperatorParams { s, p };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s < 1.0) {
            return Err(Error::param("s", format!("must lie in (0, 1), got {}", self.s)));
        }
        if !(self.p > 1.0) || !self.p.is_finite() {
            return Err(Error::param("p", format!("must exceed 1, got {}", self.p)));
        }
        Ok(())
    }

    pub fn sp(&self) -> f64 {
        self.s * self.p
    }
}

/// `Φ_m(t) = |t|^{m-2} t`.
#[inline]
pub fn phi(m: f64, t: f64) -> f64 {
    if t == 0.0 {
        0.0
    } else {
        t * t.abs().powf(m - 2.0)
    }
}

/// Assembled operator on a set of active nodes (the interior by default).
#[derive(Clone, Debug)]
pub struct NonlocalOperator {
    params: OperatorParams,
    grid: Arc<Grid>,
    active: Vec<usize>,
    active_mask: NodeMask,
    weights: Vec<f64>,
    collar: Vec<f64>,
    tail: Vec<f64>,
    blocks: Vec<Range<usize>>,
    parallel: bool,
}

impl NonlocalOperator {
    /// Assembles the operator over the interior nodes of `grid`.
    pub fn assemble(grid: &Arc<Grid>, params: OperatorParams) -> Result<Self> {
        Self::assemble_on(grid, params, grid.interior_mask())
    }

    /// Operator for the problem posed on `mask` alone: every node outside
    /// the mask is treated as exterior.
    pub fn restricted(&self, mask: &NodeMask) -> Result<Self> {
        let mask = self.active_mask.and(mask);
        let mut op = Self::assemble_on(&self.grid, self.params, &mask)?;
        op.parallel = self.parallel;
        Ok(op)
    }

    fn assemble_on(grid: &Arc<Grid>, params: OperatorParams, mask: &NodeMask) -> Result<Self> {
        params.validate()?;
        if mask.len() != grid.node_count() {
            return Err(Error::LengthMismatch {
                expected: grid.node_count(),
                actual: mask.len(),
            });
        }
        let active = mask.and(grid.interior_mask()).indices();
        if active.is_empty() {
            return Err(Error::param("mask", "selects no interior node"));
        }
        let table = OffsetTable::new(grid, params.sp())?;
        let n = active.len();
        let lattice: Vec<[usize; 2]> = active.iter().map(|&i| grid.lattice(i)).collect();

        let mut weights = vec![0.0; n * (n - 1) / 2];
        let mut offset = 0;
        for a in 0..n {
            let la = lattice[a];
            for lb in &lattice[a + 1..] {
                weights[offset] = table.get(la, *lb);
                offset += 1;
            }
        }

        let active_set = NodeMask::new({
            let mut bits = vec![false; grid.node_count()];
            for &i in &active {
                bits[i] = true;
            }
            bits
        });
        let outside: Vec<[usize; 2]> = (0..grid.node_count())
            .filter(|&j| !active_set.get(j))
            .map(|j| grid.lattice(j))
            .collect();
        let collar: Vec<f64> = lattice
            .iter()
            .map(|&la| outside.iter().map(|&lb| table.get(la, lb)).sum())
            .collect();

        let all_tails = tail_weights(grid, params.sp());
        let tail: Vec<f64> = active.iter().map(|&i| all_tails[i]).collect();
        if let Some(bad) = tail.iter().chain(&collar).find(|v| !v.is_finite()) {
            return Err(Error::WeightOverflow(format!("tail or collar weight {bad}")));
        }

        Ok(NonlocalOperator {
            params,
            grid: Arc::clone(grid),
            blocks: balanced_blocks(n, PARALLEL_BLOCKS),
            active,
            active_mask: active_set,
            weights,
            collar,
            tail,
            parallel: false,
        })
    }

    /// Rebuilds an operator from stored parts (cache loading).
    fn from_parts(
        grid: &Arc<Grid>,
        params: OperatorParams,
        weights: Vec<f64>,
        tail: Vec<f64>,
        collar: Vec<f64>,
    ) -> Self {
        let active = grid.interior_mask().indices();
        let n = active.len();
        NonlocalOperator {
            params,
            grid: Arc::clone(grid),
            blocks: balanced_blocks(n, PARALLEL_BLOCKS),
            active_mask: grid.interior_mask().clone(),
            active,
            weights,
            collar,
            tail,
            parallel: false,
        }
    }

    /// Enables the block-parallel traversal. Results are deterministic for
    /// any thread count but differ from the sequential pass at rounding level.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn is_parallel(&self) -> bool {
        self.parallel
    }

    pub fn params(&self) -> OperatorParams {
        self.params
    }

    pub fn p(&self) -> f64 {
        self.params.p
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// Grid indices of the active nodes, in increasing order.
    pub fn active_nodes(&self) -> &[usize] {
        &self.active
    }

    pub fn active_mask(&self) -> &NodeMask {
        &self.active_mask
    }

    /// Number of active nodes.
    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn cell_volume(&self) -> f64 {
        self.grid.cell_volume()
    }

    /// Stored weight between active nodes `a < b` (compact indices).
    pub fn pair_weight(&self, a: usize, b: usize) -> f64 {
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        assert!(a != b, "self-pairs carry no weight");
        self.weights[row_start(a, self.len()) + (b - a - 1)]
    }

    pub fn packed_weights(&self) -> &[f64] {
        &self.weights
    }

    /// Beyond-box tail weight per active node.
    pub fn tail(&self) -> &[f64] {
        &self.tail
    }

    /// Summed weight towards inactive in-box nodes, per active node.
    pub fn collar(&self) -> &[f64] {
        &self.collar
    }

    /// Total kernel mass seen by each active node,
    /// `Σ_j w_ij + collar_i + ζ_i`; for `p = 2` this is half the matrix diagonal.
    pub fn total_weights(&self) -> Vec<f64> {
        let n = self.len();
        let mut sums: Vec<f64> = self.collar.iter().zip(&self.tail).map(|(c, z)| c + z).collect();
        for i in 0..n {
            let start = row_start(i, n);
            for (k, &w) in self.weights[start..start + (n - 1 - i)].iter().enumerate() {
                sums[i] += w;
                sums[i + 1 + k] += w;
            }
        }
        sums
    }

    /// Dense Jacobian of `u ↦ Lu` on active nodes, row-major. Requires
    /// `p ≥ 2` (for `p < 2` the derivative is unbounded at equal values).
    pub fn jacobian_dense(&self, u: &[f64]) -> Vec<f64> {
        assert!(self.params.p >= 2.0, "Jacobian needs p >= 2");
        let n = self.len();
        let p = self.params.p;
        let dphi = |t: f64| {
            if p == 2.0 {
                1.0
            } else {
                (p - 1.0) * t.abs().powf(p - 2.0)
            }
        };
        let mut jac = vec![0.0; n * n];
        for i in 0..n {
            let start = row_start(i, n);
            for (k, &w) in self.weights[start..start + (n - 1 - i)].iter().enumerate() {
                let j = i + 1 + k;
                let e = 2.0 * w * dphi(u[i] - u[j]);
                jac[i * n + j] -= e;
                jac[j * n + i] -= e;
                jac[i * n + i] += e;
                jac[j * n + j] += e;
            }
            jac[i * n + i] += 2.0 * (self.collar[i] + self.tail[i]) * dphi(u[i]);
        }
        jac
    }

    /// Values of `u` on the active nodes.
    pub fn gather(&self, u: &Field) -> Result<Vec<f64>> {
        self.check_field(u)?;
        Ok(u.gather(&self.active))
    }

    pub fn scatter(&self, compact: &[f64]) -> Field {
        Field::from_compact(&self.grid, &self.active, compact)
    }

    fn check_field(&self, u: &Field) -> Result<()> {
        if !Arc::ptr_eq(u.grid(), &self.grid) && **u.grid() != *self.grid {
            return Err(Error::GridMismatch);
        }
        if let Some(i) = (0..u.values().len()).find(|&i| !self.active_mask.get(i) && u.values()[i] != 0.0) {
            return Err(Error::InvalidField(format!(
                "nonzero value at node {i} outside the operator's domain"
            )));
        }
        Ok(())
    }

    pub fn apply(&self, u: &Field) -> Result<Field> {
        let compact = self.gather(u)?;
        let mut out = vec![0.0; self.len()];
        self.apply_compact(&compact, &mut out);
        Ok(self.scatter(&out))
    }

    pub fn gagliardo_energy(&self, u: &Field) -> Result<f64> {
        let compact = self.gather(u)?;
        Ok(self.energy_compact(&compact))
    }

    /// `out = L u` on active nodes.
    pub fn apply_compact(&self, u: &[f64], out: &mut [f64]) {
        self.energy_and_apply(u, out);
    }

    /// Returns `‖u‖^p` and writes `L u` into `out` in one traversal.
    pub fn energy_and_apply(&self, u: &[f64], out: &mut [f64]) -> f64 {
        assert_eq!(u.len(), self.len());
        assert_eq!(out.len(), self.len());
        let p = self.params.p;
        if p == 2.0 {
            self.fused(u, out, |t| t)
        } else if p == 3.0 {
            self.fused(u, out, |t| t * t.abs())
        } else {
            self.fused(u, out, move |t| phi(p, t))
        }
    }

    /// `‖u‖^p` alone.
    pub fn energy_compact(&self, u: &[f64]) -> f64 {
        assert_eq!(u.len(), self.len());
        let p = self.params.p;
        let n = self.len();
        let pow = |t: f64| if p == 2.0 { t * t } else { t.abs().powf(p) };
        let mut pairs = 0.0;
        for (i, &ui) in u.iter().enumerate() {
            let row = &self.weights[row_start(i, n)..row_start(i, n) + (n - 1 - i)];
            pairs += row
                .iter()
                .zip(&u[i + 1..])
                .map(|(&w, &uj)| w * pow(ui - uj))
                .sum::<f64>();
        }
        let ext: f64 = u
            .iter()
            .zip(self.collar.iter().zip(&self.tail))
            .map(|(&ui, (&c, &z))| (c + z) * pow(ui))
            .sum();
        2.0 * self.cell_volume() * (pairs + ext)
    }

    fn fused<F: Fn(f64) -> f64 + Sync>(&self, u: &[f64], out: &mut [f64], phi: F) -> f64 {
        let n = self.len();
        let pairs = if self.parallel && n > 64 {
            let partial: Vec<(Vec<f64>, f64)> = self
                .blocks
                .par_iter()
                .map(|rows| {
                    let mut local = vec![0.0; n];
                    let e = self.pair_pass(u, rows.clone(), &mut local, &phi);
                    (local, e)
                })
                .collect();
            out.iter_mut().for_each(|o| *o = 0.0);
            let mut e = 0.0;
            for (local, le) in &partial {
                for (o, l) in out.iter_mut().zip(local) {
                    *o += l;
                }
                e += le;
            }
            e
        } else {
            out.iter_mut().for_each(|o| *o = 0.0);
            self.pair_pass(u, 0..n, out, &phi)
        };
        let mut ext = 0.0;
        for (i, o) in out.iter_mut().enumerate() {
            let f = (self.collar[i] + self.tail[i]) * phi(u[i]);
            ext += f * u[i];
            *o = 2.0 * (*o + f);
        }
        2.0 * self.cell_volume() * (pairs + ext)
    }

    /// Accumulates `Σ_j w_ij Φ(u_i - u_j)` for rows in `rows` (and the
    /// antisymmetric contribution to the partner rows); returns the partial
    /// pair energy `Σ w |u_i - u_j|^p`.
    #[inline]
    fn pair_pass<F: Fn(f64) -> f64>(&self, u: &[f64], rows: Range<usize>, out: &mut [f64], phi: &F) -> f64 {
        let n = self.len();
        let mut energy = 0.0;
        for i in rows {
            let ui = u[i];
            let start = row_start(i, n);
            let row = &self.weights[start..start + (n - 1 - i)];
            let mut acc = 0.0;
            for ((w, uj), oj) in row.iter().zip(&u[i + 1..]).zip(out[i + 1..].iter_mut()) {
                let t = ui - uj;
                let f = w * phi(t);
                acc += f;
                *oj -= f;
                energy += f * t;
            }
            out[i] += acc;
        }
        energy
    }

    /// Summary for run manifests.
    pub fn metadata(&self) -> OperatorMetadata {
        OperatorMetadata {
            s: self.params.s,
            p: self.params.p,
            kernel_exponent: self.grid.dimension() as f64 + self.params.sp(),
            active_nodes: self.len(),
            pair_count: self.weights.len(),
            normalization: "kernel 2|x-y|^-(d+sp), no normalizing constant".into(),
            parallel: self.parallel,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OperatorMetadata {
    pub s: f64,
    pub p: f64,
    pub kernel_exponent: f64,
    pub active_nodes: usize,
    pub pair_count: usize,
    pub normalization: String,
    pub parallel: bool,
}

#[inline]
fn row_start(i: usize, n: usize) -> usize {
    i * (2 * n - i - 1) / 2
}

/// Splits `0..n` into at most `count` contiguous row blocks with similar
/// pair counts (row `i` owns `n - 1 - i` pairs).
fn balanced_blocks(n: usize, count: usize) -> Vec<Range<usize>> {
    let total = n * n.saturating_sub(1) / 2;
    let target = total.div_ceil(count.max(1)).max(1);
    let mut blocks = Vec::new();
    let mut start = 0;
    let mut acc = 0;
    for i in 0..n {
        acc += n - 1 - i;
        if acc >= target {
            blocks.push(start..i + 1);
            start = i + 1;
            acc = 0;
        }
    }
    if start < n {
        blocks.push(start..n);
    }
    blocks
}

/// Pair weights by lattice offset; uniform grids make the weight a
/// function of `(|Δix|, |Δiy|)` only.
struct OffsetTable {
    stride: usize,
    values: Vec<f64>,
}

impl OffsetTable {
    fn new(grid: &Grid, sp: f64) -> Result<Self> {
        let [nx, ny] = grid.shape();
        let h = grid.spacing();
        let exponent = grid.dimension() as f64 + sp;
        let volume = grid.cell_volume();
        let mut values = vec![0.0; nx * ny];
        for dy in 0..ny {
            for dx in 0..nx {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let dist = h * ((dx * dx + dy * dy) as f64).sqrt();
                let w = volume / dist.powf(exponent);
                if !w.is_finite() {
                    return Err(Error::WeightOverflow(format!(
                        "weight at offset ({dx}, {dy}) is {w} for exponent {exponent}"
                    )));
                }
                values[dy * nx + dx] = w;
            }
        }
        Ok(OffsetTable { stride: nx, values })
    }

    #[inline]
    fn get(&self, a: [usize; 2], b: [usize; 2]) -> f64 {
        let dx = a[0].abs_diff(b[0]);
        let dy = a[1].abs_diff(b[1]);
        self.values[dy * self.stride + dx]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, DomainSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_1d(n: usize) -> Arc<Grid> {
        build_grid(&DomainSpec::interval((-1.0, 1.0), (-0.4, 0.4), n)).unwrap()
    }

    fn random_field(op: &NonlocalOperator, rng: &mut ChaCha8Rng) -> Field {
        let vals: Vec<f64> = (0..op.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        op.scatter(&vals)
    }

    #[test]
    fn adjacent_weight_formula() {
        let g = grid_1d(21);
        let op = NonlocalOperator::assemble(&g, OperatorParams::new(0.5, 2.0).unwrap()).unwrap();
        assert!((g.spacing() - 0.1).abs() < 1e-15);
        assert!((op.pair_weight(0, 1) - 10.0).abs() < 1e-10);
        assert!((op.pair_weight(3, 5) - 0.1 / 0.2f64.powi(2)).abs() < 1e-10);
    }

    #[test]
    fn weights_depend_only_on_sp() {
        let g = grid_1d(21);
        let a = NonlocalOperator::assemble(&g, OperatorParams::new(0.5, 2.0).unwrap()).unwrap();
        let b = NonlocalOperator::assemble(&g, OperatorParams::new(0.25, 4.0).unwrap()).unwrap();
        assert_eq!(a.packed_weights(), b.packed_weights());
        assert_eq!(a.tail(), b.tail());
    }

    #[test]
    fn zero_field_maps_to_zero() {
        let g = grid_1d(41);
        let op = NonlocalOperator::assemble(&g, OperatorParams::new(0.3, 1.5).unwrap()).unwrap();
        let z = Field::zeros(&g);
        assert!(op.apply(&z).unwrap().values().iter().all(|&v| v == 0.0));
        assert_eq!(op.gagliardo_energy(&z).unwrap(), 0.0);
    }

    /// Dense matrix built straight from node coordinates and the closed-form
    /// tail, independent of the packed storage.
    fn dense_matrix(g: &Grid, sp: f64) -> (Vec<usize>, Vec<Vec<f64>>) {
        let d = g.dimension();
        let interior = g.interior_mask().indices();
        let bbox = g.bounding_box();
        let v = g.cell_volume();
        let n = interior.len();
        let mut m = vec![vec![0.0; n]; n];
        for (a, &i) in interior.iter().enumerate() {
            let xi = g.coords(i);
            let mut diag = 0.0;
            for j in 0..g.node_count() {
                if j == i {
                    continue;
                }
                let xj = g.coords(j);
                let r = ((0..d).map(|k| (xi[k] - xj[k]).powi(2)).sum::<f64>()).sqrt();
                let w = v / r.powf(d as f64 + sp);
                diag += w;
                if let Some(b) = interior.iter().position(|&k| k == j) {
                    m[a][b] = -2.0 * w;
                }
            }
            let iv = bbox.axes[0];
            let zeta = if d == 1 {
                ((iv.hi - xi[0]).powf(-sp) + (xi[0] - iv.lo).powf(-sp)) / sp
            } else {
                tail::tail_weights(g, sp)[i]
            };
            m[a][a] = 2.0 * (diag + zeta);
        }
        (interior, m)
    }

    #[test]
    fn p2_apply_matches_dense_matrix() {
        let g = grid_1d(21);
        let op = NonlocalOperator::assemble(&g, OperatorParams::new(0.5, 2.0).unwrap()).unwrap();
        let (_, m) = dense_matrix(&g, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = random_field(&op, &mut rng);
        let lu = op.apply(&u).unwrap();
        let uc = op.gather(&u).unwrap();
        let luc = op.gather(&lu).unwrap();
        for (a, row) in m.iter().enumerate() {
            let expect: f64 = row.iter().zip(&uc).map(|(x, y)| x * y).sum();
            assert!((luc[a] - expect).abs() <= 1e-12 * expect.abs().max(1.0), "{a}");
        }
        for (a, row) in m.iter().enumerate() {
            for (b, x) in row.iter().enumerate() {
                assert_eq!(*x, m[b][a]);
            }
        }
    }

    #[test]
    fn homogeneity_and_linearity() {
        let g = grid_1d(31);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in [1.5, 2.0, 3.0, 2.7] {
            let op = NonlocalOperator::assemble(&g, OperatorParams::new(0.4, p).unwrap()).unwrap();
            let u = random_field(&op, &mut rng);
            let c = 1.7;
            let a = op.apply(&u.scaled(c)).unwrap();
            let b = op.apply(&u).unwrap().scaled(c.powf(p - 1.0));
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-300) + 1e-14);
            }
            let e1 = op.gagliardo_energy(&u.scaled(c)).unwrap();
            let e0 = op.gagliardo_energy(&u).unwrap();
            assert!((e1 - c.powf(p) * e0).abs() < 1e-12 * e1);
        }
        let op = NonlocalOperator::assemble(&g, OperatorParams::new(0.4, 2.0).unwrap()).unwrap();
        let u = random_field(&op, &mut rng);
        let v = random_field(&op, &mut rng);
        let sum = op.apply(&u.zip_with(&v, |a, b| a + b)).unwrap();
        let parts = op.apply(&u).unwrap().zip_with(&op.apply(&v).unwrap(), |a, b| a + b);
        for (x, y) in sum.values().iter().zip(parts.values()) {
            assert!((x - y).abs() < 1e-10 * y.abs().max(1.0));
        }
    }

    #[test]
    fn fused_energy_matches_standalone() {
        let g = build_grid(&DomainSpec::square((-1.0, 1.0), (-0.4, 0.4), 11)).unwrap();
        let op = NonlocalOperator::assemble(&g, OperatorParams::new(0.6, 2.5).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = op.gather(&random_field(&op, &mut rng)).unwrap();
        let mut out = vec![0.0; op.len()];
        let e = op.energy_and_apply(&u, &mut out);
        assert!((e - op.energy_compact(&u)).abs() < 1e-12 * e);
    }

    #[test]
    fn gradient_identity_by_finite_differences() {
        let g = grid_1d(17);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in [1.5, 2.0, 3.0] {
            let op = NonlocalOperator::assemble(&g, OperatorParams::new(0.5, p).unwrap()).unwrap();
            let u: Vec<f64> = (0..op.len()).map(|_| rng.gen_range(0.1..1.0)).collect();
            let dir: Vec<f64> = (0..op.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut lu = vec![0.0; op.len()];
            op.apply_compact(&u, &mut lu);
            let analytic: f64 = op.cell_volume() * lu.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>();
            let eps = 1e-5;
            let shifted = |sign: f64| {
                let w: Vec<f64> = u.iter().zip(&dir).map(|(a, b)| a + sign * eps * b).collect();
                op.energy_compact(&w) / p
            };
            let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * eps);
            assert!(
                (fd - analytic).abs() < 1e-6 * analytic.abs(),
                "p={p}: {fd} vs {analytic}"
            );
        }
    }

    #[test]
    fn parallel_pass_is_deterministic_and_close() {
        let g = build_grid(&DomainSpec::square((-1.0, 1.0), (-0.4, 0.4), 17)).unwrap();
        let op = NonlocalOperator::assemble(&g, OperatorParams::new(0.5, 2.5).unwrap()).unwrap();
        let par = op.clone().with_parallel(true);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = op.gather(&random_field(&op, &mut rng)).unwrap();
        let mut a = vec![0.0; op.len()];
        let mut b = vec![0.0; op.len()];
        let mut c = vec![0.0; op.len()];
        let ea = op.energy_and_apply(&u, &mut a);
        let eb = par.energy_and_apply(&u, &mut b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let ec = pool.install(|| par.energy_and_apply(&u, &mut c));
        assert_eq!(b, c);
        assert_eq!(eb.to_bits(), ec.to_bits());
        assert!((ea - eb).abs() < 1e-12 * ea);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10 * x.abs().max(1.0));
        }
    }

    #[test]
    fn restricted_operator_equals_masked_full_energy() {
        let g = grid_1d(41);
        let op = NonlocalOperator::assemble(&g, OperatorParams::new(0.5, 2.5).unwrap()).unwrap();
        let sub = op.restricted(g.refuge_mask()).unwrap();
        assert_eq!(sub.len(), g.refuge_mask().count());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f64> = (0..sub.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let v = sub.scatter(&vals);
        let e_sub = sub.gagliardo_energy(&v).unwrap();
        let e_full = op.gagliardo_energy(&v).unwrap();
        assert!((e_sub - e_full).abs() < 1e-11 * e_full);
        let l_sub = sub.apply(&v).unwrap();
        let l_full = op.apply(&v).unwrap().restricted(g.refuge_mask());
        for (x, y) in l_sub.values().iter().zip(l_full.values()) {
            assert!((x - y).abs() < 1e-10 * y.abs().max(1.0));
        }
        assert!(op.restricted(&g.exterior_mask()).is_err());
    }

    #[test]
    fn rejects_field_from_other_grid_or_outside_support() {
        let g = grid_1d(21);
        let op = NonlocalOperator::assemble(&g, OperatorParams::new(0.5, 2.0).unwrap()).unwrap();
        let other = grid_1d(31);
        assert!(matches!(op.apply(&Field::zeros(&other)), Err(Error::GridMismatch)));
        let sub = op.restricted(g.refuge_mask()).unwrap();
        let ones = Field::from_fn(&g, |_| 1.0);
        assert!(sub.apply(&ones).is_err());
    }

    #[test]
    fn balanced_blocks_cover_rows() {
        for n in [1, 2, 10, 100, 1001] {
            let blocks = balanced_blocks(n, 64);
            assert_eq!(blocks.first().unwrap().start, 0);
            assert_eq!(blocks.last().unwrap().end, n);
            for w in blocks.windows(2) {
                assert_eq!(w[0].end, w[1].start);
            }
        }
    }

    #[test]
    fn p2_matrix_is_positive_definite() {
        let g = grid_1d(21);
        let (_, m) = dense_matrix(&g, 1.0);
        let op = NonlocalOperator::assemble(&g, OperatorParams::new(0.5, 2.0).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let u: Vec<f64> = (0..m.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let q: f64 = (0..m.len())
                .map(|a| u[a] * m[a].iter().zip(&u).map(|(x, y)| x * y).sum::<f64>())
                .sum();
            assert!(q > 0.0);
            assert!((q * op.cell_volume() - op.energy_compact(&u)).abs() < 1e-10 * q);
        }
    }
}
