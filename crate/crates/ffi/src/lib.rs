//! C ABI over the `fraclogi` solvers.
//!
//! Objects are opaque handles created by `flg_*_new` and released by the
//! matching `flg_*_free`. Fields are dense `double` arrays over every grid
//! node (length `flg_grid_node_count`), with zeros outside the domain.
//! Every fallible call returns an [`FlgStatus`]; on failure the message is
//! available from [`flg_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use fraclogi::eigen::{first_eigen, EigenOptions};
use fraclogi::elliptic::{solve_steady, Problem, SteadyOptions, SteadyStatus};
use fraclogi::grid::{build_absorption, build_grid, DomainSpec, Field, Grid};
use fraclogi::nonlocal_op::{NonlocalOperator, OperatorParams};
use fraclogi::parabolic::{evolve, horizon_policy, Classification, SchemeConfig};
use fraclogi::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlgStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Bad parameter, grid, field length or field values.
    InvalidArgument = 2,
    /// An iterative solver failed to converge or diverged.
    SolverFailure = 3,
    /// The steady problem has no positive solution at this λ.
    NoPositiveSolution = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

/// Fate of an evolution run.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlgClassification {
    Running = 0,
    Stabilized = 1,
    BlowupFinite = 2,
    BlowupInfinite = 3,
    BlowupSuspected = 4,
    Extinct = 5,
    HorizonReached = 6,
}

impl From<Classification> for FlgClassification {
    fn from(c: Classification) -> Self {
        match c {
            Classification::Running => FlgClassification::Running,
            Classification::Stabilized => FlgClassification::Stabilized,
            Classification::BlowupFinite => FlgClassification::BlowupFinite,
            Classification::BlowupInfinite => FlgClassification::BlowupInfinite,
            Classification::BlowupSuspected => FlgClassification::BlowupSuspected,
            Classification::Extinct => FlgClassification::Extinct,
            Classification::HorizonReached => FlgClassification::HorizonReached,
        }
    }
}

/// Discretization grid with its domain, refuge and exterior masks.
pub struct FlgGrid(Arc<Grid>);

/// Assembled nonlocal operator on a grid's interior nodes.
pub struct FlgOperator(Arc<NonlocalOperator>);

/// Operator, absorption and exponents of one steady or evolution problem.
pub struct FlgProblem(Problem);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let text = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

struct Failure(FlgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = if e.is_solver_failure() {
            FlgStatus::SolverFailure
        } else {
            FlgStatus::InvalidArgument
        };
        Failure(status, e.to_string())
    }
}

fn null(name: &str) -> Failure {
    Failure(FlgStatus::NullPointer, format!("{name} is null"))
}

/// Runs `body`, recording failures and converting panics.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> FlgStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => FlgStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {message}"));
            FlgStatus::Internal
        }
    }
}

unsafe fn handle<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(name))
}

unsafe fn input_field(grid: &Arc<Grid>, values: *const f64, len: usize) -> Result<Field, Failure> {
    if values.is_null() {
        return Err(null("field"));
    }
    let slice = std::slice::from_raw_parts(values, len);
    Ok(Field::from_values(grid, slice.to_vec())?)
}

unsafe fn output_field(field: &Field, out: *mut f64, len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output field"));
    }
    let values = field.values();
    if len != values.len() {
        return Err(Error::LengthMismatch {
            expected: values.len(),
            actual: len,
        }
        .into());
    }
    std::slice::from_raw_parts_mut(out, len).copy_from_slice(values);
    Ok(())
}

unsafe fn write<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn flg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn flg_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

/// Uniform 1D grid on `[lo, hi]` with refuge `[refuge_lo, refuge_hi]` and
/// `nodes` nodes including the two boundary nodes.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn flg_grid_new_interval(
    lo: f64,
    hi: f64,
    refuge_lo: f64,
    refuge_hi: f64,
    nodes: usize,
    out: *mut *mut FlgGrid,
) -> FlgStatus {
    guard(|| {
        let grid = build_grid(&DomainSpec::interval((lo, hi), (refuge_lo, refuge_hi), nodes))?;
        write(out, Box::into_raw(Box::new(FlgGrid(grid))), "out")
    })
}

/// Uniform 2D grid on the square `[lo, hi]²` with refuge `[refuge_lo, refuge_hi]²`
/// and `nodes_per_axis` nodes per axis.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn flg_grid_new_square(
    lo: f64,
    hi: f64,
    refuge_lo: f64,
    refuge_hi: f64,
    nodes_per_axis: usize,
    out: *mut *mut FlgGrid,
) -> FlgStatus {
    guard(|| {
        let grid = build_grid(&DomainSpec::square((lo, hi), (refuge_lo, refuge_hi), nodes_per_axis))?;
        write(out, Box::into_raw(Box::new(FlgGrid(grid))), "out")
    })
}

/// Number of grid nodes, the length of every field; 0 for a null handle.
///
/// # Safety
/// `grid` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn flg_grid_node_count(grid: *const FlgGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.0.node_count())
}

/// Spatial dimension (1 or 2); 0 for a null handle.
///
/// # Safety
/// `grid` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn flg_grid_dimension(grid: *const FlgGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.0.dimension())
}

/// Writes the coordinates of every node, `dimension` values per node.
///
/// # Safety
/// `grid` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn flg_grid_coordinates(grid: *const FlgGrid, out: *mut f64, len: usize) -> FlgStatus {
    guard(|| {
        let g = &handle(grid, "grid")?.0;
        let d = g.dimension();
        let expected = d * g.node_count();
        if out.is_null() {
            return Err(null("out"));
        }
        if len != expected {
            return Err(Error::LengthMismatch { expected, actual: len }.into());
        }
        let out = std::slice::from_raw_parts_mut(out, len);
        for i in 0..g.node_count() {
            out[d * i..d * (i + 1)].copy_from_slice(&g.coords(i)[..d]);
        }
        Ok(())
    })
}

/// # Safety
/// `grid` must be null or a handle from `flg_grid_new_*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn flg_grid_free(grid: *mut FlgGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Assembles the operator with fractional order `s ∈ (0, 1)` and `p > 1`.
///
/// # Safety
/// `grid` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn flg_operator_new(
    grid: *const FlgGrid,
    s: f64,
    p: f64,
    out: *mut *mut FlgOperator,
) -> FlgStatus {
    guard(|| {
        let g = &handle(grid, "grid")?.0;
        let op = NonlocalOperator::assemble(g, OperatorParams::new(s, p)?)?;
        write(out, Box::into_raw(Box::new(FlgOperator(Arc::new(op)))), "out")
    })
}

/// Applies the operator to `u`; both arrays hold `len` node values.
///
/// # Safety
/// `op` must be a live handle, `u` valid for `len` reads and `out` for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn flg_operator_apply(
    op: *const FlgOperator,
    u: *const f64,
    out: *mut f64,
    len: usize,
) -> FlgStatus {
    guard(|| {
        let op = &handle(op, "operator")?.0;
        let field = input_field(op.grid(), u, len)?;
        output_field(&op.apply(&field)?, out, len)
    })
}

/// Gagliardo energy `‖u‖^p` of `u`.
///
/// # Safety
/// `op` must be a live handle, `u` valid for `len` reads and `energy` for a write.
#[no_mangle]
pub unsafe extern "C" fn flg_operator_energy(
    op: *const FlgOperator,
    u: *const f64,
    len: usize,
    energy: *mut f64,
) -> FlgStatus {
    guard(|| {
        let op = &handle(op, "operator")?.0;
        let field = input_field(op.grid(), u, len)?;
        write(energy, op.gagliardo_energy(&field)?, "energy")
    })
}

/// First eigenpair on the interior (`on_refuge = false`) or on the refuge.
/// `eigenfield` may be null; otherwise it receives `len` node values.
///
/// # Safety
/// `op` must be a live handle, `lambda` valid for a write and `eigenfield`
/// null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn flg_first_eigen(
    op: *const FlgOperator,
    on_refuge: bool,
    lambda: *mut f64,
    eigenfield: *mut f64,
    len: usize,
) -> FlgStatus {
    guard(|| {
        let op = &handle(op, "operator")?.0;
        let mask = if on_refuge {
            op.grid().refuge_mask()
        } else {
            op.active_mask()
        };
        let result = first_eigen(op, mask, &EigenOptions::default())?;
        if !eigenfield.is_null() {
            output_field(&result.eigenfield, eigenfield, len)?;
        }
        write(lambda, result.lambda, "lambda")
    })
}

/// Problem with absorption `b0` outside the refuge, source `λ u^q` and
/// absorption exponent `r`. The operator handle may be freed afterwards.
///
/// # Safety
/// `op` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn flg_problem_new(
    op: *const FlgOperator,
    b0: f64,
    lambda: f64,
    q: f64,
    r: f64,
    out: *mut *mut FlgProblem,
) -> FlgStatus {
    guard(|| {
        let op = &handle(op, "operator")?.0;
        let b = build_absorption(op.grid(), b0)?;
        let pb = Problem::new(Arc::clone(op), b, lambda, q, r)?;
        write(out, Box::into_raw(Box::new(FlgProblem(pb))), "out")
    })
}

/// # Safety
/// `problem` must be null or a handle from `flg_problem_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn flg_problem_free(problem: *mut FlgProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// # Safety
/// `op` must be null or a handle from `flg_operator_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn flg_operator_free(op: *mut FlgOperator) {
    if !op.is_null() {
        drop(Box::from_raw(op));
    }
}

/// Positive steady state. `init` may be null (default start) or hold `len`
/// node values. `residual` may be null.
///
/// # Safety
/// `problem` must be a live handle; the arrays valid for `len` elements.
#[no_mangle]
pub unsafe extern "C" fn flg_solve_steady(
    problem: *const FlgProblem,
    init: *const f64,
    out: *mut f64,
    len: usize,
    residual: *mut f64,
) -> FlgStatus {
    guard(|| {
        let pb = &handle(problem, "problem")?.0;
        let grid = pb.op().grid();
        let init = if init.is_null() {
            None
        } else {
            Some(input_field(grid, init, len)?)
        };
        let state = solve_steady(pb, init.as_ref(), &SteadyOptions::default())?;
        if state.status == SteadyStatus::NoPositiveSolution {
            return Err(Failure(
                FlgStatus::NoPositiveSolution,
                format!("no positive steady state at lambda = {}", pb.lambda()),
            ));
        }
        output_field(&state.field, out, len)?;
        if !residual.is_null() {
            residual.write(state.residual);
        }
        Ok(())
    })
}

/// Guaranteed existence horizon `T_*` and its truncation level (`NAN` when
/// no finite maximizer exists) for the datum `u0`.
///
/// # Safety
/// `problem` must be a live handle, `u0` valid for `len` reads and both
/// outputs for a write.
#[no_mangle]
pub unsafe extern "C" fn flg_horizon(
    problem: *const FlgProblem,
    u0: *const f64,
    len: usize,
    t_star: *mut f64,
    truncation: *mut f64,
) -> FlgStatus {
    guard(|| {
        let pb = &handle(problem, "problem")?.0;
        let field = input_field(pb.op().grid(), u0, len)?;
        let h = horizon_policy(pb, &field)?;
        write(t_star, h.t_star, "t_star")?;
        write(truncation, h.truncation.unwrap_or(f64::NAN), "truncation")
    })
}

/// Runs the implicit scheme from `u0` up to time `horizon` with step `dt`
/// (`dt ≤ 0` selects the default) and writes the final field, the final
/// time and the classification of the run.
///
/// # Safety
/// `problem` must be a live handle, `u0` valid for `len` reads, `out` for
/// `len` writes and the scalar outputs for a write.
#[no_mangle]
pub unsafe extern "C" fn flg_evolve(
    problem: *const FlgProblem,
    u0: *const f64,
    len: usize,
    horizon: f64,
    dt: f64,
    out: *mut f64,
    final_time: *mut f64,
    classification: *mut FlgClassification,
) -> FlgStatus {
    guard(|| {
        let pb = &handle(problem, "problem")?.0;
        let field = input_field(pb.op().grid(), u0, len)?;
        let cfg = SchemeConfig {
            horizon,
            dt: (dt > 0.0).then_some(dt),
            ..Default::default()
        };
        let traj = evolve(pb, &field, &cfg).map_err(|e| Failure::from(e.error))?;
        output_field(&traj.final_field, out, len)?;
        write(final_time, traj.series.last().map_or(0.0, |r| r.t), "final_time")?;
        write(classification, traj.classification.into(), "classification")
    })
}
