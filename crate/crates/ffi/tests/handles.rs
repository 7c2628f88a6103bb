use std::ffi::CStr;
use std::ptr;

use fraclogi_ffi::*;

struct Session {
    grid: *mut FlgGrid,
    op: *mut FlgOperator,
    n: usize,
}

impl Session {
    fn new(nodes: usize, p: f64) -> Session {
        let mut grid = ptr::null_mut();
        let mut op = ptr::null_mut();
        unsafe {
            assert_eq!(
                flg_grid_new_interval(-1.0, 1.0, -0.4, 0.4, nodes, &mut grid),
                FlgStatus::Ok
            );
            assert_eq!(flg_operator_new(grid, 0.5, p, &mut op), FlgStatus::Ok);
            Session {
                grid,
                op,
                n: flg_grid_node_count(grid),
            }
        }
    }

    fn problem(&self, lambda: f64, q: f64) -> *mut FlgProblem {
        let mut pb = ptr::null_mut();
        unsafe {
            assert_eq!(flg_problem_new(self.op, 1.0, lambda, q, 2.0, &mut pb), FlgStatus::Ok);
        }
        pb
    }

    fn bump(&self, amplitude: f64) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        unsafe {
            assert_eq!(flg_grid_coordinates(self.grid, x.as_mut_ptr(), self.n), FlgStatus::Ok);
        }
        x.iter().map(|x| amplitude * (1.0 - x * x).max(0.0)).collect()
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        unsafe {
            flg_operator_free(self.op);
            flg_grid_free(self.grid);
        }
    }
}

fn last_error() -> String {
    let ptr = flg_last_error();
    assert!(!ptr.is_null());
    unsafe { CStr::from_ptr(ptr) }.to_string_lossy().into_owned()
}

#[test]
fn grid_reports_size_and_coordinates() {
    let s = Session::new(21, 2.0);
    unsafe {
        assert_eq!(flg_grid_dimension(s.grid), 1);
        let mut x = vec![0.0; 21];
        assert_eq!(flg_grid_coordinates(s.grid, x.as_mut_ptr(), 21), FlgStatus::Ok);
        assert_eq!((x[0], x[10], x[20]), (-1.0, 0.0, 1.0));
        assert_eq!(flg_grid_node_count(ptr::null()), 0);
    }
}

#[test]
fn apply_is_homogeneous_across_the_boundary() {
    let s = Session::new(41, 3.0);
    let u = s.bump(1.0);
    let cu: Vec<f64> = u.iter().map(|x| 2.0 * x).collect();
    let mut lu = vec![0.0; s.n];
    let mut lcu = vec![0.0; s.n];
    let mut energy = 0.0;
    unsafe {
        assert_eq!(
            flg_operator_apply(s.op, u.as_ptr(), lu.as_mut_ptr(), s.n),
            FlgStatus::Ok
        );
        assert_eq!(
            flg_operator_apply(s.op, cu.as_ptr(), lcu.as_mut_ptr(), s.n),
            FlgStatus::Ok
        );
        assert_eq!(flg_operator_energy(s.op, u.as_ptr(), s.n, &mut energy), FlgStatus::Ok);
    }
    for (a, b) in lu.iter().zip(&lcu) {
        assert!((4.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
    assert!(energy > 0.0);
}

#[test]
fn eigenvalue_of_the_refuge_exceeds_the_domain() {
    let s = Session::new(101, 2.0);
    let mut domain = 0.0;
    let mut refuge = 0.0;
    let mut phi = vec![0.0; s.n];
    unsafe {
        assert_eq!(
            flg_first_eigen(s.op, false, &mut domain, phi.as_mut_ptr(), s.n),
            FlgStatus::Ok
        );
        assert_eq!(
            flg_first_eigen(s.op, true, &mut refuge, ptr::null_mut(), 0),
            FlgStatus::Ok
        );
    }
    assert!(refuge > domain && domain > 0.0);
    assert!(phi.iter().all(|&v| v >= 0.0));
    assert_eq!((phi[0], phi[100]), (0.0, 0.0));
}

#[test]
fn steady_state_is_a_fixed_point_of_the_scheme() {
    let s = Session::new(61, 2.0);
    let pb = s.problem(1.0, 0.5);
    let mut u = vec![0.0; s.n];
    let mut residual = f64::NAN;
    let mut out = vec![0.0; s.n];
    let mut t = 0.0;
    let mut class = FlgClassification::Running;
    unsafe {
        assert_eq!(
            flg_solve_steady(pb, ptr::null(), u.as_mut_ptr(), s.n, &mut residual),
            FlgStatus::Ok
        );
        assert!(residual < 1e-8);
        assert_eq!(
            flg_evolve(pb, u.as_ptr(), s.n, 0.5, 0.05, out.as_mut_ptr(), &mut t, &mut class),
            FlgStatus::Ok
        );
        flg_problem_free(pb);
    }
    assert_eq!(t, 0.5);
    assert_eq!(class, FlgClassification::HorizonReached);
    let drift = u.iter().zip(&out).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(drift < 1e-8, "{drift}");
}

#[test]
fn horizon_matches_the_closed_form() {
    let s = Session::new(41, 2.0);
    let pb = s.problem(1.0, 2.0);
    let u0 = s.bump(1.0);
    let (mut t_star, mut r) = (0.0, 0.0);
    unsafe {
        assert_eq!(flg_horizon(pb, u0.as_ptr(), s.n, &mut t_star, &mut r), FlgStatus::Ok);
        flg_problem_free(pb);
    }
    assert_eq!((r, t_star), (2.0, 0.25));
}

#[test]
fn failures_set_codes_and_messages() {
    let s = Session::new(41, 2.0);
    let mut grid = ptr::null_mut();
    let mut op = ptr::null_mut();
    let mut pb = ptr::null_mut();
    let mut out = vec![0.0; s.n];
    unsafe {
        assert_eq!(
            flg_grid_new_interval(1.0, -1.0, -0.4, 0.4, 21, &mut grid),
            FlgStatus::InvalidArgument
        );
        assert!(grid.is_null());
        assert_eq!(flg_operator_new(s.grid, 1.5, 2.0, &mut op), FlgStatus::InvalidArgument);
        assert!(last_error().contains('s'), "{}", last_error());
        assert_eq!(flg_operator_new(ptr::null(), 0.5, 2.0, &mut op), FlgStatus::NullPointer);
        assert_eq!(last_error(), "grid is null");
        let u = s.bump(1.0);
        assert_eq!(
            flg_operator_apply(s.op, u.as_ptr(), out.as_mut_ptr(), s.n - 1),
            FlgStatus::InvalidArgument
        );
        assert!(last_error().contains("length mismatch"));

        // q = p - 1 below λ₁(Ω): no positive steady state.
        assert_eq!(flg_problem_new(s.op, 1.0, 0.1, 1.0, 2.0, &mut pb), FlgStatus::Ok);
        let status = flg_solve_steady(pb, ptr::null(), out.as_mut_ptr(), s.n, ptr::null_mut());
        assert!(
            matches!(status, FlgStatus::NoPositiveSolution | FlgStatus::InvalidArgument),
            "{status:?}"
        );
        flg_problem_free(pb);
        flg_grid_free(ptr::null_mut());
    }
    let version = unsafe { CStr::from_ptr(flg_version()) };
    assert_eq!(version.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
