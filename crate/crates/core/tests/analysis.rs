use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gaitproj::analysis::{
    closed_loop_map, controllable_region, direction, duplication_residual, eigen_sweep, frequency_gait, frequency_grid, polygon_area, polygon_centroid, polygon_contains, polygon_is_convex,
    push_response_surface, ray_closed_form, ray_lp, ControllerFactory, RegionConstraints, RegionController, RegionOptions,
};
use gaitproj::config::Config;
use gaitproj::ctpc::{Category, ProjectionConfig};
use gaitproj::gait::gait_residual;
use gaitproj::harness::ControllerSpec;
use gaitproj::linmodel::ModelParams;
use gaitproj::stepctl::Variant;

const SQUARE: [[f64; 2]; 4] = [[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [0.0, 1.0]];

#[test]
fn polygon_helpers() {
    assert_relative_eq!(polygon_area(&SQUARE), 2.0);
    let c = polygon_centroid(&SQUARE);
    assert_relative_eq!(c[0], 1.0);
    assert_relative_eq!(c[1], 0.5);
    assert!(polygon_contains(&SQUARE, [1.0, 0.5], 0.0));
    assert!(polygon_contains(&SQUARE, [2.0, 1.0], 1e-12));
    assert!(!polygon_contains(&SQUARE, [2.1, 0.5], 1e-3));
    assert!(polygon_is_convex(&SQUARE, 1e-12));
    let dent = [[0.0, 0.0], [2.0, 0.0], [1.0, 0.2], [2.0, 1.0], [0.0, 1.0]];
    assert!(!polygon_is_convex(&dent, 1e-12));
}

fn random_constraints(rng: &mut ChaCha8Rng, rows: usize, nu: usize) -> RegionConstraints {
    RegionConstraints {
        g: DMatrix::from_fn(rows, 6, |_, _| rng.gen_range(-1.0..1.0)),
        h: DMatrix::from_fn(rows, nu, |_, _| rng.gen_range(-1.0..1.0)),
        rhs: DVector::from_fn(rows, |_, _| rng.gen_range(0.1..2.0)),
    }
}

/// Eliminates a single free input u from G r d + h u ≤ b by pairing rows with
/// opposite signs in h, then takes the closed-form ray.
fn eliminate_one_input(c: &RegionConstraints) -> RegionConstraints {
    let (mut g, mut rhs) = (Vec::new(), Vec::new());
    let rows = c.g.nrows();
    for i in 0..rows {
        if c.h[(i, 0)] == 0.0 {
            g.push(c.g.row(i).clone_owned());
            rhs.push(c.rhs[i]);
        }
        for j in 0..rows {
            let (hp, hn) = (c.h[(i, 0)], c.h[(j, 0)]);
            if hp > 0.0 && hn < 0.0 {
                g.push(c.g.row(i) * (-hn) + c.g.row(j) * hp);
                rhs.push(c.rhs[i] * (-hn) + c.rhs[j] * hp);
            }
        }
    }
    RegionConstraints { g: DMatrix::from_rows(&g), h: DMatrix::zeros(g.len(), 0), rhs: DVector::from_vec(rhs) }
}

#[test]
fn ray_lp_without_inputs_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let c = random_constraints(&mut rng, 30, 0);
        let d = direction((0, 3), rng.gen_range(0.0..std::f64::consts::TAU));
        let a = ray_closed_form(&c, &d, 10.0);
        let b = ray_lp(&c, &d, 10.0).unwrap();
        assert!((a - b).abs() < 1e-7 * (1.0 + a), "{a} vs {b}");
    }
}

#[test]
fn ray_lp_with_one_input_matches_elimination() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..40 {
        let c = random_constraints(&mut rng, 24, 1);
        let d = direction((1, 4), rng.gen_range(0.0..std::f64::consts::TAU));
        let a = ray_closed_form(&eliminate_one_input(&c), &d, 10.0);
        let b = ray_lp(&c, &d, 10.0).unwrap();
        assert!((a - b).abs() < 1e-7 * (1.0 + a), "{a} vs {b}");
        // more freedom never shrinks the ray
        assert!(b + 1e-9 >= ray_closed_form(&RegionConstraints { h: DMatrix::zeros(24, 0), ..c.clone() }, &d, 10.0));
    }
}

#[test]
fn ray_respects_cap() {
    let c = RegionConstraints { g: DMatrix::from_row_slice(1, 6, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]), h: DMatrix::zeros(1, 0), rhs: DVector::from_element(1, 1.0) };
    assert_eq!(ray_closed_form(&c, &direction((0, 1), 0.3), 4.0), 4.0);
    assert_relative_eq!(ray_lp(&c, &direction((0, 1), 0.3), 4.0).unwrap(), 4.0, epsilon = 1e-9);
    assert_relative_eq!(ray_closed_form(&c, &direction((0, 5), std::f64::consts::FRAC_PI_2), 4.0), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn closed_form_ray_is_on_the_boundary(seed in 0u64..10_000, theta in 0.0f64..std::f64::consts::TAU) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_constraints(&mut rng, 20, 0);
        let d = direction((2, 5), theta);
        let r = ray_closed_form(&c, &d, 1e3);
        let slack = &c.rhs - &c.g * (d * r);
        prop_assert!(slack.min() >= -1e-9);
        if r < 1e3 {
            prop_assert!(slack.min() <= 1e-9);
        }
    }
}

fn small_opts() -> RegionOptions {
    RegionOptions { horizon: 4, rays: 24, ..Default::default() }
}

#[test]
fn feedback_regions_lie_inside_the_maximal_region() {
    let ctx = Config::default().context().unwrap();
    let opts = small_opts();
    let c1 = ProjectionConfig::preset(Category::C1);
    let max = controllable_region(&ctx, RegionController::Maximal, Variant::Aggressive, c1, (0, 4), &opts).unwrap();
    let dlqr = controllable_region(&ctx, RegionController::Dlqr, Variant::Aggressive, c1, (0, 4), &opts).unwrap();
    let ctpc = controllable_region(&ctx, RegionController::Ctpc, Variant::Aggressive, c1, (0, 4), &opts).unwrap();
    for r in [&max, &dlqr, &ctpc] {
        assert_eq!(r.radii.len(), 24);
        assert!(r.area > 0.0, "{}", r.tag);
        assert!(r.contains([0.0, 0.0], 0.0));
        assert!(r.is_convex(1e-6), "{}", r.tag);
    }
    assert!(max.contains_slice(&dlqr, 1e-6));
    assert!(max.contains_slice(&ctpc, 1e-6));
}

#[test]
fn zero_torque_budget_pins_the_region_to_the_origin() {
    let ctx = Config::default().context().unwrap();
    let opts = RegionOptions { torque_limit: 0.0, ..small_opts() };
    let r = controllable_region(&ctx, RegionController::Dlqr, Variant::Aggressive, ProjectionConfig::preset(Category::C1), (0, 4), &opts).unwrap();
    assert!(r.radii.iter().all(|&x| x < 1e-9), "{:?}", r.radii);
    let loose = controllable_region(&ctx, RegionController::Dlqr, Variant::Aggressive, ProjectionConfig::preset(Category::C1), (0, 4), &small_opts()).unwrap();
    assert!(loose.area > 0.0);
}

#[test]
fn frequency_grid_and_gait() {
    let g = frequency_grid(0.8, 2.4, 5);
    assert_eq!(g.len(), 5);
    assert_relative_eq!(g[0], 0.8);
    assert_relative_eq!(g[4], 2.4);
    let p = ModelParams::adult();
    let gait = frequency_gait(&p, 1.5, 0.5, 100).unwrap();
    assert_relative_eq!(gait.timing.stride(), 1.0 / 1.5, epsilon = 1e-12);
    assert!(gait_residual(&p, &gait).unwrap() < 1e-9);
}

#[test]
fn closed_loop_maps_are_linear_and_duplicated() {
    let ctx = Config::default().context().unwrap();
    for f in [
        ControllerFactory::open_loop(),
        ControllerFactory::dlqr(&ctx, Variant::Normal).unwrap(),
        ControllerFactory::ctpc(&ctx, Variant::Aggressive, ProjectionConfig::preset(Category::C1)).unwrap(),
    ] {
        let m = closed_loop_map(&ctx, &f, 2).unwrap();
        assert!(m.superposition_residual < 1e-8, "{}", f.name());
        let dup = duplication_residual(&m.map);
        assert!(dup < 1e-8, "{}: {dup:.3e}", f.name());
        assert_eq!(m.eigenvalues.len(), 6);
    }
}

#[test]
fn eigen_sweep_reports_stable_feedback() {
    let specs = [ControllerSpec::Dlqr { variant: Variant::Aggressive }, ControllerSpec::Ctpc { variant: Variant::Aggressive, config: ProjectionConfig::C1.into() }];
    let reports = eigen_sweep(&ModelParams::adult(), &[1.2, 1.8], &specs, 0.5, 100).unwrap();
    assert_eq!(reports.len(), 4);
    for r in &reports {
        assert!(r.spectral_radius < 1.0, "{} at {}", r.controller, r.frequency);
        assert!(r.duplication_residual < 1e-8);
        assert_eq!(r.eigenvalues.len(), 6);
    }
}

#[test]
fn zero_length_pushes_leave_no_trace() {
    let ctx = Config::default().context().unwrap();
    let f = ControllerFactory::dlqr(&ctx, Variant::Aggressive).unwrap();
    let s = push_response_surface(&ctx, &f, &[0.2, 0.5], &[0.2, 0.5, 0.8], [20.0, 0.0, 0.0, 0.0]).unwrap();
    for cell in &s.cells {
        if cell.end <= cell.start {
            assert!(cell.errors.iter().all(|&e| e == 0.0), "{} {}", cell.start, cell.end);
        } else {
            assert!(cell.errors.iter().any(|&e| e > 0.0));
        }
    }
    let same = s.cell(0.2, 0.2).unwrap();
    assert!(same.errors.iter().all(|&e| e == 0.0));
}
