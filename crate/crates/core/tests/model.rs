use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;

use gaitproj::config::Config;
use gaitproj::gait::{gait_residual, pseudo_passive_fraction, retarget_speed, scale_gait, stride_speed, symmetry_operator, TransformConstants};
use gaitproj::harness::touchdown;
use gaitproj::linmodel::{
    build_phase_dynamics, layout, partial_transfer, phase_transfer, remaining_transfer, step_matrices, stride_transfer, transfer_matrix, validate_state, GaitTiming, ModelParams, Phase, Vec23,
};
use gaitproj::Error;

fn timing() -> GaitTiming {
    GaitTiming::from_fraction(0.8, 0.2, 100).unwrap()
}

fn state(seed: &[f64]) -> Vec23 {
    let mut q = Vec23::from_fn(|i, _| seed[i % seed.len()] * (1.0 + 0.1 * i as f64));
    q[layout::SIDE] = 1.0;
    q
}

#[test]
fn transfer_at_zero_is_identity() {
    let p = ModelParams::adult();
    for phase in [Phase::Ds, Phase::Ss] {
        let h = transfer_matrix(&build_phase_dynamics(&p, phase).unwrap(), 0.0).unwrap();
        assert_relative_eq!(h.m, nalgebra::SMatrix::<f64, 23, 23>::identity(), epsilon = 1e-14);
    }
}

#[test]
fn transfer_semigroup() {
    let p = ModelParams::adult();
    for phase in [Phase::Ds, Phase::Ss] {
        let d = build_phase_dynamics(&p, phase).unwrap();
        let ab = transfer_matrix(&d, 0.3).unwrap();
        let a = transfer_matrix(&d, 0.1).unwrap();
        let b = phase_transfer(&d, 0.1, 0.3).unwrap();
        assert_relative_eq!(b.after(&a).m, ab.m, epsilon = 1e-11, max_relative = 1e-11);
    }
}

#[test]
fn parameters_and_side_are_held() {
    let p = ModelParams::kid();
    let h = transfer_matrix(&build_phase_dynamics(&p, Phase::Ss).unwrap(), 0.4).unwrap();
    for i in 8..23 {
        for j in 0..23 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((h.m[(i, j)] - want).abs() < 1e-13, "row {i} col {j}");
        }
    }
}

#[test]
fn sagittal_and_lateral_decouple() {
    let p = ModelParams::adult();
    let h = stride_transfer(&p, &timing()).unwrap();
    for i in 0..22 {
        for j in 0..22 {
            if layout::is_lateral(i) != layout::is_lateral(j) {
                assert_eq!(h.m[(i, j)], 0.0, "entry ({i}, {j})");
            }
        }
    }
    // only the lateral swing equation sees the side flag
    for i in (0..22).filter(|&i| !layout::is_lateral(i)) {
        assert_eq!(h.m[(i, layout::SIDE)], 0.0);
    }
}

#[test]
fn step_chain_is_stride_map() {
    let p = ModelParams::adult();
    let t = timing();
    let steps = step_matrices(&p, &t).unwrap();
    assert_eq!(steps.len(), 100);
    let chain = steps.iter().fold(nalgebra::SMatrix::<f64, 23, 23>::identity(), |acc, g| g.m * acc);
    let h = stride_transfer(&p, &t).unwrap();
    assert_relative_eq!(chain, h.m, epsilon = 1e-10, max_relative = 1e-10);
}

#[test]
fn remaining_after_partial_is_stride() {
    let p = ModelParams::adult();
    let t = timing();
    let h = stride_transfer(&p, &t).unwrap();
    for s in [0.0, 0.05, t.t_ds, 0.4, 0.79] {
        let comp = remaining_transfer(&p, &t, s).unwrap().m * partial_transfer(&p, &t, s).unwrap().m;
        assert_relative_eq!(comp, h.m, epsilon = 1e-10, max_relative = 1e-10);
    }
    assert!(matches!(remaining_transfer(&p, &t, t.stride()), Err(Error::Domain(_))));
    assert!(matches!(partial_transfer(&p, &t, -0.1), Err(Error::Domain(_))));
}

#[test]
fn bad_inputs_are_rejected() {
    let mut p = ModelParams::adult();
    p.pelvis_mass = -1.0;
    assert!(p.validate().is_err());
    assert!(GaitTiming::from_fraction(0.8, 1.5, 100).is_err());
    let mut q = Vec23::zeros();
    q[layout::SIDE] = 0.5;
    assert!(validate_state(&q).is_err());
    q[layout::SIDE] = -1.0;
    assert!(validate_state(&q).is_ok());
    q[3] = f64::NAN;
    assert!(validate_state(&q).is_err());
}

#[test]
fn reference_gait_is_periodic() {
    let ctx = Config::default().context().unwrap();
    let p = &ctx.model.params;
    assert!(gait_residual(p, &ctx.gait).unwrap() < 1e-9);
    assert_relative_eq!(stride_speed(&ctx.gait.beta, &ctx.gait.timing), ctx.gait.speed, epsilon = 1e-12);
    // one stride plus touch-down returns to the gait in error coordinates
    let q = touchdown(&ctx.model.h_con.apply(&ctx.gait.beta));
    assert!(ctx.error(&q).norm() < 1e-9);
    assert_eq!(q[layout::SIDE], ctx.gait.beta[layout::SIDE]);
}

#[test]
fn symmetry_operator_annihilates_gait() {
    let ctx = Config::default().context().unwrap();
    let r = symmetry_operator(&ctx.model.h_con.m, &TransformConstants::default(), &ctx.model.sel);
    assert!((r * ctx.gait.beta).norm() < 1e-9 * ctx.gait.beta.norm());
}

#[test]
fn constrained_map_projector() {
    let ctx = Config::default().context().unwrap();
    let h = ctx.model.h.m;
    let hc = ctx.model.h_con.m;
    let sel = &ctx.model.sel;
    let s_v = DMatrix::from_fn(2, 23, |i, j| if j == sel.foot_vel[i] { 1.0 } else { 0.0 });
    let s_mh = DMatrix::from_fn(2, 23, |i, j| if j == sel.hip_const[i] { 1.0 } else { 0.0 });
    let hd = DMatrix::from_iterator(23, 23, h.iter().copied());
    let hcd = DMatrix::from_iterator(23, 23, hc.iter().copied());
    let block = (&s_v * &hd * s_mh.transpose()).try_inverse().unwrap();
    let proj = DMatrix::identity(23, 23) - s_mh.transpose() * block * &s_v * &hd;
    assert!((&proj * &proj - &proj).norm() < 1e-9 * proj.norm());
    assert!((&hcd * &proj - &hcd).norm() < 1e-9 * hcd.norm());
    // foot-velocity rows vanish outside the constant-hip columns
    let fv = &s_v * &hcd;
    for j in (0..23).filter(|j| !sel.hip_const.contains(j)) {
        assert!(fv[(0, j)].abs() < 1e-9 && fv[(1, j)].abs() < 1e-9, "column {j}");
    }
    let mut q = state(&[0.3, -0.2, 0.7, 0.1]);
    for &c in &sel.hip_const {
        q[c] = 0.0;
    }
    let end = hc * q;
    assert!(end[sel.foot_vel[0]].abs() < 1e-8 && end[sel.foot_vel[1]].abs() < 1e-8);
}

#[test]
fn generator_structure() {
    let p = ModelParams::adult();
    let d = build_phase_dynamics(&p, Phase::Ss).unwrap();
    let g = d.generator;
    assert!(g.iter().all(|v| v.is_finite()));
    for i in 8..23 {
        assert!(g.row(i).iter().all(|&v| v == 0.0), "row {i}");
    }
    let block = nalgebra::Matrix2::new(g[(0, 0)], g[(0, 4)], g[(4, 0)], g[(4, 4)]);
    let eig = block.complex_eigenvalues();
    let w = (p.gravity / p.pelvis_height).sqrt();
    let mut re: Vec<f64> = eig.iter().map(|z| z.re).collect();
    re.sort_by(f64::total_cmp);
    assert_relative_eq!(re[0], -w, epsilon = 1e-12);
    assert_relative_eq!(re[1], w, epsilon = 1e-12);
}

#[test]
fn within_phase_steps_are_uniform() {
    let p = ModelParams::adult();
    let t = timing();
    let steps = step_matrices(&p, &t).unwrap();
    let dt_ds = transfer_matrix(&build_phase_dynamics(&p, Phase::Ds).unwrap(), t.dt_ds()).unwrap();
    let dt_ss = transfer_matrix(&build_phase_dynamics(&p, Phase::Ss).unwrap(), t.dt_ss()).unwrap();
    // ramp torques depend on the time since phase start, so only the first step of each phase is Δt-invariant
    assert_relative_eq!(steps[0].m, dt_ds.m, epsilon = 1e-12);
    assert_relative_eq!(steps[t.n_ds].m, dt_ss.m, epsilon = 1e-12);
    let near_end = remaining_transfer(&p, &t, t.stride() - 1e-9).unwrap();
    assert_relative_eq!(near_end.m, nalgebra::SMatrix::<f64, 23, 23>::identity(), epsilon = 1e-6);
    assert_relative_eq!(remaining_transfer(&p, &t, 0.0).unwrap().m, stride_transfer(&p, &t).unwrap().m, epsilon = 1e-10);
}

#[test]
fn transform_constants() {
    let c = TransformConstants::default();
    assert_eq!(c.t * c.t, nalgebra::SMatrix::<f64, 8, 8>::identity());
    assert_eq!(c.o * c.o, nalgebra::SMatrix::<f64, 6, 6>::identity());
    let sel = gaitproj::linmodel::SelectionSet::default();
    let r = symmetry_operator(&nalgebra::SMatrix::<f64, 23, 23>::identity(), &c, &sel);
    assert_relative_eq!(r, c.omt_sxp(&sel) - c.m_sxp(&sel), epsilon = 1e-15);
}

#[test]
fn pseudo_passive_gait_scales_linearly() {
    let p = ModelParams::adult();
    let g = pseudo_passive_fraction(&p, 0.2, 100).unwrap();
    assert!(gait_residual(&p, &g).unwrap() < 1e-9);
    let g2 = scale_gait(&g, 2.0 * g.speed).unwrap();
    assert_relative_eq!(g2.beta, g.beta * 2.0, epsilon = 1e-14);
    let r = retarget_speed(&g, 0.7).unwrap();
    assert!(gait_residual(&p, &r).unwrap() < 1e-9);
    assert_relative_eq!(stride_speed(&r.beta, &r.timing), 0.7, epsilon = 1e-12);
    assert_eq!(r.beta[layout::SIDE], g.beta[layout::SIDE]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stride_map_is_linear(a in prop::collection::vec(-1.0f64..1.0, 23), b in prop::collection::vec(-1.0f64..1.0, 23), s in -3.0f64..3.0) {
        let p = ModelParams::adult();
        let h = stride_transfer(&p, &timing()).unwrap();
        let qa = Vec23::from_column_slice(&a);
        let qb = Vec23::from_column_slice(&b);
        let lhs = h.apply(&(qa * s + qb));
        let rhs = h.apply(&qa) * s + h.apply(&qb);
        prop_assert!((lhs - rhs).norm() <= 1e-10 * (1.0 + rhs.norm()));
    }

    #[test]
    fn semigroup_holds_for_any_split(t1 in 0.0f64..0.4, t2 in 0.0f64..0.4) {
        let d = build_phase_dynamics(&ModelParams::adult(), Phase::Ss).unwrap();
        let a = transfer_matrix(&d, t1).unwrap();
        let b = phase_transfer(&d, t1, t1 + t2).unwrap();
        let c = transfer_matrix(&d, t1 + t2).unwrap();
        let diff = DMatrix::from_iterator(23, 23, (b.after(&a).m - c.m).iter().copied());
        prop_assert!(diff.norm() <= 1e-9 * (1.0 + c.m.norm()));
    }
}
