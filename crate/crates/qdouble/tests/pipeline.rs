//! Cross-module integration through the public surface only: composing a
//! braid out of the exported pieces, instantiating the generic scalar at
//! `f32`, and round-tripping reports through JSON.

use std::sync::Arc;

use qdouble::{
    apply_comb_doubled, default_nonabelian_setup, expectation_in_rho, prepare_ground_state,
    prepare_verify, un_check, CombOperator, Context, ExperimentReport, FiniteGroup, Lattice,
    Layer, ProjectorSpec, SparseState32, Tolerances,
};

fn model(group: FiniteGroup, lx: usize, ly: usize) -> Arc<Context> {
    Context::new(group, Lattice::torus(lx, ly).unwrap()).unwrap()
}

fn flux_at(ctx: &Context, face: usize) -> ProjectorSpec {
    let base_vertex = qdouble::ops::face_base_vertex(ctx.lattice(), face).unwrap();
    ProjectorSpec::Flux {
        face,
        base_vertex,
        target: ctx.group().identity(),
        layer: Layer::Ket,
    }
}

/// The braid experiment rebuilt by hand from exported pieces: prepare,
/// act with the open string, act with the loop, then read the flux at the
/// detection face. For a transposition loop around a 3-cycle string end
/// the commutator flux never vanishes, so the identity-flux expectation
/// drops from 1 to 0 while the trace stays put.
#[test]
fn public_surface_composes_into_a_braid() {
    let group = FiniteGroup::s3();
    let g = group.element(2).unwrap(); // a transposition
    let h = group.element(3).unwrap(); // a 3-cycle
    let ctx = model(group, 2, 2);
    let lattice = ctx.lattice();
    let setup = default_nonabelian_setup(lattice, g, h).unwrap();

    let rho = prepare_ground_state::<f64>(ctx.clone());
    for face in 0..lattice.face_count() {
        let e = expectation_in_rho(&rho, &flux_at(&ctx, face)).unwrap();
        assert!((e - 1.0).abs() < 1e-12, "face {face} starts with flux expectation {e}");
    }

    let string = CombOperator::new(lattice, setup.string_spec.clone(), h).unwrap();
    let rho2 = apply_comb_doubled(&rho, &string);
    let loop_op = CombOperator::new(lattice, setup.loop_spec.clone(), g).unwrap();
    let rho1 = apply_comb_doubled(&rho2, &loop_op);

    let before = expectation_in_rho(&rho2, &flux_at(&ctx, setup.detect_face)).unwrap();
    let after = expectation_in_rho(&rho1, &flux_at(&ctx, setup.detect_face)).unwrap();
    assert!((before - 1.0).abs() < 1e-12, "string alone should not leave flux: {before}");
    assert!(after.abs() < 1e-12, "braided flux expectation should vanish: {after}");

    for state in [&rho, &rho2, &rho1] {
        let trace = state.trace_of_rho();
        assert!((trace.re - 1.0).abs() < 1e-12 && trace.im.abs() < 1e-12);
    }
}

/// The whole certification pipeline also instantiates at `f32`; with
/// tolerances widened to single precision every quantity still passes,
/// and the headline expectations agree with the `f64` run.
#[test]
fn float32_instantiation_matches_float64() {
    let ctx = model(FiniteGroup::zn(2).unwrap(), 2, 2);
    let _typed: SparseState32 = prepare_ground_state::<f32>(ctx.clone());

    let single = prepare_verify::<f32>(&ctx, Tolerances { main: 1e-4, strict: 1e-5 }).unwrap();
    assert!(single.all_pass(), "first failure: {:?}", single.first_failure());

    let double = prepare_verify::<f64>(&ctx, Tolerances::default()).unwrap();
    for name in ["edge_match_min", "flux_ket_min", "flux_bra_min", "diag_gauge_min"] {
        let a = single.quantities[name].value;
        let b = double.quantities[name].value;
        assert!((a - b).abs() < 1e-4, "{name}: f32 gives {a}, f64 gives {b}");
    }
    assert_eq!(single.support_sizes, double.support_sizes);
}

#[test]
fn reports_round_trip_through_json() {
    let report = un_check::<f64>(3, Tolerances::default()).unwrap();
    let text = serde_json::to_string_pretty(&report).unwrap();
    let back: ExperimentReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back.experiment, report.experiment);
    assert_eq!(back.quantities, report.quantities);
    assert_eq!(back.support_sizes, report.support_sizes);
    assert_eq!(
        serde_json::to_value(&back).unwrap(),
        serde_json::to_value(&report).unwrap()
    );
}
