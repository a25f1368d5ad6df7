use std::time::Instant;

use eet_core::diagnostics::{
    check_loss, check_stage2_composite, LossKind, COMPOSITE_TOLERANCE, DEFAULT_STEP, LOSS_TOLERANCE,
};

#[test]
fn every_loss_matches_finite_differences() {
    for kind in LossKind::ALL {
        for seed in 0..3 {
            let report = check_loss(kind, seed).unwrap();
            assert!(report.passes(LOSS_TOLERANCE), "{kind} seed {seed}: {report}");
        }
    }
}

#[test]
fn loss_names_round_trip() {
    for kind in LossKind::ALL {
        assert_eq!(kind.name().parse::<LossKind>().unwrap(), kind);
    }
    assert!("hinge".parse::<LossKind>().is_err());
}

#[test]
fn full_stage_two_graph_matches_finite_differences() {
    let start = Instant::now();
    let report = check_stage2_composite(0, 12, DEFAULT_STEP).unwrap();
    assert!(report.checked * 2 >= 9 * 12, "too many coordinates excluded: {report}");
    assert!(report.passes(COMPOSITE_TOLERANCE), "{report}");
    eprintln!("composite: {report} in {:.1}s", start.elapsed().as_secs_f64());
}
