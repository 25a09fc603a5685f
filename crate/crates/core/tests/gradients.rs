use awb_core::gradsuite::{run_suite, SUITE_INSTANCES, SUITE_TOLERANCE};

#[test]
fn every_case_matches_finite_differences() {
    let reports = run_suite(SUITE_INSTANCES).unwrap();
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
    for r in &reports {
        println!("{:<20} {:>7} coords  max rel err {:.2e} (floor {:.0e})", r.name, r.coordinates, r.max_rel_err, r.floor);
    }
    assert!(failed.is_empty(), "above {SUITE_TOLERANCE:e}: {failed:#?}");
    for name in ["awb_pre_icbam", "awb_post_nonlocal", "icbam", "nonlocal", "cnn_supervised", "cnn_awb_mutual"] {
        assert!(reports.iter().any(|r| r.name == name), "missing case {name}");
    }
}
