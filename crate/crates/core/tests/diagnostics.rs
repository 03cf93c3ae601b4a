use proptest::prelude::*;
use radiomamba_core::diagnostics::{bench_scan, gradcheck_suite, loglog_slope, GradScope};
use radiomamba_core::Error;

#[test]
fn every_scope_passes_at_default_tolerance() {
    for scope in GradScope::ALL {
        let cases = gradcheck_suite(scope, None, false, 1).unwrap();
        assert!(!cases.is_empty());
        for c in &cases {
            assert!(c.report.passed(), "{scope}/{}: {}", c.name, c.report);
            assert!(c.report.checked > 0);
        }
    }
}

#[test]
fn corrupted_backward_fails_every_scope() {
    for scope in GradScope::ALL {
        let cases = gradcheck_suite(scope, None, true, 1).unwrap();
        assert!(cases.iter().any(|c| !c.report.passed()), "{scope}");
    }
}

#[test]
fn scope_names_round_trip() {
    for scope in GradScope::ALL {
        assert_eq!(scope.to_string().parse::<GradScope>().unwrap(), scope);
    }
    assert!(matches!(
        "everything".parse::<GradScope>(),
        Err(Error::Config(_))
    ));
}

#[test]
fn bench_reports_every_length() {
    let b = bench_scan(&[64, 128, 256], 4, 2, 2, 0).unwrap();
    assert_eq!(
        b.rows.iter().map(|r| r.len).collect::<Vec<_>>(),
        vec![64, 128, 256]
    );
    assert!(b
        .rows
        .iter()
        .all(|r| r.sequential_secs > 0.0 && r.parallel_secs > 0.0));
    assert!(b.sequential_slope.is_finite() && b.parallel_slope.is_finite());
    assert!(matches!(
        bench_scan(&[64], 4, 2, 1, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn slope_fit_rejects_degenerate_input() {
    assert!(loglog_slope(&[1.0], &[1.0]).is_err());
    assert!(loglog_slope(&[2.0, 2.0], &[1.0, 3.0]).is_err());
    assert!(loglog_slope(&[1.0, 2.0], &[0.0, 1.0]).is_err());
}

proptest! {
    #[test]
    fn slope_recovers_power_law(k in 0.1f64..3.0, c in 1e-6f64..10.0) {
        let x = [256.0, 1024.0, 4096.0, 16384.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| c * v.powf(k)).collect();
        prop_assert!((loglog_slope(&x, &y).unwrap() - k).abs() < 1e-9);
    }
}
