use orthocare::verify::{closed_form_alpha, gradcheck, mmd_properties, metric_identity, orthogonality, stability, verify_math};

fn assert_passed(c: &orthocare::verify::Check) {
    assert!(c.passed, "{c:?}");
}

#[test]
fn projection_suites_pass() {
    assert_passed(&closed_form_alpha(1, 20).unwrap());
    assert_passed(&orthogonality(1, 1000).unwrap());
    assert_passed(&stability(1, 1000).unwrap());
}

#[test]
fn metric_and_mmd_suites_pass() {
    assert_passed(&metric_identity(2, 100).unwrap());
    assert_passed(&mmd_properties(2, 100).unwrap());
}

#[test]
fn gradient_suite_passes_and_covers_every_term() {
    let report = gradcheck(3).unwrap();
    assert_eq!(report.checks.len(), 4);
    for c in &report.checks {
        assert_passed(c);
        assert!(c.instances > 400);
    }
}

#[test]
fn full_suite_is_reproducible() {
    let a = verify_math(4).unwrap();
    for c in &a.checks {
        eprintln!("{} worst={:e} n={} {:.2}s", c.name, c.worst, c.instances, c.seconds);
    }
    assert!(a.passed());
    let b = verify_math(4).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn gradient_suite_passes_across_seeds() {
    for seed in 10..30 {
        for c in gradcheck(seed).unwrap().checks {
            assert_passed(&c);
        }
    }
}

#[test]
fn projection_suites_pass_across_seeds() {
    for seed in 10..20 {
        assert_passed(&orthogonality(seed, 1000).unwrap());
        assert_passed(&stability(seed, 1000).unwrap());
        assert_passed(&metric_identity(seed, 100).unwrap());
        assert_passed(&mmd_properties(seed, 100).unwrap());
    }
}
