use epsakit_core::gradcheck::{run_gradcheck, Scope, TOLERANCE};

#[test]
fn every_scope_passes_across_seeds() {
    for seed in 0..3 {
        for scope in Scope::ALL {
            let r = run_gradcheck(scope, seed, false).unwrap();
            assert!(r.passed, "{} seed {seed}: worst {:e}", scope.name(), r.worst());
            assert!(r.worst() < TOLERANCE);
            if scope != Scope::Block {
                assert_eq!(r.nonsmooth_skipped(), 0);
            }
        }
    }
}

#[test]
fn corrupted_backward_is_caught_in_every_scope() {
    for scope in Scope::ALL {
        let r = run_gradcheck(scope, 1, true).unwrap();
        assert!(!r.passed, "{}", scope.name());
    }
}

#[test]
fn reports_are_reproducible() {
    let a = run_gradcheck(Scope::Ops, 5, false).unwrap();
    let b = run_gradcheck(Scope::Ops, 5, false).unwrap();
    assert_eq!(a, b);
}
