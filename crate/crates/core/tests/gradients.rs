use rffi::gradcheck::{model_suite, primitive_suite};

#[test]
fn primitives_match_finite_differences() {
    for seed in [1, 2] {
        for r in primitive_suite(seed).unwrap() {
            println!("{:<24} rel {:.2e} ({} probes)", r.name, r.rel_error, r.probes);
            assert!(r.pass(), "seed {seed} {}: rel {:.2e}", r.name, r.rel_error);
        }
    }
}

#[test]
fn full_losses_match_finite_differences() {
    for r in model_suite(5).unwrap() {
        println!("{:<24} rel {:.2e} ({} probes)", r.name, r.rel_error, r.probes);
        assert!(r.pass(), "{}: rel {:.2e}", r.name, r.rel_error);
    }
}
