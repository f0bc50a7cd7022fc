mod support;

use support::{loss_checks, net_checks};

#[test]
fn losses_match_central_differences() {
    for seed in [1, 2] {
        for c in loss_checks(seed) {
            println!("{c}");
            assert!(c.passes(), "seed {seed}: {c}");
        }
    }
}

#[test]
fn networks_match_central_differences() {
    for c in net_checks(3) {
        println!("{c}");
        assert!(c.passes(), "{c}");
    }
}
