//! Finite-difference gradient checks over every kernel and adapter path.

use instantft::gradcheck::{check_instantft_path, check_method, full_suite};
use instantft::model::Variant;
use instantft::peft::Method;

#[test]
fn full_suite_passes() {
    let checks = full_suite(2);
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(checks.len() >= 2 * (7 + 2 * 7));
}

#[test]
fn lora_all_reaches_every_adapter_through_hidden_layers() {
    for seed in 5..8 {
        let c = check_method(Method::LoraAll, Variant::Mnist, seed);
        assert!(c.passed(), "{c:?}");
        assert!(c.probes >= 10 * 12);
    }
}

#[test]
fn instantft_path_passes_on_more_seeds() {
    for variant in Variant::ALL {
        for seed in 10..14 {
            let c = check_instantft_path(variant, seed);
            assert!(c.passed(), "{c:?}");
        }
    }
}
