//! Every hand-written backward pass against central differences, in f64.

use nucleoseg::gradcheck::{layer_suite, whole_model_inference, whole_model_training};

#[test]
fn every_layer_within_1e_4() {
    for (layer, worst) in layer_suite(20) {
        assert!(worst < 1e-4, "{layer}: {worst:.2e}");
    }
}

#[test]
fn whole_model_within_1e_3() {
    let e = whole_model_inference();
    assert!(e < 1e-3, "inference mode {e:.2e}");
    let e = whole_model_training();
    assert!(e < 1e-3, "training mode {e:.2e}");
}
