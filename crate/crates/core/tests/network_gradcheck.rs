use std::time::Instant;

use damd_core::morphable::generate_synthetic_model;
use damd_core::train::network_gradient_check;

#[test]
fn toy_damdnet_combined_loss_gradient() {
    let start = Instant::now();
    let model = generate_synthetic_model(1, 300).unwrap();
    let report = network_gradient_check(&model, 7, 60, 2).unwrap();
    println!("worst {:e} at {} over {} probes in {:?}", report.worst, report.worst_at, report.probes, start.elapsed());
    assert!(report.worst < 1e-4);
}
