//! Finite-difference checks of the tape gradients.

use deeptraverse_core::autograd::{OpKind, Tape};
use deeptraverse_core::gradcheck::suite::{run_block_checks, run_network_check, tiny_config, SuiteConfig};
use deeptraverse_core::gradcheck::GradCheckReport;
use deeptraverse_core::Tensor;

const TOL: f64 = 1e-4;

fn show(name: &str, r: &GradCheckReport) {
    eprintln!(
        "{name}: max relative error {:.3e} over {} coordinates ({} one-sided)",
        r.max_rel_err,
        r.coordinates(),
        r.one_sided()
    );
}

#[test]
fn every_block_component_passes() {
    let results = run_block_checks(&SuiteConfig::default()).unwrap();
    assert_eq!(results.len(), 7);
    for r in &results {
        show(&r.component, &r.report);
        assert!(r.report.coordinates() > 0);
        assert!(r.report.passes(TOL), "{}: {:#?}", r.component, r.report);
    }
}

#[test]
fn at_least_two_hundred_coordinates_per_large_tensor() {
    let results = run_block_checks(&SuiteConfig::default()).unwrap();
    let report = &results.iter().find(|r| r.component.contains("projection")).unwrap().report;
    assert!(report.tensors.iter().all(|t| t.checked == t.numel.min(200)));
    assert!(report.tensors.iter().any(|t| t.checked == 200));
}

#[test]
fn tiny_network_end_to_end() {
    let r = run_network_check(&SuiteConfig::default(), "tiny", &tiny_config()).unwrap();
    show("tiny network", &r.report);
    assert!(r.report.passes(TOL), "{:#?}", r.report);
}

#[test]
fn corrupted_backward_rules_are_caught() {
    for kind in [OpKind::Relu, OpKind::Conv, OpKind::NormInference, OpKind::Sigmoid] {
        let cfg = SuiteConfig { fault: Some(kind), ..SuiteConfig::default() };
        let results = run_block_checks(&cfg).unwrap();
        assert!(results.iter().any(|r| !r.report.passes(TOL)), "{kind:?} fault went unnoticed");
    }
}

#[test]
fn second_backward_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[3], 2.0));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.backward(s).is_err());
}
