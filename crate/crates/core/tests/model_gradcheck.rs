use std::time::Instant;

use carpe_core::check::GradcheckInstance;
use carpe_numerics::GradCheckConfig;

#[test]
fn whole_model_gradients_match_finite_differences() {
    let inst = GradcheckInstance::new(3).unwrap();
    let start = Instant::now();
    let report = inst.run(&GradCheckConfig::default()).unwrap();
    let names = inst.param_names();
    for c in &report.per_param {
        assert!(c.max_rel_error < 1e-4, "{}: {:e}", names[c.index], c.max_rel_error);
    }
    assert_eq!(report.per_param.len(), names.len());
    assert!(report.pass);
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn every_parameter_receives_gradient() {
    let inst = GradcheckInstance::new(5).unwrap();
    let params: Vec<_> = inst.model.store.entries().iter().map(|e| e.tensor.clone()).collect();
    let mut g = carpe_numerics::Graph::new();
    let loss = inst.loss(&mut g, &params).unwrap();
    g.backward(loss).unwrap();
    let grads: std::collections::BTreeMap<usize, f64> =
        g.param_grads().into_iter().map(|(k, v)| (k, v.iter().map(|x| x.abs()).sum())).collect();
    let names = inst.param_names();
    let unused: Vec<&str> = (0..names.len())
        .filter(|i| grads.get(i).copied().unwrap_or(0.0) == 0.0)
        .map(|i| names[i].as_str())
        .collect();
    // The router only sends gradient through the chosen expert's branch.
    assert!(unused.iter().all(|n| n.starts_with("vision.") || n.starts_with("adapter.") || n.starts_with("integrator.kv")), "{unused:?}");
}
