mod common;

use common::{cross_assembly_report, identity_surgery_errors, plan_for, seeded};
use featroute::network::lenet;
use featroute::surgery::{disassemble, recover_plan, stats};
use featroute::Model;

fn lenet16(classes: usize, seed: u64) -> Model {
    Model::build(lenet([1, 16, 16], classes), [1, 16, 16], (0..classes as u32).collect(), seed).unwrap()
}

#[test]
fn identity_surgery_is_exact() {
    let mut rng = seeded(1);
    let (sub, whole) = identity_surgery_errors(&lenet16(4, 5), 20, &mut rng);
    assert!(sub < 1e-6, "{sub}");
    assert!(whole < 1e-6, "{whole}");
}

#[test]
fn cross_assembly_isolates_components() {
    let mut rng = seeded(2);
    let (ma, mb) = (lenet16(4, 10), lenet16(4, 11));
    let a = disassemble(&ma, &plan_for(&ma, &[0], 1.0, &mut rng)).unwrap();
    let b = disassemble(&mb, &plan_for(&mb, &[1], 1.0, &mut rng)).unwrap();
    let r = cross_assembly_report(&a, &b, 10, &mut rng);
    assert!(r.single_err < 1e-6, "{r:?}");
    assert!(r.span_err < 1e-6, "{r:?}");
    assert_eq!(r.cross_grad, 0.0, "{r:?}");
}

#[test]
fn emitted_models_validate_and_compress() {
    let mut rng = seeded(3);
    let m = lenet16(4, 6);
    for x in [0.0, 0.5, 1.0, 2.0] {
        let plan = plan_for(&m, &[2], x, &mut rng);
        let sub = disassemble(&m, &plan).unwrap();
        sub.validate().unwrap();
        assert_eq!(sub.param_count(), plan.param_count(&m));
        let s = stats(&m, &sub, [1, 16, 16]).unwrap();
        assert!(s.param_ratio >= 0.0 && s.flops_ratio >= 0.0);
        assert_eq!(recover_plan(&sub, &m).unwrap(), plan);
    }
}
