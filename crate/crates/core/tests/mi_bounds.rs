use proptest::prelude::*;
use veil_core::mi::{random_balanced_binary, random_joint, DiscreteJoint};
use veil_core::seed::stream;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn objective_lies_between_minus_label_entropy_and_zero(
        seed in any::<u64>(),
        symbols in 1usize..=12,
        labels in 2usize..=4,
    ) {
        let j = random_joint(&mut stream(seed, "joint"), symbols, labels);
        let v = j.objective_value();
        prop_assert!(v <= 1e-12, "{v}");
        prop_assert!(v >= -j.label_entropy() - 1e-12, "{v} < -{}", j.label_entropy());
        prop_assert!(j.eq2_residual() < 1e-10);
    }

    #[test]
    fn balanced_binary_jsd_identity(seed in any::<u64>(), symbols in 1usize..=12) {
        let j = random_balanced_binary(&mut stream(seed, "joint"), symbols);
        prop_assert!(j.jsd_residual().unwrap() < 1e-10);
    }
}

#[test]
fn bounds_are_attained_exactly_at_independence_and_determinism() {
    // Product joint: the symbol says nothing about the label.
    let px = [0.2, 0.5, 0.3];
    let pu = [0.6, 0.4];
    let indep = DiscreteJoint::new(px.iter().map(|a| pu.iter().map(|b| a * b).collect()).collect()).unwrap();
    assert!((indep.objective_value() + indep.label_entropy()).abs() < 1e-12);

    // Each symbol belongs to exactly one label.
    let det = DiscreteJoint::new(vec![vec![0.3, 0.0], vec![0.0, 0.5], vec![0.2, 0.0]]).unwrap();
    assert!(det.objective_value().abs() < 1e-12);
}
