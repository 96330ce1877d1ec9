//! Shared fixtures for the benchmarks.

use bayescal_core::calibrators::Design;
use bayescal_core::synthetic::{generate, SyntheticSpec, TrueMap};
use bayescal_core::{CalibratorSpec, FeatureSubset, Method, SampleSet};

/// Well-specified synthetic data with a mild position dependence.
pub fn samples(n: usize, seed: u64) -> SampleSet {
    let map = TrueMap::logistic(vec![2.0, 0.3, -0.2, 0.4, 0.3], -1.0);
    generate(&SyntheticSpec::new(n, seed, map)).expect("valid synthetic spec")
}

pub fn design(set: &SampleSet, method: Method, subset: FeatureSubset) -> (CalibratorSpec, Design) {
    let spec = CalibratorSpec::new(method, subset);
    let design = Design::new(set, &spec).expect("non-degenerate fixture");
    (spec, design)
}
