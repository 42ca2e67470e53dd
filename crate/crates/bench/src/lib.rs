//! Shared fixtures for the criterion benchmarks: one stock benchmark
//! taxonomy with a seeded random model over it.

use rtc_core::data::{generate, Dataset, SyntheticConfig};
use rtc_core::model::{FeatureMap, NodeParams};
use rtc_core::taxonomy::Taxonomy;

pub struct Fixture {
    pub taxonomy: Taxonomy,
    pub params: NodeParams,
    pub fmap: FeatureMap,
    pub train: Dataset,
    pub test: Dataset,
}

/// The default 64-leaf benchmark with a seeded (untrained) model; big
/// enough that per-op timings mean something, small enough to build fast.
pub fn stock_fixture() -> Fixture {
    let cfg = SyntheticConfig { n_max: 50, test_per_class: 4, ..Default::default() };
    let out = generate(&cfg).expect("stock config is valid");
    let params =
        NodeParams::init_seeded(cfg.feature_dim, out.taxonomy.classification_count(), 0.3, 7);
    Fixture {
        params,
        fmap: FeatureMap::identity(cfg.feature_dim),
        train: out.train,
        test: out.test,
        taxonomy: out.taxonomy,
    }
}
