//! Shared fixtures for the benchmarks.

use sanity_core::detector::{Detector, DetectorConfig};
use sanity_core::synthdata::{generate, GeneratorConfig, SyntheticScene};

/// An untrained default detector and a few default scenes.
pub fn fixture(scenes: usize) -> (Detector, Vec<SyntheticScene>) {
    let detector = Detector::build(DetectorConfig::default()).expect("default config is valid");
    let scenes = generate(&GeneratorConfig {
        count: scenes,
        ..GeneratorConfig::default()
    })
    .expect("default generator config is valid");
    (detector, scenes)
}
