//! The JSON files under `configs/` must stay in lockstep with the built-in
//! defaults and remain directly usable as run configurations.

use std::fs;
use std::path::PathBuf;

use reach_core::kinematics::{KinematicChain, TableGeometry};
use reach_core::training::RunConfig;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_chain_file_equals_the_built_in_defaults() {
    let text = fs::read_to_string(configs_dir().join("default_chain.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();

    let chain: KinematicChain = serde_json::from_value(parsed["chain"].clone()).unwrap();
    assert_eq!(chain, KinematicChain::default_chain());

    let table: TableGeometry = serde_json::from_value(parsed["table"].clone()).unwrap();
    assert_eq!(table, TableGeometry::default());

    // The same file is accepted as a (partial) run configuration.
    let config: RunConfig = serde_json::from_str(&text).unwrap();
    config.validate().unwrap();
    assert_eq!(config.chain, KinematicChain::default_chain());
}

#[test]
fn shipped_example_run_file_is_a_valid_configuration() {
    let text = fs::read_to_string(configs_dir().join("example_run.json")).unwrap();
    let config: RunConfig = serde_json::from_str(&text).unwrap();
    config.validate().unwrap();
    assert!(config.agent.her.enabled);
    assert_eq!(config.episodes, 10_000);
}
