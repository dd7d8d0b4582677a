use std::path::PathBuf;

use alf_core::config::RunConfig;
use alf_core::data::FeatureSchema;

fn path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn shipped_default_config_matches_the_built_in_defaults() {
    assert_eq!(RunConfig::load(&path("default.toml")).unwrap(), RunConfig::default());
}

#[test]
fn desk_config_validates() {
    let c = RunConfig::load(&path("desk.toml")).unwrap();
    assert_eq!(c.model.layers, 2);
}

#[test]
fn shipped_benchmark_schemas_parse() {
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
    for (name, features) in [("1995_income", 14), ("blastchar", 19)] {
        let s = FeatureSchema::load(&data.join(name).join("schema.json")).unwrap();
        assert_eq!(s.features.len(), features, "{name}");
        assert_eq!(s.tasks.len(), 1);
    }
}
