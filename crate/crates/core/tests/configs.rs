use std::path::PathBuf;

use redact_core::experiment::{preset, ExperimentConfig, PRESETS};

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_match_presets() {
    for name in PRESETS {
        let path = configs_dir().join(format!("{name}.toml"));
        let cfg =
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
        assert_eq!(cfg, preset(name).unwrap(), "{name}");
    }
}

#[test]
fn omitted_section_seeds_come_from_the_global_seed() {
    let text = std::fs::read_to_string(configs_dir().join("blue-to-red.toml")).unwrap();
    let stripped: String = text
        .lines()
        .filter(|l| !l.starts_with("seed = ") || l.starts_with("seed = 7"))
        .collect::<Vec<_>>()
        .join("\n");
    let cfg = ExperimentConfig::from_toml_str(&stripped).unwrap();
    assert_eq!(cfg, preset("blue-to-red").unwrap());
}
