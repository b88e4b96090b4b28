use std::path::{Path, PathBuf};

use redact_core::experiment::{preset, ExperimentConfig, SEEDED_SECTIONS};

use crate::fail::{Fail, ResultExt};

/// Where a config comes from and what to change in it.
#[derive(clap::Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML or JSON experiment config.
    #[arg(long, short, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in preset name.
    #[arg(long)]
    pub preset: Option<String>,
    /// Global seed. Section seeds are re-derived from it unless set with `--set`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides a config key, e.g. `--set train.lr=0.02` or `--set distill.schedule=w-order`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn parse_value(text: &str) -> toml::Value {
    match format!("v = {text}").parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(text.into())),
        Err(_) => toml::Value::String(text.into()),
    }
}

/// Sets `key` (dotted path) in `table`, creating tables on the way.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), Fail> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Fail::config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Fail::config(format!("override key {key:?} is malformed")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Fail::config(format!("override {key:?}: `{p}` is not a table")))?;
    }
    t.insert(
        parts[parts.len() - 1].to_string(),
        parse_value(value.trim()),
    );
    Ok(())
}

fn read_table(path: &Path) -> Result<toml::Table, Fail> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Fail::config(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Fail::config(format!("{}: {e}", path.display())))?;
        // A report is accepted in place of a config.
        let v = match v.get("config") {
            Some(c) if v.get("schema").is_some() => c.clone(),
            _ => v,
        };
        serde_json::from_value(v).map_err(|e| Fail::config(format!("{}: {e}", path.display())))
    } else {
        text.parse()
            .map_err(|e| Fail::config(format!("{}: {e}", path.display())))
    }
}

impl ConfigArgs {
    pub fn with_preset(name: &str) -> Self {
        Self {
            preset: Some(name.into()),
            ..Default::default()
        }
    }

    pub fn table(&self) -> Result<toml::Table, Fail> {
        let mut table = match (&self.config, &self.preset) {
            (Some(p), _) => read_table(p)?,
            (None, Some(name)) => {
                let text = preset(name).config()?.to_toml_string().config()?;
                text.parse().map_err(|e| Fail::config(format!("{e}")))?
            }
            (None, None) => return Err(Fail::config("give --config or --preset")),
        };
        if let Some(seed) = self.seed {
            let seed = i64::try_from(seed)
                .map_err(|_| Fail::config("--seed must fit in a signed 64-bit integer"))?;
            table.insert("seed".into(), toml::Value::Integer(seed));
            for s in SEEDED_SECTIONS {
                if let Some(toml::Value::Table(t)) = table.get_mut(s) {
                    t.remove("seed");
                }
            }
        }
        for a in &self.set {
            apply_override(&mut table, a)?;
        }
        Ok(table)
    }

    /// Loads, overrides and validates the config.
    pub fn load(&self) -> Result<ExperimentConfig, Fail> {
        let cfg = ExperimentConfig::from_toml_table(self.table()?).config()?;
        cfg.validate().config()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_are_typed_like_toml() {
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("0.5"), toml::Value::Float(0.5));
        assert_eq!(parse_value("true"), toml::Value::Boolean(true));
        assert_eq!(
            parse_value("w-order"),
            toml::Value::String("w-order".into())
        );
        assert_eq!(parse_value("\"3\""), toml::Value::String("3".into()));
        assert_eq!(
            parse_value("[\"0\", \"1\"]"),
            toml::Value::Array(vec![
                toml::Value::String("0".into()),
                toml::Value::String("1".into())
            ])
        );
    }

    #[test]
    fn nested_override_creates_tables() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "attack.iterations=4").unwrap();
        assert_eq!(t["attack"]["iterations"].as_integer(), Some(4));
        assert!(apply_override(&mut t, "attack.iterations.x=1").is_err());
        assert!(apply_override(&mut t, "noequals").is_err());
        assert!(apply_override(&mut t, "a..b=1").is_err());
    }

    #[test]
    fn seed_flag_rederives_section_seeds() {
        let base = ConfigArgs::with_preset("blue-to-red").load().unwrap();
        let args = ConfigArgs {
            seed: Some(99),
            set: vec!["eval.seed=5".into()],
            ..ConfigArgs::with_preset("blue-to-red")
        };
        let cfg = args.load().unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.eval.seed, 5);
        assert_ne!(cfg.train.seed, base.train.seed);
        assert_eq!(
            cfg.train.seed,
            redact_core::experiment::phase_seed(99, "train")
        );
    }

    #[test]
    fn invalid_values_are_config_failures() {
        let args = ConfigArgs {
            set: vec!["train.lr=-1".into()],
            ..ConfigArgs::with_preset("mnist-analog")
        };
        let e = args.load().unwrap_err();
        assert_eq!(e.code(), 2);
        assert!(e.to_string().contains("train.lr"), "{e}");
        assert_eq!(ConfigArgs::default().load().unwrap_err().code(), 2);
    }
}
