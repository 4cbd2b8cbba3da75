//! Presets and layered configuration: preset, then TOML file, then flags.

use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use layersep::loss::LossWeights;
pub use layersep::preset::{Preset, Settings};

use crate::CliError;

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn overlay<T: Serialize + DeserializeOwned>(base: &T, file: toml::Value, what: &str) -> Result<T, CliError> {
    let mut v = toml::Value::try_from(base).map_err(|e| CliError::Usage(format!("{what}: {e}")))?;
    merge(&mut v, file);
    v.try_into().map_err(|e: toml::de::Error| CliError::Usage(format!("{what}: {e}")))
}

/// Preset settings with an optional TOML file laid over them.
pub fn load(preset: Preset, file: Option<&Path>) -> Result<Settings, CliError> {
    let settings = preset.settings();
    let Some(path) = file else {
        return Ok(settings);
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("{}: {e}", path.display())))?;
    overlay(&settings, toml::Value::Table(table), &path.display().to_string())
}

// `--weights.*` flags; unset fields leave the config alone.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct WeightArgs {
    #[arg(long = "weights.lambda0", value_name = "F")]
    pub lambda0: Option<f64>,
    #[arg(long = "weights.lambda1", value_name = "F")]
    pub lambda1: Option<f64>,
    #[arg(long = "weights.lambda2", value_name = "F")]
    pub lambda2: Option<f64>,
    #[arg(long = "weights.lambda3", value_name = "F")]
    pub lambda3: Option<f64>,
    #[arg(long = "weights.lambda4", value_name = "F")]
    pub lambda4: Option<f64>,
    #[arg(long = "weights.lambda5", value_name = "F")]
    pub lambda5: Option<f64>,
    #[arg(long = "weights.lambda6", value_name = "F")]
    pub lambda6: Option<f64>,
    #[arg(long = "weights.alpha", value_name = "F")]
    pub alpha: Option<f64>,
    #[arg(long = "weights.w1", value_name = "F")]
    pub w1: Option<f64>,
    #[arg(long = "weights.w2", value_name = "F")]
    pub w2: Option<f64>,
}

impl WeightArgs {
    pub fn apply(&self, w: &mut LossWeights) {
        let pairs = [
            (self.lambda0, &mut w.lambda0),
            (self.lambda1, &mut w.lambda1),
            (self.lambda2, &mut w.lambda2),
            (self.lambda3, &mut w.lambda3),
            (self.lambda4, &mut w.lambda4),
            (self.lambda5, &mut w.lambda5),
            (self.lambda6, &mut w.lambda6),
            (self.alpha, &mut w.alpha),
            (self.w1, &mut w.w1),
            (self.w2, &mut w.w2),
        ];
        for (src, dst) in pairs {
            if let Some(v) = src {
                *dst = v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_only_what_it_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[train]\nlearning_rate = 0.0002\n[train.weights]\nalpha = 2.0\n[render]\nn_train = 7\n").unwrap();
        let s = load(Preset::Smoke, Some(&path)).unwrap();
        assert_eq!(s.train.learning_rate, 2e-4);
        assert_eq!(s.train.weights.alpha, 2.0);
        assert_eq!(s.train.weights.lambda0, LossWeights::default().lambda0);
        assert_eq!(s.train.max_steps, 500);
        assert_eq!(s.render.n_train, 7);
        assert_eq!(s.render.image_size, 32);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[train]\nlearning_rat = 0.1\n").unwrap();
        assert!(matches!(load(Preset::Smoke, Some(&path)), Err(CliError::Usage(_))));
        std::fs::write(&path, "[train\n").unwrap();
        assert!(matches!(load(Preset::Smoke, Some(&path)), Err(CliError::Usage(_))));
    }

    #[test]
    fn presets_round_trip_through_toml() {
        for p in Preset::ALL {
            let s = p.settings();
            let back: Settings = toml::Value::try_from(&s).unwrap().try_into().unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn weight_flags_override_selectively() {
        let mut w = LossWeights::default();
        WeightArgs {
            alpha: Some(1.0),
            w2: Some(3.0),
            ..WeightArgs::default()
        }
        .apply(&mut w);
        assert_eq!((w.alpha, w.w2, w.lambda0), (1.0, 3.0, 5.0));
    }
}
