//! Run configuration: one JSON file describing the model, the training
//! settings, and where the data comes from.
//!
//! Unknown keys are rejected everywhere so a typo like `"lamda"` fails
//! loudly instead of silently training with a default.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    gen_two_circles, load_csv, load_idx, standardize, subset, Dataset, Standardizer,
};
use crate::error::{Error, Result};
use crate::model::MlpSpec;
use crate::trainer::TrainConfig;

fn default_r_inner() -> f64 {
    1.0
}

fn default_r_outer() -> f64 {
    2.0
}

fn default_noise_sigma() -> f64 {
    0.1
}

/// Which labeled instances to keep from a loaded dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetConfig {
    /// True labels to keep, remapped to 0.. in this order.
    pub classes: Vec<usize>,
    /// Instances kept per class.
    pub per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

/// A dataset source. The `source` tag selects the variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Two concentric noisy circles, labels inner=0 / outer=1.
    TwoCircles {
        n_per_class: usize,
        #[serde(default = "default_r_inner")]
        r_inner: f64,
        #[serde(default = "default_r_outer")]
        r_outer: f64,
        #[serde(default = "default_noise_sigma")]
        noise_sigma: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        standardize: bool,
    },
    /// IDX image/label file pair (the MNIST container format).
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subset: Option<SubsetConfig>,
        #[serde(default)]
        standardize: bool,
    },
    /// Headered CSV of feature columns with an optional label column.
    Csv {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label_column: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subset: Option<SubsetConfig>,
        #[serde(default)]
        standardize: bool,
    },
}

/// Loads the configured dataset. When standardization is requested the
/// returned [`Standardizer`] was fitted on exactly the returned instances
/// and must travel with the model to apply to future data.
pub fn load_dataset(cfg: &DataConfig) -> Result<(Dataset, Option<Standardizer>)> {
    let (ds, wants_std) = match cfg {
        DataConfig::TwoCircles {
            n_per_class,
            r_inner,
            r_outer,
            noise_sigma,
            seed,
            standardize,
        } => (
            gen_two_circles(*n_per_class, *r_inner, *r_outer, *noise_sigma, *seed)?,
            *standardize,
        ),
        DataConfig::Idx {
            images,
            labels,
            subset: sub,
            standardize,
        } => {
            let mut ds = load_idx(images, labels)?;
            if let Some(s) = sub {
                ds = subset(&ds, &s.classes, s.per_class, s.seed)?;
            }
            (ds, *standardize)
        }
        DataConfig::Csv {
            path,
            label_column,
            subset: sub,
            standardize,
        } => {
            let mut ds = load_csv(path, label_column.as_deref())?;
            if let Some(s) = sub {
                ds = subset(&ds, &s.classes, s.per_class, s.seed)?;
            }
            (ds, *standardize)
        }
    };
    if wants_std {
        let (ds, st) = standardize(&ds)?;
        Ok((ds, Some(st)))
    } else {
        Ok((ds, None))
    }
}

/// Everything one `train` invocation needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: MlpSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Directory receiving checkpoint, history and manifest files.
    pub out_dir: PathBuf,
    /// Also write `checkpoint-epoch-N.json` every N epochs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let file = File::open(path).map_err(|e| {
            Error::Config(format!("cannot open config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate(self.model.num_classes)?;
        if let Some(k) = self.checkpoint_every {
            if k == 0 {
                return Err(Error::Config(
                    "checkpoint_every must be at least 1".to_string(),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confidence::ConfidenceConfig;
    use crate::divergence::DivergenceKind;
    use crate::smoothness::SmoothnessConfig;

    fn minimal_json() -> String {
        r#"{
            "model": {"input_dim": 2, "hidden_dims": [8], "num_classes": 2},
            "train": {"epochs": 1, "confidence": {"batch_size": 4}},
            "data": {"source": "two-circles", "n_per_class": 10},
            "out_dir": "/tmp/run"
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: RunConfig = serde_json::from_str(&minimal_json()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.train.lambda, 0.0);
        assert!(matches!(
            cfg.train.confidence.divergence,
            DivergenceKind::Kl
        ));
        assert_eq!(cfg.train.smoothness.k, 4);
        assert_eq!(cfg.train.smoothness.grid.len(), 10);
        match &cfg.data {
            DataConfig::TwoCircles {
                r_inner, r_outer, ..
            } => {
                assert_eq!(*r_inner, 1.0);
                assert_eq!(*r_outer, 2.0);
            }
            other => panic!("wrong variant: {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = minimal_json().replace("\"epochs\": 1", "\"epochs\": 1, \"lamda\": 3");
        assert!(serde_json::from_str::<RunConfig>(&bad).is_err());
    }

    #[test]
    fn undersized_batches_fail_validation() {
        let bad = minimal_json().replace("\"batch_size\": 4", "\"batch_size\": 1");
        let cfg: RunConfig = serde_json::from_str(&bad).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn two_circles_loading_counts_and_standardizes() {
        let cfg = DataConfig::TwoCircles {
            n_per_class: 25,
            r_inner: 1.0,
            r_outer: 2.0,
            noise_sigma: 0.05,
            seed: 3,
            standardize: true,
        };
        let (ds, st) = load_dataset(&cfg).unwrap();
        assert_eq!(ds.len(), 50);
        assert_eq!(ds.dim(), 2);
        assert!(st.is_some());
        // Standardization is pooled over all values, so the pooled mean is 0
        // and the pooled variance 1 (per-column moments are not).
        let values = ds.x.data();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9, "pooled mean {mean}");
        assert!((var - 1.0).abs() < 1e-9, "pooled var {var}");
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig {
            model: MlpSpec::new(2, vec![8, 4], 2),
            train: TrainConfig {
                lambda: 1000.0,
                epochs: 5,
                learning_rate: 1e-3,
                adam_beta1: 0.9,
                adam_beta2: 0.999,
                adam_eps: 1e-8,
                seed: 7,
                confidence: ConfidenceConfig {
                    batch_size: 16,
                    divergence: DivergenceKind::Kl,
                    epsilon: 1e-4,
                },
                smoothness: SmoothnessConfig::with_rho(0.04),
            },
            data: DataConfig::TwoCircles {
                n_per_class: 300,
                r_inner: 1.0,
                r_outer: 2.0,
                noise_sigma: 0.1,
                seed: 0,
                standardize: false,
            },
            out_dir: PathBuf::from("/tmp/out"),
            checkpoint_every: Some(10),
        };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }
}
