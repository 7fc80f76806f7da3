//! Experiment configuration (TOML).
//!
//! ```toml
//! name = "baseline"
//! seed = 1
//! trials = 5
//! epochs = 5
//!
//! [dataset]
//! kind = "mnist"
//!
//! [model]
//! hidden = [512, 256, 128]
//! dropout_rate = 0.5
//!
//! [optimizer]
//! lr = 0.001
//!
//! [attack.policy]
//! kind = "min_activation"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::BlobSpec;
use crate::dropout::{MaskPolicy, OneShot};
use crate::error::{Error, Result};
use crate::metrics::BestTrial;
use crate::nn::{AdamConfig, ModelSpec};

fn default_name() -> String {
    "experiment".into()
}

fn default_batch() -> usize {
    128
}

fn default_train_frac() -> f64 {
    0.9
}

fn default_trials() -> usize {
    1
}

fn default_eval_chunk() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepAxes>,
    #[serde(default)]
    pub report: ReportMode,
    #[serde(default)]
    pub audit: AuditConfig,
    /// Rows per evaluation-mode forward pass.
    #[serde(default = "default_eval_chunk")]
    pub eval_chunk: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Mnist {
        /// Directory holding the four IDX files. Defaults to `$MNIST_DIR`, then `data/mnist`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
        /// Use only the first `n` training images.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
    },
    Blobs {
        #[serde(flatten)]
        spec: BlobSpec,
        test_per_class: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub dropout_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default)]
    pub policy: MaskPolicy,
    /// Attacked dropout slot; the last one when absent. Other slots run honest dropout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<usize>,
    /// Dropout rate of the attacked slot; the model rate when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
}

/// Each present axis must be non-empty; the grid is their cross product.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_neuron: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_sample: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub one_shot_epoch: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReportMode {
    #[default]
    Mean,
    Best {
        select: BestTrial,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    /// Per-invocation mask audit CSV; `{trial}` in the file name is replaced by the trial index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    /// Also keep every attacked-slot mask (large).
    #[serde(default)]
    pub dump_masks: bool,
}

/// One concrete value per sweep axis, in axis order.
pub type GridPoint = Vec<(String, f64)>;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn classes(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Mnist { .. } => 10,
            DatasetConfig::Blobs { spec, .. } => spec.classes,
        }
    }

    pub fn input_width(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Mnist { .. } => 784,
            DatasetConfig::Blobs { spec, .. } => spec.dim,
        }
    }

    /// Network layout with every slot at the attacked rate where it applies.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut widths = vec![self.input_width()];
        widths.extend(&self.model.hidden);
        widths.push(self.classes());
        let mut spec = ModelSpec::mlp(&widths, self.model.dropout_rate)?;
        let slot = self.attacked_slot(&spec)?;
        if let Some(rate) = self.attack.rate {
            spec.dropout[slot].rate = rate;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn attacked_slot(&self, spec: &ModelSpec) -> Result<usize> {
        let n = spec.dropout.len();
        if n == 0 {
            return Err(Error::config("model.hidden", "need at least one hidden layer for a dropout slot"));
        }
        match self.attack.slot {
            None => Ok(n - 1),
            Some(s) if s < n => Ok(s),
            Some(s) => Err(Error::config("attack.slot", format!("slot {s} but the model has {n}"))),
        }
    }

    /// Checks every field that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("trials", "need at least one trial"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "need at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::config("train_frac", format!("{} outside (0, 1)", self.train_frac)));
        }
        if self.eval_chunk == 0 {
            return Err(Error::config("eval_chunk", "must be positive"));
        }
        if let DatasetConfig::Blobs { spec, test_per_class } = &self.dataset {
            if spec.classes < 2 || spec.dim < spec.classes || spec.per_class == 0 || *test_per_class == 0 {
                return Err(Error::config(
                    "dataset",
                    "blobs need classes >= 2, dim >= classes and non-empty splits",
                ));
            }
            if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
                return Err(Error::config("dataset.spread", "must be finite and non-negative"));
            }
        }
        self.optimizer.validate()?;
        if self.sweep.is_some() {
            for point in self.grid()? {
                self.at_point(&point)?.validate_point()?;
            }
        } else {
            self.validate_point()?;
        }
        Ok(())
    }

    fn validate_point(&self) -> Result<()> {
        let spec = self.model_spec()?;
        let slot = self.attacked_slot(&spec)?;
        self.attack.policy.validate()?;
        let width = spec.slot_width(slot).expect("slot exists");
        let classes = self.classes();
        match &self.attack.policy {
            MaskPolicy::SampleDropping { targets, .. } => {
                if let Some(t) = targets.iter().find(|&&t| t >= classes) {
                    return Err(Error::config("attack.policy.targets", format!("class {t} outside 0..{classes}")));
                }
            }
            MaskPolicy::NeuronSeparation {
                target,
                p_neuron,
                one_shot,
                ..
            } => {
                if *target >= classes {
                    return Err(Error::config("attack.policy.target", format!("class {target} outside 0..{classes}")));
                }
                crate::dropout::SeparationLayout::new(width, *p_neuron)?;
                if let Some(shot) = one_shot {
                    if shot.epoch > self.epochs {
                        return Err(Error::config(
                            "attack.policy.one_shot.epoch",
                            format!("epoch {} after the last epoch {}", shot.epoch, self.epochs),
                        ));
                    }
                }
            }
            MaskPolicy::BlindSeparation { p_neuron, .. } => {
                crate::dropout::SeparationLayout::new(width, *p_neuron)?;
            }
            MaskPolicy::Honest | MaskPolicy::MinActivation => {}
        }
        Ok(())
    }

    /// Cross product of the sweep axes in the order r, r0, p_neuron, p_sample,
    /// one_shot_epoch. A config without a sweep has one empty point.
    pub fn grid(&self) -> Result<Vec<GridPoint>> {
        let Some(s) = &self.sweep else {
            return Ok(vec![Vec::new()]);
        };
        let axes: Vec<(&str, Vec<f64>)> = [
            ("r", s.r.clone()),
            ("r0", s.r0.clone()),
            ("p_neuron", s.p_neuron.clone()),
            ("p_sample", s.p_sample.clone()),
            ("one_shot_epoch", s.one_shot_epoch.as_ref().map(|v| v.iter().map(|&e| e as f64).collect())),
        ]
        .into_iter()
        .filter_map(|(n, v)| v.map(|v| (n, v)))
        .collect();
        if axes.is_empty() {
            return Err(Error::config("sweep", "no axes given"));
        }
        if let Some((name, _)) = axes.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::config(format!("sweep.{name}"), "axis is empty"));
        }
        let mut grid: Vec<GridPoint> = vec![Vec::new()];
        for (name, values) in axes {
            grid = grid
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push((name.to_string(), v));
                        q
                    })
                })
                .collect();
        }
        Ok(grid)
    }

    /// The concrete (sweep-free) config for one grid point.
    pub fn at_point(&self, point: &GridPoint) -> Result<ExperimentConfig> {
        let mut cfg = self.clone();
        cfg.sweep = None;
        for (axis, v) in point {
            let v = *v;
            let field = format!("sweep.{axis}");
            let mismatch = || Error::config(field.clone(), format!("axis does not apply to the {} policy", self.attack.policy.name()));
            match (axis.as_str(), &mut cfg.attack.policy) {
                ("r", _) => cfg.attack.rate = Some(v),
                ("r0", MaskPolicy::SampleDropping { r0, .. }) => *r0 = v,
                ("p_neuron", MaskPolicy::NeuronSeparation { p_neuron, .. })
                | ("p_neuron", MaskPolicy::BlindSeparation { p_neuron, .. }) => *p_neuron = v,
                ("p_sample", MaskPolicy::NeuronSeparation { p_sample, .. }) => *p_sample = v,
                ("one_shot_epoch", MaskPolicy::NeuronSeparation { one_shot, .. }) => {
                    if v < 1.0 || v.fract() != 0.0 {
                        return Err(Error::config(field, format!("{v} is not an epoch number")));
                    }
                    let sample_count = one_shot.map_or(10, |s| s.sample_count);
                    *one_shot = Some(OneShot {
                        epoch: v as usize,
                        sample_count,
                    });
                }
                _ => return Err(mismatch()),
            }
        }
        Ok(cfg)
    }
}

/// MNIST directory: explicit setting, then `$MNIST_DIR`, then `data/mnist`
/// relative to the working directory.
pub fn resolve_mnist_dir(configured: Option<&Path>) -> PathBuf {
    if let Some(p) = configured {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os("MNIST_DIR") {
        return PathBuf::from(p);
    }
    PathBuf::from("data/mnist")
}
