use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::BlobsSpec;
use crate::dece::{DeceConfig, MMCE_KERNEL_WIDTH};
use crate::error::{Error, Result};
use crate::losses::HyperKind;

pub const CONFIG_VERSION: u32 = 1;

/// Full description of a training run. Every field has a default, so `{}` is
/// a valid config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub version: u32,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub meta: MetaConfig,
    pub dece: DeceConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            meta: MetaConfig::default(),
            dece: DeceConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Synthetic training pool, used when `train_csv` is unset.
    pub blobs: BlobsSpec,
    /// Size of the separately drawn synthetic test set.
    pub test_n: usize,
    /// Seed of the data draw and split; the run seed when unset.
    pub seed: Option<u64>,
    /// Train / validation / meta-validation fractions of the pool.
    pub splits: [f64; 3],
    pub train_csv: Option<PathBuf>,
    /// Required together with `train_csv`.
    pub test_csv: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            blobs: BlobsSpec::default(),
            test_n: 4000,
            seed: None,
            splits: [0.8, 0.1, 0.1],
            train_csv: None,
            test_csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by
    /// `lr_drop_factor`.
    pub lr_drops: Vec<usize>,
    pub lr_drop_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drops: vec![25, 40],
            lr_drop_factor: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drops.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_drop_factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Brier,
    Focal,
    Flsd53,
    /// Cross-entropy with fixed label smoothing `ls_value`.
    LabelSmoothing,
    /// Cross-entropy plus `dece_weight` times DECE on the training batch.
    CePlusDece,
    /// Cross-entropy plus `mmce_weight` times MMCE on the training batch.
    CePlusMmce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub focal_gamma: f64,
    pub ls_value: f64,
    pub dece_weight: f64,
    pub mmce_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Ce,
            focal_gamma: 3.0,
            ls_value: 0.05,
            dece_weight: 1.0,
            mmce_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaObjective {
    Dece,
    Ce,
    Mmce,
    DecePlusCe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub enabled: bool,
    pub objective: MetaObjective,
    pub hyper: HyperKind,
    /// Adam learning rate for `ω`.
    pub lr: f64,
    /// One meta update every `stride` base steps.
    pub stride: usize,
    /// Weight of the CE term in `dece_plus_ce`.
    pub ce_weight: f64,
    pub mmce_width: f64,
    /// Corrupt each meta-validation batch with a corruption drawn from the
    /// training pool.
    pub multi_domain: bool,
    /// Record every n-th `ω` in the trajectory.
    pub trajectory_stride: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            objective: MetaObjective::Dece,
            hyper: HyperKind::LsVector,
            lr: 0.001,
            stride: 1,
            ce_weight: 1.0,
            mmce_width: MMCE_KERNEL_WIDTH,
            multi_domain: false,
            trajectory_stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub bins: usize,
    /// Keep the parameters of the epoch with the best validation accuracy.
    pub early_stopping: bool,
    /// Also evaluate on the held-out corrupted test domains.
    pub corrupted_domains: bool,
    /// Keep a parameter snapshot every n epochs (0 disables).
    pub snapshot_every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bins: 15,
            early_stopping: false,
            corrupted_domains: false,
            snapshot_every: 0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        let total: f64 = self.data.splits.iter().sum();
        if self.data.splits.iter().any(|f| !(*f > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "data.splits must be positive and sum to 1, got {:?}",
                self.data.splits
            )));
        }
        if self.data.train_csv.is_some() != self.data.test_csv.is_some() {
            return Err(Error::Config(
                "data.train_csv and data.test_csv must be set together".into(),
            ));
        }
        if self.data.train_csv.is_none() {
            self.data.blobs.validate()?;
            if self.data.test_n == 0 {
                return Err(Error::Config("data.test_n must be positive".into()));
            }
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("model.hidden sizes must be positive".into()));
        }
        let o = &self.optim;
        if o.epochs == 0 || o.batch_size == 0 {
            return Err(Error::Config(
                "optim.epochs and optim.batch_size must be positive".into(),
            ));
        }
        positive("optim.lr", o.lr)?;
        positive("optim.lr_drop_factor", o.lr_drop_factor)?;
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config("optim.momentum must lie in [0, 1)".into()));
        }
        if !(o.weight_decay >= 0.0) {
            return Err(Error::Config("optim.weight_decay must be >= 0".into()));
        }
        let l = &self.loss;
        if !(l.focal_gamma >= 0.0) {
            return Err(Error::Config("loss.focal_gamma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&l.ls_value) {
            return Err(Error::Config("loss.ls_value must lie in [0, 1)".into()));
        }
        if !(l.dece_weight >= 0.0 && l.mmce_weight >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        self.dece.validate()?;
        let m = &self.meta;
        if m.enabled {
            if l.kind != LossKind::Ce {
                return Err(Error::Config("meta-learning requires loss.kind = ce".into()));
            }
            if !(m.lr >= 0.0 && m.lr.is_finite()) {
                return Err(Error::Config("meta.lr must be >= 0".into()));
            }
            positive("meta.mmce_width", m.mmce_width)?;
            if !(m.ce_weight >= 0.0) {
                return Err(Error::Config("meta.ce_weight must be >= 0".into()));
            }
        } else if m.multi_domain {
            return Err(Error::Config("meta.multi_domain requires meta.enabled".into()));
        }
        if m.stride == 0 || m.trajectory_stride == 0 {
            return Err(Error::Config(
                "meta.stride and meta.trajectory_stride must be positive".into(),
            ));
        }
        if self.eval.bins == 0 {
            return Err(Error::Config("eval.bins must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::with_overrides(value, &[])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `key.path=value` overrides on top of `base` (a JSON object,
    /// possibly partial) and parses the result. Values are read as JSON when
    /// possible and as strings otherwise.
    pub fn with_overrides(base: Value, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        merge(&mut value, base);
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
            let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key, parsed)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (dst, src) => *dst = src,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked above");
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
    }
    unreachable!("split always yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = TrainConfig::from_json("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.meta.lr, 0.001);
        assert_eq!(cfg.dece, DeceConfig::default());
        assert_eq!(cfg.data.splits, [0.8, 0.1, 0.1]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(TrainConfig::from_json(r#"{"optim": {"epoch": 3}}"#).is_err());
        assert!(TrainConfig::with_overrides(json!({}), &["optim.epoch=3".into()]).is_err());
        assert!(TrainConfig::with_overrides(json!({}), &["nonsense".into()]).is_err());
    }

    #[test]
    fn overrides_win_over_file_values() {
        let cfg = TrainConfig::with_overrides(
            json!({"optim": {"epochs": 5, "lr": 0.3}, "meta": {"enabled": true}}),
            &[
                "optim.epochs=7".into(),
                "meta.objective=mmce".into(),
                "data.seed=4".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.optim.epochs, 7);
        assert_eq!(cfg.optim.lr, 0.3);
        assert_eq!(cfg.meta.objective, MetaObjective::Mmce);
        assert_eq!(cfg.data.seed, Some(4));
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let bad = [
            json!({"data": {"splits": [0.5, 0.3, 0.1]}}),
            json!({"meta": {"multi_domain": true}}),
            json!({"meta": {"enabled": true}, "loss": {"kind": "focal"}}),
            json!({"optim": {"epochs": 0}}),
            json!({"dece": {"bins": 0, "tau_a": 100.0, "tau_b": 0.01}}),
            json!({"data": {"train_csv": "x.csv"}}),
            json!({"version": 2}),
        ];
        for b in bad {
            assert!(TrainConfig::with_overrides(b.clone(), &[]).is_err(), "{b}");
        }
    }

    #[test]
    fn learning_rate_schedule() {
        let o = OptimConfig {
            lr_drops: vec![10, 20],
            ..OptimConfig::default()
        };
        assert_eq!(o.lr_at(0), 0.1);
        assert!((o.lr_at(10) - 0.01).abs() < 1e-15);
        assert!((o.lr_at(25) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip() {
        let cfg = TrainConfig::with_overrides(json!({}), &["meta.enabled=true".into()]).unwrap();
        assert_eq!(TrainConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }
}
