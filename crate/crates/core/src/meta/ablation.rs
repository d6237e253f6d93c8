//! The M0–M4 ablation variants as config overrides.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Plain cross-entropy.
    M0,
    /// Cross-entropy plus DECE on the training batch, no meta-learning.
    M1,
    /// Meta-learned vector LS with a CE meta-objective.
    M2,
    /// Meta-learned vector LS with an MMCE meta-objective.
    M3,
    /// Meta-learned vector LS with a DECE meta-objective.
    M4,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::M0, Variant::M1, Variant::M2, Variant::M3, Variant::M4];

    pub fn name(self) -> &'static str {
        match self {
            Variant::M0 => "M0",
            Variant::M1 => "M1",
            Variant::M2 => "M2",
            Variant::M3 => "M3",
            Variant::M4 => "M4",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::M0 => "vanilla CE",
            Variant::M1 => "CE + DECE multi-task",
            Variant::M2 => "meta LS vector, CE meta-objective",
            Variant::M3 => "meta LS vector, MMCE meta-objective",
            Variant::M4 => "meta LS vector, DECE meta-objective",
        }
    }

    /// `key=value` overrides applied on top of the base config.
    pub fn overrides(self) -> Vec<String> {
        let v: &[&str] = match self {
            Variant::M0 => &["loss.kind=ce", "meta.enabled=false"],
            Variant::M1 => &["loss.kind=ce_plus_dece", "meta.enabled=false"],
            Variant::M2 => &[
                "loss.kind=ce",
                "meta.enabled=true",
                "meta.hyper=ls_vector",
                "meta.objective=ce",
            ],
            Variant::M3 => &[
                "loss.kind=ce",
                "meta.enabled=true",
                "meta.hyper=ls_vector",
                "meta.objective=mmce",
            ],
            Variant::M4 => &[
                "loss.kind=ce",
                "meta.enabled=true",
                "meta.hyper=ls_vector",
                "meta.objective=dece",
            ],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation variant `{s}` (expected M0..M4)")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::{LossKind, MetaObjective, TrainConfig};

    #[test]
    fn variants_parse_and_apply() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(&v.name().to_lowercase()).unwrap(), v);
            let cfg = TrainConfig::with_overrides(serde_json::json!({}), &v.overrides()).unwrap();
            assert_eq!(cfg.meta.enabled, matches!(v, Variant::M2 | Variant::M3 | Variant::M4));
        }
        let m1 = TrainConfig::with_overrides(serde_json::json!({}), &Variant::M1.overrides()).unwrap();
        assert_eq!(m1.loss.kind, LossKind::CePlusDece);
        let m3 = TrainConfig::with_overrides(serde_json::json!({}), &Variant::M3.overrides()).unwrap();
        assert_eq!(m3.meta.objective, MetaObjective::Mmce);
        assert!(Variant::parse("M9").is_err());
    }
}
