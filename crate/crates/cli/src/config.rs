//! Study configuration files (JSON, unknown keys rejected).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sobolev_forge::risk::RiskConfig;
use sobolev_forge::taylor::TaylorMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StudyConfig {
    EuclideanRate(EuclideanRate),
    ManifoldRate(ManifoldRate),
    Risk(RiskStudy),
    Adversarial(RiskStudy),
    Audit(AuditStudy),
}

impl StudyConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::EuclideanRate(_) => "euclidean-rate",
            Self::ManifoldRate(_) => "manifold-rate",
            Self::Risk(_) => "risk",
            Self::Adversarial(_) => "adversarial",
            Self::Audit(_) => "audit",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Self::EuclideanRate(c) => c.seed,
            Self::ManifoldRate(c) => c.seed,
            Self::Risk(c) | Self::Adversarial(c) => c.seed,
            Self::Audit(_) => None,
        }
    }

    pub fn out(&self) -> Option<&Path> {
        match self {
            Self::EuclideanRate(c) => c.out.as_deref(),
            Self::ManifoldRate(c) => c.out.as_deref(),
            Self::Risk(c) | Self::Adversarial(c) => c.out.as_deref(),
            Self::Audit(c) => c.out.as_deref(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: StudyConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = |name: &str, v: &[usize]| {
            if v.contains(&0) {
                Err(format!("field `{name}` must hold positive integers"))
            } else {
                Ok(())
            }
        };
        match self {
            Self::EuclideanRate(c) => {
                if c.alpha == 0 || c.dim == 0 {
                    return Err("fields `alpha` and `dim` must be positive".into());
                }
                match (&c.n, &c.mj) {
                    (Some(n), None) if n.len() >= 2 => positive("n", n)?,
                    (None, Some(mj)) if mj.len() >= 2 => {
                        positive("mj", &mj.iter().flatten().copied().collect::<Vec<_>>())?
                    }
                    _ => return Err("exactly one of `n` or `mj` must be given, with at least two entries".into()),
                }
                if let Some(s) = c.s {
                    if !(s > 0.0 && s < 1.0) {
                        return Err(format!("field `s` must lie in (0, 1), got {s}"));
                    }
                }
                if c.orders.iter().any(|&k| k > 1) {
                    return Err("field `orders` accepts only 0 and 1".into());
                }
                if c.resolution < 2 {
                    return Err("field `resolution` must be at least 2".into());
                }
            }
            Self::ManifoldRate(c) => {
                if c.alpha == 0 {
                    return Err("field `alpha` must be positive".into());
                }
                if c.n.len() < 2 {
                    return Err("field `n` needs at least two entries".into());
                }
                positive("n", &c.n)?;
                if c.orders.iter().any(|&k| k > 1) {
                    return Err("field `orders` accepts only 0 and 1".into());
                }
                if !(c.radius > 0.0) {
                    return Err("field `radius` must be positive".into());
                }
            }
            Self::Risk(c) | Self::Adversarial(c) => {
                if c.alpha == 0 || c.dim == 0 {
                    return Err("fields `alpha` and `dim` must be positive".into());
                }
                c.risk.validate().map_err(|e| format!("field `risk`: {e}"))?;
            }
            Self::Audit(_) => {}
        }
        Ok(())
    }
}

/// Declared slope window for one error order (k, or s for fractional).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlopeCheck {
    pub order: f64,
    pub min: f64,
    pub max: f64,
}

/// Window of half-width 0.6 around the nominal slope -(alpha - order).
pub fn default_checks(alpha: usize, orders: &[f64]) -> Vec<SlopeCheck> {
    orders
        .iter()
        .map(|&o| {
            let nominal = -(alpha as f64 - o);
            SlopeCheck {
                order: o,
                min: nominal - 0.6,
                max: nominal + 0.6,
            }
        })
        .collect()
}

fn orders01() -> Vec<usize> {
    vec![0, 1]
}

fn yes() -> bool {
    true
}

fn res_euclid() -> usize {
    200
}

fn res_manifold() -> usize {
    400
}

fn radius() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Evaluate {
    /// The functional evaluator (equal to the network within the compile check).
    #[default]
    Functional,
    /// The compiled residual network.
    Network,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EuclideanRate {
    pub target: String,
    pub alpha: usize,
    pub dim: usize,
    #[serde(default = "orders01")]
    pub orders: Vec<usize>,
    /// Optional fractional order for the W^{s,inf} error.
    #[serde(default)]
    pub s: Option<f64>,
    /// Integrability exponent; absent means infinity.
    #[serde(default)]
    pub p: Option<u32>,
    /// Grid resolutions N (M~ = N, J~ = N^(D-1)).
    #[serde(default)]
    pub n: Option<Vec<usize>>,
    /// Explicit (M~, J~) pairs.
    #[serde(default)]
    pub mj: Option<Vec<[usize; 2]>>,
    #[serde(default = "res_euclid")]
    pub resolution: usize,
    #[serde(default)]
    pub mode: TaylorMode,
    #[serde(default = "yes")]
    pub compile: bool,
    #[serde(default)]
    pub evaluate: Evaluate,
    #[serde(default)]
    pub checks: Vec<SlopeCheck>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldRate {
    pub manifold: String,
    pub ambient: usize,
    pub target: String,
    pub alpha: usize,
    #[serde(default = "radius")]
    pub radius: f64,
    pub n: Vec<usize>,
    #[serde(default = "orders01")]
    pub orders: Vec<usize>,
    #[serde(default = "res_manifold")]
    pub resolution: usize,
    #[serde(default)]
    pub mode: TaylorMode,
    #[serde(default = "yes")]
    pub compile: bool,
    #[serde(default)]
    pub checks: Vec<SlopeCheck>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskStudy {
    pub target: String,
    pub alpha: usize,
    pub dim: usize,
    pub risk: RiskConfig,
    #[serde(default)]
    pub evaluate: Evaluate,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditStudy {
    pub network: PathBuf,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_euclidean() {
        let c = StudyConfig::parse(r#"{"kind":"euclidean-rate","target":"sinprod","alpha":2,"dim":2,"n":[2,4,8]}"#)
            .unwrap();
        let StudyConfig::EuclideanRate(e) = c else { panic!() };
        assert_eq!(e.orders, vec![0, 1]);
        assert_eq!(e.resolution, 200);
    }

    #[test]
    fn missing_and_unknown_fields() {
        let err = StudyConfig::parse(r#"{"kind":"euclidean-rate","target":"sinprod","dim":2,"n":[2,4]}"#).unwrap_err();
        assert!(err.contains("alpha"), "{err}");
        let err = StudyConfig::parse(r#"{"kind":"audit","network":"x","colour":1}"#).unwrap_err();
        assert!(err.contains("colour"), "{err}");
        assert!(StudyConfig::parse(r#"{"kind":"euclidean-rate","target":"t","alpha":2,"dim":2,"n":[4]}"#).is_err());
    }

    #[test]
    fn default_windows() {
        let c = default_checks(2, &[0.0, 1.0]);
        assert_eq!((c[0].min, c[0].max), (-2.6, -1.4));
        assert_eq!((c[1].min, c[1].max), (-1.6, -0.4));
    }
}
