use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{AdamW, Arm, ComparisonReport, LrSchedule, TrainSettings, WEIGHT_NAMES};
use super::workload::WorkloadSpec;
use crate::{Error, Result};

/// Flat key/value experiment configuration (TOML). Unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub d_model: usize,
    pub tie_rate: f64,
    pub value_sign_bias: f64,
    pub sink_strength: f64,
    pub noise: f64,
    pub score_jitter: f64,

    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: f64,
    /// `constant` or `cosine`.
    pub schedule: String,
    pub warmup: usize,
    pub min_lr: f64,

    pub arm_a: String,
    pub arm_b: String,
    pub block_rows: usize,
    pub block_cols: usize,
    pub beta: f64,

    /// Require `|cumsum_a| ≥ x · |cumsum_b|` at the last step.
    pub assert_bias_reduction: Option<f64>,
    /// Require arm B's W_Q spectral-norm growth to be below arm A's.
    pub assert_norm_growth: bool,
    /// Require arm A's final bias cumsum to be positive.
    pub assert_bias_positive: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let w = WorkloadSpec::default();
        let o = AdamW::default();
        ExperimentConfig {
            seed: w.seed,
            n: w.n,
            d: w.d,
            d_model: w.d_model,
            tie_rate: w.tie_rate,
            value_sign_bias: w.value_sign_bias,
            sink_strength: w.sink_strength,
            noise: w.noise,
            score_jitter: w.score_jitter,
            steps: 200,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            clip: 1.0,
            schedule: "constant".into(),
            warmup: 0,
            min_lr: 0.0,
            arm_a: "lp".into(),
            arm_b: "stabilized-lp".into(),
            block_rows: 32,
            block_cols: 32,
            beta: 7.0,
            assert_bias_reduction: None,
            assert_norm_growth: false,
            assert_bias_positive: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.workload().validate()?;
        self.arms()?;
        self.schedule()?;
        for (name, v) in [("lr", self.lr), ("clip", self.clip), ("eps", self.eps)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be in [0, 1), got {v}"
                )));
            }
        }
        if let Some(r) = self.assert_bias_reduction {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "assert_bias_reduction must be positive, got {r}"
                )));
            }
        }
        Ok(())
    }

    pub fn workload(&self) -> WorkloadSpec {
        WorkloadSpec {
            n: self.n,
            d: self.d,
            d_model: self.d_model,
            seed: self.seed,
            tie_rate: self.tie_rate,
            value_sign_bias: self.value_sign_bias,
            sink_strength: self.sink_strength,
            noise: self.noise,
            score_jitter: self.score_jitter,
        }
    }

    fn schedule(&self) -> Result<LrSchedule> {
        match self.schedule.as_str() {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine {
                warmup: self.warmup,
                total: self.steps,
                min_lr: self.min_lr,
            }),
            other => Err(Error::InvalidConfig(format!(
                "schedule must be `constant` or `cosine`, got `{other}`"
            ))),
        }
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            optimizer: AdamW {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            schedule: self.schedule().unwrap_or(LrSchedule::Constant),
            clip: self.clip,
        }
    }

    pub fn arms(&self) -> Result<[Arm; 2]> {
        let arm = |name: &str| {
            let a = Arm::preset(name, self.block_rows, self.block_cols, self.beta)?;
            a.tile.validate(self.n, self.n)?;
            Ok::<_, Error>(a)
        };
        Ok([arm(&self.arm_a)?, arm(&self.arm_b)?])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Evaluates the assertion keys of `cfg` against a two-arm report.
pub fn evaluate_assertions(
    cfg: &ExperimentConfig,
    report: &ComparisonReport,
) -> Vec<AssertionOutcome> {
    let mut out = Vec::new();
    let [a, b] = match report.arms.as_slice() {
        [a, b] => [a, b],
        _ => {
            return vec![AssertionOutcome {
                name: "arms".into(),
                passed: false,
                detail: format!("expected 2 arms, found {}", report.arms.len()),
            }]
        }
    };
    if let Some(ratio) = cfg.assert_bias_reduction {
        let (ca, cb) = (a.final_cumsum().abs(), b.final_cumsum().abs());
        out.push(AssertionOutcome {
            name: "bias_reduction".into(),
            passed: ca >= ratio * cb,
            detail: format!(
                "|cumsum {}| = {ca:e}, |cumsum {}| = {cb:e}, required ratio {ratio}",
                a.arm.name, b.arm.name
            ),
        });
    }
    if cfg.assert_norm_growth {
        let name = WEIGHT_NAMES[0];
        let (ga, gb) = (
            a.norm_growth(name).unwrap_or(0.0),
            b.norm_growth(name).unwrap_or(0.0),
        );
        out.push(AssertionOutcome {
            name: "norm_growth".into(),
            passed: gb < ga,
            detail: format!(
                "{name} growth {}: {ga:e}, {}: {gb:e}",
                a.arm.name, b.arm.name
            ),
        });
    }
    if cfg.assert_bias_positive {
        let c = a.final_cumsum();
        out.push(AssertionOutcome {
            name: "bias_positive".into(),
            passed: c > 0.0,
            detail: format!("cumsum {} = {c:e}", a.arm.name),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_partial_config() {
        let cfg = ExperimentConfig::from_toml_str(
            "seed = 4\ntie_rate = 1.0\nassert_norm_growth = true\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.tie_rate, 1.0);
        assert!(cfg.assert_norm_growth);
        assert_eq!(cfg.steps, 200);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = ExperimentConfig::from_toml_str("seed = 1\n\nbogus = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "arm_a = \"fp8\"",
            "schedule = \"step\"",
            "block_rows = 0",
            "tie_rate = -1.0",
            "beta1 = 1.0",
        ] {
            assert!(ExperimentConfig::from_toml_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig {
            assert_bias_reduction: Some(10.0),
            ..ExperimentConfig::default()
        };
        assert_eq!(
            ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap(),
            cfg
        );
    }
}
