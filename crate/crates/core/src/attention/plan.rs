use std::fmt;

use serde::{Deserialize, Serialize};

use crate::numerics::Precision;

/// Which output (or identity) the backward pass derives `δ` from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeltaSource {
    /// `rowsum(dO ∘ O_lp)`, the efficient formulation.
    #[serde(rename = "dO_O_lp")]
    LowPrecisionOutput,
    /// `rowsum(dO ∘ O_hp)` with `O` computed in f32 during the forward pass.
    #[serde(rename = "dO_O_hp")]
    HighPrecisionOutput,
    /// `rowsum(dP ∘ P)` with `dP = dO Vᵀ`.
    #[serde(rename = "dP_P")]
    DpP,
    /// `rowsum(dO ∘ O)` with `O` recomputed as `P V` in f32 during backward.
    #[serde(rename = "recompute_PV_hp")]
    RecomputePvHp,
}

impl DeltaSource {
    pub const ALL: [DeltaSource; 4] = [
        DeltaSource::LowPrecisionOutput,
        DeltaSource::HighPrecisionOutput,
        DeltaSource::DpP,
        DeltaSource::RecomputePvHp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DeltaSource::LowPrecisionOutput => "dO_O_lp",
            DeltaSource::HighPrecisionOutput => "dO_O_hp",
            DeltaSource::DpP => "dP_P",
            DeltaSource::RecomputePvHp => "recompute_PV_hp",
        }
    }

    pub fn parse(s: &str) -> Option<DeltaSource> {
        DeltaSource::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for DeltaSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-operation precision toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrecisionPlan {
    /// `S = α Q Kᵀ`.
    pub score_mode: Precision,
    /// Grid of `P̄ = exp(S − m)` and precision of `ℓ`.
    pub softmax_mode: Precision,
    /// `Ō = P̄ V`.
    pub pv_mode: Precision,
    /// `O = Ō / ℓ`.
    pub normalize_mode: Precision,
    pub delta_source: DeltaSource,
    pub backward_mode: Precision,
    #[serde(default)]
    pub causal: bool,
}

impl PrecisionPlan {
    /// bf16 forward, f32 backward, `δ` from the bf16 output.
    pub const fn lp() -> Self {
        PrecisionPlan {
            score_mode: Precision::Lp,
            softmax_mode: Precision::Lp,
            pv_mode: Precision::Lp,
            normalize_mode: Precision::Lp,
            delta_source: DeltaSource::LowPrecisionOutput,
            backward_mode: Precision::Hp,
            causal: false,
        }
    }

    /// f32 everywhere.
    pub const fn hp() -> Self {
        PrecisionPlan {
            score_mode: Precision::Hp,
            softmax_mode: Precision::Hp,
            pv_mode: Precision::Hp,
            normalize_mode: Precision::Hp,
            delta_source: DeltaSource::LowPrecisionOutput,
            backward_mode: Precision::Hp,
            causal: false,
        }
    }

    /// f64 everywhere.
    pub const fn exact() -> Self {
        PrecisionPlan {
            score_mode: Precision::Exact,
            softmax_mode: Precision::Exact,
            pv_mode: Precision::Exact,
            normalize_mode: Precision::Exact,
            delta_source: DeltaSource::LowPrecisionOutput,
            backward_mode: Precision::Exact,
            causal: false,
        }
    }

    /// The lp plan with only `P̄ V` and the normalization in f32.
    pub const fn hp_pv() -> Self {
        let mut p = Self::lp();
        p.pv_mode = Precision::Hp;
        p.normalize_mode = Precision::Hp;
        p
    }

    pub const fn with_delta(mut self, delta_source: DeltaSource) -> Self {
        self.delta_source = delta_source;
        self
    }

    pub const fn with_backward(mut self, backward_mode: Precision) -> Self {
        self.backward_mode = backward_mode;
        self
    }

    pub const fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    /// Named presets: `lp`, `hp`, `exact`, `hp-pv`, `hp-delta`, `dp-p`, `recompute-pv`.
    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "lp" => Self::lp(),
            "hp" => Self::hp(),
            "exact" => Self::exact(),
            "hp-pv" => Self::hp_pv(),
            "hp-delta" => Self::lp().with_delta(DeltaSource::HighPrecisionOutput),
            "dp-p" => Self::lp().with_delta(DeltaSource::DpP),
            "recompute-pv" => Self::lp().with_delta(DeltaSource::RecomputePvHp),
            _ => return None,
        })
    }

    pub fn forward_modes(&self) -> [Precision; 4] {
        [
            self.score_mode,
            self.softmax_mode,
            self.pv_mode,
            self.normalize_mode,
        ]
    }

    pub fn any_lp(&self) -> bool {
        self.forward_modes()
            .into_iter()
            .chain([self.backward_mode])
            .any(|m| m == Precision::Lp)
    }
}

impl Default for PrecisionPlan {
    fn default() -> Self {
        Self::lp()
    }
}

impl fmt::Display for PrecisionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "score={} softmax={} pv={} normalize={} delta={} backward={} causal={}",
            self.score_mode,
            self.softmax_mode,
            self.pv_mode,
            self.normalize_mode,
            self.delta_source,
            self.backward_mode,
            self.causal
        )
    }
}
