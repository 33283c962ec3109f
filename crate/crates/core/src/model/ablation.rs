use std::fmt;
use std::str::FromStr;

use super::{param_specs, CRNetConfig, FusionMode};
use crate::blocks::{CebKernel, FfnMode, MbbSplit};
use crate::params::ModelParams;
use crate::tensor::Element;

/// Named network variants used in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    NoFreqSep,
    Mbb22,
    Mbb40,
    Ceb3x3x3,
    Ceb5x5And3x3,
    FfnNormalBottleneck,
    FfnFlat,
    Recurrent,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 9] = [
        AblationVariant::Full,
        AblationVariant::NoFreqSep,
        AblationVariant::Mbb22,
        AblationVariant::Mbb40,
        AblationVariant::Ceb3x3x3,
        AblationVariant::Ceb5x5And3x3,
        AblationVariant::FfnNormalBottleneck,
        AblationVariant::FfnFlat,
        AblationVariant::Recurrent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoFreqSep => "no_freq_sep",
            AblationVariant::Mbb22 => "mbb_2_2",
            AblationVariant::Mbb40 => "mbb_4_0",
            AblationVariant::Ceb3x3x3 => "ceb_3x3x3",
            AblationVariant::Ceb5x5And3x3 => "ceb_5x5_3x3",
            AblationVariant::FfnNormalBottleneck => "ffn_normal_bottleneck",
            AblationVariant::FfnFlat => "ffn_flat",
            AblationVariant::Recurrent => "recurrent",
        }
    }

    /// `base` with this variant's change applied.
    pub fn apply(self, base: &CRNetConfig) -> CRNetConfig {
        let mut cfg = base.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoFreqSep => cfg.freq_sep = false,
            AblationVariant::Mbb22 => cfg.mbb_split = MbbSplit { a: 2, b: 2 },
            AblationVariant::Mbb40 => cfg.mbb_split = MbbSplit { a: 4, b: 0 },
            AblationVariant::Ceb3x3x3 => cfg.ceb_kernel = CebKernel::ThreeDw3,
            AblationVariant::Ceb5x5And3x3 => cfg.ceb_kernel = CebKernel::Dw5Dw3,
            AblationVariant::FfnNormalBottleneck => cfg.ffn_mode = FfnMode::NormalBottleneck,
            AblationVariant::FfnFlat => cfg.ffn_mode = FfnMode::Flat,
            AblationVariant::Recurrent => cfg.fusion_mode = FusionMode::Recurrent,
        }
        cfg
    }
}

impl FromStr for AblationVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = AblationVariant::ALL.iter().map(|v| v.name()).collect();
                format!("unknown variant `{s}` (expected one of {})", names.join(", "))
            })
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Config and freshly initialised parameters for a variant of `base`.
pub fn build_ablation_variant<T: Element>(
    variant: AblationVariant,
    base: &CRNetConfig,
    seed: u64,
) -> (CRNetConfig, ModelParams<T>) {
    let cfg = variant.apply(base);
    let params = ModelParams::init(&param_specs(&cfg), seed);
    (cfg, params)
}
