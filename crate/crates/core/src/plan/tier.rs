use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vector width class used for code generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimdTier {
    Scalar,
    V256,
    V512,
}

impl SimdTier {
    /// `f32` lanes in the widest register of the tier.
    pub fn lanes(self) -> usize {
        match self {
            SimdTier::V512 => 16,
            SimdTier::V256 => 8,
            SimdTier::Scalar => 1,
        }
    }

    /// Chunk widths the register planner may use, widest first.
    pub fn lane_sizes(self) -> &'static [usize] {
        match self {
            SimdTier::V512 => &[16, 8, 4, 1],
            SimdTier::V256 => &[8, 4, 1],
            SimdTier::Scalar => &[1],
        }
    }

    pub fn vector_registers(self) -> u8 {
        match self {
            SimdTier::V512 => 32,
            SimdTier::V256 | SimdTier::Scalar => 16,
        }
    }

    /// Accumulators per tile. V512 keeps register 31 for the broadcast value
    /// and 30 as scratch; the 16-register tiers keep register 15.
    pub fn accumulator_budget(self) -> usize {
        match self {
            SimdTier::V512 => 30,
            SimdTier::V256 | SimdTier::Scalar => 14,
        }
    }

    pub fn broadcast_register(self) -> u8 {
        self.vector_registers() - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            SimdTier::V512 => "v512",
            SimdTier::V256 => "v256",
            SimdTier::Scalar => "scalar",
        }
    }
}

impl fmt::Display for SimdTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimdTier {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "v512" | "avx512" => Ok(SimdTier::V512),
            "v256" | "avx2" => Ok(SimdTier::V256),
            "scalar" => Ok(SimdTier::Scalar),
            other => Err(format!("unknown tier {other:?} (expected v512, v256 or scalar)")),
        }
    }
}

/// Instruction-set extensions relevant to tier selection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CpuFeatures {
    pub avx512f: bool,
    pub avx512vl: bool,
    pub avx2: bool,
    pub fma: bool,
}

/// Environment variable capping the instruction sets reported by
/// [`CpuFeatures::host`]: `avx512`, `avx2` or `none`.
pub const MAX_ISA_ENV: &str = "SPMM_JIT_MAX_ISA";

impl CpuFeatures {
    /// Host features, masked by [`MAX_ISA_ENV`] when it is set.
    pub fn host() -> Self {
        let detected = Self::detected();
        match std::env::var(MAX_ISA_ENV) {
            Ok(cap) => detected.capped(&cap),
            Err(_) => detected,
        }
    }

    fn detected() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            Self {
                avx512f: std::arch::is_x86_feature_detected!("avx512f"),
                avx512vl: std::arch::is_x86_feature_detected!("avx512vl"),
                avx2: std::arch::is_x86_feature_detected!("avx2"),
                fma: std::arch::is_x86_feature_detected!("fma"),
            }
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            Self::default()
        }
    }

    /// Drops extensions above `cap`. Unknown values leave features unchanged.
    pub fn capped(self, cap: &str) -> Self {
        match cap.to_ascii_lowercase().as_str() {
            "avx2" => Self { avx512f: false, avx512vl: false, ..self },
            "none" | "scalar" => Self::default(),
            _ => self,
        }
    }

    /// Error naming the first missing extension for native `tier` code.
    ///
    /// V512 code uses EVEX encodings on 256- and 128-bit registers for the
    /// narrow chunks, hence the VL requirement. Scalar code needs FMA3.
    pub fn check_native(&self, tier: SimdTier) -> Result<()> {
        let need: &[(bool, &'static str)] = match tier {
            SimdTier::V512 => &[(self.avx512f, "AVX-512F"), (self.avx512vl, "AVX-512VL")],
            SimdTier::V256 => &[(self.avx2, "AVX2"), (self.fma, "FMA")],
            SimdTier::Scalar => &[(self.fma, "FMA")],
        };
        match need.iter().find(|(ok, _)| !ok) {
            Some(&(_, name)) => Err(Error::FeatureUnavailable(name)),
            None => Ok(()),
        }
    }

    /// Widest tier these features support.
    pub fn best_tier(&self) -> SimdTier {
        [SimdTier::V512, SimdTier::V256].into_iter().find(|&t| self.check_native(t).is_ok()).unwrap_or(SimdTier::Scalar)
    }
}

/// Highest tier the host supports, capped by `requested`.
///
/// Hosts without AVX2 and FMA report [`SimdTier::Scalar`], which only the
/// interpreter backend can always run.
pub fn detect_tier(requested: Option<SimdTier>) -> Result<SimdTier> {
    detect_tier_with(&CpuFeatures::host(), requested)
}

pub fn detect_tier_with(features: &CpuFeatures, requested: Option<SimdTier>) -> Result<SimdTier> {
    match requested {
        None => Ok(features.best_tier()),
        Some(SimdTier::Scalar) => Ok(SimdTier::Scalar),
        Some(tier) => features.check_native(tier).map(|()| tier),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const AVX512: CpuFeatures = CpuFeatures { avx512f: true, avx512vl: true, avx2: true, fma: true };
    const AVX2: CpuFeatures = CpuFeatures { avx512f: false, avx512vl: false, avx2: true, fma: true };

    #[test]
    fn lanes() {
        assert_eq!(SimdTier::V512.lanes(), 16);
        assert_eq!(SimdTier::V256.lanes(), 8);
        assert_eq!(SimdTier::Scalar.lanes(), 1);
    }

    #[test]
    fn detection_rules() {
        assert_eq!(detect_tier_with(&AVX512, None).unwrap(), SimdTier::V512);
        assert_eq!(detect_tier_with(&AVX512, Some(SimdTier::V256)).unwrap(), SimdTier::V256);
        assert_eq!(detect_tier_with(&AVX2, None).unwrap(), SimdTier::V256);
        let err = detect_tier_with(&AVX2, Some(SimdTier::V512)).unwrap_err();
        assert_eq!(err.to_string(), "AVX-512F unavailable");
        assert_eq!(detect_tier_with(&CpuFeatures::default(), None).unwrap(), SimdTier::Scalar);
        let no_vl = CpuFeatures { avx512vl: false, ..AVX512 };
        assert_eq!(detect_tier_with(&no_vl, Some(SimdTier::V512)).unwrap_err().to_string(), "AVX-512VL unavailable");
        assert_eq!(detect_tier_with(&no_vl, None).unwrap(), SimdTier::V256);
    }

    #[test]
    fn isa_cap() {
        assert_eq!(AVX512.capped("avx2"), AVX2);
        assert_eq!(AVX512.capped("none"), CpuFeatures::default());
        assert_eq!(AVX512.capped("avx512"), AVX512);
    }

    #[test]
    fn host_detection_is_consistent() {
        let best = detect_tier(None).unwrap();
        assert_eq!(detect_tier(Some(best)).unwrap(), best);
    }
}
