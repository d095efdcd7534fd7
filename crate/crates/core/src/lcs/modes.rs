use std::collections::HashSet;
use std::fmt;

use nalgebra::DVector;

/// Default absolute threshold above which a multiplier counts as active.
pub const DEFAULT_MODE_THRESHOLD: f64 = 1e-6;

/// Bitmask of active complementarity multipliers; bit `i` is set iff `λ_i > threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ModeSignature(pub u64);

impl ModeSignature {
    pub fn from_lambda(lambda: &DVector<f64>, threshold: f64) -> Self {
        assert!(lambda.len() <= 64, "mode signatures hold at most 64 multipliers");
        let bits = lambda
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > threshold)
            .fold(0u64, |acc, (i, _)| acc | (1 << i));
        ModeSignature(bits)
    }

    pub fn is_active(self, i: usize) -> bool {
        self.0 & (1 << i) != 0
    }

    pub fn count_active(self) -> u32 {
        self.0.count_ones()
    }

    /// Bits printed as `'1'`/`'0'`, index 0 first.
    pub fn to_bit_string(self, r: usize) -> String {
        (0..r).map(|i| if self.is_active(i) { '1' } else { '0' }).collect()
    }

    pub fn to_hex(self) -> String {
        format!("{:#x}", self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let digits = s.strip_prefix("0x").unwrap_or(s);
        u64::from_str_radix(digits, 16).ok().map(ModeSignature)
    }
}

impl fmt::Display for ModeSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

pub fn mode_signature(lambda: &DVector<f64>, threshold: f64) -> ModeSignature {
    ModeSignature::from_lambda(lambda, threshold)
}

/// Number of distinct signatures in a stream.
pub fn count_distinct<I: IntoIterator<Item = ModeSignature>>(signatures: I) -> usize {
    signatures.into_iter().collect::<HashSet<_>>().len()
}
