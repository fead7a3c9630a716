use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// A single transmit/receive polarization channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pol {
    HH,
    HV,
    VV,
}

impl Pol {
    /// Position of the channel group in a full-polarization stack.
    pub fn full_index(self) -> usize {
        match self {
            Pol::HH => 0,
            Pol::HV => 1,
            Pol::VV => 2,
        }
    }
}

/// Which polarization channel groups a stack carries.
///
/// Channel groups always appear in HH, HV, VV order, each holding all
/// baselines in acquisition order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum PolMode {
    #[default]
    FP,
    HHHV,
    HHVV,
    HVVV,
    HH,
    HV,
    VV,
}

impl PolMode {
    pub const ALL: [PolMode; 7] = [
        PolMode::FP,
        PolMode::HHHV,
        PolMode::HHVV,
        PolMode::HVVV,
        PolMode::HH,
        PolMode::HV,
        PolMode::VV,
    ];

    pub fn pols(self) -> &'static [Pol] {
        match self {
            PolMode::FP => &[Pol::HH, Pol::HV, Pol::VV],
            PolMode::HHHV => &[Pol::HH, Pol::HV],
            PolMode::HHVV => &[Pol::HH, Pol::VV],
            PolMode::HVVV => &[Pol::HV, Pol::VV],
            PolMode::HH => &[Pol::HH],
            PolMode::HV => &[Pol::HV],
            PolMode::VV => &[Pol::VV],
        }
    }

    /// Number of polarization channels (Φ).
    pub fn phi(self) -> usize {
        self.pols().len()
    }

    pub fn contains(self, other: PolMode) -> bool {
        other.pols().iter().all(|p| self.pols().contains(p))
    }

    pub fn name(self) -> &'static str {
        match self {
            PolMode::FP => "FP",
            PolMode::HHHV => "HHHV",
            PolMode::HHVV => "HHVV",
            PolMode::HVVV => "HVVV",
            PolMode::HH => "HH",
            PolMode::HV => "HV",
            PolMode::VV => "VV",
        }
    }
}

impl fmt::Display for PolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid("mode", format!("unknown polarization mode `{s}`")))
    }
}

/// Number of real feature channels for Φ polarizations and N baselines.
pub fn feature_channel_count(phi: usize, n: usize) -> usize {
    3 * phi * n - 2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_counts() {
        assert_eq!(feature_channel_count(3, 6), 52);
        assert_eq!(feature_channel_count(2, 6), 34);
        assert_eq!(feature_channel_count(1, 6), 16);
        for phi in 1..=3 {
            for n in 1..10 {
                assert_eq!(feature_channel_count(phi, n), 3 * phi * n - 2);
            }
        }
    }

    #[test]
    fn modes_parse_and_nest() {
        assert_eq!("hhvv".parse::<PolMode>().unwrap(), PolMode::HHVV);
        assert!("XX".parse::<PolMode>().is_err());
        assert!(PolMode::FP.contains(PolMode::HVVV));
        assert!(!PolMode::HHHV.contains(PolMode::VV));
        assert_eq!(PolMode::HHVV.phi(), 2);
    }
}
