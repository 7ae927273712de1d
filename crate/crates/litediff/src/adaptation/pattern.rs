use std::collections::BTreeSet;

use crate::diffusion::UNetSpec;
use crate::error::{Error, Result};

/// Which UNet blocks receive adapters. Blocks are indexed 0..2k with the
/// down path first, the mid block at k, then the up path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HookPattern {
    All,
    SkipDown,
    SkipMid,
    SkipUp,
    Alternate,
    SkipTwo,
    SkipOneDown,
    Custom(Vec<bool>),
}

/// The seven named patterns of the hooking ablation, in report order.
pub const ABLATION_PATTERNS: [HookPattern; 7] = [
    HookPattern::SkipDown,
    HookPattern::SkipMid,
    HookPattern::SkipUp,
    HookPattern::Alternate,
    HookPattern::SkipTwo,
    HookPattern::SkipOneDown,
    HookPattern::All,
];

impl HookPattern {
    /// Block indices the pattern selects on the given architecture.
    pub fn resolve(&self, spec: &UNetSpec) -> Result<BTreeSet<usize>> {
        let count = spec.block_count();
        let k = spec.depth();
        let all = || (0..count).collect::<BTreeSet<_>>();
        Ok(match self {
            HookPattern::All => all(),
            HookPattern::SkipDown => (k..count).collect(),
            HookPattern::SkipMid => {
                let mut s = all();
                s.remove(&k);
                s
            }
            HookPattern::SkipUp => (0..=k).collect(),
            HookPattern::Alternate => (0..count).step_by(2).collect(),
            HookPattern::SkipTwo => (0..count).step_by(3).collect(),
            HookPattern::SkipOneDown => {
                // One down block goes unadapted; index 1 when it exists.
                let mut s = all();
                if k > 1 {
                    s.remove(&1);
                }
                s
            }
            HookPattern::Custom(mask) => {
                if mask.len() != count {
                    return Err(Error::InvalidArgument(format!(
                        "custom mask has {} entries, architecture has {count} blocks",
                        mask.len()
                    )));
                }
                mask.iter()
                    .enumerate()
                    .filter_map(|(i, &on)| on.then_some(i))
                    .collect()
            }
        })
    }

    /// Stable textual form used in configs and checkpoint manifests.
    pub fn descriptor(&self) -> String {
        match self {
            HookPattern::All => "all".into(),
            HookPattern::SkipDown => "skip_down".into(),
            HookPattern::SkipMid => "skip_mid".into(),
            HookPattern::SkipUp => "skip_up".into(),
            HookPattern::Alternate => "alternate".into(),
            HookPattern::SkipTwo => "skip_two".into(),
            HookPattern::SkipOneDown => "skip_one_down".into(),
            HookPattern::Custom(mask) => {
                let bits: String = mask.iter().map(|&b| if b { '1' } else { '0' }).collect();
                format!("custom:{bits}")
            }
        }
    }

    pub fn from_descriptor(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => HookPattern::All,
            "skip_down" => HookPattern::SkipDown,
            "skip_mid" => HookPattern::SkipMid,
            "skip_up" => HookPattern::SkipUp,
            "alternate" => HookPattern::Alternate,
            "skip_two" => HookPattern::SkipTwo,
            "skip_one_down" => HookPattern::SkipOneDown,
            other => {
                if let Some(bits) = other.strip_prefix("custom:") {
                    let mask: Option<Vec<bool>> = bits
                        .chars()
                        .map(|c| match c {
                            '0' => Some(false),
                            '1' => Some(true),
                            _ => None,
                        })
                        .collect();
                    match mask {
                        Some(mask) if !mask.is_empty() => HookPattern::Custom(mask),
                        _ => {
                            return Err(Error::InvalidArgument(format!(
                                "bad custom pattern `{other}`"
                            )))
                        }
                    }
                } else {
                    return Err(Error::InvalidArgument(format!(
                        "unknown hook pattern `{other}`"
                    )));
                }
            }
        })
    }
}
