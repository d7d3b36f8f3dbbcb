//! Parameter-efficient modules attachable to backbone blocks: prefix
//! tuning, adapters, prompt tuning and the parallel attention branch (PATT).

mod adapter;
mod patt;
mod prefix;
mod prompt;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use adapter::{Adapter, Placement};
pub use patt::{Patt, QkvDelta};
pub use prefix::Prefix;
pub use prompt::Prompt;

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Prefix,
    AdapterParallel,
    AdapterSequential,
    Prompt,
    Patt,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [
        Mechanism::Prefix,
        Mechanism::AdapterParallel,
        Mechanism::AdapterSequential,
        Mechanism::Prompt,
        Mechanism::Patt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Prefix => "prefix",
            Mechanism::AdapterParallel => "adapter_parallel",
            Mechanism::AdapterSequential => "adapter_sequential",
            Mechanism::Prompt => "prompt",
            Mechanism::Patt => "patt",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown PETL mechanism `{s}`")))
    }
}

/// Subset of the attention projections PATT writes into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Sites {
    pub q: bool,
    pub k: bool,
    pub v: bool,
}

impl Sites {
    pub const KV: Sites = Sites { q: false, k: true, v: true };
    pub const QK: Sites = Sites { q: true, k: true, v: false };
    pub const QV: Sites = Sites { q: true, k: false, v: true };
    pub const QKV: Sites = Sites { q: true, k: true, v: true };

    pub fn count(self) -> usize {
        usize::from(self.q) + usize::from(self.k) + usize::from(self.v)
    }

    pub fn is_empty(self) -> bool {
        self.count() == 0
    }
}

impl fmt::Display for Sites {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (on, c) in [(self.q, 'Q'), (self.k, 'K'), (self.v, 'V')] {
            if on {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Sites {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut sites = Sites::default();
        for c in s.chars() {
            let slot = match c.to_ascii_uppercase() {
                'Q' => &mut sites.q,
                'K' => &mut sites.k,
                'V' => &mut sites.v,
                _ => return Err(Error::config(format!("invalid PATT site `{c}` in `{s}`"))),
            };
            if *slot {
                return Err(Error::config(format!("PATT site `{c}` repeated in `{s}`")));
            }
            *slot = true;
        }
        Ok(sites)
    }
}

impl Serialize for Sites {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Sites {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Which PETL modules to attach and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PetlSpec {
    pub mechanisms: Vec<Mechanism>,
    pub d_bottle: usize,
    /// Hidden width of the prefix transform; defaults to `d_bottle`.
    pub d_middle: Option<usize>,
    pub d_token: usize,
    pub d_prompt: usize,
    pub s_adapter: f64,
    pub s_patt: f64,
    pub patt_sites: Sites,
    pub tune_head: bool,
    /// Per-stage attach mask; empty attaches to every stage.
    pub attach: Vec<bool>,
    /// When false, prefixes feed keys and values directly instead of going
    /// through the Tanh transform.
    pub prefix_transform: bool,
    pub freeze_backbone: bool,
}

impl Default for PetlSpec {
    fn default() -> Self {
        Self {
            mechanisms: Vec::new(),
            d_bottle: 8,
            d_middle: None,
            d_token: 4,
            d_prompt: 4,
            s_adapter: 0.8,
            s_patt: 0.8,
            patt_sites: Sites::KV,
            tune_head: true,
            attach: Vec::new(),
            prefix_transform: true,
            freeze_backbone: true,
        }
    }
}

pub const S_MAX: f64 = 2.0;

impl PetlSpec {
    /// No PETL modules; only the head is tuned.
    pub fn head_only() -> Self {
        Self::default()
    }

    /// Parallel adapter at the FFN plus PATT on K and V, one shared scalar.
    pub fn swin_bapat(d_bottle: usize, s: f64) -> Self {
        Self {
            mechanisms: vec![Mechanism::AdapterParallel, Mechanism::Patt],
            d_bottle,
            s_adapter: s,
            s_patt: s,
            ..Self::default()
        }
    }

    pub fn with(mut self, mechanism: Mechanism) -> Self {
        if !self.has(mechanism) {
            self.mechanisms.push(mechanism);
        }
        self
    }

    pub fn has(&self, mechanism: Mechanism) -> bool {
        self.mechanisms.contains(&mechanism)
    }

    pub fn d_middle(&self) -> usize {
        self.d_middle.unwrap_or(self.d_bottle)
    }

    pub fn adapter_placement(&self) -> Option<Placement> {
        if self.has(Mechanism::AdapterParallel) {
            Some(Placement::Parallel)
        } else if self.has(Mechanism::AdapterSequential) {
            Some(Placement::Sequential)
        } else {
            None
        }
    }

    pub fn attached(&self, stage: usize) -> bool {
        self.attach.get(stage).copied().unwrap_or(self.attach.is_empty())
    }

    /// Checks that a model can be built. Zero token counts are allowed here
    /// and produce no extra keys.
    pub fn validate_structure(&self, cfg: &ModelConfig) -> Result<()> {
        if self.has(Mechanism::AdapterParallel) && self.has(Mechanism::AdapterSequential) {
            return Err(Error::config(
                "adapter_parallel and adapter_sequential are conflicting placements",
            ));
        }
        for (i, m) in self.mechanisms.iter().enumerate() {
            if self.mechanisms[..i].contains(m) {
                return Err(Error::config(format!("mechanism `{m}` listed twice")));
            }
        }
        if !self.attach.is_empty() && self.attach.len() != cfg.num_stages() {
            return Err(Error::config(format!(
                "attach mask has {} entries for {} stages",
                self.attach.len(),
                cfg.num_stages()
            )));
        }
        for (name, s) in [("s_adapter", self.s_adapter), ("s_patt", self.s_patt)] {
            if !(0.0..=S_MAX).contains(&s) {
                return Err(Error::config(format!("{name} = {s} is outside [0, {S_MAX}]")));
            }
        }
        if self.has(Mechanism::Patt) && self.patt_sites.is_empty() {
            return Err(Error::config("PATT enabled with an empty site set"));
        }
        let bottlenecked = self.adapter_placement().is_some() || self.has(Mechanism::Patt);
        if bottlenecked && self.d_bottle == 0 {
            return Err(Error::config("d_bottle must be positive"));
        }
        if self.has(Mechanism::Prefix) && self.prefix_transform && self.d_token > 0 && self.d_middle() == 0 {
            return Err(Error::config("prefix transform needs d_middle > 0"));
        }
        Ok(())
    }

    /// Checks `0 < d_bottle < d` on every attached stage. Shape-only layouts
    /// skip this so published configurations with `d_bottle >= d` on the
    /// first stage can still be counted.
    pub fn validate_widths(&self, cfg: &ModelConfig) -> Result<()> {
        if self.adapter_placement().is_none() && !self.has(Mechanism::Patt) {
            return Ok(());
        }
        for (stage, &d) in cfg.dims.iter().enumerate() {
            if self.attached(stage) && !(1..d).contains(&self.d_bottle) {
                return Err(Error::config(format!(
                    "d_bottle = {} must satisfy 0 < d_bottle < {d} (stage {stage})",
                    self.d_bottle
                )));
            }
        }
        Ok(())
    }

    /// Validation for configs that only count parameters.
    pub fn validate_counting(&self, cfg: &ModelConfig) -> Result<()> {
        self.validate_structure(cfg)?;
        if self.has(Mechanism::Prefix) && self.d_token == 0 {
            return Err(Error::config("prefix tuning enabled with d_token = 0"));
        }
        Ok(())
    }

    /// Full validation applied to experiment configs that train.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        self.validate_counting(cfg)?;
        self.validate_widths(cfg)
    }

    /// Checks the Swin-BAPAT composition: only the parallel adapter and PATT.
    pub fn validate_bapat(&self, cfg: &ModelConfig) -> Result<()> {
        if let Some(m) = self
            .mechanisms
            .iter()
            .find(|m| !matches!(m, Mechanism::AdapterParallel | Mechanism::Patt))
        {
            return Err(Error::config(format!(
                "Swin-BAPAT combines adapter_parallel and patt only, found `{m}`"
            )));
        }
        self.validate(cfg)
    }

    /// Short label used in reports.
    pub fn label(&self) -> String {
        if self.mechanisms.is_empty() {
            return if self.freeze_backbone {
                if self.tune_head { "head_only".into() } else { "frozen".into() }
            } else {
                "full".into()
            };
        }
        let mut names: Vec<&str> = self.mechanisms.iter().map(|m| m.name()).collect();
        names.sort_unstable();
        names.join("+")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sites_round_trip() {
        for s in ["QK", "KV", "QV", "QKV", "V"] {
            assert_eq!(s.parse::<Sites>().unwrap().to_string(), s);
        }
        assert_eq!("vk".parse::<Sites>().unwrap(), Sites::KV);
        assert!("KK".parse::<Sites>().is_err());
        assert!("KX".parse::<Sites>().is_err());
    }

    #[test]
    fn validation_rules() {
        let cfg = ModelConfig::swin_micro(4);
        let spec = PetlSpec::swin_bapat(16, 0.8);
        assert!(spec.validate(&cfg).is_err(), "16 is not below stage-1 width 16");
        spec.validate_counting(&cfg).unwrap();
        let spec = PetlSpec {
            attach: vec![false, true, true, true],
            ..PetlSpec::swin_bapat(16, 0.8)
        };
        spec.validate_bapat(&cfg).unwrap();

        let both = PetlSpec::head_only()
            .with(Mechanism::AdapterParallel)
            .with(Mechanism::AdapterSequential);
        assert!(both.validate(&cfg).is_err());

        let empty_sites = PetlSpec {
            patt_sites: Sites::default(),
            ..PetlSpec::swin_bapat(4, 0.8)
        };
        assert!(empty_sites.validate(&cfg).is_err());

        let bad_s = PetlSpec::swin_bapat(4, 2.5);
        assert!(bad_s.validate(&cfg).is_err());

        let prefix0 = PetlSpec {
            d_token: 0,
            ..PetlSpec::head_only().with(Mechanism::Prefix)
        };
        prefix0.validate_structure(&cfg).unwrap();
        assert!(prefix0.validate(&cfg).is_err());

        let prompt_bapat = PetlSpec::swin_bapat(4, 0.8).with(Mechanism::Prompt);
        assert!(prompt_bapat.validate_bapat(&cfg).is_err());
    }
}
