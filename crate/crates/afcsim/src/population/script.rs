//! Protocol scripts: ordered sweep, burn, wait and cycle steps read from TOML.
//!
//! ```toml
//! name = "anti_polarize"
//!
//! [laser]
//! jitter_fwhm_khz = 400.0
//!
//! [[step]]
//! kind = "cycle"
//! repeat = 250
//!
//! [[step.steps]]
//! kind = "burn"
//! transition = "+7/2 -> +3/2"
//! centers_mhz = [0.0]
//! width_khz = 1000.0
//! duration_s = "100 us"
//! rabi_khz = 500.0
//! ```
//!
//! `centers_mhz` are inhomogeneous class offsets: the laser sits at the
//! transition frequency plus the center. Sweep steps give the laser range
//! directly through `center_mhz` and `span_mhz`.

use crate::config::{self, count, duration, duration_or_zero, non_negative, positive, unit_interval};
use crate::keyed_field;
use crate::hyperfine::{Level, LevelScheme, Transition, BANDS};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// A transition named by its ground and excited levels, `"+7/2 -> +3/2"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionRef {
    pub g: Level,
    pub e: Level,
}

impl TransitionRef {
    pub fn new(g: Level, e: Level) -> Self {
        TransitionRef { g, e }
    }

    pub fn delta_mi(&self) -> i32 {
        (self.e.twice_m() - self.g.twice_m()) / 2
    }

    pub fn resolve(&self, scheme: &LevelScheme) -> Result<Transition> {
        scheme.transition(self.g, self.e)
    }
}

impl fmt::Display for TransitionRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}", self.g, self.e)
    }
}

impl FromStr for TransitionRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.replace('→', "->");
        let (g, e) = t
            .split_once("->")
            .ok_or_else(|| Error::InvalidLevel(format!("expected `g -> e`, got `{s}`")))?;
        let strip = |x: &str| x.trim().trim_end_matches(['g', 'e']).trim().to_string();
        let r = TransitionRef::new(strip(g).parse()?, strip(e).parse()?);
        if !BANDS.contains(&r.delta_mi()) {
            return Err(Error::UnknownBand(r.delta_mi()));
        }
        Ok(r)
    }
}

impl Serialize for TransitionRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TransitionRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn band<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<i32, D::Error> {
    let b = i32::deserialize(d)?;
    if BANDS.contains(&b) {
        Ok(b)
    } else {
        Err(serde::de::Error::custom(format!("unsupported band {b}, expected one of -2, -1, 0, 1")))
    }
}

keyed_field!(v_jitter, "jitter_fwhm_khz", non_negative, f64);
keyed_field!(v_jump_fraction, "jump_fraction", unit_interval, f64);
keyed_field!(v_jump_scale, "jump_scale_khz", positive, f64);
keyed_field!(v_span, "span_mhz", positive, f64);
keyed_field!(v_sweep_duration, "duration_s", duration_or_zero, f64);
keyed_field!(v_sweep_rate, "sweep_rate_hz", positive, f64);
keyed_field!(v_rabi, "rabi_khz", non_negative, f64);
keyed_field!(v_width, "width_khz", positive, f64);
keyed_field!(v_duration, "duration_s", duration, f64);
keyed_field!(v_repeat, "repeat", count, u32);
keyed_field!(v_band, "band", band, i32);

fn default_jitter() -> f64 {
    400.0
}
fn default_jump_scale() -> f64 {
    300.0
}
fn default_sweep_rate() -> f64 {
    25.0
}
fn one() -> u32 {
    1
}
fn origin() -> Vec<f64> {
    vec![0.0]
}

/// Frequency noise of the preparation laser, folded into every burn profile.
///
/// The kernel is `(1 - jump_fraction)` of a Gaussian with FWHM
/// `jitter_fwhm_khz` plus `jump_fraction` of a Laplace distribution with scale
/// `jump_scale_khz`, the latter standing in for rare frequency jumps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaserModel {
    #[serde(default = "default_jitter", deserialize_with = "v_jitter")]
    pub jitter_fwhm_khz: f64,
    #[serde(default, deserialize_with = "v_jump_fraction")]
    pub jump_fraction: f64,
    #[serde(default = "default_jump_scale", deserialize_with = "v_jump_scale")]
    pub jump_scale_khz: f64,
}

impl Default for LaserModel {
    fn default() -> Self {
        LaserModel {
            jitter_fwhm_khz: default_jitter(),
            jump_fraction: 0.0,
            jump_scale_khz: default_jump_scale(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepStep {
    #[serde(deserialize_with = "v_band")]
    pub band: i32,
    /// Laser frequency at the middle of the sweep, MHz.
    pub center_mhz: f64,
    #[serde(deserialize_with = "v_span")]
    pub span_mhz: f64,
    #[serde(deserialize_with = "v_sweep_duration")]
    pub duration_s: f64,
    #[serde(default = "default_sweep_rate", deserialize_with = "v_sweep_rate")]
    pub sweep_rate_hz: f64,
    #[serde(deserialize_with = "v_rabi")]
    pub rabi_khz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurnStep {
    pub transition: TransitionRef,
    /// Class offsets addressed one after another, MHz.
    #[serde(default = "origin")]
    pub centers_mhz: Vec<f64>,
    #[serde(deserialize_with = "v_width")]
    pub width_khz: f64,
    /// Duration of the burn at each center.
    #[serde(deserialize_with = "v_duration")]
    pub duration_s: f64,
    #[serde(deserialize_with = "v_rabi")]
    pub rabi_khz: f64,
    #[serde(default = "one", deserialize_with = "v_repeat")]
    pub repeat: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaitStep {
    #[serde(deserialize_with = "v_sweep_duration")]
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleStep {
    #[serde(deserialize_with = "v_repeat")]
    pub repeat: u32,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Step {
    Sweep(SweepStep),
    Burn(BurnStep),
    Wait(WaitStep),
    Cycle(CycleStep),
}

impl Step {
    pub fn kind(&self) -> &'static str {
        match self {
            Step::Sweep(_) => "sweep",
            Step::Burn(_) => "burn",
            Step::Wait(_) => "wait",
            Step::Cycle(_) => "cycle",
        }
    }

    /// Laboratory time spent on this step, seconds.
    pub fn protocol_time(&self) -> f64 {
        match self {
            Step::Sweep(s) => s.duration_s,
            Step::Burn(b) => b.duration_s * b.centers_mhz.len() as f64 * b.repeat as f64,
            Step::Wait(w) => w.duration_s,
            Step::Cycle(c) => c.repeat as f64 * c.steps.iter().map(Step::protocol_time).sum::<f64>(),
        }
    }

    fn visit_burns_mut(&mut self, f: &mut impl FnMut(&mut BurnStep)) {
        match self {
            Step::Burn(b) => f(b),
            Step::Cycle(c) => c.steps.iter_mut().for_each(|s| s.visit_burns_mut(f)),
            _ => {}
        }
    }

    fn validate(&self, scheme: &LevelScheme) -> Result<()> {
        match self {
            Step::Burn(b) => {
                b.transition.resolve(scheme)?;
                if b.centers_mhz.is_empty() {
                    return Err(Error::param("centers_mhz", "at least one center is required"));
                }
                if b.centers_mhz.iter().any(|c| !c.is_finite()) {
                    return Err(Error::param("centers_mhz", "centers must be finite"));
                }
                Ok(())
            }
            Step::Cycle(c) => {
                if c.steps.is_empty() {
                    return Err(Error::param("steps", "a cycle needs at least one step"));
                }
                c.steps.iter().try_for_each(|s| s.validate(scheme))
            }
            Step::Sweep(s) => {
                if !s.center_mhz.is_finite() {
                    return Err(Error::param("center_mhz", "must be finite"));
                }
                Ok(())
            }
            Step::Wait(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolScript {
    pub name: String,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub laser: LaserModel,
    #[serde(rename = "step")]
    pub steps: Vec<Step>,
}

const BUNDLED: [(&str, &str); 5] = [
    ("spin_polarize", include_str!("../../data/scripts/spin_polarize.toml")),
    ("anti_polarize", include_str!("../../data/scripts/anti_polarize.toml")),
    ("afc_5tooth", include_str!("../../data/scripts/afc_5tooth.toml")),
    ("cleanup", include_str!("../../data/scripts/cleanup.toml")),
    ("thermal_hole", include_str!("../../data/scripts/thermal_hole.toml")),
];

impl ProtocolScript {
    pub fn from_toml(text: &str, file: &str) -> Result<Self> {
        let s: ProtocolScript = config::parse_toml(text, file)?;
        if s.steps.is_empty() {
            return Err(config::config_error(file, Some("step"), "script has no steps"));
        }
        Ok(s)
    }

    /// Names of the scripts shipped with the crate.
    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    pub fn bundled_source(name: &str) -> Option<&'static str> {
        BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let text = Self::bundled_source(name)
            .ok_or_else(|| config::config_error(name, None, "no bundled script with this name"))?;
        Self::from_toml(text, &format!("<bundled>/{name}.toml"))
    }

    pub fn validate(&self, scheme: &LevelScheme) -> Result<()> {
        for (i, s) in self.steps.iter().enumerate() {
            s.validate(scheme).map_err(|e| Error::Step {
                index: i,
                kind: s.kind().to_string(),
                source: Box::new(e),
            })?;
        }
        Ok(())
    }

    /// Total laboratory time: the sum of durations × centers × repeats.
    pub fn protocol_time(&self) -> f64 {
        self.steps.iter().map(Step::protocol_time).sum()
    }

    /// Replace the centers of every burn with an evenly spaced comb of
    /// `n_teeth` classes starting at `first_mhz`.
    pub fn with_comb(&self, n_teeth: usize, first_mhz: f64, spacing_mhz: f64) -> Self {
        let centers: Vec<f64> = (0..n_teeth).map(|k| first_mhz + k as f64 * spacing_mhz).collect();
        let mut s = self.clone();
        for step in s.steps.iter_mut() {
            step.visit_burns_mut(&mut |b| b.centers_mhz = centers.clone());
        }
        s
    }
}
