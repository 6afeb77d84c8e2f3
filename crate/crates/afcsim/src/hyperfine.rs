//! Hyperfine level scheme of an I = 7/2 ion: transition frequencies,
//! oscillator strengths, branching ratios and the Λ-system catalog.
//!
//! Frequencies are MHz offsets from the |-7/2>g -> |-7/2>e line. A transition
//! g -> e sits at
//!
//! ```text
//! f = [E_e(e) - E_e(-7/2)] - [E_g(g) - E_g(-7/2)] + band_offset(Δ)
//! ```
//!
//! where the level energies are cumulative sums of the adjacent splittings and
//! Δ = m_I(e) - m_I(g). Band offsets are additive corrections and default to 0.

use crate::lineshape::OpticalLine;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const N_LEVELS: usize = 8;

/// Supported transition bands, Δ = m_I(e) - m_I(g).
pub const BANDS: [i32; 4] = [-2, -1, 0, 1];

/// A hyperfine level m_I ∈ {-7/2, ..., +7/2}, stored as an index 0..8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Level(u8);

impl Level {
    pub const LOWEST: Level = Level(0);
    pub const HIGHEST: Level = Level(7);

    pub fn from_index(i: usize) -> Result<Level> {
        if i < N_LEVELS {
            Ok(Level(i as u8))
        } else {
            Err(Error::InvalidLevel(format!("index {i}")))
        }
    }

    /// From 2·m_I, which must be odd and within [-7, 7].
    pub fn from_twice_m(two_m: i32) -> Result<Level> {
        if two_m % 2 == 0 || !(-7..=7).contains(&two_m) {
            return Err(Error::InvalidLevel(format!("{two_m}/2")));
        }
        Ok(Level(((two_m + 7) / 2) as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn twice_m(self) -> i32 {
        2 * self.0 as i32 - 7
    }

    pub fn m(self) -> f64 {
        self.twice_m() as f64 / 2.0
    }

    pub fn all() -> impl Iterator<Item = Level> {
        (0..N_LEVELS as u8).map(Level)
    }

    /// Level reached by changing m_I by `delta`, if it exists.
    pub fn shifted(self, delta: i32) -> Option<Level> {
        let i = self.0 as i32 + delta;
        (0..N_LEVELS as i32).contains(&i).then_some(Level(i as u8))
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.twice_m();
        if t > 0 {
            write!(f, "+{t}/2")
        } else {
            write!(f, "{t}/2")
        }
    }
}

impl FromStr for Level {
    type Err = Error;

    /// Accepts `-7/2`, `+5/2`, `5/2`, `−3/2` (unicode minus) or `-3.5`.
    fn from_str(s: &str) -> Result<Level> {
        let t = s.trim().replace('\u{2212}', "-");
        let bad = || Error::InvalidLevel(s.to_string());
        if let Some(num) = t.strip_suffix("/2") {
            let n: i32 = num.trim_start_matches('+').parse().map_err(|_| bad())?;
            return Level::from_twice_m(n).map_err(|_| bad());
        }
        let v: f64 = t.trim_start_matches('+').parse().map_err(|_| bad())?;
        let two = 2.0 * v;
        if (two - two.round()).abs() > 1e-9 {
            return Err(bad());
        }
        Level::from_twice_m(two.round() as i32).map_err(|_| bad())
    }
}

impl Serialize for Level {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Level {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Level, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Additive center correction per band, MHz.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandOffsets {
    #[serde(rename = "-2", default)]
    pub minus2: f64,
    #[serde(rename = "-1", default)]
    pub minus1: f64,
    #[serde(rename = "0", default)]
    pub zero: f64,
    #[serde(rename = "+1", default)]
    pub plus1: f64,
}

impl BandOffsets {
    pub fn get(&self, delta: i32) -> Result<f64> {
        match delta {
            -2 => Ok(self.minus2),
            -1 => Ok(self.minus1),
            0 => Ok(self.zero),
            1 => Ok(self.plus1),
            d => Err(Error::UnknownBand(d)),
        }
    }
}

pub type StrengthTable = [[f64; N_LEVELS]; N_LEVELS];

/// Relative oscillator strengths from a two-coefficient mixing model.
///
/// Raw entries are 1 on ΔmI = 0, `c1·h` on ΔmI = ±1 and `c2·h²` on ΔmI = -2,
/// with h(m) = (9/2 - m)/8 falling from 1 at m = -7/2 to 1/8 at m = +7/2.
/// Each ground row is then scaled to unit sum so every ion carries the same
/// total strength.
pub fn mixing_strengths(c1: f64, c2: f64) -> StrengthTable {
    let mut s = [[0.0; N_LEVELS]; N_LEVELS];
    for g in Level::all() {
        let h = (4.5 - g.m()) / 8.0;
        for e in Level::all() {
            s[g.index()][e.index()] = match e.twice_m() - g.twice_m() {
                0 => 1.0,
                2 | -2 => c1 * h,
                -4 => c2 * h * h,
                _ => 0.0,
            };
        }
        let sum: f64 = s[g.index()].iter().sum();
        for v in s[g.index()].iter_mut() {
            *v /= sum;
        }
    }
    s
}

pub const DEFAULT_C1: f64 = 0.30;
pub const DEFAULT_C2: f64 = 0.30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LevelScheme {
    /// Gaps between adjacent ground levels, ordered from -7/2 upward, MHz.
    pub ground_splittings: [f64; 7],
    pub excited_splittings: [f64; 7],
    pub band_offsets: BandOffsets,
    /// Row: ground level index, column: excited level index.
    pub osc_strengths: StrengthTable,
    pub i0_fraction: f64,
    /// Center of the I = 0 impurity line, MHz.
    pub i0_center_mhz: f64,
    pub hyperfine_inhomog_fwhm_khz: f64,
    pub optical_line: OpticalLine,
}

pub const DEFAULT_GROUND_SPLITTINGS: [f64; 7] = [997.0, 967.0, 937.0, 907.0, 877.0, 847.0, 817.0];
/// Excited minus ground gap for each adjacent pair.
pub const DEFAULT_SPLITTING_DIFFERENCES: [f64; 7] = [-4.5, 36.0, 36.0, 36.0, 36.0, 36.0, 36.0];

impl Default for LevelScheme {
    fn default() -> Self {
        let mut excited = [0.0; 7];
        for k in 0..7 {
            excited[k] = DEFAULT_GROUND_SPLITTINGS[k] + DEFAULT_SPLITTING_DIFFERENCES[k];
        }
        LevelScheme {
            ground_splittings: DEFAULT_GROUND_SPLITTINGS,
            excited_splittings: excited,
            band_offsets: BandOffsets::default(),
            osc_strengths: mixing_strengths(DEFAULT_C1, DEFAULT_C2),
            i0_fraction: 0.08,
            i0_center_mhz: -121.0,
            hyperfine_inhomog_fwhm_khz: 130.0,
            optical_line: OpticalLine::default(),
        }
    }
}

/// An optical transition between a ground and an excited hyperfine level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub g_level: Level,
    pub e_level: Level,
    pub delta_mi: i32,
    /// MHz offset from the |-7/2>g -> |-7/2>e line.
    pub center_frequency: f64,
    pub strength: f64,
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "|{}>g -> |{}>e", self.g_level, self.e_level)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaSystem {
    pub storage: Transition,
    pub control: Transition,
    pub shared_excited: Level,
    pub rel_peak_strength: f64,
    pub rel_background: f64,
}

/// Default scheme as shipped in `data/schemes/default.toml`.
pub const BUNDLED_SCHEME: &str = include_str!("../data/schemes/default.toml");

impl LevelScheme {
    /// Parse a scheme file. Omitted keys keep their default values.
    pub fn from_toml(text: &str, file: &str) -> Result<LevelScheme> {
        let s: LevelScheme = crate::config::parse_toml(text, file)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: &[f64; 7]| v.iter().all(|x| x.is_finite() && *x > 0.0);
        if !pos(&self.ground_splittings) {
            return Err(Error::param("ground_splittings", "all splittings must be positive"));
        }
        if !pos(&self.excited_splittings) {
            return Err(Error::param("excited_splittings", "all splittings must be positive"));
        }
        for (g, row) in self.osc_strengths.iter().enumerate() {
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::param("osc_strengths", format!("row {g} has a negative or non-finite entry")));
            }
            if row.iter().all(|v| *v == 0.0) {
                return Err(Error::param("osc_strengths", format!("row {g} is all zero")));
            }
        }
        if !(0.0..1.0).contains(&self.i0_fraction) {
            return Err(Error::param("i0_fraction", "must lie in [0, 1)"));
        }
        if !(self.hyperfine_inhomog_fwhm_khz >= 0.0) {
            return Err(Error::param("hyperfine_inhomog_fwhm_khz", "must be non-negative"));
        }
        self.optical_line.validate()
    }

    /// Ground level energy above |-7/2>g, MHz.
    pub fn ground_energy(&self, l: Level) -> f64 {
        self.ground_splittings[..l.index()].iter().sum()
    }

    pub fn excited_energy(&self, l: Level) -> f64 {
        self.excited_splittings[..l.index()].iter().sum()
    }

    pub fn strength(&self, g: Level, e: Level) -> f64 {
        self.osc_strengths[g.index()][e.index()]
    }

    pub fn transition(&self, g: Level, e: Level) -> Result<Transition> {
        let delta = (e.twice_m() - g.twice_m()) / 2;
        let offset = self.band_offsets.get(delta)?;
        Ok(Transition {
            g_level: g,
            e_level: e,
            delta_mi: delta,
            center_frequency: self.excited_energy(e) - self.ground_energy(g) + offset,
            strength: self.strength(g, e),
        })
    }

    /// Transition from `g` in band `delta`, if the excited level exists.
    pub fn transition_in_band(&self, g: Level, delta: i32) -> Result<Option<Transition>> {
        self.band_offsets.get(delta)?;
        match g.shifted(delta) {
            Some(e) => self.transition(g, e).map(Some),
            None => Ok(None),
        }
    }

    /// Every transition in the supported bands.
    pub fn transitions(&self) -> Vec<Transition> {
        let mut out = Vec::new();
        for delta in BANDS {
            for g in Level::all() {
                if let Ok(Some(t)) = self.transition_in_band(g, delta) {
                    out.push(t);
                }
            }
        }
        out
    }

    /// Decay distribution of excited level `e` over the ground levels.
    pub fn branching_ratios(&self, e: Level) -> [f64; N_LEVELS] {
        let mut b = [0.0; N_LEVELS];
        for g in Level::all() {
            if (e.twice_m() - g.twice_m()).abs() <= 4 {
                b[g.index()] = self.strength(g, e);
            }
        }
        let sum: f64 = b.iter().sum();
        if sum > 0.0 {
            b.iter_mut().for_each(|v| *v /= sum);
        } else {
            b[e.index()] = 1.0;
        }
        b
    }

    /// Strength carried by the I = 0 impurity line, in the same units as
    /// the hyperfine transitions (mean total strength per ion).
    pub fn i0_strength(&self) -> f64 {
        let mean_row: f64 =
            self.osc_strengths.iter().map(|r| r.iter().sum::<f64>()).sum::<f64>() / N_LEVELS as f64;
        self.i0_fraction / (1.0 - self.i0_fraction) * mean_row
    }

    /// Absorbance (strength × line density) at `freq` of an ideal spin-polarized
    /// ensemble with every ion in |+7/2>g, plus the impurity line.
    pub fn polarized_background(&self, freq: f64) -> f64 {
        let mut a = self.i0_strength() * self.optical_line.density(freq - self.i0_center_mhz);
        for delta in BANDS {
            if let Ok(Some(t)) = self.transition_in_band(Level::HIGHEST, delta) {
                a += t.strength * self.optical_line.density(freq - t.center_frequency);
            }
        }
        a
    }

    /// Λ systems built on |-7/2>g with storage on ΔmI = 0 or +1 and the control
    /// field on ΔmI = -1. Ratios are relative to the first (ΔmI = 0) entry.
    pub fn lambda_catalog(&self) -> Vec<LambdaSystem> {
        let memory = Level::LOWEST;
        let mut out: Vec<LambdaSystem> = Vec::new();
        for storage_band in [0, 1] {
            let Ok(Some(storage)) = self.transition_in_band(memory, storage_band) else {
                continue;
            };
            let Some(cg) = storage.e_level.shifted(1) else {
                continue;
            };
            let Ok(control) = self.transition(cg, storage.e_level) else {
                continue;
            };
            out.push(LambdaSystem {
                storage,
                control,
                shared_excited: storage.e_level,
                rel_peak_strength: storage.strength,
                rel_background: self.polarized_background(storage.center_frequency),
            });
        }
        if let Some(first) = out.first().copied() {
            for s in out.iter_mut() {
                s.rel_peak_strength /= first.rel_peak_strength;
                s.rel_background /= first.rel_background;
            }
        }
        out
    }
}

/// Center frequency of a transition under `scheme`.
pub fn transition_frequency(scheme: &LevelScheme, t: &Transition) -> Result<f64> {
    Ok(scheme.transition(t.g_level, t.e_level)?.center_frequency)
}
