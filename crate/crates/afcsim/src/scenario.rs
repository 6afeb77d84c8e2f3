//! Scenario files: which scheme and protocol scripts to load, which analyses
//! to run, and where to write their CSV artifacts and the JSON manifest.
//!
//! ```toml
//! name = "fig3_afc"
//! seed = 1550                     # optional, DEFAULT_SEED otherwise
//! analyses = ["spectrum", "afc"]
//!
//! [scheme]                        # optional, bundled default otherwise
//! path = "my_scheme.toml"
//!
//! [[protocol]]
//! bundled = "spin_polarize"
//!
//! [[protocol]]
//! path = "scripts/comb.toml"      # relative to the scenario file
//! ```
//!
//! Every other table (`grid`, `preparation`, `spectrum`, `afc`, `lifetime`,
//! `noise`, `optimize`, `cavity`) is optional and falls back to defaults.

use crate::afc::{
    cavity_projection, echo_simulate, efficiency_analytic, optimize_finesse, rescale_impurity, tile_period,
    CavityDesign, EchoResult, FinesseOptimum, Pulse,
};
use crate::config::{self, config_error, parse_toml};
use crate::fit::{fit_exponential_lifetime, LifetimeFit};
use crate::hyperfine::{LevelScheme, BUNDLED_SCHEME};
use crate::noise::{
    added_variance_with, calibrate_photon_number, compare_to_classical, simulate_storage_events, AddedVariance,
    BoundComparison, PhaseSampling, StorageRun, VarianceOptions,
};
use crate::population::{
    init_thermal, relax, run_protocol, GridSpec, ProtocolScript, PumpModel, RelaxationRates, SpectralPopulationGrid,
};
use crate::spectrum::{measure_feature, synthesize, AbsorptionSpectrum, BackgroundDb, DbCalibration, FeatureMeasurement, Window};
use crate::{keyed_field, Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Seed used when a scenario does not set one.
pub const DEFAULT_SEED: u64 = 1550;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "AFCSIM_OUT_DIR";

/// Output directory used when neither the caller, the scenario nor the
/// environment names one.
pub const FALLBACK_OUT_DIR: &str = "afcsim-out";

const BUNDLED_SCENARIOS: [(&str, &str); 5] = [
    ("fig3_afc", include_str!("../data/scenarios/fig3_afc.toml")),
    ("fig2_lifetime", include_str!("../data/scenarios/fig2_lifetime.toml")),
    ("thermal_hole", include_str!("../data/scenarios/thermal_hole.toml")),
    ("fig4_noise", include_str!("../data/scenarios/fig4_noise.toml")),
    ("projection", include_str!("../data/scenarios/projection.toml")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Analysis {
    /// Protocol execution alone; also writes the population grid.
    Prepare,
    Spectrum,
    Afc,
    Lifetime,
    Noise,
    Optimize,
    Cavity,
}

impl Analysis {
    pub fn name(self) -> &'static str {
        match self {
            Analysis::Prepare => "prepare",
            Analysis::Spectrum => "spectrum",
            Analysis::Afc => "afc",
            Analysis::Lifetime => "lifetime",
            Analysis::Noise => "noise",
            Analysis::Optimize => "optimize",
            Analysis::Cavity => "cavity",
        }
    }

    fn needs_grid(self) -> bool {
        matches!(self, Analysis::Prepare | Analysis::Spectrum | Analysis::Afc | Analysis::Lifetime)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRef {
    bundled: Option<String>,
    path: Option<String>,
    script: Option<ProtocolScript>,
}

fn default_temperature() -> f64 {
    1.5
}

keyed_field!(v_temperature, "temperature_k", config::positive, f64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Preparation {
    #[serde(deserialize_with = "v_temperature")]
    pub temperature_k: f64,
    pub line_center_mhz: f64,
    /// Frequency at which a fully transferred class group reads the maximum
    /// feature depth.
    pub memory_mhz: f64,
    /// Apply relaxation during wait steps of the protocol scripts.
    pub relax_during_waits: bool,
    pub pump: PumpModel,
    pub relaxation: RelaxationRates,
}

impl Default for Preparation {
    fn default() -> Self {
        Preparation {
            temperature_k: default_temperature(),
            line_center_mhz: 0.0,
            memory_mhz: 0.0,
            relax_during_waits: true,
            pump: PumpModel::default(),
            relaxation: RelaxationRates::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumSection {
    pub window: Window,
    pub reference_mhz: f64,
    /// Centers of isolated features to fit.
    pub features_mhz: Vec<f64>,
    pub feature_span_mhz: f64,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        SpectrumSection {
            window: Window::new(-15.0, 15.0, 10.0),
            reference_mhz: 0.0,
            features_mhz: Vec::new(),
            feature_span_mhz: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AfcSection {
    pub center_mhz: f64,
    pub spacing_mhz: f64,
    pub n_teeth: usize,
    pub pulse: Pulse,
    /// Teeth in the periodic continuation used as a diagnostic.
    pub tiled_teeth: usize,
    pub tile_margin_mhz: f64,
}

impl Default for AfcSection {
    fn default() -> Self {
        AfcSection {
            center_mhz: 0.0,
            spacing_mhz: 1.5,
            n_teeth: 5,
            pulse: Pulse::gaussian(200.0, 0.0),
            tiled_teeth: 51,
            tile_margin_mhz: 10.0,
        }
    }
}

impl AfcSection {
    fn tooth_centers(&self) -> Vec<f64> {
        let first = self.center_mhz - 0.5 * (self.n_teeth as f64 - 1.0) * self.spacing_mhz;
        (0..self.n_teeth).map(|k| first + k as f64 * self.spacing_mhz).collect()
    }
}

fn default_interval() -> f64 {
    30.0
}

keyed_field!(v_interval, "interval_s", config::duration, f64);
keyed_field!(v_samples, "samples", config::count, u32);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifetimeSection {
    pub window: Window,
    pub center_mhz: f64,
    /// The feature depth is read against the mean at center ± this offset.
    pub reference_offset_mhz: f64,
    /// Anti-hole position, read against `anti_hole_reference_mhz`.
    pub anti_hole_mhz: Option<f64>,
    pub anti_hole_reference_mhz: f64,
    #[serde(deserialize_with = "v_samples")]
    pub samples: u32,
    #[serde(deserialize_with = "v_interval")]
    pub interval_s: f64,
    /// Repeat the decay with cross-relaxation switched off.
    pub ladder_only_comparison: bool,
}

impl Default for LifetimeSection {
    fn default() -> Self {
        LifetimeSection {
            window: Window::new(-7.0, 3.0, 50.0),
            center_mhz: 0.0,
            reference_offset_mhz: 2.5,
            anti_hole_mhz: None,
            anti_hole_reference_mhz: -6.5,
            samples: 21,
            interval_s: default_interval(),
            ladder_only_comparison: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub n_events: usize,
    pub mean_photons_at_crystal: f64,
    /// When set, the photon number at the crystal is inferred from this
    /// detected mean and the collection loss.
    pub detected_mean_photons: Option<f64>,
    pub efficiency: f64,
    /// Use the simulated echo efficiency when the afc stage ran.
    pub use_afc_efficiency: bool,
    pub collection_loss_db: f64,
    /// Injected added noise, vacuum units.
    pub added_noise: f64,
    pub phase_sampling: PhaseSampling,
    pub phase_jitter_rad: f64,
    pub n_bins: usize,
    pub bootstrap_resamples: usize,
    /// Write every quadrature sample, not only the phase-binned summary.
    pub write_samples: bool,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let r = StorageRun::default();
        let v = VarianceOptions::default();
        NoiseSection {
            n_events: r.n_events,
            mean_photons_at_crystal: r.mean_photons_at_crystal,
            detected_mean_photons: None,
            efficiency: r.efficiency,
            use_afc_efficiency: false,
            collection_loss_db: r.collection_loss_db,
            added_noise: 0.0,
            phase_sampling: r.phase_sampling,
            phase_jitter_rad: r.phase_jitter_rad,
            n_bins: v.n_bins,
            bootstrap_resamples: v.bootstrap_resamples,
            write_samples: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeSection {
    pub peak_od_db: f64,
    pub background_db: f64,
    /// Use the fitted comb when the afc stage ran.
    pub use_afc_fit: bool,
    pub finesse_min: f64,
    pub finesse_max: f64,
    pub finesse_step: f64,
}

impl Default for OptimizeSection {
    fn default() -> Self {
        OptimizeSection {
            peak_od_db: 18.0,
            background_db: 1.0,
            use_afc_fit: false,
            finesse_min: 1.05,
            finesse_max: 15.0,
            finesse_step: 0.01,
        }
    }
}

/// Free-space comb evaluated with the analytic efficiency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeSpaceCase {
    pub peak_od_db: f64,
    pub finesse: f64,
    pub background_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CavitySection {
    pub free_space: Vec<FreeSpaceCase>,
    pub design: CavityDesign,
    /// Impurity fraction behind `design.background_db`.
    pub reference_i0_fraction: f64,
    /// Further impurity fractions to project, rescaling the background.
    pub i0_fractions: Vec<f64>,
}

impl Default for CavitySection {
    fn default() -> Self {
        CavitySection {
            free_space: Vec::new(),
            design: CavityDesign::default(),
            reference_i0_fraction: 0.08,
            i0_fractions: Vec::new(),
        }
    }
}

fn default_analyses() -> Vec<Analysis> {
    Vec::new()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: String,
    #[serde(default)]
    description: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    output_dir: Option<String>,
    #[serde(default = "default_analyses")]
    analyses: Vec<Analysis>,
    #[serde(default)]
    scheme: FileRef,
    #[serde(default)]
    protocol: Vec<FileRef>,
    #[serde(default)]
    grid: GridSpec,
    #[serde(default)]
    preparation: Preparation,
    #[serde(default)]
    spectrum: SpectrumSection,
    #[serde(default)]
    afc: AfcSection,
    #[serde(default)]
    lifetime: LifetimeSection,
    #[serde(default)]
    noise: NoiseSection,
    #[serde(default)]
    optimize: OptimizeSection,
    #[serde(default)]
    cavity: CavitySection,
}

/// A hashed input: the scenario file, the scheme or a protocol script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InputRecord {
    pub role: String,
    pub name: String,
    pub sha256: String,
}

/// A validated scenario with every referenced file loaded.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub description: Option<String>,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub analyses: Vec<Analysis>,
    pub scheme: LevelScheme,
    pub protocols: Vec<ProtocolScript>,
    pub grid: GridSpec,
    pub preparation: Preparation,
    pub spectrum: SpectrumSection,
    pub afc: AfcSection,
    pub lifetime: LifetimeSection,
    pub noise: NoiseSection,
    pub optimize: OptimizeSection,
    pub cavity: CavitySection,
    pub inputs: Vec<InputRecord>,
}

impl ScenarioConfig {
    /// Re-check numeric sections after programmatic edits.
    pub fn validate(&self) -> Result<()> {
        check_sections(self, &self.name)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_text(path: &Path, file: &str, key: &str) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| config_error(file, Some(key), format!("cannot read `{}`: {e}", path.display())))
}

/// Parse a scenario whose relative paths resolve against the working directory.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    parse_config_in(text, "<scenario>", Path::new("."))
}

/// Read and parse a scenario file; relative paths resolve against its directory.
pub fn parse_config_file(path: &Path) -> Result<ScenarioConfig> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| config_error(&file, None, format!("cannot read scenario: {e}")))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_in(&text, &file, base)
}

/// Parse one of the scenarios shipped with the crate.
pub fn bundled_scenario(name: &str) -> Result<ScenarioConfig> {
    let text = bundled_scenario_source(name)
        .ok_or_else(|| config_error(name, None, "no bundled scenario with this name"))?;
    parse_config_in(text, &format!("<bundled>/{name}.toml"), Path::new("."))
}

pub fn bundled_scenario_names() -> impl Iterator<Item = &'static str> {
    BUNDLED_SCENARIOS.iter().map(|(n, _)| *n)
}

pub fn bundled_scenario_source(name: &str) -> Option<&'static str> {
    BUNDLED_SCENARIOS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

fn semantic(file: &str, key: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config(_) => e,
        other => config_error(file, Some(key), other.to_string()),
    })
}

/// Parse and validate scenario `text`. `file` labels diagnostics and `base`
/// anchors relative paths.
pub fn parse_config_in(text: &str, file: &str, base: &Path) -> Result<ScenarioConfig> {
    let raw: RawConfig = parse_toml(text, file)?;
    let mut inputs = vec![InputRecord {
        role: "scenario".into(),
        name: file.to_string(),
        sha256: sha256_hex(text.as_bytes()),
    }];

    if raw.analyses.is_empty() {
        return Err(config_error(file, Some("analyses"), "at least one analysis is required"));
    }
    let mut analyses = raw.analyses.clone();
    analyses.sort();
    if analyses.windows(2).any(|w| w[0] == w[1]) {
        return Err(config_error(file, Some("analyses"), "an analysis is listed twice"));
    }

    let scheme = match (&raw.scheme.bundled, &raw.scheme.path, &raw.scheme.script) {
        (_, _, Some(_)) => return Err(config_error(file, Some("scheme"), "`script` is only valid in [[protocol]]")),
        (Some(_), Some(_), _) => return Err(config_error(file, Some("scheme"), "give either `bundled` or `path`")),
        (Some(b), None, _) if b != "default" => {
            return Err(config_error(file, Some("scheme.bundled"), format!("no bundled scheme `{b}`")))
        }
        (_, Some(p), _) => {
            let path = base.join(p);
            let t = read_text(&path, file, "scheme.path")?;
            inputs.push(InputRecord {
                role: "scheme".into(),
                name: p.clone(),
                sha256: sha256_hex(t.as_bytes()),
            });
            LevelScheme::from_toml(&t, &path.display().to_string())?
        }
        _ => {
            inputs.push(InputRecord {
                role: "scheme".into(),
                name: "<bundled>/default".into(),
                sha256: sha256_hex(BUNDLED_SCHEME.as_bytes()),
            });
            LevelScheme::from_toml(BUNDLED_SCHEME, "<bundled>/default")?
        }
    };

    let needs_grid = analyses.iter().any(|a| a.needs_grid());
    if needs_grid && raw.protocol.is_empty() {
        return Err(config_error(file, Some("protocol"), "the requested analyses need at least one protocol script"));
    }
    let mut protocols = Vec::with_capacity(raw.protocol.len());
    for (i, r) in raw.protocol.iter().enumerate() {
        let script = match (&r.bundled, &r.path, &r.script) {
            (Some(b), None, None) => {
                let src = ProtocolScript::bundled_source(b).ok_or_else(|| {
                    config_error(file, Some("protocol.bundled"), format!("no bundled script `{b}`"))
                })?;
                inputs.push(InputRecord {
                    role: "protocol".into(),
                    name: format!("<bundled>/{b}"),
                    sha256: sha256_hex(src.as_bytes()),
                });
                ProtocolScript::bundled(b)?
            }
            (None, Some(p), None) => {
                let path = base.join(p);
                let t = read_text(&path, file, "protocol.path")?;
                inputs.push(InputRecord {
                    role: "protocol".into(),
                    name: p.clone(),
                    sha256: sha256_hex(t.as_bytes()),
                });
                ProtocolScript::from_toml(&t, &path.display().to_string())?
            }
            (None, None, Some(s)) => {
                if s.steps.is_empty() {
                    return Err(config_error(file, Some("protocol.script.step"), "script has no steps"));
                }
                s.clone()
            }
            _ => {
                return Err(config_error(
                    file,
                    Some("protocol"),
                    format!("entry {i} needs exactly one of `bundled`, `path` or `script`"),
                ))
            }
        };
        semantic(file, "protocol", script.validate(&scheme))?;
        protocols.push(script);
    }

    let config = ScenarioConfig {
        name: raw.name,
        description: raw.description,
        seed: raw.seed.unwrap_or(DEFAULT_SEED),
        output_dir: raw.output_dir.map(|p| base.join(p)),
        analyses,
        scheme,
        protocols,
        grid: raw.grid,
        preparation: raw.preparation,
        spectrum: raw.spectrum,
        afc: raw.afc,
        lifetime: raw.lifetime,
        noise: raw.noise,
        optimize: raw.optimize,
        cavity: raw.cavity,
        inputs,
    };
    check_sections(&config, file)?;
    Ok(config)
}

fn check_sections(c: &ScenarioConfig, file: &str) -> Result<()> {
    semantic(file, "grid", c.grid.validate())?;
    semantic(file, "preparation.pump", c.preparation.pump.validate())?;
    semantic(file, "preparation.relaxation", c.preparation.relaxation.validate())?;
    semantic(file, "spectrum.window", c.spectrum.window.validate())?;
    semantic(file, "lifetime.window", c.lifetime.window.validate())?;
    if !(c.spectrum.feature_span_mhz > 0.0) {
        return Err(config_error(file, Some("spectrum.feature_span_mhz"), "must be positive"));
    }
    let afc = &c.afc;
    if afc.n_teeth < 1 || afc.tiled_teeth < 1 || !(afc.spacing_mhz > 0.0) || !(afc.tile_margin_mhz >= 0.0) {
        return Err(config_error(file, Some("afc"), "tooth counts and spacing must be positive"));
    }
    if !(afc.pulse.fwhm_ns > 0.0 && afc.pulse.fwhm_ns.is_finite()) {
        return Err(config_error(file, Some("afc.pulse.fwhm_ns"), "must be positive"));
    }
    let n = &c.noise;
    semantic(file, "noise", storage_run(n, n.efficiency, 0).and_then(|r| r.validate()))?;
    if let Some(d) = n.detected_mean_photons {
        if !(d >= 0.0 && d.is_finite()) {
            return Err(config_error(file, Some("noise.detected_mean_photons"), "must be non-negative"));
        }
    }
    if !(n.added_noise >= 0.0 && n.added_noise.is_finite()) {
        return Err(config_error(file, Some("noise.added_noise"), "must be non-negative"));
    }
    if n.n_bins < 1 || n.bootstrap_resamples < 10 {
        return Err(config_error(file, Some("noise"), "need n_bins ≥ 1 and bootstrap_resamples ≥ 10"));
    }
    let o = &c.optimize;
    if !(o.finesse_min > 1.0 && o.finesse_max > o.finesse_min && o.finesse_step > 0.0) {
        return Err(config_error(file, Some("optimize"), "need 1 < finesse_min < finesse_max and a positive step"));
    }
    if !(o.peak_od_db > 0.0 && o.peak_od_db.is_finite()) {
        return Err(config_error(file, Some("optimize.peak_od_db"), "must be positive"));
    }
    if !(o.background_db >= 0.0 && o.background_db.is_finite()) {
        return Err(config_error(file, Some("optimize.background_db"), "must be non-negative"));
    }
    semantic(file, "cavity.design", c.cavity.design.validate())?;
    if !(c.cavity.reference_i0_fraction > 0.0) || c.cavity.i0_fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(config_error(file, Some("cavity"), "impurity fractions must be non-negative, the reference positive"));
    }

    Ok(())
}

fn storage_run(n: &NoiseSection, efficiency: f64, seed: u64) -> Result<StorageRun> {
    let mean = match n.detected_mean_photons {
        Some(d) => calibrate_photon_number(d, n.collection_loss_db)?,
        None => n.mean_photons_at_crystal,
    };
    Ok(StorageRun {
        n_events: n.n_events,
        mean_photons_at_crystal: mean,
        efficiency,
        collection_loss_db: n.collection_loss_db,
        rng_seed: seed,
        phase_sampling: n.phase_sampling,
        phase_jitter_rad: n.phase_jitter_rad,
    })
}

/// Output directory: the explicit choice, else the scenario's, else the
/// environment's, else [`FALLBACK_OUT_DIR`].
pub fn resolve_output_dir(explicit: Option<&Path>, config: &ScenarioConfig) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_DIR))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrepareReport {
    pub protocol_time_s: f64,
    pub level_totals: [f64; 8],
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumReport {
    pub background_at_reference: BackgroundDb,
    pub features: Vec<FeatureMeasurement>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AfcReport {
    pub teeth: Vec<FeatureMeasurement>,
    pub mean_peak_db: f64,
    pub mean_fwhm_khz: f64,
    pub finesse: f64,
    /// Mean absorption midway between adjacent teeth.
    pub inter_tooth_db: f64,
    /// Absorption at the comb center without the memory-level ions.
    pub background_only_db: f64,
    pub efficiency: f64,
    pub echo_delay_ns: Option<f64>,
    pub free_space_efficiency: f64,
    /// Analytic efficiency of an infinite comb with the fitted teeth.
    pub infinite_comb_efficiency: f64,
    /// Infinite-comb value minus the simulated value.
    pub finite_comb_deficit: f64,
    /// Echo efficiency of the center period repeated `tiled_teeth` times.
    pub tiled_efficiency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LifetimeReport {
    pub fit: LifetimeFit,
    pub anti_hole_non_monotonic: Option<bool>,
    pub ladder_only_fit: Option<LifetimeFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseReport {
    pub run: StorageRun,
    pub added_noise_injected: f64,
    pub input: AddedVariance,
    pub echo: AddedVariance,
    /// Classical bound compared with the upper end of the 95% interval.
    pub comparison: BoundComparison,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizeReport {
    pub peak_od_db: f64,
    pub background_db: f64,
    pub optimum: FinesseOptimum,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectionRow {
    pub case: String,
    pub peak_od_db: f64,
    pub finesse: f64,
    pub background_db: f64,
    pub efficiency: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Results {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prepare: Option<PrepareReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<SpectrumReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub afc: Option<AfcReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lifetime: Option<LifetimeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimize: Option<OptimizeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cavity: Option<Vec<ProjectionRow>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageRecord {
    pub stage: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub scenario: String,
    pub package: String,
    pub version: String,
    pub seed: u64,
    pub complete: bool,
    pub inputs: Vec<InputRecord>,
    pub stages: Vec<StageRecord>,
    pub results: Results,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

struct Outputs<'a> {
    dir: &'a Path,
    written: Vec<Artifact>,
}

impl Outputs<'_> {
    fn write(&mut self, file: &str, fill: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        let path = self.dir.join(file);
        let io = |e| Error::Io { path: path.display().to_string(), source: e };
        fill(&mut buf).map_err(io)?;
        std::fs::write(&path, &buf).map_err(io)?;
        self.written.push(Artifact {
            file: file.to_string(),
            sha256: sha256_hex(&buf),
        });
        Ok(())
    }

    fn take(&mut self) -> Vec<Artifact> {
        std::mem::take(&mut self.written)
    }

    fn discard(&mut self) {
        for a in self.written.drain(..) {
            let _ = std::fs::remove_file(self.dir.join(&a.file));
        }
    }
}

/// Pipeline state shared between stages.
struct State {
    grid: Option<SpectralPopulationGrid>,
    calibration: Option<DbCalibration>,
    spectrum: Option<AbsorptionSpectrum>,
}

/// Run every requested analysis of `config` in dependency order, writing
/// artifacts and `manifest.json` into `out_dir`. On a stage failure its
/// partial outputs are removed, the manifest is written with
/// `complete: false` and the error names the stage.
pub fn run_scenario(config: &ScenarioConfig, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io { path: out_dir.display().to_string(), source: e })?;
    let mut manifest = Manifest {
        scenario: config.name.clone(),
        package: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        complete: false,
        inputs: config.inputs.clone(),
        stages: Vec::new(),
        results: Results::default(),
    };
    let mut out = Outputs { dir: out_dir, written: Vec::new() };
    let mut state = State { grid: None, calibration: None, spectrum: None };

    let wants = |a: Analysis| config.analyses.contains(&a);
    let mut plan = Vec::new();
    if config.analyses.iter().any(|a| a.needs_grid()) {
        plan.push(Analysis::Prepare);
    }
    if wants(Analysis::Spectrum) || wants(Analysis::Afc) {
        plan.push(Analysis::Spectrum);
    }
    for a in [Analysis::Afc, Analysis::Lifetime, Analysis::Noise, Analysis::Optimize, Analysis::Cavity] {
        if wants(a) {
            plan.push(a);
        }
    }

    for stage in plan {
        let r = match stage {
            Analysis::Prepare => stage_prepare(config, &mut state, &mut out, wants(Analysis::Prepare))
                .map(|r| manifest.results.prepare = Some(r)),
            Analysis::Spectrum => stage_spectrum(config, &mut state, &mut out, wants(Analysis::Spectrum))
                .map(|r| manifest.results.spectrum = Some(r)),
            Analysis::Afc => stage_afc(config, &state, &mut out).map(|r| manifest.results.afc = Some(r)),
            Analysis::Lifetime => stage_lifetime(config, &state, &mut out).map(|r| manifest.results.lifetime = Some(r)),
            Analysis::Noise => {
                let eta = match (&manifest.results.afc, config.noise.use_afc_efficiency) {
                    (Some(a), true) => a.efficiency,
                    _ => config.noise.efficiency,
                };
                stage_noise(config, eta, &mut out).map(|r| manifest.results.noise = Some(r))
            }
            Analysis::Optimize => {
                let (d, d0) = match (&manifest.results.afc, config.optimize.use_afc_fit) {
                    (Some(a), true) => (a.mean_peak_db, a.background_only_db),
                    _ => (config.optimize.peak_od_db, config.optimize.background_db),
                };
                stage_optimize(config, d, d0, &mut out).map(|r| manifest.results.optimize = Some(r))
            }
            Analysis::Cavity => stage_cavity(config, &mut out).map(|r| manifest.results.cavity = Some(r)),
        };
        match r {
            Ok(()) => manifest.stages.push(StageRecord {
                stage: stage.name().into(),
                status: "ok".into(),
                error: None,
                artifacts: out.take(),
            }),
            Err(e) => {
                out.discard();
                manifest.stages.push(StageRecord {
                    stage: stage.name().into(),
                    status: "failed".into(),
                    error: Some(e.to_string()),
                    artifacts: Vec::new(),
                });
                write_manifest(out_dir, &manifest)?;
                return Err(Error::Stage {
                    stage: stage.name().into(),
                    source: Box::new(e),
                });
            }
        }
    }
    manifest.complete = true;
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, m.to_json()).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

fn stage_prepare(
    config: &ScenarioConfig,
    state: &mut State,
    out: &mut Outputs,
    write_grid: bool,
) -> Result<PrepareReport> {
    let p = &config.preparation;
    let mut grid = init_thermal(&config.scheme, &config.grid, p.temperature_k, p.line_center_mhz, 1.0)?;
    let cal = DbCalibration::for_grid(&config.scheme, &grid, p.memory_mhz)?;
    let relaxation = p.relax_during_waits.then_some(&p.relaxation);
    let mut rows = Vec::new();
    let mut elapsed = 0.0;
    for script in &config.protocols {
        let log = run_protocol(&mut grid, &config.scheme, script, &p.pump, relaxation)?;
        for l in &log {
            rows.push((script.name.clone(), elapsed, l.clone()));
        }
        elapsed += script.protocol_time();
    }
    out.write("protocol_log.csv", |w| {
        write!(w, "script,step,kind,protocol_time_s")?;
        for l in crate::hyperfine::Level::all() {
            write!(w, ",ground_{l}")?;
        }
        writeln!(w, ",excited,total")?;
        for (name, t0, l) in &rows {
            write!(w, "{name},{},{},{:.9}", l.index, l.kind, t0 + l.protocol_time_s)?;
            for v in l.level_totals {
                write!(w, ",{v:.9e}")?;
            }
            writeln!(w, ",{:.9e},{:.9e}", l.excited, l.total)?;
        }
        Ok(())
    })?;
    if write_grid {
        out.write("populations.csv", |w| grid.write_csv(w))?;
    }
    let report = PrepareReport {
        protocol_time_s: elapsed,
        level_totals: grid.level_totals(),
        total: grid.total(),
    };
    state.grid = Some(grid);
    state.calibration = Some(cal);
    Ok(report)
}

fn prepared(state: &State) -> Result<(&SpectralPopulationGrid, &DbCalibration)> {
    match (&state.grid, &state.calibration) {
        (Some(g), Some(c)) => Ok((g, c)),
        _ => Err(Error::param("scenario", "the preparation stage did not run")),
    }
}

fn stage_spectrum(config: &ScenarioConfig, state: &mut State, out: &mut Outputs, write: bool) -> Result<SpectrumReport> {
    let (grid, cal) = prepared(state)?;
    let s = &config.spectrum;
    let spectrum = synthesize(grid, &config.scheme, &s.window, cal, s.reference_mhz)?;
    let features = s
        .features_mhz
        .iter()
        .map(|&c| measure_feature(&spectrum, c, s.feature_span_mhz))
        .collect::<Result<Vec<_>>>()?;
    if write {
        out.write("spectrum.csv", |w| spectrum.write_csv(w))?;
    }
    let report = SpectrumReport {
        background_at_reference: spectrum.background_db,
        features,
    };
    state.spectrum = Some(spectrum);
    Ok(report)
}

fn stage_afc(config: &ScenarioConfig, state: &State, out: &mut Outputs) -> Result<AfcReport> {
    let sp = state
        .spectrum
        .as_ref()
        .ok_or_else(|| Error::param("scenario", "the spectrum stage did not run"))?;
    let a = &config.afc;
    let centers = a.tooth_centers();
    let teeth = centers
        .iter()
        .map(|&c| measure_feature(sp, c, a.spacing_mhz))
        .collect::<Result<Vec<_>>>()?;
    let n = teeth.len() as f64;
    let mean_peak_db = teeth.iter().map(|t| t.peak_db).sum::<f64>() / n;
    let mean_fwhm_khz = teeth.iter().map(|t| t.fwhm_khz).sum::<f64>() / n;
    let finesse = a.spacing_mhz * 1e3 / mean_fwhm_khz;
    let inter_tooth_db = if centers.len() > 1 {
        centers.windows(2).map(|w| sp.at(0.5 * (w[0] + w[1]))).sum::<f64>() / (centers.len() - 1) as f64
    } else {
        f64::NAN
    };
    let background_only_db = sp.background_only().at(a.center_mhz);
    let echo: EchoResult = echo_simulate(sp, &a.pulse)?;
    let tiled = echo_simulate(
        &tile_period(sp, a.center_mhz, a.spacing_mhz, a.tiled_teeth, a.tile_margin_mhz)?,
        &a.pulse,
    )?;
    let infinite = efficiency_analytic(mean_peak_db, finesse, background_only_db)?;
    out.write("echo.csv", |w| echo.write_csv(w))?;
    out.write("teeth.csv", |w| {
        writeln!(w, "center_MHz,peak_dB,fwhm_kHz,background_dB")?;
        for t in &teeth {
            writeln!(w, "{:.6},{:.6},{:.3},{:.6}", t.center_mhz, t.peak_db, t.fwhm_khz, t.background_db)?;
        }
        Ok(())
    })?;
    Ok(AfcReport {
        teeth,
        mean_peak_db,
        mean_fwhm_khz,
        finesse,
        inter_tooth_db,
        background_only_db,
        efficiency: echo.efficiency,
        echo_delay_ns: echo.echo_delay_ns,
        free_space_efficiency: echo.free_space_efficiency,
        infinite_comb_efficiency: infinite,
        finite_comb_deficit: infinite - echo.efficiency,
        tiled_efficiency: tiled.efficiency,
    })
}

/// Feature depth, anti-hole depth, and populations of one decay sample.
fn lifetime_trace(
    config: &ScenarioConfig,
    grid: &SpectralPopulationGrid,
    cal: &DbCalibration,
    rates: &RelaxationRates,
) -> Result<Vec<(f64, f64, Option<f64>)>> {
    let l = &config.lifetime;
    let mut g = grid.clone();
    let mut rows = Vec::with_capacity(l.samples as usize);
    for k in 0..l.samples {
        if k > 0 {
            relax(&mut g, &config.scheme, l.interval_s, rates)?;
        }
        let sp = synthesize(&g, &config.scheme, &l.window, cal, l.center_mhz)?;
        let base = 0.5 * (sp.at(l.center_mhz - l.reference_offset_mhz) + sp.at(l.center_mhz + l.reference_offset_mhz));
        let feature = sp.at(l.center_mhz) - base;
        let anti = l.anti_hole_mhz.map(|f| sp.at(f) - sp.at(l.anti_hole_reference_mhz));
        rows.push((k as f64 * l.interval_s, feature, anti));
    }
    Ok(rows)
}

fn fit_trace(rows: &[(f64, f64, Option<f64>)]) -> Result<LifetimeFit> {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.0, r.1.abs())).collect();
    fit_exponential_lifetime(&pts)
}

fn stage_lifetime(config: &ScenarioConfig, state: &State, out: &mut Outputs) -> Result<LifetimeReport> {
    let (grid, cal) = prepared(state)?;
    let rates = config.preparation.relaxation;
    let rows = lifetime_trace(config, grid, cal, &rates)?;
    let fit = fit_trace(&rows)?;
    let ladder = if config.lifetime.ladder_only_comparison {
        Some(lifetime_trace(config, grid, cal, &rates.ladder_only())?)
    } else {
        None
    };
    let ladder_only_fit = ladder.as_deref().map(fit_trace).transpose()?;
    let anti_hole_non_monotonic = config.lifetime.anti_hole_mhz.map(|_| {
        let a: Vec<f64> = rows.iter().filter_map(|r| r.2).collect();
        let (first, last) = (a[0], a[a.len() - 1]);
        let peak = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        a.len() >= 3 && peak > first && peak > last
    });
    out.write("lifetime.csv", |w| {
        write!(w, "time_s,feature_dB")?;
        if config.lifetime.anti_hole_mhz.is_some() {
            write!(w, ",anti_hole_dB")?;
        }
        if ladder.is_some() {
            write!(w, ",ladder_only_feature_dB")?;
        }
        writeln!(w)?;
        for (i, (t, f, a)) in rows.iter().enumerate() {
            write!(w, "{t:.3},{f:.9}")?;
            if let Some(a) = a {
                write!(w, ",{a:.9}")?;
            }
            if let Some(l) = &ladder {
                write!(w, ",{:.9}", l[i].1)?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    Ok(LifetimeReport {
        fit,
        anti_hole_non_monotonic,
        ladder_only_fit,
    })
}

fn stage_noise(config: &ScenarioConfig, eta: f64, out: &mut Outputs) -> Result<NoiseReport> {
    let n = &config.noise;
    let run = storage_run(n, eta, config.seed)?;
    let (input, echo) = simulate_storage_events(&run, n.added_noise)?;
    let opts = VarianceOptions {
        n_bins: n.n_bins,
        bootstrap_resamples: n.bootstrap_resamples,
        seed: config.seed,
    };
    let vi = added_variance_with(&input, &opts)?;
    let ve = added_variance_with(&echo, &opts)?;
    let comparison = compare_to_classical(ve.ci95.1, eta)?;
    out.write("noise_bins.csv", |w| ve.write_csv(w))?;
    if n.write_samples {
        out.write("noise_input.csv", |w| input.write_csv(w))?;
        out.write("noise_echo.csv", |w| echo.write_csv(w))?;
    }
    Ok(NoiseReport {
        run,
        added_noise_injected: n.added_noise,
        input: strip_bins(vi),
        echo: ve,
        comparison,
    })
}

fn strip_bins(mut v: AddedVariance) -> AddedVariance {
    v.bins.clear();
    v
}

fn stage_optimize(config: &ScenarioConfig, d: f64, d0: f64, out: &mut Outputs) -> Result<OptimizeReport> {
    let o = &config.optimize;
    let optimum = optimize_finesse(d, d0)?;
    let n = ((o.finesse_max - o.finesse_min) / o.finesse_step).round() as usize;
    let curve = (0..=n)
        .map(|i| {
            let f = o.finesse_min + i as f64 * o.finesse_step;
            efficiency_analytic(d, f, d0).map(|e| (f, e))
        })
        .collect::<Result<Vec<_>>>()?;
    out.write("optimize.csv", |w| {
        writeln!(w, "finesse,efficiency")?;
        for (f, e) in &curve {
            writeln!(w, "{f:.4},{e:.9}")?;
        }
        Ok(())
    })?;
    Ok(OptimizeReport {
        peak_od_db: d,
        background_db: d0,
        optimum,
    })
}

fn stage_cavity(config: &ScenarioConfig, out: &mut Outputs) -> Result<Vec<ProjectionRow>> {
    let c = &config.cavity;
    let mut rows = Vec::new();
    for (i, f) in c.free_space.iter().enumerate() {
        rows.push(ProjectionRow {
            case: format!("free_space_{i}"),
            peak_od_db: f.peak_od_db,
            finesse: f.finesse,
            background_db: f.background_db,
            efficiency: efficiency_analytic(f.peak_od_db, f.finesse, f.background_db)?,
        });
    }
    let d = c.design;
    rows.push(ProjectionRow {
        case: "cavity".into(),
        peak_od_db: d.peak_od_db,
        finesse: d.comb_finesse,
        background_db: d.background_db,
        efficiency: cavity_projection(&d)?,
    });
    for &x in &c.i0_fractions {
        let bg = rescale_impurity(d.background_db, c.reference_i0_fraction, x)?;
        let design = CavityDesign { background_db: bg, ..d };
        rows.push(ProjectionRow {
            case: format!("cavity_i0_{x}"),
            peak_od_db: d.peak_od_db,
            finesse: d.comb_finesse,
            background_db: bg,
            efficiency: cavity_projection(&design)?,
        });
    }
    out.write("projection.csv", |w| {
        writeln!(w, "case,peak_od_dB,finesse,background_dB,efficiency")?;
        for r in &rows {
            writeln!(
                w,
                "{},{:.4},{:.4},{:.6},{:.6}",
                r.case, r.peak_od_db, r.finesse, r.background_db, r.efficiency
            )?;
        }
        Ok(())
    })?;
    Ok(rows)
}
