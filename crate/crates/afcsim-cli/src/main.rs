//! `afcsim` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration error, 3 runtime or
//! numeric error.

use afcsim::scenario::{
    bundled_scenario, bundled_scenario_names, parse_config_file, resolve_output_dir, run_scenario, Analysis, Manifest,
    ScenarioConfig, MANIFEST_FILE,
};
use afcsim::Error;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "afcsim", version, about = "Spectral preparation, AFC echo and heterodyne noise simulator")]
#[command(after_help = concat!(
    "Output directory: --out, else the scenario's output_dir, else $AFCSIM_OUT_DIR, else ./afcsim-out.\n",
    "Exit codes: 0 success, 1 usage error, 2 configuration error, 3 runtime error."
))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Scenario file.
    #[arg(long, short, conflicts_with = "bundled")]
    config: Option<PathBuf>,
    /// Name of a scenario shipped with the simulator.
    #[arg(long, short)]
    bundled: Option<String>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Print nothing on success.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every analysis a scenario requests.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run the protocol scripts and write the population grid.
    Prepare {
        #[command(flatten)]
        common: Common,
    },
    /// Synthesize the absorption spectrum after preparation.
    Spectrum {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the comb teeth and simulate the echo.
    Afc {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate heterodyne readout and estimate the added noise.
    Noise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        efficiency: Option<f64>,
        /// Mean photon number at the crystal.
        #[arg(long)]
        photons: Option<f64>,
        #[arg(long)]
        loss_db: Option<f64>,
        #[arg(long)]
        events: Option<usize>,
        /// Injected added noise, vacuum units.
        #[arg(long)]
        added_noise: Option<f64>,
    },
    /// Optimal comb finesse for a peak depth and background.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        peak_od_db: Option<f64>,
        #[arg(long)]
        background_db: Option<f64>,
    },
    /// Free-space and cavity efficiency projections.
    Project {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        peak_od_db: Option<f64>,
        #[arg(long)]
        comb_finesse: Option<f64>,
        #[arg(long)]
        background_db: Option<f64>,
    },
    /// List the bundled scenarios.
    List,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn load(common: &Common, fallback: Option<&str>) -> Result<ScenarioConfig, Failure> {
    let mut c = match (&common.config, &common.bundled, fallback) {
        (Some(p), _, _) => parse_config_file(p)?,
        (None, Some(b), _) => bundled_scenario(b)?,
        (None, None, Some(b)) => bundled_scenario(b)?,
        (None, None, None) => return Err(Failure::Usage("give --config FILE or --bundled NAME".into())),
    };
    if let Some(s) = common.seed {
        c.seed = s;
    }
    Ok(c)
}

fn restrict(c: &mut ScenarioConfig, a: Analysis) {
    c.analyses = vec![a];
}

fn execute(cmd: Command) -> Result<(), Failure> {
    let (common, config) = match cmd {
        Command::List => {
            for n in bundled_scenario_names() {
                println!("{n}");
            }
            return Ok(());
        }
        Command::Run { common } => {
            let c = load(&common, None)?;
            (common, c)
        }
        Command::Prepare { common } => {
            let mut c = load(&common, None)?;
            restrict(&mut c, Analysis::Prepare);
            (common, c)
        }
        Command::Spectrum { common } => {
            let mut c = load(&common, None)?;
            restrict(&mut c, Analysis::Spectrum);
            (common, c)
        }
        Command::Afc { common } => {
            let mut c = load(&common, Some("fig3_afc"))?;
            restrict(&mut c, Analysis::Afc);
            (common, c)
        }
        Command::Noise { common, efficiency, photons, loss_db, events, added_noise } => {
            let mut c = load(&common, Some("fig4_noise"))?;
            restrict(&mut c, Analysis::Noise);
            let n = &mut c.noise;
            if let Some(v) = efficiency {
                n.efficiency = v;
                n.use_afc_efficiency = false;
            }
            if let Some(v) = photons {
                n.mean_photons_at_crystal = v;
                n.detected_mean_photons = None;
            }
            n.collection_loss_db = loss_db.unwrap_or(n.collection_loss_db);
            n.n_events = events.unwrap_or(n.n_events);
            n.added_noise = added_noise.unwrap_or(n.added_noise);
            (common, c)
        }
        Command::Optimize { common, peak_od_db, background_db } => {
            let mut c = load(&common, Some("projection"))?;
            restrict(&mut c, Analysis::Optimize);
            let o = &mut c.optimize;
            if peak_od_db.is_some() || background_db.is_some() {
                o.use_afc_fit = false;
            }
            o.peak_od_db = peak_od_db.unwrap_or(o.peak_od_db);
            o.background_db = background_db.unwrap_or(o.background_db);
            (common, c)
        }
        Command::Project { common, peak_od_db, comb_finesse, background_db } => {
            let mut c = load(&common, Some("projection"))?;
            restrict(&mut c, Analysis::Cavity);
            let d = &mut c.cavity.design;
            d.peak_od_db = peak_od_db.unwrap_or(d.peak_od_db);
            d.comb_finesse = comb_finesse.unwrap_or(d.comb_finesse);
            d.background_db = background_db.unwrap_or(d.background_db);
            (common, c)
        }
    };
    config.validate()?;
    let out = resolve_output_dir(common.out.as_deref(), &config);
    let manifest = run_scenario(&config, &out)?;
    if !common.quiet {
        summarize(&manifest);
        println!("wrote {}", out.join(MANIFEST_FILE).display());
    }
    Ok(())
}

fn summarize(m: &Manifest) {
    let r = &m.results;
    println!("scenario {} (seed {})", m.scenario, m.seed);
    if let Some(p) = &r.prepare {
        println!("prepare: protocol time {:.3} s, total population {:.9}", p.protocol_time_s, p.total);
    }
    if let Some(s) = &r.spectrum {
        let b = s.background_at_reference;
        println!(
            "spectrum: background at reference {:.3} dB (I=0 {:.3}, bulk {:.3}, residual {:.3})",
            b.i0_tail + b.bulk_tail + b.residual_polarization,
            b.i0_tail,
            b.bulk_tail,
            b.residual_polarization
        );
        for f in &s.features {
            println!(
                "  feature at {:.3} MHz: {:.2} dB, FWHM {:.0} kHz",
                f.center_mhz, f.peak_db, f.fwhm_khz
            );
        }
    }
    if let Some(a) = &r.afc {
        println!(
            "afc: teeth {:.2} dB, FWHM {:.0} kHz, finesse {:.2}, inter-tooth {:.3} dB",
            a.mean_peak_db, a.mean_fwhm_khz, a.finesse, a.inter_tooth_db
        );
        let delay = a.echo_delay_ns.map_or("none".to_string(), |d| format!("{d:.0} ns"));
        println!(
            "  echo efficiency {:.4} (infinite comb {:.4}, deficit {:.4}), delay {delay}",
            a.efficiency, a.infinite_comb_efficiency, a.finite_comb_deficit
        );
    }
    if let Some(l) = &r.lifetime {
        println!("lifetime: T = {:.1} ± {:.1} s", l.fit.lifetime_s, l.fit.lifetime_stderr_s);
        if let Some(n) = l.anti_hole_non_monotonic {
            println!("  anti-hole rises then falls: {n}");
        }
        if let Some(f) = &l.ladder_only_fit {
            println!("  without cross-relaxation: T = {:.1} ± {:.1} s", f.lifetime_s, f.lifetime_stderr_s);
        }
    }
    if let Some(n) = &r.noise {
        println!(
            "noise: added variance {:.4} [{:.4}, {:.4}], classical bound {:.3}, beaten: {}",
            n.echo.estimate, n.echo.ci95.0, n.echo.ci95.1, n.comparison.bound, n.comparison.beats_classical_bound
        );
    }
    if let Some(o) = &r.optimize {
        println!(
            "optimize: d {:.2} dB, d0 {:.3} dB -> finesse {:.3}, efficiency {:.4}",
            o.peak_od_db, o.background_db, o.optimum.finesse, o.optimum.efficiency
        );
    }
    if let Some(rows) = &r.cavity {
        for p in rows {
            println!(
                "project {}: d {:.2} dB, F {:.2}, d0 {:.4} dB -> {:.4}",
                p.case, p.peak_od_db, p.finesse, p.background_db, p.efficiency
            );
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
