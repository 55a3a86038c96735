//! Command-line harness for the pRide attack simulation.
//!
//! Subcommands:
//! - `gen-city`   write a city preset's (or a custom synthetic) grid map and
//!   road network to files
//! - `simulate`   build one seeded world, run a protocol session, and emit
//!   the adversary-view transcript (plus optional ground truth)
//! - `attack`     consume a transcript and emit per-driver recovery outcomes
//! - `bench`      run the full seeded benchmark matrix and render a report

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pride_core::attack::{
    harvest_session, save_outcomes, AttackConfig, AttackMode, GridFactorTable, RecoveryStatus,
};
use pride_core::experiment::{
    render_report, run_experiment, sample_world, CitySpec, ExperimentConfig, ReportFormat,
    DEFAULT_MASTER_SEED,
};
use pride_core::geo::GridMap;
use pride_core::protocol::{
    run_session, BlindingRange, ProtocolMode, PredictionStub, SessionConfig, SessionTranscript,
    SessionTruth,
};
use pride_core::roadnet::{preset, synth_city, RoadNetwork, PRESETS};
use pride_core::seeds::{self, label};

#[derive(Parser)]
#[command(
    name = "pride",
    version,
    about = "Enhanced-pRide protocol simulator and driver-location harvesting attack"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a grid map and road network to files.
    GenCity(GenCityArgs),
    /// Run one protocol session and write the rider-view transcript.
    Simulate(SimulateArgs),
    /// Run the harvesting attack on a transcript.
    Attack(AttackArgs),
    /// Run the benchmark matrix and render a report.
    Bench(BenchArgs),
}

/// Where the published map and roads come from: a named preset or files.
#[derive(Args, Clone)]
struct CityInput {
    /// City preset name (losangeles, london, newyorkcity, paris).
    #[arg(long)]
    city: Option<String>,
    /// Grid map file (with --roads) instead of a preset.
    #[arg(long, requires = "roads", conflicts_with = "city")]
    map: Option<PathBuf>,
    /// Road segment file (with --map) instead of a preset.
    #[arg(long, requires = "map", conflicts_with = "city")]
    roads: Option<PathBuf>,
}

impl CityInput {
    fn load(&self) -> Result<(GridMap, RoadNetwork)> {
        if let Some(name) = &self.city {
            let p = preset(name)
                .with_context(|| format!("unknown city preset `{name}`; known: {}", preset_names()))?;
            return Ok(p.build());
        }
        match (&self.map, &self.roads) {
            (Some(map_path), Some(roads_path)) => {
                let map = GridMap::load(open(map_path)?)
                    .with_context(|| format!("reading grid map {}", map_path.display()))?;
                let roads = RoadNetwork::load(open(roads_path)?)
                    .with_context(|| format!("reading roads {}", roads_path.display()))?;
                Ok((map, roads))
            }
            _ => bail!("either --city or both --map and --roads are required"),
        }
    }
}

fn preset_names() -> String {
    PRESETS
        .iter()
        .map(|p| p.name)
        .collect::<Vec<_>>()
        .join(", ")
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

#[derive(Args)]
struct GenCityArgs {
    /// City preset to materialise; omit to generate a custom lattice.
    #[arg(long)]
    city: Option<String>,
    #[arg(long, default_value_t = 8)]
    rows: u32,
    #[arg(long, default_value_t = 8)]
    cols: u32,
    #[arg(long, default_value_t = 2000)]
    cell_width: i64,
    #[arg(long, default_value_t = 2000)]
    cell_height: i64,
    /// Rough spacing between parallel roads for the custom lattice.
    #[arg(long, default_value_t = 500)]
    spacing: i64,
    #[arg(long, default_value_t = 1)]
    jitter_seed: u64,
    #[arg(long)]
    out_map: PathBuf,
    #[arg(long)]
    out_roads: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    city: CityInput,
    #[arg(long, default_value_t = 5)]
    drivers_per_grid: u32,
    #[arg(long, default_value_t = DEFAULT_MASTER_SEED)]
    seed: u64,
    /// basic | enhanced
    #[arg(long, default_value = "enhanced")]
    mode: String,
    #[arg(long, default_value_t = 1)]
    sr: u32,
    #[arg(long)]
    allow_boundary_rider: bool,
    #[arg(long, default_value_t = 1)]
    e_min: u64,
    #[arg(long, default_value_t = 1 << 24)]
    e_max: u64,
    #[arg(long, default_value_t = 1)]
    r_min: u64,
    #[arg(long, default_value_t = 1 << 24)]
    r_max: u64,
    /// Transcript output path.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth sidecar output path.
    #[arg(long)]
    truth_out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    city: CityInput,
    #[arg(long)]
    transcript: PathBuf,
    /// gcd-reduce | divisor-search
    #[arg(long, default_value = "gcd-reduce")]
    mode: String,
    /// Ground-truth sidecar for scoring columns.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Outcome records output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    circle_tolerance: u64,
    #[arg(long, default_value_t = 1.0)]
    ambiguity_threshold: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// Key-value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset name, comma-separated names, or `all`.
    #[arg(long)]
    city: Option<String>,
    /// Comma-separated driver densities, e.g. `5,15,25`.
    #[arg(long)]
    drivers_per_grid: Option<String>,
    #[arg(long)]
    runs: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// gcd-reduce | divisor-search
    #[arg(long)]
    mode: Option<String>,
    /// table | csv | json
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    allow_boundary_rider: bool,
}

/// The bench config file: every field optional, flags win.
#[derive(Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchFileConfig {
    city: Option<String>,
    drivers_per_grid: Option<Vec<u32>>,
    runs: Option<u32>,
    sr: Option<u32>,
    seed: Option<u64>,
    mode: Option<String>,
    format: Option<String>,
    allow_boundary_rider: Option<bool>,
    pr_max: Option<u64>,
    blinding: Option<BlindingFileConfig>,
}

#[derive(serde::Deserialize)]
struct BlindingFileConfig {
    e_min: Option<u64>,
    e_max: Option<u64>,
    r_min: Option<u64>,
    r_max: Option<u64>,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenCity(args) => gen_city(args),
        Cmd::Simulate(args) => simulate(args),
        Cmd::Attack(args) => attack(args),
        Cmd::Bench(args) => bench(args),
    }
}

fn gen_city(args: GenCityArgs) -> Result<()> {
    let (map, roads) = match &args.city {
        Some(name) => preset(name)
            .with_context(|| format!("unknown city preset `{name}`; known: {}", preset_names()))?
            .build(),
        None => synth_city(
            args.rows,
            args.cols,
            args.cell_width,
            args.cell_height,
            args.spacing,
            args.jitter_seed,
        ),
    };
    map.save(create(&args.out_map)?)?;
    roads.save(create(&args.out_roads)?)?;
    println!(
        "wrote {} ({} cells) and {} ({} segments)",
        args.out_map.display(),
        map.cell_count(),
        args.out_roads.display(),
        roads.segments().len()
    );
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mode = ProtocolMode::parse(&args.mode)
        .with_context(|| format!("unknown mode `{}` (basic|enhanced)", args.mode))?;
    let (map, roads) = args.city.load()?;
    let world = sample_world(
        &map,
        &roads,
        args.drivers_per_grid,
        args.allow_boundary_rider,
        args.seed,
    )?;
    let session = run_session(
        &world,
        &SessionConfig {
            search_radius: args.sr,
            mode,
            blinding: BlindingRange {
                e_min: args.e_min,
                e_max: args.e_max,
                r_min: args.r_min,
                r_max: args.r_max,
            },
            prediction: PredictionStub::zero(),
            seed: seeds::child(args.seed, label::SESSION, 0),
        },
    )?;
    session.transcript.save(create(&args.out)?)?;
    if let Some(path) = &args.truth_out {
        session.truth.save(create(path)?)?;
    }
    println!(
        "session: {} responding drivers, transcript written to {}",
        session.transcript.records.len(),
        args.out.display()
    );
    Ok(())
}

fn attack(args: AttackArgs) -> Result<()> {
    let mode = AttackMode::parse(&args.mode)
        .with_context(|| format!("unknown mode `{}` (gcd-reduce|divisor-search)", args.mode))?;
    let (map, roads) = args.city.load()?;
    let transcript = SessionTranscript::load(open(&args.transcript)?)
        .with_context(|| format!("reading transcript {}", args.transcript.display()))?;
    let truth = match &args.truth {
        Some(path) => Some(
            SessionTruth::load(open(path)?)
                .with_context(|| format!("reading ground truth {}", path.display()))?,
        ),
        None => None,
    };
    let factors = GridFactorTable::new(&map);
    let cfg = AttackConfig {
        mode,
        circle_tolerance: args.circle_tolerance,
        ambiguity_threshold_m: args.ambiguity_threshold,
    };
    let outcomes = harvest_session(&transcript, &map, &factors, &roads, &cfg)?;

    match &args.out {
        Some(path) => save_outcomes(&outcomes, truth.as_ref(), create(path)?)?,
        None => {
            if let Err(e) = save_outcomes(&outcomes, truth.as_ref(), std::io::stdout().lock()) {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
                return Ok(());
            }
        }
    }

    let recovered = outcomes
        .iter()
        .filter(|o| o.status == RecoveryStatus::Recovered)
        .count();
    eprintln!("{} drivers, {} locations recovered", outcomes.len(), recovered);
    if let Some(truth) = &truth {
        let exact = outcomes
            .iter()
            .filter(|o| {
                truth
                    .for_driver(o.driver_id)
                    .is_some_and(|t| o.location == Some(t.location))
            })
            .count();
        eprintln!("{exact} exact matches against ground truth");
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let file_cfg: BenchFileConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => BenchFileConfig::default(),
    };

    let city_arg = args
        .city
        .or(file_cfg.city)
        .unwrap_or_else(|| "all".to_string());
    let cities: Vec<CitySpec> = if city_arg == "all" {
        PRESETS
            .iter()
            .map(|p| CitySpec::Preset(p.name.to_string()))
            .collect()
    } else {
        city_arg
            .split(',')
            .map(|name| {
                let name = name.trim();
                preset(name)
                    .map(|p| CitySpec::Preset(p.name.to_string()))
                    .with_context(|| {
                        format!("unknown city preset `{name}`; known: {}", preset_names())
                    })
            })
            .collect::<Result<_>>()?
    };

    let densities = match args.drivers_per_grid {
        Some(list) => list
            .split(',')
            .map(|tok| tok.trim().parse::<u32>().context("bad driver density"))
            .collect::<Result<Vec<_>>>()?,
        None => file_cfg
            .drivers_per_grid
            .unwrap_or_else(|| pride_core::experiment::DEFAULT_DENSITIES.to_vec()),
    };

    let mode_str = args
        .mode
        .or(file_cfg.mode)
        .unwrap_or_else(|| "gcd-reduce".to_string());
    let mode = AttackMode::parse(&mode_str)
        .with_context(|| format!("unknown mode `{mode_str}` (gcd-reduce|divisor-search)"))?;

    let mut blinding = BlindingRange::default();
    if let Some(b) = &file_cfg.blinding {
        blinding.e_min = b.e_min.unwrap_or(blinding.e_min);
        blinding.e_max = b.e_max.unwrap_or(blinding.e_max);
        blinding.r_min = b.r_min.unwrap_or(blinding.r_min);
        blinding.r_max = b.r_max.unwrap_or(blinding.r_max);
    }

    let cfg = ExperimentConfig {
        cities,
        drivers_per_grid: densities,
        runs: args.runs.or(file_cfg.runs).unwrap_or(10),
        search_radius: file_cfg.sr.unwrap_or(1),
        blinding,
        attack: AttackConfig {
            mode,
            ..AttackConfig::default()
        },
        master_seed: args.seed.or(file_cfg.seed).unwrap_or(DEFAULT_MASTER_SEED),
        allow_boundary_rider: args.allow_boundary_rider
            || file_cfg.allow_boundary_rider.unwrap_or(false),
        pr_max: file_cfg.pr_max.unwrap_or(0),
    };

    let format_str = args
        .format
        .or(file_cfg.format)
        .unwrap_or_else(|| "table".to_string());
    let format = ReportFormat::parse(&format_str)
        .with_context(|| format!("unknown format `{format_str}` (table|csv|json)"))?;

    let output = run_experiment(&cfg)?;
    let rendered = render_report(&output.report, format);
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(rendered.as_bytes())?;
            w.flush()?;
            println!(
                "report written to {} ({} cells, overall recovery {:.1}%)",
                path.display(),
                output.report.cells.len(),
                output.report.overall_recovery_pct()
            );
        }
        None => print!("{rendered}"),
    }
    Ok(())
}
