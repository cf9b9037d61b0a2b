use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ilc_core::harness::{self, plot, OutputFormat, Scenario};
use ilc_core::measurement::{
    extract_tooltip, generate_tool_cloud, read_cloud_csv, write_cloud_csv, CloudSpec, SegmentationConfig,
};
use ilc_core::nalgebra::Vector3;

/// Exit code for runs that finished but did not reach their targets.
const NOT_CONVERGED: u8 = 2;

#[derive(Parser)]
#[command(
    name = "rcm-ilc",
    version,
    about = "Dual-loop learning control for RCM tool rotation"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn grid corrections from simulated imaging feedback.
    Kinematic(StageArgs),
    /// Identify FIR models of the joint actuators from step responses.
    Identify(StageArgs),
    /// Learn joint inputs along the rotation profile (needs kinematic and identify output).
    Dynamic(StageArgs),
    /// Run kinematic, identify and dynamic in sequence.
    Pipeline(StageArgs),
    /// Render SVG charts from an output directory.
    Plot {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Estimate the tooltip from a point cloud (CSV with x,y,z header).
    Segment(SegmentArgs),
    /// Write a synthetic cannula point cloud.
    Cloud(CloudArgs),
    /// Print the bundled scenario.
    Scenario,
}

#[derive(Args)]
struct StageArgs {
    /// Scenario file; the bundled paper-repro scenario when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Encoding of tabular outputs.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Also render SVG charts into OUT/plots.
    #[arg(long)]
    plots: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

#[derive(Args)]
struct SegmentArgs {
    cloud: PathBuf,
    /// Approximate tool direction toward the tip, e.g. 0,0,1.
    #[arg(long, value_parser = parse_vec3)]
    axis_hint: Option<Vector3<f64>>,
    #[arg(long, default_value_t = 3.0)]
    mad_factor: f64,
    /// Print the estimate as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CloudArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tip position in meters.
    #[arg(long, value_parser = parse_vec3, default_value = "0,0,0")]
    tip: Vector3<f64>,
    #[arg(long, value_parser = parse_vec3, default_value = "0,0,1")]
    axis: Vector3<f64>,
    #[arg(long, default_value_t = 2000)]
    points: usize,
    #[arg(long, default_value_t = 0.05)]
    outliers: f64,
    #[arg(long, default_value_t = 10.0)]
    noise_um: f64,
    #[arg(long, default_value_t = 150.0)]
    radius_um: f64,
    #[arg(long, default_value_t = 2.0)]
    length_mm: f64,
}

fn parse_vec3(s: &str) -> Result<Vector3<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [x, y, z] => Ok(Vector3::new(*x, *y, *z)),
        _ => Err(format!("expected x,y,z, got {} values", v.len())),
    }
}

fn load_scenario(args: &StageArgs) -> anyhow::Result<Scenario> {
    let mut s = match &args.scenario {
        Some(path) => Scenario::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => Scenario::paper_repro(),
    };
    if let Some(seed) = args.seed {
        s.seed = seed;
    }
    Ok(s)
}

fn fmt_list(v: &[f64], digits: usize) -> String {
    v.iter()
        .map(|x| format!("{x:.digits$}"))
        .collect::<Vec<_>>()
        .join(" -> ")
}

fn report_kinematic(k: &harness::KinematicSummary) {
    println!(
        "kinematic: {:?} after {} iterations, RMS um {} (contraction {:.3})",
        k.verdict,
        k.iterations,
        fmt_list(&k.rms_um, 1),
        k.contraction
    );
}

fn report_identify(s: &harness::IdentifySummary) {
    for j in &s.joints {
        println!(
            "identify: joint {} FIR length {}, DC gain {:.3}{}",
            j.joint,
            j.crop_length,
            j.dc_gain,
            if j.settled { "" } else { " (not settled)" }
        );
    }
}

fn report_dynamic(d: &harness::DynamicSummary) {
    for j in &d.joints {
        println!(
            "dynamic: joint {} {:?}, max error {} {} (condition {:.3})",
            j.joint,
            j.verdict,
            fmt_list(&j.max_error_display, 3),
            j.display_unit,
            j.convergence_condition
        );
    }
    println!(
        "dynamic: tooltip path error max {:.1} -> {:.1} um",
        d.tooltip.path_max_um[0], d.tooltip.path_max_um[1]
    );
    for w in &d.warnings {
        eprintln!("warning: {w}");
    }
}

fn maybe_plot(args: &StageArgs) -> anyhow::Result<()> {
    if args.plots {
        for p in plot::render_plots(&args.out)? {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn status(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(NOT_CONVERGED)
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Kinematic(args) => {
            let s = load_scenario(&args)?;
            let k = harness::run_kinematic_stage(&s, &args.out, args.format.into())?;
            report_kinematic(&k);
            maybe_plot(&args)?;
            Ok(status(k.converged()))
        }
        Command::Identify(args) => {
            let s = load_scenario(&args)?;
            let i = harness::run_identify_stage(&s, &args.out, args.format.into())?;
            report_identify(&i);
            Ok(ExitCode::SUCCESS)
        }
        Command::Dynamic(args) => {
            let s = load_scenario(&args)?;
            let d = harness::run_dynamic_stage(&s, &args.out, args.format.into())?;
            report_dynamic(&d);
            maybe_plot(&args)?;
            Ok(status(d.succeeded()))
        }
        Command::Pipeline(args) => {
            let s = load_scenario(&args)?;
            let p = harness::run_pipeline(&s, &args.out, args.format.into())?;
            report_kinematic(&p.kinematic);
            report_identify(&p.identify);
            report_dynamic(&p.dynamic);
            maybe_plot(&args)?;
            Ok(status(p.success))
        }
        Command::Plot { out } => {
            for p in plot::render_plots(&out)? {
                println!("wrote {}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Segment(args) => segment(&args),
        Command::Cloud(args) => cloud(&args),
        Command::Scenario => {
            println!("{}", Scenario::paper_repro().to_json()?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn segment(args: &SegmentArgs) -> anyhow::Result<ExitCode> {
    let file = File::open(&args.cloud).with_context(|| format!("opening {}", args.cloud.display()))?;
    let points = read_cloud_csv(BufReader::new(file))?;
    let config = SegmentationConfig {
        mad_factor: args.mad_factor,
        axis_hint: args.axis_hint,
        ..Default::default()
    };
    let est = extract_tooltip(&points, &config)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&est)?);
    } else {
        println!(
            "tip [m]: {:.7} {:.7} {:.7}\naxis: {:.5} {:.5} {:.5}\nradius [um]: {:.1}\ninliers: {}/{}",
            est.tip.x,
            est.tip.y,
            est.tip.z,
            est.axis.x,
            est.axis.y,
            est.axis.z,
            est.radius * 1e6,
            est.inliers,
            points.len()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cloud(args: &CloudArgs) -> anyhow::Result<ExitCode> {
    if args.axis.norm() == 0.0 {
        bail!("axis must be non-zero");
    }
    let spec = CloudSpec {
        tip: args.tip,
        axis: args.axis,
        radius: args.radius_um * 1e-6,
        length: args.length_mm * 1e-3,
        n_points: args.points,
        outlier_fraction: args.outliers,
        noise_sigma: args.noise_um * 1e-6,
    };
    let cloud = generate_tool_cloud(&spec, args.seed)?;
    write_points(&args.output, &cloud.points)?;
    println!(
        "wrote {} points ({} outliers) to {}",
        cloud.points.len(),
        cloud.outlier_count(),
        args.output.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn write_points(path: &Path, points: &[Vector3<f64>]) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_cloud_csv(BufWriter::new(file), points)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors share the generic error code; 2 means "ran but missed targets"
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
