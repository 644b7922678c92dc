//! Subcommand implementations. Each returns the process exit code:
//! 0 ok, 1 parse, 2 constraint, 3 calibration, 4 runtime.

use std::fs;
use std::path::{Path, PathBuf};

use ubimap_core::coverage::objective;
use ubimap_core::netsim::capture_dump;
use ubimap_core::world::{parse_scenario, Scenario};

use crate::pipeline::{self, PipelineError};
use crate::render::{render_heatmap, render_map};
use crate::report::{calibration_errors_csv, metrics_csv, to_csv};

pub const EXIT_OK: u8 = 0;
pub const EXIT_PARSE: u8 = 1;
pub const EXIT_CONSTRAINT: u8 = 2;
pub const EXIT_CALIBRATION: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Options {
    pub seed: Option<u64>,
    pub exact: bool,
    pub strict: bool,
    pub duration: f64,
    pub out: PathBuf,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            seed: None,
            exact: false,
            strict: false,
            duration: 10.0,
            out: PathBuf::from("out"),
        }
    }
}

/// Failure carrying its exit code and a message for stderr.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        message: e.to_string(),
    }
}

pub fn load(path: &Path, opts: &Options) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let mut scenario = parse_scenario(&text).map_err(|e| Failure {
        code: EXIT_PARSE,
        message: format!("{}:{}: {e}", path.display(), e.line()),
    })?;
    if let Some(seed) = opts.seed {
        scenario.sim.seed = seed;
    }
    Ok(scenario)
}

fn write(out: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let path = out.join(name);
    fs::write(&path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn cmd_plan(path: &Path, opts: &Options) -> Result<u8, Failure> {
    let scenario = load(path, opts)?;
    let (problem, plan) = pipeline::plan(&scenario, opts.exact)?;
    let selected: Vec<Vec<String>> = problem
        .candidates
        .iter()
        .filter(|c| plan.selected.contains(&c.id))
        .map(|c| {
            vec![
                c.id.to_string(),
                c.x.to_string(),
                c.y.to_string(),
                c.height.to_string(),
                c.yaw.to_string(),
                c.hfov.to_string(),
                c.vfov.to_string(),
                c.max_range.to_string(),
            ]
        })
        .collect();
    write(
        &opts.out,
        "plan.csv",
        to_csv(&["camera_id", "x", "y", "h", "yaw_rad", "hfov_rad", "vfov_rad", "range"], &selected),
    )?;
    write(
        &opts.out,
        "plan_summary.csv",
        metrics_csv(&[
            ("method", if opts.exact { "exhaustive" } else { "greedy" }.to_string()),
            ("candidates", problem.candidates.len().to_string()),
            ("selected", plan.selected.len().to_string()),
            ("target_cells", problem.target_cells.len().to_string()),
            ("objective", objective(&plan, &problem).to_string()),
            ("coverage_ratio", plan.coverage_ratio.to_string()),
            ("violations", plan.violations.len().to_string()),
        ]),
    )?;
    let w = &problem.world;
    let walls: Vec<bool> = (0..w.len()).map(|i| w.is_wall(w.cell_at(i))).collect();
    let mult: Vec<u32> = (0..w.len()).map(|i| plan.multiplicity(w.cell_at(i))).collect();
    write(&opts.out, "coverage.ppm", render_heatmap(w.width, w.height, &walls, &mult))?;
    if opts.strict && !plan.violations.is_empty() {
        return Err(Failure {
            code: EXIT_CONSTRAINT,
            message: format!("{} cells violate the overlap constraints", plan.violations.len()),
        });
    }
    Ok(EXIT_OK)
}

pub fn cmd_calibrate(path: &Path, opts: &Options) -> Result<u8, Failure> {
    let scenario = load(path, opts)?;
    let cal = pipeline::calibrate(&scenario.cameras, &scenario.world, scenario.sim.noise_sigma, scenario.sim.seed)?;
    write(&opts.out, "calibration.csv", calibration_errors_csv(&cal.errors))?;
    let failures: Vec<String> = cal.graph.failures.iter().map(|(i, j, e)| format!("{i}-{j}: {e}")).collect();
    write(
        &opts.out,
        "calibration_summary.csv",
        metrics_csv(&[
            ("reference", cal.graph.reference.to_string()),
            ("cameras", cal.graph.nodes.len().to_string()),
            ("edges", cal.graph.edges.len().to_string()),
            ("failed_pairs", failures.join(";")),
            ("cost_before", cal.cost_before().to_string()),
            ("cost_after", cal.cost_after().to_string()),
            ("iterations", cal.iterations.to_string()),
        ]),
    )?;
    Ok(EXIT_OK)
}

pub fn cmd_simulate(path: &Path, opts: &Options) -> Result<u8, Failure> {
    let scenario = load(path, opts)?;
    let outcome = pipeline::simulate(&scenario, opts.duration)?;
    let r = &outcome.report;
    write(&opts.out, "summary.csv", r.summary_csv())?;
    write(&opts.out, "localization.csv", r.localization_csv())?;
    write(&opts.out, "calibration.csv", r.calibration_csv())?;
    write(&opts.out, "map.ppm", render_map(&outcome.server_map))?;
    write(&opts.out, "capture.hex", capture_dump(&outcome.capture))?;
    let blind: Vec<Vec<String>> = outcome
        .blind_events
        .iter()
        .map(|e| {
            vec![
                e.cell.col.to_string(),
                e.cell.row.to_string(),
                e.t.to_string(),
                e.upload_from.map_or_else(|| "camera".to_string(), |id| format!("robot {id}")),
            ]
        })
        .collect();
    write(&opts.out, "blind_spots.csv", to_csv(&["col", "row", "t_s", "source"], &blind))?;
    Ok(EXIT_OK)
}

pub fn cmd_render(path: &Path, opts: &Options) -> Result<u8, Failure> {
    let scenario = load(path, opts)?;
    write(&opts.out, "map.ppm", render_map(&pipeline::snapshot(&scenario)))?;
    write(&opts.out, "truth.ppm", render_map(&pipeline::truth_map(&scenario.world)))?;
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Plan,
    Calibrate,
    Simulate,
    Render,
}

/// Runs a subcommand, reporting failures on stderr.
pub fn run(cmd: Command, path: &Path, opts: &Options) -> u8 {
    let result = match cmd {
        Command::Plan => cmd_plan(path, opts),
        Command::Calibrate => cmd_calibrate(path, opts),
        Command::Simulate => cmd_simulate(path, opts),
        Command::Render => cmd_render(path, opts),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("ubimap: {}", f.message);
            f.code
        }
    }
}
