//! `blk` command-line front end. [`run`] is the whole program; `main` only
//! forwards the process arguments and exit code.

use std::ffi::OsString;
use std::fmt::{Display, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use blk_core::analysis::{excess_map, find_features, SphereSpec};
use blk_core::image::Image3D;
use blk_core::io::{
    load_fit_problem, load_img3, load_lmpt, store_img3, store_lmpt, store_musr_data, write_fit_config, FitConfig,
    ListModeFile,
};
use blk_core::musr::{
    generate_synthetic, minimize, precession_problem, precession_theory, Evaluator, HistogramGeometry, MinimizerConfig,
    Objective, PhysicsConstants, PrecessionTruth,
};
use blk_core::pet::{
    default_initial_image, reconstruct, simulate_listmode, Budget, Phantom, ReconConfig, ScannerGeometry,
    SensitivityMode,
};
use blk_core::Backend;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "blk", version, about = "μSR fitting, list-mode PET reconstruction and excess analysis")]
struct Cli {
    /// Worker threads; results do not depend on it
    #[arg(long, global = true, env = "BLK_THREADS", default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,

    /// Seed for every random draw
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a μSR theory to histogram data
    Fit(FitArgs),
    /// Write synthetic precession histograms and a matching fit config
    SimulateMusr(SimulateMusrArgs),
    /// Simulate a list-mode acquisition
    SimulatePet(SimulatePetArgs),
    /// MLEM reconstruction of a list-mode file
    Recon(ReconArgs),
    /// Excess and significance maps of an image
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Fit config file
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Chi2)]
    objective: ObjectiveArg,
    /// Report file; printed to stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ObjectiveArg {
    Chi2,
    Mlh,
}

#[derive(Args, Debug)]
struct SimulateMusrArgs {
    /// Output directory for fit.cfg and data.musr
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    detectors: usize,
    #[arg(long, default_value_t = 50_000)]
    bins: usize,
    /// Bin width in μs
    #[arg(long, default_value_t = 0.000_195_312_5)]
    dt: f64,
}

#[derive(Args, Debug)]
struct ScannerArgs {
    /// 91 rings of 180 detectors at 2.2 mm
    #[arg(long)]
    paper_preset: bool,
    #[arg(long, default_value_t = 91)]
    rings: u32,
    #[arg(long, default_value_t = 180)]
    detectors: u32,
    /// Detector pitch in mm
    #[arg(long, default_value_t = 2.2)]
    pitch: f64,
}

impl ScannerArgs {
    fn geometry(&self) -> ScannerGeometry {
        if self.paper_preset {
            ScannerGeometry::paper_scanner()
        } else {
            ScannerGeometry::new(self.rings, self.detectors, self.pitch)
        }
    }
}

#[derive(Args, Debug)]
struct SimulatePetArgs {
    /// Output list-mode file
    #[arg(long)]
    out: PathBuf,
    /// Detected coincidences to simulate
    #[arg(long, default_value_t = 100_000)]
    events_count: u64,
    /// Point source at x,y,z mm instead of the hot-rod phantom
    #[arg(long, value_parser = parse_triplet::<f64>, allow_hyphen_values = true)]
    point: Option<[f64; 3]>,
    #[command(flatten)]
    scanner: ScannerArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Switch {
    On,
    Off,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SensitivityArg {
    Uniform,
    Events,
    Full,
}

#[derive(Args, Debug)]
struct ReconArgs {
    /// List-mode input file
    #[arg(long)]
    events: PathBuf,
    /// Output image
    #[arg(long)]
    out: PathBuf,
    /// Iterations [default: 15]
    #[arg(long)]
    iters: Option<usize>,
    /// Event halving [default: off, on with --paper-preset]
    #[arg(long, value_enum)]
    halving: Option<Switch>,
    #[arg(long, value_enum, default_value_t = SensitivityArg::Uniform)]
    sensitivity: SensitivityArg,
    /// 90x90x50 voxels of 0.7 mm, 15 iterations, halving on
    #[arg(long)]
    paper_preset: bool,
    /// Image size in voxels
    #[arg(long, value_parser = parse_triplet::<usize>, default_value = "90,90,50")]
    dims: [usize; 3],
    /// Voxel edge in mm
    #[arg(long, default_value_t = 0.7)]
    voxel: f64,
    /// Matrix distance factor in mm [default: voxel edge]
    #[arg(long)]
    matrix_distance: Option<f64>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Input image
    #[arg(long)]
    image: PathBuf,
    /// Inner sphere diameter, mm
    #[arg(long, default_value_t = 2.0)]
    inner: f64,
    /// Outer sphere diameter, mm
    #[arg(long, default_value_t = 4.0)]
    outer: f64,
    /// Feature threshold in units of ΔE
    #[arg(long, default_value_t = 3.0)]
    sigma: f64,
    /// Output prefix: writes .E.img3, .dE.img3, .mask.img3, .features.txt
    #[arg(long)]
    out: PathBuf,
    /// Acquisition time; rate images are turned into counts with it
    #[arg(long, default_value_t = 1.0)]
    duration: f64,
}

fn parse_triplet<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got `{s}`"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.trim().parse::<T>().map_err(|_| format!("cannot parse `{p}`"))?);
    }
    out.try_into().map_err(|_| unreachable!())
}

enum Failure {
    Usage(String),
    Data(String),
}

fn data<E: Display>(e: E) -> Failure {
    Failure::Data(e.to_string())
}

/// Runs the program on `argv` (including the program name) and returns the
/// exit status: 0 on success, 1 on usage errors, 2 on data or domain errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let backend = Backend::with_workers(cli.threads as usize).map_err(data)?;
    match &cli.command {
        Command::Fit(a) => fit(a, &backend),
        Command::SimulateMusr(a) => simulate_musr(a, cli.seed),
        Command::SimulatePet(a) => simulate_pet(a, cli.seed),
        Command::Recon(a) => recon(a, &backend),
        Command::Analyze(a) => analyze(a, &backend),
    }
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Data(format!("{}: no such file", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn fit(a: &FitArgs, backend: &Backend) -> Result<(), Failure> {
    require_file(&a.input)?;
    let problem = load_fit_problem(&a.input).map_err(data)?;
    let objective = match a.objective {
        ObjectiveArg::Chi2 => Objective::Chi2,
        ObjectiveArg::Mlh => Objective::Mlh,
    };
    let result = minimize(objective, &problem, &MinimizerConfig::default(), backend).map_err(data)?;
    let bins = Evaluator::new(&problem, backend).map_err(data)?.bins();
    let ndf = bins.saturating_sub(problem.parameters.free_indices().len());
    let mut s = String::new();
    let name = match objective {
        Objective::Chi2 => "chi2",
        Objective::Mlh => "mlh",
    };
    let _ = writeln!(s, "objective {name}");
    let _ = writeln!(s, "value {:?}", result.objective_value);
    let _ = writeln!(s, "ndf {ndf}");
    let _ = writeln!(s, "value_per_ndf {:?}", result.objective_value / ndf.max(1) as f64);
    let _ = writeln!(s, "converged {}", result.converged);
    let _ = writeln!(s, "iterations {}", result.iterations);
    let _ = writeln!(s, "evaluations {}", result.objective_evaluations);
    s.push_str("PARAMETERS\n");
    for p in result.best_parameters.iter() {
        let _ = writeln!(s, "{} {:?}{}", p.name, p.value, if p.fixed { " fixed" } else { "" });
    }
    match &a.out {
        Some(path) => write_text(path, &s),
        None => {
            print!("{s}");
            Ok(())
        }
    }
}

fn simulate_musr(a: &SimulateMusrArgs, seed: u64) -> Result<(), Failure> {
    if a.detectors == 0 || a.bins == 0 {
        return Err(Failure::Usage("--detectors and --bins must be positive".into()));
    }
    let constants = PhysicsConstants::default();
    let geometry = HistogramGeometry::evenly_spaced(a.detectors, a.bins, a.dt);
    let truth = PrecessionTruth::default();
    let problem = precession_problem(&geometry, &truth, &constants).map_err(data)?;
    let datasets =
        generate_synthetic(&problem.datasets, &problem.theory, &problem.parameters.values(), &constants, seed)
            .map_err(data)?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::Data(format!("{}: {e}", a.out.display())))?;
    store_musr_data(&a.out.join("data.musr"), &datasets).map_err(data)?;
    // start the fit away from the truth
    let mut parameters: Vec<_> = problem.parameters.iter().cloned().collect();
    for (p, v) in parameters.iter_mut().zip([0.2, 0.25, 5.0, 0.0502]) {
        p.value = v;
    }
    let cfg = FitConfig {
        theory: precession_theory(&constants),
        parameters,
        datasets: vec![PathBuf::from("data.musr")],
        range: None,
    };
    let mut buf = Vec::new();
    write_fit_config(&mut buf, &cfg).map_err(data)?;
    fs::write(a.out.join("fit.cfg"), buf).map_err(data)
}

fn simulate_pet(a: &SimulatePetArgs, seed: u64) -> Result<(), Failure> {
    // the file keeps geometry at f32 precision; simulate with exactly that
    let geometry = ListModeFile::new(&a.scanner.geometry(), Vec::new()).geometry();
    geometry.validate().map_err(data)?;
    let phantom = match a.point {
        Some(p) => Phantom::point(p, 1.0),
        None => Phantom::derenzo(1.0),
    };
    let events = simulate_listmode(&phantom, &geometry, Budget::Detected(a.events_count), seed).map_err(data)?;
    store_lmpt(&a.out, &ListModeFile::new(&geometry, events)).map_err(data)
}

fn recon(a: &ReconArgs, backend: &Backend) -> Result<(), Failure> {
    require_file(&a.events)?;
    let file = load_lmpt(&a.events).map_err(data)?;
    let geometry = file.geometry();
    let (dims, voxel) = if a.paper_preset { ([90, 90, 50], 0.7) } else { (a.dims, a.voxel) };
    let grid = Image3D::centered(dims, [voxel; 3], 0.0).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut config = ReconConfig::for_grid(&grid);
    config.iterations = a.iters.unwrap_or(15);
    config.event_halving = match a.halving {
        Some(s) => s == Switch::On,
        None => a.paper_preset,
    };
    config.sensitivity = match a.sensitivity {
        SensitivityArg::Uniform => SensitivityMode::Uniform,
        SensitivityArg::Events => SensitivityMode::FromEventLors,
        SensitivityArg::Full => SensitivityMode::FullEnumeration,
    };
    if let Some(m) = a.matrix_distance {
        config.matrix_distance = m;
    }
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let initial = default_initial_image(&geometry, &grid);
    let result = reconstruct(&file.events, &geometry, &initial, &config, backend).map_err(data)?;
    store_img3(&a.out, &result.image).map_err(data)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn analyze(a: &AnalyzeArgs, backend: &Backend) -> Result<(), Failure> {
    let spec = SphereSpec::new(a.inner, a.outer).map_err(|e| Failure::Usage(e.to_string()))?;
    if !(a.duration > 0.0 && a.duration.is_finite()) {
        return Err(Failure::Usage(format!("--duration {} must be positive", a.duration)));
    }
    require_file(&a.image)?;
    let mut image = load_img3(&a.image).map_err(data)?;
    if a.duration != 1.0 {
        for v in &mut image.data {
            *v *= a.duration;
        }
    }
    let map = excess_map(&image, &spec, backend);
    store_img3(&with_suffix(&a.out, ".E.img3"), &map.e).map_err(data)?;
    store_img3(&with_suffix(&a.out, ".dE.img3"), &map.de).map_err(data)?;
    store_img3(&with_suffix(&a.out, ".mask.img3"), &map.mask()).map_err(data)?;
    let mut s = String::new();
    for f in find_features(&map, a.sigma) {
        let [x, y, z] = f.voxel;
        let _ = writeln!(s, "{x} {y} {z} {:?} {:?}", f.e, f.significance);
    }
    write_text(&with_suffix(&a.out, ".features.txt"), &s)
}
