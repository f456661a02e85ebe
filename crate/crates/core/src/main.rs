use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use icc_core::cache::CacheMode;
use icc_core::calibration::CalibMethod;
use icc_core::harness::io::{
    calib_to_tensors, save_tensors, weights_to_tensors, DType, Tensor, TensorSet,
};
use icc_core::harness::macs::{estimate_macs, tera, ArchSpec};
use icc_core::harness::verify::run_checks;
use icc_core::harness::{configure_threads, Engine, ExperimentConfig, Report};
use icc_core::model::init_weights;
use icc_core::sampler::SamplerKind;
use icc_core::{Error, Result};

#[derive(Parser)]
#[command(name = "icc", version, about = "Increment-calibrated caching for diffusion transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialise toy-model weights and write them to a container.
    InitModel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = DTypeArg::F64)]
        dtype: DTypeArg,
    },
    /// Compute low-rank factors for every block linear layer.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = DTypeArg::F64)]
        dtype: DTypeArg,
    },
    /// Run the configured sampler and compare against the uncached oracle.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        outputs: Outputs,
        /// Write initial and per-step latents of every seed here.
        #[arg(long)]
        latents: Option<PathBuf>,
    },
    /// Sweep the `[bench]` grid.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        outputs: Outputs,
    },
    /// Analytic MAC estimate (DiT-XL/2 preset or a custom architecture).
    Estimate(EstimateArgs),
    /// Fast self-checks.
    Verify,
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    NoCache,
    Naive,
    Calibrated,
}

impl From<ModeArg> for CacheMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::NoCache => CacheMode::NoCache,
            ModeArg::Naive => CacheMode::Naive,
            ModeArg::Calibrated => CacheMode::Calibrated,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Ddpm,
    Ddim,
}

/// Config file plus flag overrides; flags win.
#[derive(Args, Default)]
struct Common {
    /// TOML config, or a JSON report whose embedded config is reused.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    period: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, value_parser = parse_method)]
    method: Option<CalibMethod>,
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    /// Number of sampling steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Diffusion timesteps `T`.
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long)]
    class_label: Option<usize>,
    #[arg(long)]
    calib_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    weights_seed: Option<u64>,
    #[arg(long)]
    calib_seed: Option<u64>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    calib: Option<PathBuf>,
}

#[derive(Args)]
struct Outputs {
    /// JSON report path (stdout if neither this nor --csv is given).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Start from the DiT-XL/2 preset; other flags override it.
    #[arg(long)]
    dit_xl_2: bool,
    #[arg(long)]
    depth: Option<u64>,
    #[arg(long)]
    hidden: Option<u64>,
    #[arg(long)]
    heads: Option<u64>,
    #[arg(long)]
    tokens: Option<u64>,
    #[arg(long)]
    mlp_ratio: Option<u64>,
    #[arg(long)]
    overhead: Option<u64>,
    #[arg(long)]
    no_guidance: bool,
    #[arg(long)]
    steps: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::NoCache)]
    mode: ModeArg,
    #[arg(long, default_value_t = 1)]
    period: u64,
    #[arg(long, default_value_t = 0)]
    rank: u64,
}

fn parse_method(s: &str) -> std::result::Result<CalibMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if path.extension().is_some_and(|e| e == "json") {
        Ok(Report::from_json(&std::fs::read_to_string(path)?)?.config)
    } else {
        ExperimentConfig::from_file(path)
    }
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => load_config(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v.into();
                }
            };
        }
        set!(self.depth => c.model.depth);
        set!(self.hidden => c.model.hidden);
        set!(self.heads => c.model.heads);
        set!(self.tokens => c.model.tokens);
        set!(self.mode => c.mode);
        set!(self.period => c.period);
        set!(self.steps => c.sampler.steps);
        set!(self.timesteps => c.schedule.steps);
        set!(self.class_label => c.class_label);
        set!(self.calib_size => c.calib_size);
        set!(self.seed => c.seeds.sample);
        set!(self.seeds => c.seeds.count);
        set!(self.weights_seed => c.seeds.weights);
        set!(self.calib_seed => c.seeds.calib);
        if let Some(k) = self.sampler {
            c.sampler.kind = match k {
                SamplerArg::Ddpm => SamplerKind::Ddpm,
                SamplerArg::Ddim => SamplerKind::Ddim,
            };
        }
        if self.rank.is_some() {
            c.rank = self.rank;
        }
        if self.method.is_some() {
            c.method = self.method;
        }
        if self.guidance_scale.is_some() {
            c.sampler.guidance_scale = self.guidance_scale;
        }
        if self.weights.is_some() {
            c.weights_path = self.weights.clone();
        }
        if self.calib.is_some() {
            c.calib_path = self.calib.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn emit(report: &Report, outputs: &Outputs) -> Result<()> {
    if let Some(p) = &outputs.report {
        report.write_json(p)?;
    }
    if let Some(p) = &outputs.csv {
        report.write_csv(std::fs::File::create(p)?)?;
    }
    if outputs.report.is_none() && outputs.csv.is_none() {
        println!("{}", report.to_json());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitModel { common, out, dtype } => {
            let c = common.resolve()?;
            let w = init_weights(&c.model, c.seeds.weights)?;
            save_tensors(&out, &weights_to_tensors(&w, dtype.into()))?;
            eprintln!("wrote {}", out.display());
        }
        Command::Calibrate { common, out, dtype } => {
            let c = common.resolve()?;
            let method = c.method.unwrap_or(CalibMethod::Svd);
            let rank = c.rank.ok_or_else(|| Error::Config("calibrate needs --rank".into()))?;
            let engine = Engine::new(c)?;
            let calib = engine.calibrate(method, rank)?;
            save_tensors(&out, &calib_to_tensors(&calib, dtype.into()))?;
            eprintln!("wrote {}", out.display());
        }
        Command::Sample {
            common,
            outputs,
            latents,
        } => {
            let engine = Engine::new(common.resolve()?)?;
            let (report, trajectories) = engine.sample()?;
            if let Some(path) = latents {
                let mut set = TensorSet::new();
                for (seed, traj) in report.runs[0].seeds.iter().zip(&trajectories) {
                    for (i, z) in traj.latents.iter().enumerate() {
                        set.push(Tensor::from_matrix(format!("seed{seed}.step{i}"), DType::F64, z))?;
                    }
                }
                save_tensors(path, &set)?;
            }
            emit(&report, &outputs)?;
        }
        Command::Bench { common, outputs } => {
            let engine = Engine::new(common.resolve()?)?;
            emit(&engine.bench()?, &outputs)?;
        }
        Command::Estimate(a) => {
            let mut arch = if a.dit_xl_2 {
                ArchSpec::dit_xl_2()
            } else {
                let mut s = ArchSpec::dit_xl_2();
                s.overhead_macs_per_forward = 0;
                s
            };
            arch.depth = a.depth.unwrap_or(arch.depth);
            arch.hidden = a.hidden.unwrap_or(arch.hidden);
            arch.heads = a.heads.unwrap_or(arch.heads);
            arch.tokens = a.tokens.unwrap_or(arch.tokens);
            arch.mlp_ratio = a.mlp_ratio.unwrap_or(arch.mlp_ratio);
            arch.overhead_macs_per_forward = a.overhead.unwrap_or(arch.overhead_macs_per_forward);
            arch.cfg_enabled = !a.no_guidance;
            if a.period == 0 || a.steps == 0 {
                return Err(Error::Config("steps and period must be ≥ 1".into()));
            }
            let mode: CacheMode = a.mode.into();
            let e = estimate_macs(&arch, a.steps, mode, a.period, a.rank);
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "arch": arch,
                    "steps": a.steps,
                    "mode": mode,
                    "period": a.period,
                    "rank": a.rank,
                    "macs": e,
                    "tmacs": tera(e.total),
                }))
                .expect("serialisable")
            );
        }
        Command::Verify => {
            let checks = run_checks();
            let mut failed = 0;
            for c in &checks {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(Error::Mismatch(format!("{failed} of {} checks failed", checks.len())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            let code = match e {
                Error::Config(_) | Error::InvalidConfig(_) | Error::InvalidSchedule(_) => 2,
                Error::Io(_) | Error::Format { .. } => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
