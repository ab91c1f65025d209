use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use twostage::baselines::{run_baseline, BaselineMethod, BaselineResult, ScreenScale};
use twostage::design::{optimize, DesignInputs, Stage2Proportion, Stage2Signal};
use twostage::error::{Error, Result};
use twostage::estimation::{demean, estimate_em, estimate_mc, EstimationResult, PriorConfig};
use twostage::experiments::{
    data_study_inputs, run_data_sweep, run_sim1, run_sim2, simulation_inputs, MethodStudy, StudyConfig, StudyId,
    ONE_STAGE_BH, PROPOSED, TWO_STAGE_BH,
};
use twostage::io::config::{
    apply_design, apply_params, apply_prior, apply_study, design_to_config, prior_to_config, study_to_config,
    KeyValues, DESIGN_KEYS, PRIOR_KEYS, STUDY_KEYS,
};
use twostage::io::data::{ingest_zscores, write_zscores, IngestReport, ZScoreDataset};
use twostage::io::report::{write_csv, write_json, FrontierRow, Metadata, MetricRow};
use twostage::io::svg::{line_chart, Series};
use twostage::mixture::{simulate_screen, MixtureParams, StageModel};
use twostage::seed::Seed;

#[derive(Parser, Debug)]
#[command(
    name = "twostage",
    version,
    about = "Budget-optimal two-stage screening designs under local FDR control"
)]
struct Cli {
    /// Master seed; every output is a pure function of it.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Smaller grids and Monte Carlo sizes.
    #[arg(long, global = true)]
    quick: bool,
    /// Step of the |A1| grid.
    #[arg(long, global = true)]
    stride: Option<usize>,
    /// Non-null proportion in the stage-II Lfdr.
    #[arg(long = "stage2-p", global = true, value_enum)]
    stage2_p: Option<Stage2PArg>,
    /// How carried compounds are re-measured in simulation.
    #[arg(long = "stage2-signal", global = true, value_enum)]
    stage2_signal: Option<SignalArg>,
    /// Parameter estimator for `estimate`.
    #[arg(long, global = true, value_enum, default_value = "mc")]
    method: MethodArg,
    /// Scale of the two-stage BH screen.
    #[arg(long = "screen-scale", global = true, value_enum)]
    screen_scale: Option<ScaleArg>,
    /// Experiment repetitions per grid point (studies) or runs (`baseline`).
    #[arg(long, global = true)]
    reps: Option<usize>,
    /// Monte Carlo replicates per design candidate.
    #[arg(long = "mc-reps", global = true)]
    mc_reps: Option<usize>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Also write SVG charts.
    #[arg(long, global = true)]
    svg: bool,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate (p, sigma0_sq, sigma_mu_sq) from a z-score table.
    Estimate {
        /// Delimited file with a header row.
        input: PathBuf,
        /// Column holding the z-scores.
        #[arg(long, default_value = "B")]
        column: String,
    },
    /// Search for the design with the most expected confirmed hits.
    Optimize {
        /// Parameter file written by `estimate` (JSON) or a `key = value` file.
        #[arg(long)]
        params: PathBuf,
    },
    /// Method comparison over non-null proportions.
    Sim1,
    /// Method comparison over FDR levels.
    Sim2,
    /// Optimal designs over stage-II costs for the data-study setting.
    Sweep,
    /// Run one of the BH comparators.
    Baseline {
        #[arg(value_enum)]
        which: BaselineArg,
    },
    /// Write a simulated single-replicate z-score table.
    Simulate {
        #[arg(long, default_value_t = 51_840)]
        m: usize,
        #[arg(long, default_value_t = 0.0132)]
        p: f64,
        #[arg(long = "sigma0-sq", default_value_t = 0.5677)]
        sigma0_sq: f64,
        #[arg(long = "sigma-mu-sq", default_value_t = 3.0735)]
        sigma_mu_sq: f64,
        #[arg(long = "mean-shift", default_value_t = 0.0)]
        mean_shift: f64,
        #[arg(long, default_value = "B")]
        column: String,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Stage2PArg {
    Realized,
    Inherit,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SignalArg {
    Carried,
    Fresh,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    Mc,
    Em,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ScaleArg {
    Theoretical,
    Empirical,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BaselineArg {
    OneStageBh,
    TwoStageBh,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) | Error::Config { .. } => 1,
        Error::InfeasibleBudget(_) => 3,
        _ => 2,
    }
}

fn as_data(err: Error) -> Error {
    match err {
        Error::InvalidArgument(m) => Error::Data(m),
        other => other,
    }
}

fn main() -> ExitCode {
    run(std::env::args_os())
}

fn run(args: impl IntoIterator<Item = OsString>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_env("RUST_LOG")
        .init();
    if let Some(n) = cli.threads {
        if n == 0 || rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("error: cannot start {n} worker threads");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn read_config(cli: &Cli, known: &[&[&str]]) -> Result<KeyValues> {
    let Some(path) = &cli.config else {
        return Ok(KeyValues::new());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    let kv = KeyValues::parse(&text)?;
    kv.check_known(known)?;
    Ok(kv)
}

fn apply_flags(cli: &Cli, inputs: &mut DesignInputs) {
    if let Some(s) = cli.stride {
        inputs.a1_stride = s;
    }
    if let Some(n) = cli.mc_reps {
        inputs.mc_reps = n;
    }
    if let Some(p) = cli.stage2_p {
        inputs.stage2_proportion = match p {
            Stage2PArg::Realized => Stage2Proportion::Realized,
            Stage2PArg::Inherit => Stage2Proportion::Inherit,
        };
    }
    if let Some(s) = cli.stage2_signal {
        inputs.stage2_signal = match s {
            SignalArg::Carried => Stage2Signal::Carried,
            SignalArg::Fresh => Stage2Signal::Fresh,
        };
    }
}

fn screen_scale(cli: &Cli, default: ScreenScale) -> ScreenScale {
    match cli.screen_scale {
        Some(ScaleArg::Theoretical) => ScreenScale::Theoretical,
        Some(ScaleArg::Empirical) => ScreenScale::Empirical,
        None => default,
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    fs::create_dir_all(&cli.out)?;
    Ok(&cli.out)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let seed = Seed::new(cli.seed);
    match &cli.command {
        Command::Estimate { input, column } => estimate(cli, seed, input, column),
        Command::Optimize { params } => optimize_cmd(cli, seed, params),
        Command::Sim1 => study(cli, seed, StudyId::Sim1),
        Command::Sim2 => study(cli, seed, StudyId::Sim2),
        Command::Sweep => study(cli, seed, StudyId::DataSweep),
        Command::Baseline { which } => baseline(cli, seed, *which),
        Command::Simulate {
            m,
            p,
            sigma0_sq,
            sigma_mu_sq,
            mean_shift,
            column,
        } => {
            let params = MixtureParams::new(*p, *sigma0_sq, *sigma_mu_sq)?.with_mean_shift(*mean_shift);
            let screen = simulate_screen(&StageModel::new(params, 1)?, *m, seed)?;
            let dataset = ZScoreDataset {
                compound_ids: (1..=*m).map(|i| format!("C{i:06}")).collect(),
                column: column.clone(),
                // The simulators work on centred values; the shift is applied on output.
                values: screen.values().iter().map(|v| v + mean_shift).collect(),
            };
            let path = out_dir(cli)?.join("zscores.csv");
            write_zscores(&path, &dataset)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct EstimateOutput<'a> {
    p: f64,
    sigma0_sq: f64,
    sigma_mu_sq: f64,
    mean_shift: f64,
    method: &'static str,
    column: &'a str,
    n: usize,
    fit: &'a EstimationResult,
    ingest: &'a IngestReport,
}

fn estimate(cli: &Cli, seed: Seed, input: &Path, column: &str) -> Result<()> {
    let kv = read_config(cli, &[PRIOR_KEYS])?;
    let mut prior = PriorConfig::default();
    apply_prior(&mut prior, &kv)?;
    if cli.quick {
        prior.importance_samples = prior.importance_samples.min(2000);
    }
    prior.validate()?;
    let (dataset, report) = ingest_zscores(input, column).map_err(as_data)?;
    let (centered, shift) = demean(&dataset.values).map_err(as_data)?;
    let (fit, method) = match cli.method {
        MethodArg::Mc => (estimate_mc(&centered, &prior, seed).map_err(as_data)?, "importance-sampling"),
        MethodArg::Em => (estimate_em(&centered, 1e-10, 10_000).map_err(as_data)?, "em"),
    };
    if fit.degenerate {
        log::warn!("the fitted signal component is degenerate");
    }
    let mut params = prior_to_config(&prior);
    params.insert("input", input.display());
    params.insert("column", column);
    params.insert("method", method);
    let meta = Metadata::new("estimate", seed, params);
    let out = EstimateOutput {
        p: fit.params.p,
        sigma0_sq: fit.params.sigma0_sq,
        sigma_mu_sq: fit.params.sigma_mu_sq,
        mean_shift: shift,
        method,
        column,
        n: dataset.len(),
        fit: &fit,
        ingest: &report,
    };
    let path = out_dir(cli)?.join("estimate.json");
    write_json(&path, &meta, &out)?;
    println!(
        "p = {:.6}  sigma0_sq = {:.6}  sigma_mu_sq = {:.6}  mean_shift = {:.6}",
        out.p, out.sigma0_sq, out.sigma_mu_sq, out.mean_shift
    );
    println!("wrote {}", path.display());
    Ok(())
}

/// Reads model parameters from `estimate` JSON output, a bare JSON object,
/// or a `key = value` file.
fn read_params(path: &Path) -> Result<MixtureParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut params = data_study_inputs().stage1_params;
    if text.trim_start().starts_with('{') {
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let obj = v.get("result").unwrap_or(&v);
        let field = |k: &str| {
            obj.get(k)
                .and_then(serde_json::Value::as_f64)
                .ok_or_else(|| Error::Data(format!("{}: missing numeric field {k:?}", path.display())))
        };
        params.p = field("p")?;
        params.sigma0_sq = field("sigma0_sq")?;
        params.sigma_mu_sq = field("sigma_mu_sq")?;
        params.mean_shift = field("mean_shift").unwrap_or(0.0);
    } else {
        let kv = KeyValues::parse(&text)?;
        for key in ["p", "sigma0_sq", "sigma_mu_sq"] {
            if kv.get(key).is_none() {
                return Err(Error::Data(format!("{}: missing key {key:?}", path.display())));
            }
        }
        apply_params(&mut params, &kv)?;
    }
    params.validate().map_err(as_data)?;
    Ok(params)
}

#[derive(Serialize)]
struct BestOutput<'a> {
    best: &'a twostage::design::CandidateEvaluation,
    spend: twostage::design::Money,
    candidates: usize,
}

fn optimize_cmd(cli: &Cli, seed: Seed, params_path: &Path) -> Result<()> {
    let kv = read_config(cli, &[DESIGN_KEYS])?;
    let mut inputs = data_study_inputs();
    if cli.quick {
        inputs.mc_reps = 25;
        inputs.a1_stride = 400;
    }
    apply_design(&mut inputs, &kv)?;
    inputs.stage1_params = read_params(params_path)?;
    apply_flags(cli, &mut inputs);
    let optimum = optimize(&inputs, seed)?;
    let meta = Metadata::new("optimize", seed, design_to_config(&inputs));
    let dir = out_dir(cli)?;
    let rows: Vec<FrontierRow> = optimum.frontier.iter().map(|e| FrontierRow::new(None, e)).collect();
    write_csv(&dir.join("frontier.csv"), &meta, &rows)?;
    let best = BestOutput {
        best: &optimum.best,
        spend: optimum.best.candidate.spend(&inputs),
        candidates: optimum.frontier.len(),
    };
    write_json(&dir.join("best.json"), &meta, &best)?;
    let c = optimum.best.candidate;
    println!(
        "r1 = {}  |A1| = {}  r2 = {}  E|A2| = {:.2} (se {:.2})  E|A2.theta| = {:.2}",
        c.r1, c.a1_size, c.r2, optimum.best.expected_hits, optimum.best.mc_se.hits, optimum.best.expected_true_positives
    );
    Ok(())
}

fn study(cli: &Cli, seed: Seed, id: StudyId) -> Result<()> {
    let kv = read_config(cli, &[DESIGN_KEYS, STUDY_KEYS])?;
    let mut config = StudyConfig::preset(id, cli.quick, seed);
    apply_study(&mut config, &kv)?;
    apply_flags(cli, &mut config.base_inputs);
    if let Some(n) = cli.reps {
        config.repetitions = n;
    }
    config.screen_scale = screen_scale(cli, config.screen_scale);
    let meta = Metadata::new(&id.to_string(), seed, study_to_config(&config));
    let dir = out_dir(cli)?;
    let stem = match id {
        StudyId::Sim1 => "sim1",
        StudyId::Sim2 => "sim2",
        StudyId::DataSweep => "sweep",
    };
    match id {
        StudyId::Sim1 | StudyId::Sim2 => {
            let result = if id == StudyId::Sim1 { run_sim1(&config)? } else { run_sim2(&config)? };
            let rows: Vec<MetricRow> = result.records.iter().map(MetricRow::from).collect();
            write_csv(&dir.join(format!("{stem}.csv")), &meta, &rows)?;
            let designs: Vec<FrontierRow> = result
                .designs
                .iter()
                .map(|(g, e)| FrontierRow::new(Some(*g), e))
                .collect();
            write_csv(&dir.join(format!("{stem}_designs.csv")), &meta, &designs)?;
            write_json(&dir.join(format!("{stem}.json")), &meta, &result)?;
            if cli.svg {
                write_charts(dir, stem, id.grid_variable(), &result)?;
            }
            print_records(&result);
        }
        StudyId::DataSweep => {
            let sweep = run_data_sweep(&config)?;
            let best: Vec<FrontierRow> = sweep
                .iter()
                .map(|s| FrontierRow::new(Some(s.cost_c2.as_major()), &s.optimum.best))
                .collect();
            let frontier: Vec<FrontierRow> = sweep
                .iter()
                .flat_map(|s| {
                    s.optimum
                        .frontier
                        .iter()
                        .map(|e| FrontierRow::new(Some(s.cost_c2.as_major()), e))
                })
                .collect();
            write_csv(&dir.join("sweep_best.csv"), &meta, &best)?;
            write_csv(&dir.join("sweep_frontier.csv"), &meta, &frontier)?;
            let summary: Vec<_> = sweep.iter().map(|s| (s.cost_c2, &s.optimum.best)).collect();
            write_json(&dir.join("sweep.json"), &meta, &summary)?;
            if cli.svg {
                let series = vec![Series {
                    name: "E|A2|".into(),
                    points: best.iter().map(|r| (r.grid_point.unwrap_or(0.0), Some(r.expected_hits))).collect(),
                }];
                fs::write(
                    dir.join("sweep_hits.svg"),
                    line_chart("Expected confirmed hits at the optimum", "cost_c2", "E|A2|", &series),
                )?;
            }
            println!("{:>8} {:>4} {:>7} {:>4} {:>10} {:>12}", "c2", "r1", "|A1|", "r2", "E|A2|", "E|A2.theta|");
            for r in &best {
                println!(
                    "{:>8} {:>4} {:>7} {:>4} {:>10.2} {:>12.2}",
                    r.grid_point.unwrap_or(0.0),
                    r.r1,
                    r.a1_size,
                    r.r2,
                    r.expected_hits,
                    r.expected_true_positives
                );
            }
        }
    }
    Ok(())
}

fn write_charts(dir: &Path, stem: &str, x_label: &str, result: &MethodStudy) -> Result<()> {
    let series = |f: &dyn Fn(&twostage::experiments::MetricRecord) -> Option<f64>| {
        [PROPOSED, TWO_STAGE_BH, ONE_STAGE_BH]
            .iter()
            .map(|m| Series {
                name: m.to_string(),
                points: result
                    .records
                    .iter()
                    .filter(|r| r.method == *m)
                    .map(|r| (r.grid_point, f(r)))
                    .collect(),
            })
            .collect::<Vec<_>>()
    };
    fs::write(
        dir.join(format!("{stem}_fdr.svg")),
        line_chart("Realized FDR", x_label, "mean realized FDR", &series(&|r| Some(r.mean_realized_fdr))),
    )?;
    fs::write(
        dir.join(format!("{stem}_ln_etp.svg")),
        line_chart("ln ETP", x_label, "ln(ETP)", &series(&|r| r.ln_etp)),
    )?;
    Ok(())
}

fn print_records(result: &MethodStudy) {
    println!("{:>10} {:>14} {:>10} {:>10} {:>10}", "grid", "method", "FDR", "ETP", "ln ETP");
    for r in &result.records {
        let ln = r.ln_etp.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:>10} {:>14} {:>10.4} {:>10.2} {:>10}",
            r.grid_point, r.method, r.mean_realized_fdr, r.etp, ln
        );
    }
}

#[derive(Serialize)]
struct BaselineRow {
    repetition: usize,
    method: String,
    realized_fdp: f64,
    true_positives: usize,
    rejections: usize,
    spend: String,
    r1: u32,
    r2: u32,
    carried: usize,
}

fn baseline(cli: &Cli, seed: Seed, which: BaselineArg) -> Result<()> {
    let kv = read_config(cli, &[DESIGN_KEYS, &["screen_scale", "repetitions"]])?;
    let mut inputs = simulation_inputs();
    apply_design(&mut inputs, &kv)?;
    apply_flags(cli, &mut inputs);
    let mut scale = ScreenScale::default();
    if let Some(s) = kv.parsed("screen_scale")? {
        scale = s;
    }
    let scale = screen_scale(cli, scale);
    let reps = cli.reps.or(kv.parsed("repetitions")?).unwrap_or(1);
    if reps == 0 {
        return Err(Error::InvalidArgument("--reps must be at least 1".into()));
    }
    let method = match which {
        BaselineArg::OneStageBh => BaselineMethod::OneStageBh,
        BaselineArg::TwoStageBh => BaselineMethod::TwoStageBh,
    };
    let results: Vec<BaselineResult> = (0..reps as u64)
        .map(|rep| run_baseline(method, &inputs, scale, seed.substream(&[rep])))
        .collect::<Result<_>>()?;
    let mut params = design_to_config(&inputs);
    params.insert("baseline", method);
    params.insert("screen_scale", scale);
    params.insert("repetitions", reps);
    let meta = Metadata::new("baseline", seed, params);
    let dir = out_dir(cli)?;
    let rows: Vec<BaselineRow> = results
        .iter()
        .enumerate()
        .map(|(i, r)| BaselineRow {
            repetition: i,
            method: r.method.to_string(),
            realized_fdp: r.realized_fdp,
            true_positives: r.true_positives,
            rejections: r.rejection.len(),
            spend: r.spend.to_string(),
            r1: r.r1,
            r2: r.r2,
            carried: r.carried,
        })
        .collect();
    write_csv(&dir.join("baseline.csv"), &meta, &rows)?;
    write_json(&dir.join("baseline.json"), &meta, &results)?;
    let n = results.len() as f64;
    println!(
        "{method}: mean FDP {:.4}, mean true positives {:.2} over {reps} run(s)",
        results.iter().map(|r| r.realized_fdp).sum::<f64>() / n,
        results.iter().map(|r| r.true_positives as f64).sum::<f64>() / n
    );
    Ok(())
}
