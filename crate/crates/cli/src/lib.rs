//! Command-line front end: `train`, `analyze` and `compare`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use drlora::analysis::{
    covariance_gap, export_rank_evolution, flops_model, gini, masking_experiment, rank_matrix_csv,
    replay_rank_evolution, MaskRule, MaskingSpec,
};
use drlora::config::{ExperimentConfig, Preset, SweepCell, Verbosity};
use drlora::trainer::{Method, RunLog, TrainConfig, Trainer};
use drlora::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const OUT_ENV: &str = "DRLORA_OUT";
pub const RUNLOG_FILE: &str = "runlog.ndjson";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RANKEVO_DIR: &str = "rank_evolution";

const MASK_BUDGETS: [f64; 3] = [0.05, 0.10, 0.20];

#[derive(Debug, Parser)]
#[command(name = "drlora", version, about = "Dynamic rank allocation for MoE LoRA adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every cell of an experiment sweep.
    Train(TrainArgs),
    /// Run a diagnostic over finished runs.
    Analyze(AnalyzeArgs),
    /// Tabulate runs that differ only in method, γ or seed.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output root; the experiment is written to `<out>/<name>`.
    #[arg(long, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub gamma: Option<Vec<f64>>,
    /// Methods to run: dr-lora, fixed-lora, random, proportional, global-greedy.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub strategy: Option<Vec<Method>>,
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    /// Parallel sweep cells (0 = all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Analysis {
    Gini,
    Masking,
    Covgap,
    Flops,
    Rankevo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FlopsPreset {
    /// OLMoE scale: 16 layers, top-8 routing, d_model 2048, d_expert 1024.
    Table12,
    /// The desk-scale toy model.
    Toy,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(value_enum)]
    pub analysis: Analysis,
    /// A run directory or an experiment directory of runs.
    pub run_dir: Option<PathBuf>,
    /// Where reports go (default: next to each run log).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table12")]
    pub preset: FlopsPreset,
    /// Evaluation samples for masking.
    #[arg(long, default_value_t = 2048)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Run or experiment directories.
    #[arg(required = true, num_args = 1..)]
    pub dirs: Vec<PathBuf>,
    /// Also write the table as TSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Maps library errors to exit codes.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Input(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        offset: 0,
        message: format!("{}: {e}", path.display()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> drlora::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn read(path: &Path) -> drlora::Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Parses `args` (including the program name), runs the command, prints to
/// stdout/stderr and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a).map(|out| println!("{out}")),
        Command::Analyze(a) => cmd_analyze(&a).map(|out| print!("{out}")),
        Command::Compare(a) => cmd_compare(&a).map(|out| print!("{out}")),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Outcome of one sweep cell.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub id: String,
    pub dir: PathBuf,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    pub gini: f64,
    pub budget_ok: bool,
}

/// Whether the final ranks meet the budget: per layer for layer-local
/// allocators, over the network for the pooled one, and everywhere
/// `r_target` for the fixed baseline.
pub fn budget_ok(config: &TrainConfig, ranks: &[Vec<usize>]) -> bool {
    let target = config.model.experts * config.ranks.r_target;
    match config.method {
        Method::GlobalGreedy => ranks.iter().flatten().sum::<usize>() == target * ranks.len(),
        _ => ranks.iter().all(|l| l.iter().sum::<usize>() == target),
    }
}

fn summary_text(cell: &SweepCell, log: &RunLog) -> drlora::Result<String> {
    let f = log
        .final_record()
        .ok_or_else(|| Error::State("run log has no final record".into()))?;
    let mut s = String::new();
    let c = &cell.config;
    let _ = writeln!(s, "run            {}", cell.id);
    let _ = writeln!(s, "method         {}", c.method);
    let _ = writeln!(s, "seed           {}", c.seed);
    let _ = writeln!(s, "gamma          {}", c.saliency.gamma);
    let _ = writeln!(s, "ranks          init {} target {} max {}", c.ranks.r_init, c.ranks.r_target, c.ranks.r_max);
    let _ = writeln!(s, "steps          {}", f.step);
    let _ = writeln!(s, "growth events  {}", log.events().len());
    let _ = writeln!(s, "eval loss      {:.6}", f.eval_loss);
    let _ = writeln!(s, "eval R2        {:.6}", f.eval_accuracy);
    let _ = writeln!(s, "rank gini      {:.4}", f.gini);
    let _ = writeln!(s, "budget check   {}", if budget_ok(c, f.ranks) { "pass" } else { "FAIL" });
    let _ = writeln!(s, "final ranks");
    s.push_str(&rank_matrix_csv(f.ranks));
    Ok(s)
}

fn run_cell(name: &str, cell: &SweepCell, root: &Path) -> drlora::Result<CellOutcome> {
    let dir = root.join(&cell.id);
    let mut trainer = Trainer::new(cell.config.clone())?;
    trainer.run()?;
    let log = trainer.log();
    write(&dir.join(RUNLOG_FILE), log.to_ndjson()?)?;
    trainer.save_checkpoint(dir.join(CHECKPOINT_FILE))?;
    let manifest = json!({
        "experiment": name,
        "run": cell.id,
        "method": cell.config.method,
        "seed": cell.config.seed,
        "gamma": cell.config.saliency.gamma,
        "r_init": cell.config.ranks.r_init,
        "files": [RUNLOG_FILE, CHECKPOINT_FILE, SUMMARY_FILE],
        "config": cell.config,
    });
    let manifest = serde_json::to_string_pretty(&manifest).map_err(|e| Error::State(e.to_string()))?;
    write(&dir.join(MANIFEST_FILE), manifest + "\n")?;
    write(&dir.join(SUMMARY_FILE), summary_text(cell, log)?)?;
    let f = log.final_record().expect("finished run has a final record");
    Ok(CellOutcome {
        id: cell.id.clone(),
        eval_loss: f.eval_loss,
        eval_accuracy: f.eval_accuracy,
        gini: f.gini,
        budget_ok: budget_ok(&cell.config, f.ranks),
        dir,
    })
}

/// Loads the config, applies flag overrides, trains every cell and writes
/// the experiment directory. Returns the summary table.
pub fn cmd_train(args: &TrainArgs) -> drlora::Result<String> {
    let text = read(&args.config)?;
    let mut config = ExperimentConfig::from_toml_with_preset(&text, args.preset)?;
    if let Some(seeds) = &args.seeds {
        config.sweep.seeds = Some(seeds.clone());
    }
    if let Some(gammas) = &args.gamma {
        config.sweep.gammas = Some(gammas.clone());
    }
    if let Some(methods) = &args.strategy {
        config.sweep.methods = Some(methods.clone());
    }
    if let Some(w) = args.workers {
        config.workers = w;
    }
    config.validate()?;
    let root = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&config.output_dir))
        .join(&config.name);
    write(&root.join("experiment.toml"), config.to_toml()?)?;

    let cells = config.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::State(format!("cannot start worker pool: {e}")))?;
    let quiet = config.verbosity == Verbosity::Quiet;
    let outcomes: Vec<drlora::Result<CellOutcome>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let out = run_cell(&config.name, cell, &root);
                if !quiet {
                    match &out {
                        Ok(o) => eprintln!("{}: eval loss {:.6}, gini {:.4}", o.id, o.eval_loss, o.gini),
                        Err(e) => eprintln!("{}: {e}", cell.id),
                    }
                }
                out
            })
            .collect()
    });
    let outcomes: Vec<CellOutcome> = outcomes.into_iter().collect::<drlora::Result<_>>()?;

    let mut table = String::from("run\teval_loss\teval_r2\tgini\tbudget\n");
    for o in &outcomes {
        let _ = writeln!(
            table,
            "{}\t{:.6}\t{:.6}\t{:.4}\t{}",
            o.id,
            o.eval_loss,
            o.eval_accuracy,
            o.gini,
            if o.budget_ok { "pass" } else { "FAIL" }
        );
    }
    write(&root.join("summary.tsv"), &table)?;
    if let Some(bad) = outcomes.iter().find(|o| !o.budget_ok) {
        return Err(Error::Budget(format!("{}: final ranks miss the budget", bad.id)));
    }
    Ok(table)
}

/// Run directories under `dir`: itself if it holds a run log, otherwise its
/// immediate subdirectories that do, sorted by name.
pub fn discover_runs(dir: &Path) -> drlora::Result<Vec<PathBuf>> {
    if dir.join(RUNLOG_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut runs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(RUNLOG_FILE).is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(Error::Input(format!("no run logs under {}", dir.display())));
    }
    Ok(runs)
}

pub fn load_log(run: &Path) -> drlora::Result<RunLog> {
    RunLog::from_ndjson(&read(&run.join(RUNLOG_FILE))?)
}

fn run_name(run: &Path) -> String {
    run.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| run.display().to_string())
}

fn report_dir(args: &AnalyzeArgs, run: &Path) -> PathBuf {
    match &args.out {
        Some(out) => out.join(run_name(run)),
        None => run.to_path_buf(),
    }
}

fn final_ranks(log: &RunLog) -> drlora::Result<Vec<Vec<usize>>> {
    Ok(log
        .final_record()
        .ok_or_else(|| Error::Input("run log has no final record".into()))?
        .ranks
        .to_vec())
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> drlora::Result<String> {
    if args.analysis == Analysis::Flops {
        return analyze_flops(args);
    }
    let dir = args
        .run_dir
        .as_ref()
        .ok_or_else(|| Error::Input("this analysis needs a run directory".into()))?;
    let mut out = String::new();
    for run in discover_runs(dir)? {
        let log = load_log(&run)?;
        let name = run_name(&run);
        let reports = report_dir(args, &run);
        match args.analysis {
            Analysis::Gini => {
                let ranks = final_ranks(&log)?;
                let flat: Vec<f64> = ranks.iter().flatten().map(|&r| r as f64).collect();
                let g = gini(&flat)?;
                write(&reports.join("gini.tsv"), format!("run\tgini\n{name}\t{g}\n"))?;
                let _ = writeln!(out, "{name}\tgini {g:.2}");
            }
            Analysis::Masking => {
                let trainer = Trainer::load_checkpoint(run.join(CHECKPOINT_FILE))?;
                let ranks = final_ranks(&log)?;
                let mut tsv = String::from("rule\tbudget\tmasked_experts\tmasked_rank\tbase_loss\tmasked_loss\tdegradation\n");
                for budget in MASK_BUDGETS {
                    for rule in [MaskRule::TopQuantile, MaskRule::BottomGroup, MaskRule::Random] {
                        let mut spec = MaskingSpec::new(rule, budget);
                        spec.seed = trainer.config().seed;
                        let r = masking_experiment(trainer.network(), &ranks, &spec, trainer.eval_generator(), args.samples)?;
                        let rule_name = serde_json::to_value(rule).expect("enum").as_str().unwrap_or_default().to_owned();
                        let experts: usize = r.masked.iter().map(Vec::len).sum();
                        let rank: usize = r.masked_rank.iter().sum();
                        let _ = writeln!(
                            tsv,
                            "{rule_name}\t{budget}\t{experts}\t{rank}\t{}\t{}\t{}",
                            r.base_loss, r.masked_loss, r.degradation
                        );
                        let _ = writeln!(out, "{name}\t{rule_name}\t{:.0}%\tdegradation {:.6}", budget * 100.0, r.degradation);
                    }
                }
                write(&reports.join("masking.tsv"), tsv)?;
            }
            Analysis::Covgap => {
                let f = log
                    .final_record()
                    .ok_or_else(|| Error::Input("run log has no final record".into()))?;
                let mut tsv = String::from("layer\texpert\tE[zq]\tE[z]\tE[q|z>0]\tcov\trelative_gap\n");
                let mut gaps = Vec::new();
                for (l, layer) in covariance_gap(f.covariance).iter().enumerate() {
                    for (i, r) in layer.iter().enumerate() {
                        match r {
                            Some(r) => {
                                gaps.push(r.relative_gap);
                                let _ = writeln!(
                                    tsv,
                                    "{l}\t{i}\t{}\t{}\t{}\t{}\t{}",
                                    r.e_zq, r.e_z, r.e_q_active, r.covariance, r.relative_gap
                                );
                            }
                            None => {
                                let _ = writeln!(tsv, "{l}\t{i}\tundefined\tundefined\tundefined\tundefined\tundefined");
                            }
                        }
                    }
                }
                write(&reports.join("covgap.tsv"), tsv)?;
                gaps.sort_by(f64::total_cmp);
                let median = gaps.get(gaps.len() / 2).copied().unwrap_or(f64::NAN);
                let _ = writeln!(out, "{name}\tmedian relative gap {median:.4} over {} experts", gaps.len());
            }
            Analysis::Rankevo => {
                let recorded = export_rank_evolution(&log)?;
                if replay_rank_evolution(&log)? != recorded {
                    return Err(Error::State(format!("{name}: replayed ranks differ from the recorded ones")));
                }
                let evo = reports.join(RANKEVO_DIR);
                for snap in recorded.iter().skip(1) {
                    write(&evo.join(format!("step_{:06}.csv", snap.step)), rank_matrix_csv(&snap.ranks))?;
                }
                let _ = writeln!(out, "{name}\t{} rank matrices", recorded.len() - 1);
            }
            Analysis::Flops => unreachable!("handled above"),
        }
    }
    Ok(out)
}

fn analyze_flops(args: &AnalyzeArgs) -> drlora::Result<String> {
    let (tokens, layers, k, dm, de, r_lora, r_max) = match args.preset {
        FlopsPreset::Table12 => (4096, 16, 8, 2048, 1024, 32, 32),
        FlopsPreset::Toy => {
            let c = TrainConfig::default();
            (
                c.batch_size as u64,
                c.model.layers as u64,
                c.model.top_k as u64,
                c.model.d_model as u64,
                c.model.d_expert as u64,
                c.ranks.r_target as u64,
                c.ranks.r_max as u64,
            )
        }
    };
    let rows = [
        ("No LoRA".to_owned(), flops_model(tokens, layers, k, dm, de, 0)),
        (format!("LoRA (r={r_lora})"), flops_model(tokens, layers, k, dm, de, r_lora)),
        // Costed at r_max as an upper bound.
        ("DR-LoRA".to_owned(), flops_model(tokens, layers, k, dm, de, r_max)),
    ];
    let mut table = String::from("method\tbase_gflops\tlora_gflops\ttotal_gflops\trelative\n");
    for (name, r) in &rows {
        let _ = writeln!(
            table,
            "{name}\t{:.1}\t{:.1}\t{:.1}\t{:.3}",
            r.base_gflops, r.lora_gflops, r.total_gflops, r.ratio
        );
    }
    if let Some(out) = &args.out {
        write(&out.join("flops.tsv"), &table)?;
    }
    Ok(table)
}

/// Median of a non-empty list.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Configuration with the axes that `compare` allows to differ cleared.
fn comparable(c: &TrainConfig) -> TrainConfig {
    let mut c = c.clone();
    c.method = Method::DrLora;
    c.seed = 0;
    c.saliency.gamma = 0.0;
    c
}

fn first_difference(a: &TrainConfig, b: &TrainConfig) -> &'static str {
    if a.model != b.model {
        "model"
    } else if a.ranks != b.ranks {
        "ranks"
    } else if a.schedule != b.schedule {
        "schedule"
    } else if a.optimizer != b.optimizer {
        "optimizer"
    } else if a.task != b.task || a.task_seed != b.task_seed {
        "task"
    } else {
        "train"
    }
}

struct Group {
    method: Method,
    gamma: f64,
    losses: Vec<f64>,
    ginis: Vec<f64>,
    max_rank: usize,
    grants_per_event: Vec<f64>,
}

pub fn cmd_compare(args: &CompareArgs) -> drlora::Result<String> {
    let mut runs = Vec::new();
    for d in &args.dirs {
        runs.extend(discover_runs(d)?);
    }
    if runs.len() < 2 {
        return Err(Error::Input("compare needs at least two runs".into()));
    }
    let mut reference: Option<TrainConfig> = None;
    let mut groups: Vec<Group> = Vec::new();
    for run in &runs {
        let log = load_log(run)?;
        let header = log
            .header()
            .ok_or_else(|| Error::Input(format!("{}: run log has no header", run.display())))?;
        let config = header.config.clone();
        let key = comparable(&config);
        match &reference {
            None => reference = Some(key),
            Some(r) if *r != key => {
                return Err(Error::Input(format!(
                    "{}: configuration differs in `{}` beyond the method/gamma/seed axes",
                    run.display(),
                    first_difference(r, &key)
                )))
            }
            Some(_) => {}
        }
        let f = log
            .final_record()
            .ok_or_else(|| Error::Input(format!("{}: run log has no final record", run.display())))?;
        let gamma = config.saliency.gamma;
        let idx = match groups
            .iter()
            .position(|g| g.method == config.method && g.gamma.to_bits() == gamma.to_bits())
        {
            Some(i) => i,
            None => {
                groups.push(Group {
                    method: config.method,
                    gamma,
                    losses: Vec::new(),
                    ginis: Vec::new(),
                    max_rank: 0,
                    grants_per_event: Vec::new(),
                });
                groups.len() - 1
            }
        };
        let g = &mut groups[idx];
        g.losses.push(f.eval_loss);
        g.ginis.push(f.gini);
        g.max_rank = g.max_rank.max(f.ranks.iter().flatten().copied().max().unwrap_or(0));
        let events = log.events();
        if !events.is_empty() {
            let granted: usize = events.iter().flat_map(|e| e.decisions.iter()).map(|d| d.total()).sum();
            g.grants_per_event.push(granted as f64 / events.len() as f64);
        }
    }
    let base = median(&groups[0].losses);
    let mut table = String::from("method\tgamma\truns\tmedian_eval_loss\tdelta_vs_first\tmedian_gini\tmax_rank\tgrants_per_event\n");
    for g in &groups {
        let m = median(&g.losses);
        let grants = if g.grants_per_event.is_empty() {
            "-".to_owned()
        } else {
            format!("{:.1}", median(&g.grants_per_event))
        };
        let _ = writeln!(
            table,
            "{}\t{}\t{}\t{:.6}\t{:+.6}\t{:.4}\t{}\t{}",
            g.method,
            g.gamma,
            g.losses.len(),
            m,
            m - base,
            median(&g.ginis),
            g.max_rank,
            grants
        );
    }
    if let Some(out) = &args.out {
        write(&out.join("compare.tsv"), &table)?;
    }
    Ok(table)
}
