use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rcnas::cellgraph::DiscreteArch;
use rcnas::config::RunConfig;
use rcnas::costmodel::{cost_report_csv, exact_cost};
use rcnas::oracle::{pareto_csv, score_space, MicroSpace, ScoreCache};
use rcnas::search::{retrain_eval, run_search_observed, Checkpoint, RoundSummary, SearchObserver, TrainState};
use rcnas::{Error, Result};
use serde::{Deserialize, Serialize};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Search,
    Cost,
    Enumerate,
    Eval,
    ExportDot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub split: u64,
    pub search: u64,
    pub retrain: u64,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub command: Command,
    pub seeds: Seeds,
    pub config: RunConfig,
    /// The input architecture, embedded so reruns do not depend on the file.
    pub arch: Option<serde_json::Value>,
}

impl Manifest {
    pub fn new(command: Command, config: RunConfig, arch: Option<&DiscreteArch>) -> Self {
        let seeds = Seeds {
            data: config.data.seed,
            split: config.data.split.seed,
            search: config.search.seed,
            retrain: config.retrain.seed,
        };
        let arch = arch.map(|a| serde_json::from_str(&a.to_json()).expect("arch JSON parses"));
        Self { version: VERSION.into(), command, seeds, config, arch }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        m.config.validate()?;
        if m.version != VERSION {
            warn!("manifest written by version {}, running {VERSION}", m.version);
        }
        Ok(m)
    }

    pub fn input_arch(&self) -> Result<Option<DiscreteArch>> {
        self.arch
            .as_ref()
            .map(|v| DiscreteArch::from_json(&v.to_string()))
            .transpose()
    }
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p)?),
        None => Ok(RunConfig::default()),
    }
}

pub fn load_arch(path: &Path) -> Result<DiscreteArch> {
    DiscreteArch::from_json(&fs::read_to_string(path)?)
}

/// Exit status: 0 success, 2 configuration, 3 numeric abort, 4 I/O.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) | Error::GradCheck { .. } => 3,
        Error::Io(_) | Error::Format { .. } => 4,
        _ => 2,
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    fs::write(&p, contents)?;
    Ok(p)
}

/// Runs a manifest's command into `out`, writing the manifest first.
pub fn execute(m: &Manifest, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let text = serde_json::to_string_pretty(m).expect("manifest serializes") + "\n";
    write(out, "manifest.json", &text)?;
    let arch = m.input_arch()?;
    let need_arch = || arch.clone().ok_or_else(|| Error::Config("this command needs --arch".into()));
    match m.command {
        Command::Search => search(&m.config, out),
        Command::Cost => cost(&m.config, &need_arch()?, out),
        Command::Enumerate => enumerate(&m.config, out),
        Command::Eval => eval(&m.config, &need_arch()?, out),
        Command::ExportDot => {
            let a = need_arch()?;
            a.validate()?;
            write(out, "arch.dot", &a.to_dot())?;
            Ok(())
        }
    }
}

struct CheckpointWriter<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
}

impl SearchObserver for CheckpointWriter<'_> {
    fn on_round(&mut self, state: &TrainState, _: &RoundSummary) -> Result<()> {
        let ck = Checkpoint::capture(&self.cfg.search_spec(), state);
        write(self.out, "checkpoint.json", &ck.to_json())?;
        Ok(())
    }
}

fn search(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train, val) = cfg.data.load_split()?;
    let spec = cfg.search_spec();
    let mut observer = CheckpointWriter { cfg, out };
    let res = run_search_observed(&spec, &train, &val, None, &mut observer)?;
    let r = &res.report;
    write(out, "arch.json", &res.arch.to_json())?;
    write(out, "search_log.csv", &r.log_csv())?;
    let mut trace = String::from(
        "round,iteration,h,phi_params,phi_flops,low_violation_params,low_violation_flops,high_violation_params,high_violation_flops\n",
    );
    for round in &r.rounds {
        for s in &round.trace {
            let _ = writeln!(
                trace,
                "{},{},{},{},{},{},{},{},{}",
                round.round,
                s.iteration,
                s.h,
                s.phi[0],
                s.phi[1],
                s.lower_violation[0],
                s.lower_violation[1],
                s.upper_violation[0],
                s.upper_violation[1]
            );
        }
    }
    write(out, "projection_trace.csv", &trace)?;
    write(out, "cost.csv", &cost_report_csv(Some(r.final_phi), Some(r.exact_cost), &cfg.constraints))?;
    write(out, "report.json", &(serde_json::to_string_pretty(r)? + "\n"))?;
    println!("arch {} written to {}", res.arch.hash(), out.join("arch.json").display());
    println!(
        "expected cost {:?}, exact cost {:?}, {} rounds, {:.1}s",
        r.final_phi,
        r.exact_cost,
        r.rounds.len(),
        r.wall_clock_secs
    );
    if r.feasible {
        println!("feasible: true");
    } else {
        println!("feasible: false");
        eprintln!("WARNING: the final projection did not reach the constraint box");
    }
    Ok(())
}

fn cost(cfg: &RunConfig, arch: &DiscreteArch, out: &Path) -> Result<()> {
    let c = exact_cost(arch, &cfg.plan)?;
    write(out, "cost.csv", &cost_report_csv(None, Some(c), &cfg.constraints))?;
    println!("{},{}", c[0], c[1]);
    Ok(())
}

fn threads() -> usize {
    std::env::var("RCNAS_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn enumerate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let space = MicroSpace { plan: cfg.plan.clone(), ceiling: cfg.oracle.ceiling };
    let data = if cfg.oracle.score { Some(cfg.data.load_split()?) } else { None };
    let cache = match cfg.oracle.score {
        true => Some(ScoreCache::new(&out.join("score_cache"), &cfg.plan, &cfg.retrain)?),
        false => None,
    };
    let n = threads();
    info!("enumerating {} architectures on {n} worker(s)", space.count()?);
    let scored = score_space(
        &space,
        data.as_ref().map(|(t, v)| (t, v, &cfg.retrain)),
        cache.as_ref(),
        n,
    )?;
    let archs = out.join("archs");
    fs::create_dir_all(&archs)?;
    for s in &scored {
        write(&archs, &format!("{}.json", s.arch.hash()), &s.arch.to_json())?;
    }
    write(out, "pareto.csv", &pareto_csv(&scored))?;
    println!("{} architectures written to {}", scored.len(), out.join("pareto.csv").display());
    Ok(())
}

fn eval(cfg: &RunConfig, arch: &DiscreteArch, out: &Path) -> Result<()> {
    let (train, val) = cfg.data.load_split()?;
    let m = retrain_eval(arch, &cfg.plan, &train, &val, &cfg.retrain)?;
    let csv = format!(
        "arch_hash,val_accuracy,final_train_loss,params,flops\n{},{},{},{},{}\n",
        arch.hash(),
        m.val_accuracy,
        m.final_train_loss,
        m.params,
        m.flops
    );
    write(out, "metrics.csv", &csv)?;
    print!("{csv}");
    Ok(())
}
