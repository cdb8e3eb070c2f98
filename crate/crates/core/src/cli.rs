//! Command-line front end.
//!
//! Every failure ends with one JSON line on stderr of the form
//! `{"error": "<kind>", "message": "..."}` and a nonzero exit code.

use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::augmentation::{synthetic_prompt, PromptEmbedding};
use crate::error::{Error, Result};
use crate::fixtures::{regen_fixtures, RegenMode};
use crate::gradcheck::{run_suite as run_gradcheck, GradcheckConfig, PASS_THRESHOLD};
use crate::linalg::Rng;
use crate::optimizer::rotation_demo::{rotation_win_fraction, run_suite, suite_csv, trajectories_csv};
use crate::optimizer::{
    build_inserts, mix_inserts, train_batch, train_promptwise, LrSchedule, Mode, RunMetrics, TrainConfig,
    TrainOutcome,
};
use crate::protocol::file::{read_embedding, read_insert_pair, write_atomic, write_embedding, write_insert_pair, write_params, Role};
use crate::protocol::remote::{timeout_from_env, Endpoint, RemoteOracle, DEFAULT_TRUNCATE_AT};
use crate::protocol::server::{serve_oracle, ServeOptions};
use crate::rewards::{cosine_oracle, net_oracle, quadratic_oracle, ConstantOracle, RewardOracle};

/// Hidden width of the `net` oracle unless the spec says otherwise.
pub const NET_DEFAULT_WIDTH: usize = 16;

/// Parsed `--oracle` value.
#[derive(Clone, Debug, PartialEq)]
pub enum OracleSpec {
    /// `quadratic[:seed]`, target is a seeded Gaussian column scaled by `1/√d`.
    Quadratic { seed: u64 },
    /// `cosine[:seed]`
    Cosine { seed: u64 },
    /// `net[:seed[:width]]`
    Net { seed: u64, width: usize },
    /// `constant[:reward]`
    Constant { reward: f64 },
    /// `remote:cmd:<program> [args]` or `remote:tcp:<host>:<port>`
    Remote(Endpoint),
}

impl FromStr for OracleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<OracleSpec> {
        if s.starts_with("remote:") {
            return Ok(OracleSpec::Remote(Endpoint::parse(s)?));
        }
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let bad = || Error::Config(format!("cannot parse oracle spec {s:?}"));
        let num = |i: usize, default: u64| -> Result<u64> {
            args.get(i).map_or(Ok(default), |a| a.parse().map_err(|_| bad()))
        };
        let max_args = match name {
            "quadratic" | "cosine" | "constant" => 1,
            "net" => 2,
            _ => {
                return Err(Error::Config(format!(
                    "unknown oracle {name:?}; expected quadratic, cosine, net, constant or remote:…"
                )))
            }
        };
        if args.len() > max_args {
            return Err(bad());
        }
        Ok(match name {
            "quadratic" => OracleSpec::Quadratic { seed: num(0, 0)? },
            "cosine" => OracleSpec::Cosine { seed: num(0, 0)? },
            "net" => OracleSpec::Net { seed: num(0, 0)?, width: num(1, NET_DEFAULT_WIDTH as u64)? as usize },
            _ => OracleSpec::Constant { reward: args.first().map_or(Ok(0.0), |a| a.parse().map_err(|_| bad()))? },
        })
    }
}

impl OracleSpec {
    pub fn is_remote(&self) -> bool {
        matches!(self, OracleSpec::Remote(_))
    }

    /// Instantiates the oracle for `d`-dimensional embeddings. Remote oracles
    /// connect and handshake here.
    pub fn build(&self, d: usize, timeout: Duration, truncate_at: i64) -> Result<Box<dyn RewardOracle>> {
        let column = |seed: u64| Rng::new(seed).gaussian_mat(d, 1).scale(1.0 / (d as f64).sqrt());
        Ok(match self {
            OracleSpec::Quadratic { seed } => Box::new(quadratic_oracle(column(*seed))?),
            OracleSpec::Cosine { seed } => Box::new(cosine_oracle(column(*seed))?),
            OracleSpec::Net { seed, width } => Box::new(net_oracle(d, *seed, *width)?),
            OracleSpec::Constant { reward } => Box::new(ConstantOracle { reward: *reward }),
            OracleSpec::Remote(ep) => {
                let mut remote = RemoteOracle::connect(ep.clone(), Some(d), timeout)?;
                remote.truncate_at = truncate_at;
                Box::new(remote)
            }
        })
    }
}

/// Seeded synthetic prompts used when no prompt files or texts are given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub d: usize,
    pub k: usize,
    pub count: usize,
    pub seed: u64,
}

/// Effective configuration of a training command: defaults, overlaid by the
/// config file, overlaid by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CliConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub oracle: String,
    /// Prompt embedding files. Take precedence over texts and synthesis.
    pub prompts: Vec<PathBuf>,
    /// Raw prompt texts, embedded by a remote oracle's `encode`.
    pub prompt_texts: Vec<String>,
    pub synthetic: SyntheticSpec,
    pub out: PathBuf,
    pub truncate_at: i64,
}

impl CliConfig {
    pub fn promptwise_default() -> Self {
        CliConfig {
            train: TrainConfig::promptwise_default(),
            oracle: "quadratic".into(),
            prompts: Vec::new(),
            prompt_texts: Vec::new(),
            synthetic: SyntheticSpec { d: 768, k: 8, count: 1, seed: 0 },
            out: PathBuf::from("runs/ipgo"),
            truncate_at: DEFAULT_TRUNCATE_AT,
        }
    }

    pub fn batch_default() -> Self {
        CliConfig {
            train: TrainConfig::batch_default(),
            synthetic: SyntheticSpec { d: 768, k: 8, count: 4, seed: 0 },
            truncate_at: 10,
            ..CliConfig::promptwise_default()
        }
    }

    /// Overlays the keys of a JSON config file onto `self`. Unknown keys are
    /// rejected; nested objects are merged one level deep.
    pub fn overlay_json(&mut self, text: &str) -> Result<()> {
        let file: Value = serde_json::from_str(text)?;
        let Value::Object(file) = file else {
            return Err(Error::Config("config file must hold a JSON object".into()));
        };
        let mut base = serde_json::to_value(&*self)?;
        let obj = base.as_object_mut().expect("config serializes to an object");
        for (key, value) in file {
            match obj.get_mut(&key) {
                None => return Err(Error::Config(format!("unknown config key {key:?}"))),
                Some(Value::Object(existing)) if key != "lr_schedule" => {
                    let Value::Object(incoming) = value else {
                        return Err(Error::Config(format!("config key {key:?} must be an object")));
                    };
                    for (k, v) in incoming {
                        if !existing.contains_key(&k) {
                            return Err(Error::Config(format!("unknown config key {key}.{k}")));
                        }
                        existing.insert(k, v);
                    }
                }
                Some(slot) => *slot = value,
            }
        }
        *self = serde_json::from_value(base).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        Ok(())
    }

    /// Checks everything that can be checked without touching the oracle.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let spec: OracleSpec = self.oracle.parse()?;
        if self.prompts.is_empty() {
            if !self.prompt_texts.is_empty() && !spec.is_remote() {
                return Err(Error::Config("prompt_texts need a remote oracle to encode them".into()));
            }
            if self.prompt_texts.is_empty() {
                let s = &self.synthetic;
                if s.count == 0 || s.k == 0 {
                    return Err(Error::Config("synthetic count and k must be >= 1".into()));
                }
                check_width(s.d, &self.train)?;
            }
        }
        Ok(())
    }
}

fn check_width(d: usize, train: &TrainConfig) -> Result<()> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::OddDimension(d));
    }
    let m = train.m_pre.max(train.m_suff);
    if m > d {
        return Err(Error::Config(format!("basis rank m = {m} exceeds embedding dimension d = {d}")));
    }
    Ok(())
}

#[derive(Parser)]
#[command(name = "ipgo", version, about = "Learn prefix and suffix embeddings around a frozen prompt")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Prompt-wise training on one prompt.
    Optimize(TrainArgs),
    /// Shared inserts trained over a prompt set.
    OptimizeBatch(TrainArgs),
    /// Convex combination λ·A + (1-λ)·B of two insert files.
    Mix(MixArgs),
    /// Compare every backward pass with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Rotation-assisted versus plain descent on 2-D quadratics.
    DemoRotation(DemoArgs),
    /// Write a seeded Gaussian prompt embedding file.
    GenSynthetic(SynthArgs),
    /// Serve an analytic oracle over the wire protocol on stdin/stdout or TCP.
    Serve(ServeArgs),
    /// Check or regenerate the fixture corpus.
    Fixtures(FixtureArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Ipgo,
    IpgoPlus,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScheduleArg {
    Step,
    Cosine,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// quadratic[:seed] | cosine[:seed] | net[:seed[:width]] | constant[:r] | remote:cmd:… | remote:tcp:host:port
    #[arg(long)]
    pub oracle: Option<String>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    /// Initial learning rate (step decay) or upper rate (cosine).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Lower rate of the cosine schedule.
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub lr_period: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub n_pre: Option<usize>,
    #[arg(long)]
    pub n_suff: Option<usize>,
    /// Sets both basis ranks.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub m_pre: Option<usize>,
    #[arg(long)]
    pub m_suff: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Prompt embedding file (repeatable).
    #[arg(long = "prompt")]
    pub prompts: Vec<PathBuf>,
    /// Prompt text for a remote oracle to encode (repeatable).
    #[arg(long = "prompt-text")]
    pub prompt_texts: Vec<String>,
    /// Synthetic prompt width.
    #[arg(long)]
    pub d: Option<usize>,
    /// Synthetic prompt length.
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of synthetic prompts.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub synthetic_seed: Option<u64>,
    /// Backprop truncation forwarded to remote oracles.
    #[arg(long)]
    pub truncate_at: Option<i64>,
}

#[derive(Args, Debug)]
pub struct MixArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    #[arg(long, default_value_t = 3)]
    pub m: usize,
    #[arg(long, default_value_t = 2)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub gamma: f64,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = crate::gradcheck::FD_STEP)]
    pub h: f64,
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub count: usize,
    /// Suite case whose trajectories are written.
    #[arg(long, default_value_t = 0)]
    pub case: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Analytic oracle spec (remote specs are not accepted here).
    #[arg(long, default_value = "quadratic")]
    pub oracle: String,
    #[arg(long)]
    pub d: usize,
    /// Listen on host:port instead of stdin/stdout; connections are served one at a time.
    #[arg(long)]
    pub listen: Option<String>,
    #[arg(long, hide = true)]
    pub fail_after: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FixtureAction {
    /// Regenerate in memory and compare hashes; writes nothing.
    Check,
    /// Rewrite fixture files; fails if a hash drifts.
    Regen,
    /// Rewrite fixture files and record their new hashes.
    Update,
}

#[derive(Args, Debug)]
pub struct FixtureArgs {
    #[arg(value_enum)]
    pub action: FixtureAction,
    #[arg(long, default_value = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/manifest.json"))]
    pub manifest: PathBuf,
}

/// Resolves the effective config of a training command.
pub fn resolve_config(args: &TrainArgs, batch: bool) -> Result<CliConfig> {
    let mut cfg = if batch { CliConfig::batch_default() } else { CliConfig::promptwise_default() };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg.overlay_json(&text)?;
    }
    let t = &mut cfg.train;
    if let Some(m) = args.mode {
        t.mode = match m {
            ModeArg::Ipgo => Mode::Ipgo,
            ModeArg::IpgoPlus => Mode::IpgoPlus,
        };
    }
    macro_rules! set {
        ($($src:ident => $dst:expr),* $(,)?) => { $(if let Some(v) = args.$src.clone() { $dst = v; })* };
    }
    set!(epochs => t.epochs, seed => t.seed, gamma => t.gamma, clip_norm => t.clip_norm,
         n_pre => t.n_pre, n_suff => t.n_suff, m => t.m_pre, m => t.m_suff, m_pre => t.m_pre,
         m_suff => t.m_suff, batch_size => t.batch_size);
    match args.schedule {
        Some(ScheduleArg::Step) if !matches!(t.lr_schedule, LrSchedule::StepDecay { .. }) => {
            t.lr_schedule = TrainConfig::promptwise_default().lr_schedule;
        }
        Some(ScheduleArg::Cosine) if !matches!(t.lr_schedule, LrSchedule::Cosine { .. }) => {
            t.lr_schedule = TrainConfig::batch_default().lr_schedule;
        }
        _ => {}
    }
    match &mut t.lr_schedule {
        LrSchedule::StepDecay { lr0, factor, period } => {
            set!(lr => *lr0, lr_decay => *factor, lr_period => *period);
            if args.lr_min.is_some() {
                return Err(Error::Config("--lr-min applies to the cosine schedule only".into()));
            }
        }
        LrSchedule::Cosine { lr_hi, lr_lo } => {
            set!(lr => *lr_hi, lr_min => *lr_lo);
            if args.lr_decay.is_some() || args.lr_period.is_some() {
                return Err(Error::Config("--lr-decay and --lr-period apply to the step schedule only".into()));
            }
        }
    }
    set!(oracle => cfg.oracle, out => cfg.out, d => cfg.synthetic.d, k => cfg.synthetic.k,
         count => cfg.synthetic.count, synthetic_seed => cfg.synthetic.seed, truncate_at => cfg.truncate_at);
    if !args.prompts.is_empty() {
        cfg.prompts = args.prompts.clone();
    }
    if !args.prompt_texts.is_empty() {
        cfg.prompt_texts = args.prompt_texts.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads or synthesizes the prompts and builds the oracle for them.
pub fn prepare(cfg: &CliConfig) -> Result<(Vec<PromptEmbedding>, Box<dyn RewardOracle>)> {
    let spec: OracleSpec = cfg.oracle.parse()?;
    let timeout = timeout_from_env()?;
    let (prompts, oracle) = if !cfg.prompts.is_empty() {
        let prompts = cfg
            .prompts
            .iter()
            .map(|path| {
                let (emb, role) = read_embedding(path)?;
                if role != Role::Prompt {
                    return Err(Error::Config(format!("{} holds a {} record, not a prompt", path.display(), role.name())));
                }
                PromptEmbedding::new(emb, path.display().to_string())
            })
            .collect::<Result<Vec<_>>>()?;
        let oracle = spec.build(prompts[0].dim(), timeout, cfg.truncate_at)?;
        (prompts, oracle)
    } else if !cfg.prompt_texts.is_empty() {
        let OracleSpec::Remote(ep) = &spec else { unreachable!("validated") };
        let mut remote = RemoteOracle::connect(ep.clone(), None, timeout)?;
        remote.truncate_at = cfg.truncate_at;
        let prompts = cfg.prompt_texts.iter().map(|t| remote.encode(t)).collect::<Result<Vec<_>>>()?;
        (prompts, Box::new(remote) as Box<dyn RewardOracle>)
    } else {
        let s = &cfg.synthetic;
        let prompts = (0..s.count)
            .map(|i| synthetic_prompt(s.d, s.k, s.seed + i as u64, format!("synthetic-{i}")))
            .collect::<Result<Vec<_>>>()?;
        let oracle = spec.build(s.d, timeout, cfg.truncate_at)?;
        (prompts, oracle)
    };
    for p in &prompts {
        check_width(p.dim(), &cfg.train)?;
        oracle.check_compatible(p.dim(), cfg.train.n_pre + p.tokens() + cfg.train.n_suff)?;
    }
    Ok((prompts, oracle))
}

/// The metrics file: one `epoch` line per record, then a `summary` or `aborted` line.
pub fn metrics_jsonl(metrics: &RunMetrics, error: Option<&Error>) -> Result<String> {
    let mut out = String::new();
    for r in &metrics.records {
        let mut v = serde_json::to_value(r)?;
        v.as_object_mut().unwrap().insert("type".into(), json!("epoch"));
        out.push_str(&serde_json::to_string(&v)?);
        out.push('\n');
    }
    let last = match error {
        Some(e) => json!({
            "type": "aborted",
            "epochs": metrics.records.len(),
            "error": e.kind(),
            "message": e.to_string(),
        }),
        None => json!({
            "type": "summary",
            "epochs": metrics.records.len(),
            "initial_reward": metrics.records.first().map(|r| r.reward),
            "final_reward": metrics.records.last().map(|r| r.reward),
            "best_reward": metrics.best_reward,
            "best_epoch": metrics.best_epoch,
        }),
    };
    out.push_str(&serde_json::to_string(&last)?);
    out.push('\n');
    Ok(out)
}

fn cmd_train(args: &TrainArgs, batch: bool) -> Result<()> {
    let cfg = resolve_config(args, batch)?;
    let (prompts, mut oracle) = prepare(&cfg)?;
    if !batch && prompts.len() != 1 {
        return Err(Error::Config(format!("optimize takes one prompt, got {}; use optimize-batch", prompts.len())));
    }
    std::fs::create_dir_all(&cfg.out)?;
    let mut echo = serde_json::to_string_pretty(&cfg)?;
    echo.push('\n');
    write_atomic(&cfg.out.join("config.json"), echo.as_bytes())?;

    let result = if batch {
        train_batch(&prompts, oracle.as_mut(), &cfg.train)
    } else {
        train_promptwise(&prompts[0], oracle.as_mut(), &cfg.train)
    };
    let metrics_path = cfg.out.join("metrics.jsonl");
    let TrainOutcome { best, metrics, .. } = match result {
        Ok(outcome) => outcome,
        Err(failure) => {
            write_atomic(&metrics_path, metrics_jsonl(&failure.metrics, Some(&failure.error))?.as_bytes())?;
            return Err(failure.error);
        }
    };
    write_params(&cfg.out.join("params.ipgo"), &best)?;
    write_insert_pair(&cfg.out.join("inserts.ipgo"), &build_inserts(&best)?)?;
    write_atomic(&metrics_path, metrics_jsonl(&metrics, None)?.as_bytes())?;
    println!(
        "{}",
        json!({
            "out": cfg.out,
            "epochs": metrics.records.len(),
            "initial_reward": metrics.records.first().map(|r| r.reward),
            "best_reward": metrics.best_reward,
            "best_epoch": metrics.best_epoch,
        })
    );
    Ok(())
}

fn cmd_mix(args: &MixArgs) -> Result<()> {
    let a = read_insert_pair(&args.a)?;
    let b = read_insert_pair(&args.b)?;
    write_insert_pair(&args.out, &mix_inserts(&a, &b, args.lambda)?)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let cfg = GradcheckConfig { d: args.d, m: args.m, n: args.n, k: args.k, gamma: args.gamma, seeds: args.seeds, h: args.h };
    let lines = run_gradcheck(&cfg)?;
    let mut stdout = io::stdout().lock();
    for line in &lines {
        writeln!(stdout, "{}", serde_json::to_string(line)?)?;
    }
    let worst = lines.iter().map(|l| l.max_rel_error).fold(0.0, f64::max);
    writeln!(stdout, "{}", json!({"type": "summary", "max_rel_error": worst, "threshold": PASS_THRESHOLD}))?;
    if let Some(bad) = lines.iter().find(|l| !l.passed) {
        return Err(Error::Constraint(format!(
            "gradient check {} has relative error {:e} above {:e}",
            bad.name, bad.max_rel_error, PASS_THRESHOLD
        )));
    }
    Ok(())
}

fn cmd_demo(args: &DemoArgs) -> Result<()> {
    if args.case >= args.count {
        return Err(Error::Config(format!("case {} outside a suite of {}", args.case, args.count)));
    }
    let cases = run_suite(args.seed, args.count)?;
    std::fs::create_dir_all(&args.out)?;
    let suite_path = args.out.join("suite.csv");
    let traj_path = args.out.join("trajectory.csv");
    write_atomic(&suite_path, suite_csv(&cases).as_bytes())?;
    let c = &cases[args.case];
    write_atomic(&traj_path, trajectories_csv(&c.rotation, &c.plain).as_bytes())?;
    let max = |f: &dyn Fn(&crate::optimizer::rotation_demo::SuiteCase) -> f64| cases.iter().map(f).fold(0.0, f64::max);
    println!(
        "{}",
        json!({
            "cases": cases.len(),
            "rotation_not_longer_fraction": rotation_win_fraction(&cases),
            "mean_rotation_path": cases.iter().map(|c| c.rotation.path_length).sum::<f64>() / cases.len() as f64,
            "mean_plain_path": cases.iter().map(|c| c.plain.path_length).sum::<f64>() / cases.len() as f64,
            "max_tangency_residual": max(&|c| c.rotation.max_tangency_residual()),
            "max_rotation_error": max(&|c| c.rotation.final_error),
            "max_plain_error": max(&|c| c.plain.final_error),
            "suite_csv": suite_path,
            "trajectory_csv": traj_path,
        })
    );
    Ok(())
}

fn cmd_gen_synthetic(args: &SynthArgs) -> Result<()> {
    let prompt = synthetic_prompt(args.d, args.k, args.seed, "synthetic")?;
    write_embedding(&args.out, prompt.emb(), Role::Prompt)
}

fn cmd_serve(args: &ServeArgs) -> Result<()> {
    let spec: OracleSpec = args.oracle.parse()?;
    if spec.is_remote() {
        return Err(Error::Config("serve hosts analytic oracles only".into()));
    }
    let mut oracle = spec.build(args.d, Duration::from_secs(1), DEFAULT_TRUNCATE_AT)?;
    let opts = ServeOptions { encode_dim: Some(args.d), fail_after: args.fail_after };
    match &args.listen {
        None => {
            serve_oracle(oracle.as_mut(), io::stdin().lock(), io::stdout().lock(), &opts)?;
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr)?;
            println!("{}", json!({ "listening": listener.local_addr()?.to_string() }));
            io::stdout().flush()?;
            for stream in listener.incoming() {
                let stream = stream?;
                let reader = BufReader::new(stream.try_clone()?);
                // a dropped client only ends its own session
                let _ = serve_oracle(oracle.as_mut(), reader, stream, &opts);
            }
        }
    }
    Ok(())
}

fn cmd_fixtures(args: &FixtureArgs) -> Result<()> {
    let mode = match args.action {
        FixtureAction::Check => RegenMode::Check,
        FixtureAction::Regen => RegenMode::Write,
        FixtureAction::Update => RegenMode::Update,
    };
    for status in regen_fixtures(&args.manifest, mode)? {
        println!("{}", json!({ "id": status.id, "sha256": status.actual, "ok": true }));
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Optimize(a) => cmd_train(a, false),
        Command::OptimizeBatch(a) => cmd_train(a, true),
        Command::Mix(a) => cmd_mix(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::DemoRotation(a) => cmd_demo(a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Fixtures(a) => cmd_fixtures(a),
    }
}

/// One-line machine-readable error record.
pub fn error_record(kind: &str, message: &str) -> String {
    json!({ "error": kind, "message": message }).to_string()
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            eprintln!("{}", error_record("usage", e.to_string().lines().next().unwrap_or("bad arguments")));
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_record(e.kind(), &e.to_string()));
            1
        }
    }
}
