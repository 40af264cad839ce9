use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

use bisimcert::autodiff::CHECKPOINT_VERSION;
use bisimcert::checker::prism::export_prism;
use bisimcert::checker::{bisim_pseudometric, BisimVariant, LatentMc, Objective};
use bisimcert::config::RunConfig;
use bisimcert::env::{heuristic_policy, EnvConfig, Environment, HeuristicPolicy};
use bisimcert::latent::{ChainEmbedding, LatentAgent, LatentMdp, LatentPolicy, TabularAgent};
use bisimcert::mdp::{episode_returns, rollout, Policy, UniformRandomPolicy};
use bisimcert::pac::{EstimateOptions, PacParams, UnsupportedPolicy, REPORT_SCHEMA_VERSION};
use bisimcert::pipeline::{certify, collect_latent, extract_latent_model, ActionSelection, CertifyOptions};
use bisimcert::vae::{distill_eval, write_metrics_csv, Trainer, VaeConfig, VaeModel, MODEL_VERSION, TRAINER_CHECKPOINT_VERSION};
use bisimcert::Error;

#[derive(Parser)]
#[command(name = "bisimcert", about = "Learn, verify and certify discrete latent abstractions of MDPs")]
#[command(disable_version_flag = true)]
struct Cli {
    /// Print the crate version and the schema versions of every file format.
    #[arg(long)]
    version: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a policy and write the trace as JSON lines.
    Simulate(SimulateArgs),
    /// Train the latent model and extract its latent MDP.
    Train(TrainArgs),
    /// Estimate the local losses of a latent agent and assemble its certificate.
    Certify(CertifyArgs),
    /// Write a latent MDP in PRISM explicit format.
    ExportPrism(ExportArgs),
    /// Bisimulation pseudometric of a small latent model under a policy.
    BisimOracle(BisimArgs),
    /// Mean episode return of the distilled latent policy.
    DistillEval(DistillArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyKind {
    Heuristic,
    Random,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, required_unless_present = "config")]
    env: Option<String>,
    /// Run configuration supplying the environment block.
    #[arg(long, conflicts_with = "env")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "heuristic")]
    policy: PolicyKind,
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a trainer checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write `checkpoint.json` every this many environment steps and at the end.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Length of the latent-policy trace the latent MDP is estimated from.
    #[arg(long, default_value_t = 100_000)]
    fit_steps: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Return,
    Reach,
    ConstrainedReach,
}

#[derive(Clone, Copy, ValueEnum)]
enum UnsupportedArg {
    Error,
    Conservative,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    Greedy,
    Sampled,
}

#[derive(Args)]
struct CertifyArgs {
    /// Trained model (`model.json`).
    #[arg(long, required_unless_present = "chain_oracle")]
    model: Option<PathBuf>,
    /// Certify the exact abstraction of a lifted chain instead of a model.
    #[arg(long, conflicts_with = "model")]
    chain_oracle: bool,
    /// Run configuration; supplies the environment for `--chain-oracle` and default PAC parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_enum, default_value = "return")]
    objective: ObjectiveArg,
    /// Constraint mask over atomic propositions.
    #[arg(long = "C", default_value_t = 0)]
    constraint: u64,
    /// Target mask over atomic propositions.
    #[arg(long = "T", default_value_t = 0)]
    target: u64,
    #[arg(long, default_value_t = 1000)]
    burn_in: usize,
    #[arg(long, default_value_t = 1)]
    thin: usize,
    #[arg(long, value_enum, default_value = "error")]
    unsupported: UnsupportedArg,
    #[arg(long, value_enum, default_value = "greedy")]
    selection: SelectionArg,
    #[arg(long, default_value_t = 100_000)]
    fit_steps: usize,
    /// Estimation trace length; by default exactly what the guarantees require.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 10_000_000)]
    max_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path; the report goes to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SmoothingArg {
    None,
    AddOne,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    mdp: PathBuf,
    /// Latent policy; adds the induced chain files.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// File prefix of the exported files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "none")]
    smoothing: SmoothingArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Reward,
    Label,
}

#[derive(Args)]
struct BisimArgs {
    #[arg(long)]
    mdp: PathBuf,
    /// Latent policy; uniform over actions when absent.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    gamma: f64,
    #[arg(long, value_enum, default_value = "reward")]
    variant: VariantArg,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 30)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Exit status 2 marks usage and configuration errors, 1 runtime errors.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn usage(e: impl Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.version {
        print!("{}", version_text());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (see --help)");
        return ExitCode::from(2);
    };
    let result = match command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Certify(a) => certify_cmd(a),
        Command::ExportPrism(a) => export(a),
        Command::BisimOracle(a) => bisim(a),
        Command::DistillEval(a) => distill(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn version_text() -> String {
    format!(
        "bisimcert {}\nmodel schema {MODEL_VERSION}\nparameter checkpoint schema {CHECKPOINT_VERSION}\n\
         trainer checkpoint schema {TRAINER_CHECKPOINT_VERSION}\ncertificate report schema {REPORT_SCHEMA_VERSION}\n",
        env!("CARGO_PKG_VERSION")
    )
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(runtime)?;
    }
    fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn simulate(a: SimulateArgs) -> CliResult {
    let cfg = match (&a.config, &a.env) {
        (Some(path), _) => RunConfig::load(path).map_err(usage)?,
        (None, Some(id)) => RunConfig::for_env(id),
        (None, None) => return Err(usage("either --env or --config is required")),
    };
    let env = cfg.environment().map_err(usage)?;
    let trace = match a.policy {
        PolicyKind::Heuristic => rollout(&env, &heuristic_policy(&env), a.steps, a.seed),
        PolicyKind::Random => rollout(&env, &UniformRandomPolicy, a.steps, a.seed),
    }
    .map_err(|e| match e {
        Error::InvalidArgument(_) => usage(e),
        other => runtime(other),
    })?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(runtime)?;
    }
    let file = fs::File::create(&a.out).map_err(|e| runtime(format!("cannot write {}: {e}", a.out.display())))?;
    let mut out = BufWriter::new(file);
    trace.write_jsonl(&mut out)?;
    out.flush().map_err(runtime)?;
    let effective = RunConfig { seed: Some(a.seed), ..cfg };
    println!(
        "{}",
        json!({
            "env": env.id(),
            "steps": trace.len(),
            "seed": a.seed,
            "trace_digest": trace.digest(),
            "config_hash": effective.hash(),
        })
    );
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let cfg = RunConfig::load(&a.config).map_err(usage)?;
    let out = a.out.clone().or_else(|| cfg.out.clone()).ok_or_else(|| usage("no output directory given"))?;
    let env = cfg.environment().map_err(usage)?;
    let vae = cfg.vae_config().map_err(usage)?;
    let base = heuristic_policy(&env);
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = Trainer::resume(&base, &read(path)?).map_err(usage)?;
            // Only the step budget may change, so a run can be extended.
            let same = VaeConfig { train_steps: vae.train_steps, ..t.model.config.clone() } == vae;
            if !same || t.model.env_config() != &env.config() {
                return Err(usage("checkpoint was written for a different configuration"));
            }
            t.model.config.train_steps = vae.train_steps;
            t
        }
        None => Trainer::new(&env, &base, vae.clone())?,
    };
    fs::create_dir_all(&out).map_err(runtime)?;
    let checkpoint_path = out.join("checkpoint.json");
    let mut reported = trainer.metrics.len();
    while trainer.steps() < vae.train_steps {
        if let Err(e) = trainer.step() {
            if matches!(e, Error::Diverged { .. }) {
                write(&checkpoint_path, &trainer.checkpoint())?;
                write_metrics(&out, &trainer)?;
                eprintln!("checkpoint written to {}", checkpoint_path.display());
            }
            return Err(e.into());
        }
        for row in &trainer.metrics[reported..] {
            eprintln!("{}", row.csv_line());
        }
        reported = trainer.metrics.len();
        if a.checkpoint_every.is_some_and(|k| k > 0 && trainer.steps() % k == 0) {
            write(&checkpoint_path, &trainer.checkpoint())?;
        }
    }
    if a.checkpoint_every.is_some() {
        write(&checkpoint_path, &trainer.checkpoint())?;
    }
    write(&out.join("model.json"), &trainer.model.to_json())?;
    write_metrics(&out, &trainer)?;

    let fit_seed = vae.seed.wrapping_add(2);
    let (_, latent) = collect_latent(&env, &trainer.model, a.fit_steps, fit_seed, ActionSelection::Greedy)?;
    let extraction = extract_latent_model(&trainer.model, &latent, ActionSelection::Greedy)?;
    write(&out.join("latent_mdp.json"), &extraction.mdp.to_json())?;
    write(&out.join("latent_policy.json"), &serde_json::to_string(&extraction.policy).map_err(runtime)?)?;
    let manifest = json!({
        "config_hash": cfg.hash(),
        "config": cfg,
        "model_schema": MODEL_VERSION,
        "steps": trainer.steps(),
        "updates": trainer.updates(),
        "fit_seed": fit_seed,
        "fit_steps": a.fit_steps,
        "fit_transitions_used": extraction.transitions_used,
        "latent_states": extraction.mc.len(),
    });
    write(&out.join("run.json"), &serde_json::to_string_pretty(&manifest).map_err(runtime)?)?;
    Ok(())
}

fn write_metrics(dir: &Path, trainer: &Trainer) -> CliResult {
    let mut buf = Vec::new();
    write_metrics_csv(&trainer.metrics, &mut buf)?;
    write(&dir.join("metrics.csv"), &String::from_utf8(buf).map_err(runtime)?)
}

fn resolve_params(a: &CertifyArgs, cfg: Option<&RunConfig>) -> CliResult<PacParams> {
    let base = cfg.and_then(|c| c.pac);
    let pick = |flag: Option<f64>, from_cfg: Option<f64>, name: &str| {
        flag.or(from_cfg).ok_or_else(|| usage(format!("--{name} is required")))
    };
    let p = PacParams {
        epsilon: pick(a.epsilon, base.map(|p| p.epsilon), "epsilon")?,
        delta: pick(a.delta, base.map(|p| p.delta), "delta")?,
        gamma: pick(a.gamma, base.map(|p| p.gamma), "gamma")?,
    };
    p.validate().map_err(usage)?;
    Ok(p)
}

fn chain_agent_parts(env: &Environment) -> CliResult<(ChainEmbedding, LatentPolicy)> {
    let phi = ChainEmbedding::new(env).map_err(usage)?;
    let HeuristicPolicy::Tabular { table } = heuristic_policy(env) else {
        return Err(usage("--chain-oracle needs a lifted_chain environment"));
    };
    let n_actions = table.first().map_or(0, |r| r.len());
    let table = table.into_iter().enumerate().map(|(i, row)| (phi.latent_of_node(i), row)).collect();
    Ok((phi, LatentPolicy { n_actions, table }))
}

fn certify_cmd(a: CertifyArgs) -> CliResult {
    let cfg = a.config.as_deref().map(RunConfig::load).transpose().map_err(usage)?;
    let params = resolve_params(&a, cfg.as_ref())?;
    let objective = match a.objective {
        ObjectiveArg::Return => None,
        ObjectiveArg::Reach => Some(Objective::reach(a.target, params.gamma)),
        ObjectiveArg::ConstrainedReach => Some(Objective::constrained_reach(a.constraint, a.target, params.gamma)),
    };
    if let Some(obj) = &objective {
        obj.validate().map_err(usage)?;
    }
    let opts = CertifyOptions {
        params,
        estimate: EstimateOptions {
            burn_in: a.burn_in,
            thin: a.thin,
            unsupported: match a.unsupported {
                UnsupportedArg::Error => UnsupportedPolicy::Error,
                UnsupportedArg::Conservative => UnsupportedPolicy::Conservative,
            },
        },
        selection: match a.selection {
            SelectionArg::Greedy => ActionSelection::Greedy,
            SelectionArg::Sampled => ActionSelection::Sampled,
        },
        fit_steps: a.fit_steps,
        steps: a.steps,
        max_steps: a.max_steps,
        objective,
        seed: a.seed,
    };
    if a.thin == 0 {
        return Err(usage("--thin must be at least 1"));
    }
    let mut provenance = BTreeMap::new();
    if let Some(c) = &cfg {
        provenance.insert("config_hash".to_string(), json!(c.hash()));
    }
    let certification = if let Some(path) = &a.model {
        let text = read(path)?;
        let model = VaeModel::from_json(&text).map_err(usage)?;
        let env = Environment::from_config(model.env_config()).map_err(usage)?;
        provenance.insert("model_sha256".to_string(), json!(sha256_hex(text.as_bytes())));
        certify(&env, &model, &opts, provenance)?
    } else {
        let env_cfg = cfg.as_ref().map_or_else(|| EnvConfig::named("lifted_chain"), |c| c.env.clone());
        let env = Environment::from_config(&env_cfg).map_err(usage)?;
        let (phi, policy) = chain_agent_parts(&env)?;
        let agent = TabularAgent { phi: &phi, policy: &policy };
        provenance.insert("agent".to_string(), json!("chain_oracle"));
        certify(&env, &agent as &dyn LatentAgent, &opts, provenance)?
    };
    let report = certification.report.to_json();
    match &a.out {
        Some(path) => write(path, &report),
        None => {
            println!("{report}");
            Ok(())
        }
    }
}

fn load_policy(path: Option<&Path>) -> CliResult<Option<LatentPolicy>> {
    path.map(|p| serde_json::from_str(&read(p)?).map_err(|e| usage(format!("{}: {e}", p.display()))))
        .transpose()
}

fn export(a: ExportArgs) -> CliResult {
    let mut m = LatentMdp::from_json(&read(&a.mdp)?).map_err(usage)?;
    if let SmoothingArg::AddOne = a.smoothing {
        m = m.smoothed_add_one();
    }
    let policy = load_policy(a.policy.as_deref())?;
    let written = export_prism(&m, policy.as_ref(), &a.out)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn bisim(a: BisimArgs) -> CliResult {
    let m = LatentMdp::from_json(&read(&a.mdp)?).map_err(usage)?;
    if !(0.0..1.0).contains(&a.gamma) || !(a.tol > 0.0) {
        return Err(usage("gamma must lie in [0, 1) and tol must be positive"));
    }
    let policy = match load_policy(a.policy.as_deref())? {
        Some(p) => p,
        None => {
            let u = vec![1.0 / m.n_actions as f64; m.n_actions];
            LatentPolicy { n_actions: m.n_actions, table: m.states().into_iter().map(|s| (s, u.clone())).collect() }
        }
    };
    let mc = LatentMc::induced(&m, &policy)?;
    let variant = match a.variant {
        VariantArg::Reward => BisimVariant::Reward,
        VariantArg::Label => BisimVariant::Label,
    };
    let d = bisim_pseudometric(&mc, variant, a.gamma, a.tol)?;
    let doc = json!({
        "variant": variant,
        "gamma": a.gamma,
        "tol": a.tol,
        "states": mc.states,
        "distances": d,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(runtime)?;
    match &a.out {
        Some(path) => write(path, &text),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn distill(a: DistillArgs) -> CliResult {
    if a.episodes == 0 {
        return Err(usage("--episodes must be positive"));
    }
    let text = read(&a.model)?;
    let model = VaeModel::from_json(&text).map_err(usage)?;
    let env = Environment::from_config(model.env_config()).map_err(usage)?;
    let (mean, returns) = distill_eval(&env, &model, a.episodes, a.seed)?;
    let base = heuristic_policy(&env);
    let base_returns = episode_returns(&env, a.episodes, a.seed, |s, rngs| base.act(&env, s, &mut rngs.policy))?;
    let base_mean = base_returns.iter().sum::<f64>() / a.episodes as f64;
    println!(
        "{}",
        json!({
            "env": env.id(),
            "episodes": a.episodes,
            "seed": a.seed,
            "mean_return": mean,
            "returns": returns,
            "heuristic_mean_return": base_mean,
            "model_sha256": sha256_hex(text.as_bytes()),
        })
    );
    Ok(())
}
