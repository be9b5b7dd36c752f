use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use scalenav::config::{Ablation, RunConfig};
use scalenav::data::{collect_episodes, read_dataset, write_dataset, PolicySpec};
use scalenav::runtime::{
    run_evaluation, scenario_task, trace_csv, unmapped_start, write_metrics, Agent, Suite,
};
use scalenav::sim::scenario::Registry;
use scalenav::topo_map::{build_map, TopoMap};
use scalenav::train::{run_stage, Models};

fn long_version() -> &'static str {
    if scalenav::par::is_parallel() {
        concat!(env!("CARGO_PKG_VERSION"), " (features: parallel)")
    } else {
        concat!(env!("CARGO_PKG_VERSION"), " (features: sequential)")
    }
}

#[derive(Parser)]
#[command(name = "scalenav", version, long_version = long_version(), about = "Self-correcting latent navigation in a raycast world")]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Alternative scenario registry.
    #[arg(long, global = true)]
    scenarios: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Roll out a behavior policy and write a dataset.
    Collect(CollectArgs),
    /// Run training stages over a dataset.
    Train(TrainArgs),
    /// Build a topological map from a dataset and a trained checkpoint.
    BuildMap(BuildMapArgs),
    /// Run an evaluation suite and write a metrics CSV.
    Eval(EvalArgs),
    /// Run one navigation trial and print its result as JSON.
    Navigate(NavigateArgs),
    /// Start lost in a held-out region and trace the recovery loop.
    RecoverDemo(RecoverArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Mixed,
    NoisyWaypointFollower,
    CollisionSeeker,
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    /// Collect the map traversals described by the config instead of the training set.
    #[arg(long)]
    map_data: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Directory holding the stage archives.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3), conflicts_with = "all", required_unless_present = "all")]
    stage: Option<u8>,
    #[arg(long)]
    all: bool,
}

#[derive(Args)]
struct BuildMapArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    edge_threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Deployed {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    map: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    deployed: Deployed,
    #[arg(long)]
    suite: String,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblationFlags {
    #[arg(long)]
    no_affordance: bool,
    #[arg(long)]
    no_rnn: bool,
    #[arg(long)]
    no_rnd: bool,
}

impl AblationFlags {
    fn apply(&self, base: Ablation) -> Ablation {
        let mut a = base;
        if self.no_affordance {
            a = Ablation::NO_AFFORDANCE;
        }
        if self.no_rnn {
            a.use_rnn = false;
        }
        if self.no_rnd {
            a.use_rnd = false;
        }
        a
    }
}

#[derive(Args)]
struct NavigateArgs {
    #[command(flatten)]
    deployed: Deployed,
    #[arg(long)]
    scenario: String,
    #[command(flatten)]
    ablation: AblationFlags,
}

#[derive(Args)]
struct RecoverArgs {
    #[command(flatten)]
    deployed: Deployed,
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    no_rnd: bool,
    #[arg(long)]
    no_rnn: bool,
    /// Trace CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(())
}

fn load_deployed(d: &Deployed, cfg: &RunConfig) -> Result<(Models, TopoMap)> {
    require(&d.checkpoint, "checkpoint")?;
    require(&d.map, "map")?;
    let models = Models::load(&d.checkpoint, cfg)?;
    let map = TopoMap::read(&d.map, Some(&models.hash))?;
    Ok((models, map))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => {
            require(p, "config")?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let reg = match &cli.scenarios {
        Some(p) => {
            require(p, "scenario registry")?;
            Registry::load(p)?
        }
        None => Registry::builtin(),
    };

    match cli.cmd {
        Cmd::Collect(a) => {
            if let Some(s) = a.scenario {
                cfg.data.scenario = s;
            }
            let policy = a.policy.map(|p| match p {
                PolicyArg::Mixed => cfg.data.policy,
                PolicyArg::NoisyWaypointFollower => PolicySpec::NoisyWaypointFollower,
                PolicyArg::CollisionSeeker => PolicySpec::CollisionSeeker,
            });
            let (default_policy, default_n, seed) = if a.map_data {
                (cfg.data.map_policy, cfg.data.map_episodes, cli.seed.unwrap_or(cfg.data.map_seed))
            } else {
                (cfg.data.policy, cfg.data.episodes, cfg.seed)
            };
            let world = reg.world(&cfg.data.scenario)?;
            let d = collect_episodes(
                &world,
                &cfg.sim,
                policy.unwrap_or(default_policy),
                a.episodes.unwrap_or(default_n),
                seed,
                &cfg.data.collect,
                &cfg.data.scenario,
            );
            write_dataset(&d, &a.out)?;
            eprintln!(
                "wrote {} episodes, {} transitions to {}",
                d.episodes.len(),
                d.num_transitions(),
                a.out.display()
            );
        }
        Cmd::Train(a) => {
            require(&a.dataset, "dataset")?;
            let d = read_dataset(&a.dataset)?;
            let stages: Vec<usize> = match a.stage {
                Some(s) => vec![s as usize],
                None => vec![1, 2, 3],
            };
            for s in stages {
                let t = std::time::Instant::now();
                let p = run_stage(s, &d, &cfg, &a.out_dir)?;
                eprintln!("stage {s} -> {} ({:.1?})", p.display(), t.elapsed());
            }
        }
        Cmd::BuildMap(a) => {
            require(&a.dataset, "dataset")?;
            require(&a.checkpoint, "checkpoint")?;
            let d = read_dataset(&a.dataset)?;
            let models = Models::load(&a.checkpoint, &cfg)?;
            let map = build_map(
                &d,
                &models.encoder,
                &models.iql,
                a.stride.unwrap_or(cfg.map.node_stride),
                a.edge_threshold.unwrap_or(cfg.map.edge_threshold),
                &models.hash,
            )?;
            map.write(&a.out)?;
            eprintln!("map: {} nodes, {} edges -> {}", map.len(), map.edges.len(), a.out.display());
        }
        Cmd::Eval(a) => {
            let suite = Suite::parse(&a.suite)?;
            let (models, map) = load_deployed(&a.deployed, &cfg)?;
            let rows = run_evaluation(suite, a.trials, cfg.seed, &models, &map, &cfg, &reg)?;
            write_metrics(&rows, &a.out)?;
            eprintln!("{} rows -> {}", rows.len(), a.out.display());
        }
        Cmd::Navigate(a) => {
            let (models, map) = load_deployed(&a.deployed, &cfg)?;
            let ablation = a.ablation.apply(cfg.ablation);
            let agent = Agent::new(&models, &map, &cfg, ablation)?;
            let task = scenario_task(&reg, &a.scenario, cfg.seed)?;
            let r = agent.navigate(&task, cfg.seed, None)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Cmd::RecoverDemo(a) => {
            let (models, map) = load_deployed(&a.deployed, &cfg)?;
            let mut ablation = Ablation::FULL;
            ablation.use_rnd = !a.no_rnd;
            ablation.use_rnn = !a.no_rnn;
            let agent = Agent::new(&models, &map, &cfg, ablation)?;
            let mut task = scenario_task(&reg, &a.scenario, cfg.seed)?;
            task.start = unmapped_start(&task.world, cfg.seed, 0.5)?;
            task.goal = None;
            let mut trace = Vec::new();
            let r = agent.navigate(&task, cfg.seed, Some(&mut trace))?;
            let csv = trace_csv(&trace);
            match &a.out {
                Some(p) => std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
            eprintln!(
                "relocalized: {}  steps: {}  novelty {:.5} -> {:.5}",
                r.success, r.steps, r.novelty_start, r.novelty_end
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
