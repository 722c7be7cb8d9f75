use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use quantem_core::dqn::{self, DqnAgent};
use quantem_core::emulation::{DropoutPolicy, Emulation};
use quantem_core::mpc::{mpc_rollout, Rollout};
use quantem_core::nn::Mlp;
use quantem_core::quantization::NearestBackend;
use quantem_core::supervised::{self, Dataset};
use quantem_core::transfer::{self, BasePolicy, ClassifierPolicy, TransferMap, TransferredPolicy};

use crate::config::LoadedConfig;
use crate::output::OutputDir;
use crate::plot;
use crate::{Cli, CliError, Command};

/// Built-in configurations: id, description, TOML.
pub const RECIPES: &[(&str, &str, &str)] = &[
    ("fig3a", "integer MPC tracking from (1, 0)", include_str!("../recipes/fig3a.toml")),
    ("fig3b", "supervised classifier trained on MPC labels", include_str!("../recipes/fig3b.toml")),
    ("fig5a", "DQN tracking from eight compass starts", include_str!("../recipes/fig5a.toml")),
    ("fig5b", "DQN tracking with one random channel dropped per step", include_str!("../recipes/fig5b.toml")),
    ("fig6", "transfer under a 90 degree rotation", include_str!("../recipes/fig6.toml")),
    ("fig7", "warm-start versus cold-start training on a new system", include_str!("../recipes/fig7.toml")),
    ("fig8", "transfer under a shear with nearest-direction correction", include_str!("../recipes/fig8.toml")),
];

const AGENT_FILE: &str = "agent.dqn";
const CLASSIFIER_FILE: &str = "classifier.mlp";
const TRAIN_DATA: &str = "dataset_train.csv";
const TEST_DATA: &str = "dataset_test.csv";
const THEOREM_SAMPLES: usize = 1000;

fn load_config(cli: &Cli) -> Result<LoadedConfig, CliError> {
    match (&cli.config, &cli.recipe) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            Ok(LoadedConfig::parse(&text, &path.display().to_string())?)
        }
        (None, Some(id)) => {
            let (_, _, text) = RECIPES
                .iter()
                .find(|(name, _, _)| name == id)
                .ok_or_else(|| CliError::Config(format!("unknown recipe `{id}`; try `quantem recipes`")))?;
            Ok(LoadedConfig::parse(text, &format!("recipe {id}"))?)
        }
        (None, None) => Err(CliError::Config("one of --config or --recipe is required".into())),
    }
}

struct Context {
    cfg: LoadedConfig,
    emu: Emulation,
    seed: u64,
    out_dir: PathBuf,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self, CliError> {
        let cfg = load_config(cli)?;
        let emu = cfg.emulation()?;
        let seed = cli.seed.unwrap_or(cfg.raw.run.seed);
        let out_dir = cli
            .out_dir
            .clone()
            .or_else(|| cfg.raw.run.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Self {
            cfg,
            emu,
            seed,
            out_dir,
        })
    }

    fn output(&self) -> Result<OutputDir, CliError> {
        Ok(OutputDir::create(&self.out_dir)?)
    }

    fn input(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out_dir.join(default))
    }

    fn finish(&self, out: OutputDir, command: &str) -> Result<(), CliError> {
        let manifest = out.finish(command, &self.cfg.text, self.seed)?;
        eprintln!("wrote {}", manifest.display());
        Ok(())
    }
}

fn read_input(path: &Path, what: &str) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {what} at {}: {e}", path.display())))
}

fn load_agent(ctx: &Context, path: &Option<PathBuf>) -> Result<DqnAgent, CliError> {
    let path = ctx.input(path, AGENT_FILE);
    let text = read_input(&path, "agent (run train-dqn first)")?;
    Ok(DqnAgent::load(&text, &ctx.cfg.dqn(ctx.seed)?)?)
}

fn load_classifier(ctx: &Context, path: &Option<PathBuf>) -> Result<Mlp, CliError> {
    let path = ctx.input(path, CLASSIFIER_FILE);
    Ok(Mlp::load(&read_input(&path, "classifier (run train-supervised first)")?)?)
}

fn summarize(label: &str, i: usize, r: &Rollout) {
    let max_err = r.tracking_errors().into_iter().fold(0.0, f64::max);
    eprintln!(
        "{label} start {i}: terminal |x_qs| = {:.4}, terminal error = {:.4}, max tracking error = {:.4}",
        r.terminal_norm(),
        r.terminal_error(),
        max_err
    );
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Recipes => {
            for (id, about, _) in RECIPES {
                println!("{id:6} {about}");
            }
            Ok(())
        }
        Command::Plot { input, output } => {
            let csv = read_input(input, "rollout")?;
            let (q, r) = plot::read_rollout(&csv).map_err(|e| CliError::Runtime(format!("{}: {e}", input.display())))?;
            let target = output.clone().unwrap_or_else(|| input.with_extension("svg"));
            let dir = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let name = target
                .file_name()
                .ok_or_else(|| CliError::Runtime("output path has no file name".into()))?
                .to_string_lossy()
                .into_owned();
            let title = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let mut out = OutputDir::create(dir)?;
            out.write(&name, plot::render_svg(&q, &r, &title).as_bytes())?;
            eprintln!("wrote {}", target.display());
            Ok(())
        }
        command => {
            let ctx = Context::new(cli)?;
            match command {
                Command::MpcRun => mpc_run(&ctx),
                Command::Collect => collect(&ctx),
                Command::TrainSupervised { data } => train_supervised(&ctx, data),
                Command::SupervisedRollout { model } => supervised_rollout(&ctx, model),
                Command::TrainDqn => train_dqn(&ctx),
                Command::DqnRollout { agent, dropout } => dqn_rollout(&ctx, agent, *dropout),
                Command::TransferRollout { model } => transfer_rollout(&ctx, model),
                Command::WarmstartCompare { agent } => warmstart(&ctx, agent),
                Command::Alphabet => {
                    let mut out = ctx.output()?;
                    out.write("alphabet.csv", ctx.emu.alphabet.to_csv().as_bytes())?;
                    eprintln!("{} directions", ctx.emu.alphabet.len());
                    ctx.finish(out, "alphabet")
                }
                Command::Recipes | Command::Plot { .. } => unreachable!("handled above"),
            }
        }
    }
}

fn mpc_run(ctx: &Context) -> Result<(), CliError> {
    let mpc = ctx.cfg.mpc()?;
    let policy = ctx.cfg.dropout()?;
    let mut out = ctx.output()?;
    for (i, x0) in ctx.cfg.starts()?.iter().enumerate() {
        let r = mpc_rollout(x0, ctx.cfg.raw.run.steps, &ctx.emu, &mpc, &policy)?;
        summarize("mpc", i, &r);
        out.write(&format!("mpc_rollout_{i}.csv"), r.to_csv().as_bytes())?;
    }
    ctx.finish(out, "mpc-run")
}

fn collect(ctx: &Context) -> Result<(), CliError> {
    let s = &ctx.cfg.raw.supervised;
    let mpc = ctx.cfg.mpc()?;
    let spec = ctx.cfg.feature_spec()?;
    let train_starts = supervised::annulus_starts(s.train_starts, s.start_radius_min, s.start_radius_max, ctx.seed);
    let test_starts = supervised::circle_starts(s.test_starts, 1.0);
    let train = supervised::generate_dataset(&train_starts, s.train_steps, &ctx.emu, &mpc, spec, ctx.seed)?;
    let test = supervised::generate_dataset(&test_starts, s.test_steps, &ctx.emu, &mpc, spec, ctx.seed)?;
    eprintln!("collected {} training and {} test samples", train.len(), test.len());
    let mut out = ctx.output()?;
    out.write(TRAIN_DATA, train.to_csv().as_bytes())?;
    out.write(TEST_DATA, test.to_csv().as_bytes())?;
    ctx.finish(out, "collect")
}

fn train_supervised(ctx: &Context, data: &Option<PathBuf>) -> Result<(), CliError> {
    let path = ctx.input(data, TRAIN_DATA);
    let train = Dataset::from_csv(&read_input(&path, "training data (run collect first)")?)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let (arch, training) = ctx.cfg.classifier(ctx.seed);
    let (model, report) = supervised::train_classifier(&train, ctx.emu.alphabet.len(), &arch, &training)?;
    let mut log = String::from("epoch,loss\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        let _ = writeln!(log, "{},{}", i + 1, l);
    }
    eprintln!("train accuracy {:.4}", report.train_accuracy);
    let mut metrics = format!("split,accuracy\ntrain,{}\n", report.train_accuracy);
    let test_path = ctx.out_dir.join(TEST_DATA);
    if data.is_none() && test_path.exists() {
        let test = Dataset::from_csv(&read_input(&test_path, "test data")?)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", test_path.display())))?;
        let acc = supervised::evaluate(&model, &test)?;
        eprintln!("test accuracy {acc:.4}");
        let _ = writeln!(metrics, "test,{acc}");
    }
    let mut out = ctx.output()?;
    out.write(CLASSIFIER_FILE, model.save().as_bytes())?;
    out.write("classifier_training.csv", log.as_bytes())?;
    out.write("classifier_metrics.csv", metrics.as_bytes())?;
    ctx.finish(out, "train-supervised")
}

fn supervised_rollout(ctx: &Context, model: &Option<PathBuf>) -> Result<(), CliError> {
    let net = load_classifier(ctx, model)?;
    let spec = ctx.cfg.feature_spec()?;
    let policy = ctx.cfg.dropout()?;
    let mut out = ctx.output()?;
    for (i, x0) in ctx.cfg.starts()?.iter().enumerate() {
        let r = supervised::supervised_rollout(x0, ctx.cfg.raw.run.steps, &net, spec, &ctx.emu, &policy)?;
        summarize("supervised", i, &r);
        out.write(&format!("supervised_rollout_{i}.csv"), r.to_csv().as_bytes())?;
    }
    ctx.finish(out, "supervised-rollout")
}

fn train_dqn(ctx: &Context) -> Result<(), CliError> {
    let cfg = ctx.cfg.dqn(ctx.seed)?;
    let mut agent = DqnAgent::new(2 * ctx.emu.dim(), ctx.emu.alphabet.len(), &cfg)?;
    let log = dqn::train(&mut agent, &ctx.emu, &cfg)?;
    let broken = log.syncs.iter().filter(|s| !s.holds()).count();
    if broken > 0 {
        return Err(CliError::Runtime(format!("{broken} target syncs violated the loss identity")));
    }
    let mut syncs = String::from("update,loss_before,l_dqn_after,l_msbe_after\n");
    for s in &log.syncs {
        let _ = writeln!(syncs, "{},{},{},{}", s.update, s.loss_before, s.l_dqn_after, s.l_msbe_after);
    }
    eprintln!(
        "trained {} episodes; final return {:.4}; {} syncs checked",
        cfg.episodes,
        log.episode_returns.last().copied().unwrap_or(0.0),
        log.syncs.len()
    );
    let mut out = ctx.output()?;
    out.write(AGENT_FILE, agent.save().as_bytes())?;
    out.write("dqn_training.csv", log.to_csv().as_bytes())?;
    out.write("dqn_syncs.csv", syncs.as_bytes())?;
    ctx.finish(out, "train-dqn")
}

fn dqn_rollout(ctx: &Context, agent: &Option<PathBuf>, dropout: Option<usize>) -> Result<(), CliError> {
    let agent = load_agent(ctx, agent)?;
    let policy = ctx.cfg.dropout_with(dropout)?;
    let tag = match &policy {
        DropoutPolicy::None => String::new(),
        DropoutPolicy::Fixed(m) => format!("_fixed{}", m.len()),
        DropoutPolicy::Random { k, .. } => format!("_dropout{k}"),
    };
    let mut out = ctx.output()?;
    for (i, x0) in ctx.cfg.starts()?.iter().enumerate() {
        let r = dqn::greedy_rollout(&agent, &ctx.emu, x0, ctx.cfg.raw.run.steps, &policy)?;
        summarize("dqn", i, &r);
        out.write(&format!("dqn_rollout{tag}_{i}.csv"), r.to_csv().as_bytes())?;
    }
    ctx.finish(out, "dqn-rollout")
}

fn transfer_rollout(ctx: &Context, model: &Option<PathBuf>) -> Result<(), CliError> {
    let o = ctx
        .cfg
        .transfer_matrix()?
        .ok_or_else(|| CliError::Config("transfer-rollout needs `transfer.o`".into()))?;
    let map = TransferMap::new(o.clone())?;
    let h_o = transfer::conjugate_system(ctx.emu.reference.matrix(), &o)?;
    let target = ctx.emu.with_reference(h_o)?;
    let mut out = ctx.output()?;
    match ctx.cfg.raw.transfer.policy.as_str() {
        "dqn" => {
            let agent = load_agent(ctx, model)?;
            if transfer::is_alphabet_invariant(&o, &ctx.emu.alphabet, transfer::INVARIANCE_TOL) {
                let states = transfer::sample_states(THEOREM_SAMPLES, ctx.emu.dim(), 1.5, ctx.seed);
                let report = transfer::verify_theorem1(&agent, &map, &ctx.emu.alphabet, &states)?;
                eprintln!("transferred decisions agree at rate {:.4}", report.agreement_rate());
                out.write("transfer_report.csv", report.to_csv().as_bytes())?;
            }
            transfer_rollouts(ctx, &mut out, agent, map, &target)?;
        }
        _ => {
            let policy = ClassifierPolicy {
                model: load_classifier(ctx, model)?,
                spec: ctx.cfg.feature_spec()?,
            };
            transfer_rollouts(ctx, &mut out, policy, map, &target)?;
        }
    }
    ctx.finish(out, "transfer-rollout")
}

fn transfer_rollouts<P: BasePolicy>(
    ctx: &Context,
    out: &mut OutputDir,
    base: P,
    map: TransferMap,
    target: &Emulation,
) -> Result<(), CliError> {
    let tp = TransferredPolicy::new(
        base,
        map,
        ctx.emu.alphabet.clone(),
        target.alphabet.clone(),
        ctx.cfg.raw.transfer.exclude_zero,
        NearestBackend::KdTree,
    )?;
    eprintln!("alphabet invariant under O: {}", tp.is_invariant());
    let policy = ctx.cfg.dropout()?;
    for (i, x0) in ctx.cfg.starts()?.iter().enumerate() {
        let (r, steps) = transfer::transferred_rollout(&tp, target, x0, ctx.cfg.raw.run.steps, &policy)?;
        summarize("transfer", i, &r);
        let mut csv = String::from("k,base_index,target_index,correction_norm\n");
        for (k, s) in steps.iter().enumerate() {
            let _ = writeln!(csv, "{k},{},{},{}", s.base_index, s.target_index, s.correction_norm);
        }
        out.write(&format!("transfer_rollout_{i}.csv"), r.to_csv().as_bytes())?;
        out.write(&format!("transfer_steps_{i}.csv"), csv.as_bytes())?;
    }
    Ok(())
}

fn warmstart(ctx: &Context, agent: &Option<PathBuf>) -> Result<(), CliError> {
    let h_new = ctx
        .cfg
        .warm_target()?
        .ok_or_else(|| CliError::Config("warmstart-compare needs `transfer.target_h` or `transfer.o`".into()))?;
    let target = ctx.emu.with_reference(h_new)?;
    let base = load_agent(ctx, agent)?;
    let t = &ctx.cfg.raw.transfer;
    let cfg = quantem_core::dqn::DqnConfig {
        episodes: t.warm_episodes,
        ..ctx.cfg.dqn(ctx.seed)?
    };
    let starts = ctx.cfg.starts()?;
    let report = transfer::warm_start_train(&base, &target, &cfg, &t.seeds, &starts, ctx.cfg.raw.run.steps)?;
    eprintln!(
        "mean terminal error: warm {:.4}, cold {:.4}",
        report.warm_mean(),
        report.cold_mean()
    );
    let mut out = ctx.output()?;
    out.write("warmstart.csv", report.to_csv().as_bytes())?;
    for run in &report.runs {
        out.write(&format!("warm_training_{}.csv", run.seed), run.warm_log.to_csv().as_bytes())?;
        out.write(&format!("cold_training_{}.csv", run.seed), run.cold_log.to_csv().as_bytes())?;
    }
    ctx.finish(out, "warmstart-compare")
}
