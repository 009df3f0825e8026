//! Command-line front end: `forward`, `induction`, `lens train|infer` and `profile`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing prerequisite
//! artifact, 1 anything else.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::hooks::{FlexWrapper, HookFunction};
use crate::induction::{classify_heads, sample_repeated_sequence, score_all_heads, write_loss_csv};
use crate::lenses::{
    collect_lens_data, load_probes, prediction_table, save_probes, train_probes, KlDirection, LensTrainConfig,
    Probe, ProbeFileHeader,
};
use crate::mesh::{DeviceMesh, OffloadMode};
use crate::parallel::{
    build_synthetic_induction_model, AlternatingLinearModel, DenseParams, ModelInput, TokenBatch, ToyTransformer,
    ToyTransformerConfig,
};
use crate::profiler::{
    calibrate, profile_scenarios, write_reports_json, write_summary_csv, write_table_csv, CostModel, ProfileSetup,
    StepLedger,
};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;

const PROBE_FILE: &str = "probes.lens";
const LENS_SEQ: usize = 24;
const LENS_BATCH: usize = 8;
const INDUCTION_BETA: f64 = 20.0;
const INDUCTION_GAMMA: f64 = 10.0;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error(transparent)]
    Run(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Missing(_) => EXIT_MISSING,
            CliError::Run(e) => match e {
                Error::Config(_)
                | Error::UnknownModule { .. }
                | Error::UnknownParameter { .. }
                | Error::ShapeInference(_)
                | Error::Calibration(_) => EXIT_CONFIG,
                _ => EXIT_INTERNAL,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    Toy,
    SyntheticInduction,
    Alternating32,
}

#[derive(Parser, Debug)]
#[command(name = "flexmesh", version, about = "Hooked forwards, induction scores, lenses and profiling on a simulated device mesh")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    #[arg(long, global = true)]
    pub dp: Option<usize>,
    #[arg(long, global = true)]
    pub tp: Option<usize>,
    #[arg(long, global = true)]
    pub pp: Option<usize>,
    /// `dp,tp,pp`; explicit --dp/--tp/--pp win.
    #[arg(long, global = true)]
    pub mesh: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub model: Option<ModelChoice>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub offload: Option<OffloadMode>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON file with any of the flag values; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Hooked forward retrieving every site; exports the store and ledger.
    Forward,
    /// Repeated-sequence experiment on the synthetic induction model.
    Induction(InductionArgs),
    /// Tuned-lens probes.
    Lens {
        #[command(subcommand)]
        action: LensAction,
    },
    /// Cost-model estimates for the four offload scenarios.
    Profile(ProfileArgs),
}

#[derive(Args, Debug, Default)]
pub struct InductionArgs {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum LensAction {
    Train(LensTrainArgs),
    Infer(LensInferArgs),
}

#[derive(Args, Debug, Default)]
pub struct LensTrainArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub direction: Option<KlDirection>,
}

#[derive(Args, Debug, Default)]
pub struct LensInferArgs {
    /// Probe file; defaults to `<out>/probes.lens`.
    #[arg(long)]
    pub probes: Option<PathBuf>,
    /// Use identity probes, which gives the plain logit lens.
    #[arg(long)]
    pub identity_probes: bool,
}

#[derive(Args, Debug, Default)]
pub struct ProfileArgs {
    /// Four target step times to refit the coefficients against.
    #[arg(long, value_delimiter = ',')]
    pub calibrate: Option<Vec<f64>>,
}

/// Values a JSON config file may set.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dp: Option<usize>,
    pub tp: Option<usize>,
    pub pp: Option<usize>,
    pub model: Option<ModelChoice>,
    pub seed: Option<u64>,
    pub offload: Option<OffloadMode>,
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
    pub vocab: Option<usize>,
    pub threshold: Option<f64>,
    pub lr: Option<f64>,
    pub steps: Option<usize>,
    pub direction: Option<KlDirection>,
    pub calibrate: Option<Vec<f64>>,
}

/// Fully resolved settings of one invocation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub dp: usize,
    pub tp: usize,
    pub pp: usize,
    pub model: ModelChoice,
    pub seed: u64,
    pub offload: OffloadMode,
    pub out: PathBuf,
    pub k: usize,
    pub vocab: usize,
    pub threshold: f64,
    pub lr: f64,
    pub steps: usize,
    pub direction: KlDirection,
    pub calibrate: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn mesh(&self) -> CliResult<DeviceMesh> {
        DeviceMesh::new(self.dp, self.tp, self.pp).map_err(|e| CliError::Config(e.to_string()))
    }
}

fn parse_mesh(s: &str) -> CliResult<(usize, usize, usize)> {
    let parts: Vec<_> = s.split(',').map(|p| p.trim().parse::<usize>()).collect();
    match parts.as_slice() {
        [Ok(d), Ok(t), Ok(p)] => Ok((*d, *t, *p)),
        _ => Err(CliError::Config(format!("--mesh wants `dp,tp,pp`, got `{s}`"))),
    }
}

fn default_model(cmd: &Command) -> ModelChoice {
    match cmd {
        Command::Forward | Command::Lens { .. } => ModelChoice::Toy,
        Command::Induction(_) => ModelChoice::SyntheticInduction,
        Command::Profile(_) => ModelChoice::Alternating32,
    }
}

pub fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let file = match &cli.common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Missing(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<FileConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let c = &cli.common;
    let from_mesh = c.mesh.as_deref().map(parse_mesh).transpose()?;
    let pick = |flag: Option<usize>, m: Option<usize>, f: Option<usize>, d: usize| flag.or(m).or(f).unwrap_or(d);
    // Profiling defaults to the four-way TP mesh of the reference measurements.
    let default_tp = match cli.command {
        Command::Profile(_) => ProfileSetup::default().tp,
        _ => 1,
    };
    let (ind, train, cal) = match &cli.command {
        Command::Induction(a) => (Some(a), None, None),
        Command::Lens {
            action: LensAction::Train(a),
        } => (None, Some(a), None),
        Command::Profile(a) => (None, None, Some(a)),
        _ => (None, None, None),
    };
    let cfg = RunConfig {
        dp: pick(c.dp, from_mesh.map(|m| m.0), file.dp, 1),
        tp: pick(c.tp, from_mesh.map(|m| m.1), file.tp, default_tp),
        pp: pick(c.pp, from_mesh.map(|m| m.2), file.pp, 1),
        model: c.model.or(file.model).unwrap_or_else(|| default_model(&cli.command)),
        seed: c.seed.or(file.seed).unwrap_or(0),
        offload: c.offload.or(file.offload).unwrap_or_default(),
        out: c.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("flexmesh-out")),
        k: ind.and_then(|a| a.k).or(file.k).unwrap_or(50),
        vocab: ind.and_then(|a| a.vocab).or(file.vocab).unwrap_or(64),
        threshold: ind.and_then(|a| a.threshold).or(file.threshold).unwrap_or(0.9),
        lr: train.and_then(|a| a.lr).or(file.lr).unwrap_or(LensTrainConfig::default().lr),
        steps: train.and_then(|a| a.steps).or(file.steps).unwrap_or(LensTrainConfig::default().steps),
        direction: train.and_then(|a| a.direction).or(file.direction).unwrap_or_default(),
        calibrate: cal.and_then(|a| a.calibrate.clone()).or(file.calibrate),
    };
    Ok(cfg)
}

/// Parses `args` (program name first), runs the subcommand and returns the exit code.
pub fn run_from_args<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve(cli)?;
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::Config(format!("cannot create {}: {e}", cfg.out.display())))?;
    match &cli.command {
        Command::Forward => cmd_forward(&cfg),
        Command::Induction(_) => cmd_induction(&cfg),
        Command::Lens {
            action: LensAction::Train(_),
        } => cmd_lens_train(&cfg),
        Command::Lens {
            action: LensAction::Infer(a),
        } => cmd_lens_infer(&cfg, a),
        Command::Profile(_) => cmd_profile(&cfg),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Run(e.into()))
}

fn toy_model(cfg: &RunConfig) -> CliResult<(ToyTransformerConfig, DenseParams<f64>)> {
    match cfg.model {
        ModelChoice::Toy => {
            let tc = ToyTransformerConfig::default();
            let dense = tc.init_dense(cfg.seed)?;
            Ok((tc, dense))
        }
        ModelChoice::SyntheticInduction => {
            let m = build_synthetic_induction_model(cfg.vocab, 2 * cfg.k, INDUCTION_BETA, INDUCTION_GAMMA)?;
            Ok((m.config, m.params))
        }
        ModelChoice::Alternating32 => Err(CliError::Config("this subcommand needs a transformer model".into())),
    }
}

fn wrap_toy(
    cfg: &RunConfig,
    tc: &ToyTransformerConfig,
    dense: &DenseParams<f64>,
) -> CliResult<FlexWrapper<f64, ToyTransformer<f64>>> {
    let mesh = cfg.mesh()?;
    tc.validate(&mesh)?;
    let models = ToyTransformer::shard_all(tc, dense, &mesh)?;
    Ok(FlexWrapper::wrap(models, mesh, cfg.offload)?)
}

/// Smallest batch of at least 2 that the DP axis divides.
fn batch_for(dp: usize) -> usize {
    2usize.div_ceil(dp) * dp
}

fn random_tokens(seed: u64, stream: &str, batch: usize, seq: usize, vocab: usize) -> CliResult<TokenBatch> {
    let mut rng = RngStream::derive(seed, stream);
    let ids = (0..batch * seq).map(|_| rng.below(vocab)).collect();
    Ok(TokenBatch::new(batch, seq, ids)?)
}

fn cmd_forward(cfg: &RunConfig) -> CliResult<()> {
    let out = match cfg.model {
        ModelChoice::Alternating32 => forward_alternating(cfg)?,
        _ => {
            let (tc, dense) = toy_model(cfg)?;
            let mut wrapper = wrap_toy(cfg, &tc, &dense)?;
            let batch = batch_for(cfg.dp);
            let seq = tc.seq_len;
            for site in tc.site_names() {
                let shape = tc
                    .site_shape(&site, batch, seq)
                    .expect("every listed site has a shape");
                wrapper.register_hook_function(HookFunction::new(site, shape.into_iter().map(Some).collect()))?;
            }
            let input = ModelInput::Tokens(random_tokens(cfg.seed, "cli.forward", batch, seq, tc.vocab)?);
            let fwd = wrapper.forward(&input)?;
            (wrapper.store().export(&cfg.out.join("activations"))?.len(), fwd.output, fwd.ledger)
        }
    };
    let (n, logits, ledger) = out;
    logits.save(cfg.out.join("output.tensor"))?;
    write(&cfg.out.join("ledger.json"), ledger.to_json())?;
    println!("retrieved {n} activations into {}", cfg.out.join("activations").display());
    Ok(())
}

fn forward_alternating(cfg: &RunConfig) -> CliResult<(usize, Tensor<f64>, crate::mesh::CommLedger)> {
    if cfg.dp != 1 || cfg.pp != 1 {
        return Err(CliError::Config("the alternating model runs on a TP-only mesh".into()));
    }
    let setup = ProfileSetup {
        tp: cfg.tp,
        seed: cfg.seed,
        ..ProfileSetup::default()
    };
    let mesh = cfg.mesh()?;
    let models = AlternatingLinearModel::<f64>::shard_all(setup.n_layers, setup.d_model, &mesh, cfg.seed)?;
    let mut wrapper = FlexWrapper::wrap(models, mesh, cfg.offload)?;
    for l in 0..setup.n_layers {
        wrapper.register_hook_function(HookFunction::new(
            format!("layers.{l}"),
            vec![Some(setup.batch), Some(setup.seq), Some(setup.d_model)],
        ))?;
    }
    let mut rng = RngStream::derive(cfg.seed, "cli.forward");
    let x = Tensor::from_fn(&[setup.batch, setup.seq, setup.d_model], |_| rng.uniform(-1.0, 1.0))?;
    let fwd = wrapper.forward(&ModelInput::Dense(x))?;
    let n = wrapper.store().export(&cfg.out.join("activations"))?.len();
    Ok((n, fwd.output, fwd.ledger))
}

fn cmd_induction(cfg: &RunConfig) -> CliResult<()> {
    if cfg.model != ModelChoice::SyntheticInduction {
        return Err(CliError::Config("induction runs on --model synthetic-induction".into()));
    }
    if !(cfg.threshold > 0.0) {
        return Err(CliError::Config(format!("threshold must be positive, got {}", cfg.threshold)));
    }
    let seq = sample_repeated_sequence(cfg.k, cfg.vocab, cfg.seed)?;
    let (tc, dense) = toy_model(cfg)?;
    let mut wrapper = wrap_toy(cfg, &tc, &dense)?;
    let run = score_all_heads(&mut wrapper, &seq, tc.n_layers, tc.n_heads, tc.vocab)?;
    write_loss_csv(&run.loss, &cfg.out.join("per_token_loss.csv"))?;
    run.grid.write_csv(&cfg.out.join("induction_scores.csv"))?;
    let heads = classify_heads(&run.grid, cfg.threshold)?;
    write(
        &cfg.out.join("induction_heads.json"),
        serde_json::to_string_pretty(&heads).map_err(Error::from)?,
    )?;
    print!("{}", run.grid.ascii_heatmap());
    println!(
        "loss first half {:.4}, second half {:.4}; {} head(s) >= {}",
        run.first_half_loss(cfg.k),
        run.second_half_loss(cfg.k),
        heads.len(),
        cfg.threshold
    );
    Ok(())
}

fn lens_tokens(cfg: &RunConfig, vocab: usize) -> CliResult<TokenBatch> {
    let batch = LENS_BATCH.div_ceil(cfg.dp) * cfg.dp;
    random_tokens(cfg.seed, "cli.lens.corpus", batch, LENS_SEQ, vocab)
}

fn cmd_lens_train(cfg: &RunConfig) -> CliResult<()> {
    let (tc, dense) = toy_model(cfg)?;
    let mut wrapper = wrap_toy(cfg, &tc, &dense)?;
    let tokens = lens_tokens(cfg, tc.vocab)?;
    let data = collect_lens_data(&mut wrapper, &tokens, tc.n_layers, tc.d_model, tc.vocab, tc.eps)?;
    let tcfg = LensTrainConfig {
        lr: cfg.lr,
        steps: cfg.steps,
        direction: cfg.direction,
    };
    let trained = train_probes(&data, &tcfg)?;
    let header = ProbeFileHeader {
        n_layers: tc.n_layers,
        d_model: tc.d_model,
        vocab: tc.vocab,
        norm_eps: tc.eps,
        direction: cfg.direction,
    };
    save_probes(&cfg.out.join(PROBE_FILE), &header, &trained.probes)?;

    let mut w = csv::Writer::from_path(cfg.out.join("lens_loss.csv")).map_err(Error::from)?;
    let mut head = vec!["step".to_string()];
    head.extend((0..tc.n_layers).map(|l| format!("layer{l}")));
    w.write_record(&head).map_err(Error::from)?;
    for step in 0..=cfg.steps {
        let mut row = vec![step.to_string()];
        row.extend(trained.loss_curves.iter().map(|c| c[step].to_string()));
        w.write_record(&row).map_err(Error::from)?;
    }
    w.flush().map_err(|e| CliError::Run(e.into()))?;
    println!(
        "mean KL {:.6} -> {:.6} over {} steps",
        trained.mean_initial_loss(),
        trained.mean_final_loss(),
        cfg.steps
    );
    Ok(())
}

fn cmd_lens_infer(cfg: &RunConfig, args: &LensInferArgs) -> CliResult<()> {
    let (tc, dense) = toy_model(cfg)?;
    let probes: Vec<Probe> = if args.identity_probes {
        (0..tc.n_layers).map(|l| Probe::identity(l, tc.d_model)).collect::<Result<_, _>>()?
    } else {
        let path = args.probes.clone().unwrap_or_else(|| cfg.out.join(PROBE_FILE));
        if !path.is_file() {
            return Err(CliError::Missing(format!(
                "probe file {} not found; run `lens train` first",
                path.display()
            )));
        }
        let (header, probes) = load_probes(&path)?;
        if header.n_layers != tc.n_layers || header.d_model != tc.d_model || header.vocab != tc.vocab {
            return Err(CliError::Config(format!(
                "probe file is for {} layers, d={}, V={}",
                header.n_layers, header.d_model, header.vocab
            )));
        }
        probes
    };
    let mut wrapper = wrap_toy(cfg, &tc, &dense)?;
    let tokens = lens_tokens(cfg, tc.vocab)?;
    let data = collect_lens_data(&mut wrapper, &tokens, tc.n_layers, tc.d_model, tc.vocab, tc.eps)?;
    // First sequence of the corpus only.
    let s = tokens.seq();
    let hidden: Vec<Tensor<f64>> = data
        .hidden
        .iter()
        .map(|h| h.narrow(0, 0, s))
        .collect::<Result<_, _>>()?;
    let grid = prediction_table(&hidden, &probes, &data.head, &data.final_logits.narrow(0, 0, s)?)?;
    let ids = &tokens.ids()[..s];

    let mut labels: Vec<String> = (0..tc.n_layers).map(|l| format!("L{l}")).collect();
    labels.push("OUT".into());
    let mut w = csv::Writer::from_path(cfg.out.join("lens_grid.csv")).map_err(Error::from)?;
    let mut head = vec!["row".to_string()];
    head.extend((0..s).map(|p| p.to_string()));
    w.write_record(&head).map_err(Error::from)?;
    let tgt: Vec<String> = (0..s)
        .map(|p| ids.get(p + 1).map_or_else(|| "-".to_string(), |t| t.to_string()))
        .collect();
    let mut rows: Vec<(String, Vec<String>)> = vec![
        ("POS".into(), (0..s).map(|p| p.to_string()).collect()),
        ("TOK".into(), ids.iter().map(|t| t.to_string()).collect()),
        ("TGT".into(), tgt),
    ];
    for (label, r) in labels.into_iter().zip(&grid) {
        rows.push((label, r.iter().map(|t| t.to_string()).collect()));
    }
    for (label, r) in &rows {
        let mut rec = vec![label.clone()];
        rec.extend(r.iter().cloned());
        w.write_record(&rec).map_err(Error::from)?;
    }
    w.flush().map_err(|e| CliError::Run(e.into()))?;

    let width = rows
        .iter()
        .flat_map(|(_, r)| r.iter().map(String::len))
        .max()
        .unwrap_or(1);
    let mut text = String::new();
    for (label, r) in &rows {
        let _ = write!(text, "{label:<4}");
        for cell in r {
            let _ = write!(text, " {cell:>width$}");
        }
        text.push('\n');
    }
    write(&cfg.out.join("lens_grid.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_profile(cfg: &RunConfig) -> CliResult<()> {
    if cfg.model != ModelChoice::Alternating32 {
        return Err(CliError::Config("profile runs on --model alternating32".into()));
    }
    if cfg.dp != 1 || cfg.pp != 1 {
        return Err(CliError::Config("profile runs on a TP-only mesh".into()));
    }
    let setup = ProfileSetup {
        tp: cfg.tp,
        seed: cfg.seed,
        ..ProfileSetup::default()
    };
    if setup.d_model % setup.tp != 0 {
        return Err(CliError::Config(format!("tp={} does not divide d={}", setup.tp, setup.d_model)));
    }
    let mut cost = CostModel::SHIPPED;
    let mut reports = profile_scenarios(&setup, &cost)?;
    if let Some(targets) = &cfg.calibrate {
        if targets.len() != reports.len() {
            return Err(CliError::Config(format!(
                "--calibrate wants {} times, got {}",
                reports.len(),
                targets.len()
            )));
        }
        let steps: Vec<StepLedger> = reports.iter().map(|r| r.step).collect();
        let fit = calibrate(&steps, targets, 0.0)?;
        println!("calibration residual {:e}", fit.residual);
        cost = fit.model;
        reports = profile_scenarios(&setup, &cost)?;
    }
    write_reports_json(&reports, &cost, &cfg.out.join("profile.json"))?;
    write_summary_csv(&reports, &cfg.out.join("summary.csv"))?;
    write_table_csv(&reports, &cfg.out.join("table.csv"))?;
    let base = reports[0].estimated_time;
    for r in &reports {
        println!(
            "{:<9} {:>10.4} s  x{:<6.2} hook all-gathers {}",
            r.scenario,
            r.estimated_time,
            r.estimated_time / base,
            r.n_hook_all_gather_tp
        );
    }
    Ok(())
}
