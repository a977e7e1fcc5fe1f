use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use skipmid::config::RunConfig;
use skipmid::data::{tokenize_bytes, TokenFile};
use skipmid::flops::FlopsReport;
use skipmid::gradcheck::{gradcheck, GradcheckSetup};
use skipmid::model::{mirrored_layer, Mode, Model, TransformerConfig};
use skipmid::train::{evaluate, load_model, EvalResult, StepMetrics, Trainer};
use skipmid::{Error, Result};

#[derive(Parser)]
#[command(name = "skipmid", version, about = "Train and inspect middle-out layer-skipping Transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a text file into a byte-level token file.
    Tokenize {
        input: PathBuf,
        output: PathBuf,
    },
    /// Train from a configuration file.
    Train(TrainArgs),
    /// Validation cross-entropy and gate sparsity of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        /// Forward pass to use; defaults to skip for gated models.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[command(flatten)]
        window: WindowArgs,
    },
    /// Parameter counts and forward FLOPs.
    Flops(FlopsArgs),
    /// Compare analytic and finite-difference gradients of the full loss.
    Gradcheck(GradcheckArgs),
    /// Per-token gate table of a gated checkpoint on some text.
    InspectGates {
        checkpoint: PathBuf,
        /// Text file to run; with --literal, the text itself.
        input: String,
        #[arg(long)]
        literal: bool,
        #[arg(long, default_value_t = 64)]
        max_tokens: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
    /// Token file; overrides run.corpus_path.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory; overrides run.out_dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue from a checkpoint written with the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print a progress line every this many steps (0 for none).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args)]
struct WindowArgs {
    /// Evaluate only the tail fraction held out by the stored configuration.
    #[arg(long)]
    val_split: bool,
    /// Window length; defaults to the stored data.seq_len.
    #[arg(long)]
    seq_len: Option<usize>,
    /// At most this many windows (0 for all).
    #[arg(long, default_value_t = 0)]
    windows: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

#[derive(Args)]
struct FlopsArgs {
    /// Configuration to account; sparsities come from --sparsity.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    config: Option<PathBuf>,
    /// First-half gate sparsities, comma separated (mirrored to all layers).
    #[arg(long, value_delimiter = ',', requires = "config")]
    sparsity: Vec<f64>,
    /// Checkpoint whose measured sparsity on --data is accounted.
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    window: WindowArgs,
    /// Print a CSV header and row instead of key-value lines.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    kv_heads: usize,
    #[arg(long, default_value_t = 16)]
    vocab: usize,
    #[arg(long, default_value_t = 6)]
    seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Dense,
    Multiply,
    Skip,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Dense => Mode::Dense,
            ModeArg::Multiply => Mode::GatedMultiply,
            ModeArg::Skip => Mode::GatedSkip,
        }
    }
}

/// Outcome of a subcommand that ran to completion but failed its check.
struct CheckFailed(String);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(CheckFailed(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            let usage = e.is_config() || matches!(e, Error::Io(_));
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<std::result::Result<(), CheckFailed>> {
    match command {
        Command::Tokenize { input, output } => tokenize(&input, &output)?,
        Command::Train(args) => train(args)?,
        Command::Eval { checkpoint, data, mode, window } => eval(&checkpoint, &data, mode, &window)?,
        Command::Flops(args) => flops(args)?,
        Command::Gradcheck(args) => return check_gradients(args),
        Command::InspectGates {
            checkpoint,
            input,
            literal,
            max_tokens,
        } => inspect_gates(&checkpoint, &input, literal, max_tokens)?,
    }
    Ok(Ok(()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn tokenize(input: &Path, output: &Path) -> Result<()> {
    let file = TokenFile::from_bytes(&read(input)?);
    file.save(output)?;
    println!("wrote {} tokens to {}", file.len(), output.display());
    Ok(())
}

fn check_vocab(corpus: &TokenFile, model: &TransformerConfig) -> Result<()> {
    if corpus.vocab_size() > model.vocab_size {
        return Err(Error::Config(format!(
            "token file vocabulary {} exceeds model.vocab_size {}",
            corpus.vocab_size(),
            model.vocab_size
        )));
    }
    Ok(())
}

fn progress(m: &StepMetrics, e: Option<&EvalResult>, every: u64) {
    if let Some(e) = e {
        println!("step {} val_ce {:.4} val_z {:.4}", m.step, e.ce, e.report.overall);
    }
    if every > 0 && (m.step + 1).is_multiple_of(every) {
        let z = m.z.iter().sum::<f64>() / m.z.len().max(1) as f64;
        println!(
            "step {} lr {:.3e} ce {:.4} reg {:+.5} z {:.4}",
            m.step + 1,
            m.lr,
            m.loss_ce,
            m.loss_reg,
            z
        );
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(c) = &args.corpus {
        cfg.run.corpus_path = c.display().to_string();
    }
    if let Some(o) = &args.out_dir {
        cfg.run.out_dir = o.display().to_string();
    }
    let corpus = TokenFile::load(Path::new(&cfg.run.corpus_path))?;
    check_vocab(&corpus, &cfg.model)?;
    let (train, val) = corpus.split(cfg.data.val_fraction)?;
    let out = PathBuf::from(&cfg.run.out_dir);
    let mut trainer = match &args.resume {
        Some(ck) => Trainer::load(ck, Some(&cfg))?,
        None => Trainer::new(cfg.clone())?,
    };
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.toml"), cfg.canonical_text()?)?;
    println!(
        "training {} steps from step {} on {} tokens ({} held out)",
        cfg.run.total_steps,
        trainer.step,
        train.len(),
        val.len()
    );
    let every = args.log_every;
    let summary = trainer.run_observed(train.tokens(), val.tokens(), Some(&out), None, |m, e| progress(m, e, every))?;
    println!(
        "val_ce {:.4} z {:.4} gated_flops {} dense_flops {}",
        summary.final_eval.ce, summary.final_eval.report.overall, summary.flops.gated_flops, summary.flops.dense_flops
    );
    println!("wrote {}", out.display());
    Ok(())
}

/// Loads a checkpoint and the evaluation tokens it should be run on.
fn eval_inputs(checkpoint: &Path, data: &Path, window: &WindowArgs) -> Result<(RunConfig, Model<f32>, TokenFile)> {
    let (cfg, model) = load_model(checkpoint)?;
    let mut tokens = TokenFile::load(data)?;
    check_vocab(&tokens, &cfg.model)?;
    if window.val_split {
        tokens = tokens.split(cfg.data.val_fraction)?.1;
    }
    Ok((cfg, model, tokens))
}

fn run_eval(cfg: &RunConfig, model: &Model<f32>, tokens: &TokenFile, mode: Mode, w: &WindowArgs) -> Result<EvalResult> {
    let seq = w.seq_len.unwrap_or(cfg.data.seq_len);
    evaluate(model, tokens.tokens(), seq, w.batch, w.windows, mode)
}

fn default_mode(model: &Model<f32>) -> Mode {
    if model.is_gated() {
        Mode::GatedSkip
    } else {
        Mode::Dense
    }
}

fn eval(checkpoint: &Path, data: &Path, mode: Option<ModeArg>, window: &WindowArgs) -> Result<()> {
    let (cfg, model, tokens) = eval_inputs(checkpoint, data, window)?;
    let mode = mode.map_or_else(|| default_mode(&model), Mode::from);
    let r = run_eval(&cfg, &model, &tokens, mode, window)?;
    println!("mode = {mode:?}");
    println!("ce = {}", r.ce);
    println!("tokens = {}", r.tokens);
    println!("windows = {}", r.windows);
    println!("sparsity = {}", r.report.overall);
    for (l, z) in r.report.layer_sparsity.iter().enumerate() {
        println!("z_{l} = {z}");
    }
    Ok(())
}

fn flops(args: FlopsArgs) -> Result<()> {
    let report = match (&args.config, &args.checkpoint, &args.data) {
        (Some(path), _, _) => {
            let cfg = RunConfig::load(path)?;
            let m = &cfg.model;
            let half = m.gate_layers();
            let z: Vec<f64> = match args.sparsity.len() {
                0 => vec![0.0; m.n_layers],
                n if n == half && cfg.gating.enabled => {
                    (0..m.n_layers).map(|l| args.sparsity[mirrored_layer(l, m.n_layers)]).collect()
                }
                n => {
                    return Err(Error::Config(format!(
                        "--sparsity takes {half} values for a gated {}-layer model, got {n}",
                        m.n_layers
                    )))
                }
            };
            let seq = args.window.seq_len.unwrap_or(cfg.data.seq_len);
            FlopsReport::new(m, cfg.gating.enabled, seq, &z, None)?
        }
        (None, Some(ck), Some(data)) => {
            let (cfg, model, tokens) = eval_inputs(ck, data, &args.window)?;
            let r = run_eval(&cfg, &model, &tokens, default_mode(&model), &args.window)?;
            let seq = args.window.seq_len.unwrap_or(cfg.data.seq_len);
            FlopsReport::new(&cfg.model, model.is_gated(), seq, &r.report.layer_sparsity, Some(&r.loads))?
        }
        _ => return Err(Error::Config("flops needs --config, or --checkpoint with --data".into())),
    };
    if args.csv {
        println!("{}\n{}", report.csv_header(), report.csv_row());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn check_gradients(a: GradcheckArgs) -> Result<std::result::Result<(), CheckFailed>> {
    let setup = GradcheckSetup {
        model: TransformerConfig::toy(a.dim, a.layers, a.heads, a.kv_heads, a.vocab),
        seq_len: a.seq_len,
        seed: a.seed,
    };
    let r = gradcheck(&setup)?;
    println!("checked = {}", r.checked);
    println!("max_rel_error = {:e}", r.max_rel_error);
    println!("worst = {}", r.worst);
    println!("kink_distance = {:e}", r.kink_distance);
    println!("zero_gates = {}", r.zero_gates);
    if r.max_rel_error < a.tolerance {
        println!("PASS");
        Ok(Ok(()))
    } else {
        println!("FAIL");
        Ok(Err(CheckFailed(format!(
            "max relative error {:e} exceeds {:e}",
            r.max_rel_error, a.tolerance
        ))))
    }
}

fn escape(byte: usize) -> String {
    match u8::try_from(byte) {
        Ok(b) if b.is_ascii_graphic() => (b as char).to_string(),
        Ok(b' ') => "\u{2423}".into(),
        Ok(b) => format!("\\x{b:02x}"),
        Err(_) => format!("<{byte}>"),
    }
}

fn inspect_gates(checkpoint: &Path, input: &str, literal: bool, max_tokens: usize) -> Result<()> {
    let (_, model) = load_model(checkpoint)?;
    if !model.is_gated() {
        return Err(Error::Config("checkpoint has no gate probes".into()));
    }
    let bytes = if literal { input.as_bytes().to_vec() } else { read(Path::new(input))? };
    let limit = max_tokens.min(model.config.max_seq_len);
    let ids: Vec<usize> = tokenize_bytes(&bytes).into_iter().take(limit).map(usize::from).collect();
    if ids.is_empty() {
        return Err(Error::Config("no input tokens".into()));
    }
    let out = model.forward(&ids, 1, Mode::GatedMultiply)?;
    let tr = &out.trace;
    let half = model.config.gate_layers();
    let mut header = vec!["pos".to_string(), "token".into()];
    header.extend((0..half).map(|l| format!("s_{l}")));
    header.extend((0..half).map(|l| format!("g_{l}")));
    header.push("blocks".into());
    println!("{}", header.join("\t"));
    for (t, &id) in ids.iter().enumerate() {
        let mut row = vec![t.to_string(), escape(id)];
        row.extend((0..half).map(|l| format!("{:.3}", tr.soft_mask[l][t])));
        row.extend((0..half).map(|l| format!("{:.3}", tr.gates[l][t])));
        let blocks = (0..model.config.n_layers).filter(|&l| tr.gates[l][t] > 0.0).count();
        row.push(blocks.to_string());
        println!("{}", row.join("\t"));
    }
    Ok(())
}
