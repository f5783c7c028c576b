use std::net::TcpListener;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use splitcomm::experiment::{
    self, anchor_rows, cmd_size_table, cmd_sweep_alpha, cmd_toy, cmd_train, write_json, write_size_csv,
    write_toy_csv, write_train_output, ExperimentConfig, RunRecord, SizeRow, TrainOutput, TransportKind,
};
use splitcomm::protocol::TcpTransport;
use splitcomm::toy;

#[derive(Parser, Debug)]
#[command(name = "splitcomm", version, about = "Split learning with compressed cut-layer traffic")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Two-neuron example where top-1 gets stuck and RandTop-1 escapes
    Toy(ToyArgs),
    /// Train the split model, repeated over consecutive seeds
    Train(TrainArgs),
    /// Train with RandTopk over a grid of alpha values
    SweepAlpha(SweepArgs),
    /// Compressed-size ratios of size reduction, top-k and quantization
    SizeTable(SizeArgs),
}

#[derive(Args, Debug)]
struct ToyArgs {
    /// Comma-separated alphas; 0 is plain top-1
    #[arg(long, value_delimiter = ',', default_value = "0,0.1")]
    alpha: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trajectory sampling interval in steps
    #[arg(long, default_value_t = 10)]
    record_every: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TransportArg {
    Inproc,
    Tcp,
}

/// Flags shared by `train` and `sweep-alpha`; each overrides the config file.
#[derive(Args, Debug)]
struct RunArgs {
    /// Flat JSON experiment config
    #[arg(long)]
    config: Option<PathBuf>,
    /// none, sr, quant, topk, randtopk or l1
    #[arg(long)]
    codec: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    transport: Option<TransportArg>,
    /// Run only the label owner, waiting for one feature owner on this address
    #[arg(long, conflicts_with = "connect")]
    listen: Option<String>,
    /// Run only the feature owner, connecting to a listening label owner
    #[arg(long)]
    connect: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(c) = &self.codec {
            cfg.codec = experiment::parse_codec_name(c)?.into();
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            )*};
        }
        set!(k, alpha, bits, lambda, epochs, seed, repeats);
        if let Some(t) = self.transport {
            cfg.transport = match t {
                TransportArg::Inproc => TransportKind::Inproc,
                TransportArg::Tcp => TransportKind::Tcp,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated alpha grid
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.2,0.3,1.0")]
    alphas: Vec<f64>,
}

#[derive(Args, Debug)]
struct SizeArgs {
    #[arg(long, value_delimiter = ',', default_value = "128,300,600,1280")]
    d: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2,3")]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
    b: Vec<u32>,
    /// Bits per transmitted value
    #[arg(long = "value-bits", default_value_t = 32)]
    value_bits: u32,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPLITCOMM_LOG", "warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Toy(args) => toy(args),
        Command::Train(args) => train(args),
        Command::SweepAlpha(args) => sweep(args),
        Command::SizeTable(args) => size_table(args),
    }
}

fn toy(args: ToyArgs) -> Result<()> {
    let runs = cmd_toy(&args.alpha, args.steps, args.lr, args.seed, args.record_every)?;
    println!("{:>6} {:>12} {:>12} {:>12} {:>8}", "alpha", "w1", "w2", "loss", "escaped");
    for r in &runs {
        let escaped = r.final_loss < toy::L_ESCAPE && r.final_w[1] < -1.0;
        println!(
            "{:>6} {:>12.6} {:>12.6} {:>12.6} {:>8}",
            r.alpha, r.final_w[0], r.final_w[1], r.final_loss, escaped
        );
    }
    if let Some(dir) = args.out {
        std::fs::create_dir_all(&dir)?;
        write_toy_csv(&dir.join("toy_trajectory.csv"), &runs)?;
        write_json(&dir.join("toy.json"), &runs)?;
    }
    Ok(())
}

fn print_record(label: &str, r: &RunRecord) {
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
    println!(
        "{label}: test accuracy {} (std {}) | size fwd {:.2}% bwd {:.2}% | measured fwd {:.2}% bwd {:.2}% | diverged {}/{} | {:.1}s",
        pct(r.test_accuracy_mean),
        pct(r.test_accuracy_std),
        100.0 * r.compressed_size.forward,
        100.0 * r.compressed_size.backward,
        100.0 * r.measured_forward_ratio,
        100.0 * r.measured_backward_ratio,
        r.diverged,
        r.seeds.len(),
        r.wall_clock_seconds,
    );
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = args.run.config()?;
    if let Some(addr) = &args.run.listen {
        return serve_labels(&cfg, addr, args.run.out.as_deref());
    }
    if let Some(addr) = &args.run.connect {
        return serve_features(&cfg, addr);
    }
    let out = cmd_train(&cfg)?;
    print_record(&cfg.codec, &out.record);
    if let Some(dir) = &args.run.out {
        write_train_output(dir, &out)?;
    }
    Ok(())
}

/// Label-owner process: accepts one feature owner and trains every repeat
/// over that connection.
fn serve_labels(cfg: &ExperimentConfig, addr: &str, out: Option<&Path>) -> Result<()> {
    let ds = cfg.load_dataset()?;
    let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
    log::info!("label owner listening on {}", listener.local_addr()?);
    let mut transport = TcpTransport::accept(&listener)?;
    let start = std::time::Instant::now();
    let mut repeats = Vec::new();
    for seed in cfg.seeds() {
        repeats.push(experiment::serve_label_owner(cfg, &ds, seed, &mut transport)?);
    }
    let record = RunRecord::aggregate(cfg, repeats, start.elapsed().as_secs_f64())?;
    print_record(&cfg.codec, &record);
    if let Some(dir) = out {
        // the models live in two processes, so there is no analysis here
        write_train_output(
            dir,
            &TrainOutput {
                record,
                analyses: Vec::new(),
            },
        )?;
    }
    Ok(())
}

fn serve_features(cfg: &ExperimentConfig, addr: &str) -> Result<()> {
    let ds = cfg.load_dataset()?;
    let mut transport = TcpTransport::connect(addr).with_context(|| format!("connecting to {addr}"))?;
    for seed in cfg.seeds() {
        experiment::serve_feature_owner(cfg, &ds, seed, &mut transport)?;
    }
    println!("feature owner finished {} repeat(s)", cfg.repeats);
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    if args.run.listen.is_some() || args.run.connect.is_some() {
        bail!("sweep-alpha runs both parties in this process; drop --listen/--connect");
    }
    let mut cfg = args.run.config()?;
    if args.run.codec.is_none() && args.run.config.is_none() {
        cfg.codec = "randtopk".into();
    }
    let rows = cmd_sweep_alpha(&cfg, &args.alphas)?;
    for (alpha, out) in &rows {
        print_record(&format!("alpha {alpha}"), &out.record);
        if let Some(dir) = &args.run.out {
            write_train_output(&dir.join(format!("alpha_{alpha}")), out)?;
        }
    }
    if let Some(dir) = &args.run.out {
        let table: Vec<_> = rows.iter().map(|(a, o)| (a, &o.record)).collect();
        write_json(&dir.join("sweep.json"), &table)?;
    }
    Ok(())
}

fn print_sizes(rows: &[SizeRow]) {
    println!("{:<16} {:>6} {:>4} {:>5} {:>10} {:>10}", "method", "d", "k", "bits", "forward", "backward");
    for r in rows {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        println!(
            "{:<16} {:>6} {:>4} {:>5} {:>9.2}% {:>9.2}%",
            r.method,
            r.d,
            opt(r.k.map(|k| k.to_string())),
            opt(r.bits.map(|b| b.to_string())),
            100.0 * r.forward,
            100.0 * r.backward
        );
    }
}

fn size_table(args: SizeArgs) -> Result<()> {
    let rows = cmd_size_table(&args.d, &args.k, &args.b, args.value_bits)?;
    let anchors = anchor_rows()?;
    print_sizes(&rows);
    println!("\nreference configurations (32-bit values):");
    print_sizes(&anchors);
    if let Some(dir) = args.out {
        std::fs::create_dir_all(&dir)?;
        write_size_csv(&dir.join("size_table.csv"), &rows)?;
        write_size_csv(&dir.join("size_anchors.csv"), &anchors)?;
    }
    Ok(())
}
