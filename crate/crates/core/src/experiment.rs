//! Experiment configuration, repeated runs and their records.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, MarginReport, NeuronHistogram};
use crate::codec::{compressed_size, Codec, CodecConfig, CompressedSize};
use crate::data::{self, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::{build_stack, Activation, Loss, SplitModel};
use crate::protocol::{
    inproc_pair, run_feature_owner, run_label_owner, run_training, tcp_loopback_pair, EpochRecord, FeatureOwner,
    LabelOwner, Metered, OptimizerConfig, Party, RunStatus, Schedule, TrafficLedger, TrainingHistory, Transport,
};
use crate::toy::{self, ToyRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    /// Paired in-memory queues.
    Inproc,
    /// A loopback TCP connection inside this process.
    Tcp,
}

/// Everything one experiment needs. Serialized as flat JSON; missing fields
/// take the defaults of the synthetic 100-class benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub cluster_std: f64,
    pub data_seed: u64,
    /// Read samples from this CSV instead of generating clusters.
    pub csv_path: Option<PathBuf>,
    pub label_column: String,

    pub bottom_hidden: Vec<usize>,
    pub cut_dim: usize,
    pub top_hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub cut_activation: Activation,

    /// One of none, size-reduction, quantization, topk, randtopk, l1.
    pub codec: String,
    pub k: usize,
    pub alpha: f64,
    pub bits: u32,
    pub lambda: f64,
    pub zero_epsilon: f64,
    pub value_bits: u32,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub eval_every: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub repeats: usize,

    pub transport: TransportKind,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_classes: 100,
            input_dim: 32,
            train_per_class: 50,
            test_per_class: 20,
            cluster_std: 1.0,
            data_seed: 0,
            csv_path: None,
            label_column: "y".into(),
            bottom_hidden: vec![64],
            cut_dim: 128,
            top_hidden: Vec::new(),
            hidden_activation: Activation::Relu,
            cut_activation: Activation::Relu,
            codec: "none".into(),
            k: 3,
            alpha: 0.1,
            bits: 4,
            lambda: 1e-3,
            zero_epsilon: Codec::DEFAULT_ZERO_EPSILON,
            value_bits: 32,
            epochs: 60,
            batch_size: 32,
            // 0.1 with momentum 0.9 collapses the benchmark net to chance
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_decay_epochs: Vec::new(),
            eval_every: 1,
            eval_batch_size: 256,
            seed: 0,
            repeats: 1,
            transport: TransportKind::Inproc,
        }
    }
}

pub fn parse_codec_name(name: &str) -> Result<&'static str> {
    Ok(match name.to_ascii_lowercase().as_str() {
        "none" => "none",
        "sr" | "size-reduction" | "size_reduction" => "size-reduction",
        "quant" | "quantization" => "quantization",
        "topk" | "top-k" => "topk",
        "randtopk" | "rand-topk" | "randtop-k" => "randtopk",
        "l1" => "l1",
        other => return Err(Error::Config(format!("unknown codec {other:?}"))),
    })
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn codec(&self) -> Result<Codec> {
        Ok(match parse_codec_name(&self.codec)? {
            "none" => Codec::None,
            "size-reduction" => Codec::SizeReduction { k: self.k },
            "quantization" => Codec::Quantization { bits: self.bits },
            "topk" => Codec::TopK { k: self.k },
            "randtopk" => Codec::RandTopK {
                k: self.k,
                alpha: self.alpha,
            },
            _ => Codec::L1 {
                lambda: self.lambda,
                zero_epsilon: self.zero_epsilon,
            },
        })
    }

    pub fn codec_config(&self) -> Result<CodecConfig> {
        let cfg = CodecConfig::new(self.codec()?).with_value_bits(self.value_bits);
        cfg.validate(self.cut_dim)?;
        Ok(cfg)
    }

    /// Sets the codec fields from a [`Codec`] value.
    pub fn set_codec(&mut self, codec: Codec) {
        self.codec = codec.name().into();
        match codec {
            Codec::None => {}
            Codec::SizeReduction { k } | Codec::TopK { k } => self.k = k,
            Codec::RandTopK { k, alpha } => {
                self.k = k;
                self.alpha = alpha;
            }
            Codec::Quantization { bits } => self.bits = bits,
            Codec::L1 { lambda, zero_epsilon } => {
                self.lambda = lambda;
                self.zero_epsilon = zero_epsilon;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.cut_dim == 0 {
            return Err(Error::Config("cut_dim must be > 0".into()));
        }
        self.codec_config()?;
        self.schedule(0).validate()
    }

    pub fn schedule(&self, seed: u64) -> Schedule {
        Schedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay_epochs: self.lr_decay_epochs.clone(),
            shuffle_seed: seed,
            eval_every: self.eval_every,
            eval_batch_size: self.eval_batch_size,
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_classes: self.n_classes,
            input_dim: self.input_dim,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            cluster_std: self.cluster_std,
            seed: self.data_seed,
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = match &self.csv_path {
            Some(path) => data::load_csv(path, &self.label_column, None, self.data_seed)?,
            None => data::synthetic(&self.synthetic_spec())?,
        };
        Ok(ds)
    }

    /// Freshly initialized bottom and top models for a repeat. The halves
    /// come from separate streams so either party can build its own alone.
    pub fn init_model(&self, input_dim: usize, n_classes: usize, seed: u64) -> Result<SplitModel> {
        let mut bottom_widths = vec![input_dim];
        bottom_widths.extend(&self.bottom_hidden);
        bottom_widths.push(self.cut_dim);
        let mut top_widths = vec![self.cut_dim];
        top_widths.extend(&self.top_hidden);
        top_widths.push(n_classes);
        let bottom = build_stack(
            &bottom_widths,
            self.hidden_activation,
            self.cut_activation,
            &mut stream(seed, 1),
        )?;
        let top = build_stack(&top_widths, self.hidden_activation, Activation::Identity, &mut stream(seed, 2))?;
        SplitModel::new(bottom, top)
    }

    pub fn feature_owner(&self, input_dim: usize, n_classes: usize, seed: u64) -> Result<FeatureOwner> {
        let model = self.init_model(input_dim, n_classes, seed)?;
        FeatureOwner::new(model.bottom, self.codec_config()?, self.optimizer(), codec_seed(seed))
    }

    pub fn label_owner(&self, input_dim: usize, n_classes: usize, seed: u64) -> Result<LabelOwner> {
        let model = self.init_model(input_dim, n_classes, seed)?;
        LabelOwner::new(model.top, Loss::SoftmaxCrossEntropy, self.codec_config()?, self.optimizer())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|i| self.seed + i).collect()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Seed of the feature owner's selection stream for a repeat.
pub fn codec_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub seed: u64,
    pub status: RunStatus,
    pub final_train_accuracy: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub training_traffic: TrafficLedger,
    pub evaluation_traffic: TrafficLedger,
    pub mean_kept: Option<f64>,
    pub trained_instances: u64,
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_seconds: f64,
}

impl RepeatResult {
    pub fn from_history(seed: u64, history: TrainingHistory, wall_clock_seconds: f64) -> Self {
        Self {
            seed,
            final_train_accuracy: history.final_train_accuracy(),
            final_test_accuracy: history.final_test_accuracy(),
            final_test_loss: history.epochs.iter().rev().find_map(|e| e.test_loss),
            status: history.status,
            training_traffic: history.training_traffic,
            evaluation_traffic: history.evaluation_traffic,
            mean_kept: history.mean_kept,
            trained_instances: history.trained_instances,
            epochs: history.epochs,
            wall_clock_seconds,
        }
    }
}

/// Diagnostics of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAnalysis {
    pub seed: u64,
    pub margin: MarginReport,
    pub histogram: Option<NeuronHistogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub codec: Codec,
    pub value_bits: u32,
    pub seeds: Vec<u64>,
    /// Mean and standard deviation over completed repeats.
    pub test_accuracy_mean: Option<f64>,
    /// Only reported for two or more completed repeats.
    pub test_accuracy_std: Option<f64>,
    pub train_accuracy_mean: Option<f64>,
    pub diverged: usize,
    /// Nominal ratios from the codec's size formulas.
    pub compressed_size: CompressedSize,
    /// Training payload bytes over the bytes an uncompressed exchange
    /// would have used.
    pub measured_forward_ratio: f64,
    pub measured_backward_ratio: f64,
    pub wall_clock_seconds: f64,
    pub repeats: Vec<RepeatResult>,
}

/// Outcome of one repeat: the record plus the trained model when both
/// parties ran in this process.
pub struct RepeatOutcome {
    pub result: RepeatResult,
    pub model: Option<SplitModel>,
}

/// Trains one repeat with both parties in this process.
pub fn run_repeat(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<RepeatOutcome> {
    let start = Instant::now();
    let mut fo = cfg.feature_owner(ds.input_dim(), ds.n_classes, seed)?;
    let mut lo = cfg.label_owner(ds.input_dim(), ds.n_classes, seed)?;
    let schedule = cfg.schedule(seed);
    let history = match cfg.transport {
        TransportKind::Inproc => run_training(&mut fo, &mut lo, inproc_pair(), &ds.train, &ds.test, &schedule)?,
        TransportKind::Tcp => run_training(&mut fo, &mut lo, tcp_loopback_pair()?, &ds.train, &ds.test, &schedule)?,
    };
    log::info!(
        "{} seed {seed}: {:?}, test accuracy {:?}",
        cfg.codec,
        history.status,
        history.final_test_accuracy()
    );
    let result = RepeatResult::from_history(seed, history, start.elapsed().as_secs_f64());
    let model = SplitModel::new(fo.into_bottom(), lo.into_top())?;
    Ok(RepeatOutcome {
        result,
        model: Some(model),
    })
}

/// Feature-owner half of a repeat over an external transport.
pub fn serve_feature_owner<T: Transport>(cfg: &ExperimentConfig, ds: &Dataset, seed: u64, transport: T) -> Result<()> {
    let mut fo = cfg.feature_owner(ds.input_dim(), ds.n_classes, seed)?;
    let mut t = Metered::new(transport, Party::FeatureOwner);
    run_feature_owner(&mut fo, &mut t, &ds.train.inputs, &ds.test.inputs, &cfg.schedule(seed))
}

/// Label-owner half of a repeat over an external transport.
pub fn serve_label_owner<T: Transport>(cfg: &ExperimentConfig, ds: &Dataset, seed: u64, transport: T) -> Result<RepeatResult> {
    let start = Instant::now();
    let mut lo = cfg.label_owner(ds.input_dim(), ds.n_classes, seed)?;
    let mut t = Metered::new(transport, Party::LabelOwner);
    let mut history = TrainingHistory::empty();
    let outcome = run_label_owner(&mut lo, &mut t, &ds.train.labels, &ds.test.labels, &cfg.schedule(seed), &mut history);
    match outcome {
        Ok(()) => {}
        Err(Error::Numeric(msg)) => history.status = RunStatus::Diverged(msg),
        Err(e @ Error::Handshake(_)) => return Err(e),
        Err(e) => history.status = RunStatus::Aborted(e.to_string()),
    }
    Ok(RepeatResult::from_history(seed, history, start.elapsed().as_secs_f64()))
}

/// Margin of the top model's class weights and, for codecs with a fixed
/// budget, the inference-time top-k histogram over the training set.
pub fn analyze(cfg: &ExperimentConfig, model: &SplitModel, ds: &Dataset, seed: u64) -> Result<ModelAnalysis> {
    let codec = cfg.codec()?;
    let last = model.top.last().expect("top model has layers");
    let d = model.cut_dim();
    // size reduction only ever feeds the first k inputs of the top model
    let (columns, k) = match codec {
        Codec::SizeReduction { k } if model.top.len() == 1 => (0..k, k),
        _ => (0..last.in_dim(), codec.kept().unwrap_or(d)),
    };
    let rows = analysis::class_weight_rows(last, columns)?;
    let rows: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let margin = MarginReport::new(&rows, k)?;
    let histogram = match codec.kept() {
        Some(k) => Some(analysis::topk_selection_histogram(&model.bottom, &ds.train.inputs, k)?),
        None => None,
    };
    Ok(ModelAnalysis { seed, margin, histogram })
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

impl RunRecord {
    pub fn aggregate(cfg: &ExperimentConfig, mut repeats: Vec<RepeatResult>, wall_clock_seconds: f64) -> Result<Self> {
        repeats.sort_by_key(|r| r.seed);
        let codec_cfg = cfg.codec_config()?;
        let completed: Vec<&RepeatResult> = repeats.iter().filter(|r| r.status == RunStatus::Completed).collect();
        let test: Vec<f64> = completed.iter().filter_map(|r| r.final_test_accuracy).collect();
        let train: Vec<f64> = completed.iter().filter_map(|r| r.final_train_accuracy).collect();
        let (test_accuracy_mean, test_accuracy_std) = mean_std(&test);
        let kept: Vec<f64> = repeats.iter().filter_map(|r| r.mean_kept).collect();
        let l1_kept = match codec_cfg.codec {
            Codec::L1 { .. } => Some(mean_std(&kept).0.unwrap_or(0.0)),
            _ => None,
        };
        let d = cfg.cut_dim as f64;
        let bytes_per_value = codec_cfg.value_bits as f64 / 8.0;
        let ratio = |payload: u64, instances: u64| {
            if instances == 0 {
                0.0
            } else {
                payload as f64 / (instances as f64 * d * bytes_per_value)
            }
        };
        let instances: u64 = repeats.iter().map(|r| r.trained_instances).sum();
        let fwd: u64 = repeats.iter().map(|r| r.training_traffic.forward().payload_bytes).sum();
        let bwd: u64 = repeats.iter().map(|r| r.training_traffic.backward().payload_bytes).sum();
        Ok(Self {
            codec: codec_cfg.codec,
            value_bits: codec_cfg.value_bits,
            seeds: repeats.iter().map(|r| r.seed).collect(),
            test_accuracy_mean,
            test_accuracy_std,
            train_accuracy_mean: mean_std(&train).0,
            diverged: repeats.iter().filter(|r| matches!(r.status, RunStatus::Diverged(_))).count(),
            compressed_size: compressed_size(&codec_cfg, cfg.cut_dim, l1_kept)?,
            measured_forward_ratio: ratio(fwd, instances),
            measured_backward_ratio: ratio(bwd, instances),
            wall_clock_seconds,
            repeats,
        })
    }
}

/// Outputs of [`cmd_train`].
pub struct TrainOutput {
    pub record: RunRecord,
    pub analyses: Vec<ModelAnalysis>,
}

/// Runs every repeat of `cfg` in this process and analyzes the models.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let ds = cfg.load_dataset()?;
    let mut repeats = Vec::new();
    let mut analyses = Vec::new();
    for seed in cfg.seeds() {
        let outcome = run_repeat(cfg, &ds, seed)?;
        if let (Some(model), RunStatus::Completed) = (&outcome.model, &outcome.result.status) {
            analyses.push(analyze(cfg, model, &ds, seed)?);
        }
        repeats.push(outcome.result);
    }
    Ok(TrainOutput {
        record: RunRecord::aggregate(cfg, repeats, start.elapsed().as_secs_f64())?,
        analyses,
    })
}

/// One record per alpha, sorted by alpha.
pub fn cmd_sweep_alpha(cfg: &ExperimentConfig, alphas: &[f64]) -> Result<Vec<(f64, TrainOutput)>> {
    if parse_codec_name(&cfg.codec)? != "randtopk" {
        return Err(Error::Usage("the alpha sweep needs the randtopk codec".into()));
    }
    let mut alphas = alphas.to_vec();
    if alphas.iter().any(|a| !a.is_finite()) {
        return Err(Error::Usage("alphas must be finite".into()));
    }
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    alphas
        .into_iter()
        .map(|alpha| {
            let mut c = cfg.clone();
            c.alpha = alpha;
            Ok((alpha, cmd_train(&c)?))
        })
        .collect()
}

pub fn cmd_toy(alphas: &[f64], steps: usize, lr: f64, seed: u64, record_every: usize) -> Result<Vec<ToyRun>> {
    alphas.iter().map(|&a| toy::run(a, steps, lr, seed, record_every)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub method: String,
    pub d: usize,
    pub k: Option<usize>,
    pub bits: Option<u32>,
    pub value_bits: u32,
    pub forward: f64,
    pub backward: f64,
}

impl SizeRow {
    fn new(codec: Codec, d: usize, value_bits: u32) -> Result<Self> {
        let cfg = CodecConfig::new(codec).with_value_bits(value_bits);
        cfg.validate(d)?;
        let size = compressed_size(&cfg, d, None)?;
        Ok(Self {
            method: codec.name().into(),
            d,
            k: codec.kept(),
            bits: match codec {
                Codec::Quantization { bits } => Some(bits),
                _ => None,
            },
            value_bits,
            forward: size.forward,
            backward: size.backward,
        })
    }
}

/// Size-reduction, top-k and quantization ratios over a grid. Pairs with
/// k > d are skipped.
pub fn cmd_size_table(d_list: &[usize], k_list: &[usize], b_list: &[u32], value_bits: u32) -> Result<Vec<SizeRow>> {
    let mut rows = Vec::new();
    for &d in d_list {
        for &k in k_list.iter().filter(|&&k| k >= 1 && k <= d) {
            rows.push(SizeRow::new(Codec::SizeReduction { k }, d, value_bits)?);
            rows.push(SizeRow::new(Codec::TopK { k }, d, value_bits)?);
        }
        for &bits in b_list {
            rows.push(SizeRow::new(Codec::Quantization { bits }, d, value_bits)?);
        }
    }
    Ok(rows)
}

/// Reference configurations whose forward sizes are quoted to two decimals.
pub fn anchor_rows() -> Result<Vec<SizeRow>> {
    [
        (Codec::TopK { k: 3 }, 128),
        (Codec::TopK { k: 2 }, 300),
        (Codec::TopK { k: 2 }, 600),
        (Codec::TopK { k: 2 }, 1280),
        (Codec::Quantization { bits: 2 }, 128),
        (Codec::Quantization { bits: 4 }, 128),
    ]
    .into_iter()
    .map(|(codec, d)| SizeRow::new(codec, d, 32))
    .collect()
}

#[derive(Serialize)]
struct EpochCsvRow<'a> {
    seed: u64,
    epoch: usize,
    lr: f64,
    train_loss: f64,
    train_accuracy: Option<f64>,
    test_accuracy: Option<f64>,
    test_loss: Option<f64>,
    status: &'a str,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Encoding(e.to_string())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Encoding(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn write_epochs_csv(path: &Path, record: &RunRecord) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for r in &record.repeats {
        let status = match r.status {
            RunStatus::Completed => "completed",
            RunStatus::Diverged(_) => "diverged",
            RunStatus::Aborted(_) => "aborted",
        };
        for e in &r.epochs {
            w.serialize(EpochCsvRow {
                seed: r.seed,
                epoch: e.epoch,
                lr: e.lr,
                train_loss: e.train_loss,
                train_accuracy: e.train_accuracy,
                test_accuracy: e.test_accuracy,
                test_loss: e.test_loss,
                status,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_toy_csv(path: &Path, runs: &[ToyRun]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(["alpha", "step", "w1", "w2", "loss"]).map_err(csv_err)?;
    for run in runs {
        for p in &run.trajectory {
            w.write_record([
                run.alpha.to_string(),
                p.step.to_string(),
                p.w1.to_string(),
                p.w2.to_string(),
                p.loss.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_size_csv(path: &Path, rows: &[SizeRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `run.json`, `epochs.csv` and `analysis.json` under `dir`.
pub fn write_train_output(dir: &Path, out: &TrainOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("run.json"), &out.record)?;
    write_epochs_csv(&dir.join("epochs.csv"), &out.record)?;
    write_json(&dir.join("analysis.json"), &out.analyses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            n_classes: 4,
            input_dim: 3,
            train_per_class: 10,
            test_per_class: 4,
            bottom_hidden: vec![8],
            cut_dim: 6,
            codec: "topk".into(),
            k: 2,
            epochs: 3,
            batch_size: 8,
            eval_every: 0,
            repeats: 2,
            ..Default::default()
        }
    }

    #[test]
    fn config_json_is_flat_and_defaults_fill_in() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"codec": "randtopk", "k": 5, "alpha": 0.2}"#).unwrap();
        assert_eq!(cfg.codec().unwrap(), Codec::RandTopK { k: 5, alpha: 0.2 });
        assert_eq!(cfg.cut_dim, 128);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"codec_kind": 1}"#).is_err());
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn codec_names() {
        let mut cfg = small();
        for (name, codec) in [
            ("SR", Codec::SizeReduction { k: 2 }),
            ("quant", Codec::Quantization { bits: 4 }),
            ("none", Codec::None),
        ] {
            cfg.codec = name.into();
            assert_eq!(cfg.codec().unwrap(), codec);
        }
        cfg.codec = "zip".into();
        assert!(cfg.codec().is_err());
        cfg.set_codec(Codec::RandTopK { k: 4, alpha: 0.3 });
        assert_eq!(cfg.codec().unwrap(), Codec::RandTopK { k: 4, alpha: 0.3 });
    }

    #[test]
    fn train_records_every_repeat() {
        let out = cmd_train(&small()).unwrap();
        let r = &out.record;
        assert_eq!(r.seeds, vec![0, 1]);
        assert!(r.test_accuracy_std.is_some());
        assert_eq!(out.analyses.len(), 2);
        assert_eq!(out.analyses[0].histogram.as_ref().unwrap().total(), 2 * 40);
        // TopK payload: 2 values + ceil(2*3/8) index bytes per instance of 6 values
        let expected = (2.0 * 4.0 + 1.0) / (6.0 * 4.0);
        assert!((r.measured_forward_ratio - expected).abs() < 1e-12);
        assert!((r.measured_backward_ratio - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.repeats[0].trained_instances, 3 * 40);
    }

    #[test]
    fn single_repeat_has_no_std() {
        let cfg = ExperimentConfig { repeats: 1, ..small() };
        assert_eq!(cmd_train(&cfg).unwrap().record.test_accuracy_std, None);
    }

    #[test]
    fn divergence_is_recorded() {
        let cfg = ExperimentConfig {
            lr: 1e200,
            momentum: 0.0,
            ..small()
        };
        let out = cmd_train(&cfg).unwrap();
        assert_eq!(out.record.diverged, 2);
        assert!(out.record.test_accuracy_mean.is_none());
        assert!(matches!(out.record.repeats[0].status, RunStatus::Diverged(_)));
    }

    #[test]
    fn sweep_sorts_alphas() {
        let cfg = ExperimentConfig {
            codec: "randtopk".into(),
            repeats: 1,
            epochs: 1,
            ..small()
        };
        let rows = cmd_sweep_alpha(&cfg, &[0.5, 0.0, 0.1]).unwrap();
        assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0.0, 0.1, 0.5]);
        assert!(cmd_sweep_alpha(&small(), &[0.1]).is_err());
    }

    #[test]
    fn size_table_skips_oversized_k() {
        let rows = cmd_size_table(&[4], &[2, 8], &[2], 32).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].method, "quantization");
        assert_eq!(anchor_rows().unwrap().len(), 6);
    }
}
