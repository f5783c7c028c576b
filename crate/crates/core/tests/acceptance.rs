//! The ten acceptance criteria at their stated tolerances. Each prints one
//! PASS/FAIL line; the test fails if any criterion does.
//!
//! Benchmark runs are trained once and shared between the criteria that
//! read them. Run with `--nocapture` to also see the per-seed tables.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use splitcomm::analysis::NeuronHistogram;
use splitcomm::codec::{Codec, Mode};
use splitcomm::data::Dataset;
use splitcomm::experiment::{analyze, cmd_size_table, run_repeat, ExperimentConfig, TransportKind};
use splitcomm::protocol::RunStatus;
use splitcomm::toy;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Writes straight to stderr so the lines survive output capture.
fn line(text: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{text}");
}

#[derive(Clone)]
struct SeedRun {
    seed: u64,
    test_accuracy: f64,
    margin: f64,
    histogram: Option<NeuronHistogram>,
    seconds: f64,
}

/// Benchmark runs keyed by a codec label, trained on first use.
struct Bench {
    data: Dataset,
    runs: BTreeMap<String, Vec<SeedRun>>,
}

impl Bench {
    fn new() -> Self {
        let data = ExperimentConfig::default().load_dataset().unwrap();
        Self { data, runs: BTreeMap::new() }
    }

    fn config(codec: Codec) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            eval_every: 0,
            ..ExperimentConfig::default()
        };
        cfg.set_codec(codec);
        cfg
    }

    fn runs(&mut self, label: &str, codec: Codec) -> Vec<SeedRun> {
        if let Some(r) = self.runs.get(label) {
            return r.clone();
        }
        let cfg = Self::config(codec);
        let mut out = Vec::new();
        for seed in SEEDS {
            let start = Instant::now();
            let o = run_repeat(&cfg, &self.data, seed).unwrap();
            assert_eq!(o.result.status, RunStatus::Completed, "{label} seed {seed}");
            let a = analyze(&cfg, o.model.as_ref().unwrap(), &self.data, seed).unwrap();
            out.push(SeedRun {
                seed,
                test_accuracy: o.result.final_test_accuracy.unwrap(),
                margin: a.margin.d_w_empirical,
                histogram: a.histogram,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
        println!("{label}:");
        for r in &out {
            println!(
                "  seed {} test accuracy {:.4} margin {:.4} histogram {} ({:.1}s)",
                r.seed,
                r.test_accuracy,
                r.margin,
                r.histogram
                    .as_ref()
                    .map_or("-".into(), |h| format!("max {} min {}", h.max_count(), h.min_count())),
                r.seconds
            );
        }
        self.runs.insert(label.into(), out.clone());
        out
    }
}

fn median(runs: &[SeedRun]) -> f64 {
    let mut v: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

const TOPK: Codec = Codec::TopK { k: 3 };
const SR: Codec = Codec::SizeReduction { k: 4 };

fn rand_topk(alpha: f64) -> Codec {
    Codec::RandTopK { k: 3, alpha }
}

fn c1_size_anchors() -> Outcome {
    let start = Instant::now();
    let rows = cmd_size_table(&[128, 300, 600, 1280], &[2, 3], &[2, 4], 32).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let find = |method: &str, d: usize, k: Option<usize>, bits: Option<u32>| {
        rows.iter()
            .find(|r| r.method == method && r.d == d && r.k == k && r.bits == bits)
            .map(|r| format!("{:.2}", 100.0 * r.forward))
            .unwrap_or_else(|| "missing".into())
    };
    let checks = [
        (find("topk", 128, Some(3), None), "2.86"),
        (find("topk", 300, Some(2), None), "0.85"),
        (find("topk", 600, Some(2), None), "0.44"),
        (find("topk", 1280, Some(2), None), "0.21"),
        (find("quantization", 128, None, Some(2)), "6.25"),
        (find("quantization", 128, None, Some(4)), "12.50"),
    ];
    let got: Vec<String> = checks.iter().map(|(g, _)| format!("{g}%")).collect();
    let pass = checks.iter().all(|(g, want)| g == want) && secs < 1.0;
    outcome(pass, format!("{} in {secs:.3}s", got.join(" ")))
}

fn c2_wire_ledger(bench: &Bench) -> Outcome {
    let mut cfg = Bench::config(TOPK);
    cfg.epochs = 1;
    cfg.eval_every = 1;
    let ds = &bench.data;

    // one batch directly
    let mut fo = cfg.feature_owner(ds.input_dim(), ds.n_classes, 0).unwrap();
    let mut lo = cfg.label_owner(ds.input_dim(), ds.n_classes, 0).unwrap();
    fo.confirm_handshake(&lo.accept_handshake(&fo.handshake().unwrap()).unwrap()).unwrap();
    let batch = fo.forward(&ds.train.inputs[..32], Mode::Train).unwrap();
    let per_batch = batch.payload.len();
    let expected = 32 * (3 * 4 + (3 * 7usize).div_ceil(8));

    // whole epoch over both transports
    let inproc = run_repeat(&cfg, ds, 0).unwrap().result;
    cfg.transport = TransportKind::Tcp;
    let tcp = run_repeat(&cfg, ds, 0).unwrap().result;
    let n = ds.train.len();
    let full = n / 32;
    let fwd = inproc.training_traffic.forward();
    let ledger_ok = fwd.payload_bytes == (full * expected + (n % 32) * expected / 32) as u64
        && fwd.messages == n.div_ceil(32) as u64;
    let same = inproc.training_traffic == tcp.training_traffic && inproc.evaluation_traffic == tcp.evaluation_traffic;
    outcome(
        per_batch == expected && ledger_ok && same,
        format!(
            "{per_batch} bytes per batch of 32 (expected {expected}); epoch forward payload {} bytes in {} messages; TCP and in-process ledgers {}",
            fwd.payload_bytes,
            fwd.messages,
            if same { "identical" } else { "DIFFER" }
        ),
    )
}

fn c3_toy() -> Outcome {
    let timed = |alpha: f64| {
        let start = Instant::now();
        let run = toy::run(alpha, 10_000, 0.1, 0, 10_000).unwrap();
        (run, start.elapsed().as_secs_f64())
    };
    let (top, t_top) = timed(0.0);
    let (rand, t_rand) = timed(0.1);
    let l = toy::L_ESCAPE;
    let pass = top.final_loss > l
        && top.final_w[1] > -1.0
        && rand.final_loss < l
        && rand.final_w[1] < -1.0
        && t_top < 1.0
        && t_rand < 1.0;
    outcome(
        pass,
        format!(
            "L_escape {l}; top-1 loss {:.4} w2 {:.4} ({t_top:.3}s); RandTop-1 alpha 0.1 loss {:.4} w2 {:.4} ({t_rand:.3}s)",
            top.final_loss, top.final_w[1], rand.final_loss, rand.final_w[1]
        ),
    )
}

fn describe<T: std::fmt::Debug>(e: proptest::test_runner::TestError<T>) -> String {
    e.to_string()
}

fn c4_codec_properties() -> Outcome {
    use common::*;
    let mut failures = Vec::new();
    let mut run = |name: &str, f: &dyn Fn(&mut TestRunner) -> Result<(), String>| {
        let mut runner = TestRunner::new(Config::with_cases(10_000));
        if let Err(e) = f(&mut runner) {
            failures.push(format!("{name}: {e}"));
        }
    };
    run("top-k gather/scatter", &|r| {
        r.run(&(with_k(), prop::sample::select(vec![32u32, 64])), |((v, k), n)| {
            prop_topk_gather_scatter(&v, k, n)
        })
        .map_err(describe)
    });
    run("top-k idempotence", &|r| r.run(&with_k(), |(v, k)| prop_topk_idempotent(&v, k)).map_err(describe));
    run("size-reduction idempotence", &|r| {
        r.run(&with_k(), |(v, k)| prop_size_reduction_idempotent(&v, k)).map_err(describe)
    });
    run("quantization error", &|r| {
        r.run(&(activation(), 1u32..=16), |(v, b)| prop_quantization_error(&v, b)).map_err(describe)
    });
    run("RandTopk(alpha=0) = TopK", &|r| {
        r.run(&(with_k(), any::<u64>()), |((v, k), s)| prop_randtopk_alpha_zero(&v, k, s))
            .map_err(describe)
    });
    run("RandTopk inference = TopK", &|r| {
        r.run(&(with_k(), 0.0f64..=1.0, any::<u64>()), |((v, k), a, s)| {
            prop_randtopk_inference(&v, k, a, s)
        })
        .map_err(describe)
    });
    if failures.is_empty() {
        outcome(true, "6 suites x 10,000 cases")
    } else {
        outcome(false, failures.join("; "))
    }
}

fn c5_gradients() -> Outcome {
    let fd = common::finite_difference_check(100, 2024, 1e-5);
    let mismatches = common::split_vs_monolithic_mismatches();
    outcome(
        fd.failure.is_none() && mismatches == 0,
        format!(
            "{} gradients over 100 networks, worst relative error {:.2e}{}; split vs monolithic after 5 epochs: {mismatches} differing parameters",
            fd.checked,
            fd.worst,
            fd.failure.map(|f| format!(" ({f})")).unwrap_or_default()
        ),
    )
}

fn c6_ordering(bench: &mut Bench) -> Outcome {
    let start = Instant::now();
    let rand = bench.runs("randtopk alpha=0.1", rand_topk(0.1));
    let top = bench.runs("topk", TOPK);
    let sr = bench.runs("size-reduction k=4", SR);
    let secs = start.elapsed().as_secs_f64();
    let (mr, mt, ms) = (median(&rand), median(&top), median(&sr));
    let wins = rand.iter().zip(&top).filter(|(r, t)| r.test_accuracy - t.test_accuracy > 0.0).count();
    outcome(
        mr > mt && mt > ms && wins >= 4 && secs < 600.0,
        format!(
            "median test accuracy RandTopk {mr:.4} > TopK {mt:.4} > SizeReduction {ms:.4}; RandTopk ahead in {wins}/5 seeds; {secs:.0}s"
        ),
    )
}

fn c7_margins(bench: &mut Bench) -> Outcome {
    let grid = common::ratio_grid();
    let top = bench.runs("topk", TOPK);
    let sr = bench.runs("size-reduction k=4", SR);
    let wins = top.iter().zip(&sr).filter(|(t, s)| t.margin > s.margin).count();
    let margins = |runs: &[SeedRun]| runs.iter().map(|r| format!("{:.3}", r.margin)).collect::<Vec<_>>().join(",");
    outcome(
        grid.violations.is_empty() && grid.holding > 0 && wins >= 4,
        format!(
            "ratio > 1 at all {} condition-holding grid points{}; margin TopK [{}] vs SizeReduction [{}]: TopK larger in {wins}/5 seeds",
            grid.holding,
            if grid.violations.is_empty() { String::new() } else { format!(" (violations: {:?})", grid.violations) },
            margins(&top),
            margins(&sr)
        ),
    )
}

fn c8_histogram(bench: &mut Bench) -> Outcome {
    let top = bench.runs("topk", TOPK);
    let rand = bench.runs("randtopk alpha=0.1", rand_topk(0.1));
    let mut both = 0;
    let mut max_lower = 0;
    let mut min_higher = 0;
    let mut per_seed = Vec::new();
    for (t, r) in top.iter().zip(&rand) {
        let (ht, hr) = (t.histogram.as_ref().unwrap(), r.histogram.as_ref().unwrap());
        let lower = hr.max_count() < ht.max_count();
        let higher = hr.min_count() > ht.min_count();
        max_lower += usize::from(lower);
        min_higher += usize::from(higher);
        both += usize::from(lower && higher);
        per_seed.push(format!(
            "max {}/{} min {}/{}",
            hr.max_count(),
            ht.max_count(),
            hr.min_count(),
            ht.min_count()
        ));
    }
    outcome(
        both >= 4,
        format!(
            "RandTopk/TopK per seed [{}]; max lower in {max_lower}/5, min higher in {min_higher}/5, both in {both}/5",
            per_seed.join("; ")
        ),
    )
}

fn c9_draw_distribution() -> Outcome {
    let f = common::randtopk_frequencies(&[0.5, 4.0, -3.0, 0.2, 2.5, -0.1], 3, 0.1, 100_000, 2024);
    let pairs: Vec<String> = f
        .empirical
        .iter()
        .zip(&f.exact)
        .map(|(e, p)| format!("{e:.4}/{p:.4}"))
        .collect();
    outcome(
        f.max_z() <= 3.0,
        format!("empirical/exact [{}]; worst {:.2} standard errors", pairs.join(" "), f.max_z()),
    )
}

fn c10_alpha_sweep(bench: &mut Bench) -> Outcome {
    let a0 = bench.runs("randtopk alpha=0", rand_topk(0.0));
    let a005 = bench.runs("randtopk alpha=0.05", rand_topk(0.05));
    let a01 = bench.runs("randtopk alpha=0.1", rand_topk(0.1));
    let a1 = bench.runs("randtopk alpha=1", rand_topk(1.0));
    let (m0, m005, m01, m1) = (median(&a0), median(&a005), median(&a01), median(&a1));
    let floor = m0.max(m1);
    outcome(
        m005 > floor && m01 > floor,
        format!("median test accuracy alpha 0: {m0:.4}, 0.05: {m005:.4}, 0.1: {m01:.4}, 1.0: {m1:.4}"),
    )
}

#[test]
fn acceptance_criteria() {
    let mut bench = Bench::new();
    let criteria: Vec<(&str, Box<dyn FnOnce(&mut Bench) -> Outcome>)> = vec![
        ("compressed-size anchors", Box::new(|_| c1_size_anchors())),
        ("wire/ledger consistency", Box::new(|b| c2_wire_ledger(b))),
        ("toy example", Box::new(|_| c3_toy())),
        ("codec properties", Box::new(|_| c4_codec_properties())),
        ("gradient correctness", Box::new(|_| c5_gradients())),
        ("accuracy ordering", Box::new(c6_ordering)),
        ("margin theory", Box::new(c7_margins)),
        ("neuron distribution", Box::new(c8_histogram)),
        ("RandTopk draw distribution", Box::new(|_| c9_draw_distribution())),
        ("alpha-sweep shape", Box::new(c10_alpha_sweep)),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut bench)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                outcome(false, format!("panicked: {msg}"))
            });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        line(&format!("criterion {n:>2} {verdict}  {name}: {}", result.detail));
        if !result.pass {
            failed.push(format!("{n} ({name})"));
        }
    }
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
