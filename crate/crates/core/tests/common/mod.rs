//! Oracles shared by the integration tests. Each one is written from first
//! principles and does not call the code it checks.
#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splitcomm::codec::{
    compress_backward, compress_forward, decompress_backward, decompress_forward, select_randtopk, select_topk, Codec,
    CodecConfig, ForwardPayload, Mode,
};
use splitcomm::nn::{self, Activation, Batch, DenseLayer, Loss, Sgd};
use splitcomm::protocol::{inproc_pair, run_training, FeatureOwner, LabelOwner, OptimizerConfig, Schedule};

// ---------------------------------------------------------------- gradients

const H: f64 = 1e-5;

fn loss_of(net: &[DenseLayer], loss: &Loss, x: &[f64], label: usize) -> f64 {
    loss.evaluate(&nn::predict(net, x).unwrap(), label).unwrap().0
}

/// Relative error with a floor, so gradients near zero are compared in
/// absolute terms (central differences are only accurate to ~1e-11 there).
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Smallest |pre-activation| over the ReLU layers, to stay clear of kinks.
fn kink_distance(net: &[DenseLayer], x: &[f64]) -> f64 {
    let mut input = x.to_vec();
    let mut best = f64::INFINITY;
    for layer in net {
        let mut next = Vec::with_capacity(layer.out_dim());
        for r in 0..layer.out_dim() {
            let z: f64 = (0..layer.in_dim()).map(|c| layer.weight(r, c) * input[c]).sum::<f64>() + layer.bias()[r];
            if layer.activation() == Activation::Relu {
                best = best.min(z.abs());
            }
            next.push(match layer.activation() {
                Activation::Relu => z.max(0.0),
                Activation::Tanh => z.tanh(),
                Activation::Identity => z,
            });
        }
        input = next;
    }
    best
}

fn random_net(rng: &mut ChaCha8Rng) -> Vec<DenseLayer> {
    let depth = rng.gen_range(1..=4);
    let widths: Vec<usize> = (0..=depth).map(|_| rng.gen_range(1..=6)).collect();
    let acts = [Activation::Identity, Activation::Tanh, Activation::Relu];
    (0..depth)
        .map(|i| {
            let mut layer = DenseLayer::xavier(widths[i], widths[i + 1], acts[rng.gen_range(0..3)], rng).unwrap();
            for b in layer.bias_mut() {
                *b = rng.gen_range(-0.5..0.5);
            }
            layer
        })
        .collect()
}

pub struct FdReport {
    pub checked: usize,
    pub worst: f64,
    /// First parameter above the tolerance, if any.
    pub failure: Option<String>,
}

/// Compares every analytic parameter and input gradient against central
/// differences on `nets` random networks.
pub fn finite_difference_check(nets: usize, seed: u64, tolerance: f64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport { checked: 0, worst: 0.0, failure: None };
    let note = |report: &mut FdReport, e: f64, what: String| {
        report.worst = report.worst.max(e);
        report.checked += 1;
        if e >= tolerance && report.failure.is_none() {
            report.failure = Some(format!("{what}: relative error {e:.2e}"));
        }
    };
    for net_i in 0..nets {
        let mut net = random_net(&mut rng);
        let n_in = net[0].in_dim();
        let n_out = net.last().unwrap().out_dim();
        let loss = if n_out >= 2 && rng.gen_bool(0.5) {
            Loss::SoftmaxCrossEntropy
        } else {
            Loss::SquaredError {
                targets: (0..3).map(|_| (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            }
        };
        let label = rng.gen_range(0..if matches!(loss, Loss::SoftmaxCrossEntropy) { n_out } else { 3 });
        let x = loop {
            let x: Vec<f64> = (0..n_in).map(|_| rng.gen_range(-2.0..2.0)).collect();
            if kink_distance(&net, &x) > 1e-3 {
                break x;
            }
        };
        let (out, tape) = nn::forward(&net, &x).unwrap();
        let (_, g_out) = loss.evaluate(&out, label).unwrap();
        let (grads, g_in) = nn::backward(&net, &tape, &g_out).unwrap();

        for l in 0..net.len() {
            for i in 0..net[l].weights().len() {
                let orig = net[l].weights()[i];
                net[l].weights_mut()[i] = orig + H;
                let up = loss_of(&net, &loss, &x, label);
                net[l].weights_mut()[i] = orig - H;
                let down = loss_of(&net, &loss, &x, label);
                net[l].weights_mut()[i] = orig;
                let e = rel_err(grads[l].weights[i], (up - down) / (2.0 * H));
                note(&mut report, e, format!("net {net_i} layer {l} weight {i}"));
            }
            for i in 0..net[l].bias().len() {
                let orig = net[l].bias()[i];
                net[l].bias_mut()[i] = orig + H;
                let up = loss_of(&net, &loss, &x, label);
                net[l].bias_mut()[i] = orig - H;
                let down = loss_of(&net, &loss, &x, label);
                net[l].bias_mut()[i] = orig;
                let e = rel_err(grads[l].bias[i], (up - down) / (2.0 * H));
                note(&mut report, e, format!("net {net_i} layer {l} bias {i}"));
            }
        }
        for i in 0..n_in {
            let mut xp = x.clone();
            xp[i] += H;
            let mut xm = x.clone();
            xm[i] -= H;
            let numeric = (loss_of(&net, &loss, &xp, label) - loss_of(&net, &loss, &xm, label)) / (2.0 * H);
            note(&mut report, rel_err(g_in[i], numeric), format!("net {net_i} input {i}"));
        }
    }
    report
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Batch {
    let inputs = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    Batch::new(inputs, labels, classes).unwrap()
}

/// Monolithic oracle: the same layers as one stack, trained with the same
/// batch order, 1/B scaling and optimizer.
fn train_monolithic(net: &mut Vec<DenseLayer>, data: &Batch, schedule: &Schedule, opt: OptimizerConfig) {
    let mut sgd = Sgd::new(net, opt.lr, opt.momentum, opt.weight_decay).unwrap();
    for epoch in 0..schedule.epochs {
        sgd.lr = schedule.lr_at(epoch);
        for batch in schedule.batches(data.len(), epoch) {
            let mut grads = nn::zero_grads(net);
            let scale = 1.0 / batch.len() as f64;
            for &i in &batch {
                let (out, tape) = nn::forward(net, &data.inputs[i]).unwrap();
                let (_, mut g) = nn::softmax_cross_entropy(&out, data.labels[i]).unwrap();
                g.iter_mut().for_each(|v| *v *= scale);
                nn::backward_accumulate(net, &tape, &g, &mut grads).unwrap();
            }
            sgd.step(net, &grads).unwrap();
        }
    }
}

/// Trains split (codec None, N = 64) and monolithic copies of one network
/// for 5 epochs; returns the number of parameters that differ in any bit.
pub fn split_vs_monolithic_mismatches() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let train = random_batch(&mut rng, 70, 5, 4);
    let test = random_batch(&mut rng, 10, 5, 4);
    let bottom = nn::build_stack(&[5, 8, 6], Activation::Tanh, Activation::Relu, &mut rng).unwrap();
    let top = nn::build_stack(&[6, 7, 4], Activation::Relu, Activation::Identity, &mut rng).unwrap();
    let opt = OptimizerConfig { lr: 0.05, momentum: 0.9, weight_decay: 1e-4 };
    let schedule = Schedule {
        epochs: 5,
        batch_size: 16,
        lr: opt.lr,
        lr_decay_epochs: vec![3],
        shuffle_seed: 11,
        eval_every: 0,
        eval_batch_size: 32,
    };
    let cfg = CodecConfig::new(Codec::None).with_value_bits(64);
    let mut fo = FeatureOwner::new(bottom.clone(), cfg, opt, 0).unwrap();
    let mut lo = LabelOwner::new(top.clone(), Loss::SoftmaxCrossEntropy, cfg, opt).unwrap();
    run_training(&mut fo, &mut lo, inproc_pair(), &train, &test, &schedule).unwrap();

    let mut mono: Vec<DenseLayer> = bottom.into_iter().chain(top).collect();
    train_monolithic(&mut mono, &train, &schedule, opt);

    let split: Vec<DenseLayer> = fo.into_bottom().into_iter().chain(lo.into_top()).collect();
    split
        .iter()
        .zip(&mono)
        .map(|(a, b)| {
            let w = a.weights().iter().zip(b.weights()).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
            let c = a.bias().iter().zip(b.bias()).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
            w + c
        })
        .sum()
}

// ------------------------------------------------------------------ codecs

/// Activations with deliberate ties and zeros mixed in.
pub fn activation() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![
            4 => -100.0f64..100.0,
            1 => Just(0.0),
            1 => Just(1.5),
            1 => Just(-1.5),
        ],
        1..48,
    )
}

pub fn with_k() -> impl Strategy<Value = (Vec<f64>, usize)> {
    activation().prop_flat_map(|v| {
        let d = v.len();
        (Just(v), 1..=d)
    })
}

/// Independent top-k: repeatedly take the first maximum magnitude.
pub fn oracle_topk(v: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; v.len()];
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..v.len() {
            if !taken[i] && best.map_or(true, |b| v[i].abs() > v[b].abs()) {
                best = Some(i);
            }
        }
        taken[best.unwrap()] = true;
    }
    (0..v.len()).filter(|&i| taken[i]).collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn prop_topk_matches_oracle(v: &[f64], k: usize) -> Result<(), TestCaseError> {
    prop_assert_eq!(select_topk(v, k).unwrap(), oracle_topk(v, k));
    Ok(())
}

pub fn prop_topk_gather_scatter(v: &[f64], k: usize, n: u32) -> Result<(), TestCaseError> {
    let cfg = CodecConfig::new(Codec::TopK { k }).with_value_bits(n);
    let (payload, sel) = compress_forward(&cfg, v, Mode::Train, &mut rng(0)).unwrap();
    let dense = decompress_forward(&cfg, &payload, v.len()).unwrap();
    let keep = oracle_topk(v, k);
    for i in 0..v.len() {
        let expected = if keep.contains(&i) { cfg.narrow(v[i]) } else { 0.0 };
        prop_assert_eq!(dense[i], expected);
    }
    // backward: gather at the selection, scatter back to the same places
    let grad: Vec<f64> = v.iter().map(|x| x * 0.5 - 1.0).collect();
    let sent = compress_backward(&cfg, &grad, sel.as_ref()).unwrap();
    prop_assert_eq!(sent.len(), k);
    let back = decompress_backward(&cfg, &sent, sel.as_ref(), v.len()).unwrap();
    for i in 0..v.len() {
        let expected = if keep.contains(&i) { cfg.narrow(grad[i]) } else { 0.0 };
        prop_assert_eq!(back[i], expected);
    }
    Ok(())
}

fn round_trip(cfg: &CodecConfig, v: &[f64]) -> Vec<f64> {
    decompress_forward(cfg, &compress_forward(cfg, v, Mode::Train, &mut rng(0)).unwrap().0, v.len()).unwrap()
}

pub fn prop_topk_idempotent(v: &[f64], k: usize) -> Result<(), TestCaseError> {
    let cfg = CodecConfig::new(Codec::TopK { k }).with_value_bits(64);
    let once = round_trip(&cfg, v);
    prop_assert_eq!(round_trip(&cfg, &once), once);
    Ok(())
}

pub fn prop_size_reduction_idempotent(v: &[f64], k: usize) -> Result<(), TestCaseError> {
    let cfg = CodecConfig::new(Codec::SizeReduction { k }).with_value_bits(64);
    let once = round_trip(&cfg, v);
    prop_assert_eq!(&once[..k], &v[..k]);
    prop_assert!(once[k..].iter().all(|&x| x == 0.0));
    prop_assert_eq!(round_trip(&cfg, &once), once);
    Ok(())
}

pub fn prop_quantization_error(v: &[f64], bits: u32) -> Result<(), TestCaseError> {
    let cfg = CodecConfig::new(Codec::Quantization { bits }).with_value_bits(64);
    let (payload, sel) = compress_forward(&cfg, v, Mode::Train, &mut rng(0)).unwrap();
    prop_assert!(sel.is_none());
    let ForwardPayload::Quantized(q) = &payload else {
        return Err(TestCaseError::fail("expected a quantized payload"));
    };
    prop_assert!(q.codes.iter().all(|&c| u64::from(c) < 1u64 << bits));
    let dense = decompress_forward(&cfg, &payload, v.len()).unwrap();
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bound = (hi - lo) / 2f64.powi(bits as i32 + 1);
    for (x, y) in v.iter().zip(&dense) {
        // slack for the rounding of the decode arithmetic itself
        prop_assert!((x - y).abs() <= bound + 1e-12 * (1.0 + hi.abs().max(lo.abs())), "{} vs {}", x, y);
    }
    Ok(())
}

pub fn prop_randtopk_alpha_zero(v: &[f64], k: usize, seed: u64) -> Result<(), TestCaseError> {
    let mut r = rng(seed);
    prop_assert_eq!(select_randtopk(v, k, 0.0, &mut r).unwrap(), oracle_topk(v, k));
    // and it left the stream untouched
    prop_assert_eq!(r.gen::<u64>(), rng(seed).gen::<u64>());
    Ok(())
}

pub fn prop_randtopk_inference(v: &[f64], k: usize, alpha: f64, seed: u64) -> Result<(), TestCaseError> {
    let rand_cfg = CodecConfig::new(Codec::RandTopK { k, alpha });
    let top_cfg = CodecConfig::new(Codec::TopK { k });
    let (a, sa) = compress_forward(&rand_cfg, v, Mode::Inference, &mut rng(seed)).unwrap();
    let (b, sb) = compress_forward(&top_cfg, v, Mode::Train, &mut rng(seed)).unwrap();
    prop_assert_eq!(a, b);
    prop_assert_eq!(sa, sb);
    Ok(())
}

// ---------------------------------------------------------------- RandTopk

/// Inclusion probability of every index, summed over every ordered sequence
/// of `k` distinct draws. A draw takes a top index with probability
/// (1 - alpha) / (top left), or another index with probability
/// alpha / (others left); if one group is empty the other gets probability 1.
pub fn enumerate_inclusion(is_top: &[bool], k: usize, alpha: f64) -> Vec<f64> {
    let d = is_top.len();
    let mut inclusion = vec![0.0; d];
    let mut stack: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 1.0)];
    while let Some((seq, p)) = stack.pop() {
        if seq.len() == k {
            for &i in &seq {
                inclusion[i] += p;
            }
            continue;
        }
        let left: Vec<usize> = (0..d).filter(|i| !seq.contains(i)).collect();
        let tops = left.iter().filter(|&&i| is_top[i]).count() as f64;
        let others = left.len() as f64 - tops;
        for &i in &left {
            let q = match (is_top[i], tops == 0.0, others == 0.0) {
                (true, _, true) => 1.0 / tops,
                (true, _, false) => (1.0 - alpha) / tops,
                (false, true, _) => 1.0 / others,
                (false, false, _) => alpha / others,
            };
            let mut next = seq.clone();
            next.push(i);
            stack.push((next, p * q));
        }
    }
    inclusion
}

pub struct FrequencyCheck {
    pub exact: Vec<f64>,
    pub empirical: Vec<f64>,
    /// |empirical - exact| in standard errors of the empirical frequency.
    pub z: Vec<f64>,
}

impl FrequencyCheck {
    pub fn max_z(&self) -> f64 {
        self.z.iter().cloned().fold(0.0, f64::max)
    }
}

/// Draws `draws` selections and compares per-index frequencies to the
/// enumerated probabilities.
pub fn randtopk_frequencies(values: &[f64], k: usize, alpha: f64, draws: usize, seed: u64) -> FrequencyCheck {
    let top = oracle_topk(values, k);
    let is_top: Vec<bool> = (0..values.len()).map(|i| top.contains(&i)).collect();
    let exact = enumerate_inclusion(&is_top, k, alpha);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; values.len()];
    for _ in 0..draws {
        for i in select_randtopk(values, k, alpha, &mut rng).unwrap() {
            counts[i] += 1;
        }
    }
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    let z = empirical
        .iter()
        .zip(&exact)
        .map(|(&f, &p)| {
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            if f == p {
                0.0
            } else if se > 0.0 {
                (f - p).abs() / se
            } else {
                f64::INFINITY
            }
        })
        .collect();
    FrequencyCheck { exact, empirical, z }
}

// ---------------------------------------------------------------- analysis

pub struct GridReport {
    pub points: usize,
    pub holding: usize,
    pub violations: Vec<String>,
}

/// margin_ratio_bound over d in {64,128,256}, alpha*k in {2,3,4},
/// alpha in {0.6,0.75,0.9}, n in {10,100,1000}. Each point is checked against
/// a direct evaluation, and the ratio must exceed 1 wherever the condition
/// n <= sqrt(k/2) * C(d, alpha*k) holds.
pub fn ratio_grid() -> GridReport {
    use splitcomm::analysis::margin_ratio_bound;
    let mut report = GridReport { points: 0, holding: 0, violations: Vec::new() };
    for d in [64usize, 128, 256] {
        for ak in [2usize, 3, 4] {
            for alpha in [0.6, 0.75, 0.9] {
                let k = (ak as f64 / alpha).round() as usize;
                for n in [10usize, 100, 1000] {
                    report.points += 1;
                    let b = margin_ratio_bound(d, k, alpha, n).unwrap();
                    let m = b.alpha_k;
                    let c: f64 = (0..m).map(|i| (d - i) as f64 / (i + 1) as f64).product();
                    let ratio = c * (2.0 * alpha.powi(3) * k as f64 * std::f64::consts::PI).sqrt() / n as f64;
                    let holds = n as f64 <= (k as f64 / 2.0).sqrt() * c;
                    let tag = format!("d={d} k={k} alpha={alpha} n={n}");
                    if (b.ratio / ratio - 1.0).abs() > 1e-9 {
                        report.violations.push(format!("{tag}: ratio {} vs direct {ratio}", b.ratio));
                    }
                    if b.condition_holds != holds {
                        report.violations.push(format!("{tag}: condition flag disagrees"));
                    }
                    if b.condition_holds {
                        report.holding += 1;
                        if !(b.ratio > 1.0) {
                            report.violations.push(format!("{tag}: ratio {} <= 1", b.ratio));
                        }
                    }
                }
            }
        }
    }
    report
}
