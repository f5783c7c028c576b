//! Two-neuron split model where plain top-1 gets stuck.
//!
//! The bottom model is `o = (w1 x1, w2 x2)` and the top model is the frozen
//! `tanh(o1 + o2)`. Starting from `w1 = 1, w2 = -0.1`, the first neuron wins
//! top-1 on both samples, so `w2` never receives a gradient.

use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodecConfig};
use crate::error::Result;
use crate::nn::{Activation, DenseLayer, FrozenMask, Loss};
use crate::protocol::{FeatureOwner, LabelOwner, LocalLink, OptimizerConfig};

pub const INITIAL_W: [f64; 2] = [1.0, -0.1];
pub const SAMPLES: [[f64; 2]; 2] = [[1.0, 0.0], [0.5, 1.0]];
/// Targets of the two samples under squared error.
pub const TARGETS: [f64; 2] = [1.0, -1.0];
/// Loss of the alpha = 0.1, seed 0 run (lr 0.1) at the step where w2 first
/// drops below -1. Top-1 plateaus at about 1.8166, far above it.
pub const L_ESCAPE: f64 = 0.13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyPoint {
    pub step: usize,
    pub w1: f64,
    pub w2: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub alpha: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// One point every `record_every` steps, plus the final state.
    pub trajectory: Vec<ToyPoint>,
    pub final_w: [f64; 2],
    /// Full-batch loss of the final weights with deterministic top-1.
    pub final_loss: f64,
}

pub fn bottom_model(w: [f64; 2]) -> Result<DenseLayer> {
    DenseLayer::diagonal(&w, Activation::Identity)?.with_frozen(FrozenMask {
        weights: vec![false, true, true, false],
        bias: vec![true, true],
    })
}

pub fn top_model() -> Result<DenseLayer> {
    Ok(DenseLayer::from_parts(2, 1, vec![1.0, 1.0], vec![0.0], Activation::Tanh)?.frozen_all())
}

pub fn loss() -> Loss {
    Loss::SquaredError {
        targets: TARGETS.iter().map(|&t| vec![t]).collect(),
    }
}

/// Trains on both samples per step with top-1 (`alpha = 0`) or RandTop-1.
pub fn run(alpha: f64, steps: usize, lr: f64, seed: u64, record_every: usize) -> Result<ToyRun> {
    let config = CodecConfig::new(Codec::RandTopK { k: 1, alpha }).with_value_bits(64);
    let opt = OptimizerConfig {
        lr,
        momentum: 0.0,
        weight_decay: 0.0,
    };
    let mut fo = FeatureOwner::new(vec![bottom_model(INITIAL_W)?], config, opt, seed)?;
    let mut lo = LabelOwner::new(vec![top_model()?], loss(), config, opt)?;
    let mut link = LocalLink::new();
    link.handshake(&mut fo, &mut lo)?;
    let labels = [0, 1];
    let mut trajectory = Vec::with_capacity(steps / record_every.max(1) + 2);
    let mut record = |step: usize, fo: &mut FeatureOwner, lo: &LabelOwner, link: &mut LocalLink| -> Result<()> {
        let stats = link.evaluate(fo, lo, &SAMPLES, &labels)?;
        let w = fo.bottom()[0].weights();
        trajectory.push(ToyPoint {
            step,
            w1: w[0],
            w2: w[3],
            loss: stats.loss_sum,
        });
        Ok(())
    };
    for step in 0..steps {
        if record_every > 0 && step % record_every == 0 {
            record(step, &mut fo, &lo, &mut link)?;
        }
        link.train_round(&mut fo, &mut lo, &SAMPLES, &labels)?;
    }
    record(steps, &mut fo, &lo, &mut link)?;
    let last = *trajectory.last().expect("final point recorded");
    Ok(ToyRun {
        alpha,
        steps,
        lr,
        seed,
        trajectory,
        final_w: [last.w1, last.w2],
        final_loss: last.loss,
    })
}
