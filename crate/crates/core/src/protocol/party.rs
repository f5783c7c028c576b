//! Feature-owner and label-owner state machines.
//!
//! Each training round is one forward message (feature owner to label owner)
//! answered by one backward message. The feature owner refuses to start a
//! new round while one is outstanding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{
    compress_backward, compress_forward, decompress_backward, decompress_forward, l1_penalty, Codec,
    CodecConfig, ForwardPayload, Mode, SelectionRecord,
};
use crate::error::{Error, Result};
use crate::nn::{self, backward_accumulate, forward, zero_grads, DenseLayer, Loss, Sgd, Tape};
use crate::wire::{self, WireMessage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

struct PendingRound {
    tapes: Vec<Tape>,
    selections: Vec<Option<SelectionRecord>>,
}

/// Holds the input features and the bottom model.
pub struct FeatureOwner {
    bottom: Vec<DenseLayer>,
    config: CodecConfig,
    cut_dim: usize,
    optimizer: Sgd,
    rng: ChaCha8Rng,
    pending: Option<PendingRound>,
    negotiated: bool,
}

impl FeatureOwner {
    /// `seed` drives the feature owner's own random stream (randomized
    /// selection only).
    pub fn new(
        bottom: Vec<DenseLayer>,
        config: CodecConfig,
        optimizer: OptimizerConfig,
        seed: u64,
    ) -> Result<Self> {
        let cut_dim = bottom
            .last()
            .ok_or_else(|| Error::Config("bottom model has no layers".into()))?
            .out_dim();
        config.validate(cut_dim)?;
        let optimizer = Sgd::new(&bottom, optimizer.lr, optimizer.momentum, optimizer.weight_decay)?;
        Ok(Self {
            bottom,
            config,
            cut_dim,
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending: None,
            negotiated: false,
        })
    }

    pub fn bottom(&self) -> &[DenseLayer] {
        &self.bottom
    }

    pub fn into_bottom(self) -> Vec<DenseLayer> {
        self.bottom
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn cut_dim(&self) -> usize {
        self.cut_dim
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.optimizer.lr = lr;
    }

    pub fn has_pending_round(&self) -> bool {
        self.pending.is_some()
    }

    pub fn handshake(&self) -> Result<WireMessage> {
        wire::encode_handshake(&self.config, self.cut_dim)
    }

    /// Checks the label owner's reply against our own parameters.
    pub fn confirm_handshake(&mut self, reply: &WireMessage) -> Result<()> {
        let (theirs, d) = wire::decode_handshake(reply)?;
        if theirs != self.config || d != self.cut_dim {
            return Err(Error::Handshake(format!(
                "label owner has {theirs:?} at d = {d}, we have {:?} at d = {}",
                self.config, self.cut_dim
            )));
        }
        self.negotiated = true;
        Ok(())
    }

    /// Runs the bottom model on a batch and compresses every activation.
    /// In training mode the round stays open until [`Self::backward`].
    pub fn forward<I: AsRef<[f64]>>(&mut self, inputs: &[I], mode: Mode) -> Result<WireMessage> {
        if !self.negotiated {
            return Err(Error::ProtocolState("forward before handshake".into()));
        }
        if self.pending.is_some() {
            return Err(Error::ProtocolState(
                "previous forward has not been answered".into(),
            ));
        }
        if inputs.is_empty() {
            return Err(Error::ProtocolState("empty batch".into()));
        }
        let mut payloads = Vec::with_capacity(inputs.len());
        let mut tapes = Vec::with_capacity(inputs.len());
        let mut selections = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (activation, tape) = forward(&self.bottom, x.as_ref())?;
            let (payload, selection) = compress_forward(&self.config, &activation, mode, &mut self.rng)?;
            if mode == Mode::Train {
                tapes.push(tape);
                selections.push(selection);
            }
            payloads.push(payload);
        }
        let msg = wire::encode_forward(&self.config, self.cut_dim, &payloads)?;
        if mode == Mode::Train {
            self.pending = Some(PendingRound { tapes, selections });
        }
        Ok(msg)
    }

    /// Applies the received cut-layer gradients and updates the bottom model.
    pub fn backward(&mut self, msg: &WireMessage) -> Result<()> {
        let round = self
            .pending
            .take()
            .ok_or_else(|| Error::ProtocolState("backward without an outstanding forward".into()))?;
        let records = wire::decode_backward(&self.config, self.cut_dim, msg)?;
        if records.len() != round.tapes.len() {
            return Err(Error::ProtocolState(format!(
                "backward carries {} instances, forward had {}",
                records.len(),
                round.tapes.len()
            )));
        }
        let scale = 1.0 / records.len() as f64;
        let mut grads = zero_grads(&self.bottom);
        for ((values, tape), selection) in records.iter().zip(&round.tapes).zip(&round.selections) {
            let mut g = decompress_backward(&self.config, values, selection.as_ref(), self.cut_dim)?;
            if let Codec::L1 { lambda, .. } = self.config.codec {
                // penalty lambda * sum|o| on the true activation, averaged over the batch
                let (_, extra) = l1_penalty(tape.output(), lambda);
                for (gi, e) in g.iter_mut().zip(extra) {
                    *gi += e * scale;
                }
            }
            backward_accumulate(&self.bottom, tape, &g, &mut grads)?;
        }
        self.optimizer.step(&mut self.bottom, &grads)
    }
}

/// Loss and accuracy counts for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchStats {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl BatchStats {
    pub fn merge(&mut self, other: BatchStats) {
        self.loss_sum += other.loss_sum;
        self.correct += other.correct;
        self.count += other.count;
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.count.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count.max(1) as f64
    }
}

/// Holds the labels and the top model.
pub struct LabelOwner {
    top: Vec<DenseLayer>,
    loss: Loss,
    config: CodecConfig,
    cut_dim: usize,
    optimizer: Sgd,
    negotiated: bool,
    kept_entries: u64,
    kept_instances: u64,
}

fn selection_of(payload: &ForwardPayload) -> Option<SelectionRecord> {
    match payload {
        ForwardPayload::Sparse(s) => Some(SelectionRecord(s.indices().to_vec())),
        ForwardPayload::Truncated(v) => Some(SelectionRecord((0..v.len()).collect())),
        _ => None,
    }
}

impl LabelOwner {
    pub fn new(
        top: Vec<DenseLayer>,
        loss: Loss,
        config: CodecConfig,
        optimizer: OptimizerConfig,
    ) -> Result<Self> {
        let cut_dim = top
            .first()
            .ok_or_else(|| Error::Config("top model has no layers".into()))?
            .in_dim();
        config.validate(cut_dim)?;
        let optimizer = Sgd::new(&top, optimizer.lr, optimizer.momentum, optimizer.weight_decay)?;
        Ok(Self {
            top,
            loss,
            config,
            cut_dim,
            optimizer,
            negotiated: false,
            kept_entries: 0,
            kept_instances: 0,
        })
    }

    /// Mean number of sparse entries received per training instance.
    pub fn mean_kept(&self) -> Option<f64> {
        (self.kept_instances > 0).then(|| self.kept_entries as f64 / self.kept_instances as f64)
    }

    pub fn top(&self) -> &[DenseLayer] {
        &self.top
    }

    pub fn into_top(self) -> Vec<DenseLayer> {
        self.top
    }

    pub fn loss(&self) -> &Loss {
        &self.loss
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.optimizer.lr = lr;
    }

    /// Validates the feature owner's proposal and returns our reply.
    pub fn accept_handshake(&mut self, msg: &WireMessage) -> Result<WireMessage> {
        let (theirs, d) = wire::decode_handshake(msg)?;
        if theirs != self.config || d != self.cut_dim {
            return Err(Error::Handshake(format!(
                "feature owner proposed {theirs:?} at d = {d}, we expect {:?} at d = {}",
                self.config, self.cut_dim
            )));
        }
        self.negotiated = true;
        wire::encode_handshake(&self.config, self.cut_dim)
    }

    /// Decodes a forward message into the activations the top model sees.
    pub fn decode_activations(&self, msg: &WireMessage) -> Result<Vec<(Vec<f64>, Option<SelectionRecord>)>> {
        if !self.negotiated {
            return Err(Error::ProtocolState("forward before handshake".into()));
        }
        wire::decode_forward(&self.config, self.cut_dim, msg)?
            .iter()
            .map(|p| Ok((decompress_forward(&self.config, p, self.cut_dim)?, selection_of(p))))
            .collect()
    }

    /// One training step: loss on the decompressed activations, top model
    /// update, and the compressed cut-layer gradients to send back.
    pub fn step(&mut self, msg: &WireMessage, labels: &[usize]) -> Result<(BatchStats, WireMessage)> {
        let inputs = self.decode_activations(msg)?;
        if inputs.len() != labels.len() {
            return Err(Error::ProtocolState(format!(
                "forward carries {} instances but {} labels are scheduled",
                inputs.len(),
                labels.len()
            )));
        }
        let scale = 1.0 / inputs.len() as f64;
        let mut grads = zero_grads(&self.top);
        let mut stats = BatchStats::default();
        let mut records = Vec::with_capacity(inputs.len());
        for ((activation, selection), &label) in inputs.iter().zip(labels) {
            if let Some(sel) = selection {
                self.kept_entries += sel.0.len() as u64;
                self.kept_instances += 1;
            }
            let (output, tape) = forward(&self.top, activation)?;
            let (loss, mut g) = self.loss.evaluate(&output, label)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {loss}")));
            }
            stats.loss_sum += loss;
            stats.correct += usize::from(self.loss.predict(&output) == label);
            stats.count += 1;
            g.iter_mut().for_each(|v| *v *= scale);
            let grad_cut = backward_accumulate(&self.top, &tape, &g, &mut grads)?;
            records.push(compress_backward(&self.config, &grad_cut, selection.as_ref())?);
        }
        let reply = wire::encode_backward(&self.config, self.cut_dim, &records)?;
        self.optimizer.step(&mut self.top, &grads)?;
        Ok((stats, reply))
    }

    /// Scores an inference-mode forward message without training.
    pub fn evaluate(&self, msg: &WireMessage, labels: &[usize]) -> Result<BatchStats> {
        let inputs = self.decode_activations(msg)?;
        if inputs.len() != labels.len() {
            return Err(Error::ProtocolState(format!(
                "forward carries {} instances but {} labels are scheduled",
                inputs.len(),
                labels.len()
            )));
        }
        let mut stats = BatchStats::default();
        for ((activation, _), &label) in inputs.iter().zip(labels) {
            let output = nn::predict(&self.top, activation)?;
            let (loss, _) = self.loss.evaluate(&output, label)?;
            stats.loss_sum += loss;
            stats.correct += usize::from(self.loss.predict(&output) == label);
            stats.count += 1;
        }
        Ok(stats)
    }
}
