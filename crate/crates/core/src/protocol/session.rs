//! Lock-step training and inference sessions between the two parties.
//!
//! Both parties follow the same [`Schedule`]: the shuffled batch order is
//! derived from a seed both sides know, so the label owner can line up its
//! labels with each forward message without sample ids on the wire.

use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Mode;
use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::protocol::ledger::{Party, TrafficLedger};
use crate::protocol::party::{BatchStats, FeatureOwner, LabelOwner};
use crate::protocol::transport::{Bucket, Metered, Transport};
use crate::wire::WireMessage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by 0.1.
    pub lr_decay_epochs: Vec<usize>,
    pub shuffle_seed: u64,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    /// 0 means only the last epoch.
    pub eval_every: usize,
    pub eval_batch_size: usize,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("epochs and batch sizes must be > 0".into()));
        }
        if self.batch_size > u16::MAX as usize || self.eval_batch_size > u16::MAX as usize {
            return Err(Error::Config("batch sizes must fit in 16 bits".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * 0.1f64.powi(decays as i32)
    }

    /// Shuffled mini-batches of sample indices for one epoch.
    pub fn batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.shuffle_seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    pub fn evaluates(&self, epoch: usize) -> bool {
        epoch + 1 == self.epochs || (self.eval_every > 0 && (epoch + 1) % self.eval_every == 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's batches, as seen by the label owner.
    pub train_loss: f64,
    pub train_accuracy: Option<f64>,
    pub train_eval_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged(String),
    Aborted(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub training_traffic: TrafficLedger,
    pub evaluation_traffic: TrafficLedger,
    /// Mean sparse entries per training instance (sparsifying codecs only).
    pub mean_kept: Option<f64>,
    /// Instances that completed a training round.
    pub trained_instances: u64,
    pub status: RunStatus,
}

impl TrainingHistory {
    pub fn empty() -> Self {
        Self {
            epochs: Vec::new(),
            trained_instances: 0,
            training_traffic: TrafficLedger::default(),
            evaluation_traffic: TrafficLedger::default(),
            mean_kept: None,
            status: RunStatus::Completed,
        }
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.test_accuracy)
    }

    pub fn final_train_accuracy(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.train_accuracy)
    }
}

fn recv_message<T: Transport>(t: &mut T) -> Result<WireMessage> {
    Ok(WireMessage::decode(&t.recv()?)?)
}

fn gather<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Feature-owner side of a training session.
pub fn run_feature_owner<T: Transport>(
    fo: &mut FeatureOwner,
    t: &mut Metered<T>,
    train_inputs: &[Vec<f64>],
    test_inputs: &[Vec<f64>],
    schedule: &Schedule,
) -> Result<()> {
    schedule.validate()?;
    t.set_bucket(Bucket::Training);
    t.send(&fo.handshake()?.encode())?;
    fo.confirm_handshake(&recv_message(t)?)?;
    for epoch in 0..schedule.epochs {
        fo.set_lr(schedule.lr_at(epoch));
        for batch in schedule.batches(train_inputs.len(), epoch) {
            let inputs: Vec<&[f64]> = batch.iter().map(|&i| train_inputs[i].as_slice()).collect();
            t.send(&fo.forward(&inputs, Mode::Train)?.encode())?;
            fo.backward(&recv_message(t)?)?;
        }
        if schedule.evaluates(epoch) {
            t.set_bucket(Bucket::Evaluation);
            for set in [train_inputs, test_inputs] {
                for chunk in set.chunks(schedule.eval_batch_size) {
                    t.send(&fo.forward(chunk, Mode::Inference)?.encode())?;
                }
            }
            t.set_bucket(Bucket::Training);
        }
    }
    Ok(())
}

/// Label-owner side of a training session. Appends to `history` as epochs
/// complete, so a failed session still leaves the finished epochs behind.
pub fn run_label_owner<T: Transport>(
    lo: &mut LabelOwner,
    t: &mut Metered<T>,
    train_labels: &[usize],
    test_labels: &[usize],
    schedule: &Schedule,
    history: &mut TrainingHistory,
) -> Result<()> {
    schedule.validate()?;
    t.set_bucket(Bucket::Training);
    let result = (|| {
        let proposal = recv_message(t)?;
        t.send(&lo.accept_handshake(&proposal)?.encode())?;
        for epoch in 0..schedule.epochs {
            let lr = schedule.lr_at(epoch);
            lo.set_lr(lr);
            let mut train = BatchStats::default();
            for batch in schedule.batches(train_labels.len(), epoch) {
                let msg = recv_message(t)?;
                let (stats, reply) = lo.step(&msg, &gather(train_labels, &batch))?;
                t.send(&reply.encode())?;
                history.trained_instances += stats.count as u64;
                train.merge(stats);
            }
            let mut record = EpochRecord {
                epoch,
                lr,
                train_loss: train.mean_loss(),
                train_accuracy: None,
                train_eval_loss: None,
                test_accuracy: None,
                test_loss: None,
            };
            if schedule.evaluates(epoch) {
                t.set_bucket(Bucket::Evaluation);
                let mut scores = [BatchStats::default(); 2];
                for (score, labels) in scores.iter_mut().zip([train_labels, test_labels]) {
                    for chunk in labels.chunks(schedule.eval_batch_size) {
                        score.merge(lo.evaluate(&recv_message(t)?, chunk)?);
                    }
                }
                t.set_bucket(Bucket::Training);
                record.train_accuracy = Some(scores[0].accuracy());
                record.train_eval_loss = Some(scores[0].mean_loss());
                record.test_accuracy = Some(scores[1].accuracy());
                record.test_loss = Some(scores[1].mean_loss());
            }
            log::debug!(
                "epoch {epoch}: train loss {:.4}, test acc {:?}",
                record.train_loss,
                record.test_accuracy
            );
            history.epochs.push(record);
        }
        Ok(())
    })();
    history.training_traffic = *t.training_ledger();
    history.evaluation_traffic = *t.evaluation_ledger();
    history.mean_kept = lo.mean_kept();
    result
}

/// Runs both parties concurrently over a connected transport pair.
///
/// Handshake refusal is returned as an error. Numeric failures mark the
/// history as diverged and transport failures as aborted; either way the
/// completed epochs are kept.
pub fn run_training<A: Transport, B: Transport>(
    fo: &mut FeatureOwner,
    lo: &mut LabelOwner,
    transports: (A, B),
    train: &Batch,
    test: &Batch,
    schedule: &Schedule,
) -> Result<TrainingHistory> {
    schedule.validate()?;
    let (fo_t, lo_t) = transports;
    let mut history = TrainingHistory::empty();
    let (fo_res, lo_res) = thread::scope(|s| {
        let fo_thread = s.spawn(move || {
            let mut t = Metered::new(fo_t, Party::FeatureOwner);
            run_feature_owner(fo, &mut t, &train.inputs, &test.inputs, schedule)
        });
        let mut t = Metered::new(lo_t, Party::LabelOwner);
        let lo_res = run_label_owner(lo, &mut t, &train.labels, &test.labels, schedule, &mut history);
        // closing our end unblocks a feature owner still waiting for a reply
        drop(t);
        let fo_res = fo_thread.join().expect("feature owner thread panicked");
        (fo_res, lo_res)
    });
    history.status = classify(fo_res, lo_res)?;
    Ok(history)
}

fn classify(fo: Result<()>, lo: Result<()>) -> Result<RunStatus> {
    let errors: Vec<Error> = [fo.err(), lo.err()].into_iter().flatten().collect();
    if errors.is_empty() {
        return Ok(RunStatus::Completed);
    }
    if let Some(pos) = errors.iter().position(|e| matches!(e, Error::Handshake(_))) {
        return Err(errors.into_iter().nth(pos).expect("index in range"));
    }
    if let Some(e) = errors.iter().find(|e| matches!(e, Error::Numeric(_))) {
        return Ok(RunStatus::Diverged(e.to_string()));
    }
    let root = errors
        .iter()
        .find(|e| !matches!(e, Error::Disconnected))
        .unwrap_or(&errors[0]);
    Ok(RunStatus::Aborted(root.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub accuracy: f64,
    pub loss: f64,
    pub traffic: TrafficLedger,
}

/// Forward-only pass over `data`. Randomized selection is disabled.
pub fn run_inference<A: Transport, B: Transport>(
    fo: &mut FeatureOwner,
    lo: &mut LabelOwner,
    transports: (A, B),
    data: &Batch,
    batch_size: usize,
) -> Result<InferenceReport> {
    if batch_size == 0 || batch_size > u16::MAX as usize {
        return Err(Error::Config("batch size must be in 1..=65535".into()));
    }
    let (fo_t, lo_t) = transports;
    let (fo_res, lo_res) = thread::scope(|s| {
        let fo_thread = s.spawn(move || -> Result<()> {
            let mut t = Metered::new(fo_t, Party::FeatureOwner);
            t.send(&fo.handshake()?.encode())?;
            fo.confirm_handshake(&recv_message(&mut t)?)?;
            for chunk in data.inputs.chunks(batch_size) {
                t.send(&fo.forward(chunk, Mode::Inference)?.encode())?;
            }
            Ok(())
        });
        let lo_res = (|| -> Result<(BatchStats, TrafficLedger)> {
            let mut t = Metered::new(lo_t, Party::LabelOwner);
            let proposal = recv_message(&mut t)?;
            t.send(&lo.accept_handshake(&proposal)?.encode())?;
            let mut stats = BatchStats::default();
            for chunk in data.labels.chunks(batch_size) {
                stats.merge(lo.evaluate(&recv_message(&mut t)?, chunk)?);
            }
            Ok((stats, *t.training_ledger()))
        })();
        (fo_thread.join().expect("feature owner thread panicked"), lo_res)
    });
    let (stats, traffic) = lo_res?;
    fo_res?;
    Ok(InferenceReport {
        accuracy: stats.accuracy(),
        loss: stats.mean_loss(),
        traffic,
    })
}

/// Drives both parties from one thread, passing encoded bytes directly.
/// Used where a pair of threads would only add scheduling noise, such as
/// thousands of single-sample rounds.
#[derive(Debug, Default)]
pub struct LocalLink {
    ledger: TrafficLedger,
}

impl LocalLink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ledger(&self) -> &TrafficLedger {
        &self.ledger
    }

    fn carry(&mut self, sender: Party, msg: &WireMessage) -> Result<WireMessage> {
        let bytes = msg.encode();
        let received = WireMessage::decode(&bytes)?;
        self.ledger.record(sender, received.header.msg_type, received.payload.len());
        Ok(received)
    }

    pub fn handshake(&mut self, fo: &mut FeatureOwner, lo: &mut LabelOwner) -> Result<()> {
        let proposal = self.carry(Party::FeatureOwner, &fo.handshake()?)?;
        let reply = lo.accept_handshake(&proposal)?;
        let reply = self.carry(Party::LabelOwner, &reply)?;
        fo.confirm_handshake(&reply)
    }

    pub fn train_round<I: AsRef<[f64]>>(
        &mut self,
        fo: &mut FeatureOwner,
        lo: &mut LabelOwner,
        inputs: &[I],
        labels: &[usize],
    ) -> Result<BatchStats> {
        let fwd = self.carry(Party::FeatureOwner, &fo.forward(inputs, Mode::Train)?)?;
        let (stats, bwd) = lo.step(&fwd, labels)?;
        let bwd = self.carry(Party::LabelOwner, &bwd)?;
        fo.backward(&bwd)?;
        Ok(stats)
    }

    pub fn evaluate<I: AsRef<[f64]>>(
        &mut self,
        fo: &mut FeatureOwner,
        lo: &LabelOwner,
        inputs: &[I],
        labels: &[usize],
    ) -> Result<BatchStats> {
        let fwd = self.carry(Party::FeatureOwner, &fo.forward(inputs, Mode::Inference)?)?;
        lo.evaluate(&fwd, labels)
    }
}
