use serde::{Deserialize, Serialize};

use crate::wire::{MessageType, HEADER_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Party {
    FeatureOwner,
    LabelOwner,
}

impl Party {
    pub fn peer(self) -> Party {
        match self {
            Party::FeatureOwner => Party::LabelOwner,
            Party::LabelOwner => Party::FeatureOwner,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counter {
    pub payload_bytes: u64,
    pub framing_bytes: u64,
    pub messages: u64,
}

impl Counter {
    pub fn total_bytes(&self) -> u64 {
        self.payload_bytes + self.framing_bytes
    }

    fn add(&mut self, payload_len: usize) {
        self.payload_bytes += payload_len as u64;
        self.framing_bytes += HEADER_LEN as u64;
        self.messages += 1;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCounters {
    pub handshake: Counter,
    pub forward: Counter,
    pub backward: Counter,
}

impl PhaseCounters {
    fn get_mut(&mut self, phase: MessageType) -> &mut Counter {
        match phase {
            MessageType::Handshake => &mut self.handshake,
            MessageType::Forward => &mut self.forward,
            MessageType::Backward => &mut self.backward,
        }
    }

    pub fn get(&self, phase: MessageType) -> Counter {
        match phase {
            MessageType::Handshake => self.handshake,
            MessageType::Forward => self.forward,
            MessageType::Backward => self.backward,
        }
    }

    pub fn total(&self) -> Counter {
        [self.handshake, self.forward, self.backward]
            .iter()
            .fold(Counter::default(), |acc, c| Counter {
                payload_bytes: acc.payload_bytes + c.payload_bytes,
                framing_bytes: acc.framing_bytes + c.framing_bytes,
                messages: acc.messages + c.messages,
            })
    }
}

/// Byte counts per direction and message phase. Payload bytes are what the
/// compressed-size ratios describe; framing bytes are the fixed headers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficLedger {
    pub feature_to_label: PhaseCounters,
    pub label_to_feature: PhaseCounters,
}

impl TrafficLedger {
    pub fn record(&mut self, sender: Party, phase: MessageType, payload_len: usize) {
        let side = match sender {
            Party::FeatureOwner => &mut self.feature_to_label,
            Party::LabelOwner => &mut self.label_to_feature,
        };
        side.get_mut(phase).add(payload_len);
    }

    /// Forward activations always travel feature owner -> label owner.
    pub fn forward(&self) -> Counter {
        self.feature_to_label.forward
    }

    pub fn backward(&self) -> Counter {
        self.label_to_feature.backward
    }

    pub fn handshake(&self) -> Counter {
        let (a, b) = (self.feature_to_label.handshake, self.label_to_feature.handshake);
        Counter {
            payload_bytes: a.payload_bytes + b.payload_bytes,
            framing_bytes: a.framing_bytes + b.framing_bytes,
            messages: a.messages + b.messages,
        }
    }
}
