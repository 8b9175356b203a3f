//! Simulated LAN with per-link latency, random loss and partitions.

use std::collections::BTreeSet;

use gridswarm_core::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::messages::FleetMessage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkModel {
    pub latency_ticks: u64,
    pub drop_probability: f64,
    /// Addresses currently unreachable.
    pub partitioned: BTreeSet<String>,
    pub seed: u64,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            latency_ticks: 1,
            drop_probability: 0.0,
            partitioned: BTreeSet::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct LanStats {
    pub sent: u64,
    pub delivered: u64,
    pub lost: u64,
    pub partitioned: u64,
}

#[derive(Debug, Clone)]
pub struct Lan {
    pub model: LinkModel,
    in_flight: Vec<(u64, u64, FleetMessage)>,
    counter: u64,
    stats: LanStats,
}

impl Lan {
    pub fn new(model: LinkModel) -> Self {
        Self {
            model,
            in_flight: Vec::new(),
            counter: 0,
            stats: LanStats::default(),
        }
    }

    pub fn stats(&self) -> LanStats {
        self.stats
    }

    pub fn is_reachable(&self, address: &str) -> bool {
        !self.model.partitioned.contains(address)
    }

    pub fn partition(&mut self, address: &str) {
        self.model.partitioned.insert(address.to_owned());
    }

    pub fn heal(&mut self, address: &str) {
        self.model.partitioned.remove(address);
    }

    pub fn send(&mut self, msg: FleetMessage, now: u64) {
        let n = self.counter;
        self.counter += 1;
        self.stats.sent += 1;
        if !self.is_reachable(&msg.sender) || !self.is_reachable(&msg.receiver) {
            self.stats.partitioned += 1;
            return;
        }
        if self.model.drop_probability > 0.0 {
            let u: f64 = rng::stream(self.model.seed, &[0x1A4, n]).random();
            if u < self.model.drop_probability {
                self.stats.lost += 1;
                return;
            }
        }
        self.in_flight.push((now + self.model.latency_ticks, n, msg));
    }

    /// Messages due by `now`, in send order. A partition that began while a
    /// message was in flight also swallows it.
    pub fn deliver(&mut self, now: u64) -> Vec<FleetMessage> {
        let (mut due, rest): (Vec<_>, Vec<_>) =
            self.in_flight.drain(..).partition(|(at, _, _)| *at <= now);
        self.in_flight = rest;
        due.sort_by_key(|(at, n, _)| (*at, *n));
        let mut out = Vec::with_capacity(due.len());
        for (_, _, msg) in due {
            if self.is_reachable(&msg.sender) && self.is_reachable(&msg.receiver) {
                self.stats.delivered += 1;
                out.push(msg);
            } else {
                self.stats.partitioned += 1;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messages::Payload;

    fn ack(seq: u64) -> FleetMessage {
        FleetMessage::new("a", "b", 0, Payload::Ack { seq })
    }

    #[test]
    fn latency_delays_delivery() {
        let mut lan = Lan::new(LinkModel {
            latency_ticks: 2,
            ..Default::default()
        });
        lan.send(ack(1), 0);
        assert!(lan.deliver(1).is_empty());
        assert_eq!(lan.deliver(2), vec![ack(1)]);
    }

    #[test]
    fn partition_blocks_both_directions() {
        let mut lan = Lan::new(LinkModel::default());
        lan.partition("b");
        lan.send(ack(1), 0);
        lan.send(FleetMessage::new("b", "a", 0, Payload::Ack { seq: 2 }), 0);
        assert!(lan.deliver(5).is_empty());
        lan.heal("b");
        lan.send(ack(3), 5);
        assert_eq!(lan.deliver(6).len(), 1);
    }

    #[test]
    fn loss_is_seeded() {
        let run = |seed| {
            let mut lan = Lan::new(LinkModel {
                drop_probability: 0.3,
                seed,
                ..Default::default()
            });
            for i in 0..200 {
                lan.send(ack(i), i);
            }
            lan.deliver(1000).iter().map(|m| m.to_json()).collect::<Vec<_>>()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
        let n = run(4).len();
        assert!((110..170).contains(&n), "{n}");
    }
}
