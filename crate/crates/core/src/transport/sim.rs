//! Virtual-time network: per-link bandwidth and latency, FIFO links, and
//! scripted message drops.
//!
//! A link transmits one message at a time. A message sent at `now` starts when
//! the link is free, takes `size / bandwidth`, then arrives `latency` later. On an
//! idle link that is exactly `now + latency + size / bandwidth`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::fault::WorkerId;
use crate::transport::MessageKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds.
    pub latency: f64,
}

/// Drops messages on one directed link.
#[derive(Debug, Clone, PartialEq)]
pub struct DropRule {
    pub from: WorkerId,
    pub to: WorkerId,
    pub batch: Option<i64>,
    pub kind: Option<MessageKind>,
    pub from_time: f64,
    pub until: Option<f64>,
    /// Drop at most this many messages; `None` for no limit.
    pub remaining: Option<u32>,
}

impl DropRule {
    fn matches(
        &self,
        now: f64,
        from: WorkerId,
        to: WorkerId,
        kind: MessageKind,
        batch: Option<i64>,
    ) -> bool {
        self.from == from
            && self.to == to
            && now >= self.from_time
            && self.until.is_none_or(|u| now < u)
            && self.kind.is_none_or(|k| k == kind)
            && self.batch.is_none_or(|b| batch == Some(b))
            && self.remaining.is_none_or(|r| r > 0)
    }
}

#[derive(Debug, Clone)]
pub struct SimNetwork {
    default: LinkParams,
    links: BTreeMap<(WorkerId, WorkerId), LinkParams>,
    link_free: BTreeMap<(WorkerId, WorkerId), f64>,
    drops: Vec<DropRule>,
    sent: u64,
    dropped: u64,
}

impl SimNetwork {
    pub fn new(default: LinkParams) -> Self {
        SimNetwork {
            default,
            links: BTreeMap::new(),
            link_free: BTreeMap::new(),
            drops: Vec::new(),
            sent: 0,
            dropped: 0,
        }
    }

    /// Sets both directions between `a` and `b`.
    pub fn set_link(&mut self, a: WorkerId, b: WorkerId, params: LinkParams) {
        self.links.insert((a, b), params);
        self.links.insert((b, a), params);
    }

    pub fn set_directed(&mut self, from: WorkerId, to: WorkerId, params: LinkParams) {
        self.links.insert((from, to), params);
    }

    pub fn link(&self, from: WorkerId, to: WorkerId) -> LinkParams {
        self.links.get(&(from, to)).copied().unwrap_or(self.default)
    }

    /// The configured bandwidth, which is what a probe would measure.
    pub fn measure_bandwidth(&self, from: WorkerId, to: WorkerId) -> f64 {
        self.link(from, to).bandwidth
    }

    pub fn add_drop(&mut self, rule: DropRule) {
        self.drops.push(rule);
    }

    /// Consumes a matching drop rule, if any.
    pub fn should_drop(
        &mut self,
        now: f64,
        from: WorkerId,
        to: WorkerId,
        kind: MessageKind,
        batch: Option<i64>,
    ) -> bool {
        for rule in &mut self.drops {
            if rule.matches(now, from, to, kind, batch) {
                if let Some(r) = rule.remaining.as_mut() {
                    *r -= 1;
                }
                self.dropped += 1;
                return true;
            }
        }
        false
    }

    /// Delivery time of `bytes` sent at `now`. Messages to self arrive immediately.
    pub fn transmit(&mut self, now: f64, from: WorkerId, to: WorkerId, bytes: usize) -> f64 {
        self.sent += 1;
        if from == to {
            return now;
        }
        let p = self.link(from, to);
        let free = self.link_free.entry((from, to)).or_insert(0.0);
        let start = now.max(*free);
        let done = start + bytes as f64 / p.bandwidth;
        *free = done;
        done + p.latency
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}
