//! Deterministic discrete-event simulator: virtual clock, event queue,
//! link delays with a global stabilization time, crash and partition
//! faults, and a running hash of every processed event.

pub mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::ConsensusTimer;
use crate::hash::{Digest, Preimage};
use crate::message::Message;
use crate::nodes::SimNode;
use crate::pipeline::StageDone;
use crate::types::{Micros, NodeId, Role, TxnKey};

pub use config::{ConfigError, FaultBehavior, FaultSpec, SimConfig, Topology, Workload};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum NodeTimer {
    Consensus(ConsensusTimer),
    Stage(StageDone),
    /// Next open-loop submission of a client.
    Submit,
    QueryTimeout {
        key: TxnKey,
        attempt: u32,
    },
    /// Fullnode check that its validator is still making progress.
    Progress,
}

/// Messages and timers produced by one handler call.
pub type Outbox = (Vec<(NodeId, Message)>, Vec<(Micros, NodeTimer)>);

/// What a node handler may do: send messages and arm timers.
pub struct Ctx {
    pub now: Micros,
    pub me: NodeId,
    sends: Vec<(NodeId, Message)>,
    timers: Vec<(Micros, NodeTimer)>,
}

impl Ctx {
    pub fn new(now: Micros, me: NodeId) -> Self {
        Ctx {
            now,
            me,
            sends: Vec::new(),
            timers: Vec::new(),
        }
    }

    pub fn send(&mut self, to: NodeId, msg: Message) {
        self.sends.push((to, msg));
    }

    pub fn timer(&mut self, delay: Micros, timer: NodeTimer) {
        self.timers.push((delay, timer));
    }

    /// Drains what the handler produced; used by tests driving nodes by hand.
    pub fn take(&mut self) -> Outbox {
        (
            std::mem::take(&mut self.sends),
            std::mem::take(&mut self.timers),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkOverride {
    #[serde(with = "config::node_name")]
    pub src: NodeId,
    #[serde(with = "config::node_name")]
    pub dst: NodeId,
    pub delay: Micros,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub delta_cf: Micros,
    pub delta_fv: Micros,
    pub delta_vv: Micros,
    pub gst: Micros,
    /// Upper bound of the uniform delay drawn for messages sent before GST.
    pub pre_gst_max_delay: Micros,
    #[serde(default)]
    pub overrides: Vec<LinkOverride>,
}

impl NetworkConfig {
    pub fn constant(delta_cf: Micros, delta_fv: Micros, delta_vv: Micros) -> Self {
        NetworkConfig {
            delta_cf,
            delta_fv,
            delta_vv,
            gst: 0,
            pre_gst_max_delay: 0,
            overrides: Vec::new(),
        }
    }

    pub fn max_delay(&self) -> Micros {
        let links = self.delta_cf.max(self.delta_fv).max(self.delta_vv);
        self.overrides
            .iter()
            .map(|o| o.delay)
            .fold(links, Micros::max)
    }

    /// Post-GST delay of a link.
    pub fn link_delay(&self, src: NodeId, dst: NodeId) -> Micros {
        if src == dst {
            return 0;
        }
        if let Some(o) = self.overrides.iter().find(|o| o.src == src && o.dst == dst) {
            return o.delay;
        }
        use Role::*;
        match (src.role, dst.role) {
            (Validator, Validator) => self.delta_vv,
            (Fullnode, Validator) | (Validator, Fullnode) | (Fullnode, Fullnode) => self.delta_fv,
            // clients reach validators directly only in client-validator mode
            _ => self.delta_cf,
        }
    }
}

/// Messages between `node` and `peers` sent inside `[from, until)` are
/// held back and delivered after `until`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub node: NodeId,
    pub peers: BTreeSet<NodeId>,
    pub from: Micros,
    pub until: Micros,
}

impl Partition {
    fn blocks(&self, a: NodeId, b: NodeId, now: Micros) -> bool {
        now >= self.from
            && now < self.until
            && ((a == self.node && self.peers.contains(&b))
                || (b == self.node && self.peers.contains(&a)))
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SimError {
    #[error("livelock: {events} events processed by t={now}us without reaching the target")]
    Livelock { events: u64, now: Micros },
}

enum EventKind {
    Deliver { from: NodeId, msg: Message },
    Timer(NodeTimer),
}

struct Event {
    target: NodeId,
    kind: EventKind,
}

/// One processed event, as written to `trace.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceLine {
    pub t: Micros,
    pub seq: u64,
    pub to: String,
    pub from: Option<String>,
    pub kind: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub to_crashed: u64,
    /// Signatures whose signer never signed that digest.
    pub forged: u64,
}

pub struct Simulation {
    now: Micros,
    seq: u64,
    queue: BTreeMap<(Micros, u64), Event>,
    nodes: BTreeMap<NodeId, SimNode>,
    net: NetworkConfig,
    rng: ChaCha8Rng,
    partitions: Vec<Partition>,
    crash_at: BTreeMap<NodeId, Micros>,
    last_arrival: BTreeMap<(NodeId, NodeId), Micros>,
    trace_hash: Digest,
    events: u64,
    pub max_events: u64,
    trace_log: Option<Vec<TraceLine>>,
    pub audit_signatures: bool,
    pub stats: NetStats,
}

impl Simulation {
    pub fn new(net: NetworkConfig, seed: u64) -> Self {
        Simulation {
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            nodes: BTreeMap::new(),
            net,
            rng: ChaCha8Rng::seed_from_u64(seed),
            partitions: Vec::new(),
            crash_at: BTreeMap::new(),
            last_arrival: BTreeMap::new(),
            trace_hash: Digest::ZERO,
            events: 0,
            max_events: 50_000_000,
            trace_log: None,
            audit_signatures: false,
            stats: NetStats::default(),
        }
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn network(&self) -> &NetworkConfig {
        &self.net
    }

    pub fn events_processed(&self) -> u64 {
        self.events
    }

    pub fn trace_hash(&self) -> Digest {
        self.trace_hash
    }

    pub fn record_trace(&mut self, on: bool) {
        self.trace_log = on.then(Vec::new);
    }

    pub fn trace_lines(&self) -> &[TraceLine] {
        self.trace_log.as_deref().unwrap_or(&[])
    }

    pub fn write_trace(&self, mut w: impl Write) -> std::io::Result<()> {
        for line in self.trace_lines() {
            serde_json::to_writer(&mut w, line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn add_node(&mut self, node: SimNode) {
        let id = node.id();
        self.nodes.insert(id, node);
        let mut ctx = Ctx::new(self.now, id);
        self.nodes
            .get_mut(&id)
            .expect("just inserted")
            .on_start(&mut ctx);
        self.flush(ctx);
    }

    pub fn crash(&mut self, node: NodeId, at: Micros) {
        self.crash_at.insert(node, at);
    }

    pub fn partition(&mut self, p: Partition) {
        self.partitions.push(p);
    }

    pub fn is_crashed(&self, node: &NodeId, at: Micros) -> bool {
        self.crash_at.get(node).is_some_and(|&c| at >= c)
    }

    pub fn node(&self, id: &NodeId) -> Option<&SimNode> {
        self.nodes.get(id)
    }

    pub fn node_mut(&mut self, id: &NodeId) -> Option<&mut SimNode> {
        self.nodes.get_mut(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SimNode> {
        self.nodes.values()
    }

    /// Nodes that have not crashed by the current time.
    pub fn live_nodes(&self) -> impl Iterator<Item = &SimNode> {
        self.nodes
            .values()
            .filter(|n| !self.is_crashed(&n.id(), self.now))
    }

    fn push(&mut self, at: Micros, event: Event) {
        self.queue.insert((at, self.seq), event);
        self.seq += 1;
    }

    fn delay(&mut self, src: NodeId, dst: NodeId) -> Micros {
        if src == dst {
            return 0;
        }
        let base = if self.now < self.net.gst {
            self.rng.gen_range(1..=self.net.pre_gst_max_delay.max(1))
        } else {
            self.net.link_delay(src, dst)
        };
        let held = self
            .partitions
            .iter()
            .filter(|p| p.blocks(src, dst, self.now))
            .map(|p| p.until - self.now)
            .max()
            .unwrap_or(0);
        held + base
    }

    fn flush(&mut self, ctx: Ctx) {
        let src = ctx.me;
        for (dst, msg) in ctx.sends {
            self.stats.sent += 1;
            let mut at = self.now + self.delay(src, dst);
            if src != dst {
                // links are FIFO
                let last = self.last_arrival.entry((src, dst)).or_insert(0);
                at = at.max(*last);
                *last = at;
            }
            self.push(
                at,
                Event {
                    target: dst,
                    kind: EventKind::Deliver { from: src, msg },
                },
            );
        }
        for (delay, timer) in ctx.timers {
            self.push(
                self.now + delay,
                Event {
                    target: src,
                    kind: EventKind::Timer(timer),
                },
            );
        }
    }

    fn hash_event(&mut self, seq: u64, ev: &Event) {
        let mut p = Preimage::tagged("event");
        p.digest(&self.trace_hash)
            .u64(self.now)
            .u64(seq)
            .field(&ev.target.encode());
        let kind = match &ev.kind {
            EventKind::Deliver { from, msg } => {
                p.field(&from.encode()).digest(&msg.fingerprint());
                msg.kind().to_string()
            }
            EventKind::Timer(t) => {
                let s = format!("{t:?}");
                p.field(s.as_bytes());
                s
            }
        };
        self.trace_hash = p.finish();
        if let Some(log) = &mut self.trace_log {
            log.push(TraceLine {
                t: self.now,
                seq,
                to: ev.target.to_string(),
                from: match &ev.kind {
                    EventKind::Deliver { from, .. } => Some(from.to_string()),
                    EventKind::Timer(_) => None,
                },
                kind,
            });
        }
    }

    fn audit(&mut self, msg: &Message) {
        for sig in msg.signatures() {
            let signed = match self.nodes.get(&sig.signer()) {
                Some(SimNode::Validator(v)) => {
                    v.consensus.signer().has_signed(&sig.message_digest())
                }
                _ => false,
            };
            if !signed {
                self.stats.forged += 1;
            }
        }
    }

    /// Processes the next event. Returns false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(((at, seq), ev)) = self.queue.pop_first() else {
            return false;
        };
        self.now = at;
        self.events += 1;
        self.hash_event(seq, &ev);
        let target = ev.target;
        if self.is_crashed(&target, at) || !self.nodes.contains_key(&target) {
            if matches!(ev.kind, EventKind::Deliver { .. }) {
                self.stats.to_crashed += 1;
            }
            return true;
        }
        let mut ctx = Ctx::new(at, target);
        match ev.kind {
            EventKind::Deliver { from, msg } => {
                self.stats.delivered += 1;
                if self.audit_signatures {
                    self.audit(&msg);
                }
                self.nodes
                    .get_mut(&target)
                    .expect("checked")
                    .on_message(&mut ctx, from, msg);
            }
            EventKind::Timer(t) => self
                .nodes
                .get_mut(&target)
                .expect("checked")
                .on_timer(&mut ctx, t),
        }
        self.flush(ctx);
        true
    }

    /// Processes every event with fire time at most `t`, then sets the
    /// clock to `t`.
    pub fn run_until(&mut self, t: Micros) -> Result<(), SimError> {
        while self
            .queue
            .first_key_value()
            .is_some_and(|((at, _), _)| *at <= t)
        {
            self.check_ceiling()?;
            self.step();
        }
        self.now = self.now.max(t);
        Ok(())
    }

    pub fn run_to_quiescence(&mut self) -> Result<(), SimError> {
        loop {
            self.check_ceiling()?;
            if !self.step() {
                return Ok(());
            }
        }
    }

    /// Runs until `done` holds, the queue empties, or `limit` is reached.
    pub fn run_while(
        &mut self,
        limit: Micros,
        mut done: impl FnMut(&Simulation) -> bool,
    ) -> Result<(), SimError> {
        while !done(self)
            && self
                .queue
                .first_key_value()
                .is_some_and(|((at, _), _)| *at <= limit)
        {
            self.check_ceiling()?;
            self.step();
        }
        Ok(())
    }

    pub fn is_quiescent(&self) -> bool {
        self.queue.is_empty()
    }

    fn check_ceiling(&self) -> Result<(), SimError> {
        if self.events >= self.max_events {
            return Err(SimError::Livelock {
                events: self.events,
                now: self.now,
            });
        }
        Ok(())
    }
}
