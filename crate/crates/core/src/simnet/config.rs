//! TOML run configuration and construction of a simulation from it.
//!
//! All durations are integer microseconds.
//!
//! ```toml
//! seed = 7
//!
//! [network]
//! delta_cf = 1000
//! delta_fv = 1000
//! delta_vv = 50000
//! gst = 0
//! pre_gst_max_delay = 0
//!
//! [consensus]
//! n = 4
//! f = 1
//! round_timeout = 1000000
//!
//! [pipeline]
//! variant = "zaptos"          # or a table of the four flags
//!
//! [pipeline.gas]
//! exec_time_per_gas = 20
//!
//! [topology]
//! fullnodes = 1
//! clients = 1
//!
//! [workload]
//! txns = 100
//! rate_tps = 200
//!
//! [[faults]]
//! node = "v1"
//! behavior = { kind = "crash", at = 0 }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::consensus::{Behavior, Consensus, ConsensusConfig};
use crate::multisig::ValidatorSet;
use crate::nodes::{Client, Fullnode, SimNode, Validator};
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::types::{genesis_block, AccountId, Micros, NodeId, Transaction, SECOND};

use super::{NetworkConfig, Partition, Simulation};

/// Serde helper writing a [`NodeId`] as `v3`, `fn0`, `c2`.
pub mod node_name {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::types::NodeId;

    pub fn serialize<S: Serializer>(id: &NodeId, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(id)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NodeId, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

mod node_names {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::types::NodeId;

    pub fn serialize<S: Serializer>(ids: &[NodeId], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(ids.iter().map(|i| i.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<NodeId>, D::Error> {
        let v = Vec::<String>::deserialize(d)?;
        v.iter()
            .map(|s| s.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultBehavior {
    Honest,
    Crash {
        at: Micros,
    },
    Equivocate {
        #[serde(default)]
        double_vote: bool,
    },
    /// Messages between the node and `peers` are held during `[from, until)`.
    Partition {
        #[serde(with = "node_names")]
        peers: Vec<NodeId>,
        from: Micros,
        until: Micros,
    },
}

impl FaultBehavior {
    /// Whether the node counts against the fault budget. A partition that
    /// heals by GST is indistinguishable from pre-GST asynchrony.
    pub fn is_faulty(&self, gst: Micros) -> bool {
        match self {
            FaultBehavior::Honest => false,
            FaultBehavior::Crash { .. } | FaultBehavior::Equivocate { .. } => true,
            FaultBehavior::Partition { until, .. } => *until > gst,
        }
    }

    /// Whether the node runs the protocol as written.
    pub fn is_honest(&self) -> bool {
        !matches!(
            self,
            FaultBehavior::Equivocate { .. } | FaultBehavior::Crash { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    #[serde(with = "node_name")]
    pub node: NodeId,
    pub behavior: FaultBehavior,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Topology {
    pub fullnodes: usize,
    pub clients: usize,
    /// Clients talk to validators directly; fullnodes still run if any.
    pub direct: bool,
    pub query_timeout: Micros,
    pub progress_timeout: Micros,
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            fullnodes: 1,
            clients: 1,
            direct: false,
            query_timeout: 30 * SECOND,
            progress_timeout: 10 * SECOND,
        }
    }
}

/// Open-loop transfer workload. Transaction `k` is submitted at
/// `start + k * 1e6 / rate_tps` by client `sender(k) mod clients`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workload {
    pub txns: u64,
    pub rate_tps: u64,
    pub start: Micros,
    pub accounts: u64,
    pub initial_balance: u64,
    pub amount: u64,
    pub payload_len: usize,
}

impl Default for Workload {
    fn default() -> Self {
        Workload {
            txns: 0,
            rate_tps: 100,
            start: 0,
            accounts: 64,
            initial_balance: 1_000_000,
            amount: 1,
            payload_len: crate::types::DEFAULT_PAYLOAD_LEN,
        }
    }
}

impl Workload {
    pub fn time_of(&self, k: u64) -> Micros {
        self.start + (k as u128 * SECOND as u128 / self.rate_tps.max(1) as u128) as Micros
    }

    pub fn sender(&self, k: u64) -> u64 {
        k % self.accounts
    }

    pub fn txn(&self, k: u64) -> Transaction {
        let sender = self.sender(k);
        static ZEROS: [u8; 4096] = [0; 4096];
        let payload = match ZEROS.get(..self.payload_len) {
            Some(z) => Bytes::from_static(z),
            None => Bytes::from(vec![0u8; self.payload_len]),
        };
        Transaction {
            sender: AccountId(sender),
            recipient: AccountId((sender + 1) % self.accounts),
            amount: self.amount,
            nonce: k / self.accounts,
            payload_bytes: payload,
            submit_time: 0,
        }
    }

    /// Horizon after which no more transactions are submitted.
    pub fn end(&self) -> Micros {
        if self.txns == 0 {
            self.start
        } else {
            self.time_of(self.txns - 1)
        }
    }
}

fn default_max_events() -> u64 {
    50_000_000
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub seed: u64,
    pub network: NetworkConfig,
    #[serde(default)]
    pub consensus: ConsensusConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default)]
    pub workload: Workload,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default = "default_max_events")]
    pub max_events: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("{}{msg}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid { line: Option<usize>, msg: String },
}

/// 1-based line of `key` inside `[section]` (or the `nth` `[[section]]`);
/// an empty key names the section header itself.
fn locate(text: &str, section: &str, nth: usize, key: &str) -> Option<usize> {
    let mut in_target = section.is_empty();
    let mut seen = 0usize;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let header = line
            .strip_prefix("[[")
            .and_then(|l| l.strip_suffix("]]"))
            .map(|h| (h, true))
            .or_else(|| {
                line.strip_prefix('[')
                    .and_then(|l| l.strip_suffix(']'))
                    .map(|h| (h, false))
            });
        if let Some((h, array)) = header {
            let hit = h.trim() == section;
            if hit && array {
                seen += 1;
            }
            in_target = hit && (!array || seen == nth + 1);
            if in_target && key.is_empty() {
                return Some(i + 1);
            }
            continue;
        }
        if in_target
            && !key.is_empty()
            && line
                .strip_prefix(key)
                .is_some_and(|r| r.trim_start().starts_with('='))
        {
            return Some(i + 1);
        }
    }
    None
}

impl SimConfig {
    /// A fault-free config with one fullnode and one client per default.
    pub fn new(
        network: NetworkConfig,
        consensus: ConsensusConfig,
        pipeline: PipelineConfig,
    ) -> Self {
        SimConfig {
            seed: 0,
            network,
            consensus,
            pipeline,
            topology: Topology::default(),
            workload: Workload::default(),
            faults: Vec::new(),
            max_events: default_max_events(),
        }
    }

    pub fn from_toml(text: &str) -> Result<SimConfig, ConfigError> {
        let cfg: SimConfig = toml::from_str(text)?;
        cfg.validate_in(Some(text))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_in(None)
    }

    fn validate_in(&self, text: Option<&str>) -> Result<(), ConfigError> {
        let err = |section: &str, nth: usize, key: &str, msg: String| ConfigError::Invalid {
            line: text.and_then(|t| locate(t, section, nth, key)),
            msg,
        };
        let c = &self.consensus;
        c.validate().map_err(|m| err("consensus", 0, "n", m))?;
        self.pipeline
            .gas
            .validate()
            .map_err(|m| err("pipeline.gas", 0, "", m))?;
        if c.max_block_txns > self.pipeline.gas.max_block_txns() {
            return Err(err(
                "consensus",
                0,
                "max_block_txns",
                format!(
                    "max_block_txns {} exceeds what the block gas limit can execute ({})",
                    c.max_block_txns,
                    self.pipeline.gas.max_block_txns()
                ),
            ));
        }
        let max_delay = self.network.max_delay();
        if c.round_timeout <= 4 * max_delay {
            return Err(err(
                "consensus",
                0,
                "round_timeout",
                format!(
                    "round_timeout {} must exceed 4x the largest post-GST delay ({max_delay})",
                    c.round_timeout
                ),
            ));
        }
        let t = &self.topology;
        if t.fullnodes == 0 && !t.direct && t.clients > 0 {
            return Err(err(
                "topology",
                0,
                "fullnodes",
                "clients need a fullnode unless direct = true".into(),
            ));
        }
        if t.query_timeout == 0 || t.progress_timeout == 0 {
            return Err(err("topology", 0, "", "timeouts must be positive".into()));
        }
        let w = &self.workload;
        if w.txns > 0 && (w.rate_tps == 0 || w.accounts == 0) {
            return Err(err(
                "workload",
                0,
                "rate_tps",
                "rate_tps and accounts must be positive".into(),
            ));
        }
        let mut faulty = 0;
        let mut seen = BTreeSet::new();
        for (i, fspec) in self.faults.iter().enumerate() {
            if !fspec.node.is_validator() || fspec.node.index as usize >= c.n {
                return Err(err(
                    "faults",
                    i,
                    "node",
                    format!("{} is not a validator of this network", fspec.node),
                ));
            }
            if !seen.insert(fspec.node) {
                return Err(err(
                    "faults",
                    i,
                    "node",
                    format!("{} has two fault entries", fspec.node),
                ));
            }
            if let FaultBehavior::Partition { from, until, .. } = fspec.behavior {
                if from >= until {
                    return Err(err(
                        "faults",
                        i,
                        "behavior",
                        "partition interval is empty".into(),
                    ));
                }
            }
            if fspec.behavior.is_faulty(self.network.gst) {
                faulty += 1;
            }
        }
        if faulty > c.f {
            return Err(err(
                "faults",
                0,
                "",
                format!("{faulty} faulty validators exceed f = {}", c.f),
            ));
        }
        Ok(())
    }

    pub fn behavior_of(&self, node: NodeId) -> FaultBehavior {
        self.faults
            .iter()
            .find(|f| f.node == node)
            .map(|f| f.behavior.clone())
            .unwrap_or(FaultBehavior::Honest)
    }

    /// Validators that run the protocol as written.
    pub fn honest_validators(&self) -> Vec<NodeId> {
        (0..self.consensus.n as u32)
            .map(NodeId::validator)
            .filter(|v| self.behavior_of(*v).is_honest())
            .collect()
    }

    pub fn build(&self) -> Result<Simulation, ConfigError> {
        self.validate()?;
        let n = self.consensus.n;
        let quorum = self.consensus.quorum();
        let (keys, set) = ValidatorSet::generate(n, self.seed ^ 0x5eed);
        let set = Arc::new(set);
        let w = self.workload.clone();
        let accounts: BTreeMap<u64, i128> = (0..w.accounts)
            .map(|a| (a, w.initial_balance as i128))
            .collect();
        let genesis = genesis_block(&accounts).map_err(|e| ConfigError::Invalid {
            line: None,
            msg: e.to_string(),
        })?;

        let mut sim = Simulation::new(self.network.clone(), self.seed);
        sim.max_events = self.max_events;
        for (i, key) in keys.into_iter().enumerate() {
            let id = NodeId::validator(i as u32);
            let behavior = match self.behavior_of(id) {
                FaultBehavior::Equivocate { double_vote } => Behavior::Equivocate { double_vote },
                _ => Behavior::Honest,
            };
            let consensus =
                Consensus::new(self.consensus.clone(), set.clone(), key, &genesis, behavior);
            let pipeline = Pipeline::new(
                id,
                self.pipeline.clone(),
                &genesis,
                !self.pipeline.variant.opt_execution,
            );
            sim.add_node(SimNode::Validator(Box::new(Validator::new(
                consensus,
                pipeline,
                set.clone(),
            ))));
            match self.behavior_of(id) {
                FaultBehavior::Crash { at } => sim.crash(id, at),
                FaultBehavior::Partition { peers, from, until } => sim.partition(Partition {
                    node: id,
                    peers: peers.into_iter().collect(),
                    from,
                    until,
                }),
                _ => {}
            }
        }
        let rotate = |start: usize, len: usize, make: fn(u32) -> NodeId| -> Vec<NodeId> {
            (0..len).map(|j| make(((start + j) % len) as u32)).collect()
        };
        for i in 0..self.topology.fullnodes {
            let id = NodeId::fullnode(i as u32);
            let pipeline = Pipeline::new(id, self.pipeline.clone(), &genesis, false);
            let validators = rotate(i % n, n, NodeId::validator);
            let fnode = Fullnode::new(
                id,
                pipeline,
                set.clone(),
                quorum,
                validators,
                self.topology.progress_timeout,
            );
            sim.add_node(SimNode::Fullnode(Box::new(fnode)));
        }
        let clients = self.topology.clients;
        for c in 0..clients {
            let id = NodeId::client(c as u32);
            let peers = if self.topology.direct {
                rotate(c % n, n, NodeId::validator)
            } else {
                let m = self.topology.fullnodes;
                rotate(c % m, m, NodeId::fullnode)
            };
            let schedule: Vec<u64> = (0..w.txns)
                .filter(|&k| (w.sender(k) as usize) % clients == c)
                .collect();
            let client = Client::new(
                id,
                set.clone(),
                quorum,
                peers,
                w.clone(),
                schedule,
                self.topology.query_timeout,
            );
            sim.add_node(SimNode::Client(Box::new(client)));
        }
        Ok(sim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3

[network]
delta_cf = 10
delta_fv = 10
delta_vv = 100
gst = 0
pre_gst_max_delay = 0

[consensus]
n = 4
f = 1
round_timeout = 100000
batch_interval = 0
propose_empty = false
max_block_txns = 100

[pipeline]
variant = "baseline"

[workload]
txns = 3
"#;

    #[test]
    fn parses_documented_shape() {
        let cfg = SimConfig::from_toml(BASE).unwrap();
        assert_eq!(cfg.consensus.n, 4);
        assert_eq!(
            cfg.pipeline.variant,
            crate::pipeline::PipelineVariant::BASELINE
        );
        assert_eq!(cfg.workload.txns, 3);
        assert_eq!(cfg.topology, Topology::default());
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = BASE.replace("batch_interval = 0", "batch_intervall = 0");
        let e = SimConfig::from_toml(&text).unwrap_err().to_string();
        assert!(e.contains("line 15"), "{e}");
        assert!(e.contains("batch_intervall"), "{e}");
    }

    #[test]
    fn semantic_error_reports_line() {
        let text = BASE.replace("n = 4", "n = 5");
        let e = SimConfig::from_toml(&text).unwrap_err().to_string();
        let line = text.lines().position(|l| l == "n = 5").unwrap() + 1;
        assert!(e.starts_with(&format!("line {line}:")), "{e}");
    }

    #[test]
    fn too_many_faults_rejected() {
        let text = format!(
            "{BASE}\n[[faults]]\nnode = \"v1\"\nbehavior = {{ kind = \"crash\", at = 0 }}\n\n[[faults]]\nnode = \"v2\"\nbehavior = {{ kind = \"equivocate\" }}\n"
        );
        let e = SimConfig::from_toml(&text).unwrap_err().to_string();
        assert!(e.contains("exceed f = 1"), "{e}");
    }

    #[test]
    fn healed_partition_is_not_a_fault() {
        let text = BASE.replace("gst = 0", "gst = 5000")
            + "\n[[faults]]\nnode = \"v1\"\nbehavior = { kind = \"crash\", at = 0 }\n\n[[faults]]\nnode = \"v2\"\nbehavior = { kind = \"partition\", peers = [\"v0\"], from = 0, until = 5000 }\n";
        SimConfig::from_toml(&text).unwrap();
    }

    #[test]
    fn fault_on_unknown_node_points_at_entry() {
        let text =
            format!("{BASE}\n[[faults]]\nnode = \"v9\"\nbehavior = {{ kind = \"honest\" }}\n");
        let e = SimConfig::from_toml(&text).unwrap_err().to_string();
        let line = text.lines().position(|l| l.contains("\"v9\"")).unwrap() + 1;
        assert!(e.starts_with(&format!("line {line}:")), "{e}");
    }

    #[test]
    fn workload_schedule() {
        let w = Workload {
            txns: 4,
            rate_tps: 3,
            accounts: 2,
            ..Workload::default()
        };
        assert_eq!(w.time_of(0), 0);
        assert_eq!(w.time_of(1), 333_333);
        assert_eq!(w.time_of(3), 1_000_000);
        let t = w.txn(3);
        assert_eq!((t.sender.0, t.nonce, t.recipient.0), (1, 1, 0));
    }
}
