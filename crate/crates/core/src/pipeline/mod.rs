//! Block pipeline shared by validators and fullnodes: execution-prep,
//! execution, optimistic commit and commit stages, with per-node CPU and IO
//! lanes and stage traces.
//!
//! Stage work is scheduled through [`Ctx`] timers; a completion only takes
//! effect if its block is still in the buffer, so orphaned work is dropped.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::execution::{execute, ChainState, ExecError, GasConfig};
use crate::simnet::{Ctx, NodeTimer};
use crate::storage::{CommitRecord, Marker, Storage, StorageConfig};
use crate::types::{Block, BlockId, Micros, NodeId, OrderProof, Role};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VariantRepr")]
pub struct PipelineVariant {
    pub opt_execution: bool,
    pub opt_commit: bool,
    pub cert_on_order_vote: bool,
    pub forward_proposals: bool,
}

impl PipelineVariant {
    pub const BASELINE: PipelineVariant = PipelineVariant {
        opt_execution: false,
        opt_commit: false,
        cert_on_order_vote: false,
        forward_proposals: false,
    };
    pub const ZAPTOS: PipelineVariant = PipelineVariant {
        opt_execution: true,
        opt_commit: true,
        cert_on_order_vote: true,
        forward_proposals: true,
    };

    pub fn name(&self) -> &'static str {
        match *self {
            Self::BASELINE => "baseline",
            Self::ZAPTOS => "zaptos",
            _ => "custom",
        }
    }
}

/// A variant is written either as `"baseline"` / `"zaptos"` or as a table
/// of the four flags.
#[derive(Deserialize)]
#[serde(untagged)]
enum VariantRepr {
    Name(String),
    Flags {
        opt_execution: bool,
        opt_commit: bool,
        cert_on_order_vote: bool,
        forward_proposals: bool,
    },
}

impl TryFrom<VariantRepr> for PipelineVariant {
    type Error = String;

    fn try_from(r: VariantRepr) -> Result<Self, String> {
        match r {
            VariantRepr::Name(n) => n.parse(),
            VariantRepr::Flags {
                opt_execution,
                opt_commit,
                cert_on_order_vote,
                forward_proposals,
            } => Ok(PipelineVariant {
                opt_execution,
                opt_commit,
                cert_on_order_vote,
                forward_proposals,
            }),
        }
    }
}

impl std::str::FromStr for PipelineVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "baseline" => Ok(Self::BASELINE),
            "zaptos" => Ok(Self::ZAPTOS),
            other => Err(format!(
                "unknown variant {other:?}: expected baseline or zaptos"
            )),
        }
    }
}

impl fmt::Display for PipelineVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub variant: PipelineVariant,
    pub gas: GasConfig,
    pub storage: StorageConfig,
    /// Payload retrieval before execution.
    pub exec_prep: Micros,
    /// Cap on buffered certify votes for blocks not yet executed.
    pub early_vote_cap: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            variant: PipelineVariant::ZAPTOS,
            gas: GasConfig::default(),
            storage: StorageConfig::default(),
            exec_prep: 0,
            early_vote_cap: 4096,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Dissemination,
    Ordering,
    ExecPrep,
    Execution,
    Certification,
    Commit,
    FnExecution,
    FnCommit,
}

impl StageName {
    pub const ALL: [StageName; 8] = [
        StageName::Dissemination,
        StageName::Ordering,
        StageName::ExecPrep,
        StageName::Execution,
        StageName::Certification,
        StageName::Commit,
        StageName::FnExecution,
        StageName::FnCommit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Dissemination => "dissemination",
            StageName::Ordering => "ordering",
            StageName::ExecPrep => "exec_prep",
            StageName::Execution => "execution",
            StageName::Certification => "certification",
            StageName::Commit => "commit",
            StageName::FnExecution => "fn_execution",
            StageName::FnCommit => "fn_commit",
        }
    }
}

/// One stage of one block at one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRow {
    pub node: NodeId,
    pub variant: PipelineVariant,
    pub block_id: BlockId,
    pub height: u64,
    pub txns: usize,
    pub stage: StageName,
    pub start: Micros,
    pub end: Micros,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Phase {
    #[default]
    Idle,
    Running {
        start: Micros,
        end: Micros,
    },
    Done {
        start: Micros,
        end: Micros,
    },
}

impl Phase {
    pub fn is_idle(&self) -> bool {
        matches!(self, Phase::Idle)
    }

    pub fn is_done(&self) -> bool {
        matches!(self, Phase::Done { .. })
    }

    pub fn span(&self) -> Option<(Micros, Micros)> {
        match *self {
            Phase::Idle => None,
            Phase::Running { start, end } | Phase::Done { start, end } => Some((start, end)),
        }
    }

    fn finish(&mut self) {
        if let Phase::Running { start, end } = *self {
            *self = Phase::Done { start, end };
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Lane {
    Prep,
    Exec,
    OptCommit,
    Commit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct StageDone {
    pub lane: Lane,
    pub block_id: BlockId,
}

/// A block in flight through the pipeline.
#[derive(Clone, Debug)]
pub struct Entry {
    pub block: Block,
    pub arrived: Micros,
    pub ordered_at: Option<Micros>,
    pub order_vote_sent: bool,
    pub prep: Phase,
    pub exec: Phase,
    pending_state: Option<Arc<ChainState>>,
    pub executed_txns: usize,
    pub exec_error: bool,
    pub cert_sent_at: Option<Micros>,
    pub certified_at: Option<Micros>,
    /// The state certificate was checked against the local digest.
    pub cert_ok: bool,
    pub opt_commit: Phase,
    pub commit: Phase,
    commit_full_write: bool,
}

impl Entry {
    fn new(block: Block, now: Micros) -> Self {
        Entry {
            block,
            arrived: now,
            ordered_at: None,
            order_vote_sent: false,
            prep: Phase::Idle,
            exec: Phase::Idle,
            pending_state: None,
            executed_txns: 0,
            exec_error: false,
            cert_sent_at: None,
            certified_at: None,
            cert_ok: false,
            opt_commit: Phase::Idle,
            commit: Phase::Idle,
            commit_full_write: false,
        }
    }

    pub fn state(&self) -> Option<&Arc<ChainState>> {
        self.block.state.as_ref()
    }

    pub fn is_ordered(&self) -> bool {
        self.ordered_at.is_some()
    }
}

/// In-memory set of in-flight blocks plus the commit pointer.
#[derive(Clone, Debug)]
pub struct PipelineBuffer {
    pub blocks: BTreeMap<BlockId, Entry>,
    pub h_cmt: u64,
    pub s_cmt: Arc<ChainState>,
    pub committed_id: BlockId,
}

impl PipelineBuffer {
    pub fn new(genesis: &Block) -> Self {
        PipelineBuffer {
            blocks: BTreeMap::new(),
            h_cmt: 0,
            s_cmt: genesis.state.clone().expect("genesis carries its state"),
            committed_id: genesis.id,
        }
    }

    /// State of `parent` if it is committed or executed here.
    pub fn parent_state(&self, parent: &BlockId) -> Option<Arc<ChainState>> {
        if *parent == self.committed_id {
            return Some(self.s_cmt.clone());
        }
        self.blocks.get(parent).and_then(|e| e.block.state.clone())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStats {
    /// Blocks whose execution started and which were later orphaned.
    pub wasted_exec: u64,
    pub orphaned: u64,
    pub revert_ops: u64,
    pub records_reverted: u64,
    pub committed_blocks: u64,
    pub committed_txns: u64,
    pub exec_errors: u64,
    /// Attempts to revert or overwrite a Committed record.
    pub committed_violations: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommittedBlock {
    pub height: u64,
    pub block_id: BlockId,
    pub state_digest: crate::hash::Digest,
    pub txns: usize,
    pub at: Micros,
}

/// Outcome of a stage completion the owning node may react to.
pub enum StageOutcome {
    Nothing,
    Executed(BlockId),
    Committed(Block),
}

pub struct Pipeline {
    pub me: NodeId,
    pub cfg: PipelineConfig,
    pub buf: PipelineBuffer,
    pub storage: Storage,
    pub stats: PipelineStats,
    pub committed: Vec<CommittedBlock>,
    pub trace: Vec<StageRow>,
    pub tracing: bool,
    /// Validators in the baseline only execute ordered blocks.
    exec_requires_order: bool,
    exec_busy: Option<BlockId>,
    io_busy: Option<BlockId>,
}

impl Pipeline {
    pub fn new(
        me: NodeId,
        cfg: PipelineConfig,
        genesis: &Block,
        exec_requires_order: bool,
    ) -> Self {
        let mut storage = Storage::new();
        let state = genesis.state.clone().expect("genesis carries its state");
        storage
            .write(CommitRecord {
                height: 0,
                marker: Marker::Committed,
                block_id: genesis.id,
                state_digest: state.digest(),
                snapshot: Some(state.clone()),
                write_time: 0,
                io_duration: 0,
            })
            .expect("empty storage accepts genesis");
        Pipeline {
            me,
            cfg,
            buf: PipelineBuffer::new(genesis),
            storage,
            stats: PipelineStats::default(),
            committed: vec![CommittedBlock {
                height: 0,
                block_id: genesis.id,
                state_digest: state.digest(),
                txns: 0,
                at: 0,
            }],
            trace: Vec::new(),
            tracing: true,
            exec_requires_order,
            exec_busy: None,
            io_busy: None,
        }
    }

    fn is_fullnode(&self) -> bool {
        self.me.role != Role::Validator
    }

    pub fn entry(&self, id: &BlockId) -> Option<&Entry> {
        self.buf.blocks.get(id)
    }

    pub fn entry_mut(&mut self, id: &BlockId) -> Option<&mut Entry> {
        self.buf.blocks.get_mut(id)
    }

    pub fn contains(&self, id: &BlockId) -> bool {
        self.buf.blocks.contains_key(id)
    }

    pub fn h_cmt(&self) -> u64 {
        self.buf.h_cmt
    }

    pub fn is_committed(&self, id: &BlockId) -> bool {
        self.committed
            .get(self.committed_height_of(id))
            .is_some_and(|c| c.block_id == *id)
    }

    fn committed_height_of(&self, id: &BlockId) -> usize {
        self.buf
            .blocks
            .get(id)
            .map(|e| e.block.height as usize)
            .unwrap_or_else(|| {
                self.committed
                    .iter()
                    .position(|c| c.block_id == *id)
                    .unwrap_or(usize::MAX)
            })
    }

    pub fn record(&mut self, block: &Block, stage: StageName, start: Micros, end: Micros) {
        if self.tracing {
            self.trace.push(StageRow {
                node: self.me,
                variant: self.cfg.variant,
                block_id: block.id,
                height: block.height,
                txns: block.payload.len(),
                stage,
                start,
                end,
            });
        }
    }

    /// Adds a block. Ignored if known or at or below the committed height.
    pub fn insert(&mut self, now: Micros, block: Block) -> bool {
        if block.height <= self.buf.h_cmt || self.buf.blocks.contains_key(&block.id) {
            return false;
        }
        let mut b = block;
        b.state = None;
        self.buf.blocks.insert(b.id, Entry::new(b, now));
        true
    }

    pub fn mark_ordered(&mut self, now: Micros, id: &BlockId, proof: &OrderProof) {
        if let Some(e) = self.buf.blocks.get_mut(id) {
            if e.ordered_at.is_none() {
                e.ordered_at = Some(now);
                e.block.sig_od = Some(proof.clone());
            }
        }
    }

    /// Removes every block that cannot extend `canonical` (height -> id of
    /// the ordered or committed block there), reverting their optimistic
    /// commits. Returns the removed ids.
    pub fn prune_orphans(&mut self, canonical: &dyn Fn(u64) -> Option<BlockId>) -> Vec<BlockId> {
        let mut doomed: Vec<BlockId> = Vec::new();
        let ids: Vec<(u64, BlockId)> = self
            .buf
            .blocks
            .iter()
            .map(|(id, e)| (e.block.height, *id))
            .collect();
        let mut dead = std::collections::BTreeSet::new();
        for (_, id) in ids
            .iter()
            .copied()
            .collect::<std::collections::BTreeSet<_>>()
        {
            let e = &self.buf.blocks[&id];
            let conflicting = match canonical(e.block.height) {
                Some(c) => c != id,
                None => false,
            };
            let parent_dead = dead.contains(&e.block.parent)
                || (e.block.height > 0
                    && canonical(e.block.height - 1).is_some_and(|c| c != e.block.parent));
            if conflicting || parent_dead {
                dead.insert(id);
                doomed.push(id);
            }
        }
        if doomed.is_empty() {
            return doomed;
        }
        let mut revert_from: Option<u64> = None;
        for id in &doomed {
            let e = self.buf.blocks.remove(id).expect("present");
            self.stats.orphaned += 1;
            if !e.exec.is_idle() {
                self.stats.wasted_exec += 1;
            }
            let h = e.block.height;
            if self
                .storage
                .read(h)
                .is_some_and(|r| r.block_id == *id && r.marker == Marker::OptCommitted)
            {
                revert_from = Some(revert_from.map_or(h, |x: u64| x.min(h)));
            }
        }
        if let Some(h) = revert_from {
            self.revert_above(h - 1);
        }
        doomed
    }

    fn revert_above(&mut self, height: u64) {
        match self.storage.revert_above(height) {
            Ok(n) => {
                self.stats.revert_ops += 1;
                self.stats.records_reverted += n as u64;
                for e in self.buf.blocks.values_mut() {
                    if e.block.height > height && e.opt_commit.is_done() {
                        e.opt_commit = Phase::Idle;
                    }
                }
            }
            Err(_) => self.stats.committed_violations += 1,
        }
    }

    /// Starts every stage whose inputs are ready.
    pub fn step(&mut self, ctx: &mut Ctx) {
        let now = ctx.now;
        let ids: Vec<BlockId> = self.buf.blocks.keys().copied().collect();
        for id in &ids {
            let e = &self.buf.blocks[id];
            if e.prep.is_idle() && (!self.exec_requires_order || e.is_ordered()) {
                let end = now + self.cfg.exec_prep;
                self.buf.blocks.get_mut(id).expect("present").prep =
                    Phase::Running { start: now, end };
                ctx.timer(
                    self.cfg.exec_prep,
                    NodeTimer::Stage(StageDone {
                        lane: Lane::Prep,
                        block_id: *id,
                    }),
                );
            }
        }
        if self.exec_busy.is_none() {
            self.start_execution(ctx);
        }
        self.start_commit(ctx);
        if self.io_busy.is_none() {
            self.start_opt_commit(ctx);
        }
    }

    fn start_execution(&mut self, ctx: &mut Ctx) {
        let candidate = self
            .buf
            .blocks
            .values()
            .filter(|e| e.prep.is_done() && e.exec.is_idle())
            .filter(|e| self.buf.parent_state(&e.block.parent).is_some())
            .min_by_key(|e| (e.block.height, e.block.id))
            .map(|e| e.block.id);
        let Some(id) = candidate else { return };
        let now = ctx.now;
        let parent_state = self
            .buf
            .parent_state(&self.buf.blocks[&id].block.parent)
            .expect("checked");
        let e = self.buf.blocks.get_mut(&id).expect("present");
        let (state, txns, duration) = match execute(&parent_state, &e.block, &self.cfg.gas) {
            Ok(out) => (Arc::new(out.state), out.executed, out.duration),
            Err(ExecError::ParentMismatch { .. }) => {
                // skip and propagate: the parent state passes through
                e.exec_error = true;
                self.stats.exec_errors += 1;
                (parent_state, 0, 0)
            }
        };
        e.pending_state = Some(state);
        e.executed_txns = txns;
        e.exec = Phase::Running {
            start: now,
            end: now + duration,
        };
        self.exec_busy = Some(id);
        ctx.timer(
            duration,
            NodeTimer::Stage(StageDone {
                lane: Lane::Exec,
                block_id: id,
            }),
        );
    }

    fn start_opt_commit(&mut self, ctx: &mut Ctx) {
        if !self.cfg.variant.opt_commit {
            return;
        }
        let h_cmt = self.buf.h_cmt;
        let candidate = self
            .buf
            .blocks
            .values()
            .filter(|e| {
                e.exec.is_done()
                    && e.opt_commit.is_idle()
                    && e.commit.is_idle()
                    && e.block.height > h_cmt
            })
            .min_by_key(|e| (e.block.height, e.block.id))
            .map(|e| e.block.id);
        let Some(id) = candidate else { return };
        let now = ctx.now;
        let e = self.buf.blocks.get_mut(&id).expect("present");
        let d = self.cfg.storage.full_write(e.executed_txns);
        e.opt_commit = Phase::Running {
            start: now,
            end: now + d,
        };
        self.io_busy = Some(id);
        ctx.timer(
            d,
            NodeTimer::Stage(StageDone {
                lane: Lane::OptCommit,
                block_id: id,
            }),
        );
    }

    /// The next block to commit, if every commit precondition holds.
    fn commit_candidate(&self) -> Option<BlockId> {
        self.buf
            .blocks
            .values()
            .find(|e| {
                e.block.height == self.buf.h_cmt + 1
                    && e.block.parent == self.buf.committed_id
                    && e.is_ordered()
                    && e.block.sig_st.is_some()
                    && e.cert_ok
                    && e.exec.is_done()
                    && e.commit.is_idle()
            })
            .map(|e| e.block.id)
    }

    fn start_commit(&mut self, ctx: &mut Ctx) {
        let Some(id) = self.commit_candidate() else {
            return;
        };
        let now = ctx.now;
        let opt = self.cfg.variant.opt_commit;
        let e = &self.buf.blocks[&id];
        let (duration, full) = if opt {
            if !e.opt_commit.is_done() {
                return;
            }
            (self.cfg.storage.marker_upgrade, false)
        } else {
            if self.io_busy.is_some() {
                return;
            }
            (self.cfg.storage.full_write(e.executed_txns), true)
        };
        let e = self.buf.blocks.get_mut(&id).expect("present");
        e.commit = Phase::Running {
            start: now,
            end: now + duration,
        };
        e.commit_full_write = full;
        if full {
            self.io_busy = Some(id);
        }
        ctx.timer(
            duration,
            NodeTimer::Stage(StageDone {
                lane: Lane::Commit,
                block_id: id,
            }),
        );
    }

    pub fn on_stage_done(&mut self, ctx: &mut Ctx, done: StageDone) -> StageOutcome {
        let now = ctx.now;
        let id = done.block_id;
        match done.lane {
            Lane::Prep => {
                if let Some(e) = self.buf.blocks.get_mut(&id) {
                    e.prep.finish();
                    let (s, t) = e.prep.span().expect("finished");
                    let b = e.block.clone();
                    if !self.is_fullnode() && self.cfg.exec_prep > 0 {
                        self.record(&b, StageName::ExecPrep, s, t);
                    }
                }
                StageOutcome::Nothing
            }
            Lane::Exec => {
                if self.exec_busy == Some(id) {
                    self.exec_busy = None;
                }
                let Some(e) = self.buf.blocks.get_mut(&id) else {
                    return StageOutcome::Nothing;
                };
                e.exec.finish();
                e.block.state = e.pending_state.take();
                let (s, t) = e.exec.span().expect("finished");
                let b = e.block.clone();
                let stage = if self.is_fullnode() {
                    StageName::FnExecution
                } else {
                    StageName::Execution
                };
                self.record(&b, stage, s, t);
                StageOutcome::Executed(id)
            }
            Lane::OptCommit => {
                if self.io_busy == Some(id) {
                    self.io_busy = None;
                }
                let Some(e) = self.buf.blocks.get_mut(&id) else {
                    return StageOutcome::Nothing;
                };
                let Phase::Running { start, end } = e.opt_commit else {
                    return StageOutcome::Nothing;
                };
                let state = e.block.state.clone().expect("executed before opt-commit");
                let record = CommitRecord {
                    height: e.block.height,
                    marker: Marker::OptCommitted,
                    block_id: id,
                    state_digest: state.digest(),
                    snapshot: Some(state),
                    write_time: now,
                    io_duration: end - start,
                };
                e.opt_commit = Phase::Done { start, end };
                if !self.storage.opt_commit(record) {
                    e.opt_commit = Phase::Idle;
                }
                StageOutcome::Nothing
            }
            Lane::Commit => {
                let Some(e) = self.buf.blocks.get(&id) else {
                    return StageOutcome::Nothing;
                };
                if e.commit_full_write && self.io_busy == Some(id) {
                    self.io_busy = None;
                }
                let mut e = self.buf.blocks.remove(&id).expect("present");
                e.commit.finish();
                let state = e.block.state.clone().expect("executed before commit");
                let (cs, ce) = e.commit.span().expect("finished");
                let record = CommitRecord {
                    height: e.block.height,
                    marker: Marker::Committed,
                    block_id: id,
                    state_digest: state.digest(),
                    snapshot: Some(state.clone()),
                    write_time: now,
                    io_duration: ce - cs,
                };
                if self.storage.finalize(record).is_err() {
                    self.stats.committed_violations += 1;
                }
                self.buf.h_cmt = e.block.height;
                self.buf.s_cmt = state.clone();
                self.buf.committed_id = id;
                self.stats.committed_blocks += 1;
                self.stats.committed_txns += e.executed_txns as u64;
                self.committed.push(CommittedBlock {
                    height: e.block.height,
                    block_id: id,
                    state_digest: state.digest(),
                    txns: e.executed_txns,
                    at: now,
                });
                let start = e.opt_commit.span().map_or(cs, |(s, _)| s.min(cs));
                let stage = if self.is_fullnode() {
                    StageName::FnCommit
                } else {
                    StageName::Commit
                };
                self.record(&e.block, stage, start, ce);
                // stale siblings at the committed height can never commit
                let h = e.block.height;
                let parent_id = id;
                let _ = self.prune_orphans(&|x| if x == h { Some(parent_id) } else { None });
                StageOutcome::Committed(e.block)
            }
        }
    }
}
