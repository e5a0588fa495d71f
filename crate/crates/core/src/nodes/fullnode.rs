use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::consensus::order_vote_digest;
use crate::message::Message;
use crate::multisig::{verify_agg_digest, AggSignature, ValidatorSet};
use crate::pipeline::{Pipeline, StageOutcome};
use crate::simnet::{Ctx, NodeTimer};
use crate::types::{Block, BlockId, Micros, NodeId, Transaction, TxnKey};

use super::answer_query;

/// Re-executes blocks received from a validator, commits them once the
/// state certificate matches its own result, and serves clients.
pub struct Fullnode {
    id: NodeId,
    pub pipeline: Pipeline,
    set: Arc<ValidatorSet>,
    quorum: usize,
    /// Validators in preference order; `current` is the subscribed one.
    validators: Vec<NodeId>,
    current: usize,
    progress_timeout: Micros,
    progress_armed: bool,
    progress_mark: u64,
    pending_submits: BTreeMap<TxnKey, Transaction>,
    queries: BTreeMap<TxnKey, (Transaction, BTreeSet<NodeId>)>,
    canonical: BTreeMap<u64, BlockId>,
    last_cert: Option<(BlockId, AggSignature)>,
    /// Set when a certified digest disagrees with local execution.
    pub halted: Option<String>,
    pub switches: u64,
    pub dropped: u64,
}

impl Fullnode {
    pub fn new(
        id: NodeId,
        pipeline: Pipeline,
        set: Arc<ValidatorSet>,
        quorum: usize,
        validators: Vec<NodeId>,
        progress_timeout: Micros,
    ) -> Self {
        assert!(!validators.is_empty(), "a fullnode needs a validator");
        Fullnode {
            id,
            pipeline,
            set,
            quorum,
            validators,
            current: 0,
            progress_timeout,
            progress_armed: false,
            progress_mark: 0,
            pending_submits: BTreeMap::new(),
            queries: BTreeMap::new(),
            canonical: BTreeMap::new(),
            last_cert: None,
            halted: None,
            switches: 0,
            dropped: 0,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn validator(&self) -> NodeId {
        self.validators[self.current]
    }

    pub fn on_start(&mut self, ctx: &mut Ctx) {
        ctx.send(self.validator(), Message::Subscribe { next_height: 1 });
    }

    pub fn on_message(&mut self, ctx: &mut Ctx, from: NodeId, msg: Message) {
        if self.halted.is_some() {
            return;
        }
        match msg {
            Message::Submit { txn } => {
                let key = txn.key();
                if self.pipeline.buf.s_cmt.position_of(&key).is_none()
                    && !self.pending_submits.contains_key(&key)
                {
                    ctx.send(self.validator(), Message::Submit { txn: txn.clone() });
                    self.pending_submits.insert(key, txn);
                    self.arm_progress(ctx);
                }
            }
            Message::Query { txn } => {
                if !self.answer(ctx, from, &txn) {
                    self.queries
                        .entry(txn.key())
                        .or_insert_with(|| (txn, BTreeSet::new()))
                        .1
                        .insert(from);
                    self.arm_progress(ctx);
                }
            }
            Message::Proposed { block } if from.is_validator() => {
                if self.valid_proposal(&block) {
                    self.pipeline.insert(ctx.now, block);
                } else {
                    self.dropped += 1;
                }
            }
            Message::Committed { block } if from.is_validator() => {
                self.on_committed_msg(ctx, block)
            }
            _ => {}
        }
        self.check_certificates();
        self.pipeline.step(ctx);
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: NodeTimer) {
        if self.halted.is_some() {
            return;
        }
        match timer {
            NodeTimer::Stage(done) => match self.pipeline.on_stage_done(ctx, done) {
                StageOutcome::Nothing => {}
                StageOutcome::Executed(_) => self.check_certificates(),
                StageOutcome::Committed(block) => self.on_local_commit(ctx, block),
            },
            NodeTimer::Progress => {
                self.progress_armed = false;
                let h = self.pipeline.h_cmt();
                if self.pending_submits.is_empty() && self.queries.is_empty() {
                    return;
                }
                if h == self.progress_mark {
                    self.switch_validator(ctx);
                }
                self.progress_mark = h;
                self.arm_progress(ctx);
            }
            _ => {}
        }
        self.pipeline.step(ctx);
    }

    fn arm_progress(&mut self, ctx: &mut Ctx) {
        if !self.progress_armed {
            self.progress_armed = true;
            self.progress_mark = self.pipeline.h_cmt();
            ctx.timer(self.progress_timeout, NodeTimer::Progress);
        }
    }

    fn switch_validator(&mut self, ctx: &mut Ctx) {
        if self.validators.len() < 2 {
            return;
        }
        self.current = (self.current + 1) % self.validators.len();
        self.switches += 1;
        let to = self.validator();
        ctx.send(
            to,
            Message::Subscribe {
                next_height: self.pipeline.h_cmt() + 1,
            },
        );
        for txn in self.pending_submits.values() {
            ctx.send(to, Message::Submit { txn: txn.clone() });
        }
    }

    fn valid_proposal(&self, block: &Block) -> bool {
        block.height > 0
            && block.id_matches_contents()
            && block.sig_blk.is_some_and(|s| {
                s.signer() == block.proposer && self.set.verify_member(&s, &block.id)
            })
    }

    fn on_committed_msg(&mut self, ctx: &mut Ctx, block: Block) {
        let (Some(od), Some(st)) = (block.sig_od.clone(), block.sig_st.clone()) else {
            self.dropped += 1;
            return;
        };
        if block.height == 0
            || !block.id_matches_contents()
            || !verify_agg_digest(
                &od.agg,
                &order_vote_digest(&od.block_id),
                &self.set,
                self.quorum,
            )
        {
            self.dropped += 1;
            return;
        }
        if block.height <= self.pipeline.h_cmt() {
            return;
        }
        if let Some(existing) = self.canonical.get(&block.height) {
            if *existing != block.id {
                self.halted = Some(format!("two committed blocks at height {}", block.height));
            }
            return;
        }
        self.canonical.insert(block.height, block.id);
        let id = block.id;
        if !self.pipeline.insert(ctx.now, block) {
            if let Some(e) = self.pipeline.entry_mut(&id) {
                e.block.sig_od = Some(od);
                e.block.sig_st = Some(st);
            }
        }
        if let Some(e) = self.pipeline.entry_mut(&id) {
            e.ordered_at.get_or_insert(ctx.now);
        }
        let canonical = &self.canonical;
        self.pipeline.prune_orphans(&|h| canonical.get(&h).copied());
    }

    /// Checks each executed block's state certificate against the local
    /// digest. A mismatch halts this node.
    fn check_certificates(&mut self) {
        let mut bad = None;
        for e in self.pipeline.buf.blocks.values_mut() {
            if e.cert_ok {
                continue;
            }
            let (Some(state), Some(st)) = (e.block.state.as_ref(), e.block.sig_st.as_ref()) else {
                continue;
            };
            if verify_agg_digest(st, &state.digest(), &self.set, self.quorum) {
                e.cert_ok = true;
            } else {
                bad = Some(e.block.height);
            }
        }
        if let Some(h) = bad {
            self.halted = Some(format!(
                "certified state at height {h} differs from local execution"
            ));
        }
    }

    fn on_local_commit(&mut self, ctx: &mut Ctx, block: Block) {
        self.last_cert = Some((
            block.id,
            block
                .sig_st
                .clone()
                .expect("committed blocks are certified"),
        ));
        self.canonical = self.canonical.split_off(&(block.height + 1));
        for t in block.payload.iter() {
            let key = t.key();
            // truncated by the gas limit; still pending
            if self.pipeline.buf.s_cmt.position_of(&key).is_none() {
                continue;
            }
            self.pending_submits.remove(&key);
            if let Some((txn, waiters)) = self.queries.remove(&key) {
                for w in waiters {
                    self.answer(ctx, w, &txn);
                }
            }
        }
    }

    fn answer(&self, ctx: &mut Ctx, to: NodeId, txn: &Transaction) -> bool {
        let Some((id, sig)) = &self.last_cert else {
            return false;
        };
        match answer_query(&self.pipeline.buf.s_cmt, *id, sig, txn) {
            Some(r) => {
                ctx.send(to, Message::Response(Box::new(r)));
                true
            }
            None => false,
        }
    }
}
