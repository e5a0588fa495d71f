//! Validator, fullnode and client roles, each a handler driven by the
//! simulator's event loop.

mod client;
mod fullnode;
mod validator;

pub use client::{check_response, Client, LatencySample};
pub use fullnode::Fullnode;
pub use validator::{TconSample, Validator};

use crate::execution::{inclusion_proof, ChainState};
use crate::message::{Message, Response, StateAttestation};
use crate::multisig::AggSignature;
use crate::simnet::{Ctx, NodeTimer};
use crate::types::{BlockId, NodeId, Transaction};

pub enum SimNode {
    Validator(Box<Validator>),
    Fullnode(Box<Fullnode>),
    Client(Box<Client>),
}

impl SimNode {
    pub fn id(&self) -> NodeId {
        match self {
            SimNode::Validator(v) => v.id(),
            SimNode::Fullnode(f) => f.id(),
            SimNode::Client(c) => c.id(),
        }
    }

    pub fn on_start(&mut self, ctx: &mut Ctx) {
        match self {
            SimNode::Validator(_) => {}
            SimNode::Fullnode(f) => f.on_start(ctx),
            SimNode::Client(c) => c.on_start(ctx),
        }
    }

    pub fn on_message(&mut self, ctx: &mut Ctx, from: NodeId, msg: Message) {
        match self {
            SimNode::Validator(v) => v.on_message(ctx, from, msg),
            SimNode::Fullnode(f) => f.on_message(ctx, from, msg),
            SimNode::Client(c) => c.on_message(ctx, from, msg),
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: NodeTimer) {
        match self {
            SimNode::Validator(v) => v.on_timer(ctx, timer),
            SimNode::Fullnode(f) => f.on_timer(ctx, timer),
            SimNode::Client(c) => c.on_timer(ctx, timer),
        }
    }

    pub fn as_validator(&self) -> Option<&Validator> {
        match self {
            SimNode::Validator(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_fullnode(&self) -> Option<&Fullnode> {
        match self {
            SimNode::Fullnode(f) => Some(f),
            _ => None,
        }
    }

    pub fn as_client(&self) -> Option<&Client> {
        match self {
            SimNode::Client(c) => Some(c),
            _ => None,
        }
    }
}

/// Builds the reply to a query against a committed state, or `None` if the
/// transaction is not in its log.
pub fn answer_query(
    state: &ChainState,
    block_id: BlockId,
    sig_st: &AggSignature,
    txn: &Transaction,
) -> Option<Response> {
    let position = state.position_of(&txn.key())?;
    let entry = state.entry(position)?;
    let proof = inclusion_proof(state, position).ok()?;
    Some(Response {
        position,
        txn: txn.clone(),
        success: entry.success,
        proof,
        attestation: StateAttestation {
            block_id,
            log_root: state.log_root(),
            version: state.version(),
            accounts_hash: state.accounts_hash(),
            sig_st: sig_st.clone(),
        },
    })
}
