//! Tuple-space communication: numeric-id tuples with private FIFO buffers,
//! OUT (deposit) and IN (withdraw, blocking) primitives.
//!
//! One API serves every channel kind: thread-to-thread, event-to-event,
//! peripheral-to-event, and node-to-node. A tuple registered `Remote(owner)`
//! turns OUT into a network forward; withdrawal is always owner-side.

use crate::types::{EventId, NodeAddr, ThreadId, Tick, TupleId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

/// Default maximum message payload, in bytes.
pub const DEFAULT_MTU: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageSource {
    Thread(ThreadId),
    Event(EventId),
    Peripheral(String),
    Node(NodeAddr),
}

/// A message deposited into a tuple buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub payload: Vec<u8>,
    pub source: MessageSource,
    pub timestamp: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TupleLocation {
    Local,
    Remote(NodeAddr),
}

#[derive(Debug, Clone)]
pub struct Tuple {
    pub id: TupleId,
    pub location: TupleLocation,
    buffer: VecDeque<Message>,
    capacity: usize,
    waiters: VecDeque<ThreadId>,
}

impl Tuple {
    pub fn pending(&self) -> usize {
        self.buffer.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn waiters(&self) -> impl Iterator<Item = ThreadId> + '_ {
        self.waiters.iter().copied()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TupleError {
    #[error("tuple {0} is not registered")]
    UnknownTuple(TupleId),
    #[error("tuple {0} is already registered")]
    DuplicateTuple(TupleId),
    #[error("tuple {0} buffer full (capacity {1}), message dropped")]
    Overflow(TupleId, usize),
    #[error("tuple {0} is remote; withdrawal is owner-side only")]
    RemoteWithdraw(TupleId),
    #[error("payload of {len} bytes exceeds MTU of {mtu}")]
    PayloadTooLarge { len: usize, mtu: usize },
    #[error("capacity must be positive")]
    ZeroCapacity,
}

/// Result of a deposit.
#[derive(Debug, PartialEq, Eq)]
pub enum OutOutcome {
    /// Message appended to the local buffer.
    Deposited,
    /// A suspended withdrawer was at the head of the waiter queue; the
    /// message bypasses the buffer and is handed to that thread, which the
    /// caller must transition Suspend -> Ready.
    Handoff { thread: ThreadId, message: Message },
    /// The tuple lives on another node; the caller must forward the message
    /// to the owner's identically-numbered tuple.
    Forwarded { owner: NodeAddr, message: Message },
}

/// Result of a withdrawal attempt.
#[derive(Debug, PartialEq, Eq)]
pub enum InOutcome {
    Message(Message),
    /// Buffer empty: the caller is now registered as a waiter and must be
    /// transitioned to Suspend.
    Blocked,
}

/// Per-tuple traffic counters, kept for the network-wide conservation check:
/// out == in + buffered + dropped + in-flight.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TupleCounters {
    /// Successful OUT calls made on this node (local deposits, handoffs, and
    /// messages forwarded toward a remote owner).
    pub outs: u64,
    /// Messages withdrawn on this node, whether by a successful IN or by
    /// direct handoff to a waiter.
    pub ins: u64,
    /// Messages dropped on buffer overflow.
    pub dropped: u64,
}

/// One node's view of the tuple space.
#[derive(Debug, Clone)]
pub struct TupleSpace {
    tuples: BTreeMap<TupleId, Tuple>,
    counters: BTreeMap<TupleId, TupleCounters>,
    mtu: usize,
}

impl TupleSpace {
    pub fn new(mtu: usize) -> Self {
        TupleSpace {
            tuples: BTreeMap::new(),
            counters: BTreeMap::new(),
            mtu,
        }
    }

    pub fn register_tuple(
        &mut self,
        id: TupleId,
        location: TupleLocation,
        capacity: usize,
    ) -> Result<(), TupleError> {
        if capacity == 0 {
            return Err(TupleError::ZeroCapacity);
        }
        if self.tuples.contains_key(&id) {
            return Err(TupleError::DuplicateTuple(id));
        }
        self.tuples.insert(
            id,
            Tuple {
                id,
                location,
                buffer: VecDeque::new(),
                capacity,
                waiters: VecDeque::new(),
            },
        );
        self.counters.insert(id, TupleCounters::default());
        Ok(())
    }

    /// Deposits a message. Never blocks.
    pub fn out(&mut self, id: TupleId, message: Message) -> Result<OutOutcome, TupleError> {
        if message.payload.len() > self.mtu {
            return Err(TupleError::PayloadTooLarge {
                len: message.payload.len(),
                mtu: self.mtu,
            });
        }
        let tuple = self
            .tuples
            .get_mut(&id)
            .ok_or(TupleError::UnknownTuple(id))?;
        if let TupleLocation::Remote(owner) = tuple.location {
            self.counters.get_mut(&id).unwrap().outs += 1;
            return Ok(OutOutcome::Forwarded { owner, message });
        }
        self.deposit_local(id, message, true)
    }

    /// Deposits a message that arrived from the network. Identical to a local
    /// OUT except the message was already counted as "out" at its origin.
    pub fn deliver(&mut self, id: TupleId, message: Message) -> Result<OutOutcome, TupleError> {
        let tuple = self
            .tuples
            .get_mut(&id)
            .ok_or(TupleError::UnknownTuple(id))?;
        if !matches!(tuple.location, TupleLocation::Local) {
            return Err(TupleError::RemoteWithdraw(id));
        }
        self.deposit_local(id, message, false)
    }

    fn deposit_local(
        &mut self,
        id: TupleId,
        message: Message,
        count_out: bool,
    ) -> Result<OutOutcome, TupleError> {
        let tuple = self.tuples.get_mut(&id).unwrap();
        // waiters non-empty implies buffer empty: a waiter is served first.
        if let Some(thread) = tuple.waiters.pop_front() {
            debug_assert!(tuple.buffer.is_empty());
            let counters = self.counters.get_mut(&id).unwrap();
            if count_out {
                counters.outs += 1;
            }
            counters.ins += 1;
            return Ok(OutOutcome::Handoff { thread, message });
        }
        if tuple.buffer.len() >= tuple.capacity {
            let capacity = tuple.capacity;
            let counters = self.counters.get_mut(&id).unwrap();
            if count_out {
                counters.outs += 1;
            }
            counters.dropped += 1;
            return Err(TupleError::Overflow(id, capacity));
        }
        tuple.buffer.push_back(message);
        if count_out {
            self.counters.get_mut(&id).unwrap().outs += 1;
        }
        Ok(OutOutcome::Deposited)
    }

    /// Withdraws the head message, or registers `caller` as a waiter.
    pub fn in_(&mut self, id: TupleId, caller: ThreadId) -> Result<InOutcome, TupleError> {
        let tuple = self
            .tuples
            .get_mut(&id)
            .ok_or(TupleError::UnknownTuple(id))?;
        if !matches!(tuple.location, TupleLocation::Local) {
            return Err(TupleError::RemoteWithdraw(id));
        }
        match tuple.buffer.pop_front() {
            Some(message) => {
                self.counters.get_mut(&id).unwrap().ins += 1;
                Ok(InOutcome::Message(message))
            }
            None => {
                tuple.waiters.push_back(caller);
                Ok(InOutcome::Blocked)
            }
        }
    }

    pub fn pending_count(&self, id: TupleId) -> Result<usize, TupleError> {
        self.tuples
            .get(&id)
            .map(Tuple::pending)
            .ok_or(TupleError::UnknownTuple(id))
    }

    pub fn get(&self, id: TupleId) -> Option<&Tuple> {
        self.tuples.get(&id)
    }

    pub fn tuples(&self) -> impl Iterator<Item = &Tuple> {
        self.tuples.values()
    }

    pub fn counters(&self, id: TupleId) -> Option<&TupleCounters> {
        self.counters.get(&id)
    }

    pub fn all_counters(&self) -> impl Iterator<Item = (TupleId, &TupleCounters)> {
        self.counters.iter().map(|(id, c)| (*id, c))
    }

    /// Removes a thread from every waiter queue (used when a thread is
    /// terminated or its node reboots).
    pub fn remove_waiter(&mut self, thread: ThreadId) {
        for tuple in self.tuples.values_mut() {
            tuple.waiters.retain(|t| *t != thread);
        }
    }

    /// Drops all buffered messages and waiters, keeping registrations.
    /// Returns the number of messages discarded (counted as dropped so the
    /// conservation ledger stays balanced across reboots).
    pub fn clear_volatile(&mut self) -> u64 {
        let mut discarded = 0;
        for tuple in self.tuples.values_mut() {
            let n = tuple.buffer.len() as u64;
            discarded += n;
            self.counters.get_mut(&tuple.id).unwrap().dropped += n;
            tuple.buffer.clear();
            tuple.waiters.clear();
        }
        discarded
    }

    pub fn mtu(&self) -> usize {
        self.mtu
    }
}

impl Default for TupleSpace {
    fn default() -> Self {
        Self::new(DEFAULT_MTU)
    }
}
