//! Hybrid event/thread microkernel with two-level scheduling.
//!
//! A kernel instance is an ordered list of events; each event owns a private
//! tuple and a set of concurrent threads. Scheduling is two-level:
//!
//! * event level: an event's effective priority is its base priority plus
//!   the pending message count of its tuple. The dispatcher keeps the
//!   running event until a strictly higher-effective-priority event can
//!   execute, except in pure event-driven mode (every event has exactly one
//!   thread) where a dispatched event body runs to its yield point.
//! * thread level: priority-based preemptive selection with time slices.
//!   Runnable threads holding quantum (`slice_remaining > 0`) are preferred,
//!   highest priority first; when every runnable thread has exhausted its
//!   quantum all slices are replenished, which yields a weighted round-robin
//!   among threads that stay ready.
//!
//! With a single event the kernel degenerates to a plain preemptive thread
//! scheduler; with one thread per event it degenerates to a run-to-completion
//! event loop. Both degenerations are asserted against independent oracles in
//! the acceptance suite.

use crate::script::{TaskOp, TaskScript};
use crate::tuple::{InOutcome, Message, MessageSource, OutOutcome, TupleError, TupleSpace};
use crate::types::{EventId, NodeAddr, ThreadId, Tick, TupleId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThreadState {
    Ready,
    Running,
    /// Blocked on an empty tuple; the thread is registered as a waiter on
    /// exactly one tuple and resumes when a message is handed to it.
    Suspend,
    Terminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventState {
    Ready,
    Running,
}

#[derive(Debug, Clone)]
pub struct Thread {
    pub id: ThreadId,
    /// Scheduling priority, higher is more urgent. Unique within the event.
    pub priority: u8,
    /// Quantum granted on entry, in ticks. Positive.
    pub time_slice: u32,
    pub slice_remaining: u32,
    pub state: ThreadState,
    pub script: TaskScript,
    pub pc: usize,
    /// Message delivered by the last completed IN.
    pub mailbox: Option<Message>,
}

impl Thread {
    pub fn new(id: ThreadId, priority: u8, time_slice: u32, script: TaskScript) -> Self {
        Thread {
            id,
            priority,
            time_slice,
            slice_remaining: time_slice,
            state: ThreadState::Ready,
            script,
            pc: 0,
            mailbox: None,
        }
    }

    fn runnable(&self) -> bool {
        matches!(self.state, ThreadState::Ready | ThreadState::Running)
    }

    /// Advance past the op just completed, wrapping or terminating.
    fn advance_pc(&mut self) {
        self.pc += 1;
        if self.pc >= self.script.ops.len() {
            if self.script.repeat {
                self.pc = 0;
            } else {
                self.state = ThreadState::Terminated;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Event {
    pub id: EventId,
    /// Pre-defined priority, higher is more urgent.
    pub base_priority: u8,
    /// The event's private tuple.
    pub tuple_id: TupleId,
    pub threads: Vec<Thread>,
    pub state: EventState,
}

impl Event {
    pub fn new(id: EventId, base_priority: u8, tuple_id: TupleId, threads: Vec<Thread>) -> Self {
        Event {
            id,
            base_priority,
            tuple_id,
            threads,
            state: EventState::Ready,
        }
    }

    pub fn thread(&self, id: ThreadId) -> Option<&Thread> {
        self.threads.iter().find(|t| t.id == id)
    }

    fn thread_mut(&mut self, id: ThreadId) -> Option<&mut Thread> {
        self.threads.iter_mut().find(|t| t.id == id)
    }

    pub fn has_runnable_thread(&self) -> bool {
        self.threads.iter().any(Thread::runnable)
    }

    pub fn running_thread(&self) -> Option<ThreadId> {
        self.threads
            .iter()
            .find(|t| t.state == ThreadState::Running)
            .map(|t| t.id)
    }
}

/// Derived operating mode. Never stored; recomputed from the event/thread
/// shape so it tracks dynamic reconfiguration automatically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelMode {
    EventDriven,
    ThreadDriven,
    Hybrid,
}

/// Measured scheduling overheads charged by the simulator, in instruction
/// cycles, plus the clock used to convert them to time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerCosts {
    pub event_switch_cycles: u32,
    pub thread_switch_cycles: u32,
    pub interrupt_response_cycles: u32,
    pub clock_hz: u64,
}

impl SchedulerCosts {
    pub fn time_us(&self, cycles: u64) -> f64 {
        cycles as f64 * 1e6 / self.clock_hz as f64
    }
}

impl Default for SchedulerCosts {
    fn default() -> Self {
        // Average measured costs on the 48 MHz reference platform.
        SchedulerCosts {
            event_switch_cycles: 168,
            thread_switch_cycles: 93,
            interrupt_response_cycles: 194,
            clock_hz: 48_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepReason {
    /// Same event and thread as the previous dispatch; nothing charged.
    Run,
    EventSwitch,
    ThreadSwitch,
    Idle,
}

impl StepReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepReason::Run => "run",
            StepReason::EventSwitch => "event_switch",
            StepReason::ThreadSwitch => "thread_switch",
            StepReason::Idle => "idle",
        }
    }
}

/// One line of the scheduling trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedTraceEntry {
    pub tick: Tick,
    pub event: Option<EventId>,
    pub thread: Option<ThreadId>,
    pub cycles_charged: u64,
    pub reason: StepReason,
    /// True when the executed thread left the runnable set this tick
    /// (suspended on an empty tuple or terminated).
    pub yielded: bool,
}

/// A message produced by this step that must travel to another node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteOut {
    pub owner: NodeAddr,
    pub tuple: TupleId,
    pub message: Message,
}

#[derive(Debug, PartialEq, Eq)]
pub struct StepOutcome {
    pub trace: SchedTraceEntry,
    pub sends: Vec<RemoteOut>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KernelError {
    #[error("kernel has no events")]
    NoEvents,
    #[error("event {0} has no threads")]
    EmptyEvent(EventId),
    #[error("duplicate event id {0}")]
    DuplicateEventId(EventId),
    #[error("tuple {0} is owned by more than one event")]
    DuplicateTupleId(TupleId),
    #[error("duplicate thread id {0}")]
    DuplicateThreadId(ThreadId),
    #[error("event {0}: duplicate thread priority {1}")]
    DuplicateThreadPriority(EventId, u8),
    #[error("thread {0}: time slice must be positive")]
    ZeroTimeSlice(ThreadId),
    #[error("thread {0}: task script is empty")]
    EmptyScript(ThreadId),
    #[error("no pending count supplied for tuple {0}")]
    MissingTupleCount(TupleId),
    #[error("tuple space: {0}")]
    Tuple(#[from] TupleError),
}

/// An instance of the kernel: ordered events, each owning threads.
/// The list order is the precedence relation used for tie-breaking.
#[derive(Debug, Clone)]
pub struct KernelInstance {
    pub events: Vec<Event>,
    pub running_event: Option<EventId>,
    /// Last non-idle dispatch, for switch charging and slice resets.
    last_dispatched: Option<(EventId, ThreadId)>,
}

impl KernelInstance {
    pub fn new(events: Vec<Event>) -> Result<Self, KernelError> {
        let kernel = KernelInstance {
            events,
            running_event: None,
            last_dispatched: None,
        };
        kernel.validate()?;
        Ok(kernel)
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if self.events.is_empty() {
            return Err(KernelError::NoEvents);
        }
        let mut event_ids = BTreeSet::new();
        let mut tuple_ids = BTreeSet::new();
        let mut thread_ids = BTreeSet::new();
        for event in &self.events {
            if !event_ids.insert(event.id) {
                return Err(KernelError::DuplicateEventId(event.id));
            }
            if !tuple_ids.insert(event.tuple_id) {
                return Err(KernelError::DuplicateTupleId(event.tuple_id));
            }
            if event.threads.is_empty() {
                return Err(KernelError::EmptyEvent(event.id));
            }
            let mut priorities = BTreeSet::new();
            for thread in &event.threads {
                if !thread_ids.insert(thread.id) {
                    return Err(KernelError::DuplicateThreadId(thread.id));
                }
                if !priorities.insert(thread.priority) {
                    return Err(KernelError::DuplicateThreadPriority(
                        event.id,
                        thread.priority,
                    ));
                }
                if thread.time_slice == 0 {
                    return Err(KernelError::ZeroTimeSlice(thread.id));
                }
                if thread.script.ops.is_empty() {
                    return Err(KernelError::EmptyScript(thread.id));
                }
            }
        }
        Ok(())
    }

    /// Derived mode: a single event degenerates to the thread-driven model;
    /// one thread per event degenerates to the event-driven model.
    pub fn mode(&self) -> KernelMode {
        if self.events.len() == 1 {
            KernelMode::ThreadDriven
        } else if self.events.iter().all(|e| e.threads.len() == 1) {
            KernelMode::EventDriven
        } else {
            KernelMode::Hybrid
        }
    }

    pub fn event(&self, id: EventId) -> Option<&Event> {
        self.events.iter().find(|e| e.id == id)
    }

    fn event_mut(&mut self, id: EventId) -> Option<&mut Event> {
        self.events.iter_mut().find(|e| e.id == id)
    }

    pub fn thread(&self, id: ThreadId) -> Option<&Thread> {
        self.events.iter().find_map(|e| e.thread(id))
    }

    /// True when some thread could execute a tick right now.
    pub fn has_dispatchable(&self) -> bool {
        self.events.iter().any(Event::has_runnable_thread)
    }

    /// Completes a blocked IN: the woken thread receives the handed-off
    /// message, turns Ready with a fresh quantum, and its program counter
    /// moves past the IN. Returns false if no suspended thread has this id.
    pub fn wake(&mut self, thread: ThreadId, message: Message) -> bool {
        for event in &mut self.events {
            if let Some(t) = event.thread_mut(thread) {
                if t.state != ThreadState::Suspend {
                    return false;
                }
                t.mailbox = Some(message);
                t.state = ThreadState::Ready;
                t.slice_remaining = t.time_slice;
                t.advance_pc();
                return true;
            }
        }
        false
    }

    /// Resets all scheduling state to boot conditions, keeping configuration.
    pub fn reset(&mut self) {
        self.running_event = None;
        self.last_dispatched = None;
        for event in &mut self.events {
            event.state = EventState::Ready;
            for t in &mut event.threads {
                t.state = ThreadState::Ready;
                t.pc = 0;
                t.slice_remaining = t.time_slice;
                t.mailbox = None;
            }
        }
    }

    /// Event-level selection over pending message counts: an event is
    /// runnable iff its tuple has pending messages, its effective priority
    /// is `base_priority + pending`, and ties fall to precedence order.
    pub fn select_event(
        &self,
        tuple_counts: &BTreeMap<TupleId, usize>,
    ) -> Result<Option<EventId>, KernelError> {
        let mut seen = BTreeSet::new();
        for event in &self.events {
            if !seen.insert(event.tuple_id) {
                return Err(KernelError::DuplicateTupleId(event.tuple_id));
            }
            if !tuple_counts.contains_key(&event.tuple_id) {
                return Err(KernelError::MissingTupleCount(event.tuple_id));
            }
        }
        let mut best: Option<(EventId, u64)> = None;
        for event in &self.events {
            let pending = tuple_counts[&event.tuple_id];
            if pending == 0 {
                continue;
            }
            let eff = u64::from(event.base_priority) + pending as u64;
            // strictly-greater keeps the earliest event on ties
            if best.map_or(true, |(_, b)| eff > b) {
                best = Some((event.id, eff));
            }
        }
        Ok(best.map(|(id, _)| id))
    }

    /// Thread-level selection. Runnable threads still holding quantum win,
    /// highest priority first; once every runnable thread is exhausted the
    /// round restarts and priority alone decides.
    pub fn select_thread(event: &Event) -> Option<ThreadId> {
        let runnable: Vec<&Thread> = event.threads.iter().filter(|t| t.runnable()).collect();
        if runnable.is_empty() {
            return None;
        }
        let any_quantum = runnable.iter().any(|t| t.slice_remaining > 0);
        runnable
            .iter()
            .max_by_key(|t| {
                let fresh = !any_quantum || t.slice_remaining > 0;
                (fresh, t.priority)
            })
            .map(|t| t.id)
    }

    fn effective_priority(&self, event: &Event, space: &TupleSpace) -> Result<u64, KernelError> {
        let pending = space.pending_count(event.tuple_id)?;
        Ok(u64::from(event.base_priority) + pending as u64)
    }

    /// The event the next step would dispatch, or None for idle.
    fn dispatch_target(&self, space: &TupleSpace) -> Result<Option<EventId>, KernelError> {
        let running = self
            .running_event
            .and_then(|id| self.event(id))
            .filter(|e| e.has_runnable_thread());
        // In pure event-driven mode a dispatched body runs to its yield
        // point: no event-level preemption mid-body.
        if self.mode() == KernelMode::EventDriven {
            if let Some(event) = running {
                return Ok(Some(event.id));
            }
        }
        let mut best: Option<(EventId, u64)> = None;
        for event in &self.events {
            if !event.has_runnable_thread() {
                continue;
            }
            let eff = self.effective_priority(event, space)?;
            if best.map_or(true, |(_, b)| eff > b) {
                best = Some((event.id, eff));
            }
        }
        match (running, best) {
            (Some(run), Some((best_id, best_eff))) if best_id != run.id => {
                // A different event displaces the running one only with a
                // strictly higher effective priority.
                let run_eff = self.effective_priority(run, space)?;
                Ok(Some(if best_eff > run_eff { best_id } else { run.id }))
            }
            (Some(run), _) => Ok(Some(run.id)),
            (None, best) => Ok(best.map(|(id, _)| id)),
        }
    }

    /// True iff the next step would switch away from the currently running
    /// event or thread: a strictly higher-effective-priority event can run,
    /// or a higher-priority thread turned Ready inside the running event.
    pub fn preempt_check(&self, space: &TupleSpace) -> Result<bool, KernelError> {
        let Some(running_event) = self.running_event else {
            return Ok(false);
        };
        let Some(event) = self.event(running_event) else {
            return Ok(false);
        };
        let Some(running_thread) = event.running_thread() else {
            return Ok(false);
        };
        let target = self.dispatch_target(space)?;
        if target != Some(running_event) {
            return Ok(true);
        }
        Ok(Self::select_thread(event) != Some(running_thread))
    }

    /// One dispatch: pick an event, pick a thread inside it, execute one
    /// script op, decrement the quantum, and charge switch cycles when the
    /// running event or thread changed since the previous step.
    pub fn step(
        &mut self,
        space: &mut TupleSpace,
        tick: Tick,
        costs: &SchedulerCosts,
    ) -> Result<StepOutcome, KernelError> {
        let Some(event_id) = self.dispatch_target(space)? else {
            self.running_event = None;
            return Ok(StepOutcome {
                trace: SchedTraceEntry {
                    tick,
                    event: None,
                    thread: None,
                    cycles_charged: 0,
                    reason: StepReason::Idle,
                    yielded: false,
                },
                sends: Vec::new(),
            });
        };

        // Replenish the round if every runnable thread exhausted its quantum.
        {
            let event = self.event_mut(event_id).unwrap();
            let runnable_exhausted = event.threads.iter().filter(|t| t.runnable()).count() > 0
                && event
                    .threads
                    .iter()
                    .filter(|t| t.runnable())
                    .all(|t| t.slice_remaining == 0);
            if runnable_exhausted {
                for t in event.threads.iter_mut().filter(|t| t.runnable()) {
                    t.slice_remaining = t.time_slice;
                }
            }
        }

        let thread_id =
            Self::select_thread(self.event(event_id).unwrap()).expect("candidate has a thread");

        let (reason, cycles) = match self.last_dispatched {
            Some((le, lt)) if le == event_id && lt == thread_id => (StepReason::Run, 0),
            Some((le, _)) if le == event_id => (
                StepReason::ThreadSwitch,
                u64::from(costs.thread_switch_cycles),
            ),
            _ => (
                StepReason::EventSwitch,
                u64::from(costs.event_switch_cycles),
            ),
        };

        // Update event states: exactly one Running event per kernel.
        for event in &mut self.events {
            event.state = if event.id == event_id {
                EventState::Running
            } else {
                EventState::Ready
            };
            for t in &mut event.threads {
                if t.state == ThreadState::Running {
                    t.state = ThreadState::Ready;
                }
            }
        }
        self.running_event = Some(event_id);

        let entered_fresh = self.last_dispatched != Some((event_id, thread_id));
        let mut sends = Vec::new();
        let yielded;
        {
            let event = self.event_mut(event_id).unwrap();
            let tuple_for_source = event.tuple_id;
            let _ = tuple_for_source;
            let thread = event.thread_mut(thread_id).unwrap();
            thread.state = ThreadState::Running;
            if entered_fresh {
                thread.slice_remaining = thread.time_slice;
            }
            let op = thread.script.ops[thread.pc].clone();
            let caller = thread.id;
            match op {
                TaskOp::Work => {
                    let event = self.event_mut(event_id).unwrap();
                    event.thread_mut(thread_id).unwrap().advance_pc();
                }
                TaskOp::Out { tuple, payload } => {
                    let message = Message {
                        payload,
                        source: MessageSource::Thread(caller),
                        timestamp: tick,
                    };
                    match space.out(tuple, message) {
                        Ok(OutOutcome::Deposited) => {}
                        Ok(OutOutcome::Handoff { thread: waiter, message }) => {
                            self.wake(waiter, message);
                        }
                        Ok(OutOutcome::Forwarded { owner, message }) => {
                            sends.push(RemoteOut {
                                owner,
                                tuple,
                                message,
                            });
                        }
                        // a full buffer drops the message; the counters
                        // record it and the thread carries on
                        Err(TupleError::Overflow(_, _)) => {}
                        Err(e) => return Err(e.into()),
                    }
                    let event = self.event_mut(event_id).unwrap();
                    event.thread_mut(thread_id).unwrap().advance_pc();
                }
                TaskOp::In { tuple } => match space.in_(tuple, caller)? {
                    InOutcome::Message(m) => {
                        let event = self.event_mut(event_id).unwrap();
                        let thread = event.thread_mut(thread_id).unwrap();
                        thread.mailbox = Some(m);
                        thread.advance_pc();
                    }
                    InOutcome::Blocked => {
                        let event = self.event_mut(event_id).unwrap();
                        event.thread_mut(thread_id).unwrap().state = ThreadState::Suspend;
                    }
                },
            }
            let event = self.event_mut(event_id).unwrap();
            let thread = event.thread_mut(thread_id).unwrap();
            thread.slice_remaining = thread.slice_remaining.saturating_sub(1);
            yielded = !matches!(thread.state, ThreadState::Running);
        }

        self.last_dispatched = Some((event_id, thread_id));
        Ok(StepOutcome {
            trace: SchedTraceEntry {
                tick,
                event: Some(event_id),
                thread: Some(thread_id),
                cycles_charged: cycles,
                reason,
                yielded,
            },
            sends,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tuple::TupleLocation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn work_thread(id: u16, priority: u8, slice: u32) -> Thread {
        Thread::new(
            ThreadId(id),
            priority,
            slice,
            TaskScript::new(vec![TaskOp::Work], true),
        )
    }

    fn handler_thread(id: u16, priority: u8, slice: u32, tuple: u32) -> Thread {
        Thread::new(
            ThreadId(id),
            priority,
            slice,
            TaskScript::handler(TupleId(tuple), 0),
        )
    }

    fn space_for(kernel: &KernelInstance) -> TupleSpace {
        let mut space = TupleSpace::default();
        for event in &kernel.events {
            space
                .register_tuple(event.tuple_id, TupleLocation::Local, 16)
                .unwrap();
        }
        space
    }

    fn counts(pairs: &[(u32, usize)]) -> BTreeMap<TupleId, usize> {
        pairs.iter().map(|(t, c)| (TupleId(*t), *c)).collect()
    }

    #[test]
    fn select_event_single_runnable() {
        let kernel = KernelInstance::new(vec![Event::new(
            EventId(1),
            1,
            TupleId(1),
            vec![work_thread(1, 1, 1)],
        )])
        .unwrap();
        assert_eq!(
            kernel.select_event(&counts(&[(1, 1)])).unwrap(),
            Some(EventId(1))
        );
    }

    #[test]
    fn select_event_takes_effective_priority_argmax() {
        // E1: base 5 + 1 pending = 6; E2: base 2 + 3 pending = 5.
        let kernel = KernelInstance::new(vec![
            Event::new(EventId(1), 5, TupleId(1), vec![work_thread(1, 1, 1)]),
            Event::new(EventId(2), 2, TupleId(2), vec![work_thread(2, 1, 1)]),
        ])
        .unwrap();
        let got = kernel.select_event(&counts(&[(1, 1), (2, 3)])).unwrap();
        // brute-force oracle over all events
        let oracle = [(EventId(1), 5u64 + 1), (EventId(2), 2 + 3)]
            .iter()
            .max_by_key(|(_, eff)| *eff)
            .map(|(id, _)| *id);
        assert_eq!(got, Some(EventId(1)));
        assert_eq!(got, oracle);
    }

    #[test]
    fn select_event_idle_when_nothing_pending() {
        let kernel = KernelInstance::new(vec![
            Event::new(EventId(1), 5, TupleId(1), vec![work_thread(1, 1, 1)]),
            Event::new(EventId(2), 2, TupleId(2), vec![work_thread(2, 1, 1)]),
        ])
        .unwrap();
        assert_eq!(kernel.select_event(&counts(&[(1, 0), (2, 0)])).unwrap(), None);
    }

    #[test]
    fn select_event_tie_breaks_by_precedence() {
        let kernel = KernelInstance::new(vec![
            Event::new(EventId(7), 3, TupleId(1), vec![work_thread(1, 1, 1)]),
            Event::new(EventId(8), 3, TupleId(2), vec![work_thread(2, 1, 1)]),
        ])
        .unwrap();
        assert_eq!(
            kernel.select_event(&counts(&[(1, 2), (2, 2)])).unwrap(),
            Some(EventId(7))
        );
    }

    #[test]
    fn select_event_rejects_duplicate_tuple_ids() {
        let mut kernel = KernelInstance::new(vec![
            Event::new(EventId(1), 5, TupleId(1), vec![work_thread(1, 1, 1)]),
            Event::new(EventId(2), 2, TupleId(2), vec![work_thread(2, 1, 1)]),
        ])
        .unwrap();
        kernel.events[1].tuple_id = TupleId(1);
        assert_eq!(
            kernel.select_event(&counts(&[(1, 1)])).unwrap_err(),
            KernelError::DuplicateTupleId(TupleId(1))
        );
    }

    #[test]
    fn select_event_argmax_invariant_under_translation() {
        // Adding a constant to every base priority never changes the argmax.
        let mut rng = ChaCha20Rng::seed_from_u64(0xE11E);
        for _ in 0..200 {
            let n = rng.gen_range(1..=4usize);
            let bases: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=9)).collect();
            let pending: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=5)).collect();
            let shift: u8 = rng.gen_range(1..=50);
            let build = |offset: u8| {
                KernelInstance::new(
                    (0..n)
                        .map(|i| {
                            Event::new(
                                EventId(i as u16),
                                bases[i] + offset,
                                TupleId(i as u32),
                                vec![work_thread(i as u16, 1, 1)],
                            )
                        })
                        .collect(),
                )
                .unwrap()
            };
            let cts: BTreeMap<TupleId, usize> = (0..n)
                .map(|i| (TupleId(i as u32), pending[i]))
                .collect();
            assert_eq!(
                build(0).select_event(&cts).unwrap(),
                build(shift).select_event(&cts).unwrap()
            );
        }
    }

    #[test]
    fn select_thread_single_ready() {
        let event = Event::new(EventId(1), 1, TupleId(1), vec![work_thread(1, 3, 2)]);
        assert_eq!(KernelInstance::select_thread(&event), Some(ThreadId(1)));
    }

    #[test]
    fn select_thread_priority_argmax() {
        let event = Event::new(
            EventId(1),
            1,
            TupleId(1),
            vec![work_thread(1, 3, 2), work_thread(2, 5, 2)],
        );
        assert_eq!(KernelInstance::select_thread(&event), Some(ThreadId(2)));
    }

    #[test]
    fn select_thread_none_when_all_blocked() {
        let mut event = Event::new(
            EventId(1),
            1,
            TupleId(1),
            vec![work_thread(1, 3, 2), work_thread(2, 5, 2)],
        );
        for t in &mut event.threads {
            t.state = ThreadState::Suspend;
        }
        assert_eq!(KernelInstance::select_thread(&event), None);
    }

    #[test]
    fn duplicate_thread_priority_is_config_error() {
        let err = KernelInstance::new(vec![Event::new(
            EventId(1),
            1,
            TupleId(1),
            vec![work_thread(1, 3, 2), work_thread(2, 3, 2)],
        )])
        .unwrap_err();
        assert_eq!(err, KernelError::DuplicateThreadPriority(EventId(1), 3));
    }

    #[test]
    fn step_charges_nothing_without_a_switch() {
        let mut kernel = KernelInstance::new(vec![Event::new(
            EventId(1),
            1,
            TupleId(1),
            vec![work_thread(1, 3, 10)],
        )])
        .unwrap();
        let mut space = space_for(&kernel);
        let costs = SchedulerCosts::default();
        let first = kernel.step(&mut space, 0, &costs).unwrap();
        assert_eq!(first.trace.reason, StepReason::EventSwitch);
        let second = kernel.step(&mut space, 1, &costs).unwrap();
        assert_eq!(second.trace.reason, StepReason::Run);
        assert_eq!(second.trace.cycles_charged, 0);
    }

    #[test]
    fn step_charges_thread_switch_within_event() {
        // Two work loops, slices of 1: every tick rotates the quantum.
        let mut kernel = KernelInstance::new(vec![Event::new(
            EventId(1),
            1,
            TupleId(1),
            vec![work_thread(1, 3, 1), work_thread(2, 5, 1)],
        )])
        .unwrap();
        let mut space = space_for(&kernel);
        let costs = SchedulerCosts::default();
        kernel.step(&mut space, 0, &costs).unwrap(); // dispatch T2 (higher)
        let entry = kernel.step(&mut space, 1, &costs).unwrap().trace;
        assert_eq!(entry.thread, Some(ThreadId(1)));
        assert_eq!(entry.reason, StepReason::ThreadSwitch);
        assert_eq!(entry.cycles_charged, 93);
        assert!((costs.time_us(entry.cycles_charged) - 1.9375).abs() < 1e-9);
    }

    #[test]
    fn step_charges_event_switch_between_events() {
        let mut kernel = KernelInstance::new(vec![
            Event::new(EventId(1), 1, TupleId(1), vec![handler_thread(1, 3, 2, 1)]),
            Event::new(EventId(2), 1, TupleId(2), vec![handler_thread(2, 3, 2, 2)]),
        ])
        .unwrap();
        let mut space = space_for(&kernel);
        let costs = SchedulerCosts::default();
        // both handlers block immediately; then a message fires event 2
        kernel.step(&mut space, 0, &costs).unwrap();
        kernel.step(&mut space, 1, &costs).unwrap();
        if let Ok(OutOutcome::Handoff { thread, message }) = space.out(
            TupleId(2),
            Message {
                payload: vec![1],
                source: MessageSource::Peripheral("irq".into()),
                timestamp: 2,
            },
        ) {
            kernel.wake(thread, message);
        }
        let entry = kernel.step(&mut space, 2, &costs).unwrap().trace;
        assert_eq!(entry.event, Some(EventId(2)));
        assert_eq!(entry.reason, StepReason::EventSwitch);
        assert_eq!(entry.cycles_charged, 168);
        // 168 cycles at 48 MHz is the 3.5 us entry of the overhead table
        assert!((costs.time_us(entry.cycles_charged) - 3.5).abs() < 1e-9);
    }

    #[test]
    fn idle_step_charges_nothing() {
        let mut kernel = KernelInstance::new(vec![Event::new(
            EventId(1),
            1,
            TupleId(1),
            vec![handler_thread(1, 3, 2, 1)],
        )])
        .unwrap();
        let mut space = space_for(&kernel);
        let costs = SchedulerCosts::default();
        kernel.step(&mut space, 0, &costs).unwrap(); // handler blocks
        let entry = kernel.step(&mut space, 1, &costs).unwrap().trace;
        assert_eq!(entry.reason, StepReason::Idle);
        assert_eq!(entry.cycles_charged, 0);
        assert_eq!(entry.event, None);
    }

    #[test]
    fn preempt_check_on_higher_priority_thread_wake() {
        let mut kernel = KernelInstance::new(vec![Event::new(
            EventId(1),
            1,
            TupleId(1),
            vec![work_thread(1, 2, 10), handler_thread(2, 7, 10, 1)],
        )])
        .unwrap();
        let mut space = space_for(&kernel);
        let costs = SchedulerCosts::default();
        // T2 (pri 7) blocks on the empty tuple, T1 (pri 2) runs.
        kernel.step(&mut space, 0, &costs).unwrap();
        kernel.step(&mut space, 1, &costs).unwrap();
        assert_eq!(
            kernel.event(EventId(1)).unwrap().running_thread(),
            Some(ThreadId(1))
        );
        assert!(!kernel.preempt_check(&space).unwrap());
        // message wakes the pri-7 thread: it must preempt
        if let Ok(OutOutcome::Handoff { thread, message }) = space.out(
            TupleId(1),
            Message {
                payload: vec![1],
                source: MessageSource::Peripheral("irq".into()),
                timestamp: 2,
            },
        ) {
            kernel.wake(thread, message);
        }
        assert!(kernel.preempt_check(&space).unwrap());
        let entry = kernel.step(&mut space, 2, &costs).unwrap().trace;
        assert_eq!(entry.thread, Some(ThreadId(2)));
    }

    #[test]
    fn lower_priority_ready_thread_does_not_preempt() {
        let mut kernel = KernelInstance::new(vec![Event::new(
            EventId(1),
            1,
            TupleId(1),
            vec![work_thread(1, 7, 10), work_thread(2, 2, 10)],
        )])
        .unwrap();
        let mut space = space_for(&kernel);
        let costs = SchedulerCosts::default();
        kernel.step(&mut space, 0, &costs).unwrap();
        assert_eq!(
            kernel.event(EventId(1)).unwrap().running_thread(),
            Some(ThreadId(1))
        );
        assert!(!kernel.preempt_check(&space).unwrap());
    }

    #[test]
    fn preempt_check_on_higher_effective_event() {
        let mut kernel = KernelInstance::new(vec![
        Event::new(EventId(1), 4, TupleId(1), vec![work_thread(1, 1, 10)]),
            Event::new(EventId(2), 1, TupleId(2), vec![handler_thread(2, 1, 10, 2)]),
        ])
        .unwrap();
        let mut space = space_for(&kernel);
        let costs = SchedulerCosts::default();
        // event 2's handler blocks; event 1 (eff 4) keeps the CPU
        kernel.step(&mut space, 0, &costs).unwrap();
        kernel.step(&mut space, 1, &costs).unwrap();
        assert!(!kernel.preempt_check(&space).unwrap());
        // eight messages lift event 2 to eff 1 + 8 = 9 > 4; the first one
        // wakes the waiter, the rest stay pending
        for i in 0..8 {
            match space.out(
                TupleId(2),
                Message {
                    payload: vec![i],
                    source: MessageSource::Peripheral("irq".into()),
                    timestamp: 2,
                },
            ) {
                Ok(OutOutcome::Handoff { thread, message }) => {
                    kernel.wake(thread, message);
                }
                Ok(_) => {}
                Err(e) => panic!("{e}"),
            }
        }
        assert!(kernel.preempt_check(&space).unwrap());
        let entry = kernel.step(&mut space, 2, &costs).unwrap().trace;
        assert_eq!(entry.event, Some(EventId(2)));
        assert_eq!(entry.reason, StepReason::EventSwitch);
    }

    #[test]
    fn equal_effective_priority_does_not_displace_running_event() {
        let mut kernel = KernelInstance::new(vec![
            Event::new(EventId(1), 3, TupleId(1), vec![work_thread(1, 1, 10)]),
            Event::new(EventId(2), 3, TupleId(2), vec![work_thread(2, 1, 10)]),
        ])
        .unwrap();
        let mut space = space_for(&kernel);
        let costs = SchedulerCosts::default();
        let first = kernel.step(&mut space, 0, &costs).unwrap().trace;
        assert_eq!(first.event, Some(EventId(1)));
        // event 2 has the same effective priority; no switch
        let second = kernel.step(&mut space, 1, &costs).unwrap().trace;
        assert_eq!(second.event, Some(EventId(1)));
        assert_eq!(second.reason, StepReason::Run);
    }

    #[test]
    fn slice_rotation_shares_cpu_within_sum_of_slices() {
        // Work-only loops: every runnable thread must run within the sum of
        // all time slices, regardless of priority.
        let mut rng = ChaCha20Rng::seed_from_u64(0x511CE);
        for _ in 0..50 {
            let n = rng.gen_range(2..=4usize);
            let mut priorities: Vec<u8> = (1..=9).collect::<Vec<_>>();
            let threads: Vec<Thread> = (0..n)
                .map(|i| {
                    let p = priorities.remove(rng.gen_range(0..priorities.len()));
                    work_thread(i as u16, p, rng.gen_range(1..=4))
                })
                .collect();
            let sum_slices: u64 = threads.iter().map(|t| u64::from(t.time_slice)).sum();
            let mut kernel =
                KernelInstance::new(vec![Event::new(EventId(1), 1, TupleId(1), threads)]).unwrap();
            let mut space = space_for(&kernel);
            let costs = SchedulerCosts::default();
            let mut last_run: BTreeMap<ThreadId, u64> = BTreeMap::new();
            for tick in 0..(sum_slices * 6) {
                let entry = kernel.step(&mut space, tick, &costs).unwrap().trace;
                let t = entry.thread.unwrap();
                last_run.insert(t, tick);
                for i in 0..n {
                    let id = ThreadId(i as u16);
                    if let Some(last) = last_run.get(&id) {
                        assert!(
                            tick - last <= sum_slices,
                            "thread {id} starved: last ran {last}, now {tick}, bound {sum_slices}"
                        );
                    }
                }
            }
            // every thread ran at least once in the first sum_slices ticks
            for i in 0..n {
                assert!(last_run.contains_key(&ThreadId(i as u16)));
            }
        }
    }

    #[test]
    fn mode_derivation() {
        let one_event = KernelInstance::new(vec![Event::new(
            EventId(1),
            1,
            TupleId(1),
            vec![work_thread(1, 1, 1), work_thread(2, 2, 1)],
        )])
        .unwrap();
        assert_eq!(one_event.mode(), KernelMode::ThreadDriven);

        let one_thread_each = KernelInstance::new(vec![
            Event::new(EventId(1), 1, TupleId(1), vec![work_thread(1, 1, 1)]),
            Event::new(EventId(2), 1, TupleId(2), vec![work_thread(2, 1, 1)]),
        ])
        .unwrap();
        assert_eq!(one_thread_each.mode(), KernelMode::EventDriven);

        let hybrid = KernelInstance::new(vec![
            Event::new(EventId(1), 1, TupleId(1), vec![work_thread(1, 1, 1)]),
            Event::new(
                EventId(2),
                1,
                TupleId(2),
                vec![work_thread(2, 1, 1), work_thread(3, 2, 1)],
            ),
        ])
        .unwrap();
        assert_eq!(hybrid.mode(), KernelMode::Hybrid);
    }

    #[test]
    fn identical_configurations_produce_identical_traces() {
        let build = || {
            KernelInstance::new(vec![
                Event::new(
                    EventId(1),
                    2,
                    TupleId(1),
                    vec![handler_thread(1, 3, 2, 1), work_thread(2, 5, 2)],
                ),
                Event::new(EventId(2), 4, TupleId(2), vec![handler_thread(3, 1, 1, 2)]),
            ])
            .unwrap()
        };
        let run = || {
            let mut kernel = build();
            let mut space = space_for(&kernel);
            let costs = SchedulerCosts::default();
            let mut trace = Vec::new();
            for tick in 0..40 {
                if tick == 7 || tick == 19 {
                    match space.out(
                        TupleId(2),
                        Message {
                            payload: vec![tick as u8],
                            source: MessageSource::Peripheral("irq".into()),
                            timestamp: tick,
                        },
                    ) {
                        Ok(OutOutcome::Handoff { thread, message }) => {
                            kernel.wake(thread, message);
                        }
                        Ok(_) => {}
                        Err(e) => panic!("{e}"),
                    }
                }
                trace.push(kernel.step(&mut space, tick, &costs).unwrap().trace);
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn scheduling_cost_table_time_conversions() {
        let costs = SchedulerCosts::default();
        assert!((costs.time_us(168) - 3.5).abs() < 0.1);
        assert!((costs.time_us(93) - 1.94).abs() < 0.1);
        assert!((costs.time_us(194) - 4.04).abs() < 0.1);
    }
}
