//! In-memory rendezvous exchange and point-to-point mailboxes shared by all workers.

use std::any::Any;
use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use super::{DeviceMesh, GroupKind};
use crate::error::{Error, Result};

pub(crate) type Payload = Box<dyn Any + Send + Sync>;

pub(crate) struct Deposit {
    pub op: &'static str,
    pub payload: Payload,
}

struct ExchangeState {
    generation: u64,
    arrived: usize,
    slots: Vec<Option<Deposit>>,
    result: Option<Arc<Vec<Deposit>>>,
}

/// All-to-all rendezvous for one group. Every member deposits once per round
/// and receives every deposit in group-index order.
struct Exchange {
    state: Mutex<ExchangeState>,
    cv: Condvar,
}

struct Mailbox {
    queue: Mutex<VecDeque<Payload>>,
    cv: Condvar,
}

pub(crate) struct Fabric {
    exchanges: HashMap<(GroupKind, usize), Exchange>,
    mailboxes: HashMap<(usize, usize), Mailbox>,
    aborted: AtomicBool,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Fabric {
    pub fn new(mesh: &DeviceMesh) -> Self {
        let mut exchanges = HashMap::new();
        for kind in [
            GroupKind::Dp,
            GroupKind::Tp,
            GroupKind::Pp,
            GroupKind::Stage,
            GroupKind::World,
        ] {
            for g in mesh.groups(kind) {
                exchanges.insert(
                    (kind, g.id),
                    Exchange {
                        state: Mutex::new(ExchangeState {
                            generation: 0,
                            arrived: 0,
                            slots: (0..g.size()).map(|_| None).collect(),
                            result: None,
                        }),
                        cv: Condvar::new(),
                    },
                );
            }
        }
        let n = mesh.world_size();
        let mut mailboxes = HashMap::new();
        for src in 0..n {
            for dst in 0..n {
                if src != dst {
                    mailboxes.insert(
                        (src, dst),
                        Mailbox {
                            queue: Mutex::new(VecDeque::new()),
                            cv: Condvar::new(),
                        },
                    );
                }
            }
        }
        Self {
            exchanges,
            mailboxes,
            aborted: AtomicBool::new(false),
        }
    }

    pub fn is_aborted(&self) -> bool {
        self.aborted.load(Ordering::SeqCst)
    }

    /// Wakes every blocked worker; their pending operations fail with `Aborted`.
    pub fn abort(&self) {
        self.aborted.store(true, Ordering::SeqCst);
        for ex in self.exchanges.values() {
            let _guard = lock(&ex.state);
            ex.cv.notify_all();
        }
        for mb in self.mailboxes.values() {
            let _guard = lock(&mb.queue);
            mb.cv.notify_all();
        }
    }

    pub fn exchange(
        &self,
        key: (GroupKind, usize),
        index: usize,
        rank: usize,
        deposit: Deposit,
    ) -> Result<Arc<Vec<Deposit>>> {
        let ex = &self.exchanges[&key];
        let mut st = lock(&ex.state);
        if self.is_aborted() {
            return Err(Error::Aborted { rank });
        }
        let generation = st.generation;
        debug_assert!(st.slots[index].is_none(), "rank {rank} entered a collective twice");
        st.slots[index] = Some(deposit);
        st.arrived += 1;
        if st.arrived == st.slots.len() {
            let all: Vec<Deposit> = st
                .slots
                .iter_mut()
                .map(|s| s.take().expect("every slot filled"))
                .collect();
            let all = Arc::new(all);
            st.result = Some(Arc::clone(&all));
            st.arrived = 0;
            st.generation += 1;
            ex.cv.notify_all();
            return Ok(all);
        }
        // A later round cannot complete before this member re-enters, so the
        // result slot still holds this round's deposits when we wake.
        loop {
            st = ex.cv.wait(st).unwrap_or_else(|e| e.into_inner());
            if st.generation != generation {
                return Ok(Arc::clone(st.result.as_ref().expect("round result")));
            }
            if self.is_aborted() {
                return Err(Error::Aborted { rank });
            }
        }
    }

    pub fn send(&self, src: usize, dst: usize, payload: Payload) -> Result<()> {
        if self.is_aborted() {
            return Err(Error::Aborted { rank: src });
        }
        let mb = self
            .mailboxes
            .get(&(src, dst))
            .ok_or_else(|| Error::Collective {
                op: "send",
                rank: src,
                detail: format!("no channel {src} -> {dst}"),
            })?;
        lock(&mb.queue).push_back(payload);
        mb.cv.notify_all();
        Ok(())
    }

    pub fn recv(&self, src: usize, dst: usize) -> Result<Payload> {
        let mb = self
            .mailboxes
            .get(&(src, dst))
            .ok_or_else(|| Error::Collective {
                op: "recv",
                rank: dst,
                detail: format!("no channel {src} -> {dst}"),
            })?;
        let mut q = lock(&mb.queue);
        loop {
            if let Some(p) = q.pop_front() {
                return Ok(p);
            }
            if self.is_aborted() {
                return Err(Error::Aborted { rank: dst });
            }
            q = mb.cv.wait(q).unwrap_or_else(|e| e.into_inner());
        }
    }
}
