use serde::Serialize;

use super::{GroupKind, OffloadMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CommKind {
    AllGather,
    Scatter,
    AllReduce,
    Broadcast,
    Barrier,
    PointToPoint,
    GatherToRoot,
}

/// Who issued a communication: the model's own layers or a hook pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    #[default]
    Model,
    Hook,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CommEvent {
    pub kind: CommKind,
    pub group: GroupKind,
    pub origin: Origin,
    /// Payload bytes received by the recording rank.
    pub bytes: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AxisCounts {
    pub dp: u64,
    pub tp: u64,
    pub pp: u64,
    pub stage: u64,
    pub world: u64,
}

impl AxisCounts {
    fn bump(&mut self, g: GroupKind) {
        match g {
            GroupKind::Dp => self.dp += 1,
            GroupKind::Tp => self.tp += 1,
            GroupKind::Pp => self.pp += 1,
            GroupKind::Stage => self.stage += 1,
            GroupKind::World => self.world += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.dp + self.tp + self.pp + self.stage + self.world
    }

    fn merge(&mut self, o: &Self) {
        self.dp += o.dp;
        self.tp += o.tp;
        self.pp += o.pp;
        self.stage += o.stage;
        self.world += o.world;
    }
}

/// Collective instance counts. Each instance is credited once, to the member
/// at group index 0, so summing per-rank ledgers counts every instance once.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CollectiveCounts {
    pub all_gather: AxisCounts,
    pub scatter: AxisCounts,
    pub all_reduce: AxisCounts,
    pub broadcast: AxisCounts,
    pub barrier: AxisCounts,
    pub gather_to_root: AxisCounts,
    pub point_to_point: u64,
}

impl CollectiveCounts {
    fn bump(&mut self, kind: CommKind, g: GroupKind) {
        match kind {
            CommKind::AllGather => self.all_gather.bump(g),
            CommKind::Scatter => self.scatter.bump(g),
            CommKind::AllReduce => self.all_reduce.bump(g),
            CommKind::Broadcast => self.broadcast.bump(g),
            CommKind::Barrier => self.barrier.bump(g),
            CommKind::GatherToRoot => self.gather_to_root.bump(g),
            CommKind::PointToPoint => self.point_to_point += 1,
        }
    }

    fn merge(&mut self, o: &Self) {
        self.all_gather.merge(&o.all_gather);
        self.scatter.merge(&o.scatter);
        self.all_reduce.merge(&o.all_reduce);
        self.broadcast.merge(&o.broadcast);
        self.barrier.merge(&o.barrier);
        self.gather_to_root.merge(&o.gather_to_root);
        self.point_to_point += o.point_to_point;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OffloadTally {
    pub device: u64,
    pub host_pinned: u64,
    pub host_pageable: u64,
}

impl OffloadTally {
    pub fn bytes(&self, mode: OffloadMode) -> u64 {
        match mode {
            OffloadMode::Device => self.device,
            OffloadMode::HostPinned => self.host_pinned,
            OffloadMode::HostPageable => self.host_pageable,
        }
    }

    pub fn host(&self) -> u64 {
        self.host_pinned + self.host_pageable
    }
}

/// Per-run record of collective events and bytes moved.
///
/// Byte counters hold payload bytes *received* by each member, excluding
/// protocol overhead. All counters only ever grow.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CommLedger {
    pub total: CollectiveCounts,
    pub hook: CollectiveCounts,
    pub bytes_comm: u64,
    pub hook_bytes_comm: u64,
    pub offload: OffloadTally,
    pub events: Vec<CommEvent>,
}

/// Fixed-key JSON export of a ledger.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LedgerExport {
    pub n_all_gather_tp: u64,
    pub n_all_gather_dp: u64,
    pub n_scatter_tp: u64,
    pub n_scatter_dp: u64,
    pub n_all_reduce_tp: u64,
    pub n_gather_to_root: u64,
    pub bytes_comm: u64,
    pub bytes_offload_host: u64,
}

impl CommLedger {
    pub(crate) fn record(
        &mut self,
        kind: CommKind,
        group: GroupKind,
        origin: Origin,
        bytes: u64,
        credit_instance: bool,
    ) {
        if credit_instance {
            self.total.bump(kind, group);
            if origin == Origin::Hook {
                self.hook.bump(kind, group);
            }
        }
        if kind != CommKind::GatherToRoot {
            self.bytes_comm += bytes;
            if origin == Origin::Hook {
                self.hook_bytes_comm += bytes;
            }
        }
        self.events.push(CommEvent {
            kind,
            group,
            origin,
            bytes,
        });
    }

    pub(crate) fn record_offload(&mut self, mode: OffloadMode, bytes: u64) {
        match mode {
            OffloadMode::Device => self.offload.device += bytes,
            OffloadMode::HostPinned => self.offload.host_pinned += bytes,
            OffloadMode::HostPageable => self.offload.host_pageable += bytes,
        }
    }

    pub fn merge(&mut self, other: &CommLedger) {
        self.total.merge(&other.total);
        self.hook.merge(&other.hook);
        self.bytes_comm += other.bytes_comm;
        self.hook_bytes_comm += other.hook_bytes_comm;
        self.offload.device += other.offload.device;
        self.offload.host_pinned += other.offload.host_pinned;
        self.offload.host_pageable += other.offload.host_pageable;
        self.events.extend(other.events.iter().cloned());
    }

    pub fn merged<'a>(ledgers: impl IntoIterator<Item = &'a CommLedger>) -> CommLedger {
        let mut out = CommLedger::default();
        for l in ledgers {
            out.merge(l);
        }
        out
    }

    /// Counters accumulated since `earlier`, a previous snapshot of this ledger.
    pub fn since(&self, earlier: &CommLedger) -> CommLedger {
        fn sub_axis(a: &AxisCounts, b: &AxisCounts) -> AxisCounts {
            AxisCounts {
                dp: a.dp - b.dp,
                tp: a.tp - b.tp,
                pp: a.pp - b.pp,
                stage: a.stage - b.stage,
                world: a.world - b.world,
            }
        }
        fn sub_counts(a: &CollectiveCounts, b: &CollectiveCounts) -> CollectiveCounts {
            CollectiveCounts {
                all_gather: sub_axis(&a.all_gather, &b.all_gather),
                scatter: sub_axis(&a.scatter, &b.scatter),
                all_reduce: sub_axis(&a.all_reduce, &b.all_reduce),
                broadcast: sub_axis(&a.broadcast, &b.broadcast),
                barrier: sub_axis(&a.barrier, &b.barrier),
                gather_to_root: sub_axis(&a.gather_to_root, &b.gather_to_root),
                point_to_point: a.point_to_point - b.point_to_point,
            }
        }
        CommLedger {
            total: sub_counts(&self.total, &earlier.total),
            hook: sub_counts(&self.hook, &earlier.hook),
            bytes_comm: self.bytes_comm - earlier.bytes_comm,
            hook_bytes_comm: self.hook_bytes_comm - earlier.hook_bytes_comm,
            offload: OffloadTally {
                device: self.offload.device - earlier.offload.device,
                host_pinned: self.offload.host_pinned - earlier.offload.host_pinned,
                host_pageable: self.offload.host_pageable - earlier.offload.host_pageable,
            },
            events: self.events[earlier.events.len()..].to_vec(),
        }
    }

    pub fn export(&self) -> LedgerExport {
        LedgerExport {
            n_all_gather_tp: self.total.all_gather.tp,
            n_all_gather_dp: self.total.all_gather.dp,
            n_scatter_tp: self.total.scatter.tp,
            n_scatter_dp: self.total.scatter.dp,
            n_all_reduce_tp: self.total.all_reduce.tp,
            n_gather_to_root: self.total.gather_to_root.total(),
            bytes_comm: self.bytes_comm,
            bytes_offload_host: self.offload.host(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.export()).expect("ledger export serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn export_keys_are_fixed() {
        let l = CommLedger::default();
        let v: serde_json::Value = serde_json::from_str(&l.to_json()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        let mut want = vec![
            "n_all_gather_tp",
            "n_all_gather_dp",
            "n_scatter_tp",
            "n_scatter_dp",
            "n_all_reduce_tp",
            "n_gather_to_root",
            "bytes_comm",
            "bytes_offload_host",
        ];
        want.sort();
        let mut keys = keys;
        keys.sort();
        assert_eq!(keys, want);
    }

    #[test]
    fn hook_origin_tracked_separately() {
        let mut l = CommLedger::default();
        l.record(CommKind::AllGather, GroupKind::Tp, Origin::Model, 16, true);
        l.record(CommKind::AllGather, GroupKind::Tp, Origin::Hook, 32, true);
        l.record(CommKind::AllGather, GroupKind::Tp, Origin::Hook, 32, false);
        assert_eq!(l.total.all_gather.tp, 2);
        assert_eq!(l.hook.all_gather.tp, 1);
        assert_eq!(l.bytes_comm, 80);
        assert_eq!(l.hook_bytes_comm, 64);
        assert_eq!(l.events.len(), 3);
    }
}
