//! Simulated 3D device mesh: rank topology, rendezvous collectives and the
//! communication ledger.
//!
//! Ranks are laid out pp-major, then dp, then tp:
//! `rank = pp·(dp_size·tp_size) + dp·tp_size + tp`, so TP groups are
//! contiguous runs of ranks.

mod fabric;
mod ledger;
mod worker;

use serde::{Deserialize, Serialize};

pub use ledger::{
    AxisCounts, CollectiveCounts, CommEvent, CommKind, CommLedger, LedgerExport, OffloadTally, Origin,
};
pub use worker::{launch, LaunchOutput, RootItem, Worker};

use crate::error::{Error, Result};

/// One of the three parallelism axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Dp,
    Tp,
    Pp,
}

/// A family of communication groups. Every family partitions the world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Dp,
    Tp,
    Pp,
    /// All DP×TP ranks of one pipeline stage.
    Stage,
    World,
}

impl From<Axis> for GroupKind {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Dp => GroupKind::Dp,
            Axis::Tp => GroupKind::Tp,
            Axis::Pp => GroupKind::Pp,
        }
    }
}

/// Where the global root copies retrieved activations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OffloadMode {
    /// Stays in root device memory.
    #[default]
    Device,
    /// Staged through page-locked host memory.
    #[value(name = "pinned")]
    #[serde(rename = "pinned")]
    HostPinned,
    /// Copied straight into pageable host memory.
    #[value(name = "pageable")]
    #[serde(rename = "pageable")]
    HostPageable,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MeshCoord {
    pub dp: usize,
    pub tp: usize,
    pub pp: usize,
}

impl MeshCoord {
    pub fn axis(&self, axis: Axis) -> usize {
        match axis {
            Axis::Dp => self.dp,
            Axis::Tp => self.tp,
            Axis::Pp => self.pp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviceMesh {
    dp: usize,
    tp: usize,
    pp: usize,
}

/// A rank's view of one communication group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupInfo {
    pub kind: GroupKind,
    /// Lowest member rank; identifies the group within its family.
    pub id: usize,
    /// Position of the calling rank inside the group.
    pub index: usize,
    /// Member ranks in group-index order.
    pub members: Vec<usize>,
}

impl GroupInfo {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn is_root(&self) -> bool {
        self.index == 0
    }
}

impl DeviceMesh {
    pub fn new(dp: usize, tp: usize, pp: usize) -> Result<Self> {
        if dp == 0 || tp == 0 || pp == 0 {
            return Err(Error::Config(format!(
                "mesh sizes must be positive, got dp={dp} tp={tp} pp={pp}"
            )));
        }
        Ok(Self { dp, tp, pp })
    }

    pub fn single() -> Self {
        Self { dp: 1, tp: 1, pp: 1 }
    }

    pub fn dp_size(&self) -> usize {
        self.dp
    }

    pub fn tp_size(&self) -> usize {
        self.tp
    }

    pub fn pp_size(&self) -> usize {
        self.pp
    }

    pub fn axis_size(&self, axis: Axis) -> usize {
        match axis {
            Axis::Dp => self.dp,
            Axis::Tp => self.tp,
            Axis::Pp => self.pp,
        }
    }

    pub fn world_size(&self) -> usize {
        self.dp * self.tp * self.pp
    }

    pub fn rank_of(&self, c: MeshCoord) -> usize {
        debug_assert!(c.dp < self.dp && c.tp < self.tp && c.pp < self.pp);
        c.pp * (self.dp * self.tp) + c.dp * self.tp + c.tp
    }

    pub fn coord_of(&self, rank: usize) -> MeshCoord {
        debug_assert!(rank < self.world_size());
        MeshCoord {
            pp: rank / (self.dp * self.tp),
            dp: (rank / self.tp) % self.dp,
            tp: rank % self.tp,
        }
    }

    pub fn group(&self, kind: GroupKind, rank: usize) -> GroupInfo {
        let c = self.coord_of(rank);
        let members: Vec<usize> = match kind {
            GroupKind::Tp => (0..self.tp)
                .map(|tp| self.rank_of(MeshCoord { tp, ..c }))
                .collect(),
            GroupKind::Dp => (0..self.dp)
                .map(|dp| self.rank_of(MeshCoord { dp, ..c }))
                .collect(),
            GroupKind::Pp => (0..self.pp)
                .map(|pp| self.rank_of(MeshCoord { pp, ..c }))
                .collect(),
            GroupKind::Stage => {
                let base = c.pp * self.dp * self.tp;
                (base..base + self.dp * self.tp).collect()
            }
            GroupKind::World => (0..self.world_size()).collect(),
        };
        let index = members
            .iter()
            .position(|&r| r == rank)
            .expect("rank belongs to its own group");
        GroupInfo {
            kind,
            id: members[0],
            index,
            members,
        }
    }

    /// All groups of one family, each listed once.
    pub fn groups(&self, kind: GroupKind) -> Vec<GroupInfo> {
        let mut seen = std::collections::BTreeSet::new();
        (0..self.world_size())
            .map(|r| self.group(kind, r))
            .filter(|g| seen.insert(g.id))
            .map(|mut g| {
                g.index = 0;
                g
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_coord_bijection() {
        let m = DeviceMesh::new(2, 2, 2).unwrap();
        for r in 0..8 {
            assert_eq!(m.rank_of(m.coord_of(r)), r);
        }
        assert_eq!(m.coord_of(5), MeshCoord { dp: 0, tp: 1, pp: 1 });
        assert_eq!(m.rank_of(MeshCoord { dp: 1, tp: 0, pp: 0 }), 2);
    }

    #[test]
    fn groups_partition_world() {
        let m = DeviceMesh::new(2, 4, 3).unwrap();
        for kind in [GroupKind::Dp, GroupKind::Tp, GroupKind::Pp, GroupKind::Stage, GroupKind::World] {
            let mut all: Vec<usize> = m.groups(kind).into_iter().flat_map(|g| g.members).collect();
            all.sort();
            assert_eq!(all, (0..24).collect::<Vec<_>>(), "{kind:?}");
        }
        assert_eq!(m.group(GroupKind::Tp, 5).members, vec![4, 5, 6, 7]);
    }

    #[test]
    fn rejects_empty_axis() {
        assert!(DeviceMesh::new(1, 0, 1).is_err());
    }
}
