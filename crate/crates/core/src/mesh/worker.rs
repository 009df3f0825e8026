//! Per-rank worker handle and the collective operations it exposes.

use std::any::Any;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use super::fabric::{Deposit, Fabric};
use super::ledger::{CommKind, CommLedger, Origin};
use super::{Axis, DeviceMesh, GroupInfo, GroupKind, MeshCoord, OffloadMode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A tensor delivered to a gather root, tagged with its source.
#[derive(Clone, Debug, PartialEq)]
pub struct RootItem<T> {
    pub source_rank: usize,
    pub label: String,
    pub tensor: Tensor<T>,
}

pub struct Worker<'f> {
    fabric: &'f Fabric,
    mesh: DeviceMesh,
    rank: usize,
    coord: MeshCoord,
    origin: Origin,
    ledger: CommLedger,
}

impl<'f> Worker<'f> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn coord(&self) -> MeshCoord {
        self.coord
    }

    pub fn mesh(&self) -> &DeviceMesh {
        &self.mesh
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn group(&self, kind: GroupKind) -> GroupInfo {
        self.mesh.group(kind, self.rank)
    }

    pub fn is_global_root(&self) -> bool {
        self.rank == 0
    }

    /// Runs `f` with communication attributed to `origin`.
    pub fn with_origin<R>(&mut self, origin: Origin, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let prev = std::mem::replace(&mut self.origin, origin);
        let out = f(self);
        self.origin = prev;
        out
    }

    fn rendezvous(
        &self,
        g: &GroupInfo,
        op: &'static str,
        payload: Box<dyn Any + Send + Sync>,
    ) -> Result<Arc<Vec<Deposit>>> {
        let all = self
            .fabric
            .exchange((g.kind, g.id), g.index, self.rank, Deposit { op, payload })?;
        if let Some(d) = all.iter().find(|d| d.op != op) {
            return Err(self.collective_err(
                op,
                format!("group members disagree on the collective: {} vs {op}", d.op),
            ));
        }
        Ok(all)
    }

    fn collective_err(&self, op: &'static str, detail: impl Into<String>) -> Error {
        Error::Collective {
            op,
            rank: self.rank,
            detail: detail.into(),
        }
    }

    fn downcast<'a, P: 'static>(&self, op: &'static str, d: &'a Deposit) -> Result<&'a P> {
        d.payload
            .downcast_ref::<P>()
            .ok_or_else(|| self.collective_err(op, "payload type mismatch across members"))
    }

    fn record(&mut self, kind: CommKind, g: &GroupInfo, bytes: usize) {
        self.ledger
            .record(kind, g.kind, self.origin, bytes as u64, g.is_root());
    }

    /// Concatenates every member's tensor along `dim`, in axis-index order.
    pub fn all_gather<T: Scalar>(&mut self, axis: Axis, x: &Tensor<T>, dim: usize) -> Result<Tensor<T>> {
        const OP: &str = "all_gather";
        let g = self.group(axis.into());
        if g.size() == 1 {
            return Ok(x.clone());
        }
        if dim >= x.rank() {
            return Err(Error::shape(OP, format!("dim {dim} out of range for {:?}", x.shape())));
        }
        let all = self.rendezvous(&g, OP, Box::new(x.clone()))?;
        let parts = all
            .iter()
            .map(|d| self.downcast::<Tensor<T>>(OP, d).cloned())
            .collect::<Result<Vec<_>>>()?;
        let out = Tensor::concat(&parts, dim).map_err(|e| self.collective_err(OP, e.to_string()))?;
        let received: usize = parts
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != g.index)
            .map(|(_, p)| p.nbytes())
            .sum();
        self.record(CommKind::AllGather, &g, received);
        Ok(out)
    }

    /// Every member passes the same `x` and keeps its own slice along `dim`.
    pub fn scatter<T: Scalar>(&mut self, axis: Axis, x: &Tensor<T>, dim: usize) -> Result<Tensor<T>> {
        const OP: &str = "scatter";
        let g = self.group(axis.into());
        if g.size() == 1 {
            return Ok(x.clone());
        }
        if dim >= x.rank() || x.dim(dim) % g.size() != 0 {
            return Err(Error::shape(
                OP,
                format!("{:?} dim {dim} not divisible by group size {}", x.shape(), g.size()),
            ));
        }
        let all = self.rendezvous(&g, OP, Box::new(x.clone()))?;
        for d in all.iter() {
            if self.downcast::<Tensor<T>>(OP, d)? != x {
                return Err(self.collective_err(OP, "members passed different tensors"));
            }
        }
        let len = x.dim(dim) / g.size();
        let out = x.narrow(dim, g.index * len, len)?;
        let received = if g.is_root() { 0 } else { out.nbytes() };
        self.record(CommKind::Scatter, &g, received);
        Ok(out)
    }

    /// Elementwise sum over the group, accumulated in ascending axis-index order.
    pub fn all_reduce_sum<T: Scalar>(&mut self, axis: Axis, x: &Tensor<T>) -> Result<Tensor<T>> {
        const OP: &str = "all_reduce_sum";
        let g = self.group(axis.into());
        if g.size() == 1 {
            return Ok(x.clone());
        }
        let all = self.rendezvous(&g, OP, Box::new(x.clone()))?;
        let mut acc: Option<Tensor<T>> = None;
        for d in all.iter() {
            let p = self.downcast::<Tensor<T>>(OP, d)?;
            acc = Some(match acc {
                None => p.clone(),
                Some(a) => a.add(p).map_err(|e| self.collective_err(OP, e.to_string()))?,
            });
        }
        self.record(CommKind::AllReduce, &g, x.nbytes() * (g.size() - 1));
        Ok(acc.expect("group is non-empty"))
    }

    /// Group index 0 supplies `x`; every member receives a copy.
    pub fn broadcast<T: Scalar>(&mut self, kind: GroupKind, x: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        const OP: &str = "broadcast";
        let g = self.group(kind);
        if g.is_root() && x.is_none() {
            return Err(self.collective_err(OP, "root has nothing to broadcast"));
        }
        if g.size() == 1 {
            return Ok(x.expect("root supplies the value").clone());
        }
        let mine: Option<Tensor<T>> = if g.is_root() { x.cloned() } else { None };
        let all = self.rendezvous(&g, OP, Box::new(mine))?;
        let out = self
            .downcast::<Option<Tensor<T>>>(OP, &all[0])?
            .clone()
            .ok_or_else(|| self.collective_err(OP, "root deposit missing"))?;
        let received = if g.is_root() { 0 } else { out.nbytes() };
        self.record(CommKind::Broadcast, &g, received);
        Ok(out)
    }

    pub fn barrier(&mut self, kind: GroupKind) -> Result<()> {
        let g = self.group(kind);
        if g.size() == 1 {
            return Ok(());
        }
        self.rendezvous(&g, "barrier", Box::new(()))?;
        self.record(CommKind::Barrier, &g, 0);
        Ok(())
    }

    /// Collects every member's items at group index 0.
    ///
    /// Only `GroupKind::Pp` and `GroupKind::World` are accepted. The root
    /// receives all items ordered by source rank, then contribution order;
    /// other members receive `None`. The root's ledger records the delivered
    /// bytes as an offload in `mode`; this happens even for a group of one,
    /// since the copy itself still occurs.
    pub fn gather_to_root<T: Scalar>(
        &mut self,
        kind: GroupKind,
        items: Vec<(String, Tensor<T>)>,
        mode: OffloadMode,
    ) -> Result<Option<Vec<RootItem<T>>>> {
        const OP: &str = "gather_to_root";
        if !matches!(kind, GroupKind::Pp | GroupKind::World) {
            return Err(self.collective_err(OP, format!("unsupported group {kind:?}")));
        }
        let g = self.group(kind);
        let collected: Vec<RootItem<T>> = if g.size() == 1 {
            items
                .into_iter()
                .map(|(label, tensor)| RootItem {
                    source_rank: self.rank,
                    label,
                    tensor,
                })
                .collect()
        } else {
            let all = self.rendezvous(&g, OP, Box::new(items))?;
            if !g.is_root() {
                self.record(CommKind::GatherToRoot, &g, 0);
                return Ok(None);
            }
            let mut out = Vec::new();
            for (i, d) in all.iter().enumerate() {
                for (label, tensor) in self.downcast::<Vec<(String, Tensor<T>)>>(OP, d)? {
                    out.push(RootItem {
                        source_rank: g.members[i],
                        label: label.clone(),
                        tensor: tensor.clone(),
                    });
                }
            }
            let bytes: usize = out.iter().map(|it| it.tensor.nbytes()).sum();
            self.record(CommKind::GatherToRoot, &g, bytes);
            out
        };
        let bytes: usize = collected.iter().map(|it| it.tensor.nbytes()).sum();
        self.ledger.record_offload(mode, bytes as u64);
        Ok(Some(collected))
    }

    /// Point-to-point send; pairs with [`Worker::recv`] on `dst`.
    pub fn send<T: Scalar>(&mut self, dst: usize, x: &Tensor<T>) -> Result<()> {
        self.fabric.send(self.rank, dst, Box::new(x.clone()))
    }

    pub fn recv<T: Scalar>(&mut self, src: usize) -> Result<Tensor<T>> {
        let payload = self.fabric.recv(src, self.rank)?;
        let t = payload
            .downcast::<Tensor<T>>()
            .map_err(|_| self.collective_err("recv", "payload type mismatch"))?;
        self.ledger.record(
            CommKind::PointToPoint,
            GroupKind::Pp,
            self.origin,
            t.nbytes() as u64,
            true,
        );
        Ok(*t)
    }
}

/// Per-rank results and ledgers of a finished launch, in rank order.
#[derive(Debug)]
pub struct LaunchOutput<R> {
    pub results: Vec<R>,
    pub ledgers: Vec<CommLedger>,
}

impl<R> LaunchOutput<R> {
    pub fn merged_ledger(&self) -> CommLedger {
        CommLedger::merged(&self.ledgers)
    }
}

fn panic_message(p: &(dyn Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".to_string()
    }
}

/// Runs `program` once per rank on its own thread and joins them all.
///
/// If any rank fails, every blocked rank is woken and aborted, and the error
/// names the lowest rank that failed for a reason other than the abort.
pub fn launch<R, F>(mesh: &DeviceMesh, program: F) -> Result<LaunchOutput<R>>
where
    R: Send,
    F: Fn(&mut Worker<'_>) -> Result<R> + Sync,
{
    let fabric = Fabric::new(mesh);
    let outcomes: Vec<(std::result::Result<R, Error>, CommLedger)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..mesh.world_size())
            .map(|rank| {
                let fabric = &fabric;
                let program = &program;
                s.spawn(move || {
                    let mut w = Worker {
                        fabric,
                        mesh: *mesh,
                        rank,
                        coord: mesh.coord_of(rank),
                        origin: Origin::Model,
                        ledger: CommLedger::default(),
                    };
                    let out = match catch_unwind(AssertUnwindSafe(|| program(&mut w))) {
                        Ok(r) => r,
                        Err(p) => Err(Error::WorkerFailed {
                            rank,
                            message: panic_message(p.as_ref()),
                        }),
                    };
                    if out.is_err() {
                        fabric.abort();
                    }
                    (out, w.ledger)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panics are caught"))
            .collect()
    });

    let mut results = Vec::with_capacity(outcomes.len());
    let mut ledgers = Vec::with_capacity(outcomes.len());
    let mut first_abort: Option<usize> = None;
    let mut failure: Option<(usize, Error)> = None;
    for (rank, (out, ledger)) in outcomes.into_iter().enumerate() {
        match out {
            Ok(r) => results.push(r),
            Err(Error::Aborted { .. }) => {
                first_abort.get_or_insert(rank);
            }
            Err(e) => {
                if failure.is_none() {
                    failure = Some((rank, e));
                }
            }
        }
        ledgers.push(ledger);
    }
    match (failure, first_abort) {
        (Some((rank, Error::WorkerFailed { message, .. })), _) => Err(Error::WorkerFailed { rank, message }),
        (Some((rank, e)), _) => Err(Error::WorkerFailed {
            rank,
            message: e.to_string(),
        }),
        (None, Some(rank)) => Err(Error::WorkerFailed {
            rank,
            message: "aborted".into(),
        }),
        (None, None) => Ok(LaunchOutput { results, ledgers }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mesh(dp: usize, tp: usize, pp: usize) -> DeviceMesh {
        DeviceMesh::new(dp, tp, pp).unwrap()
    }

    #[test]
    fn launch_returns_rank_order() {
        let out = launch(&mesh(1, 1, 1), |w| Ok(w.coord())).unwrap();
        assert_eq!(out.results, vec![MeshCoord { dp: 0, tp: 0, pp: 0 }]);
        let out = launch(&mesh(2, 2, 2), |w| Ok(w.rank())).unwrap();
        assert_eq!(out.results, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn world_barrier_counts_once() {
        let out = launch(&mesh(2, 2, 2), |w| w.barrier(GroupKind::World)).unwrap();
        assert_eq!(out.merged_ledger().total.barrier.world, 1);
        assert!(out.ledgers.iter().all(|l| l.events.len() == 1));
    }

    #[test]
    fn all_gather_two_members() {
        let out = launch(&mesh(1, 2, 1), |w| {
            let x = Tensor::new(vec![2], vec![1.0 + 2.0 * w.rank() as f64, 2.0 + 2.0 * w.rank() as f64])?;
            w.all_gather(Axis::Tp, &x, 0)
        })
        .unwrap();
        for r in &out.results {
            assert_eq!(r.data(), &[1.0, 2.0, 3.0, 4.0]);
        }
        let l = out.merged_ledger();
        assert_eq!(l.total.all_gather.tp, 1);
        assert_eq!(l.bytes_comm, 2 * 16);
    }

    #[test]
    fn group_of_one_is_noop() {
        let out = launch(&mesh(1, 1, 1), |w| {
            let x = Tensor::<f64>::ones(&[3])?;
            let y = w.all_gather(Axis::Tp, &x, 0)?;
            let z = w.scatter(Axis::Dp, &y, 0)?;
            let s = w.all_reduce_sum(Axis::Tp, &z)?;
            Ok(s)
        })
        .unwrap();
        assert_eq!(out.results[0].data(), &[1.0; 3]);
        assert_eq!(out.ledgers[0], CommLedger::default());
    }

    #[test]
    fn scatter_slices_and_checks_divisibility() {
        let out = launch(&mesh(1, 2, 1), |w| {
            let x = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0])?;
            w.scatter(Axis::Tp, &x, 0)
        })
        .unwrap();
        assert_eq!(out.results[0].data(), &[1.0, 2.0]);
        assert_eq!(out.results[1].data(), &[3.0, 4.0]);
        let err = launch(&mesh(1, 2, 1), |w| {
            let x = Tensor::<f64>::ones(&[3])?;
            w.scatter(Axis::Tp, &x, 0)
        });
        assert!(err.is_err());
    }

    #[test]
    fn all_reduce_cancels() {
        let out = launch(&mesh(1, 2, 1), |w| {
            let sign = if w.rank() == 0 { 1.0 } else { -1.0 };
            let x = Tensor::new(vec![3], vec![sign * 1.5, sign * 2.0, sign * -7.0])?;
            w.all_reduce_sum(Axis::Tp, &x)
        })
        .unwrap();
        assert!(out.results.iter().all(|r| r.data() == [0.0; 3]));
    }

    #[test]
    fn mismatched_shapes_fail_all_members() {
        let err = launch(&mesh(1, 2, 1), |w| {
            let x = Tensor::<f64>::ones(&[2, 1 + w.rank()])?;
            w.all_gather(Axis::Tp, &x, 0)
        })
        .unwrap_err();
        assert!(matches!(err, Error::WorkerFailed { rank: 0, .. }), "{err}");
    }

    #[test]
    fn failure_aborts_blocked_ranks() {
        let err = launch(&mesh(1, 4, 1), |w| {
            if w.rank() == 2 {
                return Err(Error::Config("boom".into()));
            }
            w.barrier(GroupKind::World)
        })
        .unwrap_err();
        match err {
            Error::WorkerFailed { rank, message } => {
                assert_eq!(rank, 2);
                assert!(message.contains("boom"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn panics_are_reported_with_rank() {
        let err = launch(&mesh(1, 2, 1), |w| {
            if w.rank() == 1 {
                panic!("kaboom");
            }
            w.barrier(GroupKind::World)
        })
        .unwrap_err();
        assert!(matches!(err, Error::WorkerFailed { rank: 1, ref message } if message == "kaboom"));
    }

    #[test]
    fn gather_to_root_orders_by_rank_and_counts_bytes() {
        let out = launch(&mesh(1, 1, 2), |w| {
            let t = Tensor::<f64>::full(&[3], w.rank() as f64)?;
            w.gather_to_root(GroupKind::World, vec![("x".into(), t)], OffloadMode::HostPinned)
        })
        .unwrap();
        let root = out.results[0].as_ref().unwrap();
        assert_eq!(root.len(), 2);
        assert_eq!(root[0].source_rank, 0);
        assert_eq!(root[1].tensor.data(), &[1.0; 3]);
        assert!(out.results[1].is_none());
        assert_eq!(out.ledgers[0].offload.host_pinned, 2 * 3 * 8);
        assert_eq!(out.ledgers[1].offload.host(), 0);
    }

    #[test]
    fn point_to_point_between_stages() {
        let out = launch(&mesh(1, 1, 2), |w| {
            if w.rank() == 0 {
                w.send(1, &Tensor::<f64>::full(&[2], 9.0)?)?;
                Ok(None)
            } else {
                Ok(Some(w.recv::<f64>(0)?))
            }
        })
        .unwrap();
        assert_eq!(out.results[1].as_ref().unwrap().data(), &[9.0, 9.0]);
    }

    #[test]
    fn broadcast_from_group_root() {
        let out = launch(&mesh(2, 2, 1), |w| {
            let mine = Tensor::<f64>::full(&[2], w.rank() as f64)?;
            w.broadcast(GroupKind::Stage, Some(&mine))
        })
        .unwrap();
        assert!(out.results.iter().all(|r| r.data() == [0.0, 0.0]));
    }
}
