use super::{
    check_replicas, visit_tensor, ColumnParallelLinear, DistTensor, ModelInput, ModuleTree, RowParallelLinear,
    ShardSpec, ShardedModel, SiteVisitor,
};
use crate::error::{Error, Result};
use crate::mesh::{DeviceMesh, MeshCoord, Worker};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Layer<T> {
    Column(ColumnParallelLinear<T>),
    Row(RowParallelLinear<T>),
}

/// Stack of column/row parallel linear layers with ReLU between them.
///
/// Even layers are column-parallel without output gather, odd layers are
/// row-parallel. TP only.
#[derive(Clone, Debug)]
pub struct AlternatingLinearModel<T> {
    d_model: usize,
    tp: usize,
    layers: Vec<Layer<T>>,
    tree: ModuleTree,
}

impl<T: Scalar> AlternatingLinearModel<T> {
    pub fn new(n_layers: usize, d_model: usize, mesh: &DeviceMesh, coord: MeshCoord, seed: u64) -> Result<Self> {
        if n_layers == 0 || n_layers % 2 != 0 {
            return Err(Error::Config(format!("n_layers must be even and positive, got {n_layers}")));
        }
        if mesh.dp_size() != 1 || mesh.pp_size() != 1 {
            return Err(Error::Config("the alternating linear model is TP-only".into()));
        }
        let tp = mesh.tp_size();
        if d_model % tp != 0 {
            return Err(Error::Config(format!("d_model {d_model} not divisible by tp {tp}")));
        }
        let bound = 1.0 / (d_model as f64).sqrt();
        let mut layers = Vec::with_capacity(n_layers);
        let mut names = Vec::new();
        for i in 0..n_layers {
            let name = format!("layers.{i}.weight");
            let mut rng = RngStream::derive(seed, &name);
            let dense = Tensor::from_fn(&[d_model, d_model], |_| T::of(rng.uniform(-bound, bound)))?;
            layers.push(if i % 2 == 0 {
                Layer::Column(ColumnParallelLinear::from_dense(&dense, tp, coord.tp, false)?)
            } else {
                Layer::Row(RowParallelLinear::from_dense(&dense, tp, coord.tp)?)
            });
            names.push(name);
        }
        let sites = (0..n_layers).map(|i| format!("layers.{i}")).collect();
        Ok(Self {
            d_model,
            tp,
            layers,
            tree: ModuleTree::new(sites, names),
        })
    }

    pub fn shard_all(n_layers: usize, d_model: usize, mesh: &DeviceMesh, seed: u64) -> Result<Vec<Self>> {
        let models: Vec<Self> = (0..mesh.world_size())
            .map(|r| Self::new(n_layers, d_model, mesh, mesh.coord_of(r), seed))
            .collect::<Result<_>>()?;
        check_replicas(mesh, models.len())?;
        Ok(models)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }
}

impl<T: Scalar> ShardedModel<T> for AlternatingLinearModel<T> {
    fn module_tree(&self) -> &ModuleTree {
        &self.tree
    }

    fn parameter(&self, name: &str) -> Option<DistTensor<T>> {
        let i: usize = name.strip_prefix("layers.")?.strip_suffix(".weight")?.parse().ok()?;
        Some(match self.layers.get(i)? {
            Layer::Column(c) => DistTensor {
                local: c.weight.clone(),
                spec: c.spec(),
            },
            Layer::Row(r) => DistTensor {
                local: r.weight.clone(),
                spec: r.spec(),
            },
        })
    }

    fn forward(
        &self,
        w: &mut Worker<'_>,
        input: &ModelInput<T>,
        sites: &mut dyn SiteVisitor<T>,
    ) -> Result<Option<Tensor<T>>> {
        let ModelInput::Dense(x) = input else {
            return Err(Error::Config("alternating model expects a dense [b, s, d] input".into()));
        };
        if x.rank() != 3 || x.last_dim() != self.d_model {
            return Err(Error::shape("alternating_forward", format!("input {:?}", x.shape())));
        }
        let n = self.layers.len();
        let mut x = x.clone();
        let mut hidden: Option<DistTensor<T>> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let site = format!("layers.{i}");
            match layer {
                Layer::Column(c) => {
                    let y = c.forward(w, &x)?;
                    let y = visit_tensor(w, sites, &site, y.local, y.spec)?;
                    hidden = Some(DistTensor::new(y.relu(), ShardSpec::tp(2, self.tp))?);
                }
                Layer::Row(r) => {
                    let h = hidden.take().expect("row layer follows a column layer");
                    let y = r.forward(w, &h)?;
                    let y = visit_tensor(w, sites, &site, y, ShardSpec::replicated())?;
                    x = if i + 1 == n { y } else { y.relu() };
                }
            }
        }
        Ok(Some(x))
    }
}
