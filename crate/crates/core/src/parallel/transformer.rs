//! Causal decoder used as the desk-scale stand-in for a full LLM.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{
    check_replicas, dp_slice, site_tensor, visit_tensor, ColumnParallelLinear, DistTensor, ModelInput, ModuleTree,
    RowParallelLinear, ShardSpec, ShardedModel, SiteVisitor,
};
use crate::error::{Error, Result};
use crate::hooks::{Opaque, TreeNode};
use crate::mesh::{DeviceMesh, MeshCoord, Worker};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTransformerConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    /// MLP hidden width; 0 builds an attention-only model.
    pub d_mlp: usize,
    pub seq_len: usize,
    /// Rmsnorm before attention and MLP. The final norm is always present.
    pub pre_norm: bool,
    pub eps: f64,
    /// Half-open layer range per pipeline stage; empty means an even split.
    pub stages: Vec<(usize, usize)>,
}

impl Default for ToyTransformerConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_head: 16,
            d_mlp: 128,
            seq_len: 100,
            pre_norm: true,
            eps: 1e-5,
            stages: Vec::new(),
        }
    }
}

/// How a parameter is split over TP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamShard {
    Replicated,
    /// Dim 0 split (column-parallel weights).
    TpRows,
    /// Dim 1 split (row-parallel weights).
    TpCols,
}

impl ParamShard {
    pub fn spec(self, tp: usize) -> ShardSpec {
        match self {
            ParamShard::Replicated => ShardSpec::replicated(),
            ParamShard::TpRows => ShardSpec::tp(0, tp),
            ParamShard::TpCols => ShardSpec::tp(1, tp),
        }
    }

    pub fn shard<T: Scalar>(self, dense: &Tensor<T>, tp: usize, idx: usize) -> Result<Tensor<T>> {
        match self {
            ParamShard::Replicated => Ok(dense.clone()),
            ParamShard::TpRows => Ok(dense.split(0, tp)?.swap_remove(idx)),
            ParamShard::TpCols => Ok(dense.split(1, tp)?.swap_remove(idx)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub shard: ParamShard,
    /// Layer index, or `None` for embedding/head parameters.
    pub layer: Option<usize>,
}

pub type DenseParams<T> = BTreeMap<String, Tensor<T>>;

impl ToyTransformerConfig {
    pub fn attn_width(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn validate(&self, mesh: &DeviceMesh) -> Result<()> {
        let tp = mesh.tp_size();
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_head == 0 || self.seq_len == 0 {
            return fail("vocab, d_model, n_heads, d_head and seq_len must be positive".into());
        }
        if !(self.eps > 0.0) {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if self.n_heads % tp != 0 {
            return fail(format!("n_heads {} not divisible by tp {tp}", self.n_heads));
        }
        if self.d_mlp % tp != 0 {
            return fail(format!("d_mlp {} not divisible by tp {tp}", self.d_mlp));
        }
        if self.vocab % tp != 0 {
            return fail(format!("vocab {} not divisible by tp {tp}", self.vocab));
        }
        self.stage_ranges(mesh.pp_size()).map(|_| ())
    }

    pub fn stage_ranges(&self, pp: usize) -> Result<Vec<Range<usize>>> {
        if self.stages.is_empty() {
            if self.n_layers < pp {
                return Err(Error::Config(format!(
                    "{} layers cannot fill {pp} pipeline stages",
                    self.n_layers
                )));
            }
            let (base, rem) = (self.n_layers / pp, self.n_layers % pp);
            let mut start = 0;
            return Ok((0..pp)
                .map(|s| {
                    let len = base + usize::from(s < rem);
                    let r = start..start + len;
                    start += len;
                    r
                })
                .collect());
        }
        if self.stages.len() != pp {
            return Err(Error::Config(format!(
                "stage map has {} entries for pp {pp}",
                self.stages.len()
            )));
        }
        let mut next = 0;
        for &(a, b) in &self.stages {
            if a != next || b < a {
                return Err(Error::Config(format!(
                    "stage ranges {:?} do not partition 0..{}",
                    self.stages, self.n_layers
                )));
            }
            next = b;
        }
        if next != self.n_layers {
            return Err(Error::Config(format!(
                "stage ranges {:?} do not partition 0..{}",
                self.stages, self.n_layers
            )));
        }
        Ok(self.stages.iter().map(|&(a, b)| a..b).collect())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (v, d, a, m) = (self.vocab, self.d_model, self.attn_width(), self.d_mlp);
        let p = |name: String, shape: Vec<usize>, shard, layer| ParamSpec {
            name,
            shape,
            shard,
            layer,
        };
        let mut out = vec![
            p("embed.weight".into(), vec![v, d], ParamShard::Replicated, None),
            p("pos_embed.weight".into(), vec![self.seq_len, d], ParamShard::Replicated, None),
        ];
        for i in 0..self.n_layers {
            let l = Some(i);
            if self.pre_norm {
                out.push(p(format!("layers.{i}.attn_norm.weight"), vec![d], ParamShard::Replicated, l));
            }
            for x in ["q", "k", "v"] {
                out.push(p(format!("layers.{i}.attn.{x}.weight"), vec![a, d], ParamShard::TpRows, l));
            }
            out.push(p(format!("layers.{i}.attn.o.weight"), vec![d, a], ParamShard::TpCols, l));
            if m > 0 {
                if self.pre_norm {
                    out.push(p(format!("layers.{i}.mlp_norm.weight"), vec![d], ParamShard::Replicated, l));
                }
                out.push(p(format!("layers.{i}.mlp.up.weight"), vec![m, d], ParamShard::TpRows, l));
                out.push(p(format!("layers.{i}.mlp.down.weight"), vec![d, m], ParamShard::TpCols, l));
            }
        }
        out.push(p("norm.weight".into(), vec![d], ParamShard::Replicated, None));
        out.push(p("output.weight".into(), vec![v, d], ParamShard::TpRows, None));
        out
    }

    /// Hookable sites in forward order.
    pub fn site_names(&self) -> Vec<String> {
        let mut s = vec!["embed".to_string()];
        for i in 0..self.n_layers {
            s.push(format!("layers.{i}.attn.scores"));
            s.push(format!("layers.{i}.attn"));
            if self.d_mlp > 0 {
                s.push(format!("layers.{i}.mlp.up"));
                s.push(format!("layers.{i}.mlp"));
            }
            s.push(format!("layers.{i}"));
        }
        s.push("norm".into());
        s.push("output".into());
        s
    }

    /// Full shape of a site's tensor for a `[batch, seq]` token input.
    pub fn site_shape(&self, site: &str, batch: usize, seq: usize) -> Option<Vec<usize>> {
        let resid = vec![batch, seq, self.d_model];
        match site {
            "embed" | "norm" => return Some(resid),
            "output" => return Some(vec![batch, seq, self.vocab]),
            _ => {}
        }
        let rest = site.strip_prefix("layers.")?;
        let (idx, tail) = rest.split_once('.').unwrap_or((rest, ""));
        if idx.parse::<usize>().ok()? >= self.n_layers {
            return None;
        }
        match tail {
            "" | "attn" => Some(resid),
            "mlp" if self.d_mlp > 0 => Some(resid),
            "attn.scores" => Some(vec![batch, self.n_heads, seq, seq]),
            "mlp.up" if self.d_mlp > 0 => Some(vec![batch, seq, self.d_mlp]),
            _ => None,
        }
    }

    pub fn module_tree(&self) -> ModuleTree {
        ModuleTree::new(
            self.site_names(),
            self.param_specs().into_iter().map(|p| p.name).collect(),
        )
    }

    /// Seeded dense weights: norms are ones, everything else is
    /// uniform(−1/√fan_in, 1/√fan_in) from a per-parameter substream.
    pub fn init_dense<T: Scalar>(&self, seed: u64) -> Result<DenseParams<T>> {
        let mut out = BTreeMap::new();
        for spec in self.param_specs() {
            let t = if spec.name.ends_with("norm.weight") {
                Tensor::ones(&spec.shape)?
            } else {
                let fan_in = match spec.name.as_str() {
                    "embed.weight" => self.vocab,
                    "pos_embed.weight" => self.seq_len,
                    _ => spec.shape[1],
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut rng = RngStream::derive(seed, &spec.name);
                Tensor::from_fn(&spec.shape, |_| T::of(rng.uniform(-bound, bound)))?
            };
            out.insert(spec.name, t);
        }
        Ok(out)
    }
}

/// Marker carried next to the attention output, standing in for the
/// non-tensor extras a real attention module returns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionAux {
    pub layer: usize,
    pub local_heads: usize,
}

#[derive(Clone, Debug)]
struct Block<T> {
    index: usize,
    attn_norm: Option<Tensor<T>>,
    q: ColumnParallelLinear<T>,
    k: ColumnParallelLinear<T>,
    v: ColumnParallelLinear<T>,
    o: RowParallelLinear<T>,
    mlp: Option<Mlp<T>>,
}

#[derive(Clone, Debug)]
struct Mlp<T> {
    norm: Option<Tensor<T>>,
    up: ColumnParallelLinear<T>,
    down: RowParallelLinear<T>,
}

/// One rank's shard of the toy transformer.
#[derive(Clone, Debug)]
pub struct ToyTransformer<T> {
    config: ToyTransformerConfig,
    mesh: DeviceMesh,
    coord: MeshCoord,
    tree: ModuleTree,
    params: BTreeMap<String, DistTensor<T>>,
    embed: Option<(Tensor<T>, Tensor<T>)>,
    blocks: Vec<Block<T>>,
    head: Option<(Tensor<T>, ColumnParallelLinear<T>)>,
}

impl<T: Scalar> ToyTransformer<T> {
    pub fn new(config: &ToyTransformerConfig, dense: &DenseParams<T>, mesh: &DeviceMesh, coord: MeshCoord) -> Result<Self> {
        config.validate(mesh)?;
        let (tp, ti) = (mesh.tp_size(), coord.tp);
        let ranges = config.stage_ranges(mesh.pp_size())?;
        let mine = ranges[coord.pp].clone();
        let first = coord.pp == 0;
        let last = coord.pp + 1 == mesh.pp_size();

        let mut params = BTreeMap::new();
        for spec in config.param_specs() {
            let owned = match spec.layer {
                Some(l) => mine.contains(&l),
                None if spec.name.starts_with("embed") || spec.name.starts_with("pos_embed") => first,
                None => last,
            };
            if !owned {
                continue;
            }
            let t = dense
                .get(&spec.name)
                .ok_or_else(|| Error::Config(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            let local = spec.shard.shard(t, tp, ti)?;
            params.insert(spec.name.clone(), DistTensor::new(local, spec.shard.spec(tp))?);
        }

        let get = |n: &str| -> Result<Tensor<T>> {
            params
                .get(n)
                .map(|d: &DistTensor<T>| d.local.clone())
                .ok_or_else(|| Error::Config(format!("missing parameter {n}")))
        };
        let col = |n: &str, gather| -> Result<ColumnParallelLinear<T>> {
            Ok(ColumnParallelLinear {
                weight: get(n)?,
                tp_size: tp,
                gather_output: gather,
            })
        };
        let row = |n: &str| -> Result<RowParallelLinear<T>> {
            Ok(RowParallelLinear {
                weight: get(n)?,
                tp_size: tp,
            })
        };

        let embed = if first {
            Some((get("embed.weight")?, get("pos_embed.weight")?))
        } else {
            None
        };
        let mut blocks = Vec::new();
        for i in mine {
            let pre = |n: &str| -> Result<Option<Tensor<T>>> {
                if config.pre_norm {
                    get(&format!("layers.{i}.{n}.weight")).map(Some)
                } else {
                    Ok(None)
                }
            };
            let mlp = if config.d_mlp > 0 {
                Some(Mlp {
                    norm: pre("mlp_norm")?,
                    up: col(&format!("layers.{i}.mlp.up.weight"), false)?,
                    down: row(&format!("layers.{i}.mlp.down.weight"))?,
                })
            } else {
                None
            };
            blocks.push(Block {
                index: i,
                attn_norm: pre("attn_norm")?,
                q: col(&format!("layers.{i}.attn.q.weight"), false)?,
                k: col(&format!("layers.{i}.attn.k.weight"), false)?,
                v: col(&format!("layers.{i}.attn.v.weight"), false)?,
                o: row(&format!("layers.{i}.attn.o.weight"))?,
                mlp,
            });
        }
        let head = if last {
            Some((get("norm.weight")?, col("output.weight", true)?))
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            mesh: mesh.clone(),
            coord,
            tree: config.module_tree(),
            params,
            embed,
            blocks,
            head,
        })
    }

    /// One shard per rank, indexed by rank.
    pub fn shard_all(config: &ToyTransformerConfig, dense: &DenseParams<T>, mesh: &DeviceMesh) -> Result<Vec<Self>> {
        let models: Vec<Self> = (0..mesh.world_size())
            .map(|r| Self::new(config, dense, mesh, mesh.coord_of(r)))
            .collect::<Result<_>>()?;
        check_replicas(mesh, models.len())?;
        Ok(models)
    }

    pub fn config(&self) -> &ToyTransformerConfig {
        &self.config
    }

    fn eps(&self) -> T {
        T::of(self.config.eps)
    }

    fn embed(&self, tokens: &super::TokenBatch) -> Result<Tensor<T>> {
        let (e, p) = self.embed.as_ref().expect("first stage holds embeddings");
        let (b, s, d) = (tokens.batch(), tokens.seq(), self.config.d_model);
        let mut out = Vec::with_capacity(b * s * d);
        for bi in 0..b {
            for (si, &tok) in tokens.row(bi).iter().enumerate() {
                let er = &e.data()[tok * d..(tok + 1) * d];
                let pr = &p.data()[si * d..(si + 1) * d];
                out.extend(er.iter().zip(pr).map(|(&x, &y)| x + y));
            }
        }
        Tensor::from_parts(vec![b, s, d], out)
    }

    fn block_forward(
        &self,
        w: &mut Worker<'_>,
        sites: &mut dyn SiteVisitor<T>,
        blk: &Block<T>,
        x: Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (tp, dp) = (self.mesh.tp_size(), self.mesh.dp_size());
        let rspec = ShardSpec::replicated().with_dp(0, dp);
        let i = blk.index;
        let (b, s) = (x.dim(0), x.dim(1));
        let hl = self.config.n_heads / tp;
        let dh = self.config.d_head;

        let xn = match &blk.attn_norm {
            Some(wn) => x.rmsnorm(wn, self.eps())?,
            None => x.clone(),
        };
        let q = blk.q.forward(w, &xn)?.local;
        let k = blk.k.forward(w, &xn)?.local;
        let v = blk.v.forward(w, &xn)?.local;
        let width = hl * dh;
        let inv = T::one() / T::of(dh as f64).sqrt();
        let mut raw = vec![T::zero(); b * hl * s * s];
        for bi in 0..b {
            for h in 0..hl {
                for qi in 0..s {
                    let qrow = &q.data()[(bi * s + qi) * width + h * dh..][..dh];
                    for kj in 0..=qi {
                        let krow = &k.data()[(bi * s + kj) * width + h * dh..][..dh];
                        let mut acc = T::zero();
                        for (&a, &c) in qrow.iter().zip(krow) {
                            acc = acc + a * c;
                        }
                        raw[((bi * hl + h) * s + qi) * s + kj] = acc * inv;
                    }
                }
            }
        }
        let scores = Tensor::from_parts(vec![b, hl, s, s], raw)?
            .causal_mask_fill(T::neg_infinity())?
            .softmax_rows()?;
        let scores = visit_tensor(
            w,
            sites,
            &format!("layers.{i}.attn.scores"),
            scores,
            ShardSpec::tp(1, tp).with_dp(0, dp),
        )?;

        let mut ctx = vec![T::zero(); b * s * width];
        for bi in 0..b {
            for h in 0..hl {
                for qi in 0..s {
                    let arow = &scores.data()[((bi * hl + h) * s + qi) * s..][..s];
                    let out = &mut ctx[(bi * s + qi) * width + h * dh..][..dh];
                    for (kj, &a) in arow.iter().enumerate() {
                        let vrow = &v.data()[(bi * s + kj) * width + h * dh..][..dh];
                        for (o, &vv) in out.iter_mut().zip(vrow) {
                            *o = *o + a * vv;
                        }
                    }
                }
            }
        }
        let ctx = DistTensor::new(Tensor::from_parts(vec![b, s, width], ctx)?, ShardSpec::tp(2, tp))?;
        let attn = blk.o.forward(w, &ctx)?;
        let site = format!("layers.{i}.attn");
        let shape = attn.shape().to_vec();
        let tree = TreeNode::List(vec![
            TreeNode::Tensor(DistTensor::new(attn, rspec)?),
            TreeNode::Opaque(Opaque::new(AttentionAux {
                layer: i,
                local_heads: hl,
            })),
        ]);
        let attn = site_tensor(&site, &sites.visit(w, &site, tree)?)?;
        if attn.shape() != shape.as_slice() {
            return Err(Error::Pipeline {
                site,
                detail: format!("shape changed from {shape:?} to {:?}", attn.shape()),
            });
        }
        let mut x = x.add(&attn)?;

        if let Some(mlp) = &blk.mlp {
            let xn = match &mlp.norm {
                Some(wn) => x.rmsnorm(wn, self.eps())?,
                None => x.clone(),
            };
            let up = mlp.up.forward(w, &xn)?;
            let up_spec = ShardSpec::tp(2, tp).with_dp(0, dp);
            let up = visit_tensor(w, sites, &format!("layers.{i}.mlp.up"), up.local.relu(), up_spec)?;
            let down = mlp.down.forward(w, &DistTensor::new(up, ShardSpec::tp(2, tp))?)?;
            let down = visit_tensor(w, sites, &format!("layers.{i}.mlp"), down, rspec)?;
            x = x.add(&down)?;
        }
        visit_tensor(w, sites, &format!("layers.{i}"), x, rspec)
    }
}

impl<T: Scalar> ShardedModel<T> for ToyTransformer<T> {
    fn module_tree(&self) -> &ModuleTree {
        &self.tree
    }

    fn parameter(&self, name: &str) -> Option<DistTensor<T>> {
        self.params.get(name).cloned()
    }

    fn forward(
        &self,
        w: &mut Worker<'_>,
        input: &ModelInput<T>,
        sites: &mut dyn SiteVisitor<T>,
    ) -> Result<Option<Tensor<T>>> {
        let ModelInput::Tokens(tokens) = input else {
            return Err(Error::Config("toy transformer expects token input".into()));
        };
        if tokens.seq() > self.config.seq_len {
            return Err(Error::Config(format!(
                "sequence length {} exceeds {}",
                tokens.seq(),
                self.config.seq_len
            )));
        }
        if let Some(&bad) = tokens.ids().iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Config(format!("token {bad} outside vocab {}", self.config.vocab)));
        }
        let mesh = &self.mesh;
        let rspec = ShardSpec::replicated().with_dp(0, mesh.dp_size());
        let (start, n) = dp_slice(tokens.batch(), mesh, self.coord)?;
        let pp = mesh.pp_size();

        let mut x = if self.coord.pp == 0 {
            let x = self.embed(&tokens.rows(start, n)?)?;
            visit_tensor(w, sites, "embed", x, rspec)?
        } else {
            let prev = mesh.rank_of(MeshCoord {
                pp: self.coord.pp - 1,
                ..self.coord
            });
            w.recv(prev)?
        };
        for blk in &self.blocks {
            x = self.block_forward(w, sites, blk, x)?;
        }
        if self.coord.pp + 1 < pp {
            let next = mesh.rank_of(MeshCoord {
                pp: self.coord.pp + 1,
                ..self.coord
            });
            w.send(next, &x)?;
            return Ok(None);
        }
        let (norm_w, out) = self.head.as_ref().expect("last stage holds the head");
        let h = x.rmsnorm(norm_w, self.eps())?;
        let h = visit_tensor(w, sites, "norm", h, rspec)?;
        let logits = out.forward(w, &h)?.local;
        Ok(Some(visit_tensor(w, sites, "output", logits, rspec)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::{forward_unhooked, TokenBatch};

    fn small() -> ToyTransformerConfig {
        ToyTransformerConfig {
            vocab: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_head: 4,
            d_mlp: 8,
            seq_len: 6,
            ..Default::default()
        }
    }

    #[test]
    fn stage_ranges_partition() {
        let c = ToyTransformerConfig {
            n_layers: 5,
            ..Default::default()
        };
        assert_eq!(c.stage_ranges(2).unwrap(), vec![0..3, 3..5]);
        let bad = ToyTransformerConfig {
            stages: vec![(0, 2), (3, 4)],
            ..c.clone()
        };
        assert!(bad.stage_ranges(2).is_err());
        assert!(ToyTransformerConfig {
            n_heads: 3,
            ..Default::default()
        }
        .validate(&DeviceMesh::new(1, 2, 1).unwrap())
        .is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let c = small();
        let mut dense: DenseParams<f64> = c.init_dense(1).unwrap();
        for t in dense.values_mut() {
            *t = Tensor::zeros(t.shape()).unwrap();
        }
        let mesh = DeviceMesh::single();
        let models = ToyTransformer::shard_all(&c, &dense, &mesh).unwrap();
        let toks = TokenBatch::new(1, 6, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let (logits, _) = forward_unhooked(&mesh, &models, &ModelInput::Tokens(toks)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sharded_forward_matches_single_device() {
        let c = small();
        let dense: DenseParams<f64> = c.init_dense(7).unwrap();
        let toks = TokenBatch::new(2, 6, vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]).unwrap();
        let input = ModelInput::Tokens(toks);
        let single = DeviceMesh::single();
        let (oracle, _) =
            forward_unhooked(&single, &ToyTransformer::shard_all(&c, &dense, &single).unwrap(), &input).unwrap();
        assert_eq!(oracle.shape(), &[2, 6, 16]);
        let mesh = DeviceMesh::new(2, 2, 2).unwrap();
        let (got, _) = forward_unhooked(&mesh, &ToyTransformer::shard_all(&c, &dense, &mesh).unwrap(), &input).unwrap();
        assert!(got.max_abs_diff(&oracle).unwrap() <= 1e-9);
    }
}
