#![allow(dead_code)]

use std::collections::BTreeMap;

use flexmesh::hooks::{FlexWrapper, HookFunction};
use flexmesh::mesh::{DeviceMesh, OffloadMode};
use flexmesh::parallel::{DenseParams, ModelInput, TokenBatch, ToyTransformer, ToyTransformerConfig};
use flexmesh::rng::RngStream;
use flexmesh::Tensor64;

pub const BATCH: usize = 2;

/// d=64, 4 layers, 4 heads, S=100.
pub fn toy_config() -> ToyTransformerConfig {
    ToyTransformerConfig {
        vocab: 64,
        d_model: 64,
        n_layers: 4,
        n_heads: 4,
        d_head: 16,
        d_mlp: 128,
        seq_len: 100,
        ..Default::default()
    }
}

pub fn tokens(cfg: &ToyTransformerConfig, batch: usize, seed: u64) -> TokenBatch {
    let mut rng = RngStream::new(seed);
    let ids = (0..batch * cfg.seq_len).map(|_| rng.below(cfg.vocab)).collect();
    TokenBatch::new(batch, cfg.seq_len, ids).unwrap()
}

pub fn wrap(
    cfg: &ToyTransformerConfig,
    dense: &DenseParams<f64>,
    mesh: DeviceMesh,
) -> FlexWrapper<f64, ToyTransformer<f64>> {
    let models = ToyTransformer::shard_all(cfg, dense, &mesh).unwrap();
    FlexWrapper::wrap(models, mesh, OffloadMode::Device).unwrap()
}

/// Registers a retrieval hook with the full expected shape on every site.
pub fn hook_all_sites(w: &mut FlexWrapper<f64, ToyTransformer<f64>>, cfg: &ToyTransformerConfig, batch: usize) {
    for site in cfg.site_names() {
        let shape = cfg.site_shape(&site, batch, cfg.seq_len).unwrap();
        w.register_hook_function(HookFunction::new(site, shape.into_iter().map(Some).collect()))
            .unwrap();
    }
}

pub fn all_meshes() -> Vec<(usize, usize, usize)> {
    let mut v = Vec::new();
    for dp in [1, 2] {
        for tp in [1, 2] {
            for pp in [1, 2] {
                v.push((dp, tp, pp));
            }
        }
    }
    v
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Flat row-major activations of a plain loop implementation.
pub struct Reference {
    pub logits: Vec<f64>,
    pub sites: BTreeMap<String, Vec<f64>>,
}

fn mat(p: &DenseParams<f64>, name: &str) -> (usize, usize, Vec<f64>) {
    let t = &p[name];
    (t.dim(0), t.dim(1), t.data().to_vec())
}

/// `y[r] = W x[r]` with `W` stored `[out, in]`.
fn lin(x: &[f64], rows: usize, w: &(usize, usize, Vec<f64>)) -> Vec<f64> {
    let (o, i, wd) = w;
    let mut y = vec![0.0; rows * o];
    for r in 0..rows {
        for a in 0..*o {
            let mut acc = 0.0;
            for c in 0..*i {
                acc += wd[a * i + c] * x[r * i + c];
            }
            y[r * o + a] = acc;
        }
    }
    y
}

fn norm(x: &[f64], d: usize, w: &[f64], eps: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    for row in y.chunks_mut(d) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = (ms + eps).sqrt();
        for (v, g) in row.iter_mut().zip(w) {
            *v = *v / r * g;
        }
    }
    y
}

/// Pre-norm transformer forward written without the library's tensor ops.
pub fn reference_forward(cfg: &ToyTransformerConfig, p: &DenseParams<f64>, toks: &TokenBatch) -> Reference {
    let (b, s, d, v) = (toks.batch(), toks.seq(), cfg.d_model, cfg.vocab);
    let (nh, dh) = (cfg.n_heads, cfg.d_head);
    let rows = b * s;
    let mut sites = BTreeMap::new();
    let emb = p["embed.weight"].data();
    let pos = p["pos_embed.weight"].data();
    let mut x = vec![0.0; rows * d];
    for bi in 0..b {
        for si in 0..s {
            let t = toks.ids()[bi * s + si];
            for j in 0..d {
                x[(bi * s + si) * d + j] = emb[t * d + j] + pos[si * d + j];
            }
        }
    }
    sites.insert("embed".to_string(), x.clone());
    for l in 0..cfg.n_layers {
        let pre = |n: &str| format!("layers.{l}.{n}");
        let xn = norm(&x, d, p[&pre("attn_norm.weight")].data(), cfg.eps);
        let q = lin(&xn, rows, &mat(p, &pre("attn.q.weight")));
        let k = lin(&xn, rows, &mat(p, &pre("attn.k.weight")));
        let vv = lin(&xn, rows, &mat(p, &pre("attn.v.weight")));
        let w = nh * dh;
        let mut probs = vec![0.0; b * nh * s * s];
        let mut ctx = vec![0.0; rows * w];
        for bi in 0..b {
            for h in 0..nh {
                for i in 0..s {
                    let sc: Vec<f64> = (0..=i)
                        .map(|j| {
                            (0..dh)
                                .map(|c| q[(bi * s + i) * w + h * dh + c] * k[(bi * s + j) * w + h * dh + c])
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = sc.iter().map(|e| (e - m).exp()).sum();
                    for j in 0..=i {
                        let a = (sc[j] - m).exp() / z;
                        probs[((bi * nh + h) * s + i) * s + j] = a;
                        for c in 0..dh {
                            ctx[(bi * s + i) * w + h * dh + c] += a * vv[(bi * s + j) * w + h * dh + c];
                        }
                    }
                }
            }
        }
        sites.insert(pre("attn.scores"), probs);
        let attn = lin(&ctx, rows, &mat(p, &pre("attn.o.weight")));
        sites.insert(format!("layers.{l}.attn"), attn.clone());
        for (a, c) in x.iter_mut().zip(&attn) {
            *a += c;
        }
        if cfg.d_mlp > 0 {
            let xn = norm(&x, d, p[&pre("mlp_norm.weight")].data(), cfg.eps);
            let up: Vec<f64> = lin(&xn, rows, &mat(p, &pre("mlp.up.weight")))
                .into_iter()
                .map(|u| u.max(0.0))
                .collect();
            sites.insert(pre("mlp.up"), up.clone());
            let down = lin(&up, rows, &mat(p, &pre("mlp.down.weight")));
            sites.insert(format!("layers.{l}.mlp"), down.clone());
            for (a, c) in x.iter_mut().zip(&down) {
                *a += c;
            }
        }
        sites.insert(format!("layers.{l}"), x.clone());
    }
    let h = norm(&x, d, p["norm.weight"].data(), cfg.eps);
    sites.insert("norm".to_string(), h.clone());
    let logits = lin(&h, rows, &mat(p, "output.weight"));
    assert_eq!(logits.len(), rows * v);
    sites.insert("output".to_string(), logits.clone());
    Reference { logits, sites }
}

pub fn input(t: &TokenBatch) -> ModelInput<f64> {
    ModelInput::Tokens(t.clone())
}

pub fn dense(cfg: &ToyTransformerConfig, seed: u64) -> DenseParams<f64> {
    cfg.init_dense::<f64>(seed).unwrap()
}

pub fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor64 {
    let mut r = RngStream::new(seed);
    Tensor64::from_fn(shape, |_| r.uniform(-scale, scale)).unwrap()
}
