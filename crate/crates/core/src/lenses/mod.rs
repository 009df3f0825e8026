//! Logit and tuned lenses over residual streams, with KL-trained affine probes.

mod io;
mod train;

pub use io::{load_probes, save_probes, ProbeFileHeader, PROBE_MAGIC};
pub use train::{
    kl_loss_and_grad, train_probes, KlDirection, LensTrainConfig, ProbeGrad, TrainedProbes,
};

use crate::error::{Error, Result};
use crate::hooks::{FlexWrapper, HookFunction};
use crate::parallel::{ModelInput, ShardedModel, TokenBatch};
use crate::tensor::Tensor;

/// Final norm and unembedding of a model, frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct LensHead {
    pub norm_weight: Tensor<f64>,
    /// `[V, d]`.
    pub unembed: Tensor<f64>,
    pub eps: f64,
}

impl LensHead {
    pub fn new(norm_weight: Tensor<f64>, unembed: Tensor<f64>, eps: f64) -> Result<Self> {
        if norm_weight.rank() != 1 || unembed.rank() != 2 || unembed.dim(1) != norm_weight.dim(0) {
            return Err(Error::shape(
                "LensHead",
                format!("norm {:?} vs unembed {:?}", norm_weight.shape(), unembed.shape()),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("norm eps must be positive, got {eps}")));
        }
        Ok(Self {
            norm_weight,
            unembed,
            eps,
        })
    }

    pub fn d_model(&self) -> usize {
        self.norm_weight.dim(0)
    }

    pub fn vocab(&self) -> usize {
        self.unembed.dim(0)
    }
}

/// Per-layer affine map `h ↦ A·h + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub layer: usize,
    pub a: Tensor<f64>,
    pub b: Tensor<f64>,
}

impl Probe {
    pub fn identity(layer: usize, d: usize) -> Result<Self> {
        Ok(Self {
            layer,
            a: Tensor::eye(d)?,
            b: Tensor::zeros(&[d])?,
        })
    }

    pub fn new(layer: usize, a: Tensor<f64>, b: Tensor<f64>) -> Result<Self> {
        if a.rank() != 2 || a.dim(0) != a.dim(1) || b.shape() != [a.dim(0)] {
            return Err(Error::shape(
                "Probe",
                format!("A {:?}, b {:?}", a.shape(), b.shape()),
            ));
        }
        Ok(Self { layer, a, b })
    }

    pub fn d_model(&self) -> usize {
        self.a.dim(0)
    }

    pub fn apply(&self, h: &Tensor<f64>) -> Result<Tensor<f64>> {
        h.linear(&self.a)?.add_row_vector(&self.b)
    }
}

/// `rmsnorm(h) · W_Uᵀ`.
pub fn logit_lens(h: &Tensor<f64>, head: &LensHead) -> Result<Tensor<f64>> {
    h.rmsnorm(&head.norm_weight, head.eps)?.linear(&head.unembed)
}

/// `logit_lens(A·h + b)`.
pub fn tuned_lens(h: &Tensor<f64>, probe: &Probe, head: &LensHead) -> Result<Tensor<f64>> {
    logit_lens(&probe.apply(h)?, head)
}

/// Residual streams after every layer plus the final logits, all `[N, ·]`
/// with rows ordered batch-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LensData {
    pub hidden: Vec<Tensor<f64>>,
    pub final_logits: Tensor<f64>,
    pub head: LensHead,
}

/// Runs `tokens` through a wrapped model with retrieval hooks on every
/// `layers.{i}` site and fetches the lens head from `norm.weight` and
/// `output.weight`. Hooks added here are removed before returning.
pub fn collect_lens_data<M: ShardedModel<f64>>(
    wrapper: &mut FlexWrapper<f64, M>,
    tokens: &TokenBatch,
    n_layers: usize,
    d_model: usize,
    vocab: usize,
    eps: f64,
) -> Result<LensData> {
    let mut handles = Vec::new();
    for l in 0..n_layers {
        handles.push(wrapper.register_hook_function(HookFunction::new(
            format!("layers.{l}"),
            vec![None, None, Some(d_model)],
        ))?);
    }
    wrapper.store().clear();
    let run = wrapper.forward(&ModelInput::Tokens(tokens.clone()));
    for h in handles {
        wrapper.remove_hook(h);
    }
    let out = run?;
    let rows = tokens.batch() * tokens.seq();
    let mut hidden = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let site = format!("layers.{l}");
        let parts = wrapper
            .store()
            .get(&site)
            .ok_or_else(|| Error::Pipeline {
                site: site.clone(),
                detail: "nothing retrieved".into(),
            })?
            .to_vec();
        hidden.push(Tensor::concat(&parts, 0)?.reshape(&[rows, d_model])?);
    }
    wrapper.store().clear();
    let norm_weight = wrapper.fetch_parameter("norm.weight", &[Some(d_model)])?;
    let unembed = wrapper.fetch_parameter("output.weight", &[Some(vocab), Some(d_model)])?;
    Ok(LensData {
        hidden,
        final_logits: out.output.reshape(&[rows, vocab])?,
        head: LensHead::new(norm_weight, unembed, eps)?,
    })
}

/// `grid[l][pos]` is the tuned-lens argmax at layer `l`; the extra last row
/// is the model's own argmax.
pub fn prediction_table(
    hidden: &[Tensor<f64>],
    probes: &[Probe],
    head: &LensHead,
    final_logits: &Tensor<f64>,
) -> Result<Vec<Vec<usize>>> {
    if hidden.len() != probes.len() {
        return Err(Error::Config(format!(
            "{} hidden states for {} probes",
            hidden.len(),
            probes.len()
        )));
    }
    let mut grid = Vec::with_capacity(hidden.len() + 1);
    for (h, p) in hidden.iter().zip(probes) {
        grid.push(tuned_lens(h, p, head)?.argmax_last_dim());
    }
    grid.push(final_logits.argmax_last_dim());
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = RngStream::new(seed);
        Tensor::from_fn(shape, |_| r.uniform(-1.0, 1.0)).unwrap()
    }

    fn head(d: usize, v: usize) -> LensHead {
        let w = rand(&[d], 1).map(|x| 1.0 + 0.5 * x);
        LensHead::new(w, rand(&[v, d], 2), 1e-5).unwrap()
    }

    #[test]
    fn logit_lens_matches_direct_formula() {
        let (d, v) = (6, 5);
        let hd = head(d, v);
        let h = rand(&[3, d], 3);
        let got = logit_lens(&h, &hd).unwrap();
        for n in 0..3 {
            let row = &h.data()[n * d..(n + 1) * d];
            let ms: f64 = row.iter().map(|x| x * x).sum::<f64>() / d as f64;
            let r = (ms + hd.eps).sqrt();
            for k in 0..v {
                let z: f64 = (0..d)
                    .map(|j| row[j] / r * hd.norm_weight.data()[j] * hd.unembed.at(&[k, j]))
                    .sum();
                assert!((got.at(&[n, k]) - z).abs() <= 1e-12);
            }
        }
        let zero = logit_lens(&Tensor::zeros(&[1, d]).unwrap(), &hd).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_probe_is_bitwise_logit_lens() {
        let hd = head(8, 7);
        let h = rand(&[4, 8], 9);
        let p = Probe::identity(0, 8).unwrap();
        assert_eq!(tuned_lens(&h, &p, &hd).unwrap(), logit_lens(&h, &hd).unwrap());
    }

    #[test]
    fn zero_matrix_probe_is_constant() {
        let hd = head(4, 3);
        let p = Probe::new(0, Tensor::zeros(&[4, 4]).unwrap(), rand(&[4], 5)).unwrap();
        let a = tuned_lens(&rand(&[1, 4], 6), &p, &hd).unwrap();
        let b = tuned_lens(&rand(&[1, 4], 7), &p, &hd).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tuned_lens_is_composition() {
        let hd = head(5, 4);
        let p = Probe::new(1, rand(&[5, 5], 8), rand(&[5], 9)).unwrap();
        let h = rand(&[2, 5], 10);
        let mut u = Tensor::zeros(&[2, 5]).unwrap();
        for n in 0..2 {
            for i in 0..5 {
                let s: f64 = (0..5).map(|j| p.a.at(&[i, j]) * h.at(&[n, j])).sum::<f64>() + p.b.data()[i];
                u.set(&[n, i], s);
            }
        }
        let want = logit_lens(&u, &hd).unwrap();
        assert!(tuned_lens(&h, &p, &hd).unwrap().max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn argmax_ignores_constant_shift() {
        let hd = head(6, 9);
        let z = logit_lens(&rand(&[3, 6], 11), &hd).unwrap();
        assert_eq!(z.map(|x| x + 4.25).argmax_last_dim(), z.argmax_last_dim());
    }
}
