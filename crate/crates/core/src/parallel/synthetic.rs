//! Hand-built two-layer attention-only model containing an induction head.
//!
//! Residual channels are `[token | prev token | prev-prev token | position]`,
//! so `d = 3V + S`. Layer 0 has two positional heads that copy the tokens at
//! `i−1` and `i−2` into the two scratch channels. Layer 1 head 0 matches the
//! current bigram `(tok(i−1), tok(i))` against `(tok(j−2), tok(j−1))` and
//! copies `tok(j)` into the token channel, which the unembedding reads.
//! Layer 1 head 1 is inert.

use super::{DenseParams, ToyTransformerConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SyntheticInductionModel {
    pub config: ToyTransformerConfig,
    pub params: DenseParams<f64>,
    /// `(layer, head)` of the constructed induction head.
    pub induction_head: (usize, usize),
}

pub fn build_synthetic_induction_model(vocab: usize, seq_len: usize, beta: f64, gamma: f64) -> Result<SyntheticInductionModel> {
    if !(beta > 0.0 && gamma > 0.0) {
        return Err(Error::Config(format!("beta and gamma must be positive, got {beta}, {gamma}")));
    }
    if vocab == 0 || seq_len < 2 {
        return Err(Error::Config("vocab must be positive and seq_len at least 2".into()));
    }
    let (v, s) = (vocab, seq_len);
    let d = 3 * v + s;
    let dh = s.max(2 * v);
    let config = ToyTransformerConfig {
        vocab: v,
        d_model: d,
        n_layers: 2,
        n_heads: 2,
        d_head: dh,
        d_mlp: 0,
        seq_len: s,
        pre_norm: false,
        eps: 1e-5,
        stages: Vec::new(),
    };
    let mut params = config.init_dense::<f64>(0)?;
    for t in params.values_mut() {
        *t = Tensor::zeros(t.shape())?;
    }
    let (tok, s1, s2, pos) = (0, v, 2 * v, 3 * v);
    // Attention divides scores by sqrt(d_head); undo that so matches score beta.
    let b = beta * (dh as f64).sqrt();
    let aw = 2 * dh;

    let mut set = |name: &str, shape: &[usize], entries: &[(usize, usize, f64)]| {
        let t = params.get_mut(name).expect("parameter exists");
        debug_assert_eq!(t.shape(), shape);
        for &(r, c, x) in entries {
            t.set(&[r, c], x);
        }
    };

    let embed: Vec<_> = (0..v).map(|t| (t, tok + t, 1.0)).collect();
    set("embed.weight", &[v, d], &embed);
    let pe: Vec<_> = (0..s).map(|p| (p, pos + p, 1.0)).collect();
    set("pos_embed.weight", &[s, d], &pe);

    // Layer 0: head h attends from i to i-(h+1) and copies that token.
    let mut q0 = Vec::new();
    let mut k0 = Vec::new();
    let mut v0 = Vec::new();
    let mut o0 = Vec::new();
    for (h, scratch) in [(0usize, s1), (1, s2)] {
        let off = h + 1;
        for c in 0..s {
            if c + off < s {
                q0.push((h * dh + c, pos + c + off, b));
            }
            k0.push((h * dh + c, pos + c, 1.0));
        }
        for t in 0..v {
            v0.push((h * dh + t, tok + t, 1.0));
            o0.push((scratch + t, h * dh + t, 1.0));
        }
    }
    set("layers.0.attn.q.weight", &[aw, d], &q0);
    set("layers.0.attn.k.weight", &[aw, d], &k0);
    set("layers.0.attn.v.weight", &[aw, d], &v0);
    set("layers.0.attn.o.weight", &[d, aw], &o0);

    // Layer 1 head 0: bigram match, copy the following token.
    let mut q1 = Vec::new();
    let mut k1 = Vec::new();
    let mut v1 = Vec::new();
    let mut o1 = Vec::new();
    for t in 0..v {
        q1.push((t, tok + t, b));
        q1.push((v + t, s1 + t, b));
        k1.push((t, s1 + t, 1.0));
        k1.push((v + t, s2 + t, 1.0));
        v1.push((t, tok + t, 1.0));
        o1.push((tok + t, t, gamma));
    }
    set("layers.1.attn.q.weight", &[aw, d], &q1);
    set("layers.1.attn.k.weight", &[aw, d], &k1);
    set("layers.1.attn.v.weight", &[aw, d], &v1);
    set("layers.1.attn.o.weight", &[d, aw], &o1);

    set("output.weight", &[v, d], &(0..v).map(|t| (t, tok + t, 1.0)).collect::<Vec<_>>());
    params.insert("norm.weight".into(), Tensor::ones(&[d])?);

    Ok(SyntheticInductionModel {
        config,
        params,
        induction_head: (1, 0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nonpositive_scales() {
        assert!(build_synthetic_induction_model(8, 10, 0.0, 1.0).is_err());
        assert!(build_synthetic_induction_model(8, 10, 1.0, -1.0).is_err());
    }

    #[test]
    fn shapes() {
        let m = build_synthetic_induction_model(8, 10, 20.0, 10.0).unwrap();
        assert_eq!(m.config.d_model, 34);
        assert_eq!(m.params["layers.1.attn.q.weight"].shape(), &[32, 34]);
    }
}
