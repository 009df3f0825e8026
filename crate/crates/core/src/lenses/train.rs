//! Probe training by plain gradient descent on a KL objective.
//!
//! For one row with hidden `h`, probe output `u = A·h + b`, normed
//! `y = w ⊙ u / r` with `r = sqrt(mean(u²) + eps)`, and student logits
//! `z = W_U·y`:
//!
//! - forward KL `Σ p (log p − log q)` gives `∂L/∂z = q − p`
//! - reverse KL `Σ q (log q − log p)` gives `∂L/∂z_k = q_k (log q_k − log p_k − L)`
//! - `∂L/∂u_j = w_j g_j / r − u_j / (d r³) · Σ_i w_i u_i g_i` with `g = W_Uᵀ ∂L/∂z`
//! - `∂L/∂A = ∂L/∂u · hᵀ`, `∂L/∂b = ∂L/∂u`
//!
//! Losses and gradients are averaged over rows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{LensData, LensHead, Probe};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    /// KL(teacher ‖ probe).
    #[default]
    Forward,
    /// KL(probe ‖ teacher).
    Reverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensTrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub direction: KlDirection,
}

impl Default for LensTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            steps: 500,
            direction: KlDirection::Forward,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeGrad {
    pub loss: f64,
    pub a: Tensor<f64>,
    pub b: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedProbes {
    pub probes: Vec<Probe>,
    /// Per layer, the loss before each step followed by the final loss.
    pub loss_curves: Vec<Vec<f64>>,
}

impl TrainedProbes {
    fn mean_at(&self, pick: impl Fn(&Vec<f64>) -> f64) -> f64 {
        self.loss_curves.iter().map(pick).sum::<f64>() / self.loss_curves.len().max(1) as f64
    }

    /// Mean over layers of the identity-probe loss.
    pub fn mean_initial_loss(&self) -> f64 {
        self.mean_at(|c| c[0])
    }

    pub fn mean_final_loss(&self) -> f64 {
        self.mean_at(|c| *c.last().expect("curve is never empty"))
    }
}

fn to_matrix(t: &Tensor<f64>) -> Result<DMatrix<f64>> {
    if t.rank() != 2 {
        return Err(Error::shape("lens", format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok(DMatrix::from_row_slice(t.dim(0), t.dim(1), t.data()))
}

fn from_matrix(m: &DMatrix<f64>) -> Result<Tensor<f64>> {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        data.extend(m.row(r).iter());
    }
    Tensor::from_parts(vec![m.nrows(), m.ncols()], data)
}

fn log_softmax_rows(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = z.clone();
    for mut row in out.row_iter_mut() {
        let m = row.max();
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.add_scalar_mut(-lse);
    }
    out
}

/// Fixed inputs of one layer's objective.
struct Objective<'a> {
    h: DMatrix<f64>,
    log_p: DMatrix<f64>,
    p: DMatrix<f64>,
    w: DVector<f64>,
    wu: DMatrix<f64>,
    head: &'a LensHead,
    direction: KlDirection,
}

impl<'a> Objective<'a> {
    fn new(h: &Tensor<f64>, teacher_logits: &Tensor<f64>, head: &'a LensHead, direction: KlDirection) -> Result<Self> {
        let h = to_matrix(h)?;
        let t = to_matrix(teacher_logits)?;
        if h.nrows() != t.nrows() || h.ncols() != head.d_model() || t.ncols() != head.vocab() {
            return Err(Error::shape(
                "lens_objective",
                format!(
                    "hidden {}x{}, teacher {}x{}, head d={} V={}",
                    h.nrows(),
                    h.ncols(),
                    t.nrows(),
                    t.ncols(),
                    head.d_model(),
                    head.vocab()
                ),
            ));
        }
        let log_p = log_softmax_rows(&t);
        let p = log_p.map(f64::exp);
        Ok(Self {
            h,
            log_p,
            p,
            w: DVector::from_column_slice(head.norm_weight.data()),
            wu: to_matrix(&head.unembed)?,
            head,
            direction,
        })
    }

    fn eval(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> (f64, DMatrix<f64>, DVector<f64>) {
        let n = self.h.nrows();
        let d = self.h.ncols();
        let nf = n as f64;
        let mut u = &self.h * a.transpose();
        for mut row in u.row_iter_mut() {
            row += b.transpose();
        }
        let r: Vec<f64> = u
            .row_iter()
            .map(|row| (row.norm_squared() / d as f64 + self.head.eps).sqrt())
            .collect();
        let mut y = u.clone();
        for (i, mut row) in y.row_iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.w[j] / r[i];
            }
        }
        let z = &y * self.wu.transpose();
        let log_q = log_softmax_rows(&z);
        let q = log_q.map(f64::exp);

        let mut loss = 0.0;
        let mut gz = DMatrix::zeros(n, z.ncols());
        for i in 0..n {
            match self.direction {
                KlDirection::Forward => {
                    let mut l = 0.0;
                    for k in 0..z.ncols() {
                        l += self.p[(i, k)] * (self.log_p[(i, k)] - log_q[(i, k)]);
                        gz[(i, k)] = (q[(i, k)] - self.p[(i, k)]) / nf;
                    }
                    loss += l;
                }
                KlDirection::Reverse => {
                    let l: f64 = (0..z.ncols())
                        .map(|k| q[(i, k)] * (log_q[(i, k)] - self.log_p[(i, k)]))
                        .sum();
                    for k in 0..z.ncols() {
                        gz[(i, k)] = q[(i, k)] * (log_q[(i, k)] - self.log_p[(i, k)] - l) / nf;
                    }
                    loss += l;
                }
            }
        }
        let gy = &gz * &self.wu;
        let mut gu = DMatrix::zeros(n, d);
        for i in 0..n {
            let s: f64 = (0..d).map(|j| self.w[j] * u[(i, j)] * gy[(i, j)]).sum();
            let r3 = r[i] * r[i] * r[i];
            for j in 0..d {
                gu[(i, j)] = self.w[j] * gy[(i, j)] / r[i] - u[(i, j)] * s / (d as f64 * r3);
            }
        }
        let ga = gu.transpose() * &self.h;
        let gb = gu.row_sum().transpose();
        (loss / nf, ga, gb)
    }
}

/// Mean KL of one probe over `h` rows and its gradient.
pub fn kl_loss_and_grad(
    h: &Tensor<f64>,
    teacher_logits: &Tensor<f64>,
    probe: &Probe,
    head: &LensHead,
    direction: KlDirection,
) -> Result<ProbeGrad> {
    let obj = Objective::new(h, teacher_logits, head, direction)?;
    let (loss, ga, gb) = obj.eval(&to_matrix(&probe.a)?, &DVector::from_column_slice(probe.b.data()));
    Ok(ProbeGrad {
        loss,
        a: from_matrix(&ga)?,
        b: Tensor::from_parts(vec![gb.len()], gb.as_slice().to_vec())?,
    })
}

fn train_layer(layer: usize, data: &LensData, cfg: &LensTrainConfig) -> Result<(Probe, Vec<f64>)> {
    let obj = Objective::new(&data.hidden[layer], &data.final_logits, &data.head, cfg.direction)?;
    let d = data.head.d_model();
    let mut a = DMatrix::<f64>::identity(d, d);
    let mut b = DVector::<f64>::zeros(d);
    let mut curve = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let (loss, ga, gb) = obj.eval(&a, &b);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, layer });
        }
        curve.push(loss);
        if step == cfg.steps {
            break;
        }
        a -= ga * cfg.lr;
        b -= gb * cfg.lr;
    }
    let probe = Probe::new(
        layer,
        from_matrix(&a)?,
        Tensor::from_parts(vec![d], b.as_slice().to_vec())?,
    )?;
    Ok((probe, curve))
}

/// Trains one probe per layer independently, each on its own thread.
pub fn train_probes(data: &LensData, cfg: &LensTrainConfig) -> Result<TrainedProbes> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let results: Vec<Result<(Probe, Vec<f64>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..data.hidden.len())
            .map(|l| s.spawn(move || train_layer(l, data, cfg)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Config("probe trainer panicked".into()))))
            .collect()
    });
    let mut probes = Vec::new();
    let mut loss_curves = Vec::new();
    for r in results {
        let (p, c) = r?;
        probes.push(p);
        loss_curves.push(c);
    }
    Ok(TrainedProbes { probes, loss_curves })
}
