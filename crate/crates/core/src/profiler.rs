//! Ledger-driven cost model for the hook overhead study.
//!
//! Estimated step time has three parts:
//! - compute: `t_compute_per_layer × n_layers`, which also covers the model's
//!   own collectives
//! - hook communication: `c_comm × hook bytes moved`
//! - offload: `c_mode × bytes copied to the store`, with `c_mode` one of
//!   `c_dev`, `c_pinned`, `c_pageable`

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hooks::{FlexWrapper, HookFunction};
use crate::mesh::{launch, CommLedger, DeviceMesh, LedgerExport, OffloadMode};
use crate::parallel::{AlternatingLinearModel, ModelInput, ShardedModel};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Step times for no hooks, device, pinned and pageable offload, in seconds.
pub const REFERENCE_STEP_TIMES: [f64; 4] = [0.1237, 0.4016, 2.632, 6.071];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub t_compute_per_layer: f64,
    pub c_comm: f64,
    pub c_dev: f64,
    pub c_pinned: f64,
    pub c_pageable: f64,
}

impl CostModel {
    /// Fitted to [`REFERENCE_STEP_TIMES`] on [`ProfileSetup::default`] with `c_dev = 0`.
    pub const SHIPPED: CostModel = CostModel {
        t_compute_per_layer: 0.003865625,
        c_comm: 1.7668406168620006e-7,
        c_dev: 0.0,
        c_pinned: 2.1270751953124957e-6,
        c_pageable: 5.40676116943359e-6,
    };

    pub fn new(t_compute_per_layer: f64, c_comm: f64, c_dev: f64, c_pinned: f64, c_pageable: f64) -> Result<Self> {
        let m = Self {
            t_compute_per_layer,
            c_comm,
            c_dev,
            c_pinned,
            c_pageable,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.t_compute_per_layer, self.c_comm, self.c_dev, self.c_pinned, self.c_pageable];
        if all.iter().any(|x| !x.is_finite()) || self.t_compute_per_layer < 0.0 || self.c_comm < 0.0 {
            return Err(Error::Calibration(format!("coefficients must be finite and non-negative: {self:?}")));
        }
        if !(0.0 <= self.c_dev && self.c_dev < self.c_pinned && self.c_pinned < self.c_pageable) {
            return Err(Error::Calibration(format!(
                "need 0 <= c_dev < c_pinned < c_pageable, got {} / {} / {}",
                self.c_dev, self.c_pinned, self.c_pageable
            )));
        }
        Ok(())
    }

    pub fn offload_coefficient(&self, mode: OffloadMode) -> f64 {
        match mode {
            OffloadMode::Device => self.c_dev,
            OffloadMode::HostPinned => self.c_pinned,
            OffloadMode::HostPageable => self.c_pageable,
        }
    }

    pub fn categories(&self, step: &StepLedger) -> CostBreakdown {
        let offload = self.c_dev * step.offload_device
            + self.c_pinned * step.offload_pinned
            + self.c_pageable * step.offload_pageable;
        CostBreakdown {
            compute: self.t_compute_per_layer * step.n_layers as f64,
            hook_comm: self.c_comm * step.hook_bytes_comm,
            offload,
        }
    }
}

impl Default for CostModel {
    fn default() -> Self {
        Self::SHIPPED
    }
}

/// Per-step quantities the cost model reads, averaged over iterations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLedger {
    pub n_layers: usize,
    pub hook_bytes_comm: f64,
    pub offload_device: f64,
    pub offload_pinned: f64,
    pub offload_pageable: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub compute: f64,
    pub hook_comm: f64,
    pub offload: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.compute + self.hook_comm + self.offload
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileReport {
    pub scenario: String,
    pub iterations: usize,
    /// Counters of one step.
    pub ledger: LedgerExport,
    pub n_hook_all_gather_tp: u64,
    pub step: StepLedger,
    pub categories: CostBreakdown,
    pub estimated_time: f64,
}

/// Runs `iterations` forwards inside one launch and prices the average step.
pub fn profile_forward<M: ShardedModel<f64>>(
    scenario: &str,
    wrapper: &FlexWrapper<f64, M>,
    input: &ModelInput<f64>,
    n_layers: usize,
    iterations: usize,
    cost: &CostModel,
) -> Result<ProfileReport> {
    if iterations == 0 {
        return Err(Error::Config("iterations must be positive".into()));
    }
    let out = launch(wrapper.mesh(), |w| {
        let mut steps = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let before = w.ledger().clone();
            wrapper.forward_on(w, input)?;
            steps.push(w.ledger().since(&before));
        }
        Ok(steps)
    })?;
    let per_iter: Vec<CommLedger> = (0..iterations)
        .map(|i| CommLedger::merged(out.results.iter().map(|steps| &steps[i])))
        .collect();
    let it = iterations as f64;
    let avg = |f: &dyn Fn(&CommLedger) -> u64| per_iter.iter().map(|l| f(l) as f64).sum::<f64>() / it;
    let step = StepLedger {
        n_layers,
        hook_bytes_comm: avg(&|l| l.hook_bytes_comm),
        offload_device: avg(&|l| l.offload.device),
        offload_pinned: avg(&|l| l.offload.host_pinned),
        offload_pageable: avg(&|l| l.offload.host_pageable),
    };
    let categories = cost.categories(&step);
    Ok(ProfileReport {
        scenario: scenario.to_string(),
        iterations,
        ledger: per_iter[0].export(),
        n_hook_all_gather_tp: per_iter[0].hook.all_gather.tp,
        step,
        estimated_time: categories.total(),
        categories,
    })
}

/// The alternating-model profiling setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSetup {
    pub n_layers: usize,
    pub d_model: usize,
    pub tp: usize,
    pub batch: usize,
    pub seq: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for ProfileSetup {
    fn default() -> Self {
        Self {
            n_layers: 32,
            d_model: 256,
            tp: 4,
            batch: 1,
            seq: 16,
            iterations: 10,
            seed: 0,
        }
    }
}

pub const SCENARIOS: [(&str, Option<OffloadMode>); 4] = [
    ("no_hooks", None),
    ("device", Some(OffloadMode::Device)),
    ("pinned", Some(OffloadMode::HostPinned)),
    ("pageable", Some(OffloadMode::HostPageable)),
];

/// Profiles the four scenarios: no hooks, then retrieval hooks on every
/// layer output with device, pinned and pageable offload.
pub fn profile_scenarios(setup: &ProfileSetup, cost: &CostModel) -> Result<Vec<ProfileReport>> {
    let mesh = DeviceMesh::new(1, setup.tp, 1)?;
    let models = AlternatingLinearModel::<f64>::shard_all(setup.n_layers, setup.d_model, &mesh, setup.seed)?;
    let mut rng = RngStream::derive(setup.seed, "profile.input");
    let x = Tensor::from_fn(&[setup.batch, setup.seq, setup.d_model], |_| rng.uniform(-1.0, 1.0))?;
    let input = ModelInput::Dense(x);
    let mut wrapper = FlexWrapper::wrap(models, mesh, OffloadMode::Device)?;
    let mut reports = Vec::new();
    for (name, mode) in SCENARIOS {
        if let Some(mode) = mode {
            wrapper.set_offload_mode(mode);
            if wrapper.num_hooks() == 0 {
                for l in 0..setup.n_layers {
                    wrapper.register_hook_function(HookFunction::new(
                        format!("layers.{l}"),
                        vec![Some(setup.batch), Some(setup.seq), Some(setup.d_model)],
                    ))?;
                }
            }
        }
        reports.push(profile_forward(name, &wrapper, &input, setup.n_layers, setup.iterations, cost)?);
        wrapper.store().clear();
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Calibration {
    pub model: CostModel,
    /// Euclidean norm of fitted minus target times.
    pub residual: f64,
}

/// Least-squares fit of `t_compute_per_layer`, `c_comm`, `c_pinned` and
/// `c_pageable` to `targets`, holding `c_dev` fixed.
pub fn calibrate(steps: &[StepLedger], targets: &[f64], c_dev: f64) -> Result<Calibration> {
    if steps.len() != targets.len() || steps.len() < 4 {
        return Err(Error::Calibration(format!(
            "need at least 4 scenarios with one target each, got {} and {}",
            steps.len(),
            targets.len()
        )));
    }
    let n = steps.len();
    let mut a = DMatrix::<f64>::zeros(n, 4);
    let mut y = DVector::<f64>::zeros(n);
    for (i, (s, &t)) in steps.iter().zip(targets).enumerate() {
        a[(i, 0)] = s.n_layers as f64;
        a[(i, 1)] = s.hook_bytes_comm;
        a[(i, 2)] = s.offload_pinned;
        a[(i, 3)] = s.offload_pageable;
        y[i] = t - c_dev * s.offload_device;
    }
    // Column scaling keeps the rank test meaningful across units.
    let scale: Vec<f64> = (0..4).map(|j| a.column(j).amax()).collect();
    if let Some(j) = scale.iter().position(|&s| s == 0.0) {
        return Err(Error::Calibration(format!("coefficient {j} is not exercised by any scenario")));
    }
    let mut scaled = a.clone();
    for (j, &s) in scale.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / s);
    }
    let svd = scaled.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * 1e-10) {
        return Err(Error::Calibration("scenario ledgers are linearly dependent".into()));
    }
    let z = svd
        .solve(&y, 0.0)
        .map_err(|e| Error::Calibration(e.to_string()))?;
    let x: Vec<f64> = (0..4).map(|j| z[j] / scale[j]).collect();
    let residual = (&a * DVector::from_column_slice(&x) - &y).norm();
    let model = CostModel::new(x[0], x[1], c_dev, x[2], x[3])?;
    Ok(Calibration { model, residual })
}

pub fn write_reports_json(reports: &[ProfileReport], cost: &CostModel, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a> {
        cost_model: &'a CostModel,
        scenarios: &'a [ProfileReport],
    }
    let doc = Doc {
        cost_model: cost,
        scenarios: reports,
    };
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

/// `scenario,time_per_step`.
pub fn write_summary_csv(reports: &[ProfileReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scenario", "time_per_step"])?;
    for r in reports {
        w.write_record([r.scenario.clone(), r.estimated_time.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per scenario with its ledger columns.
pub fn write_table_csv(reports: &[ProfileReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "scenario",
        "extra_comm",
        "local_data_transfer",
        "pinned_mem",
        "n_all_gather_tp",
        "n_hook_all_gather_tp",
        "n_all_reduce_tp",
        "bytes_comm",
        "bytes_offload_host",
        "time_per_step",
    ])?;
    for r in reports {
        let (extra, local, pinned) = match r.scenario.as_str() {
            "no_hooks" => ("no", "no", "n/a"),
            "device" => ("yes", "no", "n/a"),
            "pinned" => ("yes", "yes", "yes"),
            _ => ("yes", "yes", "no"),
        };
        w.write_record([
            r.scenario.clone(),
            extra.into(),
            local.into(),
            pinned.into(),
            r.ledger.n_all_gather_tp.to_string(),
            r.n_hook_all_gather_tp.to_string(),
            r.ledger.n_all_reduce_tp.to_string(),
            r.ledger.bytes_comm.to_string(),
            r.ledger.bytes_offload_host.to_string(),
            r.estimated_time.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
