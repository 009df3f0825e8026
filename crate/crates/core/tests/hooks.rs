mod common;

use common::*;
use flexmesh::hooks::{FlexWrapper, HookFunction};
use flexmesh::mesh::{CommKind, DeviceMesh, GroupKind, OffloadMode, Origin};
use flexmesh::parallel::{ToyTransformer, ToyTransformerConfig};
use flexmesh::{Error, Tensor64};

fn small() -> ToyTransformerConfig {
    ToyTransformerConfig {
        vocab: 32,
        d_model: 16,
        n_layers: 4,
        n_heads: 4,
        d_head: 4,
        d_mlp: 32,
        seq_len: 12,
        ..Default::default()
    }
}

fn resid(cfg: &ToyTransformerConfig) -> Vec<Option<usize>> {
    vec![Some(BATCH), Some(cfg.seq_len), Some(cfg.d_model)]
}

#[test]
fn zeroing_last_residual_gives_zero_logits() {
    let cfg = small();
    let p = dense(&cfg, 1);
    let toks = tokens(&cfg, BATCH, 2);
    for (dp, tp, pp) in all_meshes() {
        let mut w = wrap(&cfg, &p, DeviceMesh::new(dp, tp, pp).unwrap());
        let last = format!("layers.{}", cfg.n_layers - 1);
        w.register_hook_function(HookFunction::new(last, resid(&cfg)).with_edit(|_, t, _, _| Ok(t.scale(0.0))))
            .unwrap();
        let out = w.forward(&input(&toks)).unwrap().output;
        // rmsnorm(0) = 0, so the unembedding sees zeros.
        assert!(out.data().iter().all(|&x| x == 0.0), "mesh {dp},{tp},{pp}");
    }
}

#[test]
fn edits_agree_across_meshes() {
    let cfg = small();
    let p = dense(&cfg, 3);
    let toks = tokens(&cfg, BATCH, 4);
    let run = |mesh: DeviceMesh| {
        let mut w = wrap(&cfg, &p, mesh);
        let up = vec![Some(BATCH), Some(cfg.seq_len), Some(cfg.d_mlp)];
        w.register_hook_function(
            HookFunction::new("layers.1.mlp.up", up).with_edit(|_, t, _, _| Ok(t.map(|x| 2.0 * x + 0.25))),
        )
        .unwrap();
        w.forward(&input(&toks)).unwrap().output
    };
    let base = run(DeviceMesh::single());
    let plain = forward_plain(&cfg, &p, &toks);
    assert!(base.max_abs_diff(&plain).unwrap() > 1e-3, "edit had no effect");
    for (dp, tp, pp) in all_meshes() {
        let got = run(DeviceMesh::new(dp, tp, pp).unwrap());
        assert!(got.max_abs_diff(&base).unwrap() <= 1e-9, "mesh {dp},{tp},{pp}");
    }
}

fn forward_plain(cfg: &ToyTransformerConfig, p: &flexmesh::parallel::DenseParams<f64>, t: &flexmesh::parallel::TokenBatch) -> Tensor64 {
    let r = reference_forward(cfg, p, t);
    Tensor64::new(vec![t.batch(), t.seq(), cfg.vocab], r.logits).unwrap()
}

#[test]
fn duplicate_hooks_run_in_registration_order() {
    let cfg = small();
    let mut w = wrap(&cfg, &dense(&cfg, 5), DeviceMesh::new(2, 2, 1).unwrap());
    for tag in ["first", "second"] {
        w.register_hook_function(HookFunction::new("layers.0", resid(&cfg)).with_edit(move |_, t, ctx, _| {
            if ctx.get::<Vec<&str>>("order").is_none() {
                ctx.insert("order", Vec::<&str>::new());
            }
            ctx.get_mut::<Vec<&str>>("order").unwrap().push(tag);
            Ok(t)
        }))
        .unwrap();
    }
    w.forward(&input(&tokens(&cfg, BATCH, 6))).unwrap();
    assert_eq!(w.save_ctx().get::<Vec<&str>>("order").unwrap(), &vec!["first", "second"]);
    assert_eq!(w.store().get("layers.0").unwrap().len(), 2);
}

#[test]
fn edit_runs_once_per_forward_on_any_mesh() {
    let cfg = small();
    let p = dense(&cfg, 7);
    let toks = tokens(&cfg, BATCH, 8);
    for (dp, tp, pp) in all_meshes() {
        let mut w = wrap(&cfg, &p, DeviceMesh::new(dp, tp, pp).unwrap());
        for site in ["embed", "layers.2", "output"] {
            let shape = cfg.site_shape(site, BATCH, cfg.seq_len).unwrap();
            w.register_hook_function(HookFunction::new(site, shape.into_iter().map(Some).collect()).with_edit(
                move |_, t, ctx, _| {
                    if ctx.get::<u32>(site).is_none() {
                        ctx.insert(site, 0u32);
                    }
                    *ctx.get_mut::<u32>(site).unwrap() += 1;
                    Ok(t)
                },
            ))
            .unwrap();
        }
        for _ in 0..3 {
            w.forward(&input(&toks)).unwrap();
        }
        for site in ["embed", "layers.2", "output"] {
            assert_eq!(w.save_ctx().get::<u32>(site), Some(&3), "mesh {dp},{tp},{pp} site {site}");
        }
    }
}

#[test]
fn store_lives_on_global_root_only() {
    let cfg = small();
    let mesh = DeviceMesh::new(2, 2, 2).unwrap();
    let world = mesh.world_size();
    let mut w = wrap(&cfg, &dense(&cfg, 9), mesh);
    hook_all_sites(&mut w, &cfg, BATCH);
    w.forward(&input(&tokens(&cfg, BATCH, 1))).unwrap();
    assert_eq!(w.retrieved_on(0), cfg.site_names().len());
    for r in 1..world {
        assert_eq!(w.retrieved_on(r), 0, "rank {r}");
    }
    // Forward order of sites is preserved in the store.
    assert_eq!(w.store().sites(), cfg.site_names().as_slice());
}

#[test]
fn hooks_never_touch_the_pp_axis() {
    let cfg = small();
    let mut w = wrap(&cfg, &dense(&cfg, 2), DeviceMesh::new(2, 2, 2).unwrap());
    hook_all_sites(&mut w, &cfg, BATCH);
    w.register_hook_function(HookFunction::new("layers.3", resid(&cfg)).with_edit(|_, t, _, _| Ok(t.scale(0.5))))
        .unwrap();
    let out = w.forward(&input(&tokens(&cfg, BATCH, 3))).unwrap();
    let h = &out.ledger.hook;
    for counts in [&h.all_gather, &h.scatter, &h.all_reduce, &h.broadcast] {
        assert_eq!(counts.pp, 0);
    }
    for l in &out.ledgers {
        assert!(l
            .events
            .iter()
            .filter(|e| e.origin == Origin::Hook)
            .all(|e| e.group != GroupKind::Pp));
    }
}

#[test]
fn gather_is_tp_then_dp_and_scatter_is_dp_then_tp() {
    let cfg = small();
    let mut w = wrap(&cfg, &dense(&cfg, 4), DeviceMesh::new(2, 2, 1).unwrap());
    let up = vec![Some(BATCH), Some(cfg.seq_len), Some(cfg.d_mlp)];
    w.register_hook_function(HookFunction::new("layers.0.mlp.up", up).with_edit(|_, t, _, _| Ok(t)))
        .unwrap();
    let out = w.forward(&input(&tokens(&cfg, BATCH, 5))).unwrap();
    for (rank, l) in out.ledgers.iter().enumerate() {
        let seq: Vec<(CommKind, GroupKind)> = l
            .events
            .iter()
            .filter(|e| e.origin == Origin::Hook && e.kind != CommKind::GatherToRoot)
            .map(|e| (e.kind, e.group))
            .collect();
        assert_eq!(
            seq,
            vec![
                (CommKind::AllGather, GroupKind::Tp),
                (CommKind::AllGather, GroupKind::Dp),
                (CommKind::Broadcast, GroupKind::Stage),
                (CommKind::Scatter, GroupKind::Dp),
                (CommKind::Scatter, GroupKind::Tp),
            ],
            "rank {rank}"
        );
    }
}

#[test]
fn register_then_remove_restores_ledger() {
    let cfg = small();
    let toks = tokens(&cfg, BATCH, 6);
    let mut w = wrap(&cfg, &dense(&cfg, 6), DeviceMesh::new(2, 2, 2).unwrap());
    let before = w.forward(&input(&toks)).unwrap();
    let h = w.register_hook_function(HookFunction::new("layers.1", resid(&cfg))).unwrap();
    let hooked = w.forward(&input(&toks)).unwrap();
    assert!(hooked.ledger.hook.all_gather.total() > 0);
    assert!(w.remove_hook(h));
    assert!(!w.remove_hook(h));
    let after = w.forward(&input(&toks)).unwrap();
    assert_eq!(after.ledger, before.ledger);
    assert_eq!(after.output, before.output);
}

#[test]
fn unknown_site_names_candidates() {
    let cfg = small();
    let mut w = wrap(&cfg, &dense(&cfg, 0), DeviceMesh::single());
    let err = w.register_hook_function(HookFunction::new("layers.999", resid(&cfg))).unwrap_err();
    match &err {
        Error::UnknownModule { name, candidates } => {
            assert_eq!(name, "layers.999");
            assert!(!candidates.is_empty());
            assert!(candidates.iter().all(|c| cfg.site_names().contains(c)));
        }
        other => panic!("{other}"),
    }
    assert!(err.to_string().contains("layers."));
}

#[test]
fn wrong_shape_edit_is_a_pipeline_error() {
    let cfg = small();
    let mut w = wrap(&cfg, &dense(&cfg, 0), DeviceMesh::new(1, 2, 1).unwrap());
    w.register_hook_function(
        HookFunction::new("layers.0", resid(&cfg)).with_edit(|_, t, _, _| t.narrow(1, 0, 2)),
    )
    .unwrap();
    let err = w.forward(&input(&tokens(&cfg, BATCH, 0))).unwrap_err();
    assert!(err.to_string().contains("layers.0"), "{err}");
}

#[test]
fn parameters_are_gathered_to_the_root() {
    let cfg = small();
    let p = dense(&cfg, 8);
    for (dp, tp, pp) in all_meshes() {
        let w = wrap(&cfg, &p, DeviceMesh::new(dp, tp, pp).unwrap());
        let q = w
            .fetch_parameter("layers.3.attn.q.weight", &[Some(cfg.n_heads * cfg.d_head), Some(cfg.d_model)])
            .unwrap();
        assert_eq!(q, p["layers.3.attn.q.weight"]);
        let o = w
            .fetch_parameter("layers.0.attn.o.weight", &[Some(cfg.d_model), Some(cfg.n_heads * cfg.d_head)])
            .unwrap();
        assert_eq!(o, p["layers.0.attn.o.weight"]);
        let n = w.fetch_parameter("norm.weight", &[Some(cfg.d_model)]).unwrap();
        assert_eq!(n, p["norm.weight"]);
        let out = w.fetch_parameter("output.weight", &[Some(cfg.vocab), Some(cfg.d_model)]).unwrap();
        assert_eq!(out, p["output.weight"]);
        assert!(matches!(
            w.fetch_parameter("output.wieght", &[None, None]),
            Err(Error::UnknownParameter { .. })
        ));
    }
}

#[test]
fn offload_mode_tags_bytes() {
    let cfg = small();
    let toks = tokens(&cfg, BATCH, 2);
    let p = dense(&cfg, 2);
    let mut seen = Vec::new();
    for mode in [OffloadMode::Device, OffloadMode::HostPinned, OffloadMode::HostPageable] {
        let models = ToyTransformer::shard_all(&cfg, &p, &DeviceMesh::new(1, 2, 1).unwrap()).unwrap();
        let mut w = FlexWrapper::wrap(models, DeviceMesh::new(1, 2, 1).unwrap(), mode).unwrap();
        w.register_hook_function(HookFunction::new("layers.0", resid(&cfg))).unwrap();
        let out = w.forward(&input(&toks)).unwrap();
        let bytes = (BATCH * cfg.seq_len * cfg.d_model * 8) as u64;
        assert_eq!(out.ledger.offload.bytes(mode), bytes);
        assert_eq!(
            out.ledger.offload.device + out.ledger.offload.host(),
            bytes,
            "{mode:?} leaked into another mode"
        );
        seen.push(out.ledger.hook_bytes_comm);
    }
    assert!(seen.windows(2).all(|w| w[0] == w[1]));
}
