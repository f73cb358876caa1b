use super::*;
use crate::numerics::max_abs_diff;

fn tiny(head: &str, causal: bool) -> ModelConfig {
    let mut c = ModelConfig {
        depth: 2,
        d_model: 8,
        d_ffn: 16,
        codebook_size: 4,
        ssm_state: 4,
        vocab: 7,
        classes: 3,
        head: head.into(),
        ..Default::default()
    };
    c.attn.z_dim = 4;
    c.attn.v_dim = 6;
    c.attn.window = 2;
    c.attn.causal = causal;
    c
}

fn token_batch(rng: &mut Rng, cfg: &ModelConfig, batch: usize, len: usize) -> Batch {
    let ids: Vec<usize> = (0..batch * len).map(|_| rng.below(cfg.vocab)).collect();
    let targets = match cfg.head.as_str() {
        "lm" => Targets::Tokens(ids.iter().map(|&t| Some(t)).collect()),
        _ => Targets::Classes((0..batch).map(|_| rng.below(cfg.classes)).collect()),
    };
    Batch {
        inputs: Inputs::Tokens(ids),
        targets,
        batch_size: batch,
        seq_len: len,
    }
}

#[test]
fn parameter_count_matches_closed_form() {
    for norm in ["layer", "scale", "batch"] {
        for pre_norm in [false, true] {
            for input in ["tokens", "channels"] {
                let cfg = ModelConfig {
                    norm: norm.into(),
                    pre_norm,
                    input: input.into(),
                    ..tiny("classify", false)
                };
                let m = Model::<f64>::new(cfg.clone(), &mut Rng::new(1)).unwrap();
                assert_eq!(m.params.numel(), cfg.param_count().unwrap(), "{norm} {pre_norm} {input}");
            }
        }
    }
}

#[test]
fn logits_shapes() {
    let mut rng = Rng::new(2);
    let cfg = tiny("classify", false);
    let m = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let b = token_batch(&mut rng, &cfg, 3, 10);
    let out = m.forward(&b, ForwardOptions::default()).unwrap();
    assert_eq!(out.graph.value(out.logits).shape(), &[3, 3]);

    let cfg = tiny("lm", true);
    let m = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let b = token_batch(&mut rng, &cfg, 2, 9);
    let out = m.forward(&b, ForwardOptions::default()).unwrap();
    assert_eq!(out.graph.value(out.logits).shape(), &[18, 7]);
}

#[test]
fn lm_logits_ignore_future_inputs() {
    let mut rng = Rng::new(3);
    let cfg = tiny("lm", true);
    let mut m = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let b = token_batch(&mut rng, &cfg, 1, 12);
    m.init_codebooks(&b, &mut rng).unwrap();
    let base = m.forward(&b, ForwardOptions::default()).unwrap();
    let base = base.graph.value(base.logits).clone();
    for t in 0..11 {
        let mut p = b.clone();
        if let Inputs::Tokens(ids) = &mut p.inputs {
            ids[t + 1] = (ids[t + 1] + 1) % cfg.vocab;
        }
        let out = m.forward(&p, ForwardOptions::default()).unwrap();
        let v = out.graph.value(out.logits);
        let rows = (t + 1) * cfg.vocab;
        assert!(max_abs_diff(&v.data()[..rows], &base.data()[..rows]) < 1e-12, "position {t}");
    }
}

#[test]
fn dead_ffn_branch_leaves_normed_attention_output() {
    let mut rng = Rng::new(4);
    let cfg = ModelConfig {
        depth: 1,
        ..tiny("classify", false)
    };
    let mut m = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
    for name in ["layers.0.ffn.w2", "layers.0.ffn.b2"] {
        m.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let b = token_batch(&mut rng, &cfg, 2, 6);
    let out = m.forward(&b, ForwardOptions::default()).unwrap();

    // Head(pool(Norm2(Norm1(O)))) rebuilt from the recorded attention output.
    let mut g = Graph::<f64>::new();
    let o = g.constant(out.graph.value(out.layers[0].out).clone());
    let gain = g.constant(Tensor::full(&[8], 1.0));
    let bias = g.constant(Tensor::zeros(&[8]));
    let (y, _) = LayerNorm.apply(&mut g, o, &[gain, bias], &[], false).unwrap();
    let (y, _) = LayerNorm.apply(&mut g, y, &[gain, bias], &[], false).unwrap();
    let pooled = g.mean_pool(y, 6).unwrap();
    let w = g.constant(m.params.get("head.w").unwrap().clone());
    let hb = g.constant(m.params.get("head.b").unwrap().clone());
    let logits = g.linear(pooled, w, Some(hb)).unwrap();
    assert!(max_abs_diff(g.value(logits).data(), out.graph.value(out.logits).data()) < 1e-12);
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny("classify", false);
    let run = || {
        let mut rng = Rng::new(5);
        let mut m = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let b = token_batch(&mut rng, &cfg, 2, 8);
        m.init_codebooks(&b, &mut rng).unwrap();
        let out = m.forward(&b, ForwardOptions::default()).unwrap();
        out.graph.value(out.logits).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn dense_and_vq_kernels_agree_in_the_model() {
    let mut rng = Rng::new(6);
    for causal in [false, true] {
        let cfg = tiny(if causal { "lm" } else { "classify" }, causal);
        let mut m = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let b = token_batch(&mut rng, &cfg, 2, 11);
        m.init_codebooks(&b, &mut rng).unwrap();
        let a = m.forward(&b, ForwardOptions::default()).unwrap();
        let d = m
            .forward(
                &b,
                ForwardOptions {
                    kernel: Some("dense"),
                    ..Default::default()
                },
            )
            .unwrap();
        let (a, d) = (a.graph.value(a.logits), d.graph.value(d.logits));
        assert!(crate::numerics::max_rel_diff(a.data(), d.data()) < 1e-10);
    }
}

#[test]
fn single_position_sequence_runs() {
    let mut rng = Rng::new(7);
    let cfg = tiny("classify", false);
    let m = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let b = token_batch(&mut rng, &cfg, 1, 1);
    let out = m.forward(&b, ForwardOptions::default()).unwrap();
    assert_eq!(out.layers[0].codes.len(), 1);
    assert_eq!(out.graph.value(out.layers[0].out).shape(), &[1, 8]);
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = Rng::new(8);
    let cfg = ModelConfig {
        norm: "batch".into(),
        ..tiny("classify", false)
    };
    let mut m = Model::<f32>::new(cfg.clone(), &mut rng).unwrap();
    let b = token_batch(&mut rng, &cfg, 2, 5);
    m.init_codebooks(&b, &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    let back = Model::<f32>::load(dir.path()).unwrap();
    assert_eq!(back.params.checksum(), m.params.checksum());
    assert_eq!(back.buffers.checksum(), m.buffers.checksum());
    assert_eq!(back.codebooks[1].codes(), m.codebooks[1].codes());
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.path().join("params.json")).unwrap()).unwrap();
    assert_eq!(manifest.tensors[0].offset, 0);
    assert_eq!(manifest.tensors[1].offset, manifest.tensors[0].shape.iter().product::<usize>());
}

#[test]
fn invalid_config_names_field() {
    let cfg = ModelConfig {
        norm: "group".into(),
        ..Default::default()
    };
    let err = cfg.validate().unwrap_err();
    assert!(matches!(&err, Error::Config { field, .. } if field == "norm"), "{err}");
    let mut cfg = tiny("lm", false);
    cfg.attn.causal = false;
    assert!(matches!(cfg.validate().unwrap_err(), Error::Config { field, .. } if field == "attn.causal"));
}

fn run_ffn(m: &Model<f64>, weights: [Tensor<f64>; 4], x: Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = weights.into_iter().map(|t| g.constant(t)).collect();
    let x = g.constant(x);
    let y = m.ffn(&mut g, &vars, &[0, 1, 2, 3], x, None).unwrap();
    g.value(y).clone()
}

#[test]
fn ffn_hand_weights_at_width_one() {
    let m = Model::<f64>::new(tiny("classify", false), &mut Rng::new(9)).unwrap();
    let xs = [-1.5, 0.0, 0.3, 2.0];
    let y = run_ffn(
        &m,
        [
            Tensor::full(&[1, 1], 2.0),
            Tensor::zeros(&[1]),
            Tensor::full(&[1, 1], 3.0),
            Tensor::zeros(&[1]),
        ],
        Tensor::from_f64(&[4, 1], &xs).unwrap(),
    );
    for (&x, &got) in xs.iter().zip(y.data()) {
        let want = 3.0 * (2.0 * x) / (1.0 + (-2.0 * x).exp());
        assert!((got - want).abs() < 1e-14, "{x}: {got} vs {want}");
    }
}

#[test]
fn ffn_zero_weights_and_position_equivariance() {
    let mut rng = Rng::new(10);
    let m = Model::<f64>::new(tiny("classify", false), &mut rng).unwrap();
    let x = Tensor::from_fn(&[5, 8], |_| rng.normal());
    let zero = run_ffn(
        &m,
        [Tensor::zeros(&[8, 16]), Tensor::zeros(&[16]), Tensor::zeros(&[16, 8]), Tensor::zeros(&[8])],
        x.clone(),
    );
    assert!(zero.data().iter().all(|&v| v == 0.0));

    let weights = || {
        ["layers.0.ffn.w1", "layers.0.ffn.b1", "layers.0.ffn.w2", "layers.0.ffn.b2"]
            .map(|n| m.params.get(n).unwrap().clone())
    };
    let y = run_ffn(&m, weights(), x.clone());
    let perm = [3, 0, 4, 1, 2];
    let xp: Vec<f64> = perm.iter().flat_map(|&r| x.data()[r * 8..(r + 1) * 8].to_vec()).collect();
    let yp = run_ffn(&m, weights(), Tensor::from_f64(&[5, 8], &xp).unwrap());
    for (row, &r) in perm.iter().enumerate() {
        assert_eq!(&yp.data()[row * 8..(row + 1) * 8], &y.data()[r * 8..(r + 1) * 8]);
    }
}

#[test]
fn closed_gates_and_dead_ffn_reduce_to_pooled_embedding() {
    let mut rng = Rng::new(11);
    let cfg = ModelConfig {
        pre_norm: true,
        ..tiny("classify", false)
    };
    let mut m = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
    for l in 0..cfg.depth {
        for (name, fill) in [("attn.w_go", 0.0), ("attn.b_go", -2000.0), ("ffn.w2", 0.0), ("ffn.b2", 0.0)] {
            let t = m.params.get_mut(&format!("layers.{l}.{name}")).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = fill);
        }
    }
    let b = token_batch(&mut rng, &cfg, 2, 7);
    let out = m.forward(&b, ForwardOptions::default()).unwrap();

    let Inputs::Tokens(ids) = &b.inputs else { unreachable!() };
    let mut g = Graph::<f64>::new();
    let table = g.constant(m.params.get("embed.table").unwrap().clone());
    let e = g.embedding(table, ids).unwrap();
    let gain = g.constant(Tensor::full(&[8], 1.0));
    let bias = g.constant(Tensor::zeros(&[8]));
    let (e, _) = LayerNorm.apply(&mut g, e, &[gain, bias], &[], false).unwrap();
    let pooled = g.mean_pool(e, 7).unwrap();
    let w = g.constant(m.params.get("head.w").unwrap().clone());
    let hb = g.constant(m.params.get("head.b").unwrap().clone());
    let logits = g.linear(pooled, w, Some(hb)).unwrap();
    assert!(max_abs_diff(g.value(logits).data(), out.graph.value(out.logits).data()) < 1e-12);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let mut rng = Rng::new(12);
    let cfg = tiny("classify", false);
    let m = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let b = Batch {
        inputs: Inputs::Channels {
            values: vec![0.0; 12],
            channels: 3,
        },
        targets: Targets::Classes(vec![0]),
        batch_size: 1,
        seq_len: 4,
    };
    assert!(m.forward(&b, ForwardOptions::default()).is_err());
}
