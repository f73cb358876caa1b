use super::*;
use crate::numerics::{finite_diff, max_rel_diff, Rng};

struct Instance {
    len: usize,
    z: usize,
    v: usize,
    queries: Vec<f64>,
    keys: Vec<f64>,
    values: Vec<f64>,
    codes: Vec<usize>,
    codebook: Tensor<f64>,
    bias: Vec<f64>,
}

impl Instance {
    fn random(rng: &mut Rng, len: usize, size: usize, window: usize) -> Self {
        let (z, v) = (1 + rng.below(4), 1 + rng.below(5));
        let codebook = Tensor::from_fn(&[size, z], |_| rng.normal());
        let codes: Vec<usize> = (0..len).map(|_| rng.below(size)).collect();
        let keys = codes.iter().flat_map(|&s| codebook.row(s).to_vec()).collect();
        Self {
            len,
            z,
            v,
            queries: (0..len * z).map(|_| rng.normal()).collect(),
            keys,
            values: (0..len * v).map(|_| rng.normal()).collect(),
            codes,
            codebook,
            bias: (0..2 * window + 1).map(|_| rng.normal()).collect(),
        }
    }

    fn view(&self) -> SeqView<'_, f64> {
        SeqView {
            len: self.len,
            z_dim: self.z,
            v_dim: self.v,
            queries: &self.queries,
            keys: &self.keys,
            values: &self.values,
            codes: &self.codes,
            codebook: &self.codebook,
            bias: &self.bias,
        }
    }
}

fn spec(name: &str, window: usize, causal: bool, z: usize) -> KernelSpec {
    KernelSpec {
        attn_fn: attention_functions().get(name).unwrap(),
        window,
        causal,
        scale: 1.0 / (z as f64).sqrt(),
    }
}

#[test]
fn factored_matches_dense_on_random_instances() {
    let mut rng = Rng::new(21);
    for name in ["softmax", "relu2", "laplace"] {
        for causal in [false, true] {
            for window in [0, 2, 8] {
                for _ in 0..4 {
                    let len = 1 + rng.below(40);
                    let size = 1 + rng.below(6);
                    let inst = Instance::random(&mut rng, len, size, window);
                    let sp = spec(name, window, causal, inst.z);
                    let dense = attn_dense_oracle(&inst.view(), &sp).unwrap();
                    let fact = attn_factored(&inst.view(), &sp).unwrap();
                    let d = max_rel_diff(&fact, &dense);
                    assert!(d < 1e-10, "{name} causal={causal} w={window} L={len}: {d}");
                }
            }
        }
    }
}

#[test]
fn causal_hand_case() {
    let codebook: Tensor<f64> = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
    let x = SeqView {
        len: 3,
        z_dim: 1,
        v_dim: 1,
        queries: &[1.0, 0.0, -1.0],
        keys: &[1.0, 1.0, 1.0],
        values: &[1.0, 2.0, 3.0],
        codes: &[0, 0, 0],
        codebook: &codebook,
        bias: &[0.0],
    };
    let sp = spec("softmax", 0, true, 1);
    for out in [attn_dense_oracle(&x, &sp).unwrap(), attn_factored(&x, &sp).unwrap()] {
        for (a, b) in out.iter().zip([1.0, 1.5, 2.0]) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn zero_queries_average_values() {
    let mut rng = Rng::new(5);
    let mut inst = Instance::random(&mut rng, 10, 3, 2);
    inst.queries.iter_mut().for_each(|q| *q = 0.0);
    inst.bias.iter_mut().for_each(|b| *b = 0.0);
    let sp = spec("softmax", 2, false, inst.z);
    let out = attn_factored(&inst.view(), &sp).unwrap();
    for c in 0..inst.v {
        let mean: f64 = (0..10).map(|j| inst.values[j * inst.v + c]).sum::<f64>() / 10.0;
        for i in 0..10 {
            assert!((out[i * inst.v + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn relu2_with_negative_logits_is_zero() {
    let codebook: Tensor<f64> = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
    let x = SeqView {
        len: 2,
        z_dim: 1,
        v_dim: 1,
        queries: &[-1.0, -2.0],
        keys: &[1.0, 1.0],
        values: &[5.0, 7.0],
        codes: &[0, 0],
        codebook: &codebook,
        bias: &[0.0, 0.0, 0.0],
    };
    let sp = spec("relu2", 1, false, 1);
    assert_eq!(attn_dense_oracle(&x, &sp).unwrap(), vec![0.0, 0.0]);
    assert_eq!(attn_factored(&x, &sp).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn single_code_softmax_is_uniform() {
    let mut rng = Rng::new(8);
    let mut inst = Instance::random(&mut rng, 12, 1, 0);
    inst.bias = vec![0.0];
    let sp = spec("softmax", 0, false, inst.z);
    let out = attn_factored(&inst.view(), &sp).unwrap();
    for (c, &y) in out.iter().enumerate().take(inst.v) {
        let mean: f64 = (0..12).map(|j| inst.values[j * inst.v + c]).sum::<f64>() / 12.0;
        assert!((y - mean).abs() < 1e-12);
    }
}

#[test]
fn factored_backward_matches_dense_backward() {
    let mut rng = Rng::new(31);
    for name in ["softmax", "relu2", "laplace"] {
        for causal in [false, true] {
            for window in [0, 1, 3] {
                let len = 2 + rng.below(20);
                let size = 1 + rng.below(5);
                let inst = Instance::random(&mut rng, len, size, window);
                let sp = spec(name, window, causal, inst.z);
                let g: Vec<f64> = (0..len * inst.v).map(|_| rng.normal()).collect();
                let x = inst.view();
                let out = attn_dense_oracle(&x, &sp).unwrap();
                let a = Dense.backward(&x, &sp, &out, &g).unwrap();
                for route in [None, Some(true), Some(false)] {
                    let b = super::factored::backward_impl(&x, &sp, &out, &g, route);
                    for (p, q, what) in [
                        (&a.queries, &b.queries, "queries"),
                        (&a.keys, &b.keys, "keys"),
                        (&a.values, &b.values, "values"),
                        (&a.bias, &b.bias, "bias"),
                    ] {
                        // Softmax query gradients vanish identically when one code
                        // covers a row, so compare against an absolute floor.
                        let peak = p.iter().fold(1.0f64, |a, b| a.max(b.abs()));
                        let d = crate::numerics::max_abs_diff(q, p) / peak;
                        assert!(d < 1e-10, "{name} causal={causal} w={window} {route:?} {what}: {d}");
                    }
                }
            }
        }
    }
}

#[test]
fn dense_backward_matches_finite_differences() {
    let mut rng = Rng::new(2);
    for name in ["softmax", "relu2", "laplace"] {
        for causal in [false, true] {
            let inst = Instance::random(&mut rng, 6, 2, 1);
            let sp = spec(name, 1, causal, inst.z);
            let w: Vec<f64> = (0..6 * inst.v).map(|_| rng.normal()).collect();
            let (z, v) = (inst.z, inst.v);
            let loss = |p: &[Tensor<f64>]| {
                let x = SeqView {
                    queries: p[0].data(),
                    keys: p[1].data(),
                    values: p[2].data(),
                    bias: p[3].data(),
                    ..inst.view()
                };
                let out = attn_dense_oracle(&x, &sp).unwrap();
                out.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
            };
            let params = vec![
                Tensor::from_f64(&[6, z], &inst.queries).unwrap(),
                Tensor::from_f64(&[6, z], &inst.keys).unwrap(),
                Tensor::from_f64(&[6, v], &inst.values).unwrap(),
                Tensor::from_f64(&[3], &inst.bias).unwrap(),
            ];
            let fd = finite_diff(loss, &params, 1e-6);
            let x = inst.view();
            let out = attn_dense_oracle(&x, &sp).unwrap();
            let an = Dense.backward(&x, &sp, &out, &w).unwrap();
            for (a, f) in [&an.queries, &an.keys, &an.values, &an.bias].iter().zip(&fd) {
                let d = max_rel_diff(a, f.data());
                assert!(d < 1e-6, "{name} causal={causal}: {d}");
            }
        }
    }
}

#[test]
fn code_stats_hand_and_prefix() {
    let v: Tensor<f64> = Tensor::from_f64(&[3, 1], &[1.0, 2.0, 3.0]).unwrap();
    let st = build_code_stats(&[0, 1, 0], &v, 4, false, 0).unwrap();
    assert_eq!(st[0].counts, vec![2.0, 1.0, 0.0, 0.0]);
    assert_eq!(st[0].sums.data(), &[4.0, 2.0, 0.0, 0.0]);

    let mut rng = Rng::new(1);
    let codes: Vec<usize> = (0..10).map(|_| rng.below(3)).collect();
    let vals = Tensor::<f64>::from_fn(&[10, 2], |_| rng.normal());
    let pre = build_code_stats(&codes, &vals, 3, true, 4).unwrap();
    assert_eq!(pre.len(), 3);
    for (c, st) in pre.iter().enumerate() {
        let upto = c * 4;
        let brute = CodeStats::build(&codes[..upto], &Tensor::new(&[upto, 2], vals.data()[..upto * 2].to_vec()).unwrap(), 3).unwrap();
        assert_eq!(st, &brute);
    }
    assert!(build_code_stats(&[5], &Tensor::<f64>::zeros(&[1, 1]), 3, false, 0).is_err());
}

#[test]
fn codebook_permutation_leaves_output_unchanged() {
    let mut rng = Rng::new(17);
    let inst = Instance::random(&mut rng, 30, 6, 3);
    let mut perm: Vec<usize> = (0..6).collect();
    rng.shuffle(&mut perm);
    // new row perm[s] holds old row s
    let mut rows = vec![vec![0.0; inst.z]; 6];
    for s in 0..6 {
        rows[perm[s]] = inst.codebook.row(s).to_vec();
    }
    let permuted = Instance {
        codebook: Tensor::from_rows(&rows).unwrap(),
        codes: inst.codes.iter().map(|&s| perm[s]).collect(),
        ..inst_clone(&inst)
    };
    for causal in [false, true] {
        let sp = spec("softmax", 3, causal, inst.z);
        let a = attn_factored(&inst.view(), &sp).unwrap();
        let b = attn_factored(&permuted.view(), &sp).unwrap();
        assert!(max_rel_diff(&a, &b) < 1e-12);
    }
}

fn inst_clone(i: &Instance) -> Instance {
    Instance {
        len: i.len,
        z: i.z,
        v: i.v,
        queries: i.queries.clone(),
        keys: i.keys.clone(),
        values: i.values.clone(),
        codes: i.codes.clone(),
        codebook: i.codebook.clone(),
        bias: i.bias.clone(),
    }
}

#[test]
fn entropy_of_uniform_and_peaked_rows() {
    let mut rng = Rng::new(3);
    let mut inst = Instance::random(&mut rng, 16, 4, 2);
    inst.queries.iter_mut().for_each(|q| *q = 0.0);
    inst.bias.iter_mut().for_each(|b| *b = 0.0);
    for causal in [false, true] {
        let rows = row_entropies(&inst.view(), &spec("softmax", 2, causal, inst.z)).unwrap();
        assert_eq!(rows.iter().flatten().count(), if causal { 15 } else { 16 });
        assert_eq!(mean_entropy(&rows), Some(1.0));
    }
    // A huge diagonal bias makes each row one-hot.
    inst.bias = vec![0.0, 0.0, 1e4, 0.0, 0.0];
    let rows = row_entropies(&inst.view(), &spec("softmax", 2, false, inst.z)).unwrap();
    assert!(mean_entropy(&rows).unwrap() < 1e-12);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let mut rng = Rng::new(3);
    let inst = Instance::random(&mut rng, 5, 2, 1);
    let sp = spec("softmax", 2, false, inst.z);
    assert!(attn_factored(&inst.view(), &sp).is_err());
    let bad = SeqView {
        codes: &[0, 1, 2, 0, 0],
        ..inst.view()
    };
    assert!(attn_dense_oracle(&bad, &spec("softmax", 1, false, inst.z)).is_err());
}

#[test]
fn config_validation_names_field() {
    let cfg = AttentionConfig {
        attn_fn: "cosine".into(),
        ..Default::default()
    };
    assert!(cfg.validate().unwrap_err().to_string().contains("`attn_fn`"));
    assert!(AttentionConfig::default().validate().is_ok());
}

