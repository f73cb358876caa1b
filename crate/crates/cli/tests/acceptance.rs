//! Acceptance suite. Run with `cargo test -p longvq-cli --test acceptance`,
//! optionally followed by `-- 1 4 7` to select criteria. Prints one line per
//! criterion and exits nonzero if any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use longvq::attention::{attention_functions, attn_dense_oracle, attn_factored, KernelSpec, SeqView};
use longvq::model::{Batch, ForwardOptions, Inputs, Model, ModelConfig, Targets};
use longvq::numerics::{max_rel_diff, Rng, Tensor};
use longvq::ssm::{apply_ssm, discretize, init_s4, scan_recurrent, SsmChannel};
use longvq::train::{gradcheck, GradcheckOptions, GradcheckStatus};
use longvq::vq::Codebook;
use longvq_cli::bench::{run_scaling, BenchConfig};
use longvq_cli::commands;
use longvq_cli::config::{Overrides, RunConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

fn lossless_attention() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let mut worst = 0.0f64;
    let mut combos = 0;
    for name in ["softmax", "relu2", "laplace"] {
        for causal in [true, false] {
            for window in [0, 2, 8] {
                combos += 1;
                for _ in 0..50 {
                    let len = 1 + rng.below(256);
                    let size = 1 + rng.below(16);
                    let (z, v) = (1 + rng.below(8), 1 + rng.below(8));
                    let codebook = Tensor::<f64>::from_fn(&[size, z], |_| rng.normal());
                    let codes: Vec<usize> = (0..len).map(|_| rng.below(size)).collect();
                    let keys: Vec<f64> = codes.iter().flat_map(|&s| codebook.row(s).to_vec()).collect();
                    let queries: Vec<f64> = (0..len * z).map(|_| rng.normal()).collect();
                    let values: Vec<f64> = (0..len * v).map(|_| rng.normal()).collect();
                    let bias: Vec<f64> = (0..2 * window + 1).map(|_| rng.normal()).collect();
                    let x = SeqView {
                        len,
                        z_dim: z,
                        v_dim: v,
                        queries: &queries,
                        keys: &keys,
                        values: &values,
                        codes: &codes,
                        codebook: &codebook,
                        bias: &bias,
                    };
                    let spec = KernelSpec {
                        attn_fn: attention_functions().get(name).map_err(|e| e.to_string())?,
                        window,
                        causal,
                        scale: 1.0 / (z as f64).sqrt(),
                    };
                    let fast = attn_factored(&x, &spec).map_err(|e| e.to_string())?;
                    let slow = attn_dense_oracle(&x, &spec).map_err(|e| e.to_string())?;
                    worst = worst.max(max_rel_diff(&fast, &slow));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-10 && secs < 60.0,
        format!("{combos} combinations x 50 instances, max rel diff {worst:.2e}, {secs:.1}s"),
    )
}

fn ssm_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = 1 + rng.below(16);
        let len = 1 + rng.below(256);
        let ch = SsmChannel::init(n, &mut rng).map_err(|e| e.to_string())?;
        let u: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
        let conv: Tensor<f64> = apply_ssm(&Tensor::from_f64(&[len, 1], &u).map_err(|e| e.to_string())?, std::slice::from_ref(&ch))
            .map_err(|e| e.to_string())?;
        let scan = scan_recurrent(&discretize(&ch).map_err(|e| e.to_string())?, &u);
        for ((c, s), x) in conv.data().iter().zip(&scan).zip(&u) {
            worst = worst.max((c - (s + ch.d_skip * x)).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-6 && secs < 30.0,
        format!("100 channels, max abs diff {worst:.2e}, {secs:.1}s"),
    )
}

fn s4_init() -> Outcome {
    let mut worst = 0.0f64;
    for n in 1..=8 {
        let (a, b) = init_s4(n).map_err(|e| e.to_string())?;
        for i in 0..n {
            let want_b = (2.0 * i as f64 + 1.0).sqrt();
            worst = worst.max((b[i] - want_b).abs());
            for k in 0..n {
                let want = if i > k {
                    -((2.0 * i as f64 + 1.0) * (2.0 * k as f64 + 1.0)).sqrt()
                } else if i == k {
                    -(i as f64 + 1.0)
                } else {
                    0.0
                };
                if i < k && a.at(i, k) != 0.0 {
                    return Err(format!("N={n}: A[{i}][{k}] = {} above the diagonal", a.at(i, k)));
                }
                worst = worst.max((a.at(i, k) - want).abs());
            }
        }
    }
    let (a, _) = init_s4(2).map_err(|e| e.to_string())?;
    let corner = (a.at(0, 0) + 1.0).abs().max((a.at(1, 0) + 3f64.sqrt()).abs());
    check(
        worst < 1e-12 && corner < 1e-12,
        format!("N <= 8, max deviation {worst:.2e}, A[0][0]/A[1][0] deviation {corner:.2e}"),
    )
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for name in ["softmax", "relu2"] {
        let mut opts = GradcheckOptions::default();
        opts.model.attn.attn_fn = name.into();
        let report = gradcheck(&opts).map_err(|e| e.to_string())?;
        let worst = report.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
        ok &= report.status == GradcheckStatus::Pass;
        lines.push(format!("{name} {:?} worst {worst:.2e}", report.status));
    }
    let secs = start.elapsed().as_secs_f64();
    check(ok && secs < 300.0, format!("{}, {secs:.1}s", lines.join(", ")))
}

fn ema_law() -> Outcome {
    let mut rng = Rng::new(505);
    let dim = 5;
    let codes = Tensor::<f64>::from_fn(&[4, dim], |_| rng.normal());
    let mut book = Codebook::new(codes, 0.99, 0.0).map_err(|e| e.to_string())?;
    let target: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let keys = Tensor::from_f64(&[1, dim], &target).map_err(|e| e.to_string())?;
    let dist = |b: &Codebook<f64>| b.code(0).iter().zip(&target).map(|(c, v)| (c - v).powi(2)).sum::<f64>().sqrt();
    let mut worst = 0.0f64;
    let mut prev = dist(&book);
    for _ in 0..50 {
        book.ema_update(&keys, &[0]).map_err(|e| e.to_string())?;
        let now = dist(&book);
        worst = worst.max((now / prev - 0.99).abs());
        prev = now;
    }

    let codes = Tensor::<f64>::from_fn(&[3, dim], |_| rng.normal());
    let mut book = Codebook::new(codes, 0.0, 1e-5).map_err(|e| e.to_string())?;
    let batch = Tensor::<f64>::from_fn(&[12, dim], |_| rng.normal());
    let z: Vec<usize> = (0..12).map(|r| r % 3).collect();
    book.ema_update(&batch, &z).map_err(|e| e.to_string())?;
    let mut mean_err = 0.0f64;
    for s in 0..3 {
        for a in 0..dim {
            let mean = (0..12).filter(|r| z[*r] == s).map(|r| batch.at(r, a)).sum::<f64>() / 4.0;
            mean_err = mean_err.max((book.code(s)[a] - mean).abs());
        }
    }
    check(
        worst < 1e-6 && mean_err < 1e-12,
        format!("contraction factor deviation {worst:.2e} over 50 steps, zero-rate mean error {mean_err:.2e}"),
    )
}

fn scaling_slopes() -> Outcome {
    let start = Instant::now();
    let report = run_scaling(&BenchConfig::default()).map_err(|e| e.to_string())?;
    let slope = |k: &str| report.timing(k).map(|t| t.slope).ok_or(format!("no {k} timing"));
    let (vq, dense) = (slope("vq")?, slope("dense")?);
    let at = |k: &str| report.median_at(k, 4096).ok_or(format!("no {k} timing at 4096"));
    let (vq_ms, dense_ms) = (at("vq")?, at("dense")?);
    let mins = minutes(start.elapsed());
    check(
        vq <= 1.3 && dense >= 1.7 && vq_ms < dense_ms && mins < 10.0,
        format!("vq slope {vq:.2}, dense slope {dense:.2}, at 4096 vq {vq_ms:.0} ms vs dense {dense_ms:.0} ms, {mins:.1} min"),
    )
}

fn load_config(file: &str, sets: &[&str]) -> Result<RunConfig, String> {
    let overrides = Overrides {
        sets: sets.iter().map(|s| s.to_string()).collect(),
        ..Default::default()
    };
    RunConfig::load(Some(&repo_path(file)), &overrides).map_err(|e| e.to_string())
}

fn learning_sanity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = load_config("configs/reduction_head.toml", &["train.target_acc=0.95"])?;
    let start = Instant::now();
    let full = commands::train(&cfg, &dir.path().join("full")).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let full_acc = full.val.as_ref().map_or(0.0, |r| r.acc);
    let budget = full.steps;

    let mut ablated = cfg.clone();
    ablated.model.use_ssm = false;
    ablated.train.target_acc = None;
    ablated.train.max_steps = Some(budget);
    let abl = commands::train(&ablated, &dir.path().join("ablated")).map_err(|e| e.to_string())?;
    let abl_acc = abl.val.as_ref().map_or(0.0, |r| r.acc);
    let mins = minutes(elapsed);
    check(
        full.reached_target && budget <= cfg.train.total_steps && mins < 15.0 && abl_acc < full_acc,
        format!(
            "val acc {full_acc:.3} after {budget} steps in {mins:.1} min; without SSM {abl_acc:.3} at the same budget"
        ),
    )
}

fn pixel_classification() -> Outcome {
    let Ok(data) = std::env::var("LONGVQ_CIFAR_DIR") else {
        return Err("LONGVQ_CIFAR_DIR is not set; the image data is not bundled".into());
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = format!("task.path=\"{}\"", data.replace('\\', "/"));
    let cfg = load_config("configs/pixels.toml", &[&path])?;
    let report = commands::train(&cfg, dir.path()).map_err(|e| e.to_string())?;
    let acc = report.test.as_ref().map_or(0.0, |t| t.acc);
    check(acc >= 0.55, format!("test acc {acc:.3} after {} steps", report.steps))
}

/// Drops wall-clock dependent fields from JSON values.
fn strip_clock(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            for key in ["wallclock_ms", "median_ms", "slope"] {
                map.remove(key);
            }
            map.values_mut().for_each(strip_clock);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_clock),
        _ => {}
    }
}

fn normalized(path: &Path) -> Result<Vec<u8>, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    let json_line = |line: &str| -> Result<String, String> {
        let mut v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        strip_clock(&mut v);
        Ok(v.to_string())
    };
    if name.ends_with(".json") {
        return Ok(json_line(&String::from_utf8_lossy(&bytes))?.into_bytes());
    }
    if name.ends_with(".jsonl") {
        let lines: Result<Vec<String>, String> = String::from_utf8_lossy(&bytes).lines().map(json_line).collect();
        return Ok(lines?.join("\n").into_bytes());
    }
    if name == "scaling.csv" {
        let text = String::from_utf8_lossy(&bytes);
        let kept: Vec<&str> = text.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head)).collect();
        return Ok(kept.join("\n").into_bytes());
    }
    Ok(bytes)
}

fn collect_files(root: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(root)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn snapshot(root: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
    let mut files = Vec::new();
    collect_files(root, &mut files).map_err(|e| e.to_string())?;
    files.sort();
    files
        .into_iter()
        .map(|p| Ok((p.strip_prefix(root).unwrap_or(&p).to_path_buf(), normalized(&p)?)))
        .collect()
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_longvq"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(format!("`longvq {}` failed: {}", args.join(" "), String::from_utf8_lossy(&status.stderr)))
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let small = [
        "--seed",
        "3",
        "--set",
        "model.depth=1",
        "--set",
        "model.d_model=16",
        "--set",
        "model.d_ffn=32",
        "--set",
        "model.codebook_size=8",
        "--set",
        "model.attn.z_dim=8",
        "--set",
        "model.attn.v_dim=16",
        "--set",
        "task.seq_len=32",
        "--set",
        "task.n_train=256",
        "--set",
        "task.n_val=32",
        "--set",
        "task.n_test=32",
        "--set",
        "train.batch_size=8",
        "--set",
        "train.total_steps=20",
        "--set",
        "train.eval_every=10",
        "--set",
        "bench.lengths=[64,128]",
        "--set",
        "bench.reps=1",
        "--set",
        "bench.codebook_size=16",
        "--set",
        "bench.window=4",
    ];
    let out = root.join("out");
    let out_s = out.to_string_lossy().to_string();
    let checkpoint = root.join("model");
    let checkpoint_s = checkpoint.to_string_lossy().to_string();
    let train_dir = root.join("train");
    let train_s = train_dir.to_string_lossy().to_string();
    run_cli(&[&["train", "--out", &train_s], &small[..]].concat())?;
    std::fs::rename(train_dir.join("checkpoint"), &checkpoint).map_err(|e| e.to_string())?;

    let commands: Vec<Vec<&str>> = vec![
        vec!["train"],
        vec!["eval", "--checkpoint", &checkpoint_s],
        vec!["bench-scaling"],
        vec!["diag-entropy", "--checkpoint", &checkpoint_s],
        vec!["gradcheck"],
        vec!["kernel-dump", "--checkpoint", &checkpoint_s],
    ];
    let mut names = Vec::new();
    for cmd in &commands {
        let mut runs = Vec::new();
        for _ in 0..2 {
            let _ = std::fs::remove_dir_all(&out);
            run_cli(&[&cmd[..], &["--out", &out_s], &small[..]].concat())?;
            runs.push(snapshot(&out)?);
        }
        if runs[0].is_empty() {
            return Err(format!("`{}` wrote no files", cmd[0]));
        }
        if runs[0] != runs[1] {
            let differing: Vec<String> = runs[0]
                .iter()
                .zip(&runs[1])
                .filter(|(a, b)| a != b)
                .map(|(a, _)| a.0.display().to_string())
                .collect();
            return Err(format!("`{}` differs between runs in {differing:?}", cmd[0]));
        }
        names.push(cmd[0]);
    }
    Ok(format!("identical outputs across two runs of {}", names.join(", ")))
}

fn causality() -> Outcome {
    let mut rng = Rng::new(1010);
    let mut cfg = ModelConfig {
        depth: 2,
        d_model: 16,
        d_ffn: 32,
        codebook_size: 8,
        ssm_state: 8,
        vocab: 11,
        head: "lm".into(),
        ..Default::default()
    };
    cfg.attn.causal = true;
    cfg.attn.window = 3;
    cfg.attn.z_dim = 8;
    cfg.attn.v_dim = 16;
    let len = 40;
    let mut model = Model::<f64>::new(cfg.clone(), &mut rng).map_err(|e| e.to_string())?;
    let tokens: Vec<usize> = (0..len).map(|_| rng.below(cfg.vocab)).collect();
    let batch = |ids: Vec<usize>| Batch {
        targets: Targets::Tokens(ids.iter().map(|&t| Some(t)).collect()),
        inputs: Inputs::Tokens(ids),
        batch_size: 1,
        seq_len: len,
    };
    model.init_codebooks(&batch(tokens.clone()), &mut rng).map_err(|e| e.to_string())?;
    let logits = |ids: Vec<usize>| -> Result<Vec<f64>, String> {
        let out = model.forward(&batch(ids), ForwardOptions::default()).map_err(|e| e.to_string())?;
        Ok(out.graph.value(out.logits).data().to_vec())
    };
    let base = logits(tokens.clone())?;
    let width = base.len() / len;
    let mut worst = 0.0f64;
    let mut future_moved = false;
    for cut in [1, 7, 20, 39] {
        let mut perturbed = tokens.clone();
        for t in perturbed.iter_mut().skip(cut) {
            *t = (*t + 1 + rng.below(cfg.vocab - 1)) % cfg.vocab;
        }
        let moved = logits(perturbed)?;
        for i in 0..cut * width {
            worst = worst.max((moved[i] - base[i]).abs());
        }
        future_moved |= moved[cut * width..] != base[cut * width..];
    }
    check(
        worst < 1e-12 && future_moved,
        format!("max change of past logits {worst:.2e} under future perturbations"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("lossless linear attention", lossless_attention),
        ("ssm convolution equals recurrence", ssm_equivalence),
        ("s4 initialization", s4_init),
        ("gradient fidelity", gradient_fidelity),
        ("ema codebook law", ema_law),
        ("scaling slopes", scaling_slopes),
        ("reduction head learning", learning_sanity),
        ("pixel classification", pixel_classification),
        ("determinism", determinism),
        ("causality", causality),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
