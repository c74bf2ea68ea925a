//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use promptta::adapter::{
    adapter_logits, argmax, combined_logits, init_random, linear_logits, logits_on_tape, phi, LinearClassifier, Model,
    TextAdapter,
};
use promptta::bench::{self, ABLATION_LABELS};
use promptta::config::RunConfig;
use promptta::encoder::ToyEncoder;
use promptta::numdiff::{gradcheck, Tensor};
use promptta::resampler::{bank_stats, draw_raw, estimate_stats, resample_epoch};
use promptta::rng;
use promptta::stylegen::{content_features, content_term, style_term, train_styles, StyleGenConfig};

type Check = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn random_model(n: usize, k: usize, d: usize, seed: u64, alpha: f64, beta: f64) -> Model {
    let mut g = rng::gaussian(seed ^ 0xfeed);
    let w: Vec<f64> = (0..n * d).map(|_| g.standard()).collect();
    Model {
        classifier: LinearClassifier::new(Tensor::matrix(n, d, w).unwrap()).unwrap(),
        adapter: TextAdapter::new(init_random(n, k, d, seed).unwrap(), n, names("d", k), alpha, beta).unwrap(),
    }
}

fn gradient_correctness() -> Check {
    let enc = ToyEncoder::new(1, 16, 32).map_err(|e| e.to_string())?;
    let classes: Vec<String> = ["dog", "guitar", "house", "person"].iter().map(|s| s.to_string()).collect();
    let content = content_features(&enc, &classes).map_err(|e| e.to_string())?;
    let mut worst = [0.0f64; 4];
    for point in 0..20u64 {
        let mut g = rng::gaussian(1000 + point);
        let style = Tensor::vector((0..16).map(|_| g.normal(0.0, 0.5)).collect()).unwrap();
        let previous: Vec<Vec<f64>> = (0..3).map(|_| unit((0..32).map(|_| g.standard()).collect())).collect();
        let e_style = gradcheck(|t, s| Ok(style_term(t, &enc, s, &previous)?.expect("previous styles")), &style, 1e-5);
        let e_content = gradcheck(|t, s| content_term(t, &enc, s, &content, &classes), &style, 1e-5);

        let (n, k, d) = (4, 3, 6);
        let m = random_model(n, k, d, point, 1.0, 2.0);
        let xs = Tensor::from_rows(&(0..5).map(|_| unit((0..d).map(|_| g.standard()).collect())).collect::<Vec<_>>()).unwrap();
        let targets: Vec<usize> = (0..5).map(|i| (i + point as usize) % n).collect();
        let labels = m.adapter.label_matrix();
        let e_w = gradcheck(
            |t, w| {
                let (x, f, l) = (t.constant(xs.clone()), t.constant(m.adapter.keys().clone()), t.constant(labels.clone()));
                let z = logits_on_tape(t, x, w, f, l, 1.0, 2.0)?;
                t.log_softmax_cross_entropy(z, &targets)
            },
            m.classifier.weights(),
            1e-5,
        );
        let e_f = gradcheck(
            |t, f| {
                let (x, w, l) = (t.constant(xs.clone()), t.constant(m.classifier.weights().clone()), t.constant(labels.clone()));
                let z = logits_on_tape(t, x, w, f, l, 1.0, 2.0)?;
                t.log_softmax_cross_entropy(z, &targets)
            },
            m.adapter.keys(),
            1e-5,
        );
        for (slot, e) in [e_style, e_content, e_w, e_f].into_iter().enumerate() {
            worst[slot] = worst[slot].max(e.map_err(|e| e.to_string())?);
        }
    }
    ensure(worst.iter().all(|&e| e <= 1e-4), || format!("max rel err {worst:?} > 1e-4"))?;
    Ok(format!(
        "20 points; max rel err style {:.1e}, content {:.1e}, W {:.1e}, F {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

fn adapter_oracle() -> Check {
    let mut worst = 0.0f64;
    for inst in 0..100u64 {
        let (n, k, d) = (1 + inst as usize % 8, 1 + (inst as usize / 8) % 8, 1 + (inst as usize / 3) % 8);
        let d = d.max(2);
        let beta = 0.5 + (inst % 5) as f64;
        let m = random_model(n, k, d, inst, 1.0, beta);
        let mut g = rng::gaussian(inst);
        let f = unit((0..d).map(|_| g.standard()).collect());
        let got = adapter_logits(&f, &m.adapter).map_err(|e| e.to_string())?;
        let keys = m.adapter.keys();
        for (c, &value) in got.iter().enumerate() {
            let mut expected = 0.0;
            for j in 0..k {
                let row = keys.row(c * k + j);
                let mut cos = 0.0;
                for i in 0..d {
                    cos += f[i] * row[i];
                }
                expected += (-beta * (1.0 - cos)).exp();
            }
            worst = worst.max((value - expected).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max abs deviation {worst:e}"))?;
    for beta in [0.5, 1.0, 2.0, 3.0, 5.0] {
        ensure(phi(1.0, beta) == 1.0, || format!("phi(1; {beta}) != 1"))?;
    }
    let e2 = phi(0.0, 2.0);
    ensure((e2 - (-2f64).exp()).abs() <= 1e-12, || format!("phi(0; 2) = {e2}"))?;
    Ok(format!("100 instances, max deviation {worst:.1e}; phi(1)=1, phi(0;2)={e2:.6}"))
}

fn stats_oracle() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut g = rng::gaussian(seed);
        let (m, d) = (2 + seed as usize % 20, 1 + seed as usize % 8);
        let rows: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| g.normal(0.2, 1.3)).collect()).collect();
        let slices: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let s = estimate_stats(&slices, 0).map_err(|e| e.to_string())?;
        for i in 0..d {
            let mean = rows.iter().map(|r| r[i]).sum::<f64>() / m as f64;
            let var = rows.iter().map(|r| (r[i] - mean).powi(2)).sum::<f64>() / (m as f64 - 1.0);
            worst = worst.max((s.mean[i] - mean).abs()).max((s.var[i] - var).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation from two-pass oracle {worst:e}"))?;
    let example = estimate_stats(&[&[0.0, 2.0], &[2.0, 0.0]], 0).map_err(|e| e.to_string())?;
    ensure(example.mean == [1.0, 1.0] && example.var == [2.0, 2.0], || format!("example gave {example:?}"))?;
    Ok(format!("50 random sets, max deviation {worst:.1e}; [0,2]/[2,0] -> mean [1,1], var [2,2]"))
}

fn resampling_statistics() -> Check {
    let enc = ToyEncoder::new(0, 16, 32).unwrap();
    let classes: Vec<String> = ["dog", "guitar", "house", "person"].iter().map(|s| s.to_string()).collect();
    let cfg = StyleGenConfig {
        num_styles: 8,
        ..StyleGenConfig::default()
    };
    let mut moment_detail = String::new();
    let mut misplaced = 0;
    let mut total = 0;
    for seed in 0..3u64 {
        let bank = train_styles(&cfg, &enc, &classes, seed).map_err(|e| e.to_string())?;
        let stats = bank_stats(&bank).map_err(|e| e.to_string())?;
        if seed == 0 {
            let s = &stats[0];
            let mut g = rng::gaussian(77);
            let n = 10_000;
            let mut sums = vec![0.0; s.dim()];
            for _ in 0..n {
                for (acc, v) in sums.iter_mut().zip(draw_raw(s, &mut g)) {
                    *acc += v;
                }
            }
            let within = (0..s.dim())
                .filter(|&i| (sums[i] / n as f64 - s.mean[i]).abs() <= 4.0 * s.var[i].sqrt() / (n as f64).sqrt())
                .count();
            ensure(within as f64 >= 0.95 * s.dim() as f64, || format!("only {within}/{} dims within 4 sigma/sqrt(n)", s.dim()))?;
            moment_detail = format!("{within}/{} dims within 4 sigma/sqrt(n)", s.dim());
        }
        let means: Vec<Vec<f64>> = stats.iter().map(|s| unit(s.mean.clone())).collect();
        let (rows, labels) = resample_epoch(&bank, seed, 0).map_err(|e| e.to_string())?;
        for (r, &label) in labels.iter().enumerate() {
            let row = rows.row(r);
            let sims: Vec<f64> = means.iter().map(|m| m.iter().zip(row).map(|(a, b)| a * b).sum()).collect();
            total += 1;
            if argmax(&sims) != label {
                misplaced += 1;
            }
        }
    }
    ensure(misplaced == 0, || format!("{misplaced}/{total} resampled rows closer to another class mean"))?;
    Ok(format!("{moment_detail}; {total}/{total} resampled rows nearest their own class mean (seeds 0-2)"))
}

fn fusion_degenerations() -> Check {
    let mut g = rng::gaussian(5);
    for seed in 0..50u64 {
        let (n, k, d) = (2 + seed as usize % 6, 1 + seed as usize % 4, 3 + seed as usize % 6);
        let f = unit((0..d).map(|_| g.standard()).collect());
        let mut m = random_model(n, k, d, seed, 0.0, 2.0);
        let fused = combined_logits(&f, &m.classifier, &m.adapter).map_err(|e| e.to_string())?;
        let linear = linear_logits(&f, &m.classifier).map_err(|e| e.to_string())?;
        ensure(fused == linear, || format!("alpha=0 differs from fW^T at seed {seed}"))?;
        m.adapter.alpha = 1.0;
        m.classifier = LinearClassifier::zeros(n, d);
        let fused = combined_logits(&f, &m.classifier, &m.adapter).map_err(|e| e.to_string())?;
        let adapter = adapter_logits(&f, &m.adapter).map_err(|e| e.to_string())?;
        ensure(fused == adapter, || format!("W=0 differs from adapter logits at seed {seed}"))?;
        let c = g.normal(0.0, 10.0);
        let shifted: Vec<f64> = fused.iter().map(|v| v + c).collect();
        ensure(argmax(&fused) == argmax(&shifted), || format!("argmax moved under shift {c}"))?;
    }
    Ok("50 instances: alpha=0 == fW^T bitwise, W=0 == adapter bitwise, argmax shift-invariant".into())
}

const SLACK: f64 = 0.002;

fn ablation_trend(config: &RunConfig) -> Check {
    let start = Instant::now();
    let rows = bench::run_ablation(config).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    ensure(labels == ABLATION_LABELS, || format!("labels {labels:?}"))?;
    let (base, full) = (rows[0].summary.mean, rows[3].summary.mean);
    let cells = rows
        .iter()
        .map(|r| format!("{} {:.2}±{:.2}", r.label, 100.0 * r.summary.mean, 100.0 * r.summary.std))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(full >= base - SLACK, || format!("(SFR,TA) {full:.4} < (−,−) {base:.4} - 0.2pt; {cells}"))?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("{cells} in {:.1}s", elapsed.as_secs_f64()))
}

fn init_trend(config: &RunConfig) -> Check {
    let rows = bench::run_init_comparison(config).map_err(|e| e.to_string())?;
    ensure(rows[0].label == "Random" && rows[1].label == "Template", || "row labels".into())?;
    let (random, template) = (rows[0].summary.mean, rows[1].summary.mean);
    let detail = format!("Random {:.2}, Template {:.2}", 100.0 * random, 100.0 * template);
    ensure(template >= random - SLACK, || format!("Template below Random - 0.2pt: {detail}"))?;
    Ok(detail)
}

fn sweep_structure(config: &RunConfig) -> Check {
    let rows = bench::sweep_alpha_beta(config).map_err(|e| e.to_string())?;
    let csv = bench::sweep_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    ensure(lines[0] == "alpha,beta,mean_acc,std_acc", || format!("header {}", lines[0]))?;
    ensure(lines.len() == 37, || format!("{} data rows", lines.len() - 1))?;
    ensure(
        rows.iter().all(|r| r.summary.mean.is_finite() && r.summary.std.is_finite()),
        || "non-finite accuracy".into(),
    )?;
    let row = rows.iter().find(|r| r.alpha == 0.5 && r.beta == 2.0).ok_or("missing (0.5, 2) row")?;
    let best = rows.iter().max_by(|a, b| a.summary.mean.total_cmp(&b.summary.mean)).unwrap();
    Ok(format!(
        "36 rows, all finite; (0.5,2) -> {:.2}; best ({},{}) -> {:.2}",
        100.0 * row.summary.mean,
        best.alpha,
        best.beta,
        100.0 * best.summary.mean
    ))
}

fn collect_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn cli(args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_promptta"))
        .args(args)
        .env_remove("PTTA_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || {
        format!("{args:?} failed: {}", String::from_utf8_lossy(&status.stderr))
    })
}

fn cli_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let config = root.join("config.json");
    fs::write(
        &config,
        r#"{
  "seed": 3,
  "classes": ["dog", "guitar", "house", "person"],
  "encoder": {"token_dim": 16, "feature_dim": 32},
  "stylegen": {"num_styles": 8},
  "adapter": {"domains": ["photo", "sketch", "cartoon"]},
  "train": {"epochs": 5, "batch_size": 16},
  "synth": {"samples_per_domain": 10},
  "bench": {"seeds": [0, 1, 2], "alphas": [0.5, 2], "betas": [1, 2]}
}"#,
    )
    .map_err(|e| e.to_string())?;
    let cfg = config.to_str().unwrap();
    let mut compared = 0;
    for run in ["a", "b"] {
        let dir = |name: &str| root.join(run).join(name).to_string_lossy().into_owned();
        cli(&["gen-styles", "--config", cfg, "--out", &dir("styles")])?;
        cli(&["train", "--styles", &dir("styles"), "--config", cfg, "--out", &dir("model")])?;
        cli(&["synth", "--config", cfg, "--out", &dir("data")])?;
        cli(&["eval", "--model", &dir("model"), "--data", &dir("data"), "--out", &dir("report")])?;
        cli(&["ablate", "--config", cfg, "--out", &dir("ablate")])?;
        cli(&["compare-init", "--config", cfg, "--out", &dir("init")])?;
        cli(&["sweep", "--config", cfg, "--out", &dir("sweep")])?;
    }
    for name in ["styles", "model", "data", "report", "ablate", "init", "sweep"] {
        let a = collect_files(&root.join("a").join(name));
        let b = collect_files(&root.join("b").join(name));
        ensure(!a.is_empty() && a == b, || format!("{name} outputs differ between runs"))?;
        compared += a.len();
    }
    Ok(format!("7 commands run twice, {compared} output files byte-identical"))
}

fn main() {
    let config = RunConfig::default();
    let criteria: Vec<Criterion> = vec![
        ("gradient correctness", Box::new(gradient_correctness)),
        ("adapter logits oracle", Box::new(adapter_oracle)),
        ("class statistics oracle", Box::new(stats_oracle)),
        ("resampling statistics", Box::new(resampling_statistics)),
        ("fusion degenerations", Box::new(fusion_degenerations)),
        ("ablation trend (SFR x TA)", Box::new(|| ablation_trend(&config))),
        ("initialization trend", Box::new(|| init_trend(&config))),
        ("alpha/beta sweep structure", Box::new(|| sweep_structure(&config))),
        ("CLI determinism", Box::new(cli_determinism)),
    ];
    let mut failures = 0;
    println!("\nacceptance criteria");
    for (name, check) in &criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("{} passed, {failures} failed\n", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
