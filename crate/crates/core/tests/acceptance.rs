//! Acceptance criteria, one status line each:
//!
//! ```text
//! ACCEPTANCE <id> <PASS|FAIL|FLAG|SKIP> <seconds>s  <detail>
//! ```
//!
//! FLAG marks an empirical trend that did not reproduce at desk scale; it
//! does not fail the run. Set `FEDCKA_ACCEPTANCE=1,4,8` to run a subset and
//! `FEDCKA_CIFAR_DIR` to point criterion 7 at real CIFAR-10 batch files.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fedcka::cka::{gram_linear, hsic1_unbiased, same_layer_similarity, ActivationMatrix, CkaAccumulator, GramMatrix};
use fedcka::data::{encode_cifar10_record, load_cifar10, parse_cifar10, partition_labels, PartitionSpec};
use fedcka::experiment::{analyze_run, run_experiment, AnalyzeOptions, ExperimentConfig, RunOptions, Simulation};
use fedcka::fl::{ala_merge, fedavg_aggregate, initial_ala_weights};
use fedcka::gradcheck;
use fedcka::params::{ModelParams, ParamKind, ParamTensor};
use fedcka::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    Flag,
    Skip,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Outcome {
    Outcome {
        status: Status::Pass,
        detail: detail.into(),
    }
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome {
        status: Status::Fail,
        detail: detail.into(),
    }
}

fn verdict(ok: bool, detail: impl Into<String>) -> Outcome {
    if ok {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn within(o: Outcome, elapsed: Duration, budget: Duration) -> Outcome {
    if o.status == Status::Pass && elapsed > budget {
        fail(format!("{} (over the {}s budget)", o.detail, budget.as_secs()))
    } else {
        o
    }
}

// ---------------------------------------------------------------- 1

/// Unbiased HSIC as the U-statistic over distinct ordered 4-tuples.
fn hsic_oracle(k: &[f64], l: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            for q in (0..n).filter(|&q| q != i && q != j) {
                for r in (0..n).filter(|&r| r != i && r != j && r != q) {
                    s += k[i * n + j] * (l[i * n + j] + l[q * n + r] - 2.0 * l[i * n + q]);
                }
            }
        }
    }
    s / (n * (n - 1) * (n - 2) * (n - 3)) as f64
}

fn gram(x: &Tensor) -> GramMatrix {
    gram_linear(&ActivationMatrix::new("x", x.clone(), 0).unwrap()).unwrap()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases: Vec<(GramMatrix, GramMatrix)> = (0..100)
        .map(|_| {
            let n = rng.random_range(4..=12);
            let (p, q) = (rng.random_range(1..=6), rng.random_range(1..=6));
            (gram(&Tensor::randn(&[n, p], 1.0, &mut rng)), gram(&Tensor::randn(&[n, q], 1.0, &mut rng)))
        })
        .collect();
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for (k, l) in &cases {
        let fast = hsic1_unbiased(k, l).unwrap();
        worst = worst.max((fast - hsic_oracle(k.values(), l.values(), k.size())).abs());
    }
    let el = t0.elapsed();
    within(
        verdict(worst <= 1e-10, format!("100 instances, max |Δ| = {worst:.2e}")),
        el,
        Duration::from_secs(1),
    )
}

// ---------------------------------------------------------------- 2

fn cka(xs: &[Tensor], ys: &[Tensor]) -> f64 {
    let mut acc = CkaAccumulator::new();
    for (x, y) in xs.iter().zip(ys) {
        acc.accumulate(
            &ActivationMatrix::new("x", x.clone(), 0).unwrap(),
            &ActivationMatrix::new("y", y.clone(), 0).unwrap(),
        )
        .unwrap();
    }
    acc.finalize().unwrap().value().unwrap()
}

/// Q factor of a Householder QR of a Gaussian matrix.
fn householder_q(d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut a: Vec<f64> = (0..d * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let mut q: Vec<f64> = (0..d * d).map(|i| if i / d == i % d { 1.0 } else { 0.0 }).collect();
    for c in 0..d {
        let norm = (c..d).map(|r| a[r * d + c].powi(2)).sum::<f64>().sqrt();
        let mut v: Vec<f64> = vec![0.0; d];
        for r in c..d {
            v[r] = a[r * d + c];
        }
        v[c] += norm.copysign(v[c]);
        let vv: f64 = v.iter().map(|x| x * x).sum();
        if vv == 0.0 {
            continue;
        }
        // A ← (I − 2vvᵀ/vᵀv) A,  Q ← Q (I − 2vvᵀ/vᵀv)
        for j in 0..d {
            let dot: f64 = (c..d).map(|r| v[r] * a[r * d + j]).sum();
            for r in c..d {
                a[r * d + j] -= 2.0 * v[r] * dot / vv;
            }
        }
        for i in 0..d {
            let dot: f64 = (c..d).map(|r| q[i * d + r] * v[r]).sum();
            for r in c..d {
                q[i * d + r] -= 2.0 * dot * v[r] / vv;
            }
        }
    }
    Tensor::new(vec![d, d], q).unwrap()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 5];
    for _ in 0..25 {
        let (m, p, q, k) = (rng.random_range(5..=16), rng.random_range(2..=12), rng.random_range(2..=12), rng.random_range(1..=5));
        let xs: Vec<Tensor> = (0..k).map(|_| Tensor::randn(&[m, p], 1.0, &mut rng)).collect();
        let ys: Vec<Tensor> = (0..k).map(|_| Tensor::randn(&[m, q], 1.0, &mut rng)).collect();
        let base = cka(&xs, &ys);
        worst[0] = worst[0].max((cka(&xs, &xs) - 1.0).abs());
        let qm = householder_q(p, &mut rng);
        let rotated: Vec<Tensor> = xs.iter().map(|x| x.matmul(&qm).unwrap()).collect();
        worst[1] = worst[1].max((cka(&rotated, &ys) - base).abs());
        let alpha = rng.random_range(0.01..100.0);
        let scaled: Vec<Tensor> = xs.iter().map(|x| x.scaled(alpha)).collect();
        worst[2] = worst[2].max((cka(&scaled, &ys) - base).abs());
        worst[3] = worst[3].max((cka(&ys, &xs) - base).abs());
        let dx: Vec<Tensor> = xs.iter().chain(&xs).cloned().collect();
        let dy: Vec<Tensor> = ys.iter().chain(&ys).cloned().collect();
        worst[4] = worst[4].max((cka(&dx, &dy) - base).abs());
    }
    let tol = [1e-10, 1e-8, 1e-10, 1e-12, 1e-12];
    let ok = worst.iter().zip(tol).all(|(w, t)| *w <= t);
    verdict(
        ok,
        format!(
            "self {:.1e}, orthogonal {:.1e}, scaling {:.1e}, symmetry {:.1e}, duplicated stream {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut checks = 0;
    for seed in 0..20 {
        let mut reports = match gradcheck::check_all(seed) {
            Ok(r) => r,
            Err(e) => return fail(format!("seed {seed}: {e}")),
        };
        // the contrastive loss at temperatures other than the default
        for tau in [0.1, 1.0] {
            reports.extend(gradcheck::check_moon(seed + 100, tau).unwrap());
        }
        for r in reports {
            checks += 1;
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, format!("{} (seed {seed})", r.name));
            }
        }
    }
    within(
        verdict(worst.0 < 1e-4, format!("{checks} checks over 20 seeds, worst {:.2e} at {}", worst.0, worst.1)),
        t0.elapsed(),
        Duration::from_secs(120),
    )
}

// ---------------------------------------------------------------- 4

fn params(rng: &mut ChaCha8Rng) -> ModelParams {
    let t = |name: &str, shape: &[usize], rng: &mut ChaCha8Rng, kind| ParamTensor::new(name, Tensor::randn(shape, 1.0, rng), kind, 0);
    ModelParams::new(vec![
        t("w", &[4, 3], rng, ParamKind::Trainable),
        t("b", &[3], rng, ParamKind::Trainable),
        t("bn.running_mean", &[3], rng, ParamKind::Buffer),
    ])
    .unwrap()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst, mut fixed, mut perm) = (0.0f64, true, true);
    for _ in 0..50 {
        let n = rng.random_range(1..=10);
        let models: Vec<ModelParams> = (0..n).map(|_| params(&mut rng)).collect();
        let sizes: Vec<usize> = (0..n).map(|_| rng.random_range(1..=1000)).collect();
        let pairs: Vec<(&ModelParams, usize)> = models.iter().zip(sizes.iter().copied()).collect();
        let agg = fedavg_aggregate(&pairs).unwrap();
        let total: usize = sizes.iter().sum();
        for (t, p) in agg.iter().enumerate() {
            for (e, v) in p.value.data().iter().enumerate() {
                let oracle: f64 = models
                    .iter()
                    .zip(&sizes)
                    .map(|(m, &d)| d as f64 / total as f64 * m.as_slice()[t].value.data()[e])
                    .sum();
                worst = worst.max((v - oracle).abs());
            }
        }
        let same: Vec<(&ModelParams, usize)> = sizes.iter().map(|&d| (&models[0], d)).collect();
        fixed &= fedavg_aggregate(&same).unwrap().values_bitwise_eq(&models[0]);
        let mut shuffled = pairs.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        perm &= fedavg_aggregate(&shuffled).unwrap().values_bitwise_eq(&agg);
    }
    verdict(
        worst <= 1e-12 && fixed && perm,
        format!("max |Δ| vs weighted mean {worst:.1e}, fixed point bitwise {fixed}, permutation bitwise {perm}"),
    )
}

// ---------------------------------------------------------------- 5

fn small_config(extra: &str) -> ExperimentConfig {
    ExperimentConfig::parse_str(&format!(
        "dataset.kind = synthetic\ndataset.per_class = 40\ndataset.shape = [3, 8, 8]\ndataset.validation = 100\n\
         partition.participants = 4\nmodel.arch = tiny_mlp\nmodel.hidden = [32, 16]\nfl.rounds = 20\n\
         fl.batch_size = 16\nanalysis.snapshot_epochs = [20]\n{extra}"
    ))
    .unwrap()
}

fn trajectory(cfg: &ExperimentConfig, rounds: usize) -> Vec<ModelParams> {
    let mut sim = Simulation::new(cfg).unwrap();
    (0..rounds)
        .map(|_| {
            sim.step().unwrap();
            sim.server.clone()
        })
        .collect()
}

fn criterion_5() -> Outcome {
    let rounds = 3;
    let fedavg = trajectory(&small_config(""), rounds);
    let moon0 = trajectory(&small_config("fl.strategy = moon\nmoon.mu = 0\n"), rounds);
    let moon_same = fedavg.iter().zip(&moon0).all(|(a, b)| a.values_bitwise_eq(b));
    let ala_ones = trajectory(&small_config("fl.strategy = fedala\nala.frozen = true\n"), rounds);
    let ala_same = fedavg.iter().zip(&ala_ones).all(|(a, b)| a.values_bitwise_eq(b));

    // direct check of the start point with a local model far from the global one
    let cfg = small_config("");
    let sim = Simulation::new(&cfg).unwrap();
    let mut local = sim.server.clone();
    local.iter_mut().for_each(|p| p.value.data_mut().iter_mut().for_each(|v| *v = -3.0 * *v + 1.0));
    let ones = initial_ala_weights(&sim.server, 1);
    let start_same = ala_merge(&local, &sim.server, &ones, 1).unwrap().values_bitwise_eq(&sim.server);
    verdict(
        moon_same && ala_same && start_same,
        format!(
            "MOON μ=0 = FedAvg over {rounds} rounds: {moon_same}; FedALA A=1 start = global: {start_same}; \
             FedALA A=1 trajectory = FedAvg: {ala_same}"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let labels: Vec<usize> = (0..60_000).map(|i| i % 10).collect();
    let mut problems = Vec::new();
    for n in [1, 10, 20, 50, 100] {
        let shards = partition_labels(&labels, 10, &PartitionSpec::s1(n, 6)).unwrap();
        let mut count = vec![0u32; labels.len()];
        for s in &shards {
            if s.label_window.len() != 4 {
                problems.push(format!("N={n}: window of {}", s.label_window.len()));
            }
            for &i in &s.indices {
                count[i] += 1;
                if !s.label_window.contains(&labels[i]) {
                    problems.push(format!("N={n}: client {} has foreign label", s.client_id));
                }
            }
        }
        for label in 0..10 {
            let claimants: Vec<_> = shards.iter().filter(|s| s.label_window.contains(&label)).collect();
            let sizes: Vec<usize> = claimants
                .iter()
                .map(|s| s.indices.iter().filter(|&&i| labels[i] == label).count())
                .collect();
            let assigned: usize = sizes.iter().sum();
            let expect = if claimants.is_empty() { 0 } else { 6000 };
            if assigned != expect {
                problems.push(format!("N={n}: label {label} assigned {assigned}"));
            }
            if let (Some(a), Some(b)) = (sizes.iter().min(), sizes.iter().max()) {
                if b - a > 1 {
                    problems.push(format!("N={n}: label {label} split {a}..{b}"));
                }
            }
        }
        if count.iter().any(|&c| c > 1) {
            problems.push(format!("N={n}: sample assigned twice"));
        }
    }
    for vol in [500, 1000] {
        for n in [1, 10, 100] {
            let shards = partition_labels(&labels, 10, &PartitionSpec::s2(n, vol, 6)).unwrap();
            if shards.len() != n || shards.iter().any(|s| s.size() != vol) {
                problems.push(format!("S2 N={n} vol={vol}: wrong sizes"));
            }
        }
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            "S1 N ∈ {1,10,20,50,100} invariants hold; S2 sizes exact for 500 and 1000".to_string()
        } else {
            problems[..problems.len().min(3)].join("; ")
        },
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bytes = Vec::new();
    let mut expect = Vec::new();
    for i in 0..12u8 {
        let pixels: Vec<u8> = (0..3072).map(|_| rng.random()).collect();
        bytes.extend(encode_cifar10_record(i % 10, &pixels));
        expect.push((i % 10, pixels));
    }
    let (features, labels) = parse_cifar10(&bytes).unwrap();
    let round_trip = expect.iter().enumerate().all(|(r, (l, px))| {
        labels[r] == *l as usize
            && px
                .iter()
                .zip(&features[r * 3072..(r + 1) * 3072])
                .all(|(&p, &f)| f == p as f32 / 255.0)
    });
    let truncated = parse_cifar10(&bytes[..bytes.len() - 1]).is_err() && parse_cifar10(&bytes[..3000]).is_err();
    let fixtures = format!("fixture round trip {round_trip}, truncation rejected {truncated}");
    if !(round_trip && truncated) {
        return fail(fixtures);
    }
    let dir = std::env::var_os("FEDCKA_CIFAR_DIR").map(PathBuf::from).unwrap_or_else(|| "data/cifar-10-batches-bin".into());
    let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let test = dir.join("test_batch.bin");
    if !train.iter().all(|p| p.exists()) {
        return Outcome {
            status: Status::Skip,
            detail: format!("{fixtures}; real files not found under {}", dir.display()),
        };
    }
    let t = load_cifar10(&train).unwrap();
    let per_train = t.class_counts();
    let mut detail = format!("{fixtures}; train {} samples, per class {:?}", t.len(), per_train);
    let mut ok = t.len() == 50_000 && per_train.iter().all(|&c| c == 5000);
    if test.exists() {
        let mut all = train.clone();
        all.push(test);
        let a = load_cifar10(&all).unwrap();
        ok &= a.len() == 60_000 && a.class_counts().iter().all(|&c| c == 6000);
        detail.push_str(&format!("; with test batch {} samples, per class {:?}", a.len(), a.class_counts()));
    }
    verdict(ok, detail)
}

// ---------------------------------------------------------------- 8

fn e2e_config() -> ExperimentConfig {
    ExperimentConfig::parse_str(
        "dataset.kind = synthetic\ndataset.per_class = 150\ndataset.shape = [3, 8, 8]\ndataset.validation = 500\n\
         partition.participants = 8\nmodel.arch = tiny_mlp\nmodel.hidden = [64, 32]\nfl.rounds = 30\n\
         fl.client_eval = false\nanalysis.snapshot_epochs = [30]\nrun.seed = 8\n",
    )
    .unwrap()
}

fn criterion_8() -> Outcome {
    let t0 = Instant::now();
    let cfg = e2e_config();
    let run = |cfg: &ExperimentConfig| {
        let mut sim = Simulation::new(cfg).unwrap();
        let mut reports = Vec::new();
        for _ in 0..cfg.fl.rounds {
            reports.push(sim.step().unwrap().0);
        }
        (sim.server, reports)
    };
    let (a, ra) = run(&cfg);
    let (b, rb) = run(&cfg);
    let strip = |r: &[fedcka::fl::RoundReport]| -> Vec<(f64, f64, Vec<Option<f64>>)> {
        r.iter()
            .map(|x| (x.server_loss, x.server_accuracy, x.clients.iter().map(|c| c.loss).collect()))
            .collect()
    };
    let deterministic = a.values_bitwise_eq(&b) && strip(&ra) == strip(&rb);
    let acc = ra.last().unwrap().server_accuracy;
    within(
        verdict(
            acc > 0.2 && deterministic,
            format!("server accuracy {acc:.3} after 30 rounds (chance 0.1), bitwise rerun {deterministic}"),
        ),
        t0.elapsed(),
        Duration::from_secs(300),
    )
}

// ---------------------------------------------------------------- 9 and 10

const TREND_ROUNDS: usize = 40;
const TREND_SNAPSHOTS: [usize; 3] = [10, 20, 40];

fn trend_config(arch: &str, n: usize, seed: u64) -> ExperimentConfig {
    let model = match arch {
        "tiny_vit" => "model.arch = tiny_vit\nmodel.patch_size = 2\nmodel.embed_dim = 16\nmodel.num_heads = 2\n\
                       model.num_blocks = 2\nmodel.mlp_ratio = 2\noptimizer.lr = 0.001\n",
        _ => "model.arch = tiny_cnn\nmodel.num_stages = 2\nmodel.base_channels = 8\n",
    };
    ExperimentConfig::parse_str(&format!(
        "dataset.kind = synthetic\ndataset.per_class = 110\ndataset.shape = [3, 8, 8]\ndataset.validation = 500\n\
         dataset.seed = 99\npartition.participants = {n}\n{model}fl.rounds = {TREND_ROUNDS}\nfl.client_eval = false\n\
         analysis.snapshot_epochs = [{}]\nrun.seed = {seed}\n",
        TREND_SNAPSHOTS.map(|s| s.to_string()).join(", ")
    ))
    .unwrap()
}

struct TrendRun {
    accuracy: f64,
    cka_first: Option<f64>,
    cka_last: Option<f64>,
}

fn trend_run(arch: &str, n: usize, seed: u64, root: &std::path::Path) -> TrendRun {
    let cfg = trend_config(arch, n, seed);
    let out = root.join(format!("{arch}_n{n}_s{seed}"));
    let s = run_experiment(&cfg, &out, &RunOptions::default()).unwrap();
    let accuracy = s.final_accuracy.unwrap();
    let (cka_first, cka_last) = if arch == "tiny_vit" {
        let a = analyze_run(&out, &AnalyzeOptions::default()).unwrap();
        (a.snapshots.first().unwrap().same_layer.mean(), a.snapshots.last().unwrap().same_layer.mean())
    } else {
        (None, None)
    };
    TrendRun {
        accuracy,
        cka_first,
        cka_last,
    }
}

fn criteria_9_10() -> (Outcome, Outcome) {
    let t0 = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let mut cnn_wins = 0;
    let mut cka_up = 0;
    let mut detail9 = Vec::new();
    let mut detail10 = Vec::new();
    for seed in 0..3 {
        let cnn4 = trend_run("tiny_cnn", 4, seed, root.path());
        let cnn16 = trend_run("tiny_cnn", 16, seed, root.path());
        let vit4 = trend_run("tiny_vit", 4, seed, root.path());
        let vit16 = trend_run("tiny_vit", 16, seed, root.path());
        let (dc, dv) = (cnn4.accuracy - cnn16.accuracy, vit4.accuracy - vit16.accuracy);
        cnn_wins += usize::from(dc > dv);
        detail9.push(format!(
            "seed {seed}: CNN {:.3}→{:.3} (drop {dc:+.3}), ViT {:.3}→{:.3} (drop {dv:+.3})",
            cnn4.accuracy, cnn16.accuracy, vit4.accuracy, vit16.accuracy
        ));
        // same-layer client/server CKA of the N = 16 ViT run
        let (first, last) = (vit16.cka_first.unwrap_or(f64::NAN), vit16.cka_last.unwrap_or(f64::NAN));
        cka_up += usize::from(last >= first);
        detail10.push(format!("seed {seed}: round {} {first:.4} → round {} {last:.4}", TREND_SNAPSHOTS[0], TREND_ROUNDS));
    }
    let el = t0.elapsed();
    let status = |hits: usize| if hits >= 2 { Status::Pass } else { Status::Flag };
    let o9 = within(
        Outcome {
            status: status(cnn_wins),
            detail: format!("CNN drop > ViT drop in {cnn_wins}/3 seeds; {}", detail9.join("; ")),
        },
        el,
        Duration::from_secs(1800),
    );
    let o10 = Outcome {
        status: status(cka_up),
        detail: format!("final ≥ first mean CKA in {cka_up}/3 seeds; {}", detail10.join("; ")),
    };
    (o9, o10)
}

// ---------------------------------------------------------------- model-level CKA sanity

fn cka_pipeline_sanity() -> Outcome {
    // a client identical to the server scores 1 at every capture point
    let cfg = small_config("");
    let sim = Simulation::new(&cfg).unwrap();
    let model = fedcka::model::Model {
        arch: sim.arch.clone(),
        params: sim.server.clone(),
    };
    let probes = fedcka::cka::build_probe_minibatches(&sim.validation, 5, 3, 0).unwrap();
    let layers: Vec<String> = sim.arch.capture_points().iter().map(|c| c.layer_name.clone()).collect();
    let refs: Vec<&str> = layers.iter().map(String::as_str).collect();
    let m = same_layer_similarity(std::slice::from_ref(&model), &model, &probes, &refs).unwrap();
    let worst = (0..refs.len()).map(|j| (m.value(0, j).unwrap() - 1.0).abs()).fold(0.0, f64::max);
    verdict(worst <= 1e-10, format!("identical client/server same-layer CKA off 1 by {worst:.1e}"))
}

fn main() -> ExitCode {
    // libtest flags passed through by `cargo test` are ignored
    let only: Option<Vec<String>> = std::env::var("FEDCKA_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let want = |id: &str| only.as_ref().is_none_or(|o| o.iter().any(|x| x == id));
    let mut results: Vec<(String, Outcome, Duration)> = Vec::new();
    let mut record = |id: &str, f: &dyn Fn() -> Outcome| {
        if want(id) {
            let t0 = Instant::now();
            let o = f();
            let el = t0.elapsed();
            print_line(id, &o, el);
            results.push((id.to_string(), o, el));
        }
    };
    record("1", &criterion_1);
    record("2", &criterion_2);
    record("2b", &cka_pipeline_sanity);
    record("3", &criterion_3);
    record("4", &criterion_4);
    record("5", &criterion_5);
    record("6", &criterion_6);
    record("7", &criterion_7);
    record("8", &criterion_8);
    if want("9") || want("10") {
        let t0 = Instant::now();
        let (o9, o10) = criteria_9_10();
        let el = t0.elapsed();
        print_line("9", &o9, el);
        print_line("10", &o10, el);
        results.push(("9".into(), o9, el));
        results.push(("10".into(), o10, el));
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| r.1.status == Status::Fail)
        .map(|r| r.0.as_str())
        .collect();
    println!(
        "ACCEPTANCE SUMMARY {} criteria, {} failed{}",
        results.len(),
        failed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(": {}", failed.join(", "))
        }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn print_line(id: &str, o: &Outcome, el: Duration) {
    let s = match o.status {
        Status::Pass => "PASS",
        Status::Fail => "FAIL",
        Status::Flag => "FLAG",
        Status::Skip => "SKIP",
    };
    println!("ACCEPTANCE {id:>2} {s} {:.1}s  {}", el.as_secs_f64(), o.detail);
}
