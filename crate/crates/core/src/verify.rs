//! Self-check suites behind the `verify` subcommand.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cka::{gram_linear, hsic1_with_cross_coefficient, ActivationMatrix, CkaAccumulator, GramMatrix};
use crate::data::{partition_labels, PartitionSpec};
use crate::error::Result;
use crate::exact::fsum;
use crate::fl::fedavg_aggregate;
use crate::gradcheck;
use crate::params::{ModelParams, ParamKind, ParamTensor};
use crate::tensor::Tensor;

pub const SUITES: &[&str] = &["hsic", "cka", "aggregation", "partition", "gradients"];

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Suites to run; empty runs all.
    pub suites: Vec<String>,
    /// Seeds for the gradient suite.
    pub gradient_seeds: u64,
    /// Numerator of the `1ᵀK̃L̃1` coefficient; anything but 2 must fail.
    pub hsic_cross_coefficient: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            suites: Vec::new(),
            gradient_seeds: 20,
            hsic_cross_coefficient: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub passed: usize,
    pub failed: usize,
    pub elapsed_ms: f64,
    /// First few failure descriptions.
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub ok: bool,
    pub suites: Vec<SuiteReport>,
}

struct Tally {
    name: &'static str,
    passed: usize,
    failed: usize,
    failures: Vec<String>,
    start: Instant,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            passed: 0,
            failed: 0,
            failures: Vec::new(),
            start: Instant::now(),
        }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
            if self.failures.len() < 10 {
                self.failures.push(what());
            }
        }
    }

    fn finish(self) -> SuiteReport {
        SuiteReport {
            name: self.name.to_string(),
            passed: self.passed,
            failed: self.failed,
            elapsed_ms: self.start.elapsed().as_secs_f64() * 1e3,
            failures: self.failures,
        }
    }
}

/// Unbiased HSIC by direct summation over ordered 4-tuples of distinct
/// indices, `O(n⁴)`. Independent of the trace form used by the estimator.
pub fn hsic_direct_summation(k: &GramMatrix, l: &GramMatrix) -> f64 {
    let n = k.size();
    let (kv, lv) = (k.values(), l.values());
    let at = |m: &[f64], i: usize, j: usize| m[i * n + j];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            for q in 0..n {
                if q == i || q == j {
                    continue;
                }
                for r in 0..n {
                    if r == i || r == j || r == q {
                        continue;
                    }
                    total += at(kv, i, j) * at(lv, i, j) + at(kv, i, j) * at(lv, q, r) - 2.0 * at(kv, i, j) * at(lv, i, q);
                }
            }
        }
    }
    let nf = n as f64;
    total / (nf * (nf - 1.0) * (nf - 2.0) * (nf - 3.0))
}

fn random_gram(rng: &mut ChaCha8Rng, n: usize) -> GramMatrix {
    let d = rng.random_range(1..=8);
    let x = Tensor::randn(&[n, d], 1.0, rng);
    gram_linear(&ActivationMatrix::new("x", x, 0).expect("n ≥ 4")).expect("rank 2")
}

fn suite_hsic(opts: &VerifyOptions) -> SuiteReport {
    let mut t = Tally::new("hsic");
    let mut rng = ChaCha8Rng::seed_from_u64(0x4510);
    for case in 0..100 {
        let n = rng.random_range(4..=12);
        let k = random_gram(&mut rng, n);
        let l = random_gram(&mut rng, n);
        let fast = hsic1_with_cross_coefficient(&k, &l, opts.hsic_cross_coefficient);
        let slow = hsic_direct_summation(&k, &l);
        let ok = matches!(fast, Ok(v) if (v - slow).abs() <= 1e-10);
        t.check(ok, || format!("case {case} (n = {n}): estimator {fast:?}, direct summation {slow}"));
    }
    t.finish()
}

/// Minibatch CKA of paired activation lists.
pub fn minibatch_cka(xs: &[Tensor], ys: &[Tensor]) -> Result<Option<f64>> {
    let mut acc = CkaAccumulator::new();
    for (x, y) in xs.iter().zip(ys) {
        acc.accumulate(&ActivationMatrix::new("x", x.clone(), 0)?, &ActivationMatrix::new("y", y.clone(), 0)?)?;
    }
    Ok(acc.finalize()?.value())
}

/// Random orthogonal `d × d` matrix: modified Gram–Schmidt on a Gaussian matrix.
pub fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = Tensor::randn(&[d, d], 1.0, rng);
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| (0..d).map(|i| a.at2(i, j)).collect()).collect();
    for j in 0..d {
        for p in 0..j {
            let (done, rest) = cols.split_at_mut(j);
            let dot: f64 = done[p].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
            for (v, u) in rest[0].iter_mut().zip(&done[p]) {
                *v -= dot * u;
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    let mut q = Tensor::zeros(&[d, d]);
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            q.data_mut()[i * d + j] = v;
        }
    }
    q
}

fn suite_cka() -> SuiteReport {
    let mut t = Tally::new("cka");
    let mut rng = ChaCha8Rng::seed_from_u64(0xc4a);
    for case in 0..20 {
        let (m, p, q, k) = (rng.random_range(4..=12), rng.random_range(2..=10), rng.random_range(2..=10), rng.random_range(1..=4));
        let xs: Vec<Tensor> = (0..k).map(|_| Tensor::randn(&[m, p], 1.0, &mut rng)).collect();
        let ys: Vec<Tensor> = (0..k).map(|_| Tensor::randn(&[m, q], 1.0, &mut rng)).collect();
        let base = minibatch_cka(&xs, &ys).ok().flatten();
        let close = |a: Option<f64>, b: Option<f64>, tol: f64| matches!((a, b), (Some(a), Some(b)) if (a - b).abs() <= tol);

        let own = minibatch_cka(&xs, &xs).ok().flatten();
        t.check(close(own, Some(1.0), 1e-10), || format!("case {case}: self CKA {own:?}"));

        let rot = random_orthogonal(p, &mut rng);
        let xr: Vec<Tensor> = xs.iter().map(|x| x.matmul(&rot).expect("shapes")).collect();
        let r = minibatch_cka(&xr, &ys).ok().flatten();
        t.check(close(r, base, 1e-8), || format!("case {case}: rotated {r:?} vs {base:?}"));

        let alpha = rng.random_range(0.1..10.0);
        let xs_scaled: Vec<Tensor> = xs.iter().map(|x| x.scaled(alpha)).collect();
        let s = minibatch_cka(&xs_scaled, &ys).ok().flatten();
        t.check(close(s, base, 1e-10), || format!("case {case}: scaled {s:?} vs {base:?}"));

        let sym = minibatch_cka(&ys, &xs).ok().flatten();
        t.check(close(sym, base, 1e-12), || format!("case {case}: swapped {sym:?} vs {base:?}"));

        let doubled_x: Vec<Tensor> = xs.iter().chain(&xs).cloned().collect();
        let doubled_y: Vec<Tensor> = ys.iter().chain(&ys).cloned().collect();
        let d = minibatch_cka(&doubled_x, &doubled_y).ok().flatten();
        t.check(close(d, base, 1e-12), || format!("case {case}: doubled stream {d:?} vs {base:?}"));
    }
    t.finish()
}

fn random_params(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>]) -> ModelParams {
    ModelParams::new(
        shapes
            .iter()
            .enumerate()
            .map(|(i, s)| ParamTensor::new(format!("p{i}"), Tensor::randn(s, 1.0, rng), ParamKind::Trainable, i))
            .collect(),
    )
    .expect("unique names")
}

fn suite_aggregation() -> SuiteReport {
    let mut t = Tally::new("aggregation");
    let mut rng = ChaCha8Rng::seed_from_u64(0xa66);
    let shapes = vec![vec![3, 4], vec![5], vec![2, 2, 2]];
    for case in 0..30 {
        let n = rng.random_range(1..=8);
        let clients: Vec<ModelParams> = (0..n).map(|_| random_params(&mut rng, &shapes)).collect();
        let sizes: Vec<usize> = (0..n).map(|_| rng.random_range(1..=500)).collect();
        let pairs: Vec<(&ModelParams, usize)> = clients.iter().zip(sizes.iter().copied()).collect();
        let Ok(agg) = fedavg_aggregate(&pairs) else {
            t.check(false, || format!("case {case}: aggregation failed"));
            continue;
        };
        let total: usize = sizes.iter().sum();
        let mut worst = 0.0f64;
        for (ti, p) in agg.iter().enumerate() {
            for (e, &v) in p.value.data().iter().enumerate() {
                let oracle = fsum(clients.iter().zip(&sizes).map(|(c, &d)| c.as_slice()[ti].value.data()[e] * d as f64 / total as f64));
                worst = worst.max((v - oracle).abs());
            }
        }
        t.check(worst <= 1e-12, || format!("case {case}: off the weighted mean by {worst:e}"));

        let same: Vec<(&ModelParams, usize)> = sizes.iter().map(|&d| (&clients[0], d)).collect();
        let fixed = fedavg_aggregate(&same).map(|a| a.values_bitwise_eq(&clients[0]));
        t.check(matches!(fixed, Ok(true)), || format!("case {case}: identical clients moved"));

        let mut rev = pairs.clone();
        rev.reverse();
        rev.rotate_left(n / 2);
        let perm = fedavg_aggregate(&rev).map(|a| a.values_bitwise_eq(&agg));
        t.check(matches!(perm, Ok(true)), || format!("case {case}: client order changed the result"));
    }
    t.finish()
}

/// Checks the S1 invariants of a partition of `labels`.
pub fn s1_violations(labels: &[usize], classes: usize, spec: &PartitionSpec) -> Vec<String> {
    let shards = match partition_labels(labels, classes, spec) {
        Ok(s) => s,
        Err(e) => return vec![e.to_string()],
    };
    let mut problems = Vec::new();
    let mut seen = vec![0usize; labels.len()];
    for s in &shards {
        for &i in &s.indices {
            seen[i] += 1;
            if !s.label_window.contains(&labels[i]) {
                problems.push(format!("client {} holds label {} outside its window", s.client_id, labels[i]));
            }
        }
        if s.indices.is_empty() {
            problems.push(format!("client {} is empty", s.client_id));
        }
    }
    // every label some window claims must be fully assigned exactly once
    for (i, &c) in seen.iter().enumerate() {
        let claimed = shards.iter().any(|s| s.label_window.contains(&labels[i]));
        if claimed && c != 1 {
            problems.push(format!("sample {i} assigned {c} times"));
        }
        if !claimed && c != 0 {
            problems.push(format!("sample {i} of unclaimed label assigned"));
        }
    }
    // per-label sizes differ by at most one across claimants
    for label in 0..classes {
        let counts: Vec<usize> = shards
            .iter()
            .filter(|s| s.label_window.contains(&label))
            .map(|s| s.indices.iter().filter(|&&i| labels[i] == label).count())
            .collect();
        if let (Some(lo), Some(hi)) = (counts.iter().min(), counts.iter().max()) {
            if hi - lo > 1 {
                problems.push(format!("label {label}: claimant sizes range {lo}..{hi}"));
            }
        }
    }
    problems
}

fn suite_partition() -> SuiteReport {
    let mut t = Tally::new("partition");
    let labels: Vec<usize> = (0..60_000).map(|i| i % 10).collect();
    for n in [1, 10, 20, 50, 100] {
        let v = s1_violations(&labels, 10, &PartitionSpec::s1(n, 7));
        t.check(v.is_empty(), || format!("S1 N = {n}: {}", v.join("; ")));
    }
    for vol in [500, 1000] {
        for n in [1, 10, 100] {
            let spec = PartitionSpec::s2(n, vol, 7);
            let sizes = partition_labels(&labels, 10, &spec).map(|s| s.iter().map(|c| c.size()).collect::<Vec<_>>());
            let ok = matches!(&sizes, Ok(s) if s.len() == n && s.iter().all(|&x| x == vol));
            t.check(ok, || format!("S2 N = {n}, volume {vol}: sizes {sizes:?}"));
        }
    }
    t.finish()
}

fn suite_gradients(opts: &VerifyOptions) -> SuiteReport {
    let mut t = Tally::new("gradients");
    for seed in 0..opts.gradient_seeds {
        match gradcheck::check_all(seed) {
            Ok(reports) => {
                for r in reports {
                    t.check(r.max_rel_error < 1e-4, || format!("seed {seed} {}: relative error {:e}", r.name, r.max_rel_error));
                }
            }
            Err(e) => t.check(false, || format!("seed {seed}: {e}")),
        }
    }
    t.finish()
}

pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    let want = |s: &str| opts.suites.is_empty() || opts.suites.iter().any(|x| x == s);
    let mut suites = Vec::new();
    if want("hsic") {
        suites.push(suite_hsic(opts));
    }
    if want("cka") {
        suites.push(suite_cka());
    }
    if want("aggregation") {
        suites.push(suite_aggregation());
    }
    if want("partition") {
        suites.push(suite_partition());
    }
    if want("gradients") {
        suites.push(suite_gradients(opts));
    }
    VerifyReport {
        ok: !suites.is_empty() && suites.iter().all(|s| s.failed == 0),
        suites,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_suites_pass() {
        let r = run_verify(&VerifyOptions {
            suites: vec!["hsic".into(), "cka".into(), "aggregation".into(), "partition".into()],
            ..Default::default()
        });
        for s in &r.suites {
            assert_eq!(s.failed, 0, "{s:?}");
            assert!(s.passed > 0);
        }
        assert!(r.ok);
    }

    #[test]
    fn mutated_coefficient_is_caught() {
        let r = run_verify(&VerifyOptions {
            suites: vec!["hsic".into()],
            hsic_cross_coefficient: 2.0 + 1e-3,
            ..Default::default()
        });
        assert!(!r.ok);
        assert!(r.suites[0].failed > 90);
    }

    #[test]
    fn orthogonal_is_orthogonal() {
        let q = random_orthogonal(5, &mut ChaCha8Rng::seed_from_u64(1));
        let qtq = q.transpose2().unwrap().matmul(&q).unwrap();
        assert!(qtq.max_abs_diff(&Tensor::eye(5)) < 1e-12);
    }
}
