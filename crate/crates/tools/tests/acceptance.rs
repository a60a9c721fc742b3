//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). The process fails if any
//! criterion fails, except those listed in `KNOWN_SHORTFALLS`, which are
//! still evaluated and reported.

use std::collections::BTreeSet;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use dml_core::embed::{synth_gaussian_classes, SynthSpec};
use dml_core::fid::{frechet_distance, GaussianSummary};
use dml_core::gradcheck::{grad_check, GradObjective};
use dml_core::linalg::{norm, Matrix};
use dml_core::losses::{BaseObjective, MarginConfig, MiningSource, MultisimConfig, S2sdConfig, S2sdInputs};
use dml_core::metrics::{density, nmi, retrieval_report, spectral_decay, Metric};
use dml_core::nn::MlpHead;
use dml_core::splits::{ags, build_split_sequence, AgsInput, InitialSplit, SplitConfig, StateKind};
use dml_core::trainer::{few_shot_adapt, synth_ood_task, train, EpisodeSpec, Objective, OodSpec, TrainConfig};
use dml_core::EmbeddingSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Criteria that are run and reported but do not fail the suite.
const KNOWN_SHORTFALLS: &[&str] = &[];

struct Outcome {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn check(id: &'static str, budget: Duration, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (ok, detail) = f();
    let took = start.elapsed();
    let in_budget = took <= budget;
    let detail = if in_budget {
        format!("{detail} [{:.2}s]", took.as_secs_f64())
    } else {
        format!("{detail} [{:.2}s exceeds budget of {:.0}s]", took.as_secs_f64(), budget.as_secs_f64())
    };
    let o = Outcome { id, passed: ok && in_budget, detail };
    println!("{} criterion {:<3} {}", if o.passed { "PASS" } else { "FAIL" }, o.id, o.detail);
    o
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn fid_suite() -> (bool, String) {
    let summary = |mean: Vec<f64>, cov: Matrix| GaussianSummary { mean, cov, n: 100 };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut notes = Vec::new();

    let a = summary(vec![0.3, -1.0], Matrix::from_rows(&[[2.0, 0.5], [0.5, 1.0]]).unwrap());
    let same = frechet_distance(&a, &a).unwrap();
    let one_d = frechet_distance(
        &summary(vec![0.0], Matrix::from_diag(&[1.0])),
        &summary(vec![0.0], Matrix::from_diag(&[4.0])),
    )
    .unwrap();
    let cov = Matrix::from_rows(&[[1.5, 0.2, 0.0], [0.2, 1.0, 0.1], [0.0, 0.1, 0.7]]).unwrap();
    let shift =
        frechet_distance(&summary(vec![1.0, 2.0, -1.0], cov.clone()), &summary(vec![-1.0, 0.5, 1.0], cov)).unwrap();
    let mut ok = same == 0.0 && (one_d - 1.0).abs() <= 1e-9 && (shift - (4.0 + 2.25 + 4.0)).abs() <= 1e-9;
    notes.push(format!("identical={same}, 1-D={one_d:.12}, shift={shift:.12}"));

    let mut worst_sym = 0.0f64;
    let mut worst_shift = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(1..=16);
        let draw = |rng: &mut ChaCha8Rng| {
            let x = gaussian(rng, d, d);
            let mut c = x.matmul(&x.transpose()).unwrap();
            c.scale(1.0 / d as f64);
            let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            summary(mean, c)
        };
        let (p, q) = (draw(&mut rng), draw(&mut rng));
        let pq = frechet_distance(&p, &q).unwrap();
        let qp = frechet_distance(&q, &p).unwrap();
        let t: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mv = |s: &GaussianSummary| summary(s.mean.iter().zip(&t).map(|(m, t)| m + t).collect(), s.cov.clone());
        let moved = frechet_distance(&mv(&p), &mv(&q)).unwrap();
        let scale = pq.abs().max(1.0);
        worst_sym = worst_sym.max((pq - qp).abs() / scale);
        worst_shift = worst_shift.max((pq - moved).abs() / scale);
    }
    ok &= worst_sym <= 1e-8 && worst_shift <= 1e-8;
    notes.push(format!("100 random pairs: symmetry {worst_sym:.1e}, translation {worst_shift:.1e}"));
    (ok, notes.join("; "))
}

fn ags_published() -> (bool, String) {
    // CUB200-2011 split FIDs and the S2SD Recall@1 on each split
    let fids = vec![19.2, 28.5, 52.6, 72.2, 92.5, 120.4, 136.5, 152.0, 173.9];
    let r1 = [78.93, 75.20, 69.24, 68.70, 67.28, 66.16, 64.64, 62.93, 63.02];
    let scores = r1.iter().map(|v| v / 100.0).collect();
    let value = 100.0 * ags(&AgsInput { fids, scores }).unwrap();
    ((value - 67.7).abs() <= 0.5, format!("AGS {value:.3} vs published 67.7 (±0.5)"))
}

fn split_monotonicity() -> (bool, String) {
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in 1..=3u64 {
        let data = synth_gaussian_classes(&SynthSpec::new(12, 30, 8, seed)).unwrap();
        let seq =
            build_split_sequence(&data, &InitialSplit::RandomHalf, SplitConfig { seed, ..Default::default() }).unwrap();
        let rows = |classes: &[u32]| data.labels().iter().filter(|l| classes.contains(l)).count();
        let mut prev = f64::NEG_INFINITY;
        let (mut swaps, mut removals, mut min_kept) = (0, 0, data.len());
        for s in &seq.states {
            let train: BTreeSet<u32> = s.train_classes.iter().copied().collect();
            ok &= !train.is_empty() && !s.test_classes.is_empty() && s.test_classes.iter().all(|c| !train.contains(c));
            let kept = rows(&s.train_classes) + rows(&s.test_classes);
            match s.kind {
                StateKind::Initial | StateKind::Swap => {
                    ok &= s.fid > prev && kept == data.len();
                    prev = s.fid;
                    swaps += usize::from(s.kind == StateKind::Swap);
                }
                StateKind::Removal => {
                    removals += 1;
                    min_kept = min_kept.min(kept);
                    ok &= 2 * kept >= data.len();
                }
            }
        }
        notes.push(format!("seed {seed}: {swaps} swaps, {removals} removals, min kept {min_kept}/{}", data.len()));
    }
    (ok, notes.join("; "))
}

/// Full sort of every other row; recall over all queries, AP over queries with a partner.
fn brute_force(set: &EmbeddingSet, ks: &[usize], cutoffs: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = set.len();
    let labels = set.labels();
    let mut hits = vec![0usize; ks.len()];
    let mut ap = vec![0.0; cutoffs.len()];
    let mut with_partner = 0usize;
    for q in 0..n {
        let mut order: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != q)
            .map(|j| (set.row(q).iter().zip(set.row(j)).map(|(a, b)| (a - b) * (a - b)).sum(), j))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let rel: Vec<bool> = order.iter().map(|&(_, j)| labels[j] == labels[q]).collect();
        for (h, &k) in hits.iter_mut().zip(ks) {
            *h += usize::from(rel[..k].contains(&true));
        }
        let total = rel.iter().filter(|&&r| r).count();
        if total == 0 {
            continue;
        }
        with_partner += 1;
        for (s, &c) in ap.iter_mut().zip(cutoffs) {
            let mut found = 0usize;
            let mut psum = 0.0;
            for (i, _) in rel.iter().take(c).enumerate().filter(|(_, &r)| r) {
                found += 1;
                psum += found as f64 / (i + 1) as f64;
            }
            *s += psum / total.min(c) as f64;
        }
    }
    (hits.iter().map(|&h| h as f64 / n as f64).collect(), ap.iter().map(|s| s / with_partner as f64).collect())
}

fn retrieval_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (ks, cutoffs) = ([1, 2, 4, 8], [10, 1000]);
    let mut mismatches = 0;
    for _ in 0..50 {
        let n = rng.random_range(10..=300);
        let d = rng.random_range(1..=8);
        let classes = rng.random_range(2..=12);
        let mut labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        labels[1] = labels[0];
        let set = EmbeddingSet::new(gaussian(&mut rng, n, d), labels).unwrap();
        let fast = retrieval_report(&set, &ks, &cutoffs, Metric::Euclidean).unwrap();
        let (recall, map) = brute_force(&set, &ks, &cutoffs);
        let got_r: Vec<f64> = ks.iter().map(|k| fast.recall_at[k]).collect();
        let got_m: Vec<f64> = cutoffs.iter().map(|c| fast.map_at[c]).collect();
        mismatches += usize::from(got_r != recall || got_m != map);
    }
    (mismatches == 0, format!("{mismatches}/50 instances differ from the brute-force oracle"))
}

fn gradient_suite() -> (bool, String) {
    let objectives = [GradObjective::Margin, GradObjective::Multisim, GradObjective::RowSoftmaxKl, GradObjective::S2sd];
    let mut ok = true;
    let mut notes = Vec::new();
    for obj in objectives {
        let r = grad_check(obj, 20, 0);
        ok &= r.passed(1e-5) && r.trials >= 20;
        notes.push(format!("{} {:.1e} ({} trials, {} redrawn)", obj.name(), r.max_rel_error(), r.trials, r.redrawn));
    }
    (ok, notes.join(", "))
}

fn detachment() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, d, df) = (8, 8, 12);
    let base = BaseObjective::Margin(MarginConfig::default());
    let cfg = S2sdConfig {
        gamma: 5.0,
        target_dims: vec![16, 32],
        use_feature_distill: true,
        detach_targets: true,
        ..Default::default()
    };
    let mut nonzero = 0;
    let mut differs = 0;
    let trials = 20;
    for _ in 0..trials {
        let raw = gaussian(&mut rng, n, d);
        let features = gaussian(&mut rng, n, df);
        let labels: Vec<u32> = (0..n as u32).map(|i| i / 2).collect();
        let heads: Vec<MlpHead> =
            cfg.target_dims.iter().map(|&t| MlpHead::new(&[df, t, t], &mut rng).unwrap()).collect();
        let betas = vec![vec![1.2; 4]; 3];
        let inputs = S2sdInputs { ref_embeddings: &raw, features: &features, labels: &labels };
        let out = dml_core::losses::s2sd_loss(inputs, &heads, &base, &betas, &cfg, 0, MiningSource::Sample(&mut rng))
            .unwrap();
        nonzero += out.head_distill_grads.iter().filter(|g| g.flatten().iter().any(|v| v.to_bits() != 0)).count();
        // with the distillation weight removed the head gradients must not change
        let plain = S2sdConfig { gamma: 0.0, ..cfg.clone() };
        let again =
            dml_core::losses::s2sd_loss(inputs, &heads, &base, &betas, &plain, 0, MiningSource::Fixed(&out.minings))
                .unwrap();
        let bits = |gs: &[dml_core::nn::MlpGrads]| -> Vec<u64> {
            gs.iter().flat_map(|g| g.flatten()).map(f64::to_bits).collect()
        };
        differs += usize::from(bits(&out.head_grads) != bits(&again.head_grads));
    }
    (
        nonzero == 0 && differs == 0,
        format!("{trials} trials: {nonzero} non-zero distill blocks, {differs} head gradients changed by distillation"),
    )
}

fn reduction() -> (bool, String) {
    let (train_set, _) = synth_ood_task(&OodSpec::new(8, 8, 25, 16, 1)).unwrap();
    let mut notes = Vec::new();
    let mut ok = true;
    for base in [BaseObjective::Margin(MarginConfig::default()), BaseObjective::Multisim(MultisimConfig::default())] {
        let plain = TrainConfig {
            epochs: 10,
            eval_every: 0,
            seed: 7,
            objective: Objective::Base(base.clone()),
            ..Default::default()
        };
        let cfg = S2sdConfig { gamma: 0.0, target_dims: vec![], use_feature_distill: false, ..Default::default() };
        let s2sd = TrainConfig { objective: Objective::S2sd { base: base.clone(), cfg }, ..plain.clone() };
        let a: Vec<u64> = train(&train_set, None, &plain).unwrap().loss_history().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = train(&train_set, None, &s2sd).unwrap().loss_history().iter().map(|v| v.to_bits()).collect();
        let same = a == b;
        ok &= same;
        let name = if matches!(base, BaseObjective::Margin(_)) { "margin" } else { "multisim" };
        notes.push(format!("{name}: {} epochs {}", a.len(), if same { "bit-identical" } else { "differ" }));
    }
    (ok, notes.join(", "))
}

struct SeedRun {
    seed: u64,
    untrained: f64,
    margin: f64,
    s2sd: f64,
    head: MlpHead,
    test: EmbeddingSet,
}

fn desk_training() -> Vec<SeedRun> {
    (1..=3u64)
        .map(|seed| {
            let (train_set, test) = synth_ood_task(&OodSpec::new(8, 8, 25, 16, seed)).unwrap();
            let margin_cfg = TrainConfig { seed, ..Default::default() };
            let margin = train(&train_set, Some(&test), &margin_cfg).unwrap();
            let s2sd_cfg = TrainConfig {
                objective: Objective::S2sd {
                    base: BaseObjective::Margin(MarginConfig::default()),
                    cfg: S2sdConfig { gamma: 5.0, target_dims: vec![32, 64], ..Default::default() },
                },
                ..margin_cfg
            };
            let s2sd = train(&train_set, Some(&test), &s2sd_cfg).unwrap();
            SeedRun {
                seed,
                untrained: margin.initial.as_ref().unwrap().recall_at_1,
                margin: margin.final_eval().unwrap().recall_at_1,
                s2sd: s2sd.final_eval().unwrap().recall_at_1,
                head: margin.reference,
                test,
            }
        })
        .collect()
}

fn few_shot(runs: &[SeedRun]) -> (bool, String) {
    let mut identity = true;
    let mut improved = 0;
    let mut notes = Vec::new();
    for r in runs {
        let none =
            few_shot_adapt(&r.head, &r.test, &EpisodeSpec { adapt_epochs: 0, seed: r.seed, ..Default::default() })
                .unwrap();
        identity &= none.adapted == none.zero_shot && none.episodes.iter().all(|e| e.adapted == e.zero_shot);
        let rep =
            few_shot_adapt(&r.head, &r.test, &EpisodeSpec { shots: 5, seed: r.seed, ..Default::default() }).unwrap();
        let (z, a) = (rep.zero_shot.recall_at[&1], rep.adapted.recall_at[&1]);
        improved += usize::from(a > z);
        notes.push(format!("seed {}: {z:.4} -> {a:.4}", r.seed));
    }
    (
        identity && improved >= 2,
        format!("adapt_epochs=0 identity {identity}; k=5 improves {improved}/3 ({})", notes.join(", ")),
    )
}

fn invariances() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut worst_pi, mut worst_rho) = (0.0f64, 0.0f64);
    let mut nmi_ok = true;
    for _ in 0..20 {
        let classes = rng.random_range(2..=6);
        let per = rng.random_range(3..=8);
        let d = rng.random_range(3..=10);
        let labels: Vec<u32> = (0..classes * per).map(|i| (i / per) as u32).collect();
        let set = EmbeddingSet::new(gaussian(&mut rng, classes * per, d), labels.clone()).unwrap();

        let s = rng.random_range(0.1..10.0);
        let t: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut m = set.data().clone();
        for i in 0..m.rows() {
            m.row_mut(i).iter_mut().zip(&t).for_each(|(v, t)| *v = s * *v + t);
        }
        let p0 = density(&set).unwrap().pi_ratio;
        let p1 = density(&set.with_data(m).unwrap()).unwrap().pi_ratio;
        worst_pi = worst_pi.max((p0 - p1).abs());

        // Gram-Schmidt on a Gaussian matrix gives a random orthogonal matrix
        let g = gaussian(&mut rng, d, d);
        let mut q: Vec<Vec<f64>> = Vec::new();
        for i in 0..d {
            let mut v = g.row(i).to_vec();
            for u in &q {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let nv = norm(&v);
            q.push(v.into_iter().map(|a| a / nv).collect());
        }
        let rot = set.data().matmul(&Matrix::from_rows(&q).unwrap()).unwrap();
        let r0 = spectral_decay(&set, 1).unwrap();
        let r1 = spectral_decay(&set.with_data(rot).unwrap(), 1).unwrap();
        worst_rho = worst_rho.max((r0 - r1).abs());

        let relabelled: Vec<u32> = labels.iter().map(|l| (l + 3) * 7).collect();
        nmi_ok &= close(nmi(&labels, &relabelled).unwrap(), 1.0, 1e-12);
        let (a_n, b_n) = (rng.random_range(2..=5usize), rng.random_range(2..=5usize));
        let reps = rng.random_range(1..=3usize);
        let cells: Vec<(usize, usize)> = (0..a_n * b_n * reps).map(|i| ((i / reps) % a_n, (i / reps) / a_n)).collect();
        let (a, b): (Vec<usize>, Vec<usize>) = cells.into_iter().unzip();
        nmi_ok &= nmi(&a, &b).unwrap().abs() <= 1e-12;
    }
    (
        worst_pi <= 1e-9 && worst_rho <= 1e-8 && nmi_ok,
        format!(
            "20 instances: pi_ratio {worst_pi:.1e}, spectral decay {worst_rho:.1e}, nmi {}",
            if nmi_ok { "ok" } else { "wrong" }
        ),
    )
}

fn retrieval_bench() -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dml"))
        .args(["retrieval-bench", "--n", "50000", "--dims", "32,64,128,256", "--queries", "200", "--seed", "1"])
        .output()
        .expect("dml runs");
    if !out.status.success() {
        return (false, String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let times: Vec<(u64, f64)> = v["results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["dim"].as_u64().unwrap(), r["seconds"].as_f64().unwrap()))
        .collect();
    let monotone = times.windows(2).all(|w| w[0].1 <= w[1].1);
    let shown: Vec<String> = times.iter().map(|(d, s)| format!("{d}: {s:.3}s")).collect();
    (monotone, format!("median of 3, 200 queries: {}", shown.join(", ")))
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut results = vec![
        check("1", secs(5), fid_suite),
        check("2", secs(1), ags_published),
        check("3", secs(30), split_monotonicity),
        check("4", secs(60), retrieval_oracle),
        check("5", secs(60), gradient_suite),
        check("6", secs(60), detachment),
        check("7", secs(60), reduction),
    ];

    let start = Instant::now();
    let runs = desk_training();
    let took = start.elapsed();
    let in_budget = took <= secs(300);
    let improved = runs.iter().filter(|r| r.margin > r.untrained).count();
    let per_seed: Vec<String> =
        runs.iter().map(|r| format!("seed {}: {:.4} -> {:.4}", r.seed, r.untrained, r.margin)).collect();
    results.push(check("8a", secs(300), || {
        (
            improved == 3 && in_budget,
            format!(
                "margin beats untrained head {improved}/3 ({}), training {:.1}s",
                per_seed.join(", "),
                took.as_secs_f64()
            ),
        )
    }));
    let wins = runs.iter().filter(|r| r.s2sd >= r.margin).count();
    let per_seed: Vec<String> =
        runs.iter().map(|r| format!("seed {}: s2sd {:.4} vs margin {:.4}", r.seed, r.s2sd, r.margin)).collect();
    results.push(check("8b", secs(300), || {
        (wins >= 2 && in_budget, format!("s2sd >= margin {wins}/3 ({})", per_seed.join(", ")))
    }));
    results.push(check("9", secs(120), || few_shot(&runs)));
    results.push(check("10", secs(10), invariances));
    results.push(check("11", secs(300), retrieval_bench));

    let failed: Vec<&Outcome> = results.iter().filter(|o| !o.passed).collect();
    let blocking: Vec<&str> = failed.iter().map(|o| o.id).filter(|id| !KNOWN_SHORTFALLS.contains(id)).collect();
    println!(
        "acceptance: {}/{} criteria passed; known shortfalls failing: {:?}; unexpected failures: {:?}",
        results.len() - failed.len(),
        results.len(),
        failed.iter().map(|o| o.id).filter(|id| KNOWN_SHORTFALLS.contains(id)).collect::<Vec<_>>(),
        blocking
    );
    if blocking.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
