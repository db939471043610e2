//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ddkit::ca2d::{self, Ca2dConfig, PatchCandidate, PatchScorer};
use ddkit::dcs::{self, DcsRecord, DcsRecordSet};
use ddkit::objectives::{tm_loss, ParamVector};
use ddkit::scaling::{default_init_grid, fit_scaling, predict, synthetic_curve, ScalingParams};
use ddkit::scores::{self, CadBase, ScoreMethod, ScoreParams, ScoreTable};
use ddkit::select::{self, SortOrder, SubsetSpec};
use ddkit::trajstore::{generate_synthetic, late_learners, Scenario, SyntheticSpec, Trajectory};
use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| -rng.random_range(1e-3..1.0f64).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

// ---------------------------------------------------------------- KL gradient

fn kl_of_logits(f: &[f64], q: &[f64], t: f64) -> f64 {
    let z: Vec<f64> = f.iter().map(|v| v / t).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    q.iter().zip(&z).map(|(qk, zk)| qk * (qk.ln() - (zk - lse))).sum()
}

fn kl_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut worst_lib: f64 = 0.0;
    for _ in 0..100 {
        let c = rng.random_range(2..=10);
        let p = random_simplex(&mut rng, c);
        let q = random_simplex(&mut rng, c);
        for t in [1.0, 4.0, 20.0] {
            let logits: Vec<f64> = p.iter().map(|v| t * v.ln()).collect();
            let h = 1e-4 * t;
            let numeric: Vec<f64> = (0..c)
                .map(|k| {
                    let (mut up, mut down) = (logits.clone(), logits.clone());
                    up[k] += h;
                    down[k] -= h;
                    (kl_of_logits(&up, &q, t) - kl_of_logits(&down, &q, t)) / (2.0 * h)
                })
                .collect();
            let grads = scores::kl_gradients(&p, &q, t).map_err(|e| e.to_string())?;
            let scale = grads.analytic.iter().map(|a| a.abs()).fold(0.0, f64::max);
            let dev = grads
                .analytic
                .iter()
                .zip(&numeric)
                .map(|(a, n)| (a - n).abs())
                .fold(0.0, f64::max);
            for (k, a) in grads.analytic.iter().enumerate() {
                ensure((a - (p[k] - q[k]) / t).abs() <= 1e-15, || {
                    format!("analytic gradient off at T={t}")
                })?;
            }
            worst = worst.max(dev / scale);
            worst_lib = worst_lib.max(grads.max_rel_deviation());
        }
    }
    ensure(worst < 1e-4 && worst_lib < 1e-4, || {
        format!("max rel deviation {worst:.2e} (library check {worst_lib:.2e})")
    })?;
    Ok(format!("max rel deviation {worst:.2e}, library check {worst_lib:.2e}"))
}

// ------------------------------------------------------------- CAD oracle

fn two_pass_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn reference_cad(series: &[f64], j: usize, w: usize, k: usize) -> f64 {
    let mut total = 0.0;
    for start in (k - j - w)..(k - j) {
        total += two_pass_std(&series[start..start + j]);
    }
    total / w as f64
}

fn one_sample_trajectory(target: &[f64]) -> Trajectory {
    let probs = target.iter().flat_map(|&p| [(1.0 - p) as f32, p as f32]).collect();
    Trajectory::new(target.len(), 1, 2, probs, vec![1], None, None, vec!["x".into()]).unwrap()
}

fn cad_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let j = rng.random_range(2..=8);
        let w = rng.random_range(1..=4);
        let k = rng.random_range(j + w..=40);
        let extra = rng.random_range(0..5);
        let raw: Vec<f64> = (0..k + extra).map(|_| rng.random_range(0.0..1.0)).collect();
        let traj = one_sample_trajectory(&raw);
        // the store holds f32, so the reference reads back what was stored
        let target = traj.target_series(0);
        let el2n: Vec<f64> = (0..traj.epochs())
            .map(|e| {
                let row = traj.row(e, 0);
                let (p0, p1) = (f64::from(row[0]), f64::from(row[1]));
                (p0 * p0 + (1.0 - p1) * (1.0 - p1)).sqrt()
            })
            .collect();

        let u = scores::uncertainty_series(&raw, j).map_err(|e| e.to_string())?;
        ensure(u.len() == raw.len() - j + 1, || "wrong uncertainty length".into())?;
        for (i, v) in u.iter().enumerate() {
            worst = worst.max((v - two_pass_std(&raw[i..i + j])).abs());
        }
        let params = ScoreParams {
            temperature: 1.0,
            window: j,
            width: w,
            budget: k,
        };
        let by_prob = scores::cad_prune(&traj, &params, CadBase::TargetProb).map_err(|e| e.to_string())?;
        worst = worst.max((by_prob.scores[0] - reference_cad(&target, j, w, k)).abs());
        let by_el2n = scores::cad_prune(&traj, &params, CadBase::El2n).map_err(|e| e.to_string())?;
        worst = worst.max((by_el2n.scores[0] - reference_cad(&el2n, j, w, k)).abs());
    }
    ensure(worst <= 1e-10, || format!("max abs deviation {worst:.2e}"))?;
    Ok(format!("max abs deviation {worst:.2e} over 200 series"))
}

// -------------------------------------------------- CAD compute-awareness

fn top_decile(table: &ScoreTable) -> Vec<usize> {
    let mut order: Vec<usize> = (0..table.len()).collect();
    order.sort_by(|&a, &b| {
        table.scores[b]
            .total_cmp(&table.scores[a])
            .then_with(|| table.sample_ids[a].cmp(&table.sample_ids[b]))
    });
    order.truncate(table.len() / 10);
    order
}

fn cad_compute_awareness() -> Outcome {
    let spec = SyntheticSpec {
        epochs: 30,
        samples: 1000,
        classes: 10,
        seed: 42,
        scenario: Scenario::LateLearner,
    };
    let traj = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let late = late_learners(&spec);
    ensure(!late.is_empty(), || "scenario has no late learners".into())?;
    let params = ScoreParams {
        temperature: 1.0,
        window: 6,
        width: 2,
        budget: 20,
    };
    let cad = scores::cad_prune(&traj, &params, CadBase::El2n).map_err(|e| e.to_string())?;
    let dyn_unc = scores::dyn_unc(&traj, 6).map_err(|e| e.to_string())?;
    let (cad_top, dyn_top) = (top_decile(&cad), top_decile(&dyn_unc));
    let cad_hits = late.iter().filter(|n| cad_top.contains(n)).count();
    let dyn_hits = late.iter().filter(|n| dyn_top.contains(n)).count();
    let detail = format!(
        "late learners in top decile: CAD {cad_hits}/{}, Dyn-Unc {dyn_hits}/{}",
        late.len(),
        late.len()
    );
    ensure(cad_hits == late.len() && dyn_hits < late.len(), || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------ Spearman oracle

fn brute_midranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let less = x.iter().filter(|u| *u < v).count() as f64;
            let equal = x.iter().filter(|u| *u == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    sxy / (sxx * syy).sqrt()
}

fn tied_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let levels = rng.random_range(2..=6);
        let v: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..levels)) * 0.5 - 1.0)
            .collect();
        if v.iter().any(|x| *x != v[0]) {
            return v;
        }
    }
}

fn spearman_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(3..=20);
        let x = tied_vector(&mut rng, n);
        let y = tied_vector(&mut rng, n);
        let got = dcs::spearman(&x, &y).map_err(|e| e.to_string())?;
        worst = worst.max((got - brute_pearson(&brute_midranks(&x), &brute_midranks(&y))).abs());
    }
    let mut worst_transform: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(3..=20);
        let x: Vec<f64> = tied_vector(&mut rng, n)
            .iter()
            .map(|v| v + rng.random_range(0.0..0.1))
            .collect();
        let y = tied_vector(&mut rng, n);
        let (a, b, c) = (
            rng.random_range(0.1..3.0),
            rng.random_range(0.0..2.0),
            rng.random_range(0.0..1.0),
        );
        let fx: Vec<f64> = x.iter().map(|v| a * v + b * v * v * v + c * v.exp()).collect();
        let base = dcs::spearman(&x, &y).map_err(|e| e.to_string())?;
        let moved = dcs::spearman(&fx, &y).map_err(|e| e.to_string())?;
        worst_transform = worst_transform.max((base - moved).abs());
    }
    ensure(worst <= 1e-12 && worst_transform <= 1e-12, || {
        format!("oracle deviation {worst:.2e}, transform deviation {worst_transform:.2e}")
    })?;
    Ok(format!(
        "oracle deviation {worst:.2e} (1000 vectors), transform deviation {worst_transform:.2e} (100 transforms)"
    ))
}

// ------------------------------------------------------------- DCS confound

fn dcs_confound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut records = Vec::new();
    for level in 0..6u64 {
        for i in 0..100 {
            // loss tracks size; error falls with size; within a size level the two are independent
            records.push(DcsRecord {
                subset_id: format!("l{level}_{i:03}"),
                subset_size: 100 * (level + 1),
                distill_loss: level as f64 + noise.sample(&mut rng),
                gen_error: (0.8 - 0.1 * level as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0),
            });
        }
    }
    let set = DcsRecordSet::new("confound", records).map_err(|e| e.to_string())?;
    let report = dcs::dcs(&set, true).map_err(|e| e.to_string())?;
    let adjusted = report.rho_adjusted.ok_or("no adjusted value")?;
    let detail = format!("rho_raw {:.4}, rho_adjusted {adjusted:.4}", report.rho_raw);
    ensure(report.rho_raw.abs() > 0.8 && adjusted.abs() < 0.1, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------ TM invariance

fn pv(values: Vec<f64>) -> ParamVector {
    ParamVector::new(0, values).unwrap()
}

fn tm_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dim = rng.random_range(2..=64);
        let mut draw = || (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (t0, tm, hat) = (draw(), draw(), draw());
        let shift = draw();
        let scale = rng.random_range(0.1..10.0) * if rng.random_bool(0.5) { -1.0 } else { 1.0 };
        let map = |v: &[f64]| v.iter().zip(&shift).map(|(x, b)| scale * x + b).collect::<Vec<f64>>();
        let before = tm_loss(&pv(t0.clone()), &pv(tm.clone()), &pv(hat.clone())).map_err(|e| e.to_string())?;
        let after = tm_loss(&pv(map(&t0)), &pv(map(&tm)), &pv(map(&hat))).map_err(|e| e.to_string())?;
        worst = worst.max((before - after).abs());
        let at_target = tm_loss(&pv(t0.clone()), &pv(tm.clone()), &pv(tm.clone())).map_err(|e| e.to_string())?;
        let at_start = tm_loss(&pv(t0.clone()), &pv(tm.clone()), &pv(t0.clone())).map_err(|e| e.to_string())?;
        ensure(at_target == 0.0 && at_start == 1.0, || {
            format!("endpoints give {at_target} and {at_start}")
        })?;
    }

    // Near-stationary expert: the student barely leaves the start point, so
    // the loss sits just under 1 whatever subset drives it.
    let dim = 512;
    let start: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let drift: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0) * 1e-2).collect();
    let target: Vec<f64> = start.iter().zip(&drift).map(|(s, d)| s + d).collect();
    let mut losses = Vec::new();
    for subset in 0..10u64 {
        let mut srng = ChaCha8Rng::seed_from_u64(100 + subset);
        let step = 5e-6;
        let student: Vec<f64> = start
            .iter()
            .zip(&drift)
            .map(|(s, d)| s + step * (d / 1e-2 + srng.random_range(-1.0..1.0)))
            .collect();
        losses.push(tm_loss(&pv(start.clone()), &pv(target.clone()), &pv(student)).map_err(|e| e.to_string())?);
    }
    let lo = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let detail = format!(
        "affine deviation {worst:.2e}; flat losses in [{lo:.5}, {hi:.5}], spread {:.2e}",
        hi - lo
    );
    ensure(worst < 1e-9 && hi - lo < 1e-3 && lo > 0.99, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------ scaling fit

fn scaling_recovery() -> Outcome {
    let started = Instant::now();
    let grid = default_init_grid();
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut clean_worst: f64 = 0.0;
    let mut noisy_worst: f64 = 0.0;
    let mut noisy_misses = Vec::new();
    let mut beats_truth = 0;
    let mut case = 0u64;
    for b in [-0.3, -0.15, -0.05] {
        for delta in [1.5, 1.9474, 2.8947] {
            for d in [0.05, 0.1, 0.2] {
                let truth = ScalingParams { a: 0.9, b, delta, d };
                let rel = |fit: &ScalingParams| {
                    [
                        (fit.a, truth.a),
                        (fit.b, truth.b),
                        (fit.delta, truth.delta),
                        (fit.d, truth.d),
                    ]
                    .iter()
                    .map(|(g, w)| ((g - w) / w).abs())
                    .fold(0.0, f64::max)
                };
                let curve = synthetic_curve(&truth, 1000.0, 30).map_err(|e| e.to_string())?;
                let clean = fit_scaling(&curve, &grid).map_err(|e| e.to_string())?;
                clean_worst = clean_worst.max(rel(&clean.params()));

                let mut rng = ChaCha8Rng::seed_from_u64(700 + case);
                let mut noisy = curve.clone();
                for o in &mut noisy.observations {
                    o.metric *= 1.0 + noise.sample(&mut rng);
                }
                let fit = fit_scaling(&noisy, &grid).map_err(|e| e.to_string())?;
                let r = rel(&fit.params());
                noisy_worst = noisy_worst.max(r);
                // a fit at least as good as the truth means the miss is estimator variance
                let at_truth = predict(&truth, &noisy.samples_seen()).map_err(|e| e.to_string())?;
                let truth_sse: f64 = at_truth
                    .iter()
                    .zip(noisy.errors())
                    .map(|(p, y)| (p - y) * (p - y))
                    .sum();
                if fit.sse <= truth_sse {
                    beats_truth += 1;
                }
                if r > 0.10 {
                    noisy_misses.push(format!("(b={b}, delta={delta}, d={d}: {r:.3})"));
                }
                case += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let detail = format!(
        "noise-free worst rel {clean_worst:.2e}; 1% noise worst rel {noisy_worst:.3}, {} of 27 over 10% ({beats_truth} of 27 noisy fits reach SSE <= SSE at the truth); {secs:.2}s",
        noisy_misses.len()
    );
    ensure(clean_worst <= 0.02 && noisy_misses.is_empty() && secs < 10.0, || {
        format!("{detail}; misses {}", noisy_misses.join(" "))
    })?;
    Ok(detail)
}

// ------------------------------------------------------ selection contracts

fn random_trajectory(rng: &mut ChaCha8Rng, classes: usize, min_per_class: usize) -> (Trajectory, ScoreTable) {
    let mut labels = Vec::new();
    for c in 0..classes {
        let count = rng.random_range(min_per_class..min_per_class + 15);
        labels.extend(std::iter::repeat_n(c as u32, count));
    }
    // shuffle so classes interleave
    for i in (1..labels.len()).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    let n = labels.len();
    let mut probs = Vec::with_capacity(n * classes);
    for _ in 0..n {
        probs.extend(random_simplex(rng, classes).iter().map(|v| *v as f32));
    }
    // re-normalize in f32 so rows pass the store tolerance
    for row in probs.chunks_mut(classes) {
        let s: f32 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let ids: Vec<String> = (0..n).map(|i| format!("r{i:04}")).collect();
    let traj = Trajectory::new(1, n, classes, probs, labels, None, None, ids.clone()).unwrap();
    // coarse scores so ties are common
    let scores = (0..n).map(|_| f64::from(rng.random_range(0..8u8))).collect();
    let table = ScoreTable {
        method: ScoreMethod::Imported,
        config: BTreeMap::new(),
        sample_ids: ids,
        scores,
        source_manifest_checksum: traj.manifest_checksum(),
    };
    (traj, table)
}

fn balanced(subset: &SubsetSpec, traj: &Trajectory, ipc: usize) -> bool {
    let by_class = traj.samples_by_class();
    subset.check().is_ok()
        && subset.len() == ipc * by_class.len()
        && by_class.keys().all(|&c| subset.class_members(c).len() == ipc)
        && subset
            .sample_ids
            .iter()
            .zip(&subset.classes)
            .all(|(id, c)| traj.class_of(id) == Some(*c))
}

fn brute_frontier(points: &[(usize, f64, f64)]) -> Vec<bool> {
    (0..points.len())
        .map(|i| {
            let (ipc, f, acc) = points[i];
            !points.iter().enumerate().any(|(j, &(ipc2, f2, acc2))| {
                j != i && ipc2 == ipc && (acc2 > acc || (acc2 == acc && (f2 < f || (f2 == f && j < i))))
            })
        })
        .collect()
}

fn selection_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut windows_checked = 0;
    for case in 0..50 {
        let classes = rng.random_range(2..=5);
        let (traj, table) = random_trajectory(&mut rng, classes, 12);
        let ipc = rng.random_range(1..=10);
        let subset = select::select_random(&traj, ipc, case).map_err(|e| e.to_string())?;
        ensure(balanced(&subset, &traj, ipc), || {
            format!("random selection unbalanced in case {case}")
        })?;
        for order in [SortOrder::Ascending, SortOrder::Descending] {
            let q = rng.random_range(0.0..=1.0);
            let subset = select::select_window(&table, &traj, ipc, q, order).map_err(|e| e.to_string())?;
            ensure(balanced(&subset, &traj, ipc), || {
                format!("window selection unbalanced in case {case}")
            })?;
        }
        let stride = rng.random_range(1..=7);
        let windows = select::sliding_window_enumerate(&table, &traj, ipc, stride).map_err(|e| e.to_string())?;
        let smallest = traj.samples_by_class().values().map(Vec::len).min().unwrap();
        let brute = (0..).map(|i| i * stride).take_while(|o| o + ipc <= smallest).count();
        ensure(
            windows.len() == brute && select::window_count(smallest, ipc, stride) == brute,
            || format!("case {case}: {} windows, expected {brute}", windows.len()),
        )?;
        for w in &windows {
            ensure(balanced(w, &traj, ipc), || {
                format!("sliding window unbalanced in case {case}")
            })?;
        }
        windows_checked += windows.len();
    }
    for case in 0..100 {
        let n = rng.random_range(1..=40);
        let points: Vec<(usize, f64, f64)> = (0..n)
            .map(|_| {
                let ipc = [1, 10, 50, 100][rng.random_range(0..4)];
                let f = f64::from(rng.random_range(1..=5u8)) / 5.0;
                let acc = f64::from(rng.random_range(0..=20u8)) / 20.0;
                (ipc, f, acc)
            })
            .collect();
        let marked = select::pareto_frontier(&points).map_err(|e| e.to_string())?;
        let expected = brute_frontier(&points);
        ensure(
            marked.iter().map(|p| p.is_frontier).eq(expected.iter().copied()),
            || format!("frontier mismatch on grid {case}"),
        )?;
    }
    Ok(format!(
        "50 randomized stores, {windows_checked} sliding windows, 100 pareto grids"
    ))
}

// ------------------------------------------------------------------ CA2D toy

fn ca2d_toy() -> Outcome {
    let spec = SyntheticSpec {
        epochs: 30,
        samples: 64,
        classes: 2,
        seed: 13,
        scenario: Scenario::LateLearner,
    };
    let traj = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let images_dir = dir.path().join("img");
    ca2d::write_toy_images(&traj, &images_dir, 32, 13).map_err(|e| e.to_string())?;
    let cad = ScoreParams {
        temperature: 1.0,
        window: 6,
        width: 2,
        budget: 20,
    };
    let (ipc, factor, resolution) = (2usize, 2u32, 32u32);
    let cfg = Ca2dConfig::new(cad, ipc, factor, resolution, 21);

    // every candidate gets a known random score, so the expected assembly
    // can be worked out here
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut candidates: BTreeMap<(String, usize), PatchCandidate> = BTreeMap::new();
    let mut score_csv = String::from("sample_id,patch_index,score\n");
    for id in traj.sample_ids() {
        for mut c in
            ca2d::generate_candidates(id, 32, 32, cfg.num_candidates, &cfg.crop, cfg.seed).map_err(|e| e.to_string())?
        {
            c.score = f64::from(rng.random_range(0..50u8));
            score_csv.push_str(&format!("{},{},{}\n", id, c.patch_index, c.score));
            candidates.insert((id.clone(), c.patch_index), c);
        }
    }
    let score_file = dir.path().join("patch_scores.csv");
    fs::write(&score_file, score_csv).map_err(|e| e.to_string())?;
    let scorer = PatchScorer::FileScores(score_file);

    let out = dir.path().join("out");
    let (subset, set) = ca2d::ca2d_pipeline(&traj, &images_dir, &cfg, &scorer, &out).map_err(|e| e.to_string())?;
    let rerun = dir.path().join("rerun");
    ca2d::ca2d_pipeline(&traj, &images_dir, &cfg, &scorer, &rerun).map_err(|e| e.to_string())?;

    let cad_scores = scores::cad_prune(&traj, &cad, CadBase::El2n).map_err(|e| e.to_string())?;
    let expected_subset =
        select::select_window(&cad_scores, &traj, ipc * 4, 0.0, SortOrder::Descending).map_err(|e| e.to_string())?;
    ensure(subset.sample_ids == expected_subset.sample_ids, || {
        "subset is not the top CAD window".into()
    })?;

    let mut files: Vec<String> = fs::read_dir(&out)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|f| f.ends_with(".png"))
        .collect();
    files.sort();
    ensure(files.len() == 2 * ipc && set.images.len() == 2 * ipc, || {
        format!("{} images written", files.len())
    })?;

    let sources: BTreeMap<String, RgbImage> = traj
        .sample_ids()
        .iter()
        .map(|id| {
            (
                id.clone(),
                image::open(images_dir.join(format!("{id}.png"))).unwrap().to_rgb8(),
            )
        })
        .collect();
    let cell = resolution / factor;
    for class in 0..2u32 {
        // best patch per selected image, then images ranked by that score
        let mut best: Vec<&PatchCandidate> = subset
            .class_members(class)
            .iter()
            .map(|id| {
                candidates
                    .range((id.to_string(), 0)..(id.to_string(), usize::MAX))
                    .map(|(_, c)| c)
                    .fold(None::<&PatchCandidate>, |acc, c| match acc {
                        Some(b) if b.score >= c.score => Some(b),
                        _ => Some(c),
                    })
                    .unwrap()
            })
            .collect();
        best.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.sample_id.cmp(&b.sample_id)));
        for g in 0..ipc {
            let name = format!("class_{class}_ipc_{g}.png");
            let image = set
                .images
                .iter()
                .find(|i| i.class == class && i.index == g)
                .ok_or(format!("missing {name}"))?;
            ensure(image.file == name, || format!("unexpected file {}", image.file))?;
            let want: Vec<(&str, usize)> = best[g * 4..(g + 1) * 4]
                .iter()
                .map(|c| (c.sample_id.as_str(), c.patch_index))
                .collect();
            let got: Vec<(&str, usize)> = image
                .patches
                .iter()
                .map(|c| (c.sample_id.as_str(), c.patch_index))
                .collect();
            ensure(want == got, || format!("{name}: patches {got:?}, expected {want:?}"))?;

            let decoded = image::open(out.join(&name)).map_err(|e| e.to_string())?.to_rgb8();
            ensure(decoded.dimensions() == (resolution, resolution), || {
                format!("{name} is {:?}", decoded.dimensions())
            })?;
            let mut canvas = RgbImage::new(resolution, resolution);
            for (i, p) in image.patches.iter().enumerate() {
                let r = candidates[&(p.sample_id.clone(), p.patch_index)].rect;
                ensure(
                    r == p.rect && r.w >= 8 && r.h >= 8 && r.x + r.w <= 32 && r.y + r.h <= 32,
                    || format!("{name}: bad rectangle {:?}", p.rect),
                )?;
                ensure(traj.class_of(&p.sample_id) == Some(class), || {
                    format!("{name}: patch from another class")
                })?;
                let crop = imageops::crop_imm(&sources[&p.sample_id], r.x, r.y, r.w, r.h).to_image();
                let resized = imageops::resize(&crop, cell, cell, FilterType::Triangle);
                let (row, col) = (i as u32 / factor, i as u32 % factor);
                imageops::replace(&mut canvas, &resized, i64::from(col * cell), i64::from(row * cell));
            }
            ensure(canvas == decoded, || {
                format!("{name}: pixels differ from the patch grid")
            })?;
            ensure(
                fs::read(out.join(&name)).unwrap() == fs::read(rerun.join(&name)).unwrap(),
                || format!("{name} differs between runs"),
            )?;
        }
    }
    ensure(
        fs::read(out.join(ca2d::MANIFEST_FILE)).unwrap() == fs::read(rerun.join(ca2d::MANIFEST_FILE)).unwrap(),
        || "manifest differs between runs".into(),
    )?;
    Ok(format!(
        "{} images of {resolution}px from {} sources, reruns identical",
        set.images.len(),
        subset.len()
    ))
}

// ------------------------------------------------------ end-to-end determinism

fn run_ddkit(dir: &Path, seed: &str, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ddkit"))
        .current_dir(dir)
        .env("DDKIT_SEED", seed)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "`ddkit {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn pipeline(dir: &Path, seed: &str) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let steps: [&[&str]; 5] = [
        &[
            "synth-traj",
            "--out",
            "store",
            "--epochs",
            "30",
            "--samples",
            "200",
            "--classes",
            "4",
            "--images",
            "img",
        ],
        &[
            "score", "--store", "store", "--method", "cad", "--J", "6", "--W", "2", "--K", "20", "--out", "cad.csv",
        ],
        &[
            "select",
            "--store",
            "store",
            "--scores",
            "cad.csv",
            "--ipc",
            "8",
            "--order",
            "descending",
            "--out",
            "subset.csv",
        ],
        &[
            "select",
            "--store",
            "store",
            "--method",
            "random",
            "--ipc",
            "8",
            "--out",
            "random.csv",
        ],
        &[
            "distill",
            "--subset",
            "subset.csv",
            "--images",
            "img",
            "--out",
            "distilled",
            "--ipc",
            "2",
            "--factor",
            "2",
            "--resolution",
            "32",
        ],
    ];
    for step in steps {
        run_ddkit(dir, seed, step)?;
    }
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path).map_err(|e| e.to_string())?;
                files.insert(path.strip_prefix(dir).unwrap().to_path_buf(), bytes);
            }
        }
    }
    Ok(files)
}

fn end_to_end() -> Outcome {
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    let first = pipeline(a.path(), "7")?;
    let second = pipeline(b.path(), "7")?;
    ensure(first.keys().eq(second.keys()), || {
        "runs produced different file sets".into()
    })?;
    let differing: Vec<String> = first
        .iter()
        .filter(|(k, v)| second[*k] != **v)
        .map(|(k, _)| k.display().to_string())
        .collect();
    ensure(differing.is_empty(), || {
        format!("differing artifacts: {}", differing.join(", "))
    })?;
    let pngs = first.keys().filter(|k| k.starts_with("distilled")).count();
    ensure(pngs == 9, || {
        format!("expected 8 images and a manifest, found {pngs} files")
    })?;
    // a different seed must actually change seeded outputs
    let other = pipeline(c.path(), "8")?;
    ensure(other[Path::new("random.csv")] != first[Path::new("random.csv")], || {
        "seed has no effect".into()
    })?;
    Ok(format!("{} artifacts byte-identical across two runs", first.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("kl-gradient-identity", kl_gradient),
        ("cad-uncertainty-oracle", cad_oracle),
        ("cad-compute-awareness", cad_compute_awareness),
        ("spearman-oracle", spearman_oracle),
        ("dcs-confound-adjustment", dcs_confound),
        ("tm-loss-invariance", tm_invariance),
        ("scaling-law-fit", scaling_recovery),
        ("selection-contracts", selection_contracts),
        ("ca2d-pipeline", ca2d_toy),
        ("end-to-end-determinism", end_to_end),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.2}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.2}s): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
