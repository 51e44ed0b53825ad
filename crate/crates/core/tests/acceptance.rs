//! Acceptance suite: one line per criterion, non-zero exit on any failure.
//!
//! Run with `cargo test -p amped --test acceptance`. Criterion 9 trains a
//! model and dominates the runtime (a few minutes on one core).

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use amped::data::{generate, generate_splits, BinaryMap, Image, SynthSpec};
use amped::eval::{
    compute_metrics, evaluate_image, evaluate_model, match_edges, EvalConfig, GroundTruthSet,
    MatchCounts,
};
use amped::flops::{analytic_macs, ArchSpec, RetentionProfile};
use amped::model::{EdgeMap, PruneMode, SedConfig, SedModel};
use amped::prune::{
    accumulate_mask, project_tokens, pruned_attention, recover_sequence, validate_schedule,
    AccumulatedMask, AttentionScale, AttentionWeights, DecisionMask, PruneSchedule, StageSnapshot,
    TokenSequence, ViolationKind,
};
use amped::tensor::{GradTape, Matrix};
use amped::train::{gradcheck_config, loss_and_gradients, loss_on_tape, train, NoObserver, TrainConfig};

/// Relative band around the published totals of the two reference encoders.
const FLOP_TOLERANCE: f64 = 0.02;
const ATTENTION_TOLERANCE: f64 = 1e-6;
const NOOP_TOLERANCE: f64 = 1e-6;
const GRADCHECK_STEP: f64 = 1e-4;
const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Element-wise errors (reported only) treat gradients below this as this size.
const GRADCHECK_FLOOR: f64 = 1e-2;
const GRADCHECK_BUDGET_S: f64 = 60.0;
const GOLDEN_TOLERANCE: f64 = 1e-12;
/// Matching radius of 1.5 px on a 64x64 image: the 8-neighbourhood.
const END_TO_END_TOLERANCE: f64 = 0.0166;
/// The usual benchmark radius, reported for information only.
const BENCHMARK_TOLERANCE: f64 = 0.0075;
const MIN_ODS: f64 = 0.70;
const MIN_REDUCTION_PCT: f64 = 15.0;
const MAX_ODS_DROP: f64 = 0.05;
const END_TO_END_BUDGET_S: f64 = 600.0;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn flop_anchor() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for (name, spec, published) in [
        ("ViT-B", ArchSpec::vit_b(), 663.7),
        ("ViT-L", ArchSpec::vit_l(), 2069.6),
    ] {
        let g = analytic_macs(&spec, &spec.full_retention())
            .map_err(|e| e.to_string())?
            .gmacs();
        let rel = (g - published).abs() / published;
        pass &= rel <= FLOP_TOLERANCE;
        lines.push(format!("{name} {g:.1} GMACs vs {published} ({:+.2}%)", 100.0 * (g / published - 1.0)));
    }
    check(pass, lines.join(", "), lines.join(", "))
}

fn with_random_heads(model: &mut SedModel<f32>, seed: u64, scale: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = model.config().channels;
    for s in 0..model.config().schedule.len() {
        let id = model.params().id(&format!("heads.{s}.weight")).expect("score head");
        *model.params_mut().get_mut(id) = Matrix::from_fn(c, 1, |_, _| rng.random_range(-scale..scale));
    }
}

fn instrumented_equals_analytic() -> Outcome {
    let cfg = SedConfig::micro();
    let mut model = SedModel::<f32>::new(cfg.clone(), 3).map_err(|e| e.to_string())?;
    with_random_heads(&mut model, 11, 0.5);
    let spec = ArchSpec::from_sed(&cfg);
    let mut pruned_images = 0;
    for seed in 0..20 {
        let img = Image::random(cfg.image_size.0, cfg.image_size.1, cfg.in_channels, 100 + seed);
        let (_, trace) = model.forward(&img, &PruneMode::Schedule).map_err(|e| e.to_string())?;
        let analytic = analytic_macs(&spec, &RetentionProfile::from_trace(&trace))
            .map_err(|e| e.to_string())?
            .total;
        if analytic != trace.macs {
            return Err(format!("image {seed}: instrumented {} vs analytic {analytic}", trace.macs));
        }
        if trace.token_counts.last() < trace.token_counts.first() {
            pruned_images += 1;
        }
    }
    check(
        pruned_images > 0,
        format!("20/20 images exact, {pruned_images} of them pruned"),
        "no image was pruned; the check is vacuous".into(),
    )
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Full-length attention in which pruned keys get `-inf` logits, evaluated
/// for the retained queries only.
fn masked_attention(x: &Matrix<f64>, w: &AttentionWeights<f64>, heads: usize, keep: &[usize]) -> Matrix<f64> {
    let (n, c) = x.shape();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut qkv = vec![vec![0.0; 3 * c]; n];
    for (i, row) in qkv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = w.qkv_bias.get(0, j) + (0..c).map(|k| x.get(i, k) * w.qkv.get(k, j)).sum::<f64>();
        }
    }
    let retained: Vec<bool> = (0..n).map(|j| keep.contains(&j)).collect();
    let mut out = Matrix::zeros(keep.len(), c);
    for (r, &i) in keep.iter().enumerate() {
        let mut attended = vec![0.0; c];
        for h in 0..heads {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    if retained[j] {
                        scale * (0..dh).map(|d| qkv[i][h * dh + d] * qkv[j][c + h * dh + d]).sum::<f64>()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..dh {
                attended[h * dh + d] = (0..n).map(|j| e[j] / z * qkv[j][2 * c + h * dh + d]).sum();
            }
        }
        for j in 0..c {
            out.set(r, j, w.out_bias.get(0, j) + (0..c).map(|k| attended[k] * w.out.get(k, j)).sum::<f64>());
        }
    }
    out
}

fn pruned_attention_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let c = heads * rng.random_range(1..=32 / heads);
        let n = rng.random_range(1..=64);
        let x = random_matrix(&mut rng, n, c);
        let w = AttentionWeights {
            qkv: random_matrix(&mut rng, c, 3 * c),
            qkv_bias: random_matrix(&mut rng, 1, 3 * c),
            out: random_matrix(&mut rng, c, c),
            out_bias: random_matrix(&mut rng, 1, c),
        };
        let p = rng.random_range(0.1..1.0);
        let mut bits: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
        if !bits.iter().any(|&b| b) {
            bits[rng.random_range(0..n)] = true;
        }
        let mask = DecisionMask::new(bits);
        let seq = TokenSequence::new(x.clone(), (1, n)).map_err(|e| e.to_string())?;
        let kept = project_tokens(&seq, &mask).map_err(|e| e.to_string())?;
        let got = pruned_attention(&kept, &w, heads, AttentionScale::PerHead).map_err(|e| e.to_string())?;
        let want = masked_attention(&x, &w, heads, &mask.retained_indices());
        let diff = got.features().max_abs_diff(&want).ok_or(format!("case {case}: shape mismatch"))?;
        worst = worst.max(diff);
    }
    check(
        worst <= ATTENTION_TOLERANCE,
        format!("100 instances, max |diff| {worst:.2e}"),
        format!("max |diff| {worst:.2e} > {ATTENTION_TOLERANCE:e}"),
    )
}

fn masks(n: usize) -> impl Iterator<Item = Vec<bool>> {
    (0u32..1 << n).map(move |m| (0..n).map(|i| m >> i & 1 == 1).collect())
}

fn rows_with(n: usize, base: f64) -> Matrix<f64> {
    Matrix::from_fn(n, 2, |i, j| base + i as f64 + 0.5 * j as f64)
}

fn shifted(seq: &TokenSequence<f64>, by: f64) -> TokenSequence<f64> {
    let f = seq.features().map(|v| v + by);
    TokenSequence::with_origin(f, seq.grid(), seq.origin_index().to_vec()).expect("same shape")
}

fn bookkeeping() -> Outcome {
    let mut chains = 0usize;
    for n in 1..=6 {
        let x1 = TokenSequence::new(rows_with(n, 0.0), (1, n)).map_err(|e| e.to_string())?;
        for m1 in masks(n) {
            let m1 = DecisionMask::new(m1);
            let acc1 = accumulate_mask(&AccumulatedMask::full(n), &m1).map_err(|e| e.to_string())?;
            if acc1.bits() != m1.bits() || acc1.popcount() != m1.retained_count() {
                return Err(format!("N={n} stage 1 accumulation wrong for {:?}", m1.bits()));
            }
            if m1.retained_count() == 0 {
                continue;
            }
            let kept1 = project_tokens(&x1, &m1).map_err(|e| e.to_string())?;
            let x2 = shifted(&kept1, 100.0);
            for m2 in masks(m1.retained_count()) {
                let m2 = DecisionMask::new(m2);
                let acc2 = accumulate_mask(&acc1, &m2).map_err(|e| e.to_string())?;
                let ctx = || format!("N={n} masks {:?} then {:?}", m1.bits(), m2.bits());
                if acc2.popcount() != m2.retained_count() {
                    return Err(format!("{}: popcount {}", ctx(), acc2.popcount()));
                }
                if acc2.bits().iter().zip(acc1.bits()).any(|(&b, &a)| b && !a) {
                    return Err(format!("{}: revived a pruned token", ctx()));
                }
                if m2.retained_count() == 0 {
                    continue;
                }
                let kept2 = project_tokens(&x2, &m2).map_err(|e| e.to_string())?;
                if kept2.origin_index() != acc2.retained_positions() {
                    return Err(format!("{}: origin index {:?}", ctx(), kept2.origin_index()));
                }
                let z = shifted(&kept2, 1000.0);
                let snaps = [
                    StageSnapshot { input: x1.clone(), mask: m1.clone() },
                    StageSnapshot { input: x2.clone(), mask: m2.clone() },
                ];
                let full = recover_sequence(&z, &snaps).map_err(|e| e.to_string())?;
                let pos = |p: usize, v: &[usize]| v.iter().position(|&q| q == p);
                let kept1_origin = kept1.origin_index().to_vec();
                for p in 0..n {
                    let want: &[f64] = if let Some(r) = pos(p, z.origin_index()) {
                        z.features().row(r)
                    } else if let Some(r) = pos(p, &kept1_origin) {
                        x2.features().row(r)
                    } else {
                        x1.features().row(p)
                    };
                    if full.features().row(p) != want {
                        return Err(format!("{}: position {p} recovered {:?}", ctx(), full.features().row(p)));
                    }
                }
                chains += 1;
            }
        }
        let all = DecisionMask::all_retained(n);
        let z = shifted(&x1, 7.0);
        let snaps = [
            StageSnapshot { input: x1.clone(), mask: all.clone() },
            StageSnapshot { input: shifted(&x1, 3.0), mask: all },
        ];
        let full = recover_sequence(&z, &snaps).map_err(|e| e.to_string())?;
        if full.features() != z.features() || full.origin_index() != z.origin_index() {
            return Err(format!("N={n}: no-op recovery is not the identity"));
        }
    }
    Ok(format!("{chains} two-stage mask chains exact, no-op recovery is the identity"))
}

fn noop_equivalence() -> Outcome {
    let cfg = SedConfig::micro();
    let mut model = SedModel::<f32>::new(cfg.clone(), 5).map_err(|e| e.to_string())?;
    with_random_heads(&mut model, 12, 0.5);
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let img = Image::random(cfg.image_size.0, cfg.image_size.1, cfg.in_channels, 200 + seed);
        let (a, ta) = model.forward(&img, &PruneMode::Disabled).map_err(|e| e.to_string())?;
        let (b, tb) = model
            .forward(&img, &PruneMode::Thresholds(vec![0.0; cfg.schedule.len()]))
            .map_err(|e| e.to_string())?;
        if ta.token_counts != tb.token_counts {
            return Err(format!("image {seed}: zero thresholds pruned tokens"));
        }
        worst = worst.max(a.max_abs_diff(&b).ok_or("shape mismatch")?);
    }
    check(
        worst <= NOOP_TOLERANCE,
        format!("10 inputs, max |diff| {worst:.2e}"),
        format!("max |diff| {worst:.2e} > {NOOP_TOLERANCE:e}"),
    )
}

const SWEEP_TRIPLETS: [[f64; 3]; 4] = [
    [0.25, 0.35, 0.45],
    [0.3, 0.4, 0.5],
    [0.35, 0.45, 0.55],
    [0.4, 0.5, 0.6],
];

fn permutations(v: [f64; 3]) -> Vec<[f64; 3]> {
    let idx = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    idx.iter().map(|p| [v[p[0]], v[p[1]], v[p[2]]]).collect()
}

fn schedule_validation() -> Outcome {
    let layers = [3, 6, 9];
    let sched = |t: [f64; 3]| PruneSchedule::new(&[(layers[0], t[0]), (layers[1], t[1]), (layers[2], t[2])]);
    let mut rejected = 0;
    for t in SWEEP_TRIPLETS {
        validate_schedule(&sched(t), 12).map_err(|e| format!("{t:?} rejected: {e}"))?;
        for p in permutations(t) {
            let Some(expected) = (1..3).find(|&i| p[i] < p[i - 1]) else {
                validate_schedule(&sched(p), 12).map_err(|e| format!("{p:?} rejected: {e}"))?;
                continue;
            };
            match validate_schedule(&sched(p), 12) {
                Err(v) if v.kind == ViolationKind::NonMonotoneThreshold && v.stage == expected + 1 => {
                    rejected += 1;
                }
                Err(v) => return Err(format!("{p:?}: reported stage {} ({:?})", v.stage, v.kind)),
                Ok(()) => return Err(format!("{p:?} accepted")),
            }
        }
    }
    Ok(format!("4 triplets accepted, {rejected} decreasing permutations rejected at the right stage"))
}

fn gradcheck() -> Outcome {
    let start = Instant::now();
    let cfg = gradcheck_config();
    let train_cfg = TrainConfig::default();
    let mut worst_tensor = 0.0f64;
    let mut worst_element = 0.0f64;
    let mut checked = 0usize;
    let mut pruned = 0usize;
    for seed in 0..5u64 {
        let mut model = SedModel::<f64>::new(cfg.clone(), seed).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        for s in 0..cfg.schedule.len() {
            let id = model.params().id(&format!("heads.{s}.weight")).expect("score head");
            *model.params_mut().get_mut(id) = Matrix::from_fn(cfg.channels, 1, |_, _| rng.random_range(-1.0..1.0));
        }
        let spec = SynthSpec {
            seed: seed + 90,
            count: 1,
            image_size: cfg.image_size,
            shapes_per_image: (1, 2),
            ..SynthSpec::default()
        };
        let sample = generate(&spec).map_err(|e| e.to_string())?.remove(0);
        let mode = PruneMode::Schedule;
        let (_, grads, trace) = loss_and_gradients(&model, &sample, &mode, &train_cfg).map_err(|e| e.to_string())?;
        if trace.token_counts.last() < Some(&cfg.tokens()) {
            pruned += 1;
        }
        let masks: Vec<DecisionMask> = trace.stages.iter().map(|s| s.mask.clone()).collect();
        let loss = |m: &SedModel<f64>| -> Result<f64, String> {
            let mut tape = GradTape::new(m.params());
            let (_, parts, t) = loss_on_tape(m, &mut tape, &sample, &mode, &train_cfg).map_err(|e| e.to_string())?;
            if t.stages.iter().map(|s| &s.mask).ne(masks.iter()) {
                return Err("a finite-difference step flipped a pruning decision".into());
            }
            Ok(parts.total)
        };
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            let analytic = grads.get(id).data().to_vec();
            let mut numeric = vec![0.0; analytic.len()];
            for (k, fd) in numeric.iter_mut().enumerate() {
                let orig = model.params().get(id).data()[k];
                model.params_mut().get_mut(id).data_mut()[k] = orig + GRADCHECK_STEP;
                let up = loss(&model)?;
                model.params_mut().get_mut(id).data_mut()[k] = orig - GRADCHECK_STEP;
                let down = loss(&model)?;
                model.params_mut().get_mut(id).data_mut()[k] = orig;
                *fd = (up - down) / (2.0 * GRADCHECK_STEP);
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                worst_tensor = worst_tensor.max(diff / norm);
            }
            for (a, b) in analytic.iter().zip(&numeric) {
                worst_element = worst_element.max((a - b).abs() / a.abs().max(b.abs()).max(GRADCHECK_FLOOR));
            }
            checked += analytic.len();
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "{checked} partials over 5 seeds ({pruned} pruned), max per-parameter rel err \
         {worst_tensor:.2e}, {secs:.1}s; info: max element-wise rel err {worst_element:.2e}"
    );
    check(
        worst_tensor <= GRADCHECK_TOLERANCE && secs <= GRADCHECK_BUDGET_S,
        summary.clone(),
        summary,
    )
}

/// Maximum matching size by exhaustive search over subsets of the right side.
fn brute_force_matching(adj: &[Vec<usize>], n_right: usize) -> usize {
    fn go(i: usize, used: u32, adj: &[Vec<usize>], memo: &mut [Vec<u8>]) -> usize {
        if i == adj.len() {
            return 0;
        }
        if memo[i][used as usize] != u8::MAX {
            return memo[i][used as usize] as usize;
        }
        let mut best = go(i + 1, used, adj, memo);
        for &j in &adj[i] {
            if used >> j & 1 == 0 {
                best = best.max(1 + go(i + 1, used | 1 << j, adj, memo));
            }
        }
        memo[i][used as usize] = best as u8;
        best
    }
    let mut memo = vec![vec![u8::MAX; 1 << n_right]; adj.len()];
    go(0, 0, adj, &mut memo)
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, count: usize) -> BinaryMap {
    let mut m = BinaryMap::empty(h, w);
    while m.count() < count.min(h * w) {
        m.set(rng.random_range(0..h), rng.random_range(0..w), true);
    }
    m
}

fn counts(matched_pred: u64, total_pred: u64, matched_gt: u64, total_gt: u64) -> MatchCounts {
    MatchCounts { matched_pred, total_pred, matched_gt, total_gt }
}

fn map_from(h: usize, w: usize, pixels: &[((usize, usize), f64)]) -> EdgeMap {
    let mut v = vec![0.0; h * w];
    for &((y, x), p) in pixels {
        v[y * w + x] = p;
    }
    EdgeMap::new(h, w, v).expect("valid map")
}

fn row_gt(h: usize, w: usize, pixels: impl IntoIterator<Item = (usize, usize)>) -> GroundTruthSet {
    let mut m = BinaryMap::empty(h, w);
    for (y, x) in pixels {
        m.set(y, x, true);
    }
    GroundTruthSet::new(vec![m]).expect("one map")
}

fn golden_two_images() -> Result<(), String> {
    // Radius 0.707 px on 5x5: only exact overlaps match.
    let cfg = EvalConfig { tolerance: 0.1, thresholds: 3, nms: false };
    let a_pred = map_from(5, 5, &[
        ((2, 0), 0.9), ((2, 1), 0.9), ((2, 2), 0.6), ((2, 3), 0.3), ((0, 0), 0.6), ((4, 4), 0.3),
    ]);
    let a_gt = row_gt(5, 5, (0..5).map(|x| (2, x)));
    let b_pred = map_from(5, 5, &[
        ((0, 1), 0.8), ((1, 1), 0.8), ((2, 1), 0.6), ((3, 1), 0.4), ((0, 4), 0.3), ((4, 0), 0.3), ((4, 4), 0.3),
    ]);
    let b_gt = row_gt(5, 5, (0..4).map(|y| (y, 1)));
    let a = evaluate_image(&a_pred, &a_gt, &cfg).map_err(|e| e.to_string())?;
    let b = evaluate_image(&b_pred, &b_gt, &cfg).map_err(|e| e.to_string())?;
    let want_a = vec![counts(4, 6, 4, 5), counts(3, 4, 3, 5), counts(2, 2, 2, 5)];
    let want_b = vec![counts(4, 7, 4, 4), counts(3, 3, 3, 4), counts(2, 2, 2, 4)];
    if a != want_a || b != want_b {
        return Err(format!("golden counts {a:?} / {b:?}"));
    }
    let per_image = BTreeMap::from([("a".to_string(), a), ("b".to_string(), b)]);
    let s = compute_metrics(&per_image, &cfg.threshold_values()).map_err(|e| e.to_string())?;
    // Pooled F: 8/11, 3/4, 8/13; image optima at 1/4 (A) and 1/2 (B) -> P = R = 7/9.
    let ap = 4.0 / 9.0 + (2.0 / 9.0) * (6.0 / 7.0) + (2.0 / 9.0) * (8.0 / 13.0);
    let close = |x: f64, y: f64| (x - y).abs() <= GOLDEN_TOLERANCE;
    if !(close(s.ods, 0.75) && close(s.ods_threshold, 0.5) && close(s.ois, 7.0 / 9.0) && close(s.ap, ap)) {
        return Err(format!("golden summary ods {} ois {} ap {}", s.ods, s.ois, s.ap));
    }
    Ok(())
}

const DATASETS: u64 = 200;

/// A dense, perfectly predicted image next to a sparse one whose own optimum
/// adds many false positives to the pool.
fn pooled_counterexample() -> Result<(f64, f64), String> {
    let per_image = BTreeMap::from([
        ("dense".to_string(), vec![counts(100, 100, 100, 100), counts(100, 100, 100, 100)]),
        ("sparse".to_string(), vec![counts(2, 20, 2, 2), counts(0, 0, 0, 2)]),
    ]);
    let s = compute_metrics(&per_image, &[0.25, 0.75]).map_err(|e| e.to_string())?;
    if s.ods <= s.ois {
        return Err(format!("counterexample no longer applies: ods {} ois {}", s.ods, s.ois));
    }
    Ok((s.ods, s.ois))
}

fn evaluator_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..50 {
        let (h, w) = (rng.random_range(3..=8), rng.random_range(3..=8));
        let (np, ng) = (rng.random_range(0..=15), rng.random_range(1..=15));
        let pred = random_map(&mut rng, h, w, np);
        let gt = random_map(&mut rng, h, w, ng);
        let radius: f64 = rng.random_range(0.5..3.0);
        let tol = radius / ((h * h + w * w) as f64).sqrt();
        let pg = gt.pixels();
        let adj: Vec<Vec<usize>> = pred
            .pixels()
            .iter()
            .map(|&(y, x)| {
                (0..pg.len())
                    .filter(|&j| {
                        let (dy, dx) = (y as f64 - pg[j].0 as f64, x as f64 - pg[j].1 as f64);
                        dy * dy + dx * dx <= radius * radius
                    })
                    .collect()
            })
            .collect();
        let best = brute_force_matching(&adj, pg.len()) as u64;
        let gts = GroundTruthSet::new(vec![gt.clone()]).map_err(|e| e.to_string())?;
        let c = match_edges(&pred, &gts, tol).map_err(|e| e.to_string())?;
        let want = counts(best, pred.count() as u64, best, gt.count() as u64);
        if c != want {
            return Err(format!("instance {case}: {c:?} vs brute force {want:?}"));
        }
    }

    let (_, test) = generate_splits(&SynthSpec::default(), 50).map_err(|e| e.to_string())?;
    let perfect = EvalConfig { tolerance: BENCHMARK_TOLERANCE, thresholds: 99, nms: false };
    let mut acc = BTreeMap::new();
    for s in &test {
        let u = s.gt.union();
        let values = u.bits().iter().map(|&b| f64::from(u8::from(b))).collect();
        let map = EdgeMap::new(u.height(), u.width(), values).map_err(|e| e.to_string())?;
        acc.insert(s.id.clone(), evaluate_image(&map, &s.gt, &perfect).map_err(|e| e.to_string())?);
    }
    let p = compute_metrics(&acc, &perfect.threshold_values()).map_err(|e| e.to_string())?;
    if (p.ods, p.ois, p.ap) != (1.0, 1.0, 1.0) {
        return Err(format!("perfect predictions scored ods {} ois {} ap {}", p.ods, p.ois, p.ap));
    }

    golden_two_images()?;
    Ok("50/50 matchings optimal, perfect map scores 1/1/1, two-image golden exact".into())
}

/// OIS pools the counts of each image's own optimum, so it does not bound
/// ODS from above in general; the count of violating datasets is reported.
fn ods_within_ois() -> Outcome {
    let ods_ois = EvalConfig { tolerance: END_TO_END_TOLERANCE, thresholds: 19, nms: false };
    let mut worst_gap = 0.0f64;
    let mut violations = 0;
    for d in 0..DATASETS {
        let spec = SynthSpec { seed: 500 + d, count: 5, image_size: (32, 32), ..SynthSpec::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(d);
        let quality: f64 = rng.random_range(0.2..0.9);
        let mut acc = BTreeMap::new();
        for s in generate(&spec).map_err(|e| e.to_string())? {
            let u = s.gt.union();
            let values = u
                .bits()
                .iter()
                .map(|&b| ((1.0 - quality) * rng.random::<f64>() + if b { quality } else { 0.0 }).min(1.0))
                .collect();
            let map = EdgeMap::new(u.height(), u.width(), values).map_err(|e| e.to_string())?;
            acc.insert(s.id.clone(), evaluate_image(&map, &s.gt, &ods_ois).map_err(|e| e.to_string())?);
        }
        let s = compute_metrics(&acc, &ods_ois.threshold_values()).map_err(|e| e.to_string())?;
        worst_gap = worst_gap.max(s.ods - s.ois);
        violations += usize::from(s.ods > s.ois);
    }
    let (ods, ois) = pooled_counterexample()?;
    let detail = format!(
        "{violations}/{DATASETS} random scene datasets with ODS > OIS (max excess {worst_gap:.2e}); \
         two-image counterexample ODS {ods:.3} > OIS {ois:.3}"
    );
    check(violations == 0, detail.clone(), detail)
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let (train_set, test_set) = generate_splits(&SynthSpec::default(), 50).map_err(|e| e.to_string())?;
    let config = SedConfig::micro_three_stage();
    let mut model = SedModel::<f32>::new(config.clone(), 7).map_err(|e| e.to_string())?;
    let train_cfg = TrainConfig { iterations: 2000, ..TrainConfig::default() };
    let history = train(&train_cfg, &train_set, &mut model, &mut NoObserver).map_err(|e| e.to_string())?;
    let mean = |r: &[amped::train::LossReport]| r.iter().map(|x| x.final_term).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&history[..100]), mean(&history[history.len() - 100..]));

    let run = |thresholds: Option<[f64; 3]>, tol: f64| -> Result<(f64, f64), String> {
        let eval = EvalConfig { tolerance: tol, ..EvalConfig::default() };
        let mode = thresholds.map_or(PruneMode::Disabled, |t| PruneMode::Thresholds(t.to_vec()));
        let r = evaluate_model(&model, &test_set, &mode, &eval).map_err(|e| e.to_string())?;
        Ok((r.summary.ods, r.mean_macs()))
    };
    let (base_ods, base_macs) = run(None, END_TO_END_TOLERANCE)?;
    let (low_ods, low_macs) = run(Some([0.3, 0.4, 0.5]), END_TO_END_TOLERANCE)?;
    let (high_ods, high_macs) = run(Some([0.4, 0.5, 0.6]), END_TO_END_TOLERANCE)?;
    let reduction = |m: f64| 100.0 * (1.0 - m / base_macs);
    let (info_base, _) = run(None, BENCHMARK_TOLERANCE)?;
    let (info_low, _) = run(Some([0.3, 0.4, 0.5]), BENCHMARK_TOLERANCE)?;
    let secs = start.elapsed().as_secs_f64();
    println!(
        "  info: at tolerance {BENCHMARK_TOLERANCE} (sub-pixel on 64x64) unpruned ODS {info_base:.4}, \
         [0.3,0.4,0.5] ODS {info_low:.4}"
    );
    let drop = base_ods - low_ods;
    let summary = format!(
        "tolerance {END_TO_END_TOLERANCE}: unpruned ODS {base_ods:.4}; [0.3,0.4,0.5] ODS {low_ods:.4} \
         (drop {drop:.4}), reduction {:.2}%; [0.4,0.5,0.6] ODS {high_ods:.4}, reduction {:.2}%; \
         final loss {first:.1} -> {last:.1}; {secs:.0}s",
        reduction(low_macs),
        reduction(high_macs),
    );
    check(
        base_ods >= MIN_ODS
            && reduction(low_macs) >= MIN_REDUCTION_PCT
            && drop <= MAX_ODS_DROP
            && high_macs < low_macs
            && last < first
            && secs <= END_TO_END_BUDGET_S,
        summary.clone(),
        summary,
    )
}

fn out_of_scope_statement() -> Outcome {
    let header = "schedule,ods,ois,ap,macs,reduction_pct";
    Ok(format!(
        "benchmark accuracy of full-scale detectors (for example ODS 0.865 on BSDS500) needs \
         pretrained ViT/SAM backbones and the full datasets and is not reproduced here; only the \
         report formats are (`amped prune-sweep` writes `{header}`, `amped eval` writes ODS/OIS/AP \
         and the PR curve)"
    ))
}

fn main() -> ExitCode {
    // The last field marks a check whose property is not a theorem under the
    // metric definitions; its failure is reported but does not fail the run.
    let criteria: [(&str, &str, fn() -> Outcome, bool); 11] = [
        ("1", "cost anchors", flop_anchor, false),
        ("2", "instrumented MACs equal analytic MACs", instrumented_equals_analytic, false),
        ("3", "pruned attention equals masked attention", pruned_attention_oracle, false),
        ("4", "mask accumulation and recovery bookkeeping", bookkeeping, false),
        ("5", "zero thresholds reproduce the unpruned pass", noop_equivalence, false),
        ("6", "schedule validation", schedule_validation, false),
        ("7", "gradients match finite differences", gradcheck, false),
        ("8", "evaluator oracle", evaluator_oracle, false),
        ("8", "ODS <= OIS on random datasets", ods_within_ois, true),
        ("9", "end-to-end pruning trade-off", end_to_end, false),
        ("10", "scope statement", out_of_scope_statement, false),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, name, f, known) in criteria {
        if !filter.is_empty() && !filter.iter().any(|a| a == n) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {msg}"),
            Err(msg) if known => {
                println!("criterion {n} ({name}): FAIL, not a theorem, not counted [{secs:.1}s] {msg}")
            }
            Err(msg) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {msg}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
