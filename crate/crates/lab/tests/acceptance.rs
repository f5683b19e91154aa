//! Acceptance suite: one pass/fail line per criterion, non-zero exit if any fails.
//!
//! Runs with `cargo test --release -p groundlab --test acceptance`; set
//! `GROUNDLAB_ACCEPT_SKIP_BENCH=1` to skip the training benchmark (criteria 6 to 9).

use std::collections::BTreeMap;
use std::process::Command;
use std::time::{Duration, Instant};

use groundlab_core::backbone::{Backbone, BackboneConfig};
use groundlab_core::encoders::SequenceEncoder;
use groundlab_core::gradcheck::{check_gradients, GradCheck, GradCheckReport};
use groundlab_core::grounding::{attention_scores, gumbel_indicator, sample_gumbel, GroundingHeads};
use groundlab_core::harness::{train, RunConfig, RunStatus};
use groundlab_core::intervention::{compose, e_intervention, i_intervention, MixCoefficients};
use groundlab_core::metrics::random_iou_baseline;
use groundlab_core::models::{Method, ModelConfig};
use groundlab_core::objectives::{
    causal_loss, consistency_loss, eigv_objective, environment_loss, igv_objective, info_nce, soft_cross_entropy,
    LossWeights, PredictionDistribution,
};
use groundlab_core::rationalizer::{hard_topk, perturbed_hard_samples, perturbed_topk, Rationalizer, RationalizerConfig};
use groundlab_core::rng::{self, normal_matrix};
use groundlab_core::synthgen::{generate_dataset, GenConfig, Split};
use groundlab_core::{Matrix, ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn probs(tape: &mut Tape<'_>, p: &[f64]) -> PredictionDistribution {
    let v = tape.constant(Matrix::row_vector(p.to_vec()));
    PredictionDistribution::from_probs(tape, v)
}

fn gumbel_indicator_draws() -> Outcome {
    let started = Instant::now();
    let store = ParamStore::new();
    let mut r = rng::stream(1, &[]);
    let (mut bad_hard, mut worst_soft) = (0usize, 0.0f64);
    for draw in 0..10_000 {
        let mut t = Tape::new(&store);
        let k = 1 + draw % 16;
        let pc = softmax_row(&normal_matrix(1, k, 2.0, &mut r));
        let pe = softmax_row(&normal_matrix(1, k, 2.0, &mut r));
        let scores = groundlab_core::grounding::AttentionScores { p_c: t.constant(pc), p_e: t.constant(pe) };
        let noise = sample_gumbel(k, &mut r);
        let temperature = r.random_range(0.1..2.0);
        let hard = gumbel_indicator(&mut t, &scores, temperature, true, &noise).unwrap();
        let h = t.value(hard.value);
        for row in 0..k {
            let (a, b) = (h.get(row, 0), h.get(row, 1));
            if !((a == 1.0 && b == 0.0) || (a == 0.0 && b == 1.0)) {
                bad_hard += 1;
            }
        }
        let s = t.value(hard.soft);
        for row in 0..k {
            worst_soft = worst_soft.max((s.get(row, 0) + s.get(row, 1) - 1.0).abs());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        bad_hard == 0 && worst_soft <= 1e-6 && secs < 5.0,
        format!("{bad_hard} non-one-hot hard rows, max soft row error {worst_soft:.2e}, {secs:.2}s"),
    )
}

fn softmax_row(m: &Matrix) -> Matrix {
    Matrix::row_vector(groundlab_core::autodiff::softmax(m.data()))
}

/// Replaces every parameter (biases included) with a fresh Gaussian draw so no
/// rectifier sits exactly on its kink.
fn randomize(store: &mut ParamStore, r: &mut impl Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let (rows, cols) = store.get(id).shape();
        *store.get_mut(id) = normal_matrix(rows, cols, 0.5, r);
    }
}

fn gradient_oracle() -> Outcome {
    let mut failures: Vec<String> = Vec::new();
    let mut worst = 0.0f64;
    let mut record = |name: &str, case: usize, report: GradCheckReport| {
        worst = worst.max(report.max_rel_error);
        if !report.passed() {
            failures.push(format!("{name}#{case}: {:?}", report.mismatches.first()));
        }
    };
    let strict = GradCheck::default();
    let composite = GradCheck::with_rtol(1e-3);
    for case in 0..20u64 {
        let mut r = rng::stream(200 + case, &[]);
        let (k, l, d, a) = (r.random_range(2..5), r.random_range(1..4), r.random_range(2..4), r.random_range(2..5));
        let h = 2 * r.random_range(1..3);

        let mut store = ParamStore::new();
        let heads = GroundingHeads::new(&mut store, "g", d, d, &[3], 3, &mut r);
        randomize(&mut store, &mut r);
        let v = normal_matrix(k, d, 1.0, &mut r);
        let q = normal_matrix(1, d, 1.0, &mut r);
        let w = normal_matrix(2, k, 1.0, &mut r);
        record("attention_scores", case as usize, check_gradients(&store, &[v.clone(), q, w], strict, |t, x| {
            let s = attention_scores(t, &heads, x[0], x[1]).unwrap();
            let wc = t.slice_rows(x[2], 0, 1);
            let we = t.slice_rows(x[2], 1, 1);
            let a = t.mul(s.p_c, wc);
            let b = t.mul(s.p_e, we);
            let a = t.sum(a);
            let b = t.sum(b);
            t.add(a, b)
        }));

        let empty = ParamStore::new();
        let answer = r.random_range(0..a);
        let logits = [normal_matrix(1, a, 1.0, &mut r), normal_matrix(1, a, 1.0, &mut r), normal_matrix(1, a, 1.0, &mut r)];
        let target = softmax_row(&normal_matrix(1, a, 1.0, &mut r));
        let weights = LossWeights { igv_lambda1: r.random_range(0.0..2.0), igv_lambda2: r.random_range(0.0..2.0), beta: 0.75 };
        let mut inputs = logits.to_vec();
        inputs.push(target);
        record("losses", case as usize, check_gradients(&empty, &inputs, strict, |t, x| {
            let p0 = PredictionDistribution::from_logits(t, x[0]);
            let p1 = PredictionDistribution::from_logits(t, x[1]);
            let p2 = PredictionDistribution::from_logits(t, x[2]);
            let lc = causal_loss(t, &p0, answer).unwrap();
            let le = environment_loss(t, &p1).unwrap();
            let lv = consistency_loss(t, &p2, &p0).unwrap();
            let igv = igv_objective(t, lc, le, lv, &weights);
            let soft = soft_cross_entropy(t, &p1, x[3]).unwrap();
            let nce = info_nce(t, p0.probs, p1.probs, &[p2.probs, x[3]]).unwrap();
            let eigv = eigv_objective(t, soft, nce, weights.beta);
            t.add(igv, eigv)
        }));

        let mut store = ParamStore::new();
        let enc = SequenceEncoder::new(&mut store, "enc", d, h / 2, &mut r);
        randomize(&mut store, &mut r);
        let seq = normal_matrix(k, d, 1.0, &mut r);
        let wl = normal_matrix(k, h, 1.0, &mut r);
        let wg = normal_matrix(1, h, 1.0, &mut r);
        record("encoders", case as usize, check_gradients(&store, &[seq, wl, wg], strict, |t, x| {
            let e = enc.encode(t, x[0]).unwrap();
            let a = t.mul(e.local, x[1]);
            let b = t.mul(e.global, x[2]);
            let a = t.sum(a);
            let b = t.sum(b);
            t.add(a, b)
        }));

        let mut store = ParamStore::new();
        let enc = SequenceEncoder::new(&mut store, "enc", d, h / 2, &mut r);
        let bb = Backbone::new(&mut store, "bb", BackboneConfig::new(h, a), &mut r);
        randomize(&mut store, &mut r);
        let clips = normal_matrix(k, d, 1.0, &mut r);
        let tokens = normal_matrix(l, d, 1.0, &mut r);
        let wa = normal_matrix(1, a, 1.0, &mut r);
        record("backbone.predict", case as usize, check_gradients(&store, &[clips, tokens, wa], composite, |t, x| {
            let q = enc.encode(t, x[1]).unwrap();
            let p = bb.predict(t, &enc, x[0], &q).unwrap();
            let y = t.mul(p.log_probs, x[2]);
            t.sum(y)
        }));

        let mut store = ParamStore::new();
        let m = Rationalizer::new(&mut store, "tr", RationalizerConfig::new(d, h, a), &mut r);
        randomize(&mut store, &mut r);
        let cands = normal_matrix(a, h, 1.0, &mut r);
        let memory = normal_matrix(k + l, h, 1.0, &mut r);
        let wo = normal_matrix(1, a, 1.0, &mut r);
        record("decoders", case as usize, check_gradients(&store, &[cands, memory, wo], strict, |t, x| {
            let mc = m.decode_mc(t, x[0], x[1]);
            let oe = m.decode_oe(t, x[1]);
            let mc = t.log_softmax_rows(mc);
            let y = t.mul(oe, x[2]);
            let mc = t.sum(mc);
            let y = t.sum(y);
            t.add(mc, y)
        }));
    }
    let detail = match failures.first() {
        None => format!("5 groups x 20 instances, max relative error {worst:.2e}"),
        Some(f) => format!("{} failing checks, first {f}", failures.len()),
    };
    outcome(failures.is_empty(), detail)
}

fn loss_oracles() -> Outcome {
    let store = ParamStore::new();
    let mut t = Tape::new(&store);
    let one_hot = probs(&mut t, &[1.0, 0.0, 0.0, 0.0]);
    let le = environment_loss(&mut t, &one_hot).unwrap();
    let le = t.scalar(le);
    let a = t.constant(Matrix::row_vector(vec![0.3, 0.7]));
    let b = t.constant(Matrix::row_vector(vec![0.6, 0.2]));
    let nce = info_nce(&mut t, a, b, &[b]).unwrap();
    let nce = t.scalar(nce);
    let p = probs(&mut t, &[0.5, 0.5]);
    let q = probs(&mut t, &[0.9, 0.1]);
    let lv = consistency_loss(&mut t, &p, &q).unwrap();
    let lv = t.scalar(lv);
    let ln4 = 4f64.ln();
    let ln2 = 2f64.ln();
    outcome(
        (le - ln4).abs() <= 1e-8 && (nce - ln2).abs() <= 1e-8 && (lv - 0.5108).abs() <= 1e-4,
        format!("environment {le:.10} (ln 4), info_nce {nce:.10} (ln 2), consistency {lv:.6} (0.5108)"),
    )
}

fn mixing_identities() -> Outcome {
    let store = ParamStore::new();
    let mut r = rng::stream(4, &[]);
    let mut worst = 0.0f64;
    let mut t = Tape::new(&store);
    for _ in 0..100 {
        let m: Vec<_> = (0..6).map(|_| t.constant(normal_matrix(3, 4, 1.0, &mut r))).collect();
        let mixed = e_intervention(&mut t, m[0], m[1], m[2], m[3], m[4], m[5], 1.0).unwrap();
        let e = i_intervention(&mut t, m[0], m[3], 1.0).unwrap();
        for (got, want) in [(mixed.c_star, m[0]), (mixed.q_star, m[1]), (mixed.a_star, m[2]), (e, m[0])] {
            worst = worst.max(t.value(got).max_abs_diff(t.value(want)));
        }
        let v = compose(&mut t, mixed.c_star, e).unwrap();
        let doubled = t.scale(m[0], 2.0);
        worst = worst.max(t.value(v).max_abs_diff(t.value(doubled)));
    }
    let mut bad = 0;
    for _ in 0..1000 {
        let mut t = Tape::new(&store);
        let coeffs = MixCoefficients::sample(1.0, &mut r).unwrap();
        let i = r.random_range(0..4);
        let j = r.random_range(0..4);
        let a1 = t.constant(Matrix::one_hot(4, i));
        let a2 = t.constant(Matrix::one_hot(4, j));
        let z = t.constant(Matrix::zeros(1, 4));
        let mixed = e_intervention(&mut t, z, z, a1, z, z, a2, coeffs.lambda0).unwrap();
        let a = t.value(mixed.a_star);
        if !(a.data().iter().all(|&x| (0.0..=1.0).contains(&x)) && (a.sum() - 1.0).abs() < 1e-12) {
            bad += 1;
        }
    }
    outcome(worst <= 1e-7 && bad == 0, format!("max identity error {worst:.1e}, {bad}/1000 invalid a*"))
}

fn perturbed_topk_checks() -> Outcome {
    let (n, k, sigma) = (16, 5, 1e-3);
    let store = ParamStore::new();
    let mut r = rng::stream(5, &[]);
    let (mut agree, mut bad_samples, mut worst_mass) = (0, 0, 0.0f64);
    for _ in 0..1000 {
        let mut scores: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 + r.random_range(0.0..0.05)).collect();
        scores.shuffle(&mut r);
        let noise = normal_matrix(500, n, 1.0, &mut r);
        let hard = perturbed_hard_samples(&scores, k, sigma, &noise);
        bad_samples += (0..hard.rows()).filter(|&s| hard.row(s).iter().sum::<f64>() != k as f64).count();

        let mut t = Tape::new(&store);
        let s = t.constant(Matrix::row_vector(scores.clone()));
        let m = perturbed_topk(&mut t, s, k, sigma, 500, &mut r).unwrap();
        let mask = t.value(m).data().to_vec();
        worst_mass = worst_mass.max((mask.iter().sum::<f64>() - k as f64).abs());
        let mut a = hard_topk(&mask, k);
        let mut b = hard_topk(&scores, k);
        a.sort_unstable();
        b.sort_unstable();
        agree += usize::from(a == b);
    }
    outcome(
        agree >= 990 && bad_samples == 0 && worst_mass <= 0.05,
        format!("agreement {agree}/1000, {bad_samples} hard samples off K, worst |sum - K| {worst_mass:.2e}"),
    )
}

fn decoder_equivariance() -> Outcome {
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let mut r = rng::stream(600 + case, &[]);
        let (d, a, m) = (r.random_range(2..7), r.random_range(2..7), r.random_range(1..8));
        let mut store = ParamStore::new();
        let model = Rationalizer::new(&mut store, "tr", RationalizerConfig::new(d, d, a), &mut r);
        let mut t = Tape::new(&store);
        let cands = normal_matrix(a, d, 1.0, &mut r);
        let memory = t.constant(normal_matrix(m, d, 1.0, &mut r));
        let mut perm: Vec<usize> = (0..a).collect();
        perm.shuffle(&mut r);
        let x = t.constant(cands.clone());
        let y = t.constant(cands.select_rows(&perm));
        let lx = model.decode_mc(&mut t, x, memory);
        let ly = model.decode_mc(&mut t, y, memory);
        for (i, &p) in perm.iter().enumerate() {
            worst = worst.max((t.value(ly).get(0, i) - t.value(lx).get(0, p)).abs());
        }
    }
    outcome(worst <= 1e-6, format!("max deviation {worst:.1e} over 100 cases"))
}

// Benchmark for criteria 6 to 9.
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const BENCH_EPOCHS: usize = 16;
const BENCH_HIDDEN: usize = 32;
const BENCH_ENV_SCALE: f64 = 0.7;
const BENCH_DISTRACTOR_SIGMA: f64 = 2.0;
// Environment-loss weight; the default 1.0 inverts grounding in this regime.
const BENCH_LAMBDA1: f64 = 0.1;
const METHOD_BUDGET: Duration = Duration::from_secs(600);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Arm {
    Erm,
    Igv,
    Eigv,
    CausalOnly,
}

fn bench_config(arm: Arm, seed: u64) -> RunConfig {
    let data = GenConfig {
        bias_rho: 0.9,
        seed,
        env_scale: BENCH_ENV_SCALE,
        distractor_sigma: BENCH_DISTRACTOR_SIGMA,
        ..Default::default()
    };
    let mut model = ModelConfig { hidden: BENCH_HIDDEN, ..Default::default() };
    model.weights.igv_lambda1 = BENCH_LAMBDA1;
    let method = match arm {
        Arm::Erm => Method::Erm,
        Arm::Igv => Method::Igv,
        Arm::Eigv => Method::Eigv,
        Arm::CausalOnly => {
            model.weights.igv_lambda1 = 0.0;
            model.weights.igv_lambda2 = 0.0;
            Method::Igv
        }
    };
    RunConfig { method, seed, epochs: BENCH_EPOCHS, data, model, ..Default::default() }
}

#[derive(Default)]
struct ArmResult {
    iid: Vec<f64>,
    ood: Vec<f64>,
    ood_iou: Vec<f64>,
    elapsed: Duration,
    diverged: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn run_benchmark() -> BTreeMap<Arm, ArmResult> {
    let mut results = BTreeMap::new();
    for arm in [Arm::Erm, Arm::Igv, Arm::Eigv, Arm::CausalOnly] {
        let mut res = ArmResult::default();
        for seed in SEEDS {
            let cfg = bench_config(arm, seed);
            let data = generate_dataset(&cfg.data).unwrap();
            assert_eq!(data.train.len(), 2000);
            let started = Instant::now();
            let out = train(&cfg, &data, |_| {}).unwrap();
            res.elapsed += started.elapsed();
            if out.record.status != RunStatus::Completed {
                res.diverged += 1;
                continue;
            }
            let get = |s: Split| out.record.final_metric(s).unwrap();
            res.iid.push(get(Split::TestIid).accuracy.unwrap());
            let ood = get(Split::TestOod);
            res.ood.push(ood.accuracy.unwrap());
            if let Some(g) = ood.grounding {
                res.ood_iou.push(g.iou);
            }
        }
        eprintln!(
            "  {arm:?}: iid {:.4} ood {:.4} iou {:.4} ({:.0}s, {} diverged)",
            mean(&res.iid),
            mean(&res.ood),
            mean(&res.ood_iou),
            res.elapsed.as_secs_f64(),
            res.diverged
        );
        results.insert(arm, res);
    }
    results
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(
        &cfg,
        "method = \"igv\"\nepochs = 2\nbatch_size = 16\n[data]\nnum_videos = 100\nclips = 6\nfeature_dim = 8\nquestion_len = 3\ncausal_span = [2, 3]\n[model]\nhidden = 8\nbank_capacity = 64\n",
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_groundlab");
    let pipeline = |tag: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let root = tmp.path().join(tag);
        let data = root.join("data");
        let exec = |args: &[&str]| -> Result<Vec<u8>, String> {
            let out = Command::new(bin).env("GROUNDLAB_OUT", &root).args(args).output().map_err(|e| e.to_string())?;
            if out.status.success() { Ok(out.stdout) } else { Err(String::from_utf8_lossy(&out.stderr).into_owned()) }
        };
        let cfg = cfg.to_str().unwrap();
        exec(&["generate", "--config", cfg, "--out", data.to_str().unwrap()])?;
        let set = format!("dataset={:?}", data.to_str().unwrap());
        exec(&["train", "--config", cfg, "--set", &set, "--quiet", "--name", "run"])?;
        let eval = exec(&["eval", "--checkpoint", root.join("run").to_str().unwrap(), "--split", "test_ood"])?;
        let metrics = std::fs::read(root.join("run").join("metrics.jsonl")).map_err(|e| e.to_string())?;
        Ok((metrics, eval))
    };
    match (pipeline("a"), pipeline("b")) {
        (Ok(a), Ok(b)) => {
            let lines = String::from_utf8_lossy(&a.0).lines().count();
            outcome(a == b && lines == 2, format!("{lines} epoch lines, metrics and eval output identical: {}", a == b))
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("pipeline failed: {e}")),
    }
}

fn main() {
    // libtest-style flags forwarded by `cargo test` are ignored.
    let skip_bench = std::env::var_os("GROUNDLAB_ACCEPT_SKIP_BENCH").is_some();
    let mut lines: Vec<(usize, &str, Outcome)> = vec![
        (1, "Gumbel indicator draws", gumbel_indicator_draws()),
        (2, "Gradient oracle", gradient_oracle()),
        (3, "Loss oracles", loss_oracles()),
        (4, "Mixing identities", mixing_identities()),
        (5, "Perturbed Top-K", perturbed_topk_checks()),
    ];
    if skip_bench {
        eprintln!("criteria 6-9 skipped (GROUNDLAB_ACCEPT_SKIP_BENCH set)");
    } else {
        let res = run_benchmark();
        let (erm, igv, eigv, lc) = (&res[&Arm::Erm], &res[&Arm::Igv], &res[&Arm::Eigv], &res[&Arm::CausalOnly]);
        // The CPU budget covers the two methods compared by criterion 6.
        let within_budget = [erm, igv].iter().all(|r| r.elapsed <= METHOD_BUDGET && r.diverged == 0);
        let slowest = erm.elapsed.max(igv.elapsed).as_secs_f64();
        let (erm_iid, erm_ood, igv_ood) = (mean(&erm.iid), mean(&erm.ood), mean(&igv.ood));
        lines.push((
            6,
            "Synthetic OOD gap",
            outcome(
                erm_iid - erm_ood >= 0.05 && igv_ood - erm_ood >= 0.05 && within_budget,
                format!(
                    "ERM iid {erm_iid:.4} ood {erm_ood:.4} (gap {:+.4}); IGV ood {igv_ood:.4} ({:+.4} over ERM); slowest of ERM/IGV {slowest:.0}s",
                    erm_iid - erm_ood,
                    igv_ood - erm_ood
                ),
            ),
        ));
        let shape = bench_config(Arm::Igv, 0).data;
        let f = (shape.causal_span.0 + shape.causal_span.1) as f64 / 2.0 / shape.clips as f64;
        let baseline = random_iou_baseline(shape.clips, shape.causal_span, f);
        let iou = mean(&igv.ood_iou);
        lines.push((
            7,
            "Grounding recovery",
            outcome(iou - baseline >= 0.2, format!("IGV IoU {iou:.4} vs random baseline {baseline:.4} (margin {:+.4})", iou - baseline)),
        ));
        let eigv_ood = mean(&eigv.ood);
        lines.push((
            8,
            "EIGV direction",
            outcome(eigv_ood >= igv_ood - 0.01, format!("EIGV ood {eigv_ood:.4} vs IGV ood {igv_ood:.4}")),
        ));
        let lc_ood = mean(&lc.ood);
        lines.push((
            9,
            "Loss ablation ordering",
            outcome(lc_ood <= igv_ood, format!("L_c-only ood {lc_ood:.4} vs full IGV ood {igv_ood:.4}")),
        ));
    }
    lines.push((10, "Decoder permutation equivariance", decoder_equivariance()));
    lines.push((11, "Reproducibility", reproducibility()));

    let mut failed = 0;
    for (id, name, o) in &lines {
        println!("[{}] criterion {id:>2} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
