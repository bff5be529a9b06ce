//! One PASS/FAIL line per acceptance criterion. The property suites run in
//! seconds; the desk-scale runs train the shipped configs end to end (a few
//! minutes on one core with the optimized test profile).

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use lsa_core::contrastive::nt_xent;
use lsa_core::cotrain::{vote_noisy, CotrainStrategy};
use lsa_core::detectors::{
    apply_separator, auroc, auroc_brute_force, fit_gmm_1d, fit_linear_separator, CleanScores, ScoreOrigin,
    SeparatorOptions,
};
use lsa_core::harness::{self, ExperimentConfig, Report, Run, DET_NONE, DET_ORACLE, DET_PLS, DET_W};
use lsa_core::image::Image;
use lsa_core::nn::{EncoderSpec, Mode, Network};
use lsa_core::pls::{batch_step, guess_label, loss_ssl, Batch, EpochPlan, LossWeights, SslWeighting};
use lsa_core::probe::FeatureMatrix;
use lsa_core::schedule::{active_scores, ActiveDetector, CombinationStrategy, StrategyKind};
use lsa_core::synth::{self, SynthSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(results: &mut Vec<(u32, bool)>, id: u32, title: &str, o: Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    // libtest only captures the print macros; this reaches the terminal
    let _ = writeln!(std::io::stderr(), "{tag} {id:>2} {title}: {}", o.detail);
    results.push((id, o.pass));
}

// ---------------------------------------------------------------------------
// 1

fn auroc_matches_brute_force() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for inst in 0..100 {
        let n = r.random_range(2..=200);
        // coarse grid so ties are common
        let levels = r.random_range(2..=20);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
        let mut clean: Vec<bool> = (0..n).map(|_| r.random_bool(0.6)).collect();
        clean[0] = true;
        clean[1] = false;
        let fast = auroc(&scores, &clean).unwrap();
        let slow = auroc_brute_force(&scores, &clean).unwrap();
        if fast != slow {
            return outcome(false, format!("instance {inst} (n={n}): {fast} != {slow}"));
        }
        checked += 1;
    }
    outcome(true, format!("{checked} instances identical"))
}

// ---------------------------------------------------------------------------
// 2

fn gmm_em() -> Outcome {
    let mut worst_err: f64 = 0.0;
    for seed in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let lo = Normal::new(0.2, 0.01).unwrap();
        let hi = Normal::new(0.8, 0.01).unwrap();
        let w = r.random_range(0.3..0.7);
        let xs: Vec<f64> = (0..400)
            .map(|_| if r.random_bool(w) { lo.sample(&mut r) } else { hi.sample(&mut r) })
            .collect();
        let fit = fit_gmm_1d(&xs, 1e-10, 500, seed).unwrap();
        for (i, pair) in fit.log_likelihood.windows(2).enumerate() {
            if pair[1] < pair[0] - 1e-9 * pair[0].abs().max(1.0) {
                return outcome(false, format!("seed {seed}: log-likelihood fell at iteration {}", i + 1));
            }
        }
        let (a, b) = fit.range;
        let raw = |m: f64| a + m * (b - a);
        let means = [raw(fit.model.means[0]), raw(fit.model.means[1])];
        let err = (means[0] - 0.2).abs().max((means[1] - 0.8).abs());
        worst_err = worst_err.max(err);
        if err > 0.02 {
            return outcome(false, format!("seed {seed}: means {:.4}, {:.4}", means[0], means[1]));
        }
    }
    outcome(true, format!("monotone over 20 seeds, worst mean error {worst_err:.5}"))
}

// ---------------------------------------------------------------------------
// 3

fn tiny() -> (Network, Vec<Image>, Vec<usize>) {
    let spec = SynthSpec {
        num_classes: 3,
        train_per_class: 4,
        test_per_class: 1,
        image_size: 16,
        ..Default::default()
    };
    let data = synth::clean_train_set(&spec).unwrap();
    let net = Network::new(
        EncoderSpec {
            image_size: 16,
            num_classes: 3,
            ..Default::default()
        },
        5,
    )
    .unwrap();
    (
        net,
        data.iter().map(|d| d.image.clone()).collect(),
        data.iter().map(|d| d.label).collect(),
    )
}

fn one_hot(labels: &[usize], k: usize) -> Vec<f64> {
    let mut t = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        t[i * k + l] = 1.0;
    }
    t
}

fn scrambled(like: &Image, seed: u64) -> Image {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut im = like.clone();
    im.pixels.iter_mut().for_each(|v| *v = r.random::<f32>());
    im
}

fn loss_gating() -> Outcome {
    let (net, imgs, labels) = tiny();
    let n = imgs.len();
    let rows: Vec<usize> = (0..n).collect();
    let batch = |imgs: &[Image], strong: &[Image], targets: Vec<f64>| Batch {
        rows: &rows,
        sup_images: imgs.to_vec(),
        sup_targets: targets,
        strong_images: strong.to_vec(),
        mix: None,
    };
    let strong: Vec<Image> = imgs.iter().map(lsa_core::augment::hflip).collect();
    let teacher = guess_label(&net, &imgs).unwrap();
    let only_sup = LossWeights { sup: 1.0, ssl: 0.0, cont: 0.0 };
    let only_ssl = LossWeights { sup: 0.0, ssl: 1.0, cont: 0.0 };
    let grads = |b: &Batch, plan: &EpochPlan, w: LossWeights| batch_step(&net, b, &labels, plan, w, 1.0).unwrap().grads;
    let mut fails = Vec::new();

    // s = 0: the sample's image and target cannot move the L_sup gradient
    let mut s = vec![1.0; n];
    s[2] = 0.0;
    let plan = EpochPlan::new(s, vec![0.5; n], teacher.clone(), SslWeighting::NoisyTimesP);
    let base = batch(&imgs, &strong, one_hot(&labels, 3));
    let mut moved_imgs = imgs.clone();
    moved_imgs[2] = scrambled(&imgs[2], 9);
    let mut moved_targets = one_hot(&labels, 3);
    moved_targets[6..9].copy_from_slice(&[0.0, 0.0, 1.0]);
    let moved = batch(&moved_imgs, &strong, moved_targets);
    if grads(&base, &plan, only_sup) != grads(&moved, &plan, only_sup) {
        fails.push("s=0 sample reaches the L_sup gradient");
    }
    let all_zero = EpochPlan::new(vec![0.0; n], vec![0.5; n], teacher.clone(), SslWeighting::NoisyTimesP);
    if grads(&base, &all_zero, only_sup).iter().any(|&g| g != 0.0) {
        fails.push("s=0 everywhere leaves a non-zero L_sup gradient");
    }

    // p = 0: the sample's strong view cannot move the L_ssl gradient
    let mut p = vec![0.7; n];
    p[4] = 0.0;
    for weighting in [SslWeighting::NoisyTimesP, SslWeighting::POnly] {
        let plan = EpochPlan::new(vec![0.0; n], p.clone(), teacher.clone(), weighting);
        let mut moved_strong = strong.clone();
        moved_strong[4] = scrambled(&imgs[4], 11);
        let moved = batch(&imgs, &moved_strong, one_hot(&labels, 3));
        let g = grads(&base, &plan, only_ssl);
        if g != grads(&moved, &plan, only_ssl) {
            fails.push("p=0 sample reaches the L_ssl gradient");
        }
        if g.iter().all(|&x| x == 0.0) {
            fails.push("L_ssl gradient vanished for p>0 samples");
        }
        let none = EpochPlan::new(vec![0.0; n], vec![0.0; n], teacher.clone(), weighting);
        if grads(&base, &none, only_ssl).iter().any(|&x| x != 0.0) {
            fails.push("p=0 everywhere leaves a non-zero L_ssl gradient");
        }
    }

    // stop-gradient: the parameter gradient equals the gradient routed only
    // through the student's strong-view logits, with the teacher held constant
    let plan = EpochPlan::new(vec![0.0; n], vec![0.8; n], teacher.clone(), SslWeighting::POnly);
    let g = grads(&base, &plan, only_ssl);
    let mut all = imgs.clone();
    all.extend(strong.iter().cloned());
    let fwd = net.forward(&all, Mode::Train).unwrap();
    let student: Vec<f64> = fwd.logits[n * 3..].iter().map(|&x| x as f64).collect();
    let ssl = loss_ssl(&teacher, &student, 3, &plan.q).unwrap();
    let mut d = vec![0f32; n * 3];
    d.extend(ssl.dlogits.iter().map(|&x| x as f32));
    let manual = net.backward(&fwd, Some(&d), None).unwrap();
    if g != manual {
        fails.push("teacher path contributes to the parameter gradient");
    }

    if fails.is_empty() {
        outcome(true, "s=0, p=0 and stop-gradient probes exact")
    } else {
        outcome(false, fails.join("; "))
    }
}

// ---------------------------------------------------------------------------
// 4

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn unit_rows(r: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n * dim).map(|_| r.random_range(-1.0..1.0)).collect();
    for row in v.chunks_exact_mut(dim) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn central<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
    let h = 1e-6;
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn gradient_checks() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let n = r.random_range(2..=5);
        let dim = r.random_range(2..=6);
        let tau = r.random_range(0.1..1.0);
        let z1 = unit_rows(&mut r, n, dim);
        let z2 = unit_rows(&mut r, n, dim);
        let g = nt_xent(&z1, &z2, dim, tau).unwrap();
        let f1 = central(|x| nt_xent(x, &z2, dim, tau).unwrap().loss, &z1);
        let f2 = central(|x| nt_xent(&z1, x, dim, tau).unwrap().loss, &z2);
        let e = rel_err(&g.d_z1, &f1).max(rel_err(&g.d_z2, &f2));
        worst = worst.max(e);
        if e > 1e-4 {
            return outcome(false, format!("nt_xent case {case}: relative error {e:.2e}"));
        }

        let k = r.random_range(2..=6);
        let m = r.random_range(1..=5);
        let logits: Vec<f64> = (0..m * k).map(|_| r.random_range(-3.0..3.0)).collect();
        let mut teacher: Vec<f64> = (0..m * k).map(|_| r.random_range(0.01..1.0)).collect();
        for row in teacher.chunks_exact_mut(k) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        let q: Vec<f64> = (0..m).map(|_| r.random_range(0.0..=1.0)).collect();
        let g = loss_ssl(&teacher, &logits, k, &q).unwrap();
        let f = central(|x| loss_ssl(&teacher, x, k, &q).unwrap().loss, &logits);
        let e = rel_err(&g.dlogits, &f);
        worst = worst.max(e);
        if e > 1e-4 {
            return outcome(false, format!("loss_ssl case {case}: relative error {e:.2e}"));
        }
    }
    outcome(true, format!("20 cases each, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 5

fn scheduler_semantics() -> Outcome {
    let grid = [0.0, 0.3, 0.5, 1.0];
    let n = grid.len() * grid.len();
    let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let zv: Vec<f64> = (0..n).map(|i| grid[i / grid.len()]).collect();
    let wv: Vec<f64> = (0..n).map(|i| grid[i % grid.len()]).collect();
    let z = CleanScores::new(ids.clone(), zv.clone(), ScoreOrigin::SmallLoss).unwrap();
    let w = CleanScores::new(ids.clone(), wv.clone(), ScoreOrigin::LinearSep).unwrap();
    let mut fails = Vec::new();

    let alt = CombinationStrategy::new(StrategyKind::AlternateMod2);
    for epoch in 0..64 {
        let a = active_scores(&alt, epoch, &ids, Some(&z), Some(&w)).unwrap();
        let (want_det, want) = if epoch % 2 == 0 { (ActiveDetector::W, &wv) } else { (ActiveDetector::Z, &zv) };
        if a.detector != want_det || &a.scores.values != want {
            fails.push(format!("ALTERNATE_MOD2 epoch {epoch}"));
        }
    }

    for (kind, rule) in [
        (StrategyKind::And, (|a: bool, b: bool| a || b) as fn(bool, bool) -> bool),
        (StrategyKind::Or, |a: bool, b: bool| a && b),
    ] {
        let a = active_scores(&CombinationStrategy::new(kind), 3, &ids, Some(&z), Some(&w)).unwrap();
        for i in 0..n {
            let want = if rule(zv[i] >= 0.5, wv[i] >= 0.5) { 1.0 } else { 0.0 };
            if a.scores.values[i] != want {
                fails.push(format!("{kind} at z={}, w={}", zv[i], wv[i]));
            }
        }
    }

    let v = vote_noisy(&z, &w).unwrap();
    let v2 = vote_noisy(&w, &z).unwrap();
    for i in 0..n {
        let want_clean = zv[i] >= 0.5 || wv[i] >= 0.5;
        if (v.values[i] >= 0.5) != want_clean {
            fails.push(format!("vote at z={}, w={}", zv[i], wv[i]));
        }
        if (v.values[i] >= 0.5) != (v2.values[i] >= 0.5) {
            fails.push(format!("vote not symmetric at {i}"));
        }
    }

    if fails.is_empty() {
        outcome(true, format!("64 epochs of parity, {n}-case AND/OR/vote tables"))
    } else {
        outcome(false, fails.join("; "))
    }
}

// ---------------------------------------------------------------------------
// 6

fn separator_robustness() -> Outcome {
    let mut worst = f64::INFINITY;
    for seed in 0..10u64 {
        let mut r = ChaCha8Rng::seed_from_u64(600 + seed);
        let dim = 16;
        let centre = |r: &mut ChaCha8Rng| -> Vec<f64> { unit_rows(r, 1, dim) };
        let (c_clean, c_noisy) = (centre(&mut r), centre(&mut r));
        let spread = Normal::new(0.0, 0.05).unwrap();
        let n = 400;
        let truth: Vec<bool> = (0..n).map(|i| i % 5 != 0).collect();
        let rows: Vec<Vec<f32>> = truth
            .iter()
            .map(|&t| {
                let c = if t { &c_clean } else { &c_noisy };
                let v: Vec<f64> = c.iter().map(|x| x + spread.sample(&mut r)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| (x / norm) as f32).collect()
            })
            .collect();
        let ids: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
        let feats = FeatureMatrix::from_rows(ids.clone(), 0, rows).unwrap();
        // flip exactly 10% of the pseudo targets
        let mut pseudo: Vec<bool> = truth.clone();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        for &i in &order[..n / 10] {
            pseudo[i] = !pseudo[i];
        }
        let targets = CleanScores::oracle(ids, &pseudo).unwrap();
        let sep = fit_linear_separator(&feats, &targets, &SeparatorOptions::default()).unwrap();
        let scores = apply_separator(&sep, &feats).unwrap();
        let a = auroc(&scores.values, &truth).unwrap();
        worst = worst.min(a);
        if a < 0.99 {
            return outcome(false, format!("seed {seed}: AUROC {a:.4}"));
        }
    }
    outcome(true, format!("10 seeds, worst AUROC {worst:.4}"))
}

// ---------------------------------------------------------------------------
// 7-12: shipped configs, 3 seeds each

fn config(name: &str) -> ExperimentConfig {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&p).unwrap()
}

fn seeds(config: &ExperimentConfig, root: &Path) -> Vec<Run> {
    config.seeds.iter().map(|&s| Run::new(config, root, s, false).unwrap()).collect()
}

fn run_noisy(root: &Path) -> Report {
    let c = config("desk.toml");
    for run in seeds(&c, root) {
        let data = harness::build_data(&run).unwrap();
        let enc = harness::pretrain_stage(&run, &data).unwrap();
        harness::probe_stage(&run, &data, &enc).unwrap();
        harness::detect_stage(&run, &data, &enc).unwrap();
        for kind in [StrategyKind::AlternateMod2, StrategyKind::ZOnly, StrategyKind::WOnly] {
            harness::train_stage(&run, &data, &enc, kind).unwrap();
        }
        for s in [CotrainStrategy::Indep, CotrainStrategy::Ours] {
            harness::cotrain_stage(&run, &data, &enc, s).unwrap();
        }
    }
    Report::collect(&c, root).unwrap()
}

fn run_related(root: &Path) -> Report {
    let c = config("desk-related.toml");
    for run in seeds(&c, root) {
        let data = harness::build_data(&run).unwrap();
        let enc = harness::pretrain_stage(&run, &data).unwrap();
        harness::probe_stage(&run, &data, &enc).unwrap();
    }
    Report::collect(&c, root).unwrap()
}

fn run_clean(root: &Path) -> Report {
    let c = config("desk-clean.toml");
    for run in seeds(&c, root) {
        let data = harness::build_data(&run).unwrap();
        let enc = harness::pretrain_stage(&run, &data).unwrap();
        harness::train_stage(&run, &data, &enc, StrategyKind::AlternateMod2).unwrap();
        harness::baseline_stage(&run, &data, &enc).unwrap();
    }
    Report::collect(&c, root).unwrap()
}

fn profile(r: &Report) -> String {
    r.probe
        .iter()
        .map(|p| format!("b{} {:.3}", p.block_index, p.auroc.mean))
        .collect::<Vec<_>>()
        .join(", ")
}

fn probe_separability(noisy: &Report, related: &Report) -> Outcome {
    let max = noisy.probe.iter().map(|p| p.auroc.mean).fold(f64::NEG_INFINITY, f64::max);
    outcome(
        max >= 0.90 && !related.probe.is_empty(),
        format!(
            "synthetic OOD max block AUROC {max:.4} (>= 0.90) [{}]; related OOD profile [{}]",
            profile(noisy),
            profile(related)
        ),
    )
}

fn detector_auroc(r: &Report) -> Outcome {
    let get = |d: &str| r.table1_row(d).and_then(|row| row.auroc.clone()).map(|s| s.mean);
    let shaped = [DET_NONE, DET_ORACLE].iter().all(|d| r.table1_row(d).is_some())
        && r.table1.iter().all(|row| row.best_accuracy.n == r.seeds.len());
    match (get(DET_W), get(DET_PLS)) {
        (Some(w), Some(z)) => outcome(
            w - z >= 0.03 && shaped,
            format!(
                "AUROC W {w:.4} vs Z {z:.4}, margin {:.4} (>= 0.03) at {:.0}% noise; table rows {}",
                w - z,
                100.0 * r.noise_ratio,
                r.table1.len()
            ),
        ),
        _ => outcome(false, "detector rows missing"),
    }
}

fn detector_correlation(r: &Report) -> Outcome {
    let Some(p) = &r.pearson else {
        return outcome(false, "no correlations logged");
    };
    let m = |s: &Option<lsa_core::harness::Stat>| s.as_ref().map(|s| s.mean);
    match (m(&p.z_rrl), m(&p.z_w), m(&p.w_rrl)) {
        (Some(zr), Some(zw), Some(wr)) => outcome(
            zr > zw && zr > wr,
            format!("pearson(Z_PLS, Z_RRL) {zr:.3} vs (W, Z_PLS) {zw:.3}, (W, Z_RRL) {wr:.3}"),
        ),
        _ => outcome(false, "correlation undefined"),
    }
}

fn strategy_accuracy(r: &Report) -> Outcome {
    let best = |s: StrategyKind| r.table2_row(s.as_str()).map(|row| row.best_accuracy.mean);
    match (best(StrategyKind::AlternateMod2), best(StrategyKind::ZOnly), best(StrategyKind::WOnly)) {
        (Some(lsa), Some(z), Some(w)) => outcome(
            lsa >= z && lsa >= w - 0.003,
            format!(
                "LSA {:.2} vs Z_ONLY {:.2}, W_ONLY {:.2} (mean best accuracy %, {} seeds)",
                100.0 * lsa,
                100.0 * z,
                100.0 * w,
                r.seeds.len()
            ),
        ),
        _ => outcome(false, "strategy rows missing"),
    }
}

fn cotrain_ensemble(r: &Report) -> Outcome {
    match (r.table3_row(CotrainStrategy::Ours), r.table3_row(CotrainStrategy::Indep)) {
        (Some(o), Some(i)) => {
            let p = |x: Option<f64>| x.map_or("n/a".into(), |v| format!("{v:.3}"));
            outcome(
                o.ensemble_best.mean >= i.ensemble_best.mean,
                format!(
                    "ensemble OURS {} vs INDEP {}; individual {} vs {}; Welch p individual {}, ensemble {}",
                    o.ensemble_best.pct(),
                    i.ensemble_best.pct(),
                    o.individual_best.pct(),
                    i.individual_best.pct(),
                    p(o.p_individual),
                    p(o.p_ensemble)
                ),
            )
        }
        _ => outcome(false, "co-training rows missing"),
    }
}

fn clean_sanity(r: &Report) -> Outcome {
    let last = |name: &str| r.table2_row(name).map(|row| row.final_accuracy.mean);
    match (last(StrategyKind::AlternateMod2.as_str()), last(harness::BASELINE)) {
        (Some(lsa), Some(ce)) => outcome(
            (lsa - ce).abs() <= 0.01,
            format!(
                "final accuracy LSA {:.2} vs CE+mixup {:.2}, gap {:.2} pt (<= 1)",
                100.0 * lsa,
                100.0 * ce,
                100.0 * (lsa - ce).abs()
            ),
        ),
        _ => outcome(false, "rows missing"),
    }
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    report(&mut results, 1, "AUROC oracle equivalence", auroc_matches_brute_force());
    report(&mut results, 2, "GMM EM", gmm_em());
    report(&mut results, 3, "loss gating", loss_gating());
    report(&mut results, 4, "gradient checks", gradient_checks());
    report(&mut results, 5, "scheduler semantics", scheduler_semantics());
    report(&mut results, 6, "linear separator robustness", separator_robustness());

    let dir = tempfile::tempdir().unwrap();
    let root: PathBuf = dir.path().to_path_buf();
    let noisy = run_noisy(&root);
    let related = run_related(&root);
    let clean = run_clean(&root);
    report(&mut results, 7, "block-wise ID/OOD separability", probe_separability(&noisy, &related));
    report(&mut results, 8, "detector AUROC", detector_auroc(&noisy));
    report(&mut results, 9, "detector correlation", detector_correlation(&noisy));
    report(&mut results, 10, "combination strategies", strategy_accuracy(&noisy));
    report(&mut results, 11, "co-training", cotrain_ensemble(&noisy));
    report(&mut results, 12, "no-noise sanity", clean_sanity(&clean));
    let _ = writeln!(std::io::stderr(), "{}", noisy.render());

    let failed: Vec<u32> = results.iter().filter(|(_, p)| !p).map(|(i, _)| *i).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
