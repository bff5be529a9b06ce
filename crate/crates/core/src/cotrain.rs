//! Two-network co-training: vote-based detection, co-guessed pseudo-label
//! confidence and test-time ensembling.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::detectors::{CleanScores, ScoreOrigin, DEFAULT_THRESHOLD};
use crate::error::{invalid, LsaError, Result};
use crate::nn::Network;
use crate::par;
use crate::pls::{
    accuracy_from_probs, detect_epoch, detection_metrics, infer_epoch, infer_logits,
    optimize_epoch, pseudo_loss_scores, Detection, EpochInference, EpochMetrics, EpochPlan,
    Evaluation, Optim, TrainConfig, TrainInputs, TrainState, WSource,
};
use crate::probe::{extract_from_images, FeatureMatrix};
use crate::schedule::{active_scores, Active, ActiveDetector, CombinationStrategy, StrategyKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CotrainStrategy {
    /// No interaction; the nets only meet in the test ensemble.
    Indep,
    /// Each net trains on the other's detection, imputing with the ensemble.
    DmStyle,
    /// Voted detection, ensemble imputation.
    Vote,
    /// Voted detection, ensemble imputation, co-guessed confidence.
    Ours,
}

impl CotrainStrategy {
    pub const ALL: [CotrainStrategy; 4] = [
        CotrainStrategy::Indep,
        CotrainStrategy::DmStyle,
        CotrainStrategy::Vote,
        CotrainStrategy::Ours,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CotrainStrategy::Indep => "INDEP",
            CotrainStrategy::DmStyle => "DM_STYLE",
            CotrainStrategy::Vote => "VOTE",
            CotrainStrategy::Ours => "OURS",
        }
    }
}

impl std::fmt::Display for CotrainStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CotrainStrategy {
    type Err = LsaError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| LsaError::Config(format!("unknown co-training strategy '{s}'")))
    }
}

/// Noisy iff both networks say noisy (scores binarized at 0.5).
pub fn vote_noisy(a: &CleanScores, b: &CleanScores) -> Result<CleanScores> {
    a.ensure_aligned(b)?;
    let (ba, bb) = (a.binarize(DEFAULT_THRESHOLD), b.binarize(DEFAULT_THRESHOLD));
    let values = ba.iter().zip(&bb).map(|(&x, &y)| if x || y { 1.0 } else { 0.0 }).collect();
    CleanScores::new(a.ids.clone(), values, ScoreOrigin::Combined)
}

/// Confidence in one network's pseudo-labels `teacher`, judged by the other
/// network's prediction `other_logits`.
pub fn co_guess(ids: Vec<String>, teacher: &[f64], other_logits: &[f32], k: usize) -> Result<CleanScores> {
    pseudo_loss_scores(ids, teacher, other_logits, k)
}

/// Mean of the two softmax distributions, row by row.
pub fn ensemble_predict(logits_a: &[f32], logits_b: &[f32], k: usize) -> Result<Vec<f64>> {
    if logits_a.len() != logits_b.len() {
        return Err(LsaError::DimensionMismatch {
            expected: logits_a.len(),
            got: logits_b.len(),
        });
    }
    if k == 0 || logits_a.len() % k != 0 {
        return invalid("logits length is not a multiple of the class count");
    }
    let mut out = vec![0f64; logits_a.len()];
    for ((ra, rb), o) in logits_a.chunks_exact(k).zip(logits_b.chunks_exact(k)).zip(out.chunks_exact_mut(k)) {
        for row in [ra, rb] {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&x| (x as f64 - m).exp()).sum();
            for (y, &x) in o.iter_mut().zip(row) {
                *y += 0.5 * (x as f64 - m).exp() / z;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p_value: f64,
}

/// Two-sided Welch t-test of `a` against `b`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return invalid("Welch test needs at least 2 values per group");
    }
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let se2 = va / na + vb / nb;
    if !(se2 > 0.0) {
        return Err(LsaError::Degenerate("both groups have zero variance".into()));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| LsaError::Degenerate(e.to_string()))?;
    Ok(WelchTest {
        t,
        df,
        p_value: 2.0 * (1.0 - dist.cdf(t.abs())),
    })
}

// ---------------------------------------------------------------------------
// co-training loop

/// One line of the dual metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CotrainMetrics {
    pub epoch: usize,
    pub net_a: EpochMetrics,
    pub net_b: EpochMetrics,
    pub ensemble_accuracy: f64,
}

pub struct CotrainOutcome {
    pub networks: [Network; 2],
    pub states: [TrainState; 2],
    pub history: Vec<CotrainMetrics>,
    pub final_individual: [f64; 2],
    pub best_individual: [f64; 2],
    pub final_ensemble: f64,
    pub best_ensemble: f64,
}

pub type CotrainObserver<'o> = dyn FnMut(&CotrainMetrics, &[Network; 2]) -> Result<()> + 'o;

fn fresh_state() -> TrainState {
    TrainState {
        epoch: 0,
        z: None,
        w: None,
        rrl: None,
        p: None,
        active: None,
        active_detector: None,
        history: Vec::new(),
    }
}

fn schedule(config: &TrainConfig, epoch: usize, ids: &[String], z: &CleanScores, w: Option<&CleanScores>) -> Result<Active> {
    match w {
        Some(w) => active_scores(&config.strategy, epoch, ids, Some(z), Some(w)),
        None => active_scores(&CombinationStrategy::new(StrategyKind::ZOnly), epoch, ids, Some(z), None),
    }
}

fn voted(a: Option<&CleanScores>, b: Option<&CleanScores>) -> Result<Option<CleanScores>> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(vote_noisy(a, b)?),
        (Some(x), None) | (None, Some(x)) => Some(x.clone()),
        (None, None) => None,
    })
}

/// Trains two networks side by side under `strategy`. `seeds` drive each
/// net's augmentation and data order; `config.seed` is ignored.
pub fn cotrain(
    initial: [&Network; 2],
    seeds: [u64; 2],
    inputs: &TrainInputs,
    eval: &Evaluation,
    config: &TrainConfig,
    strategy: CotrainStrategy,
    observer: &mut CotrainObserver,
) -> Result<CotrainOutcome> {
    config.validate()?;
    if seeds[0] == seeds[1] && initial[0] != initial[1] {
        log::warn!("co-training with a shared seed");
    }
    let k = inputs.num_classes;
    let n = inputs.len();
    let cfgs = [
        TrainConfig {
            seed: seeds[0],
            ..config.clone()
        },
        TrainConfig {
            seed: seeds[1],
            ..config.clone()
        },
    ];
    let feats: Vec<FeatureMatrix> = initial
        .iter()
        .map(|net| extract_from_images(net, inputs.images, inputs.ids.clone(), config.w_block_index))
        .collect::<Result<_>>()?;
    let mut nets = [initial[0].clone(), initial[1].clone()];
    let mut optims = [Optim::new(&nets[0], config, n), Optim::new(&nets[1], config, n)];
    let mut states = [fresh_state(), fresh_state()];
    let mut history = Vec::with_capacity(config.epochs);
    let mut best_ind = [f64::NEG_INFINITY; 2];
    let mut best_ens = f64::NEG_INFINITY;
    for epoch in 0..config.epochs {
        let (ia, ib) = par::join(
            || infer_epoch(&nets[0], inputs, seeds[0], epoch),
            || infer_epoch(&nets[1], inputs, seeds[1], epoch),
        );
        let inf: [EpochInference; 2] = [ia?, ib?];
        let dets: [Detection; 2] = [
            detect_epoch(inputs, &inf[0], &feats[0], &WSource::FromZ, &cfgs[0], epoch)?,
            detect_epoch(inputs, &inf[1], &feats[1], &WSource::FromZ, &cfgs[1], epoch)?,
        ];
        let warm = epoch < config.warmup_epochs;
        let mut actives: [Option<Active>; 2] = [None, None];
        let mut ps: [Option<CleanScores>; 2] = [None, None];
        let plans: [EpochPlan; 2] = if warm {
            [EpochPlan::warmup(n, k), EpochPlan::warmup(n, k)]
        } else {
            let ensemble_teacher: Vec<f64> =
                inf[0].teacher.iter().zip(&inf[1].teacher).map(|(a, b)| 0.5 * (a + b)).collect();
            let mut out = Vec::with_capacity(2);
            for me in 0..2 {
                let other = 1 - me;
                let (act, teacher, p) = match strategy {
                    CotrainStrategy::Indep => {
                        let act = schedule(config, epoch, &inputs.ids, &dets[me].z, dets[me].w.as_ref())?;
                        let p = pseudo_loss_scores(inputs.ids.clone(), &inf[me].teacher, &inf[me].logits_b, k)?;
                        (act, inf[me].teacher.clone(), p)
                    }
                    CotrainStrategy::DmStyle => {
                        let act = schedule(config, epoch, &inputs.ids, &dets[other].z, dets[other].w.as_ref())?;
                        let p = pseudo_loss_scores(inputs.ids.clone(), &ensemble_teacher, &inf[me].logits_b, k)?;
                        (act, ensemble_teacher.clone(), p)
                    }
                    CotrainStrategy::Vote | CotrainStrategy::Ours => {
                        let z = vote_noisy(&dets[0].z, &dets[1].z)?;
                        let w = voted(dets[0].w.as_ref(), dets[1].w.as_ref())?;
                        let act = schedule(config, epoch, &inputs.ids, &z, w.as_ref())?;
                        let judge = if strategy == CotrainStrategy::Ours { other } else { me };
                        let p = co_guess(inputs.ids.clone(), &ensemble_teacher, &inf[judge].logits_b, k)?;
                        (act, ensemble_teacher.clone(), p)
                    }
                };
                out.push(EpochPlan::new(act.scores.values.clone(), p.values.clone(), teacher, config.ssl_weighting));
                actives[me] = Some(act);
                ps[me] = Some(p);
            }
            let b = out.pop().expect("two plans");
            let a = out.pop().expect("two plans");
            [a, b]
        };

        let [net_a, net_b] = &mut nets;
        let [opt_a, opt_b] = &mut optims;
        let (la, lb) = par::join(
            || optimize_epoch(net_a, opt_a, inputs, &plans[0], &cfgs[0], epoch, None),
            || optimize_epoch(net_b, opt_b, inputs, &plans[1], &cfgs[1], epoch, None),
        );
        let losses = [la?, lb?];

        let logits = [
            infer_logits(&nets[0], eval.test_images)?,
            infer_logits(&nets[1], eval.test_images)?,
        ];
        let ens = accuracy_from_probs(&ensemble_predict(&logits[0], &logits[1], k)?, k, eval.test_labels);
        best_ens = best_ens.max(ens);
        let mut per_net: Vec<EpochMetrics> = Vec::with_capacity(2);
        for (me, det) in dets.into_iter().enumerate() {
            let probs = ensemble_predict(&logits[me], &logits[me], k)?;
            let active = actives[me].take();
            let mut m = EpochMetrics {
                epoch,
                lr: optims[me].lr(),
                warmup: warm,
                active: Some(active.as_ref().map_or(ActiveDetector::AllClean, |a| a.detector)),
                loss: losses[me],
                test_accuracy: accuracy_from_probs(&probs, k, eval.test_labels),
                ..Default::default()
            };
            detection_metrics(&mut m, Some(&det), active.as_ref().map(|a| &a.scores), eval.oracle_clean);
            m.mean_p = ps[me].as_ref().map_or(0.0, |p| p.values.iter().sum::<f64>() / n as f64);
            best_ind[me] = best_ind[me].max(m.test_accuracy);
            let st = &mut states[me];
            st.epoch = epoch;
            st.active_detector = m.active;
            st.active = active.map(|a| a.scores);
            st.p = ps[me].take();
            st.z = Some(det.z);
            st.w = det.w;
            st.rrl = det.rrl;
            st.history.push(m.clone());
            per_net.push(m);
        }
        let net_b_metrics = per_net.pop().expect("two nets");
        let net_a_metrics = per_net.pop().expect("two nets");
        let line = CotrainMetrics {
            epoch,
            net_a: net_a_metrics,
            net_b: net_b_metrics,
            ensemble_accuracy: ens,
        };
        log::info!(
            "cotrain {strategy} epoch {epoch}: acc {:.4} / {:.4}, ensemble {:.4}",
            line.net_a.test_accuracy,
            line.net_b.test_accuracy,
            ens
        );
        observer(&line, &nets)?;
        history.push(line);
    }
    let last = history.last().ok_or_else(|| LsaError::InvalidInput("no epochs".into()))?;
    let final_individual = [last.net_a.test_accuracy, last.net_b.test_accuracy];
    let final_ensemble = last.ensemble_accuracy;
    Ok(CotrainOutcome {
        networks: nets,
        states,
        history,
        final_individual,
        best_individual: best_ind,
        final_ensemble,
        best_ensemble: best_ens,
    })
}
