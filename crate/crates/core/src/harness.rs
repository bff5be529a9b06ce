//! Experiment configuration, on-disk artifact layout, pipeline stages and
//! seed-aggregated reports.
//!
//! Layout under an output root:
//!
//! ```text
//! <root>/seed-<s>/<stage>-<hash>/...     one directory per completed stage
//! <root>/report-<hash>.{md,json}
//! ```
//!
//! A stage is written into `<stage>-<hash>.partial` and renamed into place
//! only once complete, so an interrupted run never replaces finished output.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::{pretrain, PretrainConfig};
use crate::cotrain::{cotrain, welch_t_test, CotrainMetrics, CotrainStrategy, WelchTest};
use crate::data::{build_noisy_dataset, probe_split_indices, read_images, write_images, DatasetManifest, NoiseSpec, NoisyDataset};
use crate::detectors::{CleanScores, ScoreOrigin, DEFAULT_THRESHOLD};
use crate::error::{LsaError, Result};
use crate::image::Image;
use crate::nn::{CheckpointMeta, EncoderSpec, Network};
use crate::pls::{
    ignore_the_noise_baseline, train_observed, train_supervised, EpochMetrics, Evaluation, SslWeighting, TrainConfig,
    TrainInputs, TrainState, WSource,
};
use crate::probe::{extract_features, probe_depth_auroc, BlockAuroc};
use crate::schedule::{CombinationStrategy, StrategyKind};
use crate::synth::{self, SynthSpec};

const HASH_LEN: usize = 16;
/// Mixed into the first network's seed to seed the second co-trained one.
const SECOND_NET_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub ratio: f64,
    pub per_class: bool,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            ratio: 0.4,
            per_class: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Held-out fraction for the oracle probe, stratified by oracle flag.
    pub test_fraction: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection { test_fraction: 0.2 }
    }
}

/// Which runs `train` and `cotrain` perform when no strategy is named.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentsSection {
    pub strategies: Vec<StrategyKind>,
    /// Also train the plain cross-entropy + mixup reference.
    pub baseline: bool,
    pub cotrain: Vec<CotrainStrategy>,
}

impl Default for ExperimentsSection {
    fn default() -> Self {
        ExperimentsSection {
            strategies: vec![StrategyKind::AlternateMod2, StrategyKind::ZOnly, StrategyKind::WOnly],
            baseline: true,
            cotrain: vec![CotrainStrategy::Indep, CotrainStrategy::Ours],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Each stage runs once per seed. The run seed is added to the data,
    /// noise, pretraining and training seeds.
    pub seeds: Vec<u64>,
    /// Output root used when `--out` is absent. Excluded from the hash.
    pub out_dir: Option<PathBuf>,
    /// Extra training checkpoint every this many epochs; 0 keeps only the
    /// best and final ones.
    pub checkpoint_every: usize,
    pub data: SynthSpec,
    pub noise: NoiseSection,
    pub encoder: EncoderSpec,
    pub pretrain: PretrainConfig,
    pub probe: ProbeSection,
    pub train: TrainConfig,
    pub experiments: ExperimentsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            seeds: vec![0, 1, 2],
            out_dir: None,
            checkpoint_every: 10,
            data: SynthSpec {
                atypical_fraction: 0.3,
                pixel_noise: 0.1,
                test_per_class: 100,
                ..Default::default()
            },
            noise: NoiseSection::default(),
            encoder: EncoderSpec::default(),
            pretrain: PretrainConfig::default(),
            probe: ProbeSection::default(),
            train: TrainConfig {
                epochs: 20,
                cont_temperature: 1.0,
                ssl_weighting: SslWeighting::POnly,
                ..Default::default()
            },
            experiments: ExperimentsSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| LsaError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| LsaError::MissingInput(format!("config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LsaError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(LsaError::Config(m));
        if self.seeds.is_empty() {
            return cfg_err("seeds must not be empty".into());
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return cfg_err("seeds must be distinct".into());
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return cfg_err(format!("bad experiment name '{}'", self.name));
        }
        NoiseSpec::new(self.noise.ratio, 0).validate()?;
        if self.encoder.num_classes != self.data.num_classes {
            return cfg_err(format!(
                "encoder.num_classes = {} but data.num_classes = {}",
                self.encoder.num_classes, self.data.num_classes
            ));
        }
        if self.encoder.image_size != self.data.image_size {
            return cfg_err(format!(
                "encoder.image_size = {} but data.image_size = {}",
                self.encoder.image_size, self.data.image_size
            ));
        }
        self.encoder.validate()?;
        self.encoder.feature_dim(self.train.w_block_index)?;
        self.train.validate()?;
        if !(self.probe.test_fraction > 0.0 && self.probe.test_fraction < 1.0) {
            return cfg_err("probe.test_fraction must lie in (0, 1)".into());
        }
        if self.pretrain.batch_size < 2 || !(self.pretrain.lr > 0.0) || !(self.pretrain.temperature > 0.0) {
            return cfg_err("pretrain needs batch_size >= 2 and positive lr and temperature".into());
        }
        for &k in &self.experiments.strategies {
            self.strategy(k).validate(self.train.epochs)?;
        }
        Ok(())
    }

    /// Stable hex digest of everything that determines results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let canonical = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(digest)[..HASH_LEN].to_string()
    }

    /// The configuration one seed's stages actually run with.
    pub fn for_seed(&self, seed: u64) -> ExperimentConfig {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.data.seed = c.data.seed.wrapping_add(seed);
        c.pretrain.seed = c.pretrain.seed.wrapping_add(seed);
        c.train.seed = c.train.seed.wrapping_add(seed);
        c
    }

    pub fn strategy(&self, kind: StrategyKind) -> CombinationStrategy {
        CombinationStrategy {
            kind,
            ..self.train.strategy
        }
    }

    fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            noise_ratio: self.noise.ratio,
            seed: self.data.seed,
            per_class: self.noise.per_class,
        }
    }
}

// ---------------------------------------------------------------------------
// stage directories

/// One seed of one configuration under an output root.
#[derive(Clone, Debug)]
pub struct Run {
    /// Seed-specific configuration.
    pub config: ExperimentConfig,
    /// Hash of the configuration shared by every seed.
    pub hash: String,
    pub seed: u64,
    pub force: bool,
    dir: PathBuf,
}

struct Stage {
    tmp: PathBuf,
    done: PathBuf,
}

impl Stage {
    fn file(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    fn commit(self) -> Result<PathBuf> {
        if self.done.exists() {
            fs::remove_dir_all(&self.done)?;
        }
        fs::rename(&self.tmp, &self.done)?;
        Ok(self.done)
    }
}

impl Run {
    pub fn new(base: &ExperimentConfig, root: &Path, seed: u64, force: bool) -> Result<Run> {
        base.validate()?;
        Ok(Run {
            config: base.for_seed(seed),
            hash: base.hash(),
            seed,
            force,
            dir: root.join(format!("seed-{seed}")),
        })
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.dir.join(format!("{stage}-{}", self.hash))
    }

    pub fn is_complete(&self, stage: &str) -> bool {
        self.stage_dir(stage).is_dir()
    }

    fn begin(&self, stage: &str) -> Result<Stage> {
        let done = self.stage_dir(stage);
        if done.exists() && !self.force {
            return Err(LsaError::AlreadyExists(done.display().to_string()));
        }
        let tmp = self.dir.join(format!("{stage}-{}.partial", self.hash));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        Ok(Stage { tmp, done })
    }

    fn require(&self, stage: &str, hint: &str) -> Result<PathBuf> {
        let d = self.stage_dir(stage);
        if !d.is_dir() {
            return Err(LsaError::MissingInput(format!("{} not found; run `{hint}` first", d.display())));
        }
        Ok(d)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| LsaError::MissingInput(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

/// Appends one JSON object per line.
struct JsonLines(BufWriter<File>);

impl JsonLines {
    fn create(path: &Path) -> Result<Self> {
        Ok(JsonLines(BufWriter::new(File::create(path)?)))
    }

    fn push<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.0, value)?;
        writeln!(self.0)?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.0.flush()?;
        Ok(())
    }
}

fn save_network(path: &Path, net: &Network, meta: &CheckpointMeta) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    net.save(&mut w, meta)?;
    w.flush()?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<(Network, CheckpointMeta)> {
    let f = File::open(path).map_err(|e| LsaError::MissingInput(format!("{}: {e}", path.display())))?;
    Network::load(BufReader::new(f))
}

fn write_scores(path: &Path, scores: &CleanScores, hash: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    scores.write_csv(&mut w, hash)?;
    w.flush()?;
    Ok(())
}

fn read_scores(path: &Path) -> Result<CleanScores> {
    let f = File::open(path).map_err(|e| LsaError::MissingInput(format!("{}: {e}", path.display())))?;
    Ok(CleanScores::read_csv(BufReader::new(f))?.0)
}

// ---------------------------------------------------------------------------
// data

/// The noisy training set plus a clean test set.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: NoisyDataset,
    pub test_images: Vec<Image>,
    pub test_labels: Vec<usize>,
    pub oracle: Vec<bool>,
}

impl ExperimentData {
    /// Generates the synthetic source and corrupts it; `config` is seeded.
    pub fn generate(config: &ExperimentConfig) -> Result<Self> {
        let spec = &config.data;
        let clean = synth::clean_train_set(spec)?;
        let test = synth::clean_test_set(spec)?;
        let pool = synth::ood_pool(spec, clean.len())?;
        let train = build_noisy_dataset(
            &clean,
            &synth::class_names(spec.num_classes),
            &pool,
            spec.ood_kind.pool_name(),
            &config.noise_spec(),
        )?;
        let oracle = train.oracle_clean();
        Ok(ExperimentData {
            train,
            test_images: test.iter().map(|l| l.image.clone()).collect(),
            test_labels: test.iter().map(|l| l.label).collect(),
            oracle,
        })
    }

    pub fn inputs(&self) -> TrainInputs<'_> {
        TrainInputs::from_dataset(&self.train)
    }

    pub fn eval(&self) -> Evaluation<'_> {
        Evaluation {
            oracle_clean: &self.oracle,
            test_images: &self.test_images,
            test_labels: &self.test_labels,
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(dir.join("manifest.tsv"))?);
        self.train.manifest.write_to(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("train.img"))?);
        write_images(&self.train.images, &mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("test.img"))?);
        write_images(&self.test_images, &mut w)?;
        w.flush()?;
        let labels: String = self.test_labels.iter().map(|l| format!("{l}\n")).collect();
        fs::write(dir.join("test_labels.txt"), labels)?;
        Ok(())
    }

    fn read(dir: &Path) -> Result<Self> {
        let open = |name: &str| -> Result<BufReader<File>> { Ok(BufReader::new(File::open(dir.join(name))?)) };
        let manifest = DatasetManifest::read_from(open("manifest.tsv")?)?;
        let images = read_images(open("train.img")?)?;
        if images.len() != manifest.len() {
            return Err(LsaError::Format(format!(
                "manifest lists {} images, array holds {}",
                manifest.len(),
                images.len()
            )));
        }
        let test_images = read_images(open("test.img")?)?;
        let test_labels = fs::read_to_string(dir.join("test_labels.txt"))?
            .lines()
            .map(|l| l.trim().parse().map_err(|_| LsaError::Format(format!("bad test label '{l}'"))))
            .collect::<Result<Vec<usize>>>()?;
        if test_labels.len() != test_images.len() {
            return Err(LsaError::Format("test labels and images differ in count".into()));
        }
        let train = NoisyDataset { manifest, images };
        let oracle = train.oracle_clean();
        Ok(ExperimentData {
            train,
            test_images,
            test_labels,
            oracle,
        })
    }
}

pub const STAGE_DATA: &str = "data";
pub const STAGE_PRETRAIN: &str = "pretrain";
pub const STAGE_PROBE: &str = "probe";
pub const STAGE_DETECT: &str = "detect";

pub fn train_stage_name(name: &str) -> String {
    format!("train-{name}")
}

pub fn cotrain_stage_name(strategy: CotrainStrategy) -> String {
    format!("cotrain-{strategy}")
}

/// Name of the plain cross-entropy + mixup reference run.
pub const BASELINE: &str = "CE_MIXUP";

pub fn build_data(run: &Run) -> Result<ExperimentData> {
    let stage = run.begin(STAGE_DATA)?;
    let data = ExperimentData::generate(&run.config)?;
    data.write(&stage.tmp)?;
    stage.commit()?;
    Ok(data)
}

pub fn load_data(run: &Run) -> Result<ExperimentData> {
    ExperimentData::read(&run.require(STAGE_DATA, "build-data")?)
}

#[derive(Serialize)]
struct LossLine {
    epoch: usize,
    loss: f64,
}

pub fn pretrain_stage(run: &Run, data: &ExperimentData) -> Result<Network> {
    let stage = run.begin(STAGE_PRETRAIN)?;
    let (net, meta) = pretrain(&data.train.images, &run.config.encoder, &run.config.pretrain)?;
    let mut log = JsonLines::create(&stage.file("metrics.jsonl"))?;
    for (epoch, &loss) in meta.loss_history.iter().enumerate() {
        log.push(&LossLine { epoch, loss })?;
    }
    log.finish()?;
    save_network(&stage.file("encoder.ckpt"), &net, &meta)?;
    stage.commit()?;
    Ok(net)
}

pub fn load_encoder(run: &Run) -> Result<Network> {
    let dir = run.require(STAGE_PRETRAIN, "pretrain")?;
    Ok(load_network(&dir.join("encoder.ckpt"))?.0)
}

// ---------------------------------------------------------------------------
// probe

/// Oracle ID/OOD probe at every block, held-out AUROC per block.
pub fn probe_stage(run: &Run, data: &ExperimentData, encoder: &Network) -> Result<Vec<BlockAuroc>> {
    let stage = run.begin(STAGE_PROBE)?;
    let split = probe_split_indices(&data.train.manifest, run.config.probe.test_fraction, run.config.data.seed)?;
    let mut blocks = Vec::new();
    for b in 0..=encoder.spec.num_blocks() {
        let fm = extract_features(encoder, &data.train, b)?;
        let mut w = BufWriter::new(File::create(stage.file(&format!("block-{b}.feat")))?);
        fm.write_to(&mut w)?;
        w.flush()?;
        blocks.push(fm);
    }
    let rows = probe_depth_auroc(&blocks, &data.oracle, &split)?;
    let csv: String = std::iter::once("block_index,auroc\n".to_string())
        .chain(rows.iter().map(|r| format!("{},{}\n", r.block_index, r.auroc)))
        .collect();
    fs::write(stage.file("block_auroc.csv"), csv)?;
    write_json(&stage.file("block_auroc.json"), &rows)?;
    stage.commit()?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// detect

/// One row of the detector comparison: detection quality of a score set and
/// the accuracy of cross-entropy training on what it declares clean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectRow {
    pub detector: String,
    pub auroc: Option<f64>,
    pub recall_clean: Option<f64>,
    pub recall_noise: Option<f64>,
    pub kept: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PearsonTriple {
    pub z_w: Option<f64>,
    pub z_rrl: Option<f64>,
    pub w_rrl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectReport {
    pub rows: Vec<DetectRow>,
    /// Between the detectors at the last epoch of small-loss training.
    pub pearson: PearsonTriple,
}

pub const DET_NONE: &str = "None";
pub const DET_PLS: &str = "Z_PLS";
pub const DET_RRL: &str = "Z_RRL";
pub const DET_W: &str = "W";
pub const DET_ORACLE: &str = "Oracle";

/// Trains with the small-loss detector alone from `checkpoint`, takes the
/// final small-loss, kNN and linear-separation scores, and runs the
/// ignore-the-noise baseline on each, plus no removal and the oracle.
pub fn detect_stage(run: &Run, data: &ExperimentData, checkpoint: &Network) -> Result<DetectReport> {
    let stage = run.begin(STAGE_DETECT)?;
    let cfg = TrainConfig {
        strategy: run.config.strategy(StrategyKind::ZOnly),
        ..run.config.train.clone()
    };
    let inputs = data.inputs();
    let eval = data.eval();
    let mut log = JsonLines::create(&stage.file("metrics.jsonl"))?;
    let outcome = train_observed(checkpoint, &inputs, &eval, &cfg, &WSource::FromZ, &mut |st, _| {
        log.push(st.history.last().expect("history entry per epoch"))
    })?;
    log.finish()?;
    let st = &outcome.state;
    let ids = inputs.ids.clone();
    let candidates: Vec<(&str, Option<CleanScores>)> = vec![
        (DET_NONE, Some(CleanScores::constant(ids.clone(), 1.0, ScoreOrigin::Combined))),
        (DET_PLS, st.z.clone()),
        (DET_RRL, st.rrl.clone()),
        (DET_W, st.w.clone()),
        (DET_ORACLE, Some(CleanScores::oracle(ids, &data.oracle)?)),
    ];
    let mut rows = Vec::new();
    for (name, scores) in candidates {
        let Some(scores) = scores else {
            log::warn!("detector {name} produced no scores; row omitted");
            continue;
        };
        write_scores(&stage.file(&format!("scores_{name}.csv")), &scores, &run.hash)?;
        let r = match ignore_the_noise_baseline(checkpoint, &inputs, &scores, &eval, &cfg) {
            Ok(r) => r,
            Err(LsaError::InvalidInput(m)) => {
                log::warn!("ignore-the-noise for {name} skipped: {m}");
                continue;
            }
            Err(e) => return Err(e),
        };
        rows.push(DetectRow {
            detector: name.to_string(),
            auroc: r.auroc,
            recall_clean: r.recall_clean,
            recall_noise: r.recall_noise,
            kept: r.kept,
            final_accuracy: r.final_accuracy,
            best_accuracy: r.best_accuracy,
        });
    }
    let last = st.history.last();
    let report = DetectReport {
        rows,
        pearson: PearsonTriple {
            z_w: last.and_then(|m| m.pearson_z_w),
            z_rrl: last.and_then(|m| m.pearson_z_rrl),
            w_rrl: last.and_then(|m| m.pearson_w_rrl),
        },
    };
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut csv = String::from("detector,auroc,recall_clean,recall_noise,kept,final_accuracy,best_accuracy\n");
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.detector,
            fmt(r.auroc),
            fmt(r.recall_clean),
            fmt(r.recall_noise),
            r.kept,
            r.final_accuracy,
            r.best_accuracy
        ));
    }
    fs::write(stage.file("table1.csv"), csv)?;
    let p = &report.pearson;
    fs::write(
        stage.file("pearson.csv"),
        format!(
            "pair,pearson\nZ_PLS-W,{}\nZ_PLS-Z_RRL,{}\nW-Z_RRL,{}\n",
            fmt(p.z_w),
            fmt(p.z_rrl),
            fmt(p.w_rrl)
        ),
    )?;
    write_json(&stage.file("table1.json"), &report)?;
    stage.commit()?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub final_accuracy: f64,
}

fn best_epoch(accs: impl Iterator<Item = f64>) -> (usize, f64) {
    accs.enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, a)| if a > b.1 { (i, a) } else { b })
}

fn meta(run: &Run, epochs: usize) -> CheckpointMeta {
    CheckpointMeta {
        seed: run.config.train.seed,
        epochs,
        randomly_initialized: false,
        loss_history: Vec::new(),
    }
}

/// One PLS-LSA run under `kind`.
pub fn train_stage(run: &Run, data: &ExperimentData, encoder: &Network, kind: StrategyKind) -> Result<RunSummary> {
    let name = kind.as_str();
    let stage = run.begin(&train_stage_name(name))?;
    let cfg = TrainConfig {
        strategy: run.config.strategy(kind),
        ..run.config.train.clone()
    };
    let every = run.config.checkpoint_every;
    let mut log = JsonLines::create(&stage.file("metrics.jsonl"))?;
    let mut best = f64::NEG_INFINITY;
    let outcome = train_observed(
        encoder,
        &data.inputs(),
        &data.eval(),
        &cfg,
        &WSource::FromZ,
        &mut |st: &TrainState, net: &Network| {
            let m: &EpochMetrics = st.history.last().expect("history entry per epoch");
            log.push(m)?;
            if m.test_accuracy > best {
                best = m.test_accuracy;
                save_network(&stage.file("best.ckpt"), net, &meta(run, st.epoch + 1))?;
            }
            if every > 0 && (st.epoch + 1) % every == 0 {
                save_network(&stage.file(&format!("epoch-{}.ckpt", st.epoch + 1)), net, &meta(run, st.epoch + 1))?;
            }
            Ok(())
        },
    )?;
    log.finish()?;
    save_network(&stage.file("final.ckpt"), &outcome.network, &meta(run, cfg.epochs))?;
    let st = &outcome.state;
    for (tag, s) in [("z", &st.z), ("w", &st.w), ("rrl", &st.rrl), ("p", &st.p), ("active", &st.active)] {
        if let Some(s) = s {
            write_scores(&stage.file(&format!("scores_{tag}.csv")), s, &run.hash)?;
        }
    }
    let (be, _) = best_epoch(st.history.iter().map(|m| m.test_accuracy));
    let summary = RunSummary {
        name: name.into(),
        seed: run.seed,
        epochs: cfg.epochs,
        best_accuracy: outcome.best_accuracy,
        best_epoch: be,
        final_accuracy: outcome.final_accuracy,
    };
    write_json(&stage.file("summary.json"), &summary)?;
    stage.commit()?;
    Ok(summary)
}

#[derive(Serialize)]
struct AccuracyLine {
    epoch: usize,
    test_accuracy: f64,
}

/// Cross-entropy + mixup on every sample, no detection.
pub fn baseline_stage(run: &Run, data: &ExperimentData, encoder: &Network) -> Result<RunSummary> {
    let stage = run.begin(&train_stage_name(BASELINE))?;
    let cfg = &run.config.train;
    let rows: Vec<usize> = (0..data.train.len()).collect();
    let (net, accs) = train_supervised(encoder, &data.inputs(), &rows, &data.eval(), cfg)?;
    let mut log = JsonLines::create(&stage.file("metrics.jsonl"))?;
    for (epoch, &test_accuracy) in accs.iter().enumerate() {
        log.push(&AccuracyLine { epoch, test_accuracy })?;
    }
    log.finish()?;
    save_network(&stage.file("final.ckpt"), &net, &meta(run, cfg.epochs))?;
    let (be, best) = best_epoch(accs.iter().copied());
    let summary = RunSummary {
        name: BASELINE.into(),
        seed: run.seed,
        epochs: cfg.epochs,
        best_accuracy: best,
        best_epoch: be,
        final_accuracy: accs.last().copied().unwrap_or(f64::NAN),
    };
    write_json(&stage.file("summary.json"), &summary)?;
    stage.commit()?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CotrainSummary {
    pub strategy: CotrainStrategy,
    pub seed: u64,
    pub net_seeds: [u64; 2],
    pub final_individual: [f64; 2],
    pub best_individual: [f64; 2],
    pub final_ensemble: f64,
    pub best_ensemble: f64,
    /// Best individual accuracies against this seed's stored INDEP run.
    pub welch_vs_indep: Option<WelchTest>,
}

pub fn cotrain_stage(
    run: &Run,
    data: &ExperimentData,
    encoder: &Network,
    strategy: CotrainStrategy,
) -> Result<CotrainSummary> {
    let stage = run.begin(&cotrain_stage_name(strategy))?;
    let s0 = run.config.train.seed;
    let seeds = [s0, s0 ^ SECOND_NET_SALT];
    let mut log = JsonLines::create(&stage.file("metrics.jsonl"))?;
    let out = cotrain(
        [encoder, encoder],
        seeds,
        &data.inputs(),
        &data.eval(),
        &run.config.train,
        strategy,
        &mut |m: &CotrainMetrics, _| log.push(m),
    )?;
    log.finish()?;
    for (tag, net) in ["a", "b"].iter().zip(&out.networks) {
        save_network(&stage.file(&format!("net_{tag}.ckpt")), net, &meta(run, run.config.train.epochs))?;
    }
    let indep = run.stage_dir(&cotrain_stage_name(CotrainStrategy::Indep)).join("summary.json");
    let welch_vs_indep = if strategy != CotrainStrategy::Indep && indep.is_file() {
        let base: CotrainSummary = read_json(&indep)?;
        welch_t_test(&out.best_individual, &base.best_individual).ok()
    } else {
        None
    };
    let summary = CotrainSummary {
        strategy,
        seed: run.seed,
        net_seeds: seeds,
        final_individual: out.final_individual,
        best_individual: out.best_individual,
        final_ensemble: out.final_ensemble,
        best_ensemble: out.best_ensemble,
        welch_vs_indep,
    };
    write_json(&stage.file("summary.json"), &summary)?;
    stage.commit()?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// report

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, n })
    }

    /// `"mean ± std"` of fractions shown as percentages.
    pub fn pct(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }

    pub fn plain(&self) -> String {
        format!("{:.3} ± {:.3}", self.mean, self.std)
    }
}

fn stat_of(xs: impl IntoIterator<Item = Option<f64>>) -> Option<Stat> {
    let v: Vec<f64> = xs.into_iter().flatten().collect();
    Stat::of(&v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub block_index: usize,
    pub auroc: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub detector: String,
    pub auroc: Option<Stat>,
    pub recall_clean: Option<Stat>,
    pub recall_noise: Option<Stat>,
    pub kept: Stat,
    pub best_accuracy: Stat,
    pub final_accuracy: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PearsonStats {
    pub z_w: Option<Stat>,
    pub z_rrl: Option<Stat>,
    pub w_rrl: Option<Stat>,
}

/// Clean samples one detector misses (score < 0.5) and how many of those
/// the others retrieve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissedRow {
    pub missed_by: String,
    pub missed: Stat,
    pub retrieved: Vec<(String, Stat)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub strategy: String,
    pub best_accuracy: Stat,
    pub final_accuracy: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table3Row {
    pub strategy: CotrainStrategy,
    pub individual_best: Stat,
    pub ensemble_best: Stat,
    pub individual_final: Stat,
    pub ensemble_final: Stat,
    /// Two-sided Welch p-values against INDEP.
    pub p_individual: Option<f64>,
    pub p_ensemble: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub config_hash: String,
    pub noise_ratio: f64,
    pub seeds: Vec<u64>,
    pub probe: Vec<ProbeRow>,
    pub table1: Vec<Table1Row>,
    pub pearson: Option<PearsonStats>,
    pub missed: Vec<MissedRow>,
    pub table2: Vec<Table2Row>,
    pub table3: Vec<Table3Row>,
}

fn missed_counts(missed: &CleanScores, others: &[(&str, &CleanScores)], oracle: &[bool]) -> (f64, Vec<f64>) {
    let m = missed.binarize(DEFAULT_THRESHOLD);
    let lost: Vec<usize> = (0..oracle.len()).filter(|&i| oracle[i] && !m[i]).collect();
    let mut counts: Vec<f64> = others
        .iter()
        .map(|(_, s)| lost.iter().filter(|&&i| s.values[i] >= DEFAULT_THRESHOLD).count() as f64)
        .collect();
    let either = lost
        .iter()
        .filter(|&&i| others.iter().any(|(_, s)| s.values[i] >= DEFAULT_THRESHOLD))
        .count();
    counts.push(either as f64);
    (lost.len() as f64, counts)
}

impl Report {
    /// Aggregates whatever stages exist under `root` for `config`'s seeds.
    /// Reads logged artifacts only.
    pub fn collect(config: &ExperimentConfig, root: &Path) -> Result<Report> {
        let runs: Vec<Run> = config
            .seeds
            .iter()
            .map(|&s| Run::new(config, root, s, false))
            .collect::<Result<_>>()?;
        let hash = config.hash();
        let mut seeds = Vec::new();

        let mut probe: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut t1: Vec<(String, Vec<DetectRow>)> = Vec::new();
        let mut pearsons: Vec<PearsonTriple> = Vec::new();
        let mut missed: Vec<(String, Vec<String>, Vec<f64>, Vec<Vec<f64>>)> = Vec::new();
        let mut t2: Vec<(String, Vec<RunSummary>)> = Vec::new();
        let mut t3: Vec<(CotrainStrategy, Vec<CotrainSummary>)> = Vec::new();

        for run in &runs {
            let mut any = false;
            if run.is_complete(STAGE_PROBE) {
                any = true;
                let rows: Vec<BlockAuroc> = read_json(&run.stage_dir(STAGE_PROBE).join("block_auroc.json"))?;
                for r in rows {
                    match probe.iter_mut().find(|(b, _)| *b == r.block_index) {
                        Some((_, v)) => v.push(r.auroc),
                        None => probe.push((r.block_index, vec![r.auroc])),
                    }
                }
            }
            if run.is_complete(STAGE_DETECT) {
                any = true;
                let dir = run.stage_dir(STAGE_DETECT);
                let rep: DetectReport = read_json(&dir.join("table1.json"))?;
                for r in rep.rows {
                    match t1.iter_mut().find(|(d, _)| *d == r.detector) {
                        Some((_, v)) => v.push(r),
                        None => t1.push((r.detector.clone(), vec![r])),
                    }
                }
                pearsons.push(rep.pearson);
                let data_dir = run.require(STAGE_DATA, "build-data")?;
                let manifest = DatasetManifest::read_from(BufReader::new(File::open(data_dir.join("manifest.tsv"))?))?;
                let oracle = manifest.oracle_flags();
                let load = |n: &str| -> Result<Option<CleanScores>> {
                    let p = dir.join(format!("scores_{n}.csv"));
                    if p.is_file() {
                        Ok(Some(read_scores(&p)?))
                    } else {
                        Ok(None)
                    }
                };
                let (pls, rrl, w) = (load(DET_PLS)?, load(DET_RRL)?, load(DET_W)?);
                let groups: [(&str, &Option<CleanScores>, [(&str, &Option<CleanScores>); 2]); 2] = [
                    (DET_W, &w, [(DET_PLS, &pls), (DET_RRL, &rrl)]),
                    (DET_PLS, &pls, [(DET_W, &w), (DET_RRL, &rrl)]),
                ];
                for (name, m, others) in groups {
                    let (Some(m), [(n1, Some(s1)), (n2, Some(s2))]) = (m, others) else {
                        continue;
                    };
                    let (lost, counts) = missed_counts(m, &[(n1, s1), (n2, s2)], &oracle);
                    let labels = vec![n1.to_string(), n2.to_string(), "either".to_string()];
                    match missed.iter_mut().find(|(n, ..)| n == name) {
                        Some((_, _, l, c)) => {
                            l.push(lost);
                            c.push(counts);
                        }
                        None => missed.push((name.to_string(), labels, vec![lost], vec![counts])),
                    }
                }
            }
            let mut names: Vec<String> =
                config.experiments.strategies.iter().map(|k| k.as_str().to_string()).collect();
            names.push(BASELINE.to_string());
            for k in StrategyKind::ALL {
                if !names.iter().any(|n| n == k.as_str()) {
                    names.push(k.as_str().to_string());
                }
            }
            for n in names {
                let st = train_stage_name(&n);
                if run.is_complete(&st) {
                    any = true;
                    let s: RunSummary = read_json(&run.stage_dir(&st).join("summary.json"))?;
                    match t2.iter_mut().find(|(m, _)| *m == n) {
                        Some((_, v)) => v.push(s),
                        None => t2.push((n, vec![s])),
                    }
                }
            }
            for strat in CotrainStrategy::ALL {
                let st = cotrain_stage_name(strat);
                if run.is_complete(&st) {
                    any = true;
                    let s: CotrainSummary = read_json(&run.stage_dir(&st).join("summary.json"))?;
                    match t3.iter_mut().find(|(m, _)| *m == strat) {
                        Some((_, v)) => v.push(s),
                        None => t3.push((strat, vec![s])),
                    }
                }
            }
            if any {
                seeds.push(run.seed);
            }
        }

        probe.sort_by_key(|(b, _)| *b);
        let probe = probe
            .into_iter()
            .filter_map(|(b, v)| Stat::of(&v).map(|auroc| ProbeRow { block_index: b, auroc }))
            .collect();
        let table1 = t1
            .into_iter()
            .map(|(d, rows)| Table1Row {
                detector: d,
                auroc: stat_of(rows.iter().map(|r| r.auroc)),
                recall_clean: stat_of(rows.iter().map(|r| r.recall_clean)),
                recall_noise: stat_of(rows.iter().map(|r| r.recall_noise)),
                kept: stat_of(rows.iter().map(|r| Some(r.kept as f64))).expect("non-empty"),
                best_accuracy: stat_of(rows.iter().map(|r| Some(r.best_accuracy))).expect("non-empty"),
                final_accuracy: stat_of(rows.iter().map(|r| Some(r.final_accuracy))).expect("non-empty"),
            })
            .collect();
        let pearson = (!pearsons.is_empty()).then(|| PearsonStats {
            z_w: stat_of(pearsons.iter().map(|p| p.z_w)),
            z_rrl: stat_of(pearsons.iter().map(|p| p.z_rrl)),
            w_rrl: stat_of(pearsons.iter().map(|p| p.w_rrl)),
        });
        let missed = missed
            .into_iter()
            .map(|(name, labels, lost, counts)| MissedRow {
                missed_by: name,
                missed: Stat::of(&lost).expect("non-empty"),
                retrieved: labels
                    .into_iter()
                    .enumerate()
                    .map(|(j, l)| (l, Stat::of(&counts.iter().map(|c| c[j]).collect::<Vec<_>>()).expect("non-empty")))
                    .collect(),
            })
            .collect();
        let table2 = t2
            .into_iter()
            .map(|(n, v)| Table2Row {
                strategy: n,
                best_accuracy: stat_of(v.iter().map(|s| Some(s.best_accuracy))).expect("non-empty"),
                final_accuracy: stat_of(v.iter().map(|s| Some(s.final_accuracy))).expect("non-empty"),
            })
            .collect();
        let indiv = |v: &[CotrainSummary], f: fn(&CotrainSummary) -> [f64; 2]| -> Vec<f64> {
            v.iter().flat_map(f).collect()
        };
        let indep = t3.iter().find(|(s, _)| *s == CotrainStrategy::Indep).map(|(_, v)| v.clone());
        let table3 = t3
            .iter()
            .map(|(strat, v)| {
                let ib = indiv(v, |s| s.best_individual);
                let eb: Vec<f64> = v.iter().map(|s| s.best_ensemble).collect();
                let (p_individual, p_ensemble) = match (&indep, *strat) {
                    (Some(base), s) if s != CotrainStrategy::Indep => (
                        welch_t_test(&ib, &indiv(base, |s| s.best_individual)).ok().map(|w| w.p_value),
                        welch_t_test(&eb, &base.iter().map(|s| s.best_ensemble).collect::<Vec<_>>())
                            .ok()
                            .map(|w| w.p_value),
                    ),
                    _ => (None, None),
                };
                Table3Row {
                    strategy: *strat,
                    individual_best: Stat::of(&ib).expect("non-empty"),
                    ensemble_best: Stat::of(&eb).expect("non-empty"),
                    individual_final: Stat::of(&indiv(v, |s| s.final_individual)).expect("non-empty"),
                    ensemble_final: stat_of(v.iter().map(|s| Some(s.final_ensemble))).expect("non-empty"),
                    p_individual,
                    p_ensemble,
                }
            })
            .collect();

        Ok(Report {
            name: config.name.clone(),
            config_hash: hash,
            noise_ratio: config.noise.ratio,
            seeds,
            probe,
            table1,
            pearson,
            missed,
            table2,
            table3,
        })
    }

    pub fn table2_row(&self, name: &str) -> Option<&Table2Row> {
        self.table2.iter().find(|r| r.strategy == name)
    }

    pub fn table1_row(&self, name: &str) -> Option<&Table1Row> {
        self.table1.iter().find(|r| r.detector == name)
    }

    pub fn table3_row(&self, s: CotrainStrategy) -> Option<&Table3Row> {
        self.table3.iter().find(|r| r.strategy == s)
    }

    /// Markdown tables; accuracies, AUROC and recalls in percent.
    pub fn render(&self) -> String {
        let opt = |s: &Option<Stat>| s.as_ref().map_or("n/a".to_string(), Stat::pct);
        let optp = |p: Option<f64>| p.map_or("n/a".to_string(), |p| format!("{p:.4}"));
        let mut o = String::new();
        o.push_str(&format!(
            "# {} (config {}, noise {:.0}%, seeds {:?})\n\nValues are mean ± std over seeds.\n",
            self.name,
            self.config_hash,
            100.0 * self.noise_ratio,
            self.seeds
        ));
        if !self.probe.is_empty() {
            o.push_str("\n## Oracle ID/OOD linear probe by block\n\n| block | AUROC |\n|---|---|\n");
            for r in &self.probe {
                o.push_str(&format!("| {} | {} |\n", r.block_index, r.auroc.pct()));
            }
        }
        if !self.table1.is_empty() {
            o.push_str(
                "\n## Detection and ignore-the-noise training\n\n\
                 | detector | AUROC | clean recall | noise recall | kept | best acc | final acc |\n\
                 |---|---|---|---|---|---|---|\n",
            );
            for r in &self.table1 {
                o.push_str(&format!(
                    "| {} | {} | {} | {} | {:.1} | {} | {} |\n",
                    r.detector,
                    opt(&r.auroc),
                    opt(&r.recall_clean),
                    opt(&r.recall_noise),
                    r.kept.mean,
                    r.best_accuracy.pct(),
                    r.final_accuracy.pct()
                ));
            }
        }
        if let Some(p) = &self.pearson {
            let f = |s: &Option<Stat>| s.as_ref().map_or("n/a".to_string(), Stat::plain);
            o.push_str(&format!(
                "\n## Detector correlation (Pearson, last epoch)\n\n| pair | r |\n|---|---|\n\
                 | Z_PLS, Z_RRL | {} |\n| W, Z_PLS | {} |\n| W, Z_RRL | {} |\n",
                f(&p.z_rrl),
                f(&p.z_w),
                f(&p.w_rrl)
            ));
        }
        if !self.missed.is_empty() {
            o.push_str("\n## Clean samples missed by one detector, retrieved by others\n\n");
            for m in &self.missed {
                let parts: Vec<String> = m
                    .retrieved
                    .iter()
                    .map(|(n, s)| format!("{n} {:.1} ± {:.1}", s.mean, s.std))
                    .collect();
                o.push_str(&format!(
                    "- missed by {}: {:.1} ± {:.1}; retrieved by {}\n",
                    m.missed_by,
                    m.missed.mean,
                    m.missed.std,
                    parts.join(", ")
                ));
            }
        }
        if !self.table2.is_empty() {
            o.push_str("\n## Detector combination strategies\n\n| strategy | best acc | final acc |\n|---|---|---|\n");
            for r in &self.table2 {
                o.push_str(&format!(
                    "| {} | {} | {} |\n",
                    r.strategy,
                    r.best_accuracy.pct(),
                    r.final_accuracy.pct()
                ));
            }
        }
        if !self.table3.is_empty() {
            o.push_str(
                "\n## Co-training strategies\n\n\
                 | strategy | individual best | ensemble best | individual final | ensemble final | p indiv. vs INDEP | p ens. vs INDEP |\n\
                 |---|---|---|---|---|---|---|\n",
            );
            for r in &self.table3 {
                o.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} | {} |\n",
                    r.strategy,
                    r.individual_best.pct(),
                    r.ensemble_best.pct(),
                    r.individual_final.pct(),
                    r.ensemble_final.pct(),
                    optp(r.p_individual),
                    optp(r.p_ensemble)
                ));
            }
        }
        o
    }

    /// Writes `report-<hash>.md` and `report-<hash>.json` under `root`.
    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        fs::create_dir_all(root)?;
        let md = root.join(format!("report-{}.md", self.config_hash));
        fs::write(&md, self.render())?;
        write_json(&root.join(format!("report-{}.json", self.config_hash)), self)?;
        Ok(md)
    }
}
