//! Config-driven experiments: data generation, training grids, evaluation,
//! DC vs M-DC comparison, α sweeps and gradient checks.
//!
//! Everything here writes under one output directory:
//!
//! ```text
//! <out>/config.txt              verbatim copy of the config
//! <out>/data/manifest.csv       scene_id,split,seed
//! <out>/data/<scene_id>/        mixture.wav, src<n>.wav, meta.txt
//! <out>/checkpoints/<run>.spxe
//! <out>/logs/<run>.csv          epoch,train_loss,val_loss,lr,seconds
//! <out>/reports/<run>.csv       per-scene, per-source metrics
//! <out>/compare.csv, <out>/sweep_alpha.csv
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::{kmeans, labels_to_masks, KMeansConfig};
use crate::error::{Error, Result};
use crate::metrics::{align_and_report, Db, SeparationReport};
use crate::network::{Activation, Network, NetworkConfig};
use crate::linalg::{dot, Matrix};
use crate::objective::{
    affinity_gradient_raw, mask_loss, MaskTerm,
};
use crate::signal::{
    apply_masks, istft, read_scene_dir, synth_scene, write_scene_dir, MixtureScene, SceneKind,
    SceneMeta, SceneParams, StftConfig, DEFAULT_SILENCE_DB,
};
use crate::simplex::TargetMode;
use crate::trainer::{train, utterance_loss, TrainConfig, TrainLog, Utterance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Dc,
    Mdc,
    ChimeraDc,
    ChimeraMdc,
}

impl Method {
    pub fn target_mode(self) -> TargetMode {
        match self {
            Method::Dc | Method::ChimeraDc => TargetMode::OneHot,
            Method::Mdc | Method::ChimeraMdc => TargetMode::Simplex,
        }
    }

    pub fn is_chimera(self) -> bool {
        matches!(self, Method::ChimeraDc | Method::ChimeraMdc)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Dc => "dc",
            Method::Mdc => "mdc",
            Method::ChimeraDc => "chimera-dc",
            Method::ChimeraMdc => "chimera-mdc",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dc" => Ok(Method::Dc),
            "mdc" => Ok(Method::Mdc),
            "chimera-dc" => Ok(Method::ChimeraDc),
            "chimera-mdc" => Ok(Method::ChimeraMdc),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: SceneKind,
    pub n_speakers: usize,
    pub duration_s: f64,
    pub leading_silence_s: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub drop_silence: bool,
    pub silence_db: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: SceneKind::DisjointTones,
            n_speakers: 2,
            duration_s: 0.5,
            leading_silence_s: 0.0,
            n_train: 16,
            n_val: 4,
            n_eval: 4,
            seed: 0,
            drop_silence: true,
            silence_db: DEFAULT_SILENCE_DB,
        }
    }
}

/// Every knob of an experiment grid. Parsed from `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub stft: StftConfig,
    /// Template; `input_dim`, `n_speakers`, `with_mi_head` and `seed` are set per run.
    pub net: NetworkConfig,
    /// Template; `target_mode`, `alpha` and `seed` are set per run.
    pub train: TrainConfig,
    /// Template; `k` is the speaker count.
    pub kmeans: KMeansConfig,
    /// Text the config was parsed from, copied into the output directory.
    pub source_text: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Mdc],
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            stft: StftConfig::default(),
            net: NetworkConfig::default(),
            train: TrainConfig::default(),
            kmeans: KMeansConfig::new(2),
            source_text: String::new(),
        }
    }
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| format!("bad list item {s:?}")))
        .collect()
}

fn parse_value<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("bad value {value:?}"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("bad boolean {value:?}")),
    }
}

impl ExperimentConfig {
    /// Parses `key = value` lines. `#` starts a comment; keys may only appear once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self {
            source_text: text.to_string(),
            ..Self::default()
        };
        let mut seen = BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { line: no + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let enum_err = |e: Error| e.to_string();
        match key {
            "method" | "methods" => self.methods = parse_list(v)?,
            "alphas" => self.alphas = parse_list(v)?,
            "seeds" => self.seeds = parse_list(v)?,
            "out" => self.out_dir = PathBuf::from(v),
            "data.kind" => self.data.kind = v.parse().map_err(enum_err)?,
            "data.n_speakers" => self.data.n_speakers = parse_value(v)?,
            "data.duration_s" => self.data.duration_s = parse_value(v)?,
            "data.leading_silence_s" => self.data.leading_silence_s = parse_value(v)?,
            "data.n_train" => self.data.n_train = parse_value(v)?,
            "data.n_val" => self.data.n_val = parse_value(v)?,
            "data.n_eval" => self.data.n_eval = parse_value(v)?,
            "data.seed" => self.data.seed = parse_value(v)?,
            "data.drop_silence" => self.data.drop_silence = parse_bool(v)?,
            "data.silence_db" => self.data.silence_db = parse_value(v)?,
            "stft.win_len" => self.stft.win_len = parse_value(v)?,
            "stft.hop" => self.stft.hop = parse_value(v)?,
            "stft.sample_rate" => self.stft.sample_rate = parse_value(v)?,
            "net.context" => self.net.context = parse_value(v)?,
            "net.hidden" => self.net.hidden = parse_list(v)?,
            "net.embedding_dim" => self.net.embedding_dim = parse_value(v)?,
            "net.activation" => self.net.activation = v.parse::<Activation>().map_err(enum_err)?,
            "train.learning_rate" => self.train.learning_rate = parse_value(v)?,
            "train.decay_factor" => self.train.decay_factor = parse_value(v)?,
            "train.plateau_patience" => self.train.plateau_patience = parse_value(v)?,
            "train.stop_patience" => self.train.stop_patience = parse_value(v)?,
            "train.batch_size" => self.train.batch_size = parse_value(v)?,
            "train.max_epochs" => self.train.max_epochs = parse_value(v)?,
            "train.rms_decay" => self.train.rms_decay = parse_value(v)?,
            "train.rms_epsilon" => self.train.rms_epsilon = parse_value(v)?,
            "kmeans.max_iters" => self.kmeans.max_iters = parse_value(v)?,
            "kmeans.tol" => self.kmeans.tol = parse_value(v)?,
            "kmeans.n_restarts" => self.kmeans.n_restarts = parse_value(v)?,
            "kmeans.seed" => self.kmeans.seed = parse_value(v)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("at least one method is required"));
        }
        if self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("alphas must lie in [0, 1]"));
        }
        if self.methods.iter().any(|m| m.is_chimera()) && self.alphas.is_empty() {
            return Err(Error::invalid("chimera methods need at least one alpha"));
        }
        if self.data.n_train == 0 || self.data.n_val == 0 {
            return Err(Error::invalid("training and validation splits must be non-empty"));
        }
        self.stft.validate()?;
        for run in self.runs() {
            self.network_config(&run).validate()?;
            self.train_config(&run).validate()?;
        }
        Ok(())
    }

    /// Every (method, α, seed) combination to train.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut runs = Vec::new();
        for &method in &self.methods {
            let alphas = if method.is_chimera() { self.alphas.clone() } else { vec![1.0] };
            for &alpha in &alphas {
                for &seed in &self.seeds {
                    runs.push(RunSpec { method, alpha, seed });
                }
            }
        }
        runs
    }

    pub fn network_config(&self, run: &RunSpec) -> NetworkConfig {
        NetworkConfig {
            input_dim: self.stft.n_freqs(),
            n_speakers: self.data.n_speakers,
            with_mi_head: run.method.is_chimera(),
            seed: run.seed,
            ..self.net.clone()
        }
    }

    pub fn train_config(&self, run: &RunSpec) -> TrainConfig {
        TrainConfig {
            target_mode: run.method.target_mode(),
            alpha: run.alpha,
            seed: run.seed,
            ..self.train.clone()
        }
    }

    pub fn kmeans_config(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.data.n_speakers,
            ..self.kmeans.clone()
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn checkpoint_path(&self, run: &RunSpec) -> PathBuf {
        self.out_dir.join("checkpoints").join(format!("{}.spxe", run.id()))
    }

    fn write_config_copy(&self) -> Result<()> {
        ensure_dir(&self.out_dir)?;
        write_file(&self.out_dir.join("config.txt"), &self.source_text)
    }
}

/// One trained model of a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub method: Method,
    pub alpha: f64,
    pub seed: u64,
}

impl RunSpec {
    pub fn id(&self) -> String {
        format!("{}_a{}_s{}", self.method, self.alpha, self.seed)
    }

    /// Whether evaluation clusters the embeddings (α = 1) rather than using the MI head.
    pub fn uses_clustering(&self) -> bool {
        !self.method.is_chimera() || self.alpha >= 1.0
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Eval,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Eval => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Eval => "eval",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "eval" => Ok(Split::Eval),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// SplitMix64 finalizer, used to derive independent per-scene seeds.
fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub split: Split,
    pub seed: u64,
}

pub fn scene_entries(data: &DataConfig) -> Vec<ManifestEntry> {
    let mut out = Vec::new();
    for (split, count) in [(Split::Train, data.n_train), (Split::Val, data.n_val), (Split::Eval, data.n_eval)] {
        for i in 0..count {
            out.push(ManifestEntry {
                scene_id: format!("{split}-{i:04}"),
                split,
                seed: mix_seed(mix_seed(data.seed ^ (split.tag() << 56)) ^ i as u64),
            });
        }
    }
    out
}

fn scene_params(data: &DataConfig, seed: u64) -> SceneParams {
    SceneParams {
        leading_silence_s: data.leading_silence_s,
        silence_db: data.silence_db,
        ..SceneParams::new(data.kind, data.n_speakers, data.duration_s, seed)
    }
}

/// Writes every scene of the configured splits plus `manifest.csv`.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<Vec<ManifestEntry>> {
    cfg.write_config_copy()?;
    let dir = cfg.data_dir();
    ensure_dir(&dir)?;
    let entries = scene_entries(&cfg.data);
    let mut manifest = String::from("scene_id,split,seed\n");
    for e in &entries {
        let scene = synth_scene(&scene_params(&cfg.data, e.seed), &cfg.stft)?;
        let meta = SceneMeta {
            kind: cfg.data.kind,
            seed: e.seed,
            sample_rate: cfg.stft.sample_rate,
            n_speakers: cfg.data.n_speakers,
        };
        write_scene_dir(&dir.join(&e.scene_id), &scene, &meta)?;
        manifest.push_str(&format!("{},{},{}\n", e.scene_id, e.split, e.seed));
    }
    write_file(&dir.join("manifest.csv"), &manifest)?;
    Ok(entries)
}

pub fn read_manifest(cfg: &ExperimentConfig) -> Result<Vec<ManifestEntry>> {
    let path = cfg.data_dir().join("manifest.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |message: String| Error::Format {
        path: path.clone(),
        message,
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let parts: Vec<&str> = line.split(',').collect();
            let [id, split, seed] = parts[..] else {
                return Err(bad(format!("expected 3 fields, got {line:?}")));
            };
            Ok(ManifestEntry {
                scene_id: id.to_string(),
                split: split.parse().map_err(|e: Error| bad(e.to_string()))?,
                seed: seed.parse().map_err(|_| bad(format!("bad seed in {line:?}")))?,
            })
        })
        .collect()
}

/// Scenes of one split, in manifest order.
pub fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Vec<(String, MixtureScene)>> {
    read_manifest(cfg)?
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let (scene, meta) = read_scene_dir(&cfg.data_dir().join(&e.scene_id), &cfg.stft, cfg.data.silence_db)?;
            if meta.n_speakers != cfg.data.n_speakers {
                return Err(Error::invalid(format!(
                    "scene {} has {} speakers, config expects {}",
                    e.scene_id, meta.n_speakers, cfg.data.n_speakers
                )));
            }
            Ok((e.scene_id, scene))
        })
        .collect()
}

fn utterances(cfg: &ExperimentConfig, scenes: &[(String, MixtureScene)]) -> Result<Vec<Utterance>> {
    scenes
        .iter()
        .map(|(_, s)| Utterance::from_scene(s, cfg.net.context, cfg.data.drop_silence))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub run: RunSpec,
    pub network: Network,
    pub log: TrainLog,
}

/// Trains every run of the grid, writing its checkpoint and log.
pub fn train_runs(cfg: &ExperimentConfig) -> Result<Vec<TrainedRun>> {
    cfg.write_config_copy()?;
    let train_set = utterances(cfg, &load_split(cfg, Split::Train)?)?;
    let val_set = utterances(cfg, &load_split(cfg, Split::Val)?)?;
    ensure_dir(&cfg.out_dir.join("checkpoints"))?;
    ensure_dir(&cfg.out_dir.join("logs"))?;
    cfg.runs()
        .into_iter()
        .map(|run| {
            let (network, log) = train(&cfg.network_config(&run), &cfg.train_config(&run), &train_set, &val_set)?;
            network.save(&cfg.checkpoint_path(&run))?;
            write_file(&cfg.out_dir.join("logs").join(format!("{}.csv", run.id())), &log.to_csv())?;
            Ok(TrainedRun { run, network, log })
        })
        .collect()
}

/// Where separation masks come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    /// k-means on DC-head embeddings, binary masks.
    ClusteredBinary,
    /// MI-head ratio masks.
    MiRatio,
    /// Ideal binary masks from the references.
    Oracle,
}

impl fmt::Display for MaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskSource::ClusteredBinary => "binary-kmeans",
            MaskSource::MiRatio => "ratio-mi",
            MaskSource::Oracle => "oracle-ibm",
        })
    }
}

/// Masks, resynthesizes and scores one scene.
pub fn separate_scene(
    cfg: &ExperimentConfig,
    scene: &MixtureScene,
    model: Option<(&Network, &RunSpec)>,
) -> Result<(SeparationReport, MaskSource)> {
    let (masks, source) = match model {
        None => (scene.ideal_binary_masks(), MaskSource::Oracle),
        Some((net, run)) => {
            let features = crate::signal::log_magnitude_features(&scene.mix_spec, net.config.context)?;
            let out = net.forward(&features)?;
            if run.uses_clustering() {
                let kept = scene.kept_bins(cfg.data.drop_silence);
                let points = out.embeddings.matrix().select_rows(&kept);
                let clusters = kmeans(&points, &cfg.kmeans_config())?;
                let masks = labels_to_masks(
                    &clusters.labels,
                    &kept,
                    scene.n_frames(),
                    scene.n_freqs(),
                    cfg.data.n_speakers,
                )?;
                (masks, MaskSource::ClusteredBinary)
            } else {
                let masks = out
                    .masks
                    .ok_or_else(|| Error::invalid("checkpoint has no MI head but α < 1"))?;
                (masks, MaskSource::MiRatio)
            }
        }
    };
    let estimates = apply_masks(&scene.mix_spec, &masks)?
        .iter()
        .map(|spec| istft(spec, &cfg.stft))
        .collect::<Result<Vec<_>>>()?;
    let len = estimates[0].len();
    let references: Vec<&[f64]> = scene.sources.iter().map(|s| &s[..len]).collect();
    let report = align_and_report(&estimates, &references, &scene.mixture[..len])?;
    Ok((report, source))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub scene_id: String,
    /// Method name, or `oracle`.
    pub method: String,
    pub alpha: f64,
    pub seed: u64,
    pub source_idx: usize,
    pub si_sdr: Db,
    pub si_sdr_i: Db,
    pub sdr: Db,
    pub sir: Db,
    pub sar: Db,
    pub permutation: Vec<usize>,
}

pub const REPORT_HEADER: &str = "scene_id,method,alpha,seed,source_idx,si_sdr,si_sdr_i,sdr,sir,sar,permutation";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        let perm: Vec<String> = r.permutation.iter().map(ToString::to_string).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.scene_id,
            r.method,
            r.alpha,
            r.seed,
            r.source_idx,
            r.si_sdr,
            r.si_sdr_i,
            r.sdr,
            r.sir,
            r.sar,
            perm.join("-")
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<ReportRow>,
    pub mask_source: MaskSource,
}

fn evaluate_scenes(
    cfg: &ExperimentConfig,
    scenes: &[(String, MixtureScene)],
    model: Option<(&Network, &RunSpec)>,
) -> Result<Evaluation> {
    let mut rows = Vec::new();
    let mut mask_source = MaskSource::Oracle;
    let (method, alpha, seed) = match model {
        Some((_, run)) => (run.method.to_string(), run.alpha, run.seed),
        None => ("oracle".to_string(), 1.0, 0),
    };
    for (id, scene) in scenes {
        let (report, source) = separate_scene(cfg, scene, model)?;
        mask_source = source;
        for (j, m) in report.sources.iter().enumerate() {
            rows.push(ReportRow {
                scene_id: id.clone(),
                method: method.clone(),
                alpha,
                seed,
                source_idx: j,
                si_sdr: m.si_sdr,
                si_sdr_i: m.si_sdr_i,
                sdr: m.sdr,
                sir: m.sir,
                sar: m.sar,
                permutation: report.permutation.clone(),
            });
        }
    }
    Ok(Evaluation { rows, mask_source })
}

/// Evaluates one run's checkpoint (or the oracle masks when `run` is `None`)
/// on the eval split and writes `reports/<id>.csv` plus `reports/<id>.meta.txt`.
pub fn evaluate(cfg: &ExperimentConfig, run: Option<&RunSpec>) -> Result<Evaluation> {
    cfg.write_config_copy()?;
    let mut scenes = load_split(cfg, Split::Eval)?;
    scenes.sort_by(|a, b| a.0.cmp(&b.0));
    let network = run.map(|r| load_checkpoint(cfg, r)).transpose()?;
    let model = network.as_ref().zip(run);
    let eval = evaluate_scenes(cfg, &scenes, model)?;
    let dir = cfg.out_dir.join("reports");
    ensure_dir(&dir)?;
    let id = run.map_or_else(|| "oracle".to_string(), RunSpec::id);
    write_file(&dir.join(format!("{id}.csv")), &report_csv(&eval.rows))?;
    write_file(
        &dir.join(format!("{id}.meta.txt")),
        &format!("run={id}\nmask_source={}\nscenes={}\n", eval.mask_source, scenes.len()),
    )?;
    Ok(eval)
}

fn load_checkpoint(cfg: &ExperimentConfig, run: &RunSpec) -> Result<Network> {
    let net = Network::load(&cfg.checkpoint_path(run))?;
    let expected = cfg.network_config(run);
    if net.config != expected {
        return Err(Error::invalid(format!(
            "checkpoint {} does not match the configured network",
            run.id()
        )));
    }
    Ok(net)
}

/// Mean of the point metrics over all scene/source rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricMeans {
    pub si_sdr: f64,
    pub si_sdr_i: f64,
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

impl MetricMeans {
    pub fn of(rows: &[ReportRow]) -> Self {
        let n = rows.len() as f64;
        let mean = |f: fn(&ReportRow) -> Db| rows.iter().map(|r| f(r).0).sum::<f64>() / n;
        Self {
            si_sdr: mean(|r| r.si_sdr),
            si_sdr_i: mean(|r| r.si_sdr_i),
            sdr: mean(|r| r.sdr),
            sir: mean(|r| r.sir),
            sar: mean(|r| r.sar),
        }
    }

    fn fields(&self) -> [f64; 5] {
        [self.si_sdr, self.si_sdr_i, self.sdr, self.sir, self.sar]
    }

    fn csv(&self) -> String {
        self.fields().iter().map(|x| Db(*x).to_string()).collect::<Vec<_>>().join(",")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub alpha: f64,
    pub seed: u64,
    pub mask_source: MaskSource,
    pub means: MetricMeans,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSummary {
    pub rows: Vec<SummaryRow>,
    /// Runs whose checkpoint was not found.
    pub missing: Vec<RunSpec>,
    pub csv: String,
}

fn summarize(cfg: &ExperimentConfig, runs: &[RunSpec]) -> Result<(Vec<SummaryRow>, Vec<RunSpec>)> {
    let mut scenes = load_split(cfg, Split::Eval)?;
    scenes.sort_by(|a, b| a.0.cmp(&b.0));
    if scenes.is_empty() {
        return Err(Error::invalid("the eval split is empty"));
    }
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for run in runs {
        if !cfg.checkpoint_path(run).exists() {
            missing.push(*run);
            continue;
        }
        let net = load_checkpoint(cfg, run)?;
        let eval = evaluate_scenes(cfg, &scenes, Some((&net, run)))?;
        rows.push(SummaryRow {
            method: run.method,
            alpha: run.alpha,
            seed: run.seed,
            mask_source: eval.mask_source,
            means: MetricMeans::of(&eval.rows),
        });
    }
    Ok((rows, missing))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub const COMPARE_HEADER: &str = "method,seed,stat,si_sdr,si_sdr_i,sdr,sir,sar";

/// DC vs M-DC on the eval split: one `mean` row per (method, seed), then
/// `across_mean` / `across_std` rows per method and a `missing` row for
/// every absent checkpoint.
pub fn compare(cfg: &ExperimentConfig) -> Result<GridSummary> {
    cfg.write_config_copy()?;
    let runs: Vec<RunSpec> = [Method::Dc, Method::Mdc]
        .iter()
        .flat_map(|&method| cfg.seeds.iter().map(move |&seed| RunSpec { method, alpha: 1.0, seed }))
        .collect();
    let (rows, missing) = summarize(cfg, &runs)?;
    let mut csv = format!("{COMPARE_HEADER}\n");
    for r in &rows {
        csv.push_str(&format!("{},{},mean,{}\n", r.method, r.seed, r.means.csv()));
    }
    for method in [Method::Dc, Method::Mdc] {
        let per_seed: Vec<[f64; 5]> = rows.iter().filter(|r| r.method == method).map(|r| r.means.fields()).collect();
        if per_seed.is_empty() {
            continue;
        }
        let stats: Vec<(f64, f64)> = (0..5)
            .map(|k| mean_std(&per_seed.iter().map(|f| f[k]).collect::<Vec<_>>()))
            .collect();
        let join = |pick: fn(&(f64, f64)) -> f64| stats.iter().map(|s| Db(pick(s)).to_string()).collect::<Vec<_>>().join(",");
        csv.push_str(&format!("{method},all,across_mean,{}\n", join(|s| s.0)));
        csv.push_str(&format!("{method},all,across_std,{}\n", join(|s| s.1)));
    }
    for m in &missing {
        csv.push_str(&format!("{},{},missing,,,,,\n", m.method, m.seed));
    }
    write_file(&cfg.out_dir.join("compare.csv"), &csv)?;
    Ok(GridSummary { rows, missing, csv })
}

pub const SWEEP_HEADER: &str = "alpha,method,seed,mask_source,si_sdr,si_sdr_i,sdr,sir,sar";

/// One row per (α, chimera method, seed), with `missing` rows kept in place.
pub fn sweep_alpha(cfg: &ExperimentConfig) -> Result<GridSummary> {
    cfg.write_config_copy()?;
    let mut runs = Vec::new();
    for &alpha in &cfg.alphas {
        for method in [Method::ChimeraDc, Method::ChimeraMdc] {
            for &seed in &cfg.seeds {
                runs.push(RunSpec { method, alpha, seed });
            }
        }
    }
    let (rows, missing) = summarize(cfg, &runs)?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    let mut done = rows.iter();
    for run in &runs {
        if missing.contains(run) {
            csv.push_str(&format!("{},{},{},missing,,,,,\n", run.alpha, run.method, run.seed));
        } else {
            let r = done.next().expect("one row per present run");
            csv.push_str(&format!("{},{},{},{},{}\n", r.alpha, r.method, r.seed, r.mask_source, r.means.csv()));
        }
    }
    write_file(&cfg.out_dir.join("sweep_alpha.csv"), &csv)?;
    Ok(GridSummary { rows, missing, csv })
}

/// Central-difference step for gradient checks.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Pass threshold for gradients of the objective with respect to `V`.
pub const OBJECTIVE_GRADCHECK_TOL: f64 = 1e-6;
/// Pass threshold for end-to-end parameter gradients.
pub const NETWORK_GRADCHECK_TOL: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|)`; exact agreement, including two zeros, is 0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if analytic == numeric {
        0.0
    } else {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSummary {
    pub coordinates: usize,
    pub objective_max_rel_error: f64,
    pub network_max_rel_error: f64,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.objective_max_rel_error < OBJECTIVE_GRADCHECK_TOL && self.network_max_rel_error < NETWORK_GRADCHECK_TOL
    }
}

impl fmt::Display for GradcheckSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "coordinates per check: {}", self.coordinates)?;
        writeln!(
            f,
            "objective dL/dV   max rel error {:.3e} (tol {OBJECTIVE_GRADCHECK_TOL:e})",
            self.objective_max_rel_error
        )?;
        writeln!(
            f,
            "network dL/dtheta max rel error {:.3e} (tol {NETWORK_GRADCHECK_TOL:e})",
            self.network_max_rel_error
        )?;
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// Frames of the synthetic scene used by [`gradcheck`].
pub const GRADCHECK_FRAMES: usize = 4;

/// Checks analytic gradients against central differences on freshly
/// initialized parameters. Both heads are active (α = 0.5, simplex targets)
/// so the DC and MI paths are exercised together.
pub fn gradcheck(cfg: &ExperimentConfig, coordinates: usize) -> Result<GradcheckSummary> {
    let seed = cfg.seeds[0];
    let run = RunSpec {
        method: Method::ChimeraMdc,
        alpha: 0.5,
        seed,
    };
    let net = Network::new(cfg.network_config(&run))?;
    let scene = synth_scene(&scene_params(&cfg.data, cfg.data.seed), &cfg.stft)?;
    let utt = crop_utterance(&Utterance::from_scene(&scene, cfg.net.context, false)?, GRADCHECK_FRAMES);
    let targets = utt.targets(TargetMode::Simplex)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let h = GRADCHECK_STEP;

    // Losses are differenced against the unperturbed point term by term
    // (see `dc_delta`); differencing two totals of a loss in the hundreds
    // would bury the derivative in roundoff at this step size.
    let v = net.forward(&utt.features)?.embeddings.into_matrix();
    let y = targets.matrix();
    let gv = affinity_gradient_raw(&v, y)?;
    let mut objective_max: f64 = 0.0;
    let mut p = v.clone();
    for _ in 0..coordinates {
        let idx = rng.random_range(0..v.as_slice().len());
        let base = v.as_slice()[idx];
        p.as_mut_slice()[idx] = base + h;
        let plus = dc_delta(&v, &p, y);
        p.as_mut_slice()[idx] = base - h;
        let minus = dc_delta(&v, &p, y);
        p.as_mut_slice()[idx] = base;
        objective_max = objective_max.max(relative_error(gv.as_slice()[idx], (plus - minus) / (2.0 * h)));
    }

    let (_, grads) = utterance_loss(&net, &utt, &targets, run.alpha, true)?;
    let grads = grads.expect("gradient requested");
    let bins = utt.n_bins() as f64;
    let mut network_max: f64 = 0.0;
    let base = outputs(&net, &utt)?;
    let (_, perm) = mask_loss(MaskTerm {
        masks: &base.1,
        mix_mag: &utt.mix_mag,
        src_mags: &utt.src_mags,
    })?;
    let mut probe = net.clone();
    for _ in 0..coordinates {
        let idx = rng.random_range(0..net.params.n_params());
        let theta = net.params.get(idx);
        probe.params.set(idx, theta + h);
        let plus = outputs(&probe, &utt)?;
        probe.params.set(idx, theta - h);
        let minus = outputs(&probe, &utt)?;
        probe.params.set(idx, theta);
        // DC and MI terms are differenced separately so the much larger DC
        // term does not swamp the MI-head derivatives.
        let dc = (dc_delta(&base.0, &plus.0, targets.matrix()) - dc_delta(&base.0, &minus.0, targets.matrix())) / (2.0 * h);
        let mi = (mi_delta(&base.1, &plus.1, &utt, &perm) - mi_delta(&base.1, &minus.1, &utt, &perm)) / (2.0 * h);
        let numeric = (run.alpha * dc + (1.0 - run.alpha) * mi) / bins;
        network_max = network_max.max(relative_error(grads.get(idx), numeric));
    }
    Ok(GradcheckSummary {
        coordinates,
        objective_max_rel_error: objective_max,
        network_max_rel_error: network_max,
    })
}

/// Embeddings (kept bins) and masks of one forward pass.
fn outputs(net: &Network, utt: &Utterance) -> Result<(Matrix, Vec<Matrix>)> {
    let out = net.forward(&utt.features)?;
    let masks = out.masks.ok_or_else(|| Error::invalid("gradient check needs the MI head"))?;
    Ok((out.embeddings.select_rows(&utt.kept).into_matrix(), masks))
}

/// `‖V₁V₁ᵀ − YYᵀ‖² − ‖V₀V₀ᵀ − YYᵀ‖²`, summed pair by pair as
/// `(a₁ − a₀)(a₁ + a₀ − 2t)` so the roundoff scales with the change.
fn dc_delta(v0: &Matrix, v1: &Matrix, y: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..v0.rows() {
        for j in 0..v0.rows() {
            let a0 = dot(v0.row(i), v0.row(j));
            let a1 = dot(v1.row(i), v1.row(j));
            let t = dot(y.row(i), y.row(j));
            total += (a1 - a0) * (a1 + a0 - 2.0 * t);
        }
    }
    total
}

/// Change of the unweighted mask loss under a fixed permutation, bin by bin.
fn mi_delta(m0: &[Matrix], m1: &[Matrix], utt: &Utterance, perm: &[usize]) -> f64 {
    let mut total = 0.0;
    for (k, &src) in perm.iter().enumerate() {
        let it = m0[k]
            .as_slice()
            .iter()
            .zip(m1[k].as_slice())
            .zip(utt.mix_mag.as_slice())
            .zip(utt.src_mags[src].as_slice());
        for (((&a, &b), &x), &s) in it {
            total += (b - a) * x * ((b + a) * x - 2.0 * s);
        }
    }
    total
}

/// First `frames` frames of an utterance.
pub fn crop_utterance(utt: &Utterance, frames: usize) -> Utterance {
    let frames = frames.min(utt.features.rows());
    let f = utt.mix_mag.cols();
    let rows: Vec<usize> = (0..frames).collect();
    let limit = frames * f;
    let (kept, labels): (Vec<usize>, Vec<usize>) = utt
        .kept
        .iter()
        .zip(&utt.labels)
        .filter(|(&i, _)| i < limit)
        .map(|(&i, &l)| (i, l))
        .unzip();
    Utterance {
        features: utt.features.select_rows(&rows),
        mix_mag: utt.mix_mag.select_rows(&rows),
        src_mags: utt.src_mags.iter().map(|m| m.select_rows(&rows)).collect(),
        labels,
        kept,
    }
}
