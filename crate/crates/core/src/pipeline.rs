//! Experiment configuration and the commands the `cmr` binary exposes.
//!
//! Every command reads its inputs from, and writes its outputs to, the
//! configured output directory, then records a `<command>.run.json`
//! manifest with the config hash, seed, input file hashes, the config
//! hashes of upstream runs and wall-clock timings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::binio::{sha256, HASH_LEN};
use crate::contrastive::{train, write_history_csv, TrainConfig, TrainingData};
use crate::dataset::{Dataset, DatasetManifest};
use crate::encoders::{save_checkpoint, EncoderParams, HyperParams};
use crate::error::{CmrError, Result};
use crate::eval::{evaluate, sweep, write_sweep_csv, EvalMode, Metrics, Predictor, SweepResult};
use crate::featurize::{save_feature_file, FeaturizerConfig};
use crate::kg::Triple;
use crate::retrieval::InferenceConfig;
use crate::stores::{
    build_entity_store, build_knowledge_store, load_entity_store, load_knowledge_store, save_entity_store,
    save_knowledge_store, EntityStore, KnowledgeStore, StoreScope,
};
use crate::synthetic::{generate, GeneratedDataset, SyntheticSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub k_grid: Vec<usize>,
    pub lambda_grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            k_grid: vec![1, 4, 8, 16, 32],
            lambda_grid: vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.95, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Dataset manifest; defaults to `<output_dir>/data/manifest.json`.
    pub dataset: Option<PathBuf>,
    pub featurizer: FeaturizerConfig,
    pub hyper: HyperParams,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub sweep: SweepConfig,
    pub store_scope: StoreScope,
    /// Evaluate with the `(k, λ)` chosen by `sweep` when `sweep.json` exists.
    pub use_sweep: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Predictions written per query by `infer`.
    pub top_n: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            featurizer: FeaturizerConfig::default(),
            hyper: HyperParams::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            sweep: SweepConfig::default(),
            store_scope: StoreScope::default(),
            use_sweep: true,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            top_n: 10,
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CmrError::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| CmrError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CmrError::Config(format!("{}: {e}", path.display())))
    }

    /// Propagate the master seed into the seeded sub-configs.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.featurizer.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.featurizer.validate()?;
        self.hyper.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        self.synthetic.validate()?;
        if self.sweep.k_grid.is_empty() || self.sweep.lambda_grid.is_empty() {
            return Err(CmrError::Config("sweep grids must be non-empty".into()));
        }
        Ok(())
    }

    /// SHA-256 of the config's JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(sha256(&bytes))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset
            .clone()
            .unwrap_or_else(|| self.output_dir.join("data").join("manifest.json"))
    }
}

/// Output file locations under the output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn text_features(&self) -> PathBuf {
        self.root.join("features").join("features_text.cmrf")
    }
    pub fn visual_features(&self) -> PathBuf {
        self.root.join("features").join("features_visual.cmrf")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.cmrp")
    }
    pub fn history(&self) -> PathBuf {
        self.root.join("history.csv")
    }
    pub fn knowledge_store(&self) -> PathBuf {
        self.root.join("knowledge_store.cmrs")
    }
    pub fn knowledge_store_train(&self) -> PathBuf {
        self.root.join("knowledge_store_train.cmrs")
    }
    pub fn entity_store(&self) -> PathBuf {
        self.root.join("entity_store.cmrs")
    }
    pub fn sweep_csv(&self) -> PathBuf {
        self.root.join("sweep.csv")
    }
    pub fn sweep_json(&self) -> PathBuf {
        self.root.join("sweep.json")
    }
    pub fn metrics_json(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn metrics_txt(&self) -> PathBuf {
        self.root.join("metrics.txt")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.tsv")
    }
    pub fn run_manifest(&self, command: &str) -> PathBuf {
        self.root.join(format!("{command}.run.json"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    /// Input file path to SHA-256 hex.
    pub inputs: BTreeMap<String, String>,
    /// Upstream command to the config hash it ran with.
    pub upstream: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub timings_ms: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CmrError::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| CmrError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    art: Artifacts,
    manifest: RunManifest,
    started: Instant,
    phase: Instant,
}

impl<'a> Run<'a> {
    fn start(command: &str, cfg: &'a ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(&cfg.output_dir).map_err(|e| CmrError::io(&cfg.output_dir, e))?;
        log::info!("{command}: output directory {}", cfg.output_dir.display());
        Ok(Self {
            cfg,
            art: Artifacts::new(&cfg.output_dir),
            manifest: RunManifest {
                command: command.into(),
                seed: cfg.seed,
                config_hash: cfg.hash(),
                inputs: BTreeMap::new(),
                upstream: BTreeMap::new(),
                outputs: Vec::new(),
                timings_ms: BTreeMap::new(),
            },
            started: Instant::now(),
            phase: Instant::now(),
        })
    }

    fn require(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(CmrError::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| CmrError::io(path, e))?;
        self.manifest
            .inputs
            .insert(path.display().to_string(), hex::encode(sha256(&bytes)));
        Ok(())
    }

    /// Record the config hash of an upstream run if its manifest exists.
    fn upstream(&mut self, command: &str) -> Result<()> {
        let path = self.art.run_manifest(command);
        if path.exists() {
            let m = RunManifest::load(&path)?;
            self.manifest.upstream.insert(command.into(), m.config_hash);
        }
        Ok(())
    }

    fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    fn lap(&mut self, name: &str) {
        let ms = self.phase.elapsed().as_secs_f64() * 1e3;
        self.manifest.timings_ms.insert(name.into(), ms);
        self.phase = Instant::now();
    }

    fn finish(mut self) -> Result<RunManifest> {
        let total = self.started.elapsed().as_secs_f64() * 1e3;
        self.manifest.timings_ms.insert("total".into(), total);
        let path = self.art.run_manifest(&self.manifest.command);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, text + "\n").map_err(|e| CmrError::io(&path, e))?;
        Ok(self.manifest)
    }

    fn load_dataset(&mut self) -> Result<Dataset> {
        let manifest_path = self.cfg.dataset_path();
        self.require(&manifest_path)?;
        let manifest = DatasetManifest::load(&manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        for f in manifest.files(base) {
            self.require(&f)?;
        }
        self.upstream("gen-synthetic")?;
        let ds = Dataset::load(&manifest_path, &self.cfg.featurizer)?;
        for w in &ds.warnings {
            log::warn!("{} split: {:?} touches no unseen entity", w.split, w.triple);
        }
        self.lap("load_dataset");
        Ok(ds)
    }

    fn load_params(&mut self) -> Result<(EncoderParams, [u8; HASH_LEN])> {
        let path = self.art.checkpoint();
        self.require(&path)?;
        self.upstream("train")?;
        let bytes = fs::read(&path).map_err(|e| CmrError::io(&path, e))?;
        let params = crate::encoders::parse_checkpoint(&bytes)?;
        Ok((params, sha256(&bytes)))
    }

    fn load_ks(&mut self, path: &Path, params: &EncoderParams, hash: &[u8; HASH_LEN]) -> Result<KnowledgeStore> {
        self.require(path)?;
        let ks = load_knowledge_store(path, Some(params.embed_dim))?;
        check_encoder(&ks.encoder_hash, hash, path)?;
        Ok(ks)
    }

    fn load_es(&mut self, params: &EncoderParams, hash: &[u8; HASH_LEN]) -> Result<EntityStore> {
        let path = self.art.entity_store();
        self.require(&path)?;
        let es = load_entity_store(&path, Some(params.embed_dim))?;
        check_encoder(&es.encoder_hash, hash, &path)?;
        Ok(es)
    }
}

fn check_encoder(found: &[u8; HASH_LEN], expected: &[u8; HASH_LEN], path: &Path) -> Result<()> {
    if found != expected {
        return Err(CmrError::Integrity(format!(
            "{} was built with a different checkpoint; rerun memorize",
            path.display()
        )));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| CmrError::io(path, e))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf).map_err(|e| CmrError::io(path, e))
}

pub fn cmd_gen_synthetic(cfg: &ExperimentConfig) -> Result<(GeneratedDataset, RunManifest)> {
    let mut run = Run::start("gen-synthetic", cfg)?;
    let dir = run.art.data_dir();
    let generated = generate(&cfg.synthetic, cfg.seed, &dir)?;
    log::info!(
        "generated {} entities ({} unseen): {} train / {} valid / {} test triples",
        generated.num_entities,
        generated.unseen.len(),
        generated.train,
        generated.valid,
        generated.test
    );
    run.output(&generated.manifest);
    run.lap("generate");
    let manifest = run.finish()?;
    Ok((generated, manifest))
}

/// Export the hashed text features and padded visual features of every
/// entity. Later commands recompute them from the same config.
pub fn cmd_featurize(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut run = Run::start("featurize", cfg)?;
    let ds = run.load_dataset()?;
    let dir = run.art.root.join("features");
    fs::create_dir_all(&dir).map_err(|e| CmrError::io(&dir, e))?;
    let names: Vec<String> = ds.vocab.entities().map(|(_, e)| e.name.clone()).collect();
    let text: Vec<Vec<f32>> = ds.features.entity_text.iter().map(|f| f.values.clone()).collect();
    let visual: Vec<Vec<f32>> = ds.features.entity_visual.iter().map(|f| f.values.clone()).collect();
    let text_path = run.art.text_features();
    let visual_path = run.art.visual_features();
    save_feature_file(&text_path, &names, &text, ds.features.text_dim())?;
    save_feature_file(&visual_path, &names, &visual, ds.features.visual_dim)?;
    run.output(&text_path);
    run.output(&visual_path);
    run.lap("featurize");
    run.finish()
}

/// Encoder-only validation score used for early stopping: train-only
/// knowledge store plus entity store built from the current parameters.
fn validation_metrics(
    params: &EncoderParams,
    ds: &Dataset,
    inference: &InferenceConfig,
) -> Result<Metrics> {
    let ks = build_knowledge_store(params, &ds.split.train, &ds.vocab, &ds.features, [0; HASH_LEN])?;
    let es = build_entity_store(params, &ds.vocab, &ds.features, [0; HASH_LEN])?;
    let predictor = Predictor {
        params,
        ks: &ks,
        es: &es,
        vocab: &ds.vocab,
        features: &ds.features,
    };
    evaluate(&predictor, &ds.split.valid, inference, EvalMode::EsOnly, &ds.filter)
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut run = Run::start("train", cfg)?;
    let ds = run.load_dataset()?;
    let data = TrainingData {
        triples: &ds.split.train,
        train_index: &ds.train_index,
        vocab: &ds.vocab,
        features: &ds.features,
    };
    let outcome = train(&cfg.train, &cfg.hyper, &data, |p| {
        if ds.split.valid.is_empty() {
            return Ok(Metrics::default());
        }
        validation_metrics(p, &ds, &cfg.inference)
    })?;
    run.lap("train");
    log::info!(
        "best epoch {} of {}{}",
        outcome.best_epoch,
        outcome.history.len(),
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    let ckpt = run.art.checkpoint();
    save_checkpoint(&outcome.params, &ckpt)?;
    let history = run.art.history();
    write_with(&history, |buf| write_history_csv(&outcome.history, buf))?;
    run.output(&ckpt);
    run.output(&history);
    run.finish()
}

fn scoped_triples(ds: &Dataset, scope: StoreScope) -> Vec<Triple> {
    match scope {
        StoreScope::TrainOnly => ds.split.train.clone(),
        StoreScope::TrainPlusInferenceGraph => ds.split.all_triples().copied().collect(),
    }
}

pub fn cmd_memorize(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut run = Run::start("memorize", cfg)?;
    let (params, hash) = run.load_params()?;
    let ds = run.load_dataset()?;
    let scoped = scoped_triples(&ds, cfg.store_scope);
    let ks = build_knowledge_store(&params, &scoped, &ds.vocab, &ds.features, hash)?;
    let ks_train = build_knowledge_store(&params, &ds.split.train, &ds.vocab, &ds.features, hash)?;
    let es = build_entity_store(&params, &ds.vocab, &ds.features, hash)?;
    run.lap("encode");
    log::info!(
        "knowledge store: {} records ({} train-only); entity store: {} entities",
        ks.len(),
        ks_train.len(),
        es.len()
    );
    let paths = [
        run.art.knowledge_store(),
        run.art.knowledge_store_train(),
        run.art.entity_store(),
    ];
    save_knowledge_store(&ks, &paths[0])?;
    save_knowledge_store(&ks_train, &paths[1])?;
    save_entity_store(&es, &paths[2])?;
    for p in &paths {
        run.output(p);
    }
    run.lap("save");
    run.finish()
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<(SweepResult, RunManifest)> {
    let mut run = Run::start("sweep", cfg)?;
    let (params, hash) = run.load_params()?;
    let ks = run.load_ks(&run.art.knowledge_store_train(), &params, &hash)?;
    let es = run.load_es(&params, &hash)?;
    run.upstream("memorize")?;
    let ds = run.load_dataset()?;
    if ds.split.valid.is_empty() {
        return Err(CmrError::Config("validation split is empty; nothing to sweep".into()));
    }
    let predictor = Predictor {
        params: &params,
        ks: &ks,
        es: &es,
        vocab: &ds.vocab,
        features: &ds.features,
    };
    let result = sweep(
        &predictor,
        &ds.split.valid,
        &cfg.sweep.k_grid,
        &cfg.sweep.lambda_grid,
        &cfg.inference,
        &ds.filter,
    )?;
    run.lap("sweep");
    log::info!(
        "selected k = {}, lambda = {} (valid MRR {:.4}, Hits@1 {:.4})",
        result.best_k,
        result.best_lambda,
        result.best.mrr,
        result.best.hits1
    );
    let csv_path = run.art.sweep_csv();
    write_with(&csv_path, |buf| write_sweep_csv(&result, buf))?;
    let json_path = run.art.sweep_json();
    write_json(&json_path, &result)?;
    run.output(&csv_path);
    run.output(&json_path);
    let manifest = run.finish()?;
    Ok((result, manifest))
}

/// Contents of `metrics.json`. Holds no timings so that identical runs
/// produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub split: String,
    pub k: usize,
    pub lambda: f64,
    pub store_scope: StoreScope,
    pub full: Metrics,
    pub es_only: Metrics,
    pub ks_only: Metrics,
}

fn effective_inference(run: &mut Run<'_>) -> Result<InferenceConfig> {
    let cfg = run.cfg;
    let mut inference = cfg.inference.clone();
    let path = run.art.sweep_json();
    if cfg.use_sweep && path.exists() {
        run.require(&path)?;
        run.upstream("sweep")?;
        let text = fs::read_to_string(&path).map_err(|e| CmrError::io(&path, e))?;
        let chosen: SweepResult = serde_json::from_str(&text)?;
        inference.k = chosen.best_k;
        inference.lambda = chosen.best_lambda;
    }
    Ok(inference)
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<(MetricsReport, RunManifest)> {
    let mut run = Run::start("eval", cfg)?;
    let (params, hash) = run.load_params()?;
    let ks = run.load_ks(&run.art.knowledge_store(), &params, &hash)?;
    let es = run.load_es(&params, &hash)?;
    run.upstream("memorize")?;
    let inference = effective_inference(&mut run)?;
    let ds = run.load_dataset()?;
    let predictor = Predictor {
        params: &params,
        ks: &ks,
        es: &es,
        vocab: &ds.vocab,
        features: &ds.features,
    };
    let score = |mode| evaluate(&predictor, &ds.split.test, &inference, mode, &ds.filter);
    let report = MetricsReport {
        seed: cfg.seed,
        split: "test".into(),
        k: inference.k,
        lambda: inference.lambda,
        store_scope: cfg.store_scope,
        full: score(EvalMode::Full)?,
        es_only: score(EvalMode::EsOnly)?,
        ks_only: score(EvalMode::KsOnly)?,
    };
    run.lap("evaluate");
    let table = Metrics::table(&[
        ("full", report.full),
        ("es_only", report.es_only),
        ("ks_only", report.ks_only),
    ]);
    log::info!("test metrics (k = {}, lambda = {}):\n{table}", report.k, report.lambda);
    let json_path = run.art.metrics_json();
    write_json(&json_path, &report)?;
    let txt_path = run.art.metrics_txt();
    fs::write(&txt_path, &table).map_err(|e| CmrError::io(&txt_path, e))?;
    run.output(&json_path);
    run.output(&txt_path);
    let manifest = run.finish()?;
    Ok((report, manifest))
}

/// Parse `head<TAB>relation` lines; `relation^-1` names a reversed relation.
pub fn parse_queries(text: &str, path: &Path, ds: &Dataset) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(CmrError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected 2 tab-separated fields, found {}", fields.len()),
            });
        }
        if ds.vocab.entity_id(fields[0]).is_none() {
            return Err(CmrError::UnknownEntity(fields[0].into()));
        }
        if ds.vocab.resolve_relation(fields[1]).is_none() {
            return Err(CmrError::UnknownRelation(fields[1].into()));
        }
        out.push((fields[0].to_string(), fields[1].to_string()));
    }
    Ok(out)
}

/// Rank every entity for each query in `queries` and write the top
/// `top_n` as `head, relation, rank, entity, probability` rows.
pub fn cmd_infer(cfg: &ExperimentConfig, queries: &Path) -> Result<RunManifest> {
    let mut run = Run::start("infer", cfg)?;
    let (params, hash) = run.load_params()?;
    let ks = run.load_ks(&run.art.knowledge_store(), &params, &hash)?;
    let es = run.load_es(&params, &hash)?;
    run.upstream("memorize")?;
    let inference = effective_inference(&mut run)?;
    let ds = run.load_dataset()?;
    run.require(queries)?;
    let text = fs::read_to_string(queries).map_err(|e| CmrError::io(queries, e))?;
    let parsed = parse_queries(&text, queries, &ds)?;
    let predictor = Predictor {
        params: &params,
        ks: &ks,
        es: &es,
        vocab: &ds.vocab,
        features: &ds.features,
    };
    let mut out = String::from("head\trelation\trank\tentity\tprobability\n");
    for (head, relation) in &parsed {
        let h = ds.vocab.entity_id(head).expect("validated");
        let r = ds.vocab.resolve_relation(relation).expect("validated");
        let dist = predictor.distribution(h, r, &inference, EvalMode::Full)?;
        for (rank, (e, p)) in dist.top(cfg.top_n).into_iter().enumerate() {
            out.push_str(&format!(
                "{head}\t{relation}\t{}\t{}\t{p:.6}\n",
                rank + 1,
                ds.vocab.entity(e).name
            ));
        }
    }
    run.lap("infer");
    let path = run.art.predictions();
    fs::write(&path, out).map_err(|e| CmrError::io(&path, e))?;
    run.output(&path);
    run.finish()
}
