// SPDX-License-Identifier: MIT OR Apache-2.0

//! Resumable pipeline stages with a hash-chained artifact manifest.
//!
//! Each stage writes its artifacts under the output directory and appends
//! one manifest line per artifact. A stage's config hash covers its own
//! config section and the hashes of every stage it depends on, so editing an
//! upstream section invalidates everything downstream.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actcache::{harvest_layers, mean_pool, ActCache};
use crate::binio::file_sha256;
use crate::corpus::io::{read_split, write_split, SPLIT_FILES};
use crate::corpus::{build_split, check_disjointness, CorpusConfig, DatasetSplit, Tokenizer};
use crate::error::{Error, Result};
use crate::eval::{compare_sae, monotone_violations, run_grid, EvalInputs, EvalReport};
use crate::intervene::{InterventionSpec, Method};
use crate::lm::{train_lm, LmConfig, LmModel, TrainConfig};
use crate::probe::{probe_layers, LayerReport, ProbeConfig};
use crate::rng::derive_seed;
use crate::sae::{
    fvu, rank_pii_features, rank_pii_neurons, train_sae, FeatureRanking, SaeConfig, SaeParams,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "LEAKGUARD_OUT";
pub const MANIFEST: &str = "manifest.jsonl";
const LOCK: &str = ".lock";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_emb: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = LmConfig::new(2, 0);
        Self {
            d_emb: c.d_emb,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub max_new: usize,
    /// Forces the intervention layer instead of the probed one.
    pub layer: Option<usize>,
    pub grid: Vec<InterventionSpec>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            max_new: 16,
            layer: None,
            grid: default_grid(),
        }
    }
}

/// The reference grid: no defense, ablation over k, and each steering
/// method over alpha, each with and without the SAE, plus the 1% ablation
/// rows.
pub fn default_grid() -> Vec<InterventionSpec> {
    let mut grid = Vec::new();
    for sae in [true, false] {
        grid.push(InterventionSpec::new(Method::None, sae));
    }
    for k in [8, 32, 64] {
        for sae in [true, false] {
            grid.push(InterventionSpec::ablation(k, sae));
        }
    }
    for method in [
        Method::SteerProbe,
        Method::SteerTopkProbe,
        Method::SteerMeanDiff,
    ] {
        for alpha in [-2.0, -4.0, -8.0] {
            for sae in [true, false] {
                let k = (method == Method::SteerTopkProbe).then_some(16);
                grid.push(InterventionSpec::steering(method, alpha, k, sae));
            }
        }
    }
    for k in [8, 32, 64] {
        for sae in [true, false] {
            grid.push(InterventionSpec {
                data_fraction: 0.01,
                ..InterventionSpec::ablation(k, sae)
            });
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    /// `sae.seed` is replaced by a sub-seed of `seed`.
    pub sae: SaeConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: None,
            corpus: CorpusConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            sae: SaeConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            d_emb: self.model.d_emb,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            ..LmConfig::new(vocab_size, derive_seed(self.seed, "lm"))
        }
    }

    pub fn sae_config(&self) -> SaeConfig {
        SaeConfig {
            seed: derive_seed(self.seed, "sae"),
            ..self.sae
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lm_config(Tokenizer::standard().vocab_size())
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        for spec in &self.eval.grid {
            spec.validate()?;
            if let Some(l) = spec.layer.or(self.eval.layer) {
                if l >= self.model.n_layers {
                    return Err(Error::Config(format!(
                        "layer {l} out of range for {} layers",
                        self.model.n_layers
                    )));
                }
            }
        }
        if self.eval.max_new == 0 {
            return Err(Error::Config("eval.max_new must be positive".into()));
        }
        Ok(())
    }

    /// Output directory: explicit override, then config, then the
    /// environment, then `./leakguard-out`.
    pub fn resolve_out_dir(&self, override_dir: Option<&Path>) -> PathBuf {
        override_dir
            .map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("leakguard-out"))
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenCorpus,
    TrainLm,
    Harvest,
    Probe,
    TrainSae,
    Rank,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenCorpus,
        Stage::TrainLm,
        Stage::Harvest,
        Stage::Probe,
        Stage::TrainSae,
        Stage::Rank,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::TrainLm => "train-lm",
            Stage::Harvest => "harvest",
            Stage::Probe => "probe",
            Stage::TrainSae => "train-sae",
            Stage::Rank => "rank",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Direct upstream stages.
    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::GenCorpus => &[],
            Stage::TrainLm => &[Stage::GenCorpus],
            Stage::Harvest => &[Stage::GenCorpus, Stage::TrainLm],
            Stage::Probe => &[Stage::GenCorpus, Stage::Harvest],
            Stage::TrainSae => &[Stage::Harvest, Stage::Probe],
            Stage::Rank => &[
                Stage::GenCorpus,
                Stage::TrainLm,
                Stage::Probe,
                Stage::TrainSae,
            ],
            Stage::Eval => &[
                Stage::GenCorpus,
                Stage::TrainLm,
                Stage::Harvest,
                Stage::Probe,
                Stage::TrainSae,
                Stage::Rank,
            ],
            Stage::Report => &[Stage::Probe, Stage::Eval],
        }
    }

    /// Upstream stages whose absence is tolerated.
    fn optional_deps(self) -> &'static [Stage] {
        match self {
            Stage::Rank | Stage::Eval => &[Stage::TrainSae],
            _ => &[],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn section_json(cfg: &RunConfig, stage: Stage) -> Result<String> {
    Ok(match stage {
        Stage::GenCorpus => serde_json::to_string(&(cfg.seed, &cfg.corpus))?,
        Stage::TrainLm => serde_json::to_string(&(&cfg.model, &cfg.train))?,
        Stage::Probe => serde_json::to_string(&cfg.probe)?,
        Stage::TrainSae => serde_json::to_string(&cfg.sae_config())?,
        Stage::Eval => serde_json::to_string(&cfg.eval)?,
        Stage::Harvest | Stage::Rank | Stage::Report => String::new(),
    })
}

/// Hex SHA-256 over the stage name, its config section and its upstream
/// hashes.
pub fn stage_hash(cfg: &RunConfig, stage: Stage) -> Result<String> {
    let mut h = Sha256::new();
    h.update(stage.name().as_bytes());
    h.update([0]);
    h.update(section_json(cfg, stage)?.as_bytes());
    for dep in stage.deps() {
        h.update([0]);
        h.update(stage_hash(cfg, *dep)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub config_hash: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

pub fn read_manifest(out: &Path) -> Result<Vec<ManifestEntry>> {
    let path = out.join(MANIFEST);
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(&path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::format(&path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

fn write_manifest(out: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::new();
    for e in entries {
        s.push_str(&serde_json::to_string(e)?);
        s.push('\n');
    }
    let tmp = out.join(format!("{MANIFEST}.tmp"));
    fs::write(&tmp, s)?;
    fs::rename(tmp, out.join(MANIFEST))?;
    Ok(())
}

struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(out: &Path) -> Result<Self> {
        let path = out.join(LOCK);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::State(format!(
                "{} is locked by another stage; remove {} if no stage is running",
                out.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// What a completed stage produced.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: Stage,
    pub artifacts: Vec<PathBuf>,
    /// Human-readable summary (tables, metrics).
    pub summary: String,
}

pub struct Pipeline {
    cfg: RunConfig,
    out: PathBuf,
    force: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LmLog {
    n_params: usize,
    log: crate::lm::TrainLog,
}

/// Probe artifact; records the probe form alongside the per-layer results.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProbeFile {
    with_bias: bool,
    config: ProbeConfig,
    report: LayerReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SaeSummary {
    layer: usize,
    fvu: f64,
    dead_latents: usize,
    log: crate::sae::SaeLog,
}

fn rel(path: &str) -> PathBuf {
    PathBuf::from(path)
}

fn layer_file(l: usize) -> String {
    format!("acts/layer{l}.actcache")
}

impl Pipeline {
    pub fn new(cfg: RunConfig, out: PathBuf, force: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, out, force })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    /// Artifact paths (relative) a stage writes.
    fn outputs(&self, stage: Stage) -> Vec<PathBuf> {
        let v: Vec<String> = match stage {
            Stage::GenCorpus => SPLIT_FILES.iter().map(|f| format!("corpus/{f}")).collect(),
            Stage::TrainLm => vec!["lm.bin".into(), "lm_log.json".into()],
            Stage::Harvest => (0..self.cfg.model.n_layers).map(layer_file).collect(),
            Stage::Probe => vec![
                "probe.json".into(),
                "probe.jsonl".into(),
                "probe_table.txt".into(),
            ],
            Stage::TrainSae => vec!["sae.bin".into(), "sae_log.json".into()],
            Stage::Rank => vec!["ranking_neurons.tsv".into(), "ranking_sae.tsv".into()],
            Stage::Eval => vec!["eval_records.jsonl".into(), "eval_table.txt".into()],
            Stage::Report => vec!["report.txt".into()],
        };
        v.into_iter().map(PathBuf::from).collect()
    }

    /// Checks that an upstream stage's artifacts match the manifest and the
    /// current config. `Ok(false)` means an optional stage was never run.
    fn check_fresh(
        &self,
        manifest: &[ManifestEntry],
        upstream: Stage,
        optional: bool,
    ) -> Result<bool> {
        let expected = stage_hash(&self.cfg, upstream)?;
        let entries: Vec<&ManifestEntry> = manifest
            .iter()
            .filter(|e| e.stage == upstream.name())
            .collect();
        let stale = |path: PathBuf, reason: String| Error::Stale {
            stage: upstream.name().into(),
            path,
            reason,
        };
        if entries.is_empty() {
            if optional {
                return Ok(false);
            }
            return Err(stale(self.out.clone(), "stage has not been run".into()));
        }
        for e in entries {
            let path = self.out.join(&e.path);
            if e.config_hash != expected {
                return Err(stale(path, "config changed since it was produced".into()));
            }
            if !path.exists() {
                return Err(stale(path, "file is missing".into()));
            }
            if file_sha256(&path)? != e.sha256 {
                return Err(stale(path, "contents differ from the manifest".into()));
            }
        }
        Ok(true)
    }

    /// Runs one stage: lock, upstream checks, work, manifest update.
    pub fn run(&self, stage: Stage) -> Result<StageOutcome> {
        fs::create_dir_all(&self.out)?;
        let _lock = LockGuard::acquire(&self.out)?;
        let manifest = read_manifest(&self.out)?;
        let mut present = BTreeMap::new();
        for dep in stage.deps() {
            let optional = stage.optional_deps().contains(dep);
            present.insert(*dep, self.check_fresh(&manifest, *dep, optional)?);
        }
        if !self.force {
            let existing = manifest
                .iter()
                .find(|e| e.stage == stage.name())
                .map(|e| self.out.join(&e.path));
            let on_disk = self
                .outputs(stage)
                .into_iter()
                .map(|p| self.out.join(p))
                .find(|p| p.exists());
            if let Some(p) = existing.or(on_disk) {
                return Err(Error::Exists(p));
            }
        }
        let has_sae = present.get(&Stage::TrainSae).copied().unwrap_or(false);
        let (artifacts, summary) = match stage {
            Stage::GenCorpus => self.gen_corpus()?,
            Stage::TrainLm => self.train_lm()?,
            Stage::Harvest => self.harvest()?,
            Stage::Probe => self.probe()?,
            Stage::TrainSae => self.train_sae()?,
            Stage::Rank => self.rank(has_sae)?,
            Stage::Eval => self.eval(has_sae)?,
            Stage::Report => self.report()?,
        };
        let hash = stage_hash(&self.cfg, stage)?;
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let mut entries: Vec<ManifestEntry> = manifest
            .into_iter()
            .filter(|e| e.stage != stage.name())
            .collect();
        for a in &artifacts {
            entries.push(ManifestEntry {
                stage: stage.name().into(),
                path: a.to_string_lossy().replace('\\', "/"),
                sha256: file_sha256(&self.out.join(a))?,
                config_hash: hash.clone(),
                timestamp,
            });
        }
        write_manifest(&self.out, &entries)?;
        Ok(StageOutcome {
            stage,
            artifacts: artifacts.iter().map(|a| self.out.join(a)).collect(),
            summary,
        })
    }

    /// Runs every stage in order.
    pub fn run_all(&self) -> Result<Vec<StageOutcome>> {
        Stage::ALL.into_iter().map(|s| self.run(s)).collect()
    }

    // -- loaders ------------------------------------------------------------

    pub fn load_split(&self) -> Result<(DatasetSplit, Tokenizer)> {
        read_split(&self.out.join("corpus"))
    }

    pub fn load_lm(&self) -> Result<LmModel> {
        LmModel::load(&self.out.join("lm.bin"))
    }

    pub fn load_layer_report(&self) -> Result<LayerReport> {
        let f: ProbeFile = serde_json::from_str(&fs::read_to_string(self.out.join("probe.json"))?)?;
        Ok(f.report)
    }

    pub fn load_cache(&self, layer: usize) -> Result<ActCache> {
        ActCache::read(&self.out.join(layer_file(layer)))
    }

    pub fn load_sae(&self) -> Result<SaeParams> {
        SaeParams::load(&self.out.join("sae.bin"))
    }

    pub fn load_report(&self) -> Result<EvalReport> {
        EvalReport::from_records(&fs::read_to_string(self.out.join("eval_records.jsonl"))?)
    }

    fn selected_layer(&self) -> Result<usize> {
        match self.cfg.eval.layer {
            Some(l) => Ok(l),
            None => Ok(self.load_layer_report()?.selected_layer),
        }
    }

    fn write(&self, rel_path: &str, contents: &[u8]) -> Result<PathBuf> {
        let p = self.out.join(rel_path);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, contents)?;
        Ok(rel(rel_path))
    }

    // -- stage bodies -------------------------------------------------------

    fn gen_corpus(&self) -> Result<(Vec<PathBuf>, String)> {
        let tok = Tokenizer::standard();
        let split = build_split(&self.cfg.corpus, self.cfg.seed, &tok)?;
        if let Some(v) = check_disjointness(&split).first() {
            return Err(Error::Consistency(v.to_string()));
        }
        write_split(&self.out.join("corpus"), &split, &tok)?;
        let summary = format!(
            "corpus: {} train docs, {} held-out, d_prob {}, d_topk {}, sae {}, d_adv {}, cloze {}",
            split.train_corpus.len(),
            split.heldout.len(),
            split.d_prob.len(),
            split.d_topk.len(),
            split.sae_docs.len(),
            split.d_adv.len(),
            split.cloze.len()
        );
        Ok((self.outputs(Stage::GenCorpus), summary))
    }

    fn train_lm(&self) -> Result<(Vec<PathBuf>, String)> {
        let (split, tok) = self.load_split()?;
        let train: Vec<Vec<u32>> = split
            .train_corpus
            .iter()
            .map(|d| d.tokens.clone())
            .collect();
        let heldout: Vec<Vec<u32>> = split.heldout.iter().map(|d| d.tokens.clone()).collect();
        let (model, log) = train_lm(
            self.cfg.lm_config(tok.vocab_size()),
            &train,
            &heldout,
            &self.cfg.train,
        )?;
        model.save(&self.out.join("lm.bin"))?;
        let summary = format!(
            "lm: {} params, held-out loss {:.4} -> {:.4}",
            model.n_params(),
            log.initial_heldout_loss,
            log.heldout_loss.last().copied().unwrap_or(f64::NAN)
        );
        let info = LmLog {
            n_params: model.n_params(),
            log,
        };
        self.write(
            "lm_log.json",
            serde_json::to_string_pretty(&info)?.as_bytes(),
        )?;
        Ok((self.outputs(Stage::TrainLm), summary))
    }

    fn harvest(&self) -> Result<(Vec<PathBuf>, String)> {
        let (split, _) = self.load_split()?;
        let model = self.load_lm()?;
        let mut ids: Vec<u32> = split.d_prob.iter().map(|p| p.0).collect();
        ids.extend(&split.sae_docs);
        let docs = split.docs(&ids)?;
        let layers: Vec<usize> = (0..model.config().n_layers).collect();
        fs::create_dir_all(self.out.join("acts"))?;
        let corpus_hash = stage_hash(&self.cfg, Stage::GenCorpus)?;
        let model_hash = file_sha256(&self.out.join("lm.bin"))?;
        let mut tokens = 0;
        for (l, mut cache) in layers.iter().zip(harvest_layers(&model, &docs, &layers)?) {
            cache.header.corpus_hash = corpus_hash.clone();
            cache.header.model_hash = model_hash.clone();
            tokens = cache.len();
            cache.write(&self.out.join(layer_file(*l)))?;
        }
        let summary = format!(
            "harvest: {} docs, {tokens} token vectors per layer, {} layers",
            docs.len(),
            layers.len()
        );
        Ok((self.outputs(Stage::Harvest), summary))
    }

    fn probe(&self) -> Result<(Vec<PathBuf>, String)> {
        let (split, _) = self.load_split()?;
        let mut per_layer = Vec::with_capacity(self.cfg.model.n_layers);
        for l in 0..self.cfg.model.n_layers {
            let cache = self.load_cache(l)?;
            per_layer.push(
                split
                    .d_prob
                    .iter()
                    .map(|&(id, y)| Ok((mean_pool(&cache, id)?, y)))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let (report, _) = probe_layers(
            &per_layer,
            derive_seed(self.cfg.seed, "probe"),
            &self.cfg.probe,
        )?;
        let file = ProbeFile {
            with_bias: true,
            config: self.cfg.probe,
            report: report.clone(),
        };
        self.write(
            "probe.json",
            serde_json::to_string_pretty(&file)?.as_bytes(),
        )?;
        self.write("probe.jsonl", report.records()?.as_bytes())?;
        let table = report.table();
        self.write("probe_table.txt", table.as_bytes())?;
        Ok((
            self.outputs(Stage::Probe),
            format!("{table}selected layer: {}", report.selected_layer),
        ))
    }

    fn train_sae(&self) -> Result<(Vec<PathBuf>, String)> {
        let (split, _) = self.load_split()?;
        let layer = self.selected_layer()?;
        let cache = self.load_cache(layer)?.subset(&split.sae_docs)?;
        let (params, log, tracker) = train_sae(&cache, &self.cfg.sae_config())?;
        params.save(&self.out.join("sae.bin"))?;
        let info = SaeSummary {
            layer,
            fvu: fvu(&params, &cache)?,
            dead_latents: tracker.dead_count(),
            log,
        };
        self.write(
            "sae_log.json",
            serde_json::to_string_pretty(&info)?.as_bytes(),
        )?;
        let summary = format!(
            "sae: layer {layer}, h {}, fvu {:.4}, dead latents {}/{}",
            params.h, info.fvu, info.dead_latents, params.h
        );
        Ok((self.outputs(Stage::TrainSae), summary))
    }

    fn rank(&self, has_sae: bool) -> Result<(Vec<PathBuf>, String)> {
        let (split, tok) = self.load_split()?;
        let model = self.load_lm()?;
        let layer = self.selected_layer()?;
        let ids: Vec<u32> = split.d_topk.iter().map(|e| e.doc_id).collect();
        let docs = split.docs(&ids)?;
        let neurons = rank_pii_neurons(&model, &docs, layer, &tok)?;
        neurons.write(&self.out.join("ranking_neurons.tsv"))?;
        let mut artifacts = vec![rel("ranking_neurons.tsv")];
        let mut summary = format!("rank: layer {layer}, top neurons {:?}", neurons.top(8));
        if has_sae {
            let sae = self.load_sae()?;
            if sae.layer != layer {
                return Err(Error::Config(format!(
                    "SAE was trained on layer {} but ranking targets layer {layer}",
                    sae.layer
                )));
            }
            let feats = rank_pii_features(&sae, &model, &docs, &tok)?;
            feats.write(&self.out.join("ranking_sae.tsv"))?;
            artifacts.push(rel("ranking_sae.tsv"));
            summary.push_str(&format!(", top latents {:?}", feats.top(8)));
        } else {
            let _ = fs::remove_file(self.out.join("ranking_sae.tsv"));
        }
        Ok((artifacts, summary))
    }

    fn eval(&self, has_sae: bool) -> Result<(Vec<PathBuf>, String)> {
        if !has_sae {
            if let Some(spec) = self.cfg.eval.grid.iter().find(|s| s.use_sae) {
                return Err(Error::Config(format!(
                    "grid contains a with-SAE {} spec but no trained SAE exists; run `train-sae` first",
                    spec.method
                )));
            }
        }
        let (split, tok) = self.load_split()?;
        let model = self.load_lm()?;
        let layer = self.selected_layer()?;
        let sae = if has_sae {
            Some(self.load_sae()?)
        } else {
            None
        };
        let cache = self.load_cache(layer)?;
        let mut rankings = vec![(
            false,
            FeatureRanking::read(&self.out.join("ranking_neurons.tsv"))?,
        )];
        if has_sae {
            rankings.push((
                true,
                FeatureRanking::read(&self.out.join("ranking_sae.tsv"))?,
            ));
        }
        let inputs = EvalInputs {
            model: &model,
            tok: &tok,
            split: &split,
            layer,
            sae: sae.as_ref(),
            prob_cache: Some(&cache),
            rankings,
            max_new: self.cfg.eval.max_new,
            probe: self.cfg.probe,
            seed: derive_seed(self.cfg.seed, "eval"),
        };
        let report = run_grid(&inputs, &self.cfg.eval.grid)?;
        self.write("eval_records.jsonl", report.records()?.as_bytes())?;
        let table = report.table();
        self.write("eval_table.txt", table.as_bytes())?;
        Ok((self.outputs(Stage::Eval), table))
    }

    fn report(&self) -> Result<(Vec<PathBuf>, String)> {
        let layers = self.load_layer_report()?;
        let report = self.load_report()?;
        let text = render_report(&layers, &report);
        let mut artifacts = vec![self.write("report.txt", text.as_bytes())?];
        for (name, svg) in report.plots() {
            artifacts.push(self.write(&format!("plots/{name}"), svg.as_bytes())?);
        }
        Ok((artifacts, text))
    }
}

/// Plain-text summary of the layer probe and the defense grid.
pub fn render_report(layers: &LayerReport, report: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str("Layer probe (mean-pooled residual, validation split)\n");
    s.push_str(&layers.table());
    s.push_str(&format!("selected layer: {}\n\n", layers.selected_layer));
    s.push_str("Defenses (utility = cloze accuracy on held-out non-PII text, %; leaks = % of adversarial prompts)\n");
    s.push_str(&report.table());
    if report.rows.iter().any(|r| r.data_fraction < 1.0) {
        s.push_str("\nAblation by data size\n");
        s.push_str(&report.data_size_table());
    }
    let cmp = compare_sae(report, 1.0);
    let fmt = |x: Option<f64>| x.map_or_else(|| "none".to_string(), |v| format!("{v:.2}"));
    s.push_str(&format!(
        "\nBest utility at leak <= {:.0}%: with SAE {}, without SAE {}\n",
        cmp.max_leak,
        fmt(cmp.with_sae),
        fmt(cmp.without_sae)
    ));
    let violations = monotone_violations(report);
    if violations.is_empty() {
        s.push_str("Leak rate is non-increasing in strength for every method.\n");
    } else {
        s.push_str("Non-monotone leak rate:\n");
        for v in violations {
            s.push_str(&format!("  {v}\n"));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn hashes_chain_downstream_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.sae.k = 16;
        for s in [
            Stage::GenCorpus,
            Stage::TrainLm,
            Stage::Harvest,
            Stage::Probe,
        ] {
            assert_eq!(
                stage_hash(&a, s).unwrap(),
                stage_hash(&b, s).unwrap(),
                "{s}"
            );
        }
        for s in [Stage::TrainSae, Stage::Rank, Stage::Eval, Stage::Report] {
            assert_ne!(
                stage_hash(&a, s).unwrap(),
                stage_hash(&b, s).unwrap(),
                "{s}"
            );
        }
    }

    #[test]
    fn stage_names_parse() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()), Some(s));
        }
        assert_eq!(Stage::parse("bogus"), None);
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let g = LockGuard::acquire(dir.path()).unwrap();
        assert!(matches!(
            LockGuard::acquire(dir.path()),
            Err(Error::State(_))
        ));
        drop(g);
        assert!(LockGuard::acquire(dir.path()).is_ok());
    }
}
