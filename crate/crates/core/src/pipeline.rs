//! Experiment runner: enhance → describe → score → generate → re-identify.
//!
//! A [`PipelineConfig`] names the dataset, the output directory and one
//! endpoint per backend kind. [`Pipeline`] runs the stages against those
//! endpoints and writes CSV and JSON reports below the output directory:
//!
//! ```text
//! out/
//!   journal.jsonl          every gateway call
//!   describe/              per-image distance reports, cohort table
//!   manifest.json          generated images per arm and subject
//!   reid/                  confusion matrices and metrics per arm
//!   age/                   aging manifest, matrices and metrics
//!   run_report.json        summary of everything above
//! ```
//!
//! Paths inside reports are relative to the output directory, so two runs
//! with the same inputs produce the same bytes wherever they are written.
//! Only the journal carries timestamps.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attribute::{
    load_subject_records_with, AttributeDescription, Category, Provenance, SubjectRecord, SynonymTable,
};
use crate::error::{Error, Result};
use crate::gateway::{
    sha256_hex, BackendKind, EndpointConfig, EnhanceMethod, GenerationRequest, Journal, ModelGateway,
    DEFAULT_SAMPLE_STEPS, DEFAULT_STYLE_STRENGTH,
};
use crate::metric::{
    score_cohort, score_description, write_reports_csv, CohortTable, DistanceReport, EquivalenceTable,
    NumericThresholds,
};
use crate::prompt::{
    build_aging_prompt_with, build_generation_prompt_with, build_vlm_questions_with, AgingDirection, FeatureRules,
    PromptFeature, PromptSpec, PromptTemplates, VlmQuestion, DEFAULT_MAX_LENGTH,
};
use crate::reid::{
    build_confusion_matrix, group_by_subject, identification_accuracy, mean_genuine_score, threshold_sweep,
    verification_metrics, write_embeddings_jsonl, write_sweep_csv, Aggregation, ConfusionMatrix, Embedding,
    Semantics, VerificationMetrics,
};
use crate::tv::DenoiseParams;

pub const DEFAULT_GENERATION_COUNT: usize = 4;
pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_REPORT_FILE: &str = "run_report.json";

/// Input combination fed to the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Arm {
    OriginalOnly,
    OriginalEnhanced(EnhanceMethod),
    /// The original mugshot plus images generated by the original-only arm.
    OriginalGenerated,
}

impl Arm {
    pub fn key(self) -> String {
        match self {
            Arm::OriginalOnly => "original".into(),
            Arm::OriginalEnhanced(m) => format!("original_{}", m.key()),
            Arm::OriginalGenerated => "original_generated".into(),
        }
    }

    pub fn label(self) -> String {
        match self {
            Arm::OriginalOnly => "original only".into(),
            Arm::OriginalEnhanced(m) => format!("original + {}", m.provenance().label()),
            Arm::OriginalGenerated => "original + generated".into(),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let rest = s
            .strip_prefix("original")
            .ok_or_else(|| Error::Config(format!("unknown arm `{s}`")))?;
        let rest = rest.trim_start_matches(['_', '+', '-', ' ']);
        match rest {
            "" | "only" => Ok(Arm::OriginalOnly),
            "generated" => Ok(Arm::OriginalGenerated),
            other => Ok(Arm::OriginalEnhanced(other.parse()?)),
        }
    }
}

impl TryFrom<String> for Arm {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Arm> for String {
    fn from(a: Arm) -> String {
        a.key()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivalenceOverride {
    pub category: Category,
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynonymOverride {
    pub category: Category,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationDefaults {
    pub count: usize,
    pub sample_steps: u32,
    pub style_strength_percent: u32,
}

impl Default for GenerationDefaults {
    fn default() -> Self {
        GenerationDefaults {
            count: DEFAULT_GENERATION_COUNT,
            sample_steps: DEFAULT_SAMPLE_STEPS,
            style_strength_percent: DEFAULT_STYLE_STRENGTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub arms: Vec<Arm>,
    /// Manifest of an earlier run whose original-only images feed the
    /// original+generated arm.
    pub prior_manifest: Option<PathBuf>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            arms: vec![Arm::OriginalOnly, Arm::OriginalGenerated],
            prior_manifest: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReidConfig {
    /// Euclidean distance at or below which a pair is a match.
    pub distance_threshold: Option<f64>,
    /// Cosine similarity at or above which a pair is a match.
    pub similarity_threshold: Option<f64>,
    pub sweep: bool,
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgeConfig {
    pub target_age: f64,
    pub direction: AgingDirection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub include: Option<Vec<PromptFeature>>,
    /// Added to the default exclusion terms.
    pub exclude_terms: Vec<String>,
    /// Directory holding replacement template files.
    pub templates: Option<PathBuf>,
    pub max_length: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            include: None,
            exclude_terms: Vec::new(),
            templates: None,
            max_length: DEFAULT_MAX_LENGTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EndpointsConfig {
    pub enhance: Option<EndpointConfig>,
    pub describe: Option<EndpointConfig>,
    pub generate: Option<EndpointConfig>,
    pub embed: Option<EndpointConfig>,
}

impl EndpointsConfig {
    pub fn get(&self, kind: BackendKind) -> Option<&EndpointConfig> {
        match kind {
            BackendKind::Enhance => self.enhance.as_ref(),
            BackendKind::Describe => self.describe.as_ref(),
            BackendKind::Generate => self.generate.as_ref(),
            BackendKind::Embed => self.embed.as_ref(),
        }
    }

    pub fn get_mut(&mut self, kind: BackendKind) -> &mut Option<EndpointConfig> {
        match kind {
            BackendKind::Enhance => &mut self.enhance,
            BackendKind::Describe => &mut self.describe,
            BackendKind::Generate => &mut self.generate,
            BackendKind::Embed => &mut self.embed,
        }
    }

    /// Replaces the target of `kind`, keeping its timeouts and limits.
    pub fn set_target(&mut self, kind: BackendKind, target: EndpointConfig) {
        let slot = self.get_mut(kind);
        let mut ep = slot.take().unwrap_or_default();
        ep.url = target.url;
        ep.fixtures = target.fixtures;
        ep.replay = target.replay;
        *slot = Some(ep);
    }
}

/// Run configuration, usually read from a TOML file. Relative paths in the
/// file are resolved against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub enhancements: Vec<EnhanceMethod>,
    #[serde(default)]
    pub thresholds: NumericThresholds,
    #[serde(default)]
    pub equivalences: Vec<EquivalenceOverride>,
    #[serde(default)]
    pub synonyms: Vec<SynonymOverride>,
    #[serde(default)]
    pub generation: GenerationDefaults,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub reid: ReidConfig,
    #[serde(default)]
    pub age: Option<AgeConfig>,
    #[serde(default)]
    pub denoise: DenoiseParams,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub endpoints: EndpointsConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl PipelineConfig {
    pub fn new(dataset: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            dataset: dataset.into(),
            out_dir: out_dir.into(),
            enhancements: Vec::new(),
            thresholds: NumericThresholds::default(),
            equivalences: Vec::new(),
            synonyms: Vec::new(),
            generation: GenerationDefaults::default(),
            augment: AugmentConfig::default(),
            reid: ReidConfig::default(),
            age: None,
            denoise: DenoiseParams::default(),
            prompt: PromptConfig::default(),
            endpoints: EndpointsConfig::default(),
        }
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        PipelineConfig::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.out_dir);
        if let Some(p) = &mut self.augment.prior_manifest {
            fix(p);
        }
        if let Some(p) = &mut self.prompt.templates {
            fix(p);
        }
        for kind in BackendKind::ALL {
            if let Some(ep) = self.endpoints.get_mut(kind) {
                for p in [&mut ep.fixtures, &mut ep.replay].into_iter().flatten() {
                    fix(p);
                }
            }
        }
    }

    /// Applies `MUGSHOT_<KIND>_URL`, `MUGSHOT_<KIND>_FIXTURES`,
    /// `MUGSHOT_FIXTURES` and `MUGSHOT_BEARER_TOKEN` overrides.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(dir) = lookup("MUGSHOT_FIXTURES") {
            self.use_fixtures(dir);
        }
        for kind in BackendKind::ALL {
            let upper = kind.key().to_ascii_uppercase();
            if let Some(url) = lookup(&format!("MUGSHOT_{upper}_URL")) {
                self.endpoints.set_target(kind, EndpointConfig::url(url));
            }
            if let Some(dir) = lookup(&format!("MUGSHOT_{upper}_FIXTURES")) {
                self.endpoints.set_target(kind, EndpointConfig::fixtures(dir));
            }
        }
        if let Some(token) = lookup("MUGSHOT_BEARER_TOKEN") {
            for kind in BackendKind::ALL {
                if let Some(ep) = self.endpoints.get_mut(kind) {
                    if ep.url.is_some() {
                        ep.bearer_token = Some(token.clone());
                    }
                }
            }
        }
    }

    pub fn apply_process_env(&mut self) {
        self.apply_env(|k| std::env::var(k).ok());
    }

    /// Points every backend kind at one fixture directory.
    pub fn use_fixtures(&mut self, dir: impl Into<PathBuf>) {
        let dir = dir.into();
        for kind in BackendKind::ALL {
            self.endpoints.set_target(kind, EndpointConfig::fixtures(dir.clone()));
        }
    }

    /// Answers every backend call from an earlier run's journal.
    pub fn use_replay(&mut self, journal: impl Into<PathBuf>) {
        let journal = journal.into();
        for kind in BackendKind::ALL {
            self.endpoints.set_target(kind, EndpointConfig::replay(journal.clone()));
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dataset.is_file() {
            return Err(Error::Config(format!("dataset {} does not exist", self.dataset.display())));
        }
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let probe = self.out_dir.join(".write-probe");
        std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
        std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))?;
        if let Some(p) = &self.augment.prior_manifest {
            if !p.is_file() {
                return Err(Error::Config(format!("prior manifest {} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.prompt.templates {
            if !p.is_dir() {
                return Err(Error::Config(format!("template directory {} does not exist", p.display())));
            }
        }
        if self.prompt.max_length == 0 {
            return Err(Error::Config("prompt max_length must be > 0".into()));
        }
        for kind in BackendKind::ALL {
            if let Some(ep) = self.endpoints.get(kind) {
                ep.to_endpoint(kind)?;
                if let Some(d) = &ep.fixtures {
                    if !d.is_dir() {
                        return Err(Error::Config(format!("{kind} fixtures {} do not exist", d.display())));
                    }
                }
                if let Some(j) = &ep.replay {
                    if !j.is_file() {
                        return Err(Error::Config(format!("{kind} replay journal {} does not exist", j.display())));
                    }
                }
            }
        }
        let g = &self.generation;
        if g.count == 0 || g.sample_steps == 0 || g.style_strength_percent > 100 {
            return Err(Error::Config(
                "generation needs count >= 1, sample_steps >= 1 and style strength within 0..=100".into(),
            ));
        }
        for t in [self.reid.distance_threshold, self.reid.similarity_threshold].into_iter().flatten() {
            if !t.is_finite() {
                return Err(Error::Config(format!("re-identification threshold {t} is not finite")));
            }
        }
        if let Some(a) = &self.age {
            if !(a.target_age.is_finite() && a.target_age > 0.0) {
                return Err(Error::Config(format!("target age {} must be > 0", a.target_age)));
            }
        }
        self.denoise.validate()
    }
}

/// A subject or image that could not be processed; the run continues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureNote {
    pub subject_id: String,
    pub arm: String,
    #[serde(default)]
    pub image: Option<String>,
    pub reason: String,
}

/// Result of the describe or score stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DescribeOutcome {
    pub reports: Vec<DistanceReport>,
    pub cohort: CohortTable,
    #[serde(skip)]
    pub descriptions: Vec<AttributeDescription>,
    pub failures: Vec<FailureNote>,
    /// Subjects without a single scored description.
    pub failed_subjects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SubjectGeneration {
    /// Identity references the generated images are compared against.
    pub references: Vec<String>,
    pub inputs: Vec<String>,
    pub prompt: String,
    pub negative_prompt: String,
    pub images: Vec<String>,
    pub digests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ArmManifest {
    pub label: String,
    pub subjects: BTreeMap<String, SubjectGeneration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Generated images keyed by arm, then subject. Paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub arms: BTreeMap<String, ArmManifest>,
    pub skipped: Vec<FailureNote>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.base_dir = path.parent().unwrap_or(Path::new(".")).to_owned();
        Ok(m)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn image_count(&self) -> usize {
        self.arms
            .values()
            .flat_map(|a| a.subjects.values())
            .map(|s| s.images.len())
            .sum()
    }

    /// Every listed image that is missing on disk.
    pub fn missing_images(&self) -> Vec<PathBuf> {
        self.arms
            .values()
            .flat_map(|a| a.subjects.values())
            .flat_map(|s| s.images.iter())
            .map(|i| self.resolve(i))
            .filter(|p| !p.is_file())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixSummary {
    pub file: String,
    pub identification_accuracy: f64,
    pub mean_genuine_score: f64,
    pub verification: Option<VerificationMetrics>,
    pub sweep_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmEvaluation {
    pub arm: String,
    pub label: String,
    pub subjects: Vec<String>,
    pub reference_images: usize,
    pub probe_images: usize,
    pub distance: Option<MatrixSummary>,
    pub similarity: Option<MatrixSummary>,
    pub error: Option<String>,
    #[serde(skip)]
    pub matrices: Option<(ConfusionMatrix, ConfusionMatrix)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReidOutcome {
    pub arms: Vec<ArmEvaluation>,
}

impl ReidOutcome {
    pub fn arm(&self, key: &str) -> Option<&ArmEvaluation> {
        self.arms.iter().find(|a| a.arm == key)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgeOutcome {
    pub target_age: f64,
    pub direction: AgingDirection,
    pub manifest: Manifest,
    pub evaluation: ArmEvaluation,
}

/// Summary assembled from the report files of an output directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub describe: Option<Value>,
    pub manifest: Option<String>,
    pub generated_images: usize,
    pub reid: Option<Value>,
    pub age: Option<Value>,
    pub journal: Option<String>,
}

pub struct Pipeline {
    config: PipelineConfig,
    gateway: ModelGateway,
    records: Vec<SubjectRecord>,
    dataset_dir: PathBuf,
    out_dir: PathBuf,
    thresholds: NumericThresholds,
    equivalences: EquivalenceTable,
    rules: FeatureRules,
    templates: PromptTemplates,
    questions: Vec<VlmQuestion>,
    embeddings: Mutex<HashMap<PathBuf, Embedding>>,
}

impl Pipeline {
    /// Validates the configuration and connects the configured endpoints.
    pub fn open(config: PipelineConfig) -> Result<Self> {
        let endpoints = config.endpoints.clone();
        Pipeline::open_with(config, move |mut g| {
            for kind in BackendKind::ALL {
                if let Some(ep) = endpoints.get(kind) {
                    g = g.with_endpoint(ep.to_endpoint(kind)?)?;
                }
            }
            Ok(g)
        })
    }

    /// Like [`Pipeline::open`], with endpoints added by `connect`. The
    /// gateway it receives already writes to the output directory and the
    /// run journal.
    pub fn open_with(
        config: PipelineConfig,
        connect: impl FnOnce(ModelGateway) -> Result<ModelGateway>,
    ) -> Result<Self> {
        config.validate()?;
        let mut synonyms = SynonymTable::default();
        for s in &config.synonyms {
            synonyms.add(s.category, &s.from, &s.to)?;
        }
        let mut equivalences = EquivalenceTable::default();
        for e in &config.equivalences {
            equivalences.add_pair(e.category, &e.a, &e.b)?;
        }
        let templates = match &config.prompt.templates {
            Some(dir) => PromptTemplates::load_dir(dir)?,
            None => PromptTemplates::default(),
        };
        let mut rules = FeatureRules::default();
        if let Some(inc) = &config.prompt.include {
            rules = rules.with_include(inc.iter().copied())?;
        }
        rules = rules.with_extra_excludes(config.prompt.exclude_terms.iter().cloned())?;
        let questions = build_vlm_questions_with(&templates)?;

        let dataset = std::path::absolute(&config.dataset).map_err(|e| Error::io(&config.dataset, e))?;
        let dataset_dir = dataset.parent().unwrap_or(Path::new("/")).to_owned();
        let records = load_subject_records_with(&dataset, &synonyms)?;
        let out_dir = std::path::absolute(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;

        let gateway = ModelGateway::new(&out_dir)
            .with_journal(Journal::open(out_dir.join(JOURNAL_FILE))?)
            .with_denoise(config.denoise)?
            .with_synonyms(synonyms);
        let gateway = connect(gateway)?;
        Ok(Pipeline {
            thresholds: config.thresholds,
            config,
            gateway,
            records,
            dataset_dir,
            out_dir,
            equivalences,
            rules,
            templates,
            questions,
            embeddings: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn gateway(&self) -> &ModelGateway {
        &self.gateway
    }

    fn require_subjects(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Validation(format!(
                "dataset {} holds no subjects",
                self.config.dataset.display()
            )));
        }
        Ok(())
    }

    fn require_endpoint(&self, kind: BackendKind) -> Result<()> {
        if !self.gateway.has_endpoint(kind) {
            return Err(Error::Config(format!("no {kind} endpoint configured")));
        }
        Ok(())
    }

    fn require_enhancer(&self, methods: impl IntoIterator<Item = EnhanceMethod>) -> Result<()> {
        if methods.into_iter().any(|m| m != EnhanceMethod::TvDenoise) {
            self.require_endpoint(BackendKind::Enhance)?;
        }
        Ok(())
    }

    fn dataset_image(&self, p: &Path) -> PathBuf {
        self.dataset_dir.join(p)
    }

    /// Report form of a path: relative to the output directory.
    fn display(&self, p: &Path) -> String {
        let abs = std::path::absolute(p).unwrap_or_else(|_| p.to_owned());
        pathdiff::diff_paths(&abs, &self.out_dir)
            .unwrap_or(abs)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn stage_dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.out_dir.join(name);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    fn enhancement_arms(&self) -> Vec<Option<EnhanceMethod>> {
        let methods: BTreeSet<EnhanceMethod> = self.config.enhancements.iter().copied().collect();
        std::iter::once(None).chain(methods.into_iter().map(Some)).collect()
    }

    /// Describes every reference image, raw and once per configured
    /// enhancement, and scores the descriptions against the records.
    pub fn run_describe(&self) -> Result<DescribeOutcome> {
        self.require_subjects()?;
        self.require_endpoint(BackendKind::Describe)?;
        self.require_enhancer(self.config.enhancements.iter().copied())?;
        let arms = self.enhancement_arms();
        let jobs: Vec<(Option<EnhanceMethod>, &SubjectRecord, &PathBuf)> = arms
            .iter()
            .flat_map(|arm| {
                self.records
                    .iter()
                    .flat_map(move |r| r.reference_images.iter().map(move |img| (*arm, r, img)))
            })
            .collect();
        let results: Vec<Result<(AttributeDescription, DistanceReport)>> = jobs
            .par_iter()
            .map(|(arm, record, img)| {
                let mut path = self.dataset_image(img);
                let provenance = match arm {
                    Some(m) => {
                        path = self.gateway.enhance(&path, *m)?;
                        m.provenance()
                    }
                    None => Provenance::Original,
                };
                let mut desc = self.gateway.describe(&record.subject_id, &path, provenance, &self.questions)?;
                desc.source_image = PathBuf::from(self.display(&path));
                let report = score_description(record, &desc, &self.thresholds, &self.equivalences)?;
                Ok((desc, report))
            })
            .collect();

        let mut descriptions = Vec::new();
        let mut reports = Vec::new();
        let mut failures = Vec::new();
        let mut first_error = None;
        for ((arm, record, img), res) in jobs.iter().zip(results) {
            match res {
                Ok((d, r)) => {
                    descriptions.push(d);
                    reports.push(r);
                }
                Err(e) => {
                    failures.push(FailureNote {
                        subject_id: record.subject_id.clone(),
                        arm: arm.map_or(Provenance::Original, |m| m.provenance()).key().into(),
                        image: Some(self.display(&self.dataset_image(img))),
                        reason: e.to_string(),
                    });
                    first_error.get_or_insert(e);
                }
            }
        }
        if reports.is_empty() {
            return Err(first_error
                .unwrap_or_else(|| Error::Validation("no subject has reference images".into())));
        }
        let outcome = self.finish_scoring(reports, descriptions, failures)?;
        self.write_scoring(&self.stage_dir("describe")?, &outcome)?;
        Ok(outcome)
    }

    /// Scores externally produced descriptions against the dataset.
    pub fn score_predictions(&self, predictions: &[AttributeDescription]) -> Result<DescribeOutcome> {
        self.require_subjects()?;
        if predictions.is_empty() {
            return Err(Error::Validation("no predictions to score".into()));
        }
        let by_id: HashMap<&str, &SubjectRecord> =
            self.records.iter().map(|r| (r.subject_id.as_str(), r)).collect();
        let mut reports = Vec::new();
        for p in predictions {
            let truth = by_id.get(p.subject_id.as_str()).ok_or_else(|| {
                Error::Validation(format!("prediction for unknown subject `{}`", p.subject_id))
            })?;
            reports.push(score_description(truth, p, &self.thresholds, &self.equivalences)?);
        }
        let outcome = self.finish_scoring(reports, predictions.to_vec(), Vec::new())?;
        self.write_scoring(&self.stage_dir("score")?, &outcome)?;
        Ok(outcome)
    }

    fn finish_scoring(
        &self,
        reports: Vec<DistanceReport>,
        descriptions: Vec<AttributeDescription>,
        failures: Vec<FailureNote>,
    ) -> Result<DescribeOutcome> {
        let cohort = score_cohort(&reports)?;
        let scored: BTreeSet<&str> = reports.iter().map(|r| r.subject_id.as_str()).collect();
        let failed_subjects = self
            .records
            .iter()
            .filter(|r| !scored.contains(r.subject_id.as_str()))
            .map(|r| r.subject_id.clone())
            .collect();
        Ok(DescribeOutcome {
            reports,
            cohort,
            descriptions,
            failures,
            failed_subjects,
        })
    }

    fn write_scoring(&self, dir: &Path, outcome: &DescribeOutcome) -> Result<()> {
        write_json(&dir.join("reports.json"), &outcome.reports)?;
        write_with(&dir.join("reports.csv"), |w| write_reports_csv(&outcome.reports, w))?;
        write_json(&dir.join("cohort.json"), &outcome.cohort)?;
        write_with(&dir.join("cohort.csv"), |w| outcome.cohort.write_csv(w))?;
        write_json(
            &dir.join("failures.json"),
            &json!({ "failures": outcome.failures, "failed_subjects": outcome.failed_subjects }),
        )?;
        let raw: Vec<Value> = outcome.descriptions.iter().map(raw_description).collect();
        write_json(&dir.join("descriptions.json"), &raw)
    }

    fn generation_request(&self, inputs: Vec<PathBuf>, prompt: PromptSpec, label: String) -> GenerationRequest {
        let g = &self.config.generation;
        GenerationRequest {
            input_images: inputs,
            prompt,
            sample_steps: g.sample_steps,
            style_strength_percent: g.style_strength_percent,
            count: g.count,
            label,
        }
    }

    fn subject_generation(
        &self,
        references: &[PathBuf],
        request: &GenerationRequest,
        images: &[PathBuf],
    ) -> Result<SubjectGeneration> {
        let digests = images
            .iter()
            .map(|p| std::fs::read(p).map(|b| sha256_hex(&b)).map_err(|e| Error::io(p, e)))
            .collect::<Result<Vec<_>>>()?;
        Ok(SubjectGeneration {
            references: references.iter().map(|p| self.display(p)).collect(),
            inputs: request.input_images.iter().map(|p| self.display(p)).collect(),
            prompt: request.prompt.render_positive(),
            negative_prompt: request.prompt.render_negative(),
            images: images.iter().map(|p| self.display(p)).collect(),
            digests,
        })
    }

    /// Generates images for every configured arm and writes the manifest.
    pub fn run_augment(&self) -> Result<Manifest> {
        self.require_subjects()?;
        self.require_endpoint(BackendKind::Generate)?;
        let arms: BTreeSet<Arm> = self.config.augment.arms.iter().copied().collect();
        if arms.is_empty() {
            return Err(Error::Config("no augmentation arms configured".into()));
        }
        self.require_enhancer(arms.iter().filter_map(|a| match a {
            Arm::OriginalEnhanced(m) => Some(*m),
            _ => None,
        }))?;
        let prior = match &self.config.augment.prior_manifest {
            Some(p) => Some(Manifest::load(p)?),
            None => None,
        };
        if arms.contains(&Arm::OriginalGenerated) && !arms.contains(&Arm::OriginalOnly) && prior.is_none() {
            return Err(Error::Config(
                "the original_generated arm needs the original arm or a prior manifest".into(),
            ));
        }

        let mut manifest = Manifest {
            base_dir: self.out_dir.clone(),
            ..Manifest::default()
        };
        let mut prompts = BTreeMap::new();
        for r in &self.records {
            match build_generation_prompt_with(r, &self.rules, &self.templates, self.config.prompt.max_length) {
                Ok(p) => {
                    prompts.insert(r.subject_id.clone(), p);
                }
                Err(e) => manifest.skipped.push(FailureNote {
                    subject_id: r.subject_id.clone(),
                    arm: "*".into(),
                    image: None,
                    reason: e.to_string(),
                }),
            }
        }

        let mut first_error = None;
        for arm in &arms {
            let earlier: Option<(&Manifest, &ArmManifest)> = match arm {
                Arm::OriginalGenerated => manifest
                    .arms
                    .get(&Arm::OriginalOnly.key())
                    .map(|a| (&manifest, a))
                    .or_else(|| prior.as_ref().and_then(|p| p.arms.get(&Arm::OriginalOnly.key()).map(|a| (p, a)))),
                _ => None,
            };
            let subjects: Vec<&SubjectRecord> =
                self.records.iter().filter(|r| prompts.contains_key(&r.subject_id)).collect();
            let results: Vec<Result<Option<SubjectGeneration>>> = subjects
                .par_iter()
                .map(|r| {
                    let refs: Vec<PathBuf> = r.reference_images.iter().map(|p| self.dataset_image(p)).collect();
                    if refs.is_empty() {
                        return Ok(None);
                    }
                    let mut inputs = refs.clone();
                    match arm {
                        Arm::OriginalOnly => {}
                        Arm::OriginalEnhanced(m) => {
                            for p in &refs {
                                inputs.push(self.gateway.enhance(p, *m)?);
                            }
                        }
                        Arm::OriginalGenerated => {
                            let Some(prev) = earlier.and_then(|(m, a)| {
                                a.subjects.get(&r.subject_id).map(|s| s.images.iter().map(|i| m.resolve(i)))
                            }) else {
                                return Ok(None);
                            };
                            inputs.extend(prev);
                        }
                    }
                    let label = file_label(&format!("{}-{}", arm.key(), r.subject_id));
                    let request = self.generation_request(inputs, prompts[&r.subject_id].clone(), label);
                    let images = self.gateway.generate(&request)?;
                    Ok(Some(self.subject_generation(&refs, &request, &images)?))
                })
                .collect();
            let mut arm_manifest = ArmManifest {
                label: arm.label(),
                ..ArmManifest::default()
            };
            for (r, res) in subjects.iter().zip(results) {
                let reason = match res {
                    Ok(Some(g)) => {
                        arm_manifest.subjects.insert(r.subject_id.clone(), g);
                        continue;
                    }
                    Ok(None) => "no input images for this arm".to_owned(),
                    Err(e) => {
                        let msg = e.to_string();
                        if matches!(e, Error::Protocol { .. }) && arm_manifest.error.is_none() {
                            arm_manifest.error = Some(msg.clone());
                        }
                        first_error.get_or_insert(e);
                        msg
                    }
                };
                manifest.skipped.push(FailureNote {
                    subject_id: r.subject_id.clone(),
                    arm: arm.key(),
                    image: None,
                    reason,
                });
            }
            manifest.arms.insert(arm.key(), arm_manifest);
        }
        if manifest.image_count() == 0 {
            return Err(first_error.unwrap_or_else(|| Error::Validation("no images were generated".into())));
        }
        write_json(&self.out_dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }

    fn check_reid_thresholds(&self) -> Result<()> {
        if self.config.reid.distance_threshold.is_none() && !self.config.reid.sweep {
            return Err(Error::Config(
                "re-identification needs a distance threshold (--threshold) or a sweep (--sweep)".into(),
            ));
        }
        Ok(())
    }

    /// Embeds references and generated probes of every manifest arm and
    /// writes distance and similarity matrices with their metrics.
    pub fn run_reid(&self, manifest: &Manifest) -> Result<ReidOutcome> {
        self.require_endpoint(BackendKind::Embed)?;
        self.check_reid_thresholds()?;
        if manifest.image_count() == 0 {
            return Err(Error::Validation("manifest lists no generated images".into()));
        }
        let dir = self.stage_dir("reid")?;
        let mut arms = Vec::new();
        for (key, arm) in &manifest.arms {
            let (refs, probes) = arm_galleries(manifest, arm);
            arms.push(self.evaluate(key, &arm.label, &refs, &probes, &dir)?);
        }
        if arms.iter().all(|a| a.error.is_some()) {
            return Err(Error::Protocol {
                endpoint: BackendKind::Embed.key().into(),
                reason: format!("every arm failed: {}", arms[0].error.as_deref().unwrap_or("")),
            });
        }
        let outcome = ReidOutcome { arms };
        write_json(&dir.join("summary.json"), &outcome)?;
        self.write_embeddings(&dir)?;
        Ok(outcome)
    }

    /// Generates aged (or de-aged) versions of each subject and compares
    /// them with the subject's images at the other age.
    pub fn run_age(&self, target_age: f64, direction: AgingDirection) -> Result<AgeOutcome> {
        self.require_subjects()?;
        let lacking: Vec<&str> = self
            .records
            .iter()
            .filter(|r| r.young_images.is_empty() || r.old_images.is_empty())
            .map(|r| r.subject_id.as_str())
            .collect();
        if !lacking.is_empty() {
            return Err(Error::Validation(format!(
                "subjects without young and old reference images: {}",
                lacking.join(", ")
            )));
        }
        self.require_endpoint(BackendKind::Generate)?;
        self.require_endpoint(BackendKind::Embed)?;
        self.check_reid_thresholds()?;
        if !(target_age.is_finite() && target_age > 0.0) {
            return Err(Error::Usage(format!("target age must be > 0, got {target_age}")));
        }
        let key = direction.label().to_owned();
        let mut manifest = Manifest {
            base_dir: self.out_dir.clone(),
            ..Manifest::default()
        };
        let results: Vec<Result<SubjectGeneration>> = self
            .records
            .par_iter()
            .map(|r| {
                let (from, to) = match direction {
                    AgingDirection::Age => (&r.young_images, &r.old_images),
                    AgingDirection::Deage => (&r.old_images, &r.young_images),
                };
                let inputs: Vec<PathBuf> = from.iter().map(|p| self.dataset_image(p)).collect();
                let targets: Vec<PathBuf> = to.iter().map(|p| self.dataset_image(p)).collect();
                let base =
                    build_generation_prompt_with(r, &self.rules, &self.templates, self.config.prompt.max_length)?;
                let prompt = build_aging_prompt_with(&base, target_age, direction, &self.templates)?;
                let label = file_label(&format!("{key}-{}", r.subject_id));
                let request = self.generation_request(inputs, prompt, label);
                let images = self.gateway.generate(&request)?;
                self.subject_generation(&targets, &request, &images)
            })
            .collect();
        let mut arm = ArmManifest {
            label: key.clone(),
            ..ArmManifest::default()
        };
        let mut first_error = None;
        for (r, res) in self.records.iter().zip(results) {
            match res {
                Ok(g) => {
                    arm.subjects.insert(r.subject_id.clone(), g);
                }
                Err(e) => {
                    manifest.skipped.push(FailureNote {
                        subject_id: r.subject_id.clone(),
                        arm: key.clone(),
                        image: None,
                        reason: e.to_string(),
                    });
                    first_error.get_or_insert(e);
                }
            }
        }
        if arm.subjects.is_empty() {
            return Err(first_error.unwrap_or_else(|| Error::Validation("no aged images were generated".into())));
        }
        manifest.arms.insert(key.clone(), arm);
        let (refs, probes) = arm_galleries(&manifest, &manifest.arms[&key]);
        let dir = self.stage_dir("age")?;
        let evaluation = self.evaluate(&key, &key, &refs, &probes, &dir)?;
        // stored one level down, so its paths gain a `..`
        write_json(&dir.join(MANIFEST_FILE), &rebase_manifest(&manifest, ".."))?;
        let outcome = AgeOutcome {
            target_age,
            direction,
            manifest,
            evaluation,
        };
        write_json(
            &dir.join("summary.json"),
            &json!({ "target_age": target_age, "direction": direction, "evaluation": outcome.evaluation }),
        )?;
        self.write_embeddings(&self.stage_dir("reid")?)?;
        Ok(outcome)
    }

    fn embed_cached(&self, subject_id: &str, path: &Path, provenance: &str) -> Result<Embedding> {
        let abs = std::path::absolute(path).unwrap_or_else(|_| path.to_owned());
        if let Some(e) = self.embeddings.lock().expect("embedding cache").get(&abs) {
            return Ok(e.clone());
        }
        let mut e = self.gateway.embed(subject_id, &abs, provenance)?;
        e.image = self.display(&abs);
        self.embeddings.lock().expect("embedding cache").insert(abs, e.clone());
        Ok(e)
    }

    fn write_embeddings(&self, dir: &Path) -> Result<()> {
        let mut all: Vec<Embedding> = self.embeddings.lock().expect("embedding cache").values().cloned().collect();
        all.sort_by(|a, b| a.image.cmp(&b.image));
        write_with(&dir.join("embeddings.jsonl"), |w| write_embeddings_jsonl(&all, w))
    }

    fn evaluate(
        &self,
        key: &str,
        label: &str,
        refs: &BTreeMap<String, Vec<PathBuf>>,
        probes: &BTreeMap<String, Vec<PathBuf>>,
        dir: &Path,
    ) -> Result<ArmEvaluation> {
        let subjects: Vec<String> = refs
            .iter()
            .filter(|(id, imgs)| !imgs.is_empty() && probes.get(*id).is_some_and(|p| !p.is_empty()))
            .map(|(id, _)| id.clone())
            .collect();
        let mut eval = ArmEvaluation {
            arm: key.to_owned(),
            label: label.to_owned(),
            reference_images: subjects.iter().map(|s| refs[s].len()).sum(),
            probe_images: subjects.iter().map(|s| probes[s].len()).sum(),
            subjects,
            distance: None,
            similarity: None,
            error: None,
            matrices: None,
        };
        if eval.subjects.is_empty() {
            eval.error = Some("no subject has both references and probes".into());
            return Ok(eval);
        }
        let jobs: Vec<(&str, &Path, &str)> = eval
            .subjects
            .iter()
            .flat_map(|s| {
                refs[s]
                    .iter()
                    .map(move |p| (s.as_str(), p.as_path(), "reference"))
                    .chain(probes[s].iter().map(move |p| (s.as_str(), p.as_path(), key)))
            })
            .collect();
        let embedded: Vec<Result<Embedding>> =
            jobs.par_iter().map(|(s, p, prov)| self.embed_cached(s, p, prov)).collect();
        let mut ref_e = Vec::new();
        let mut probe_e = Vec::new();
        for ((_, _, prov), e) in jobs.iter().zip(embedded) {
            match e {
                Ok(e) if *prov == "reference" => ref_e.push(e),
                Ok(e) => probe_e.push(e),
                Err(e @ Error::Protocol { .. }) => {
                    eval.error = Some(e.to_string());
                    return Ok(eval);
                }
                Err(e) => return Err(e),
            }
        }
        let (rg, pg) = (group_by_subject(&ref_e), group_by_subject(&probe_e));
        let agg = self.config.reid.aggregation;
        let dist = build_confusion_matrix(&rg, &pg, Semantics::Distance, agg)?;
        let sim = build_confusion_matrix(&rg, &pg, Semantics::Similarity, agg)?;
        eval.distance = Some(self.summarize(&dist, key, self.config.reid.distance_threshold, dir)?);
        eval.similarity = Some(self.summarize(&sim, key, self.config.reid.similarity_threshold, dir)?);
        eval.matrices = Some((dist, sim));
        Ok(eval)
    }

    fn summarize(
        &self,
        m: &ConfusionMatrix,
        key: &str,
        threshold: Option<f64>,
        dir: &Path,
    ) -> Result<MatrixSummary> {
        let stem = format!("{key}.{}", m.semantics.key());
        let file = dir.join(format!("{stem}.csv"));
        write_with(&file, |w| m.write_csv(w))?;
        let sweep_file = if self.config.reid.sweep {
            let path = dir.join(format!("{stem}.sweep.csv"));
            let sweep = threshold_sweep(m)?;
            write_with(&path, |w| write_sweep_csv(&sweep, w))?;
            Some(self.display(&path))
        } else {
            None
        };
        Ok(MatrixSummary {
            file: self.display(&file),
            identification_accuracy: identification_accuracy(m)?,
            mean_genuine_score: mean_genuine_score(m)?,
            verification: threshold.map(|t| verification_metrics(m, t)).transpose()?,
            sweep_file,
        })
    }

    /// Runs every stage whose endpoints are configured, then writes the run
    /// report.
    pub fn run(&self) -> Result<RunReport> {
        self.require_subjects()?;
        if self.gateway.has_endpoint(BackendKind::Describe) {
            self.run_describe()?;
        }
        if self.gateway.has_endpoint(BackendKind::Generate) {
            let manifest = self.run_augment()?;
            if self.gateway.has_endpoint(BackendKind::Embed) {
                self.run_reid(&manifest)?;
                if let Some(a) = self.config.age {
                    self.run_age(a.target_age, a.direction)?;
                }
            }
        }
        build_report(&self.out_dir)
    }
}

/// Reference and probe images per subject for one manifest arm.
fn arm_galleries(
    manifest: &Manifest,
    arm: &ArmManifest,
) -> (BTreeMap<String, Vec<PathBuf>>, BTreeMap<String, Vec<PathBuf>>) {
    let mut refs = BTreeMap::new();
    let mut probes = BTreeMap::new();
    for (id, s) in &arm.subjects {
        refs.insert(id.clone(), s.references.iter().map(|p| manifest.resolve(p)).collect());
        probes.insert(id.clone(), s.images.iter().map(|p| manifest.resolve(p)).collect());
    }
    (refs, probes)
}

/// Prefixes every relative path of a manifest so it resolves from a
/// subdirectory.
fn rebase_manifest(m: &Manifest, prefix: &str) -> Manifest {
    let fix = |p: &String| {
        if Path::new(p).is_absolute() {
            p.clone()
        } else {
            format!("{prefix}/{p}")
        }
    };
    let mut out = m.clone();
    for arm in out.arms.values_mut() {
        for s in arm.subjects.values_mut() {
            for list in [&mut s.references, &mut s.inputs, &mut s.images] {
                *list = list.iter().map(fix).collect();
            }
        }
    }
    out
}

fn file_label(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn raw_description(d: &AttributeDescription) -> Value {
    let attrs: serde_json::Map<String, Value> = d
        .attributes
        .iter()
        .map(|v| (v.category.key().to_owned(), Value::String(v.raw.clone())))
        .collect();
    json!({
        "subject_id": d.subject_id,
        "source_image": d.source_image.to_string_lossy().replace('\\', "/"),
        "provenance": d.provenance.key(),
        "attributes": attrs,
    })
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_json_if_exists(path: &Path) -> Result<Option<Value>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// Collects the report files of `out_dir` into `run_report.json`. Fails
/// when a manifest lists a generated image that is not on disk.
pub fn build_report(out_dir: impl AsRef<Path>) -> Result<RunReport> {
    let out = out_dir.as_ref();
    let describe = match (
        read_json_if_exists(&out.join("describe/cohort.json"))?,
        read_json_if_exists(&out.join("describe/reports.json"))?,
    ) {
        (Some(cohort), Some(reports)) => Some(json!({ "cohort": cohort, "reports": reports })),
        _ => None,
    };
    let mut generated_images = 0;
    let mut manifest = None;
    for (rel, name) in [(MANIFEST_FILE, true), ("age/manifest.json", false)] {
        let path = out.join(rel);
        if path.is_file() {
            let m = Manifest::load(&path)?;
            let missing = m.missing_images();
            if !missing.is_empty() {
                return Err(Error::Validation(format!(
                    "{} lists {} missing image(s), first {}",
                    path.display(),
                    missing.len(),
                    missing[0].display()
                )));
            }
            generated_images += m.image_count();
            if name {
                manifest = Some(MANIFEST_FILE.to_owned());
            }
        }
    }
    let report = RunReport {
        describe,
        manifest,
        generated_images,
        reid: read_json_if_exists(&out.join("reid/summary.json"))?,
        age: read_json_if_exists(&out.join("age/summary.json"))?,
        journal: out.join(JOURNAL_FILE).is_file().then(|| JOURNAL_FILE.to_owned()),
    };
    write_json(&out.join(RUN_REPORT_FILE), &report)?;
    Ok(report)
}

/// Writes `plots.gp`, a gnuplot script drawing every matrix as a heat map
/// and every sweep as error-rate curves. Returns the script path.
pub fn emit_gnuplot(out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out = out_dir.as_ref();
    let mut matrices = Vec::new();
    let mut sweeps = Vec::new();
    for sub in ["reid", "age"] {
        let dir = out.join(sub);
        let Ok(entries) = std::fs::read_dir(&dir) else { continue };
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".csv"))
            .collect();
        names.sort();
        for n in names {
            let rel = format!("{sub}/{n}");
            if n.ends_with(".sweep.csv") {
                sweeps.push(rel);
            } else {
                matrices.push(rel);
            }
        }
    }
    let mut s = String::from("set datafile separator ','\nset terminal pngcairo size 800,700\n");
    for m in &matrices {
        let png = m.trim_end_matches(".csv");
        s.push_str(&format!(
            "set output '{png}.png'\nset title '{m}'\nunset key\nplot '{m}' matrix rowheaders columnheaders with image\n"
        ));
    }
    for sw in &sweeps {
        let png = sw.trim_end_matches(".csv");
        s.push_str(&format!(
            "set output '{png}.png'\nset title '{sw}'\nset key autotitle columnhead\n\
             plot '{sw}' using 1:3 with lines, '' using 1:4 with lines\n"
        ));
    }
    let path = out.join("plots.gp");
    std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_names_round_trip() {
        for a in [
            Arm::OriginalOnly,
            Arm::OriginalEnhanced(EnhanceMethod::Maxim),
            Arm::OriginalEnhanced(EnhanceMethod::TvDenoise),
            Arm::OriginalGenerated,
        ] {
            assert_eq!(a.key().parse::<Arm>().unwrap(), a);
        }
        assert_eq!("original+generated".parse::<Arm>().unwrap(), Arm::OriginalGenerated);
        assert_eq!("original+srgan".parse::<Arm>().unwrap(), Arm::OriginalEnhanced(EnhanceMethod::Srgan));
        assert!("generated".parse::<Arm>().is_err());
    }

    #[test]
    fn config_paths_resolve_against_file() {
        let cfg = PipelineConfig::from_toml(
            r#"
dataset = "data/subjects.json"
enhancements = ["tvd", "maxim"]
[augment]
arms = ["original", "original+generated"]
[reid]
sweep = true
[endpoints.describe]
fixtures = "fx"
"#,
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(cfg.dataset, Path::new("/base/data/subjects.json"));
        assert_eq!(cfg.out_dir, Path::new("/base/out"));
        assert_eq!(cfg.enhancements, vec![EnhanceMethod::TvDenoise, EnhanceMethod::Maxim]);
        assert_eq!(cfg.endpoints.describe.unwrap().fixtures.unwrap(), Path::new("/base/fx"));
        assert_eq!(cfg.generation.count, 4);
        assert!(cfg.reid.sweep);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = PipelineConfig::from_toml("dataset = \"d.json\"\nbogus = 1\n", Path::new(".")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn env_overrides() {
        let mut cfg = PipelineConfig::new("d.json", "out");
        cfg.endpoints.describe = Some(EndpointConfig::fixtures("fx"));
        let env: HashMap<&str, &str> = [
            ("MUGSHOT_DESCRIBE_URL", "http://vlm:8000"),
            ("MUGSHOT_EMBED_FIXTURES", "emb"),
            ("MUGSHOT_BEARER_TOKEN", "secret"),
        ]
        .into();
        cfg.apply_env(|k| env.get(k).map(|v| v.to_string()));
        let d = cfg.endpoints.describe.as_ref().unwrap();
        assert_eq!(d.url.as_deref(), Some("http://vlm:8000"));
        assert!(d.fixtures.is_none());
        assert_eq!(d.bearer_token.as_deref(), Some("secret"));
        let e = cfg.endpoints.embed.as_ref().unwrap();
        assert_eq!(e.fixtures.as_deref(), Some(Path::new("emb")));
        assert!(e.bearer_token.is_none());
    }

    #[test]
    fn config_toml_round_trip() {
        let mut cfg = PipelineConfig::new("/d/subjects.json", "/o");
        cfg.age = Some(AgeConfig {
            target_age: 70.0,
            direction: AgingDirection::Age,
        });
        cfg.use_fixtures("/fx");
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text, Path::new("/")).unwrap(), cfg);
    }
}
