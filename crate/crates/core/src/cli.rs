//! Command-line front end. Every stage reads and writes JSON files, and every
//! run leaves a `manifest.json` that `replay` can re-execute.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{load_xml_dir, AnnotatedDocument, Corpus, SplitSpec};
use crate::exec::Execution;
use crate::fill::{fill, mask_document, FillConfig, FillError, SyntheticDocument, SystemPreset};
use crate::fixture::generate_fixture_corpus;
use crate::masker::{apply_mask, MaskPlan, MaskPolicy};
use crate::mlm::{grid_search, train_native, FillModel, ModelError, NativeCountModel, TrainingConfig};
use crate::ner::{load_gazetteer, Gazetteer, MED_LABELS};
use crate::phi::{load_rules, RuleSet};
use crate::pos::PosLexicon;
use crate::privacy::{privacy_report, PrivacyCase, DEFAULT_LCS_THRESHOLDS, DEFAULT_MIN_TOKENS};
use crate::remote::{RemoteEmbedder, RemoteModel, DEFAULT_REMOTE_WINDOW};
use crate::resemblance::{
    pair_documents, resemblance_reports, EmbeddingProvider, HashedProjection, Stopwords, DEFAULT_TOPK,
};
use crate::rng::derive_seed;
use crate::text::tokenize_with_id;
use crate::utility::{run_utility_experiment, UtilityOptions, UtilityResources, DEFAULT_EPOCHS};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "synthrecord",
    version,
    about = "Synthetic clinical letters by masking and refilling"
)]
pub struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true, env = "SYNTHRECORD_WORKERS")]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic fixture corpus.
    Fixture(FixtureArgs),
    /// Convert a directory of annotated XML letters to corpus JSON.
    Ingest(IngestArgs),
    /// Grid-search and train the native fill model.
    Train(TrainArgs),
    /// Detect PHI, tag and write masked documents.
    Mask(MaskArgs),
    /// Fill masked documents.
    Fill(FillArgs),
    /// Mask and fill in one run.
    Generate(GenerateArgs),
    /// Evaluation reports.
    Eval {
        #[command(subcommand)]
        which: EvalCommand,
    },
    /// Re-run the command recorded in a manifest and compare outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// ROUGE, embedding similarity, readability and top-k word overlap
    Resemblance(ResemblanceArgs),
    /// PHI recall, re-identification and LCS leak rates
    Privacy(PrivacyArgs),
    /// Downstream NER on real vs synthetic training data
    Utility(UtilityArgs),
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output directory.
    #[arg(long, env = "SYNTHRECORD_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PresetArgs {
    /// S_0.5, S_0.7, I_0.7, I_0.9 or identity.
    #[arg(long, default_value = "I_0.7", env = "SYNTHRECORD_PRESET")]
    pub preset: String,
    /// Masking policy JSON replacing the preset's policy.
    #[arg(long, env = "SYNTHRECORD_POLICY")]
    pub policy: Option<PathBuf>,
    /// Fill config JSON replacing the preset's fill config.
    #[arg(long, env = "SYNTHRECORD_FILL_CONFIG")]
    pub fill_config: Option<PathBuf>,
    /// Allow policies that leave some detected PHI unmasked.
    #[arg(long, env = "SYNTHRECORD_UNSAFE_PHI")]
    pub unsafe_phi: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Native,
    Remote,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value = "native", env = "SYNTHRECORD_BACKEND")]
    pub backend: Backend,
    /// Base URL of the remote model server.
    #[arg(long, env = "SYNTHRECORD_ENDPOINT")]
    pub endpoint: Option<String>,
    /// Native model file written by `train`.
    #[arg(long, env = "SYNTHRECORD_MODEL")]
    pub model: Option<PathBuf>,
    /// Context window of the remote model, in tokens.
    #[arg(long, default_value_t = DEFAULT_REMOTE_WINDOW, env = "SYNTHRECORD_REMOTE_WINDOW")]
    pub remote_window: usize,
    #[arg(long, default_value_t = 30, env = "SYNTHRECORD_TIMEOUT_SECS")]
    pub timeout_secs: u64,
}

#[derive(Debug, Args)]
pub struct DetectorArgs {
    /// PHI ruleset JSON replacing the shipped rules.
    #[arg(long, env = "SYNTHRECORD_RULES")]
    pub rules: Option<PathBuf>,
    /// Clinical gazetteer TSV replacing the shipped one.
    #[arg(long, env = "SYNTHRECORD_GAZETTEER")]
    pub gazetteer: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[command(flatten)]
    pub out: OutArg,
    #[arg(long, env = "SYNTHRECORD_SEED")]
    pub seed: u64,
    #[arg(long, default_value_t = 100, env = "SYNTHRECORD_N_DOCS")]
    pub n_docs: usize,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub out: OutArg,
    /// Directory of XML files.
    #[arg(long, env = "SYNTHRECORD_INPUT")]
    pub input: PathBuf,
    #[arg(long, default_value = "corpus")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub out: OutArg,
    /// Corpus JSON.
    #[arg(long, env = "SYNTHRECORD_INPUT")]
    pub input: PathBuf,
    #[arg(long, env = "SYNTHRECORD_SEED")]
    pub seed: u64,
    /// Base training config JSON; the grid varies alpha, beta, phi and psi.
    #[arg(long, env = "SYNTHRECORD_TRAINING_CONFIG")]
    pub training_config: Option<PathBuf>,
    /// Train the base config only.
    #[arg(long)]
    pub no_grid: bool,
    #[arg(long, default_value_t = 0.2)]
    pub validation_fraction: f64,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[command(flatten)]
    pub out: OutArg,
    #[arg(long, env = "SYNTHRECORD_INPUT")]
    pub input: PathBuf,
    #[arg(long, env = "SYNTHRECORD_SEED")]
    pub seed: u64,
    #[arg(long, default_value_t = 1, env = "SYNTHRECORD_VARIANTS")]
    pub variants: usize,
    #[command(flatten)]
    pub preset: PresetArgs,
    #[command(flatten)]
    pub detector: DetectorArgs,
}

#[derive(Debug, Args)]
pub struct FillArgs {
    #[command(flatten)]
    pub out: OutArg,
    /// masked.json written by `mask`.
    #[arg(long, env = "SYNTHRECORD_MASKED")]
    pub masked: PathBuf,
    #[arg(long, env = "SYNTHRECORD_SEED")]
    pub seed: u64,
    #[command(flatten)]
    pub preset: PresetArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub out: OutArg,
    #[arg(long, env = "SYNTHRECORD_INPUT")]
    pub input: PathBuf,
    #[arg(long, env = "SYNTHRECORD_SEED")]
    pub seed: u64,
    #[arg(long, default_value_t = 1, env = "SYNTHRECORD_VARIANTS")]
    pub variants: usize,
    #[command(flatten)]
    pub preset: PresetArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub detector: DetectorArgs,
}

#[derive(Debug, Args)]
pub struct ResemblanceArgs {
    #[command(flatten)]
    pub out: OutArg,
    /// Real corpus JSON.
    #[arg(long, env = "SYNTHRECORD_INPUT")]
    pub input: PathBuf,
    /// synthetic.json written by `fill` or `generate`.
    #[arg(long, env = "SYNTHRECORD_SYNTHETIC")]
    pub synthetic: PathBuf,
    /// Remote embedding server; the hashed projection is used otherwise.
    #[arg(long, env = "SYNTHRECORD_ENDPOINT")]
    pub endpoint: Option<String>,
    #[arg(long, env = "SYNTHRECORD_STOPWORDS")]
    pub stopwords: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_TOPK)]
    pub ks: Vec<usize>,
    #[arg(long, default_value_t = 30, env = "SYNTHRECORD_TIMEOUT_SECS")]
    pub timeout_secs: u64,
}

#[derive(Debug, Args)]
pub struct PrivacyArgs {
    #[command(flatten)]
    pub out: OutArg,
    #[arg(long, env = "SYNTHRECORD_INPUT")]
    pub input: PathBuf,
    #[arg(long, env = "SYNTHRECORD_MASKED")]
    pub masked: PathBuf,
    #[arg(long, env = "SYNTHRECORD_SYNTHETIC")]
    pub synthetic: PathBuf,
    /// Headline recall over HIPAA categories only.
    #[arg(long, env = "SYNTHRECORD_HIPAA_ONLY")]
    pub hipaa_only: bool,
    #[arg(long, default_value_t = DEFAULT_MIN_TOKENS)]
    pub min_tokens: usize,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LCS_THRESHOLDS)]
    pub thresholds: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct UtilityArgs {
    #[command(flatten)]
    pub out: OutArg,
    #[arg(long, env = "SYNTHRECORD_INPUT")]
    pub input: PathBuf,
    #[arg(long, env = "SYNTHRECORD_SEED")]
    pub seed: u64,
    #[command(flatten)]
    pub preset: PresetArgs,
    /// Synthetic versions per training letter: 1 or 2.
    #[arg(long, default_value_t = 2, env = "SYNTHRECORD_MULTIPLIER")]
    pub multiplier: usize,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    pub epochs: usize,
    /// Drop sentences without entities from tagger data.
    #[arg(long)]
    pub drop_empty: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Backend = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub stage: &'static str,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} failed: {}", self.stage, self.message)
    }
}

impl std::error::Error for CliError {}

fn usage(stage: &'static str, message: impl fmt::Display) -> CliError {
    CliError {
        kind: ExitKind::Usage,
        stage,
        message: message.to_string(),
    }
}

fn data(stage: &'static str, message: impl fmt::Display) -> CliError {
    CliError {
        kind: ExitKind::Data,
        stage,
        message: message.to_string(),
    }
}

fn from_model(stage: &'static str, e: ModelError) -> CliError {
    let kind = if e.is_backend() {
        ExitKind::Backend
    } else {
        ExitKind::Data
    };
    CliError {
        kind,
        stage,
        message: e.to_string(),
    }
}

fn from_fill(stage: &'static str, e: FillError) -> CliError {
    let kind = match &e {
        _ if e.is_backend() => ExitKind::Backend,
        FillError::UnknownPreset(_) | FillError::InvalidConfig(_) | FillError::WindowTooSmall { .. } => ExitKind::Usage,
        _ => ExitKind::Data,
    };
    CliError {
        kind,
        stage,
        message: e.to_string(),
    }
}

/// One masked letter as staged between `mask` and `fill`. The original text
/// is kept because iterative filling reads unfilled originals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedRecord {
    pub doc_id: String,
    pub variant_index: usize,
    pub text: String,
    pub masked_text: String,
    pub plan: MaskPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    /// Arguments after the program name, without `--out` and `--workers`;
    /// values read from the environment are written out as flags.
    pub command: Vec<String>,
    pub inputs: Vec<FileDigest>,
    pub config_hash: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a file, or of every file in a directory by sorted name.
fn digest_path(path: &Path) -> Result<String, CliError> {
    let read_err = |e: std::io::Error| data("read input", format!("{}: {e}", path.display()));
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(read_err)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(read_err)?;
        entries.sort();
        let mut hasher = Sha256::new();
        for entry in entries.iter().filter(|p| p.is_file()) {
            hasher.update(entry.file_name().unwrap_or_default().as_encoded_bytes());
            hasher.update(fs::read(entry).map_err(read_err)?);
        }
        Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
    } else {
        Ok(sha256_hex(&fs::read(path).map_err(read_err)?))
    }
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    bytes
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: &'static str) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| data(stage, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| data(stage, format!("{}: {e}", path.display())))
}

fn load_corpus(path: &Path) -> Result<Corpus, CliError> {
    Corpus::load(path).map_err(|e| data("load corpus", format!("{}: {e}", path.display())))
}

/// What a command produced, before anything is written.
struct RunOutput {
    files: Vec<(String, Vec<u8>)>,
    inputs: Vec<PathBuf>,
    config: Value,
    seed: Option<u64>,
}

fn resolve_preset(args: &PresetArgs) -> Result<SystemPreset, CliError> {
    let mut preset = match args.preset.as_str() {
        "identity" => SystemPreset::identity(),
        name => SystemPreset::named(name).map_err(|e| from_fill("preset", e))?,
    };
    if let Some(path) = &args.policy {
        preset.policy = read_json::<MaskPolicy>(path, "policy")?;
        preset.name = format!("{}+policy", preset.name);
    }
    if let Some(path) = &args.fill_config {
        preset.fill = read_json::<FillConfig>(path, "fill config")?;
        preset.name = format!("{}+fill", preset.name);
    }
    if args.unsafe_phi {
        preset.allow_partial_phi = true;
    }
    preset.validate().map_err(|e| from_fill("preset", e))?;
    Ok(preset)
}

fn preset_inputs(args: &PresetArgs) -> Vec<PathBuf> {
    args.policy.iter().chain(&args.fill_config).cloned().collect()
}

struct Detector {
    rules: RuleSet,
    tagger: Gazetteer,
    lexicon: PosLexicon,
}

fn resolve_detector(args: &DetectorArgs) -> Result<Detector, CliError> {
    let rules = match &args.rules {
        Some(p) => load_rules(p).map_err(|e| data("load rules", e))?,
        None => RuleSet::default_rules(),
    };
    let tagger = match &args.gazetteer {
        Some(p) => load_gazetteer(p, &MED_LABELS).map_err(|e| data("load gazetteer", e))?,
        None => Gazetteer::clinical(),
    };
    Ok(Detector {
        rules,
        tagger,
        lexicon: PosLexicon::shipped(),
    })
}

fn detector_inputs(args: &DetectorArgs) -> Vec<PathBuf> {
    args.rules.iter().chain(&args.gazetteer).cloned().collect()
}

fn resolve_model(
    args: &BackendArgs,
    training_corpus: Option<&Corpus>,
    seed: u64,
) -> Result<Arc<dyn FillModel>, CliError> {
    match args.backend {
        Backend::Remote => {
            let endpoint = args
                .endpoint
                .as_deref()
                .ok_or_else(|| usage("backend", "--backend remote needs --endpoint"))?;
            Ok(Arc::new(RemoteModel::new(
                endpoint,
                args.remote_window,
                Duration::from_secs(args.timeout_secs),
            )))
        }
        Backend::Native => match (&args.model, training_corpus) {
            (Some(path), _) => Ok(Arc::new(
                NativeCountModel::load(path).map_err(|e| from_model("load model", e))?,
            )),
            (None, Some(corpus)) => {
                let config = TrainingConfig {
                    seed,
                    ..TrainingConfig::default()
                };
                Ok(Arc::new(
                    train_native(corpus, &config).map_err(|e| from_model("train", e))?,
                ))
            }
            (None, None) => Err(usage("backend", "the native backend needs --model")),
        },
    }
}

fn backend_config(args: &BackendArgs) -> Value {
    json!({
        "backend": args.backend,
        "endpoint": args.endpoint,
        "remote_window": args.remote_window,
    })
}

fn mask_corpus(
    corpus: &Corpus,
    preset: &SystemPreset,
    variants: usize,
    seed: u64,
    detector: &Detector,
) -> Result<Vec<MaskedRecord>, CliError> {
    if variants == 0 {
        return Err(usage("mask", "--variants must be at least 1"));
    }
    let per_doc = Execution::default().try_map(&corpus.docs, |ad| {
        (0..variants)
            .map(|v| {
                let policy = preset
                    .policy
                    .clone()
                    .with_seed(derive_seed(seed, &format!("variant/{v}/mask")));
                let md = mask_document(&ad.doc, &detector.rules, &detector.tagger, &detector.lexicon, &policy)
                    .map_err(|e| from_fill("mask", e))?;
                Ok(MaskedRecord {
                    doc_id: ad.id().to_string(),
                    variant_index: v,
                    text: ad.doc.text.clone(),
                    masked_text: md.masked_text(),
                    plan: md.plan,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;
    Ok(per_doc.into_iter().flatten().collect())
}

fn fill_records(
    records: &[MaskedRecord],
    model: &dyn FillModel,
    fill_config: &FillConfig,
    seed: u64,
) -> Result<Vec<SyntheticDocument>, CliError> {
    Execution::default().try_map(records, |r| {
        let doc = tokenize_with_id(&r.doc_id, &r.text);
        let md = apply_mask(&doc, &r.plan).map_err(|e| data("fill", format!("{}: {e}", r.doc_id)))?;
        let config = FillConfig {
            seed: derive_seed(seed, &format!("variant/{}/fill", r.variant_index)),
            ..fill_config.clone()
        };
        let mut synthetic = fill(&md, model, &config).map_err(|e| from_fill("fill", e))?;
        synthetic.variant_index = r.variant_index;
        Ok(synthetic)
    })
}

fn run_fixture(args: &FixtureArgs) -> Result<RunOutput, CliError> {
    let corpus = generate_fixture_corpus(args.seed, args.n_docs).map_err(|e| data("fixture", e))?;
    let json = corpus.to_json().map_err(|e| data("fixture", e))?;
    Ok(RunOutput {
        files: vec![("corpus.json".into(), format!("{json}\n").into_bytes())],
        inputs: vec![],
        config: json!({ "n_docs": args.n_docs }),
        seed: Some(args.seed),
    })
}

fn run_ingest(args: &IngestArgs) -> Result<RunOutput, CliError> {
    let corpus = load_xml_dir(&args.name, &args.input).map_err(|e| data("ingest", e))?;
    let json = corpus.to_json().map_err(|e| data("ingest", e))?;
    Ok(RunOutput {
        files: vec![("corpus.json".into(), format!("{json}\n").into_bytes())],
        inputs: vec![args.input.clone()],
        config: json!({ "name": args.name }),
        seed: None,
    })
}

fn run_train(args: &TrainArgs) -> Result<RunOutput, CliError> {
    let corpus = load_corpus(&args.input)?;
    let mut base = match &args.training_config {
        Some(p) => read_json::<TrainingConfig>(p, "training config")?,
        None => TrainingConfig::default(),
    };
    base.seed = args.seed;
    base.validate().map_err(|e| from_model("training config", e))?;
    let mut files = Vec::new();
    let model = if args.no_grid {
        train_native(&corpus, &base).map_err(|e| from_model("train", e))?
    } else {
        let v = args.validation_fraction;
        if !(v > 0.0 && v < 1.0) {
            return Err(usage("train", "--validation-fraction must lie in (0, 1)"));
        }
        let split = SplitSpec::new(&[("train", 1.0 - v), ("validation", v)], args.seed);
        let outcome = grid_search(&corpus, &TrainingConfig::reference_grid(&base), &split)
            .map_err(|e| from_model("grid search", e))?;
        files.push(("grid_report.json".to_string(), to_json_bytes(&outcome.report)));
        outcome.model
    };
    files.insert(0, ("model.json".into(), format!("{}\n", model.to_json()).into_bytes()));
    Ok(RunOutput {
        files,
        inputs: std::iter::once(args.input.clone())
            .chain(args.training_config.clone())
            .collect(),
        config: json!({ "base": base, "grid": !args.no_grid, "validation_fraction": args.validation_fraction }),
        seed: Some(args.seed),
    })
}

fn run_mask(args: &MaskArgs) -> Result<RunOutput, CliError> {
    let preset = resolve_preset(&args.preset)?;
    let detector = resolve_detector(&args.detector)?;
    let corpus = load_corpus(&args.input)?;
    let records = mask_corpus(&corpus, &preset, args.variants, args.seed, &detector)?;
    let mut inputs = vec![args.input.clone()];
    inputs.extend(preset_inputs(&args.preset));
    inputs.extend(detector_inputs(&args.detector));
    Ok(RunOutput {
        files: vec![("masked.json".into(), to_json_bytes(&records))],
        inputs,
        config: json!({ "preset": preset, "variants": args.variants }),
        seed: Some(args.seed),
    })
}

fn run_fill(args: &FillArgs) -> Result<RunOutput, CliError> {
    let preset = resolve_preset(&args.preset)?;
    let records: Vec<MaskedRecord> = read_json(&args.masked, "load masked")?;
    let model = resolve_model(&args.backend, None, args.seed)?;
    let synthetic = fill_records(&records, model.as_ref(), &preset.fill, args.seed)?;
    let mut inputs = vec![args.masked.clone()];
    inputs.extend(preset_inputs(&args.preset));
    inputs.extend(args.backend.model.clone());
    Ok(RunOutput {
        files: vec![("synthetic.json".into(), to_json_bytes(&synthetic))],
        inputs,
        config: json!({ "fill": preset.fill, "backend": backend_config(&args.backend) }),
        seed: Some(args.seed),
    })
}

fn run_generate(args: &GenerateArgs) -> Result<RunOutput, CliError> {
    let preset = resolve_preset(&args.preset)?;
    let detector = resolve_detector(&args.detector)?;
    let corpus = load_corpus(&args.input)?;
    let model = resolve_model(&args.backend, Some(&corpus), args.seed)?;
    let records = mask_corpus(&corpus, &preset, args.variants, args.seed, &detector)?;
    let synthetic = fill_records(&records, model.as_ref(), &preset.fill, args.seed)?;
    let mut inputs = vec![args.input.clone()];
    inputs.extend(preset_inputs(&args.preset));
    inputs.extend(args.backend.model.clone());
    inputs.extend(detector_inputs(&args.detector));
    Ok(RunOutput {
        files: vec![
            ("masked.json".into(), to_json_bytes(&records)),
            ("synthetic.json".into(), to_json_bytes(&synthetic)),
        ],
        inputs,
        config: json!({
            "preset": preset,
            "variants": args.variants,
            "backend": backend_config(&args.backend),
        }),
        seed: Some(args.seed),
    })
}

fn run_resemblance(args: &ResemblanceArgs) -> Result<RunOutput, CliError> {
    let corpus = load_corpus(&args.input)?;
    let synthetic: Vec<SyntheticDocument> = read_json(&args.synthetic, "load synthetic")?;
    let stopwords = match &args.stopwords {
        Some(p) => Stopwords::load(p).map_err(|e| data("stopwords", e))?,
        None => Stopwords::shipped(),
    };
    let provider: Box<dyn EmbeddingProvider> = match &args.endpoint {
        Some(endpoint) => Box::new(RemoteEmbedder::new(endpoint, Duration::from_secs(args.timeout_secs))),
        None => Box::new(HashedProjection::default()),
    };
    let pairs = pair_documents(&corpus, &synthetic).map_err(|e| data("pair documents", e))?;
    let reports = resemblance_reports(&pairs, provider.as_ref(), &stopwords, &args.ks, Execution::default()).map_err(
        |e| match e {
            crate::resemblance::MetricError::Provider(m) => CliError {
                kind: ExitKind::Backend,
                stage: "embedding",
                message: m,
            },
            other => data("resemblance", other),
        },
    )?;
    let mut inputs = vec![args.input.clone(), args.synthetic.clone()];
    inputs.extend(args.stopwords.clone());
    Ok(RunOutput {
        files: reports
            .iter()
            .map(|r| (format!("{}.json", r.metric), to_json_bytes(r)))
            .collect(),
        inputs,
        config: json!({ "ks": args.ks, "endpoint": args.endpoint }),
        seed: None,
    })
}

fn run_privacy(args: &PrivacyArgs) -> Result<RunOutput, CliError> {
    let corpus = load_corpus(&args.input)?;
    let records: Vec<MaskedRecord> = read_json(&args.masked, "load masked")?;
    let synthetic: Vec<SyntheticDocument> = read_json(&args.synthetic, "load synthetic")?;
    let plans: BTreeMap<(&str, usize), &MaskPlan> = records
        .iter()
        .map(|r| ((r.doc_id.as_str(), r.variant_index), &r.plan))
        .collect();
    let cases = synthetic
        .iter()
        .map(|s| {
            let original: &AnnotatedDocument = corpus
                .get(&s.source_id)
                .ok_or_else(|| data("privacy", format!("{} is not in the corpus", s.source_id)))?;
            let plan = plans.get(&(s.source_id.as_str(), s.variant_index)).ok_or_else(|| {
                data(
                    "privacy",
                    format!("{} variant {} has no plan", s.source_id, s.variant_index),
                )
            })?;
            Ok(PrivacyCase {
                original: original.clone(),
                plan: (*plan).clone(),
                synthetic: tokenize_with_id(&format!("{}#{}", s.source_id, s.variant_index), &s.text),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let report = privacy_report(&cases, args.min_tokens, &args.thresholds).map_err(|e| data("privacy", e))?;
    let recall = if args.hipaa_only {
        report.recall_hipaa
    } else {
        report.recall_all
    };
    let body = json!({
        "recall": recall,
        "hipaa_only": args.hipaa_only,
        "report": report,
    });
    Ok(RunOutput {
        files: vec![("privacy.json".into(), to_json_bytes(&body))],
        inputs: vec![args.input.clone(), args.masked.clone(), args.synthetic.clone()],
        config: json!({
            "min_tokens": args.min_tokens,
            "thresholds": args.thresholds,
            "hipaa_only": args.hipaa_only,
        }),
        seed: None,
    })
}

fn run_utility(args: &UtilityArgs) -> Result<RunOutput, CliError> {
    let preset = resolve_preset(&args.preset)?;
    let corpus = load_corpus(&args.input)?;
    let options = UtilityOptions {
        epochs: args.epochs,
        keep_empty: !args.drop_empty,
        ..UtilityOptions::default()
    };
    let report = run_utility_experiment(
        &corpus,
        &preset,
        args.multiplier,
        args.seed,
        &options,
        &UtilityResources::default(),
    )
    .map_err(|e| match e {
        crate::utility::UtilityError::Multiplier(_) => usage("utility", e),
        other => data("utility", other),
    })?;
    let mut inputs = vec![args.input.clone()];
    inputs.extend(preset_inputs(&args.preset));
    Ok(RunOutput {
        files: vec![
            ("utility.json".into(), to_json_bytes(&report)),
            ("utility_table.txt".into(), report.render_table().into_bytes()),
        ],
        inputs,
        config: json!({ "preset": preset, "multiplier": args.multiplier, "options": options }),
        seed: Some(args.seed),
    })
}

/// Arguments that never affect outputs and are left out of the manifest.
const UNRECORDED: [&str; 2] = ["out", "workers"];

fn strip_unrecorded(args: &[OsString]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip_next = false;
    for arg in args {
        let arg = arg.to_string_lossy().into_owned();
        if skip_next {
            skip_next = false;
            continue;
        }
        let dropped = UNRECORDED.iter().any(|name| {
            let flag = format!("--{name}");
            if arg == flag {
                skip_next = true;
                true
            } else {
                arg.starts_with(&format!("{flag}="))
            }
        });
        if !dropped {
            out.push(arg);
        }
    }
    out
}

/// Flags whose values came from `SYNTHRECORD_*` variables, as argv.
fn env_sourced(command: &clap::Command, matches: &ArgMatches) -> Vec<String> {
    let mut out = Vec::new();
    for arg in command.get_arguments() {
        let id = arg.get_id().as_str();
        if UNRECORDED.contains(&id) || matches.value_source(id) != Some(ValueSource::EnvVariable) {
            continue;
        }
        let Some(long) = arg.get_long() else { continue };
        match arg.get_action() {
            ArgAction::SetTrue => {
                if matches.get_flag(id) {
                    out.push(format!("--{long}"));
                }
            }
            _ => {
                for raw in matches.get_raw(id).into_iter().flatten() {
                    out.push(format!("--{long}={}", raw.to_string_lossy()));
                }
            }
        }
    }
    if let Some((name, sub)) = matches.subcommand() {
        if let Some(sub_command) = command.find_subcommand(name) {
            out.extend(env_sourced(sub_command, sub));
        }
    }
    out
}

fn recorded_command(argv: &[OsString], matches: &ArgMatches) -> Vec<String> {
    let mut command = strip_unrecorded(argv.get(1..).unwrap_or_default());
    command.extend(env_sourced(&Cli::command(), matches));
    command
}

fn out_dir(command: &Command) -> &Path {
    match command {
        Command::Fixture(a) => &a.out.out,
        Command::Ingest(a) => &a.out.out,
        Command::Train(a) => &a.out.out,
        Command::Mask(a) => &a.out.out,
        Command::Fill(a) => &a.out.out,
        Command::Generate(a) => &a.out.out,
        Command::Eval { which } => match which {
            EvalCommand::Resemblance(a) => &a.out.out,
            EvalCommand::Privacy(a) => &a.out.out,
            EvalCommand::Utility(a) => &a.out.out,
        },
        Command::Replay(a) => &a.out.out,
    }
}

fn execute(command: &Command) -> Result<RunOutput, CliError> {
    match command {
        Command::Fixture(a) => run_fixture(a),
        Command::Ingest(a) => run_ingest(a),
        Command::Train(a) => run_train(a),
        Command::Mask(a) => run_mask(a),
        Command::Fill(a) => run_fill(a),
        Command::Generate(a) => run_generate(a),
        Command::Eval { which } => match which {
            EvalCommand::Resemblance(a) => run_resemblance(a),
            EvalCommand::Privacy(a) => run_privacy(a),
            EvalCommand::Utility(a) => run_utility(a),
        },
        Command::Replay(_) => unreachable!("replay is dispatched separately"),
    }
}

fn write_outputs(out: &Path, output: RunOutput, command: Vec<String>) -> Result<Manifest, CliError> {
    let write_err = |e: std::io::Error| data("write output", format!("{}: {e}", out.display()));
    fs::create_dir_all(out).map_err(write_err)?;
    let canonical_inputs: Vec<PathBuf> = output.inputs.iter().filter_map(|p| p.canonicalize().ok()).collect();
    for (name, _) in &output.files {
        let target = out.join(name);
        if let Ok(c) = target.canonicalize() {
            if canonical_inputs.contains(&c) {
                return Err(usage("write output", format!("{} is also an input", target.display())));
            }
        }
    }
    let inputs = output
        .inputs
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.display().to_string(),
                sha256: digest_path(p)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut outputs = Vec::new();
    for (name, bytes) in &output.files {
        fs::write(out.join(name), bytes).map_err(write_err)?;
        outputs.push(FileDigest {
            path: name.clone(),
            sha256: sha256_hex(bytes),
        });
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command,
        inputs,
        config_hash: sha256_hex(output.config.to_string().as_bytes()),
        config: output.config,
        seed: output.seed,
        outputs,
    };
    fs::write(out.join(MANIFEST_FILE), to_json_bytes(&manifest)).map_err(write_err)?;
    Ok(manifest)
}

fn replay(args: &ReplayArgs) -> Result<(), CliError> {
    let recorded: Manifest = read_json(&args.manifest, "load manifest")?;
    if recorded.version != env!("CARGO_PKG_VERSION") {
        log::warn!(
            "manifest written by version {}, replaying with {}",
            recorded.version,
            env!("CARGO_PKG_VERSION")
        );
    }
    for input in &recorded.inputs {
        let now = digest_path(Path::new(&input.path))?;
        if now != input.sha256 {
            return Err(data(
                "replay",
                format!("input {} changed since the recorded run", input.path),
            ));
        }
    }
    let mut argv: Vec<OsString> = vec![env!("CARGO_PKG_NAME").into()];
    argv.extend(recorded.command.iter().map(OsString::from));
    argv.push("--out".into());
    argv.push(args.out.out.clone().into());
    let matches = Cli::command()
        .try_get_matches_from(&argv)
        .map_err(|e| data("replay", format!("recorded command does not parse: {e}")))?;
    let cli = Cli::from_arg_matches(&matches).map_err(|e| data("replay", e))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(data("replay", "a manifest cannot record a replay"));
    }
    let extra = env_sourced(&Cli::command(), &matches);
    if !extra.is_empty() {
        log::warn!(
            "environment supplies values absent from the manifest: {}",
            extra.join(" ")
        );
    }
    let output = execute(&cli.command)?;
    let manifest = write_outputs(&args.out.out, output, recorded_command(&argv, &matches))?;
    for (old, new) in recorded.outputs.iter().zip(&manifest.outputs) {
        if old != new {
            return Err(data("replay", format!("{} differs from the recorded run", old.path)));
        }
    }
    if recorded.outputs.len() != manifest.outputs.len() {
        return Err(data("replay", "the replay wrote a different set of files"));
    }
    Ok(())
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match workers {
        Some(0) => Err(usage("workers", "--workers must be at least 1")),
        #[cfg(feature = "parallel")]
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| usage("workers", e))?;
            Ok(pool.install(f))
        }
        #[cfg(not(feature = "parallel"))]
        Some(_) => {
            log::warn!("--workers ignored: built without the parallel feature");
            Ok(f())
        }
        None => Ok(f()),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run(argv: Vec<OsString>) -> i32 {
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitKind::Usage as i32 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitKind::Usage as i32;
        }
    };
    let result = with_workers(cli.workers, || match &cli.command {
        Command::Replay(args) => replay(args),
        command => {
            let output = execute(command)?;
            write_outputs(out_dir(command), output, recorded_command(&argv, &matches)).map(|_| ())
        }
    })
    .and_then(|r| r);
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.kind as i32
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(args: &[&str]) -> Vec<OsString> {
        args.iter().map(OsString::from).collect()
    }

    #[test]
    fn unrecorded_flags_are_stripped() {
        let stripped = strip_unrecorded(&os(&[
            "generate",
            "--out",
            "x",
            "--seed",
            "3",
            "--workers=2",
            "--out=y",
        ]));
        assert_eq!(stripped, vec!["generate", "--seed", "3"]);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(os(&["synthrecord", "bogus"])), 1);
        assert_eq!(run(os(&["synthrecord", "fixture", "--out", "/nonexistent"])), 1);
        assert_eq!(run(os(&["synthrecord", "--version"])), 0);
    }

    #[test]
    fn preset_resolution() {
        let args = PresetArgs {
            preset: "identity".into(),
            policy: None,
            fill_config: None,
            unsafe_phi: false,
        };
        assert_eq!(resolve_preset(&args).unwrap(), SystemPreset::identity());
        let bad = PresetArgs {
            preset: "X_1".into(),
            ..args
        };
        assert_eq!(resolve_preset(&bad).unwrap_err().kind, ExitKind::Usage);
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
