//! Command-line surface driven by one TOML run configuration.
//!
//! Work directory layout, per window label `W` and arm `A`:
//!
//! ```text
//! W/bundle/{train,validation,test,oos}.csv, bundle.meta, rejects.csv
//! W/vocab/{subword,word}.vocab, vocab.meta
//! W/A/model.ckpt, train_record.json, eval.json
//! report/report.json, table1.txt, table2.txt, hist_*.csv, manifest.txt
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::data::ColumnMap;
use crate::error::{Error, Result};
use crate::experiment::{bundle_histograms, evaluate_cell, train_cell, EncodedBundle, ExperimentSettings, Vocabs};
use crate::ingest::{build_bundle, load_events, parse_meta, parse_window_label, window_label, DatasetBundle, IngestConfig, PARTITIONS};
use crate::models::{Arm, BiLstmSpec, EmbeddingTable, EncoderSpec, FineasModel, Model};
use crate::numeric::checkpoint::header_get;
use crate::report::{CellResult, EvalReport};
use crate::tokenize::{Vocab, VocabKind};
use crate::train::{train, TrainConfig, TrainRecord};

pub const WORK_DIR_ENV: &str = "FINEAS_WORK_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Raw event CSV. Relative paths resolve against the config file.
    pub raw: PathBuf,
    pub work_dir: PathBuf,
    /// Optional precomputed sentence embeddings; when set, the
    /// `fineas-frozen` arm uses them as its backbone.
    pub embeddings: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            raw: PathBuf::from("data/events.csv"),
            work_dir: PathBuf::from("work"),
            embeddings: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub columns: ColumnMap,
    pub ingest: IngestConfig,
    /// Training windows in months.
    pub windows: Vec<u32>,
    pub arms: Vec<Arm>,
    pub tokenizer: crate::experiment::TokenizerConfig,
    pub encoder: EncoderSpec,
    pub bilstm: BiLstmSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths::default(),
            columns: ColumnMap::default(),
            ingest: IngestConfig::default(),
            windows: vec![6, 12, 24],
            arms: Arm::ALL.to_vec(),
            tokenizer: Default::default(),
            encoder: EncoderSpec::default(),
            bilstm: BiLstmSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

/// The hashed part of a config: everything that can change a number.
#[derive(Serialize)]
struct HashView<'a> {
    columns: &'a ColumnMap,
    ingest: &'a IngestConfig,
    tokenizer: &'a crate::experiment::TokenizerConfig,
    encoder: &'a EncoderSpec,
    bilstm: &'a BiLstmSpec,
    train: &'a TrainConfig,
    embeddings: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads and validates `path`; relative paths inside resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::from_toml(&artifact::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.paths.raw);
        resolve(&mut cfg.paths.work_dir);
        if let Some(e) = cfg.paths.embeddings.as_mut() {
            resolve(e);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.ingest.validate()?;
        self.settings().validate()?;
        if self.windows.is_empty() || self.arms.is_empty() {
            return Err(Error::InvalidConfig("windows and arms must be nonempty".into()));
        }
        if self.windows.contains(&0) {
            return Err(Error::InvalidConfig("window months must be >= 1".into()));
        }
        Ok(())
    }

    /// Hash of every setting that affects numeric outputs. Paths and the
    /// window/arm selection are excluded.
    pub fn config_hash(&self) -> String {
        let view = HashView {
            columns: &self.columns,
            ingest: &IngestConfig {
                window_months: 0,
                ..self.ingest.clone()
            },
            tokenizer: &self.tokenizer,
            encoder: &self.encoder,
            bilstm: &self.bilstm,
            train: &self.train,
            embeddings: self.paths.embeddings.is_some(),
        };
        artifact::short_hash(&serde_json::to_vec(&view).expect("plain data serializes"))
    }

    pub fn settings(&self) -> ExperimentSettings {
        ExperimentSettings {
            tokenizer: self.tokenizer.clone(),
            encoder: self.encoder.clone(),
            bilstm: self.bilstm.clone(),
            train: self.train.clone(),
        }
    }

    pub fn window_dir(&self, months: u32) -> PathBuf {
        self.paths.work_dir.join(window_label(months))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.paths.work_dir.join("report")
    }
}

#[derive(Debug, Parser)]
#[command(name = "fineas", version, about = "Headline sentiment regression experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "fineas.toml")]
    pub config: PathBuf,
    /// Overrides both the split seed and the training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Restricts the run to one arm.
    #[arg(long, global = true)]
    pub arm: Option<Arm>,
    /// Restricts the run to one window (6m, 12m, 24m, ...).
    #[arg(long, global = true)]
    pub window: Option<String>,
    /// Overrides `paths.work_dir`.
    #[arg(long, global = true, env = WORK_DIR_ENV)]
    pub work_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load raw events and write one dataset bundle per window.
    Ingest,
    /// Learn subword and word vocabularies from each window's train split.
    BuildVocab,
    /// Train the selected arms.
    Train,
    /// Evaluate trained checkpoints on test and out-of-sample splits.
    Eval {
        /// Evaluate this checkpoint instead of the one in the work directory;
        /// needs a single `--window` and `--arm`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Collect evaluations into tables, JSON and histograms.
    Report,
    /// ingest, build-vocab, train, eval and report in one go.
    RunMatrix,
}

/// Applies flag overrides to the loaded config.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.ingest.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(arm) = cli.arm {
        cfg.arms = vec![arm];
    }
    if let Some(w) = &cli.window {
        cfg.windows = vec![parse_window_label(w)?];
    }
    if let Some(dir) = &cli.work_dir {
        cfg.paths.work_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 success, 2 input or configuration error, 1 anything else.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                2
            } else {
                1
            }
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Ingest => cmd_ingest(&cfg),
        Command::BuildVocab => cmd_build_vocab(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint.as_deref()),
        Command::Report => cmd_report(&cfg).map(|_| ()),
        Command::RunMatrix => cmd_run_matrix(&cfg),
    }
}

fn provenance(cfg: &RunConfig) -> Vec<(String, String)> {
    vec![
        ("run.config_hash".into(), cfg.config_hash()),
        ("run.seed".into(), cfg.train.seed.to_string()),
    ]
}

fn expect_hash(what: &str, expected: &str, found: Option<&str>) -> Result<()> {
    match found {
        Some(f) if f == expected => Ok(()),
        other => Err(Error::ConfigHashMismatch {
            what: what.into(),
            expected: expected.into(),
            found: other.unwrap_or("<none>").into(),
        }),
    }
}

fn bundle_dir(cfg: &RunConfig, months: u32) -> PathBuf {
    cfg.window_dir(months).join("bundle")
}

fn vocab_dir(cfg: &RunConfig, months: u32) -> PathBuf {
    cfg.window_dir(months).join("vocab")
}

fn cell_dir(cfg: &RunConfig, months: u32, arm: Arm) -> PathBuf {
    cfg.window_dir(months).join(arm.as_str())
}

fn vocab_file(kind: VocabKind) -> &'static str {
    match kind {
        VocabKind::Subword => "subword.vocab",
        VocabKind::Word => "word.vocab",
    }
}

/// Hash over the four partition files, in partition order.
fn bundle_hash(dir: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    for name in PARTITIONS {
        bytes.extend(artifact::read(&dir.join(format!("{name}.csv")))?);
    }
    Ok(artifact::short_hash(&bytes))
}

fn read_bundle(cfg: &RunConfig, months: u32) -> Result<DatasetBundle> {
    let dir = bundle_dir(cfg, months);
    let bundle = DatasetBundle::read(&dir)?;
    let found = bundle.extra_meta.iter().find(|(k, _)| k == "run.config_hash").map(|(_, v)| v.as_str());
    expect_hash("bundle config", &cfg.config_hash(), found)?;
    Ok(bundle)
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<()> {
    let report = load_events(&cfg.paths.raw, &cfg.columns)?;
    println!(
        "loaded {} events from {} ({} rejected)",
        report.events.len(),
        cfg.paths.raw.display(),
        report.rejects.len()
    );
    for &months in &cfg.windows {
        let icfg = IngestConfig {
            window_months: months,
            ..cfg.ingest.clone()
        };
        let mut bundle = build_bundle(&report.events, &icfg)?;
        bundle.extra_meta = provenance(cfg);
        let dir = bundle_dir(cfg, months);
        bundle.write(&dir)?;
        artifact::write_atomic(&dir.join("rejects.csv"), report.rejects_csv()?.as_bytes())?;
        println!(
            "{}: train={} validation={} test={} oos={}",
            bundle.window_label,
            bundle.train.len(),
            bundle.validation.len(),
            bundle.test.len(),
            bundle.oos.len()
        );
    }
    Ok(())
}

pub fn cmd_build_vocab(cfg: &RunConfig) -> Result<()> {
    for &months in &cfg.windows {
        let bundle = read_bundle(cfg, months)?;
        let vocabs = Vocabs::build(&bundle.train, &cfg.tokenizer)?;
        let dir = vocab_dir(cfg, months);
        let mut meta = String::new();
        for (k, v) in provenance(cfg) {
            let _ = writeln!(meta, "{k}={v}");
        }
        for kind in [VocabKind::Subword, VocabKind::Word] {
            let v = vocabs.for_kind(kind);
            v.save(&dir.join(vocab_file(kind)))?;
            let _ = writeln!(meta, "{}.size={}\n{}.hash={}", vocab_file(kind), v.len(), vocab_file(kind), v.hash());
        }
        artifact::write_atomic(&dir.join("vocab.meta"), meta.as_bytes())?;
        println!(
            "{}: subword={} word={}",
            window_label(months),
            vocabs.subword.len(),
            vocabs.word.len()
        );
    }
    Ok(())
}

fn read_vocab(cfg: &RunConfig, months: u32, kind: VocabKind) -> Result<Vocab> {
    let dir = vocab_dir(cfg, months);
    let meta = parse_meta(&artifact::read_to_string(&dir.join("vocab.meta"))?);
    let found = meta.iter().find(|(k, _)| k == "run.config_hash").map(|(_, v)| v.as_str());
    expect_hash("vocabulary config", &cfg.config_hash(), found)?;
    Vocab::load(&dir.join(vocab_file(kind)), kind)
}

fn load_embeddings(cfg: &RunConfig) -> Result<Option<EmbeddingTable>> {
    cfg.paths.embeddings.as_deref().map(EmbeddingTable::load).transpose()
}

fn uses_embeddings(cfg: &RunConfig, arm: Arm) -> bool {
    arm == Arm::FineasFrozen && cfg.paths.embeddings.is_some()
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let settings = cfg.settings();
    for &months in &cfg.windows {
        let bundle = read_bundle(cfg, months)?;
        let b_hash = bundle_hash(&bundle_dir(cfg, months))?;
        for &arm in &cfg.arms {
            let vocab = read_vocab(cfg, months, arm.vocab_kind())?;
            let data = EncodedBundle::new(&bundle, &vocab, cfg.tokenizer.max_len);
            let (model, record): (Model, TrainRecord) = match load_embeddings(cfg)? {
                Some(table) if uses_embeddings(cfg, arm) => {
                    let mut m = Model::Fineas(FineasModel::with_embeddings(table, cfg.train.seed));
                    let rec = train(&mut m, &data.train, &data.validation, &cfg.train)?;
                    (m, rec)
                }
                _ => train_cell(&data, arm, &vocab, &settings)?,
            };
            let dir = cell_dir(cfg, months, arm);
            let mut extra = provenance(cfg);
            extra.push(("run.window".into(), window_label(months)));
            extra.push(("bundle.hash".into(), b_hash.clone()));
            extra.push(("vocab.kind".into(), format!("{:?}", arm.vocab_kind()).to_lowercase()));
            extra.push(("vocab.hash".into(), vocab.hash()));
            model.save(&dir.join("model.ckpt"), &extra)?;
            let mut json = serde_json::to_value(&record)?;
            json["config_hash"] = cfg.config_hash().into();
            json["seed"] = cfg.train.seed.into();
            artifact::write_atomic(&dir.join("train_record.json"), (serde_json::to_string_pretty(&json)? + "\n").as_bytes())?;
            println!(
                "{}/{arm}: epochs={} best_epoch={} best_val_mse={:.6} stopped_early={} wall_time={:.1}s",
                window_label(months),
                record.epochs(),
                record.best_epoch,
                record.best_val_loss(),
                record.stopped_early,
                record.wall_time_secs
            );
        }
    }
    Ok(())
}

/// Loads a checkpoint and refuses it unless its config, bundle and
/// vocabulary hashes match the current files.
fn load_checked(cfg: &RunConfig, months: u32, arm: Arm, path: &Path) -> Result<(Model, Vocab, TrainRecord)> {
    let embeddings = if uses_embeddings(cfg, arm) { load_embeddings(cfg)? } else { None };
    let (model, header) = Model::load(path, embeddings)?;
    expect_hash("checkpoint config", &cfg.config_hash(), header_get(&header, "run.config_hash"))?;
    expect_hash("bundle", &bundle_hash(&bundle_dir(cfg, months))?, header_get(&header, "bundle.hash"))?;
    let vocab = read_vocab(cfg, months, arm.vocab_kind())?;
    expect_hash("vocabulary", &vocab.hash(), header_get(&header, "vocab.hash"))?;
    if header_get(&header, "model.arm") != Some(arm.as_str()) {
        return Err(Error::InvalidConfig(format!(
            "{}: checkpoint is for arm {:?}, not {arm}",
            path.display(),
            header_get(&header, "model.arm")
        )));
    }
    let rec_path = path.with_file_name("train_record.json");
    let record: TrainRecord = match artifact::read_to_string(&rec_path) {
        Ok(t) => serde_json::from_str(&t)?,
        Err(Error::FileNotFound(_)) => TrainRecord {
            train_losses: vec![],
            val_losses: vec![f64::NAN],
            best_epoch: 0,
            stopped_early: false,
            reached_target: false,
            wall_time_secs: 0.0,
        },
        Err(e) => return Err(e),
    };
    Ok((model, vocab, record))
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    if checkpoint.is_some() && (cfg.windows.len() != 1 || cfg.arms.len() != 1) {
        return Err(Error::InvalidConfig("--checkpoint needs a single --window and --arm".into()));
    }
    for &months in &cfg.windows {
        let bundle = read_bundle(cfg, months)?;
        for &arm in &cfg.arms {
            let dir = cell_dir(cfg, months, arm);
            let path = checkpoint.map_or_else(|| dir.join("model.ckpt"), Path::to_path_buf);
            let (model, vocab, record) = load_checked(cfg, months, arm, &path)?;
            let data = EncodedBundle::new(&bundle, &vocab, cfg.tokenizer.max_len);
            let cell = evaluate_cell(&model, &data, &window_label(months), arm, &record, cfg.train.batch_size)?;
            let mut json = serde_json::to_value(&cell)?;
            json["config_hash"] = cfg.config_hash().into();
            json["seed"] = cfg.train.seed.into();
            artifact::write_atomic(&dir.join("eval.json"), (serde_json::to_string_pretty(&json)? + "\n").as_bytes())?;
            println!(
                "{}/{arm}: test_mse={:.6} oos_mse={} baseline_test_mse={:.6}",
                window_label(months),
                cell.test_mse,
                cell.oos_mse.map_or("-".into(), |v| format!("{v:.6}")),
                cell.baseline_test_mse
            );
        }
    }
    Ok(())
}

pub fn cmd_report(cfg: &RunConfig) -> Result<EvalReport> {
    let hash = cfg.config_hash();
    let mut report = EvalReport::new(&hash, cfg.train.seed);
    let mut windows = cfg.windows.clone();
    windows.sort_unstable();
    windows.dedup();
    let mut arms = cfg.arms.clone();
    arms.sort();
    arms.dedup();
    for &months in &windows {
        let bundle = read_bundle(cfg, months)?;
        for &arm in &arms {
            let path = cell_dir(cfg, months, arm).join("eval.json");
            let value: serde_json::Value = match artifact::read_to_string(&path) {
                Ok(t) => serde_json::from_str(&t)?,
                Err(Error::FileNotFound(_)) => continue,
                Err(e) => return Err(e),
            };
            expect_hash("evaluation", &hash, value["config_hash"].as_str())?;
            report.cells.push(serde_json::from_value::<CellResult>(value)?);
        }
        report.histograms.push(bundle_histograms(&bundle)?);
    }
    let dir = cfg.report_dir();
    let files = report.write(&dir)?;
    print!("{}", report.render_table1());
    println!();
    print!("{}", report.render_table2());
    println!("wrote {} files to {}", files.len(), dir.display());
    Ok(report)
}

pub fn cmd_run_matrix(cfg: &RunConfig) -> Result<()> {
    cmd_ingest(cfg)?;
    cmd_build_vocab(cfg)?;
    cmd_train(cfg)?;
    cmd_eval(cfg, None)?;
    cmd_report(cfg).map(|_| ())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::InvalidConfig(_))));
        assert!(matches!(RunConfig::from_toml("arms = [\"bert\"]"), Err(Error::InvalidConfig(_))));
        let cfg = RunConfig::from_toml("[train]\nbatch_size = 0").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_ignores_paths_and_selection() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.work_dir = "/elsewhere".into();
        b.arms = vec![Arm::Bilstm];
        b.windows = vec![6];
        assert_eq!(a.config_hash(), b.config_hash());
        b.train.lr = 0.01;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[paths]\nraw = \"raw.csv\"\nwork_dir = \"w\"\n").unwrap();
        let cli = Cli::try_parse_from([
            "fineas", "ingest", "--config", path.to_str().unwrap(), "--seed", "9", "--arm", "bilstm", "--window", "12m",
        ])
        .unwrap();
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!((cfg.ingest.seed, cfg.train.seed), (9, 9));
        assert_eq!((cfg.arms.clone(), cfg.windows.clone()), (vec![Arm::Bilstm], vec![12]));
        assert_eq!(cfg.paths.raw, dir.path().join("raw.csv"));
    }
}
