//! One (window, arm) cell end to end, and the full matrix.

use serde::{Deserialize, Serialize};

use crate::data::NewsEvent;
use crate::error::{Error, Result};
use crate::ingest::DatasetBundle;
use crate::models::{encode_events, Arm, BiLstmSpec, EncoderSpec, Example, Model};
use crate::report::{emit_histograms, CellResult, EvalReport, WindowHistograms};
use crate::tokenize::{build_word_vocab, train_subword_vocab, Vocab, VocabKind, DEFAULT_MAX_LEN};
use crate::train::{constant_baseline_mse, evaluate, train, TrainConfig, TrainRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Target size of the subword vocabulary, specials included.
    pub subword_vocab_size: usize,
    pub word_vocab_size: usize,
    pub word_min_count: u64,
    pub max_len: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            subword_vocab_size: 1000,
            word_vocab_size: 20_000,
            word_min_count: 1,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

/// Everything a cell needs besides its data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderSpec,
    pub bilstm: BiLstmSpec,
    pub train: TrainConfig,
}

impl ExperimentSettings {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.tokenizer.max_len < 2 {
            return Err(Error::InvalidConfig("tokenizer.max_len must be >= 2".into()));
        }
        if self.encoder.max_len < self.tokenizer.max_len {
            return Err(Error::InvalidConfig(format!(
                "encoder.max_len {} is shorter than tokenizer.max_len {}",
                self.encoder.max_len, self.tokenizer.max_len
            )));
        }
        self.encoder.validate()?;
        self.bilstm.validate()
    }
}

/// Both vocabularies, learned from training-split headlines only.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabs {
    pub subword: Vocab,
    pub word: Vocab,
}

impl Vocabs {
    pub fn build(train: &[NewsEvent], cfg: &TokenizerConfig) -> Result<Self> {
        let corpus: Vec<&str> = train.iter().map(NewsEvent::headline).collect();
        Ok(Vocabs {
            subword: train_subword_vocab(&corpus, cfg.subword_vocab_size)?,
            word: build_word_vocab(&corpus, cfg.word_vocab_size, cfg.word_min_count)?,
        })
    }

    pub fn for_kind(&self, kind: VocabKind) -> &Vocab {
        match kind {
            VocabKind::Subword => &self.subword,
            VocabKind::Word => &self.word,
        }
    }
}

/// The four encoded partitions of a bundle.
pub struct EncodedBundle {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub oos: Vec<Example>,
}

impl EncodedBundle {
    pub fn new(bundle: &DatasetBundle, vocab: &Vocab, max_len: usize) -> Self {
        EncodedBundle {
            train: encode_events(vocab, &bundle.train, max_len),
            validation: encode_events(vocab, &bundle.validation, max_len),
            test: encode_events(vocab, &bundle.test, max_len),
            oos: encode_events(vocab, &bundle.oos, max_len),
        }
    }
}

/// Fresh model for `arm`, initialized from the training seed, trained on
/// the bundle's train split with validation-based early stopping.
pub fn train_cell(data: &EncodedBundle, arm: Arm, vocab: &Vocab, settings: &ExperimentSettings) -> Result<(Model, TrainRecord)> {
    settings.validate()?;
    let mut model = Model::for_arm(arm, &settings.encoder, &settings.bilstm, vocab.len(), settings.train.seed)?;
    let record = train(&mut model, &data.train, &data.validation, &settings.train)?;
    Ok((model, record))
}

/// Test and out-of-sample MSE for a trained model, next to the
/// constant-mean predictor fitted on the train split.
pub fn evaluate_cell(
    model: &Model,
    data: &EncodedBundle,
    window: &str,
    arm: Arm,
    record: &TrainRecord,
    batch_size: usize,
) -> Result<CellResult> {
    if data.test.is_empty() {
        return Err(Error::EmptySplit("test".into()));
    }
    let oos = |f: &dyn Fn(&[Example]) -> Result<f64>| -> Result<Option<f64>> {
        if data.oos.is_empty() {
            Ok(None)
        } else {
            f(&data.oos).map(Some)
        }
    };
    Ok(CellResult {
        window: window.to_string(),
        arm,
        test_mse: evaluate(model, &data.test, batch_size)?,
        oos_mse: oos(&|ex| evaluate(model, ex, batch_size))?,
        baseline_test_mse: constant_baseline_mse(&data.train, &data.test)?,
        baseline_oos_mse: oos(&|ex| constant_baseline_mse(&data.train, ex))?,
        n_train: data.train.len(),
        n_validation: data.validation.len(),
        n_test: data.test.len(),
        n_oos: data.oos.len(),
        epochs: record.epochs(),
        best_epoch: record.best_epoch,
        stopped_early: record.stopped_early,
    })
}

/// In-sample histograms of one bundle.
pub fn bundle_histograms(bundle: &DatasetBundle) -> Result<WindowHistograms> {
    let events: Vec<NewsEvent> = bundle
        .train
        .iter()
        .chain(&bundle.validation)
        .chain(&bundle.test)
        .cloned()
        .collect();
    Ok(WindowHistograms {
        window: bundle.window_label.clone(),
        histograms: emit_histograms(&events)?,
    })
}

/// Trains and evaluates every (window, arm) cell, windows in the given
/// order, arms in [`Arm::ALL`] order.
pub fn run_experiment(bundles: &[DatasetBundle], arms: &[Arm], settings: &ExperimentSettings, config_hash: &str) -> Result<EvalReport> {
    settings.validate()?;
    let mut report = EvalReport::new(config_hash, settings.train.seed);
    let mut arms = arms.to_vec();
    arms.sort();
    arms.dedup();
    for bundle in bundles {
        let vocabs = Vocabs::build(&bundle.train, &settings.tokenizer)?;
        for &arm in &arms {
            let vocab = vocabs.for_kind(arm.vocab_kind());
            let data = EncodedBundle::new(bundle, vocab, settings.tokenizer.max_len);
            let (model, record) = train_cell(&data, arm, vocab, settings)?;
            report
                .cells
                .push(evaluate_cell(&model, &data, &bundle.window_label, arm, &record, settings.train.batch_size)?);
        }
        report.histograms.push(bundle_histograms(bundle)?);
    }
    Ok(report)
}
