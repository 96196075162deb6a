//! End-to-end glue: corpus directories to examples, examples to a trained
//! model, and a trained model to evaluation reports.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::{
    dedup, generate_examples, probability_to_branch_weights, read_profile, DatasetError, ExtractOptions, LabeledExample,
};
use crate::eval::{
    category_breakdown, compute_metrics, error_cdf, CategoryBreakdown, ErrorCdf, EvalError, MetricsReport,
};
use crate::features::{extract_features, EmbedSpec, Encoder, EncoderError, RawFeatures};
use crate::ir::text::{annotate_branch_weights, parse_module_with_lines, ParseError, SourceFunction};
use crate::ir::{FunctionAnalyses, IrModule};
use crate::model::{train, EpochStats, Model, ModelError, ModelSpec, TrainingExample};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no .ir files in {0}")]
    NoIrFiles(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One parsed `.ir` file with its original text.
#[derive(Debug, Clone)]
pub struct IrFile {
    pub path: PathBuf,
    pub text: String,
    pub functions: Vec<SourceFunction>,
}

/// Sorted list of `.ir` files directly inside `dir`.
pub fn ir_paths(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "ir") && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

pub fn read_ir_file(path: &Path) -> Result<IrFile, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let functions = parse_module_with_lines(&text, &path.display().to_string())?;
    Ok(IrFile {
        path: path.to_path_buf(),
        text,
        functions,
    })
}

/// Parses every `.ir` file in `dir` into one module, in file name order.
pub fn load_ir_dir(dir: &Path) -> Result<IrModule, PipelineError> {
    let paths = ir_paths(dir)?;
    if paths.is_empty() {
        return Err(PipelineError::NoIrFiles(dir.display().to_string()));
    }
    let mut module = IrModule::default();
    for p in paths {
        module
            .functions
            .extend(read_ir_file(&p)?.functions.into_iter().map(|s| s.function));
    }
    Ok(module)
}

/// Counts reported by extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractStats {
    pub functions: usize,
    pub total_branches: usize,
    /// Branches with at least one profile sample.
    pub profiled: usize,
    pub unique: usize,
}

pub fn extract_from_module(
    module: &IrModule,
    profile: &crate::dataset::Profile,
    opts: &ExtractOptions,
) -> (Vec<LabeledExample>, ExtractStats) {
    let total_branches = module.functions.iter().map(|f| f.branch_blocks().count()).sum();
    let examples = generate_examples(module, profile, opts);
    let profiled = examples.len();
    let examples = dedup(examples);
    let stats = ExtractStats {
        functions: module.functions.len(),
        total_branches,
        profiled,
        unique: examples.len(),
    };
    (examples, stats)
}

pub fn extract_from_dir(
    ir_dir: &Path,
    profile_path: &Path,
    opts: &ExtractOptions,
) -> Result<(Vec<LabeledExample>, ExtractStats), PipelineError> {
    let module = load_ir_dir(ir_dir)?;
    let profile = read_profile(profile_path)?;
    Ok(extract_from_module(&module, &profile, opts))
}

pub fn training_examples(encoder: &Encoder, examples: &[LabeledExample]) -> Vec<TrainingExample> {
    examples
        .iter()
        .map(|e| TrainingExample {
            input: encoder.encode(&e.raw),
            label: e.label,
            weight: e.sample_count as f64,
        })
        .collect()
}

/// Fits the encoder on `train_set` only, then trains.
pub fn fit_and_train(
    spec: ModelSpec,
    embed: EmbedSpec,
    train_set: &[LabeledExample],
    valid_set: &[LabeledExample],
) -> Result<(Model, Vec<EpochStats>), PipelineError> {
    if train_set.is_empty() {
        return Err(ModelError::EmptyDataset.into());
    }
    let raws: Vec<RawFeatures> = train_set.iter().map(|e| e.raw.clone()).collect();
    let encoder = Encoder::fit(&raws, embed)?;
    let train_rows = training_examples(&encoder, train_set);
    let valid_rows = training_examples(&encoder, valid_set);
    Ok(train(spec, encoder, &train_rows, &valid_rows)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub ml: MetricsReport,
    pub heuristic: MetricsReport,
    pub ml_cdf: ErrorCdf,
    pub heuristic_cdf: ErrorCdf,
    pub breakdown: CategoryBreakdown,
}

pub fn evaluate(model: &Model, examples: &[LabeledExample]) -> Result<Evaluation, PipelineError> {
    let raws: Vec<RawFeatures> = examples.iter().map(|e| e.raw.clone()).collect();
    let preds = model.predict_batch(&raws)?;
    let heur: Vec<f64> = examples.iter().map(|e| e.heuristic_prob).collect();
    let labels: Vec<f64> = examples.iter().map(|e| e.label).collect();
    let (ml, heuristic) = compute_metrics(&preds, &heur, &labels)?;
    Ok(Evaluation {
        ml,
        heuristic,
        ml_cdf: error_cdf(&preds, &labels)?,
        heuristic_cdf: error_cdf(&heur, &labels)?,
        breakdown: category_breakdown(&heur, &labels)?,
    })
}

/// Predicts every conditional branch of `file` and returns its text with
/// `!weights` annotations, plus the number of branches annotated.
pub fn annotate_file(model: &Model, file: &IrFile, const_threshold: i64) -> Result<(String, usize), PipelineError> {
    let mut raws = Vec::new();
    let mut index = Vec::new();
    for (fi, sf) in file.functions.iter().enumerate() {
        let f = &sf.function;
        if f.branch_blocks().next().is_none() {
            continue;
        }
        let analyses = FunctionAnalyses::compute(f);
        for b in f.branch_blocks() {
            raws.push(extract_features(f, b, &analyses, const_threshold).expect("branch block"));
            index.push((fi, b));
        }
    }
    let preds = model.predict_batch(&raws)?;
    let weights: std::collections::HashMap<(usize, usize), (u64, u64)> = index
        .into_iter()
        .zip(&preds)
        .map(|(k, &p)| (k, probability_to_branch_weights(p)))
        .collect();
    let text = annotate_branch_weights(&file.text, &file.functions, |fi, b| weights[&(fi, b)]);
    Ok((text, preds.len()))
}
