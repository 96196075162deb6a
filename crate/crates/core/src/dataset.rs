//! Labeled examples: generation from a profiled module, deduplication,
//! train/test splitting, CSV persistence and the probability <-> branch
//! weight conversions.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{extract_features, CfgShape, ExprTree, RawFeatures, Token, DEFAULT_CONST_THRESHOLD};
use crate::heuristics::{estimate_heuristic, HeuristicConfig};
use crate::ir::{CalleeAttrs, EdgeLoopRelation, FunctionAnalyses, IrModule};

pub const PROFILE_COLUMNS: [&str; 3] = ["branch_id", "taken", "nottaken"];

/// Scale used when converting probabilities to integer branch weights.
pub const WEIGHT_SCALE: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("branch has no samples")]
    ZeroSamples,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed row at line {line}: {message}")]
    MalformedRow { path: String, line: u64, message: String },
}

/// Taken/not-taken sample counts per branch id.
pub type Profile = BTreeMap<String, (u64, u64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    /// `file:function:block`.
    pub branch_id: String,
    pub raw: RawFeatures,
    /// Profiled taken probability.
    pub label: f64,
    pub sample_count: u64,
    /// Heuristic estimate, kept for comparison only. Never a model input.
    pub heuristic_prob: f64,
}

/// Train/test membership recorded next to a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

pub fn derive_label(taken: u64, not_taken: u64) -> Result<f64, DatasetError> {
    let total = taken + not_taken;
    if total == 0 {
        return Err(DatasetError::ZeroSamples);
    }
    Ok(taken as f64 / total as f64)
}

/// Converts a taken probability into strictly positive branch weights that
/// sum to [`WEIGHT_SCALE`].
pub fn probability_to_branch_weights(p: f64) -> (u64, u64) {
    let t = (p * WEIGHT_SCALE as f64).round().clamp(1.0, (WEIGHT_SCALE - 1) as f64) as u64;
    (t, WEIGHT_SCALE - t)
}

/// Options used while turning a profiled module into examples.
#[derive(Debug, Clone, Copy)]
pub struct ExtractOptions {
    pub heuristics: HeuristicConfig,
    pub const_threshold: i64,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            heuristics: HeuristicConfig::default(),
            const_threshold: DEFAULT_CONST_THRESHOLD,
        }
    }
}

/// One example per profiled conditional branch with at least one sample,
/// in function then block order.
pub fn generate_examples(module: &IrModule, profile: &Profile, opts: &ExtractOptions) -> Vec<LabeledExample> {
    let mut out = Vec::new();
    for f in &module.functions {
        let mut analyses = None;
        for block in f.branch_blocks() {
            let id = f.branch_id(block);
            let Some(&(t, nt)) = profile.get(&id) else { continue };
            let Ok(label) = derive_label(t, nt) else { continue };
            let a = analyses.get_or_insert_with(|| FunctionAnalyses::compute(f));
            let raw = extract_features(f, block, a, opts.const_threshold).expect("branch block");
            let heuristic_prob = estimate_heuristic(f, block, a, &opts.heuristics).expect("branch block");
            out.push(LabeledExample {
                branch_id: id,
                raw,
                label,
                sample_count: t + nt,
                heuristic_prob,
            });
        }
    }
    out
}

fn label_key(label: f64) -> i64 {
    (label * 1e6).round() as i64
}

/// Collapses examples with identical features and labels equal to six
/// decimals, summing their sample counts. Keeps first-occurrence order.
pub fn dedup(examples: Vec<LabeledExample>) -> Vec<LabeledExample> {
    let mut out: Vec<LabeledExample> = Vec::with_capacity(examples.len());
    let mut seen: HashMap<(RawFeatures, i64), usize> = HashMap::new();
    for e in examples {
        let key = (e.raw.clone(), label_key(e.label));
        match seen.get(&key) {
            Some(&i) => out[i].sample_count += e.sample_count,
            None => {
                seen.insert(key, out.len());
                out.push(e);
            }
        }
    }
    out
}

/// Seeded random partition into `(train, test)` with
/// `|test| = round(test_fraction * n)`. Both halves keep input order.
pub fn split<T: Clone>(examples: &[T], test_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let assignment = split_assignment(examples.len(), test_fraction, seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (e, s) in examples.iter().zip(assignment) {
        match s {
            Split::Train => train.push(e.clone()),
            Split::Test => test.push(e.clone()),
        }
    }
    (train, test)
}

/// Per-row split membership, as used by [`split`].
pub fn split_assignment(n: usize, test_fraction: f64, seed: u64) -> Vec<Split> {
    assert!(
        test_fraction > 0.0 && test_fraction < 1.0,
        "test_fraction must lie in (0, 1)"
    );
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Split::Train; n];
    for &i in &order[..n_test] {
        out[i] = Split::Test;
    }
    out
}

pub const CSV_COLUMNS: [&str; 27] = [
    "branch_id",
    "file_name",
    "expr_slot_0",
    "expr_slot_1",
    "expr_slot_2",
    "expr_slot_3",
    "expr_slot_4",
    "expr_slot_5",
    "expr_slot_6",
    "taken_callee",
    "nottaken_callee",
    "taken_attrs",
    "nottaken_attrs",
    "cfg_shape",
    "loop_depth",
    "loop_blocks",
    "loop_exit_blocks",
    "loop_exit_edges",
    "taken_edge_rel",
    "nottaken_edge_rel",
    "fn_insts",
    "fn_blocks",
    "fn_edges",
    "label",
    "sample_count",
    "heuristic_prob",
    "split",
];

const BASE_COLUMNS: usize = CSV_COLUMNS.len() - 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> DatasetError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DatasetError::Io {
            path: path.display().to_string(),
            source,
        },
        kind => DatasetError::MalformedRow {
            path: path.display().to_string(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

fn attrs_string(a: CalleeAttrs) -> String {
    a.names().join(";")
}

fn example_record(e: &LabeledExample) -> Vec<String> {
    let r = &e.raw;
    let mut rec = Vec::with_capacity(CSV_COLUMNS.len());
    rec.push(e.branch_id.clone());
    rec.push(r.file_name.clone());
    rec.extend(r.expr.slots.iter().map(Token::to_string));
    rec.push(r.taken_callee.clone().unwrap_or_default());
    rec.push(r.nottaken_callee.clone().unwrap_or_default());
    rec.push(attrs_string(r.taken_callee_attrs));
    rec.push(attrs_string(r.nottaken_callee_attrs));
    rec.push(r.cfg_shape.name().to_string());
    for v in [r.loop_depth, r.loop_num_blocks, r.loop_num_exit_blocks, r.loop_num_exit_edges] {
        rec.push(v.to_string());
    }
    rec.push(r.taken_edge_rel.name().to_string());
    rec.push(r.nottaken_edge_rel.name().to_string());
    for v in [r.fn_num_instructions, r.fn_num_blocks, r.fn_num_edges] {
        rec.push(v.to_string());
    }
    rec.push(format!("{:.6}", e.label));
    rec.push(e.sample_count.to_string());
    rec.push(format!("{:.6}", e.heuristic_prob));
    rec
}

pub fn write_csv(examples: &[LabeledExample], path: &Path) -> Result<(), DatasetError> {
    write_rows(examples, None, path)
}

/// Writes the dataset with a trailing `split` column.
pub fn write_csv_with_split(examples: &[LabeledExample], splits: &[Split], path: &Path) -> Result<(), DatasetError> {
    assert_eq!(examples.len(), splits.len());
    write_rows(examples, Some(splits), path)
}

fn write_rows(examples: &[LabeledExample], splits: Option<&[Split]>, path: &Path) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let ncols = if splits.is_some() { CSV_COLUMNS.len() } else { BASE_COLUMNS };
    w.write_record(&CSV_COLUMNS[..ncols]).map_err(|e| csv_err(path, e))?;
    for (i, e) in examples.iter().enumerate() {
        let mut rec = example_record(e);
        if let Some(s) = splits {
            rec.push(s[i].name().to_string());
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes `branch_id,taken,nottaken` rows in branch id order.
pub fn write_profile(profile: &Profile, path: &Path) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(PROFILE_COLUMNS).map_err(|e| csv_err(path, e))?;
    for (id, (t, nt)) in profile {
        w.write_record([id.as_str(), &t.to_string(), &nt.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_profile(path: &Path) -> Result<Profile, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(BufReader::new(file));
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(PROFILE_COLUMNS) {
        return Err(DatasetError::MalformedRow {
            path: path.display().to_string(),
            line: 1,
            message: "unexpected header".into(),
        });
    }
    let mut profile = Profile::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let malformed = |message: String| DatasetError::MalformedRow {
            path: path.display().to_string(),
            line,
            message,
        };
        if rec.len() != 3 {
            return Err(malformed(format!("expected 3 columns, found {}", rec.len())));
        }
        let count = |i: usize| rec[i].parse::<u64>().map_err(|_| malformed(format!("bad count `{}`", &rec[i])));
        let (t, nt) = (count(1)?, count(2)?);
        if profile.insert(rec[0].to_string(), (t, nt)).is_some() {
            return Err(malformed(format!("duplicate branch `{}`", &rec[0])));
        }
    }
    Ok(profile)
}

pub fn read_csv(path: &Path) -> Result<Vec<LabeledExample>, DatasetError> {
    read_csv_with_split(path).map(|(e, _)| e)
}

/// Reads a dataset; the split column is returned when the file has one.
pub fn read_csv_with_split(path: &Path) -> Result<(Vec<LabeledExample>, Option<Vec<Split>>), DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(BufReader::new(file));
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let has_split = header.len() == CSV_COLUMNS.len();
    let expected = if has_split { CSV_COLUMNS.len() } else { BASE_COLUMNS };
    if header.iter().ne(CSV_COLUMNS[..expected].iter().copied()) {
        return Err(DatasetError::MalformedRow {
            path: path.display().to_string(),
            line: 1,
            message: "unexpected header".into(),
        });
    }

    let mut examples = Vec::new();
    let mut splits = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let malformed = |message: String| DatasetError::MalformedRow {
            path: path.display().to_string(),
            line,
            message,
        };
        if rec.len() != expected {
            return Err(malformed(format!("expected {expected} columns, found {}", rec.len())));
        }
        examples.push(parse_record(&rec).map_err(malformed)?);
        if has_split {
            splits.push(match &rec[BASE_COLUMNS] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(malformed(format!("bad split `{other}`"))),
            });
        }
    }
    Ok((examples, has_split.then_some(splits)))
}

fn parse_record(rec: &csv::StringRecord) -> Result<LabeledExample, String> {
    fn num<T: std::str::FromStr>(s: &str, col: &str) -> Result<T, String> {
        s.parse().map_err(|_| format!("bad {col} `{s}`"))
    }
    fn attrs(s: &str) -> Result<CalleeAttrs, String> {
        let mut a = CalleeAttrs::empty();
        for name in s.split(';').filter(|n| !n.is_empty()) {
            a.insert(CalleeAttrs::from_name(name).ok_or_else(|| format!("bad attribute `{name}`"))?);
        }
        Ok(a)
    }
    fn callee(s: &str) -> Option<String> {
        (!s.is_empty()).then(|| s.to_string())
    }
    fn rel(s: &str) -> Result<EdgeLoopRelation, String> {
        EdgeLoopRelation::from_name(s).ok_or_else(|| format!("bad edge relation `{s}`"))
    }

    let mut slots = [Token::Missing; 7];
    for (k, slot) in slots.iter_mut().enumerate() {
        *slot = rec[2 + k].parse()?;
    }
    let raw = RawFeatures {
        expr: ExprTree { slots },
        taken_callee: callee(&rec[9]),
        nottaken_callee: callee(&rec[10]),
        taken_callee_attrs: attrs(&rec[11])?,
        nottaken_callee_attrs: attrs(&rec[12])?,
        cfg_shape: CfgShape::from_name(&rec[13]).ok_or_else(|| format!("bad cfg_shape `{}`", &rec[13]))?,
        loop_depth: num(&rec[14], "loop_depth")?,
        loop_num_blocks: num(&rec[15], "loop_blocks")?,
        loop_num_exit_blocks: num(&rec[16], "loop_exit_blocks")?,
        loop_num_exit_edges: num(&rec[17], "loop_exit_edges")?,
        taken_edge_rel: rel(&rec[18])?,
        nottaken_edge_rel: rel(&rec[19])?,
        fn_num_instructions: num(&rec[20], "fn_insts")?,
        fn_num_blocks: num(&rec[21], "fn_blocks")?,
        fn_num_edges: num(&rec[22], "fn_edges")?,
        file_name: rec[1].to_string(),
    };
    let label: f64 = num(&rec[23], "label")?;
    if !(0.0..=1.0).contains(&label) {
        return Err(format!("label {label} outside [0, 1]"));
    }
    Ok(LabeledExample {
        branch_id: rec[0].to_string(),
        raw,
        label,
        sample_count: num(&rec[24], "sample_count")?,
        heuristic_prob: num(&rec[25], "heuristic_prob")?,
    })
}
