//! Turning [`RawFeatures`] into model input: standardized numerics, one-hot
//! groups for small categoricals, and vocabulary indices for the embedded
//! string features (callee names, file name).

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::{CfgShape, RawFeatures, Token};
use crate::ir::{CalleeAttrs, EdgeLoopRelation};

/// Names of the numeric features, in [`RawFeatures::numeric_values`] order.
pub const NUMERIC_FEATURES: [&str; 7] = [
    "loop_depth",
    "loop_blocks",
    "loop_exit_blocks",
    "loop_exit_edges",
    "fn_insts",
    "fn_blocks",
    "fn_edges",
];

/// Category used for expression tokens not seen while fitting.
pub const OTHER_CATEGORY: &str = "<other>";

const ZERO_VARIANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncoderError {
    #[error("cannot fit an encoder on an empty dataset")]
    EmptyDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NumericStat {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// A one-hot group: exactly one of `categories.len()` bits is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotGroup {
    pub name: String,
    pub categories: Vec<String>,
}

impl OneHotGroup {
    pub fn new<S: Into<String>>(name: &str, categories: impl IntoIterator<Item = S>) -> Self {
        OneHotGroup {
            name: name.to_string(),
            categories: categories.into_iter().map(Into::into).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// Index of `category`, falling back to `fallback` when unknown.
    pub fn index_of(&self, category: &str, fallback: usize) -> usize {
        self.categories.iter().position(|c| c == category).unwrap_or(fallback)
    }

    /// Writes the one-hot vector of `index` into `out`.
    pub fn write(&self, index: usize, out: &mut Vec<f64>) {
        out.extend((0..self.len()).map(|i| if i == index { 1.0 } else { 0.0 }));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedSpec {
    /// Strings seen fewer times than this map to the out-of-vocabulary row.
    pub min_count: usize,
}

impl Default for EmbedSpec {
    fn default() -> Self {
        EmbedSpec { min_count: 2 }
    }
}

/// Encoded model input for one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub dense: Vec<f64>,
    /// Vocabulary indices of (taken callee, not-taken callee, file).
    pub embed: [usize; 3],
}

/// Fitted encoding state. Fitting happens once, on training data; the same
/// statistics are reused at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    numeric: Vec<NumericStat>,
    /// Index into [`NUMERIC_FEATURES`] of each kept numeric feature.
    numeric_source: Vec<usize>,
    dropped: Vec<String>,
    expr_groups: Vec<OneHotGroup>,
    callee_vocab: Vec<String>,
    file_vocab: Vec<String>,
    callee_index: HashMap<String, usize>,
    file_index: HashMap<String, usize>,
}

fn fixed_groups() -> Vec<OneHotGroup> {
    let mut groups = vec![
        OneHotGroup::new("cfg_shape", CfgShape::ALL.iter().map(|c| c.name())),
        OneHotGroup::new("taken_edge_rel", EdgeLoopRelation::ALL.iter().map(|r| r.name())),
        OneHotGroup::new("nottaken_edge_rel", EdgeLoopRelation::ALL.iter().map(|r| r.name())),
    ];
    for side in ["taken", "nottaken"] {
        for (_, attr) in CalleeAttrs::FLAGS {
            groups.push(OneHotGroup::new(&format!("{side}_attr_{attr}"), ["no", "yes"]));
        }
    }
    groups
}

fn build_vocab(counts: BTreeMap<&str, usize>, min_count: usize) -> Vec<String> {
    counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .map(|(s, _)| s.to_string())
        .collect()
}

fn index_map(vocab: &[String]) -> HashMap<String, usize> {
    vocab.iter().enumerate().map(|(i, s)| (s.clone(), i + 1)).collect()
}

impl Encoder {
    /// Fits standardization statistics (population std), expression-token
    /// categories and string vocabularies on `examples`.
    pub fn fit(examples: &[RawFeatures], spec: EmbedSpec) -> Result<Encoder, EncoderError> {
        if examples.is_empty() {
            return Err(EncoderError::EmptyDataset);
        }
        let n = examples.len() as f64;

        let mut numeric = Vec::new();
        let mut numeric_source = Vec::new();
        let mut dropped = Vec::new();
        for (k, name) in NUMERIC_FEATURES.iter().enumerate() {
            let mean = examples.iter().map(|e| e.numeric_values()[k]).sum::<f64>() / n;
            let var = examples
                .iter()
                .map(|e| {
                    let d = e.numeric_values()[k] - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            let std = var.sqrt();
            if std <= ZERO_VARIANCE {
                dropped.push(name.to_string());
            } else {
                numeric.push(NumericStat {
                    name: name.to_string(),
                    mean,
                    std,
                });
                numeric_source.push(k);
            }
        }

        let mut expr_groups = Vec::with_capacity(7);
        for slot in 0..7 {
            let mut seen: Vec<Token> = examples.iter().map(|e| e.expr.slots[slot]).collect();
            seen.sort();
            seen.dedup();
            let mut cats = vec![OTHER_CATEGORY.to_string()];
            cats.extend(seen.iter().map(Token::to_string));
            expr_groups.push(OneHotGroup {
                name: format!("expr_slot_{slot}"),
                categories: cats,
            });
        }

        let mut callee_counts = BTreeMap::new();
        let mut file_counts = BTreeMap::new();
        for e in examples {
            for c in [&e.taken_callee, &e.nottaken_callee].into_iter().flatten() {
                *callee_counts.entry(c.as_str()).or_insert(0) += 1;
            }
            *file_counts.entry(e.file_name.as_str()).or_insert(0) += 1;
        }
        let callee_vocab = build_vocab(callee_counts, spec.min_count);
        let file_vocab = build_vocab(file_counts, spec.min_count);

        Ok(Encoder::from_parts(numeric, dropped, expr_groups, callee_vocab, file_vocab))
    }

    pub(crate) fn from_parts(
        numeric: Vec<NumericStat>,
        dropped: Vec<String>,
        expr_groups: Vec<OneHotGroup>,
        callee_vocab: Vec<String>,
        file_vocab: Vec<String>,
    ) -> Encoder {
        let numeric_source = numeric
            .iter()
            .map(|s| NUMERIC_FEATURES.iter().position(|n| *n == s.name).expect("known numeric feature"))
            .collect();
        Encoder {
            callee_index: index_map(&callee_vocab),
            file_index: index_map(&file_vocab),
            numeric,
            numeric_source,
            dropped,
            expr_groups,
            callee_vocab,
            file_vocab,
        }
    }

    pub fn numeric_stats(&self) -> &[NumericStat] {
        &self.numeric
    }

    /// Numeric features dropped at fit time for having zero variance.
    pub fn dropped(&self) -> &[String] {
        &self.dropped
    }

    pub fn expr_groups(&self) -> &[OneHotGroup] {
        &self.expr_groups
    }

    /// All one-hot groups in layout order.
    pub fn one_hot_groups(&self) -> Vec<OneHotGroup> {
        let mut g = self.expr_groups.clone();
        g.extend(fixed_groups());
        g
    }

    pub fn callee_vocab(&self) -> &[String] {
        &self.callee_vocab
    }

    pub fn file_vocab(&self) -> &[String] {
        &self.file_vocab
    }

    /// Rows of the callee embedding table, including the OOV row 0.
    pub fn callee_table_size(&self) -> usize {
        self.callee_vocab.len() + 1
    }

    pub fn file_table_size(&self) -> usize {
        self.file_vocab.len() + 1
    }

    pub fn dense_len(&self) -> usize {
        self.numeric.len() + self.one_hot_groups().iter().map(OneHotGroup::len).sum::<usize>()
    }

    pub fn callee_index(&self, name: Option<&str>) -> usize {
        name.and_then(|n| self.callee_index.get(n).copied()).unwrap_or(0)
    }

    pub fn file_index(&self, name: &str) -> usize {
        self.file_index.get(name).copied().unwrap_or(0)
    }

    pub fn encode(&self, raw: &RawFeatures) -> EncodedExample {
        let mut dense = Vec::with_capacity(self.dense_len());
        let values = raw.numeric_values();
        for (stat, &k) in self.numeric.iter().zip(&self.numeric_source) {
            dense.push((values[k] - stat.mean) / stat.std);
        }
        for (slot, group) in self.expr_groups.iter().enumerate() {
            let idx = group.index_of(&raw.expr.slots[slot].to_string(), 0);
            group.write(idx, &mut dense);
        }
        let fixed = fixed_groups();
        let mut fixed_iter = fixed.iter();
        let mut put = |idx: usize, dense: &mut Vec<f64>| fixed_iter.next().expect("layout").write(idx, dense);
        put(CfgShape::ALL.iter().position(|c| *c == raw.cfg_shape).unwrap(), &mut dense);
        put(EdgeLoopRelation::ALL.iter().position(|r| *r == raw.taken_edge_rel).unwrap(), &mut dense);
        put(EdgeLoopRelation::ALL.iter().position(|r| *r == raw.nottaken_edge_rel).unwrap(), &mut dense);
        for attrs in [raw.taken_callee_attrs, raw.nottaken_callee_attrs] {
            for (flag, _) in CalleeAttrs::FLAGS {
                put(attrs.contains(flag) as usize, &mut dense);
            }
        }
        EncodedExample {
            dense,
            embed: [
                self.callee_index(raw.taken_callee.as_deref()),
                self.callee_index(raw.nottaken_callee.as_deref()),
                self.file_index(&raw.file_name),
            ],
        }
    }
}
