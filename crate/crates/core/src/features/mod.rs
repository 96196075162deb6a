//! Per-branch feature extraction.
//!
//! Four families are extracted for each conditional branch: the dataflow
//! expression tree feeding the condition, control-flow features (callees in
//! control-dependent blocks, local CFG shape), loop features of the
//! innermost enclosing loop, and whole-function size features. The source
//! file name is carried along as a high-cardinality categorical.

mod encode;

pub use encode::{EmbedSpec, EncodedExample, Encoder, EncoderError, NumericStat, OneHotGroup, NUMERIC_FEATURES};

use std::collections::BTreeMap;
use std::fmt;

use crate::ir::{BlockId, CalleeAttrs, Edge, EdgeLoopRelation, FunctionAnalyses, IrFunction, Opcode, Terminator, Value};

pub const DEFAULT_CONST_THRESHOLD: i64 = 64;

/// A node of the expression tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Op(Opcode),
    Const(i64),
    /// A constant whose magnitude exceeds the threshold.
    ConstUnknown,
    Var,
    Missing,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Op(op) => f.write_str(&op.token_name()),
            Token::Const(c) => write!(f, "const:{c}"),
            Token::ConstUnknown => f.write_str("const:?"),
            Token::Var => f.write_str("var"),
            Token::Missing => f.write_str("missing"),
        }
    }
}

impl std::str::FromStr for Token {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "var" => Ok(Token::Var),
            "missing" => Ok(Token::Missing),
            "const:?" => Ok(Token::ConstUnknown),
            _ => {
                if let Some(c) = s.strip_prefix("const:") {
                    c.parse().map(Token::Const).map_err(|_| format!("bad constant token `{s}`"))
                } else {
                    Opcode::from_token_name(s).map(Token::Op).ok_or_else(|| format!("unknown token `{s}`"))
                }
            }
        }
    }
}

/// The backward dataflow tree of height 2 feeding a branch condition, laid
/// out as a complete binary tree: slot 0 is the root, 1-2 its operands,
/// 3-6 their operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExprTree {
    pub slots: [Token; 7],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CfgShape {
    /// The taken successor falls through to the not-taken successor.
    TriangleTaken,
    /// The not-taken successor falls through to the taken successor.
    TriangleNotTaken,
    Diamond,
    Other,
}

impl CfgShape {
    pub const ALL: [CfgShape; 4] = [
        CfgShape::TriangleTaken,
        CfgShape::TriangleNotTaken,
        CfgShape::Diamond,
        CfgShape::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CfgShape::TriangleTaken => "triangle_taken",
            CfgShape::TriangleNotTaken => "triangle_nottaken",
            CfgShape::Diamond => "diamond",
            CfgShape::Other => "other",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Everything known about one branch before encoding.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RawFeatures {
    pub expr: ExprTree,
    pub taken_callee: Option<String>,
    pub nottaken_callee: Option<String>,
    pub taken_callee_attrs: CalleeAttrs,
    pub nottaken_callee_attrs: CalleeAttrs,
    pub cfg_shape: CfgShape,
    pub loop_depth: u32,
    pub loop_num_blocks: u32,
    pub loop_num_exit_blocks: u32,
    pub loop_num_exit_edges: u32,
    pub taken_edge_rel: EdgeLoopRelation,
    pub nottaken_edge_rel: EdgeLoopRelation,
    pub fn_num_instructions: u32,
    pub fn_num_blocks: u32,
    pub fn_num_edges: u32,
    pub file_name: String,
}

impl RawFeatures {
    /// Numeric features in the canonical order of [`NUMERIC_FEATURES`].
    pub fn numeric_values(&self) -> [f64; 7] {
        [
            self.loop_depth as f64,
            self.loop_num_blocks as f64,
            self.loop_num_exit_blocks as f64,
            self.loop_num_exit_edges as f64,
            self.fn_num_instructions as f64,
            self.fn_num_blocks as f64,
            self.fn_num_edges as f64,
        ]
    }
}

fn leaf_token(v: Value, threshold: i64) -> Token {
    match v {
        Value::Const(c) => const_token(c, threshold),
        Value::Arg(_) | Value::Inst(_) => Token::Var,
    }
}

fn const_token(c: i64, threshold: i64) -> Token {
    if c.unsigned_abs() <= threshold.unsigned_abs() {
        Token::Const(c)
    } else {
        Token::ConstUnknown
    }
}

/// Token for a value that may be expanded: an instruction yields its opcode
/// (materialized constants and opaque values fold to leaf tokens).
fn node_token(f: &IrFunction, v: Value, threshold: i64) -> (Token, &[Value]) {
    match v {
        Value::Inst(id) => match f.instruction(id) {
            Some(inst) => match (inst.opcode, inst.operands.as_slice()) {
                (Opcode::Const, [Value::Const(c)]) => (const_token(*c, threshold), &[]),
                (Opcode::Var, _) => (Token::Var, &[]),
                (op, operands) => (Token::Op(op), operands),
            },
            None => (Token::Var, &[]),
        },
        other => (leaf_token(other, threshold), &[]),
    }
}

/// Extracts the height-2 expression tree of the branch condition in `block`.
pub fn extract_dataflow_tree(f: &IrFunction, block: BlockId, const_threshold: i64) -> ExprTree {
    let mut slots = [Token::Missing; 7];
    let cond = match f.block(block).terminator {
        Terminator::CondBranch { cond, .. } => cond,
        _ => return ExprTree { slots },
    };
    let (root, children) = node_token(f, cond, const_threshold);
    slots[0] = root;
    for (ci, &child) in children.iter().take(2).enumerate() {
        let slot = 1 + ci;
        let (tok, grand) = node_token(f, child, const_threshold);
        slots[slot] = tok;
        for (gi, &g) in grand.iter().take(2).enumerate() {
            // Depth-2 nodes are never expanded: instructions become VAR.
            slots[2 * slot + 1 + gi] = leaf_token(g, const_threshold);
        }
    }
    ExprTree { slots }
}

/// Most frequently called function (by static call-site count) in the
/// blocks control dependent on `edge`, ties broken lexicographically,
/// together with the union of the attributes seen at its call sites.
pub fn dominant_callee(f: &IrFunction, analyses: &FunctionAnalyses, edge: Edge) -> Option<(String, CalleeAttrs)> {
    let mut counts: BTreeMap<&str, (usize, CalleeAttrs)> = BTreeMap::new();
    for b in analyses.control_dependent(f, edge) {
        for inst in &f.block(b).instructions {
            if let (Opcode::Call, Some(name)) = (inst.opcode, inst.callee.as_deref()) {
                let e = counts.entry(name).or_insert((0, CalleeAttrs::empty()));
                e.0 += 1;
                e.1.insert(inst.callee_attrs);
            }
        }
    }
    // BTreeMap iterates names in order, so the first maximum wins ties.
    let mut best: Option<(&str, usize, CalleeAttrs)> = None;
    for (name, (count, attrs)) in counts {
        if best.is_none_or(|(_, c, _)| count > c) {
            best = Some((name, count, attrs));
        }
    }
    best.map(|(n, _, a)| (n.to_string(), a))
}

fn sole_successor(f: &IrFunction, b: BlockId) -> Option<BlockId> {
    match f.block(b).terminator {
        Terminator::Jump(t) => Some(t),
        _ => None,
    }
}

pub fn cfg_shape(f: &IrFunction, taken: BlockId, not_taken: BlockId) -> CfgShape {
    let st = sole_successor(f, taken);
    let snt = sole_successor(f, not_taken);
    if st == Some(not_taken) {
        CfgShape::TriangleTaken
    } else if snt == Some(taken) {
        CfgShape::TriangleNotTaken
    } else if st.is_some() && st == snt {
        CfgShape::Diamond
    } else {
        CfgShape::Other
    }
}

/// Extracts all features of the branch ending `block`. Returns `None` when
/// the block does not end in a conditional branch.
pub fn extract_features(
    f: &IrFunction,
    block: BlockId,
    analyses: &FunctionAnalyses,
    const_threshold: i64,
) -> Option<RawFeatures> {
    let Terminator::CondBranch { taken, not_taken, .. } = f.block(block).terminator else {
        return None;
    };
    let expr = extract_dataflow_tree(f, block, const_threshold);
    let (taken_callee, taken_callee_attrs) = split_callee(dominant_callee(f, analyses, (block, taken)));
    let (nottaken_callee, nottaken_callee_attrs) = split_callee(dominant_callee(f, analyses, (block, not_taken)));

    let (loop_depth, loop_num_blocks, loop_num_exit_blocks, loop_num_exit_edges) =
        match analyses.loops.innermost(block) {
            Some(l) => {
                let l = analyses.loops.get(l);
                (
                    l.depth as u32,
                    l.body.len() as u32,
                    l.exit_blocks.len() as u32,
                    l.exit_edges.len() as u32,
                )
            }
            None => (0, 0, 0, 0),
        };

    Some(RawFeatures {
        expr,
        taken_callee,
        nottaken_callee,
        taken_callee_attrs,
        nottaken_callee_attrs,
        cfg_shape: cfg_shape(f, taken, not_taken),
        loop_depth,
        loop_num_blocks,
        loop_num_exit_blocks,
        loop_num_exit_edges,
        taken_edge_rel: analyses.classify((block, taken)),
        nottaken_edge_rel: analyses.classify((block, not_taken)),
        fn_num_instructions: f.num_instructions() as u32,
        fn_num_blocks: f.num_blocks() as u32,
        fn_num_edges: f.num_edges() as u32,
        file_name: f.file_name().to_string(),
    })
}

fn split_callee(c: Option<(String, CalleeAttrs)>) -> (Option<String>, CalleeAttrs) {
    match c {
        Some((n, a)) => (Some(n), a),
        None => (None, CalleeAttrs::empty()),
    }
}
