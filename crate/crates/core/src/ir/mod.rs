//! A deliberately small SSA-style IR: functions made of basic blocks, each
//! holding a list of instructions and exactly one terminator.
//!
//! Only what branch analysis needs is modelled: opcodes, constant operands,
//! calls with their callee attributes, and the control-flow graph. Values are
//! never computed.

mod analysis;
mod dom;
mod loops;
pub mod text;

pub use analysis::FunctionAnalyses;
pub use dom::{compute_dominators, compute_postdominators, control_dependent_blocks, DomTree, PostDomTree};
pub use loops::{classify_edge, find_natural_loops, EdgeLoopRelation, Loop, LoopForest, LoopId};

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

pub type BlockId = usize;
pub type InstId = usize;

/// A directed CFG edge `(source, destination)`.
pub type Edge = (BlockId, BlockId);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IrError {
    #[error("function `{0}` has no blocks")]
    EmptyFunction(String),
    #[error("block {block} references missing block {target}")]
    DanglingTarget { block: usize, target: usize },
    #[error("block {0} is unreachable from the entry block")]
    UnreachableBlock(usize),
    #[error("instruction {user} uses %{operand} before its definition")]
    UseBeforeDef { user: String, operand: usize },
    #[error("duplicate block id {0}")]
    DuplicateBlock(usize),
    #[error("duplicate instruction id %{0}")]
    DuplicateInstruction(usize),
    #[error("conditional branch in block {0} has identical targets")]
    IdenticalTargets(usize),
    #[error("call instruction %{0} has no callee name")]
    MissingCallee(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ICmpPred {
    Eq,
    Ne,
    Slt,
    Sle,
    Sgt,
    Sge,
    Ult,
    Ule,
    Ugt,
    Uge,
}

impl ICmpPred {
    pub const ALL: [ICmpPred; 10] = [
        ICmpPred::Eq,
        ICmpPred::Ne,
        ICmpPred::Slt,
        ICmpPred::Sle,
        ICmpPred::Sgt,
        ICmpPred::Sge,
        ICmpPred::Ult,
        ICmpPred::Ule,
        ICmpPred::Ugt,
        ICmpPred::Uge,
    ];

    /// The predicate that is true exactly when `self` is false.
    pub fn inverse(self) -> ICmpPred {
        use ICmpPred::*;
        match self {
            Eq => Ne,
            Ne => Eq,
            Slt => Sge,
            Sge => Slt,
            Sle => Sgt,
            Sgt => Sle,
            Ult => Uge,
            Uge => Ult,
            Ule => Ugt,
            Ugt => Ule,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        use ICmpPred::*;
        match self {
            Eq => "eq",
            Ne => "ne",
            Slt => "slt",
            Sle => "sle",
            Sgt => "sgt",
            Sge => "sge",
            Ult => "ult",
            Ule => "ule",
            Ugt => "ugt",
            Uge => "uge",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FCmpPred {
    Oeq,
    One,
    Olt,
    Ogt,
}

impl FCmpPred {
    pub const ALL: [FCmpPred; 4] = [FCmpPred::Oeq, FCmpPred::One, FCmpPred::Olt, FCmpPred::Ogt];

    /// Only the equality pair is closed under negation in this predicate set.
    pub fn inverse(self) -> Option<FCmpPred> {
        match self {
            FCmpPred::Oeq => Some(FCmpPred::One),
            FCmpPred::One => Some(FCmpPred::Oeq),
            FCmpPred::Olt | FCmpPred::Ogt => None,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            FCmpPred::Oeq => "oeq",
            FCmpPred::One => "one",
            FCmpPred::Olt => "olt",
            FCmpPred::Ogt => "ogt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Opcode {
    ICmp(ICmpPred),
    FCmp(FCmpPred),
    Add,
    Sub,
    Mul,
    Div,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Load,
    Phi,
    Select,
    Call,
    Const,
    Var,
}

impl Opcode {
    /// Every opcode, predicates expanded. This is also the operator token
    /// vocabulary of the expression-tree features.
    pub fn all() -> Vec<Opcode> {
        let mut ops: Vec<Opcode> = ICmpPred::ALL.iter().map(|&p| Opcode::ICmp(p)).collect();
        ops.extend(FCmpPred::ALL.iter().map(|&p| Opcode::FCmp(p)));
        ops.extend([
            Opcode::Add,
            Opcode::Sub,
            Opcode::Mul,
            Opcode::Div,
            Opcode::And,
            Opcode::Or,
            Opcode::Xor,
            Opcode::Shl,
            Opcode::Shr,
            Opcode::Load,
            Opcode::Phi,
            Opcode::Select,
            Opcode::Call,
            Opcode::Const,
            Opcode::Var,
        ]);
        ops
    }

    pub fn is_compare(self) -> bool {
        matches!(self, Opcode::ICmp(_) | Opcode::FCmp(_))
    }

    /// Dotted mnemonic, e.g. `icmp.eq` or `add`. Used in token strings.
    pub fn token_name(self) -> String {
        match self {
            Opcode::ICmp(p) => format!("icmp.{}", p.mnemonic()),
            Opcode::FCmp(p) => format!("fcmp.{}", p.mnemonic()),
            other => other.base_mnemonic().to_string(),
        }
    }

    pub fn from_token_name(s: &str) -> Option<Opcode> {
        Opcode::all().into_iter().find(|op| op.token_name() == s)
    }

    pub(crate) fn base_mnemonic(self) -> &'static str {
        match self {
            Opcode::ICmp(_) => "icmp",
            Opcode::FCmp(_) => "fcmp",
            Opcode::Add => "add",
            Opcode::Sub => "sub",
            Opcode::Mul => "mul",
            Opcode::Div => "div",
            Opcode::And => "and",
            Opcode::Or => "or",
            Opcode::Xor => "xor",
            Opcode::Shl => "shl",
            Opcode::Shr => "shr",
            Opcode::Load => "load",
            Opcode::Phi => "phi",
            Opcode::Select => "select",
            Opcode::Call => "call",
            Opcode::Const => "const",
            Opcode::Var => "var",
        }
    }
}

/// An instruction operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Value {
    Inst(InstId),
    Const(i64),
    Arg(u32),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Inst(id) => write!(f, "%{id}"),
            Value::Const(c) => write!(f, "{c}"),
            Value::Arg(k) => write!(f, "arg{k}"),
        }
    }
}

/// Callee attribute flags, stored as a bit set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CalleeAttrs(u8);

impl CalleeAttrs {
    pub const INLINE: CalleeAttrs = CalleeAttrs(1);
    pub const NOINLINE: CalleeAttrs = CalleeAttrs(2);
    pub const ALWAYS_INLINE: CalleeAttrs = CalleeAttrs(4);
    pub const COLD: CalleeAttrs = CalleeAttrs(8);

    /// Flags in their canonical order, with the names used in text formats.
    pub const FLAGS: [(CalleeAttrs, &'static str); 4] = [
        (CalleeAttrs::INLINE, "inline"),
        (CalleeAttrs::NOINLINE, "noinline"),
        (CalleeAttrs::ALWAYS_INLINE, "always_inline"),
        (CalleeAttrs::COLD, "cold"),
    ];

    pub const fn empty() -> Self {
        CalleeAttrs(0)
    }

    pub fn contains(self, other: CalleeAttrs) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn insert(&mut self, other: CalleeAttrs) {
        self.0 |= other.0;
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn from_name(name: &str) -> Option<CalleeAttrs> {
        Self::FLAGS.iter().find(|(_, n)| *n == name).map(|(f, _)| *f)
    }

    pub fn names(self) -> Vec<&'static str> {
        Self::FLAGS
            .iter()
            .filter(|(f, _)| self.contains(*f))
            .map(|(_, n)| *n)
            .collect()
    }
}

impl std::ops::BitOr for CalleeAttrs {
    type Output = CalleeAttrs;
    fn bitor(self, rhs: CalleeAttrs) -> CalleeAttrs {
        CalleeAttrs(self.0 | rhs.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub id: InstId,
    pub opcode: Opcode,
    pub operands: Vec<Value>,
    pub callee: Option<String>,
    pub callee_attrs: CalleeAttrs,
}

impl Instruction {
    pub fn new(id: InstId, opcode: Opcode, operands: Vec<Value>) -> Self {
        Instruction {
            id,
            opcode,
            operands,
            callee: None,
            callee_attrs: CalleeAttrs::empty(),
        }
    }

    pub fn call(id: InstId, callee: &str, attrs: CalleeAttrs, operands: Vec<Value>) -> Self {
        Instruction {
            id,
            opcode: Opcode::Call,
            operands,
            callee: Some(callee.to_string()),
            callee_attrs: attrs,
        }
    }
}

/// `__builtin_expect`-style hint attached to a conditional branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Expect {
    Taken,
    NotTaken,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Terminator {
    CondBranch {
        cond: Value,
        taken: BlockId,
        not_taken: BlockId,
        expect: Option<Expect>,
    },
    Jump(BlockId),
    Return,
}

impl Terminator {
    pub fn successors(&self) -> Vec<BlockId> {
        match *self {
            Terminator::CondBranch { taken, not_taken, .. } => vec![taken, not_taken],
            Terminator::Jump(t) => vec![t],
            Terminator::Return => Vec::new(),
        }
    }

    fn map_targets(&self, f: impl Fn(BlockId) -> BlockId) -> Terminator {
        match *self {
            Terminator::CondBranch { cond, taken, not_taken, expect } => Terminator::CondBranch {
                cond,
                taken: f(taken),
                not_taken: f(not_taken),
                expect,
            },
            Terminator::Jump(t) => Terminator::Jump(f(t)),
            Terminator::Return => Terminator::Return,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicBlock {
    pub id: BlockId,
    pub instructions: Vec<Instruction>,
    pub terminator: Terminator,
}

impl BasicBlock {
    pub fn new(id: BlockId, instructions: Vec<Instruction>, terminator: Terminator) -> Self {
        BasicBlock { id, instructions, terminator }
    }
}

/// A validated function. Block ids are dense, `0` is the entry, and blocks
/// are stored in reverse post-order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IrFunction {
    name: String,
    file_name: String,
    blocks: Vec<BasicBlock>,
    /// Instruction id -> (block, index within block).
    defs: Vec<(BlockId, usize)>,
    preds: Vec<Vec<BlockId>>,
}

impl IrFunction {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn file_name(&self) -> &str {
        &self.file_name
    }

    pub fn entry(&self) -> BlockId {
        0
    }

    pub fn blocks(&self) -> &[BasicBlock] {
        &self.blocks
    }

    pub fn block(&self, id: BlockId) -> &BasicBlock {
        &self.blocks[id]
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn successors(&self, id: BlockId) -> Vec<BlockId> {
        self.blocks[id].terminator.successors()
    }

    pub fn predecessors(&self, id: BlockId) -> &[BlockId] {
        &self.preds[id]
    }

    pub fn instruction(&self, id: InstId) -> Option<&Instruction> {
        self.defs.get(id).map(|&(b, i)| &self.blocks[b].instructions[i])
    }

    /// All edges, in block order then successor order.
    pub fn edges(&self) -> Vec<Edge> {
        self.blocks
            .iter()
            .flat_map(|b| b.terminator.successors().into_iter().map(move |s| (b.id, s)))
            .collect()
    }

    /// Blocks ending in a conditional branch.
    pub fn branch_blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.blocks
            .iter()
            .filter(|b| matches!(b.terminator, Terminator::CondBranch { .. }))
            .map(|b| b.id)
    }

    /// Instruction count including one terminator per block.
    pub fn num_instructions(&self) -> usize {
        self.blocks.iter().map(|b| b.instructions.len() + 1).sum()
    }

    pub fn num_edges(&self) -> usize {
        self.blocks.iter().map(|b| b.terminator.successors().len()).sum()
    }

    /// Stable identifier `file:function:block` of the branch ending `block`.
    pub fn branch_id(&self, block: BlockId) -> String {
        format!("{}:{}:{}", self.file_name, self.name, block)
    }
}

/// A set of functions, typically the contents of one IR file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IrModule {
    pub functions: Vec<IrFunction>,
}

/// Validates `blocks` and renumbers blocks and instructions densely in
/// reverse post-order from the first block.
pub fn build_function(name: &str, file_name: &str, blocks: Vec<BasicBlock>) -> Result<IrFunction, IrError> {
    build_function_mapped(name, file_name, blocks).map(|(f, _)| f)
}

/// Like [`build_function`], also returning the new id of each input block
/// (indexed by input position).
pub fn build_function_mapped(
    name: &str,
    file_name: &str,
    blocks: Vec<BasicBlock>,
) -> Result<(IrFunction, Vec<BlockId>), IrError> {
    if blocks.is_empty() {
        return Err(IrError::EmptyFunction(name.to_string()));
    }

    let mut pos_of_label = HashMap::with_capacity(blocks.len());
    for (pos, b) in blocks.iter().enumerate() {
        if pos_of_label.insert(b.id, pos).is_some() {
            return Err(IrError::DuplicateBlock(b.id));
        }
    }

    // Successor lists in input positions.
    let mut succ = Vec::with_capacity(blocks.len());
    for b in &blocks {
        if let Terminator::CondBranch { taken, not_taken, .. } = b.terminator {
            if taken == not_taken {
                return Err(IrError::IdenticalTargets(b.id));
            }
        }
        let mut s = Vec::new();
        for t in b.terminator.successors() {
            match pos_of_label.get(&t) {
                Some(&p) => s.push(p),
                None => return Err(IrError::DanglingTarget { block: b.id, target: t }),
            }
        }
        succ.push(s);
    }

    let rpo = reverse_post_order(&succ, 0);
    if rpo.len() != blocks.len() {
        let mut seen = vec![false; blocks.len()];
        for &p in &rpo {
            seen[p] = true;
        }
        let pos = seen.iter().position(|s| !s).expect("some block unreached");
        return Err(IrError::UnreachableBlock(blocks[pos].id));
    }
    let mut new_id = vec![0; blocks.len()];
    for (i, &p) in rpo.iter().enumerate() {
        new_id[p] = i;
    }

    // Renumber instructions in linear (reverse post-order) order.
    let mut inst_new = HashMap::new();
    let mut next = 0usize;
    for &p in &rpo {
        for inst in &blocks[p].instructions {
            if inst.opcode == Opcode::Call && inst.callee.is_none() {
                return Err(IrError::MissingCallee(inst.id));
            }
            if inst_new.insert(inst.id, next).is_some() {
                return Err(IrError::DuplicateInstruction(inst.id));
            }
            next += 1;
        }
    }

    let mut by_pos: Vec<Option<BasicBlock>> = blocks.into_iter().map(Some).collect();
    let mut out = Vec::with_capacity(by_pos.len());
    let mut defs = Vec::with_capacity(next);
    for (new_block, &p) in rpo.iter().enumerate() {
        let b = by_pos[p].take().expect("each position visited once");
        let mut insts = Vec::with_capacity(b.instructions.len());
        for inst in b.instructions {
            let id = inst_new[&inst.id];
            let mut operands = Vec::with_capacity(inst.operands.len());
            for v in &inst.operands {
                operands.push(remap_value(*v, &inst_new, id, inst.opcode == Opcode::Phi, &inst.id.to_string())?);
            }
            defs.push((new_block, insts.len()));
            insts.push(Instruction { id, operands, ..inst });
        }
        let terminator = match &b.terminator {
            Terminator::CondBranch { cond, .. } => {
                let cond = remap_value(*cond, &inst_new, next, false, &format!("br in block {}", b.id))?;
                match b.terminator.map_targets(|t| new_id[pos_of_label[&t]]) {
                    Terminator::CondBranch { taken, not_taken, expect, .. } => Terminator::CondBranch {
                        cond,
                        taken,
                        not_taken,
                        expect,
                    },
                    _ => unreachable!(),
                }
            }
            t => t.map_targets(|t| new_id[pos_of_label[&t]]),
        };
        out.push(BasicBlock {
            id: new_block,
            instructions: insts,
            terminator,
        });
    }

    // Branch conditions must be defined in a block preceding or equal to
    // their own in linear order, which `remap_value` with `next` as the user
    // id cannot see; check it against the definition position instead.
    for b in &out {
        if let Terminator::CondBranch { cond: Value::Inst(c), .. } = b.terminator {
            if defs[c].0 > b.id {
                return Err(IrError::UseBeforeDef {
                    user: format!("br in block {}", b.id),
                    operand: c,
                });
            }
        }
    }

    let mut preds = vec![Vec::new(); out.len()];
    for b in &out {
        for s in b.terminator.successors() {
            preds[s].push(b.id);
        }
    }

    let f = IrFunction {
        name: name.to_string(),
        file_name: file_name.to_string(),
        blocks: out,
        defs,
        preds,
    };
    Ok((f, new_id))
}

fn remap_value(
    v: Value,
    inst_new: &HashMap<InstId, InstId>,
    user: InstId,
    allow_forward: bool,
    user_label: &str,
) -> Result<Value, IrError> {
    match v {
        Value::Inst(old) => match inst_new.get(&old) {
            Some(&new) if allow_forward || new < user => Ok(Value::Inst(new)),
            _ => Err(IrError::UseBeforeDef {
                user: user_label.to_string(),
                operand: old,
            }),
        },
        other => Ok(other),
    }
}

/// Reverse post-order of the nodes reachable from `entry`, visiting
/// successors in list order.
pub(crate) fn reverse_post_order(succ: &[Vec<usize>], entry: usize) -> Vec<usize> {
    let n = succ.len();
    let mut visited = vec![false; n];
    let mut post = Vec::with_capacity(n);
    let mut stack: Vec<(usize, usize)> = vec![(entry, 0)];
    visited[entry] = true;
    while let Some(&mut (node, ref mut next)) = stack.last_mut() {
        if let Some(&s) = succ[node].get(*next) {
            *next += 1;
            if !visited[s] {
                visited[s] = true;
                stack.push((s, 0));
            }
        } else {
            post.push(node);
            stack.pop();
        }
    }
    post.reverse();
    post
}
