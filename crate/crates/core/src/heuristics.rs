//! Static branch probability heuristics in the style of LLVM's branch
//! probability analysis. These are the baseline the learned model is
//! compared against.

use thiserror::Error;

use crate::ir::{BlockId, EdgeLoopRelation, Expect, FCmpPred, FunctionAnalyses, ICmpPred, IrFunction, Opcode, Terminator, Value};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeuristicError {
    #[error("block {0} does not end in a conditional branch")]
    NotAConditionalBranch(BlockId),
    #[error("invalid heuristic config: {0}")]
    InvalidConfig(String),
}

/// Probabilities assigned by each heuristic rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeuristicConfig {
    /// Probability of the hinted side of a `__builtin_expect` branch.
    pub p_expect: f64,
    /// Probability that a loop back edge is taken.
    pub p_backedge: f64,
    /// Probability that a pointer-vs-null or float equality compare is true.
    pub p_null_cmp_eq_true: f64,
    pub p_default: f64,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        HeuristicConfig {
            p_expect: 0.99,
            p_backedge: 0.875,
            p_null_cmp_eq_true: 0.375,
            p_default: 0.5,
        }
    }
}

impl HeuristicConfig {
    pub fn validate(&self) -> Result<(), HeuristicError> {
        let open = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(HeuristicError::InvalidConfig(format!("{name}={v} must lie in (0, 1)")))
            }
        };
        open("p_expect", self.p_expect)?;
        open("p_backedge", self.p_backedge)?;
        open("p_null_cmp_eq_true", self.p_null_cmp_eq_true)?;
        open("p_default", self.p_default)?;
        if self.p_backedge <= 0.5 {
            return Err(HeuristicError::InvalidConfig("p_backedge must exceed 0.5".into()));
        }
        if self.p_null_cmp_eq_true >= 0.5 {
            return Err(HeuristicError::InvalidConfig("p_null_cmp_eq_true must be below 0.5".into()));
        }
        Ok(())
    }
}

/// Which rule produced an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeuristicRule {
    Expect,
    Loop,
    UnlikelyCompare,
    Default,
}

/// Taken probability of the branch ending `block`. The first matching rule
/// wins: expect hint, loop back/exit edge, null or float-equality compare,
/// then the unbiased default.
pub fn estimate_heuristic(
    f: &IrFunction,
    block: BlockId,
    analyses: &FunctionAnalyses,
    config: &HeuristicConfig,
) -> Result<f64, HeuristicError> {
    estimate_with_rule(f, block, analyses, config).map(|(p, _)| p)
}

pub fn estimate_with_rule(
    f: &IrFunction,
    block: BlockId,
    analyses: &FunctionAnalyses,
    config: &HeuristicConfig,
) -> Result<(f64, HeuristicRule), HeuristicError> {
    let Terminator::CondBranch {
        cond,
        taken,
        not_taken,
        expect,
    } = f.block(block).terminator
    else {
        return Err(HeuristicError::NotAConditionalBranch(block));
    };

    match expect {
        Some(Expect::Taken) => return Ok((config.p_expect, HeuristicRule::Expect)),
        Some(Expect::NotTaken) => return Ok((1.0 - config.p_expect, HeuristicRule::Expect)),
        None => {}
    }

    let t_rel = analyses.classify((block, taken));
    let nt_rel = analyses.classify((block, not_taken));
    if let Some(p) = loop_rule(t_rel, nt_rel, config.p_backedge) {
        return Ok((p, HeuristicRule::Loop));
    }

    if let Some(p_true) = unlikely_compare(f, cond, config.p_null_cmp_eq_true) {
        return Ok((p_true, HeuristicRule::UnlikelyCompare));
    }

    Ok((config.p_default, HeuristicRule::Default))
}

/// Back edges are likely, exit edges unlikely. The taken edge is examined
/// first; the rule only fires when the two edges fall in different classes.
fn loop_rule(taken: EdgeLoopRelation, not_taken: EdgeLoopRelation, p_back: f64) -> Option<f64> {
    use EdgeLoopRelation::*;
    if taken == not_taken {
        return None;
    }
    match (taken, not_taken) {
        (BackEdge, _) => Some(p_back),
        (_, BackEdge) => Some(1.0 - p_back),
        (ExitEdge, _) => Some(1.0 - p_back),
        (_, ExitEdge) => Some(p_back),
        _ => None,
    }
}

/// Probability that `cond` is true when it is a pointer-vs-null compare
/// (`icmp eq|ne` of a loaded value against 0) or a float (in)equality.
fn unlikely_compare(f: &IrFunction, cond: Value, p_eq_true: f64) -> Option<f64> {
    let Value::Inst(id) = cond else { return None };
    let inst = f.instruction(id)?;
    match inst.opcode {
        Opcode::FCmp(FCmpPred::Oeq) => Some(p_eq_true),
        Opcode::FCmp(FCmpPred::One) => Some(1.0 - p_eq_true),
        Opcode::ICmp(pred @ (ICmpPred::Eq | ICmpPred::Ne)) => {
            let [a, b] = inst.operands[..] else { return None };
            let null_like = (is_zero(f, a) && is_load(f, b)) || (is_zero(f, b) && is_load(f, a));
            if !null_like {
                return None;
            }
            Some(if pred == ICmpPred::Eq { p_eq_true } else { 1.0 - p_eq_true })
        }
        _ => None,
    }
}

fn is_zero(f: &IrFunction, v: Value) -> bool {
    match v {
        Value::Const(0) => true,
        Value::Inst(id) => f
            .instruction(id)
            .is_some_and(|i| i.opcode == Opcode::Const && i.operands == [Value::Const(0)]),
        _ => false,
    }
}

fn is_load(f: &IrFunction, v: Value) -> bool {
    matches!(v, Value::Inst(id) if f.instruction(id).is_some_and(|i| i.opcode == Opcode::Load))
}
