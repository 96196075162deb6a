use std::collections::BTreeSet;

use super::dom::compute_postdominators_with;
use super::{
    classify_edge, compute_dominators, control_dependent_blocks, find_natural_loops, BlockId, DomTree, Edge,
    EdgeLoopRelation, IrFunction, LoopForest, PostDomTree,
};

/// The CFG analyses needed by heuristics and feature extraction, computed
/// once per function.
#[derive(Debug, Clone)]
pub struct FunctionAnalyses {
    pub dom: DomTree,
    pub pdom: PostDomTree,
    pub loops: LoopForest,
}

impl FunctionAnalyses {
    pub fn compute(f: &IrFunction) -> Self {
        let dom = compute_dominators(f);
        let pdom = compute_postdominators_with(f, &dom);
        let loops = find_natural_loops(f, &dom);
        FunctionAnalyses { dom, pdom, loops }
    }

    pub fn control_dependent(&self, f: &IrFunction, edge: Edge) -> BTreeSet<BlockId> {
        control_dependent_blocks(f, &self.pdom, edge)
    }

    pub fn classify(&self, edge: Edge) -> EdgeLoopRelation {
        classify_edge(&self.loops, edge)
    }
}
