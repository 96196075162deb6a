//! Natural loop detection and classification of branch edges relative to
//! the loop nest.

use std::collections::BTreeSet;

use super::{BlockId, DomTree, Edge, IrFunction};

pub type LoopId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Loop {
    pub header: BlockId,
    pub body: BTreeSet<BlockId>,
    pub depth: usize,
    pub back_edges: Vec<Edge>,
    pub exit_blocks: BTreeSet<BlockId>,
    pub exit_edges: Vec<Edge>,
    pub parent: Option<LoopId>,
}

/// All natural loops of a function, ordered by header.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LoopForest {
    pub loops: Vec<Loop>,
    innermost: Vec<Option<LoopId>>,
}

impl LoopForest {
    /// Innermost loop containing `block`, if any.
    pub fn innermost(&self, block: BlockId) -> Option<LoopId> {
        self.innermost.get(block).copied().flatten()
    }

    pub fn get(&self, id: LoopId) -> &Loop {
        &self.loops[id]
    }

    pub fn is_header(&self, block: BlockId) -> Option<LoopId> {
        self.loops.iter().position(|l| l.header == block)
    }

    pub fn is_empty(&self) -> bool {
        self.loops.is_empty()
    }

    /// Is loop `inner` nested (strictly) inside `outer`?
    pub fn is_nested_in(&self, inner: LoopId, outer: LoopId) -> bool {
        let mut cur = self.loops[inner].parent;
        while let Some(p) = cur {
            if p == outer {
                return true;
            }
            cur = self.loops[p].parent;
        }
        false
    }
}

/// Finds one natural loop per header. An edge `u -> h` is a back edge when
/// `h` dominates `u`; retreating edges into non-dominating blocks
/// (irreducible cycles) produce no loop.
pub fn find_natural_loops(f: &IrFunction, dom: &DomTree) -> LoopForest {
    let n = f.num_blocks();
    let mut back_by_header: Vec<Vec<Edge>> = vec![Vec::new(); n];
    for (u, h) in f.edges() {
        if dom.dominates(h, u) {
            back_by_header[h].push((u, h));
        }
    }

    let mut loops = Vec::new();
    for (header, back_edges) in back_by_header.into_iter().enumerate() {
        if back_edges.is_empty() {
            continue;
        }
        let mut body = BTreeSet::from([header]);
        let mut stack: Vec<BlockId> = Vec::new();
        for &(u, _) in &back_edges {
            if body.insert(u) {
                stack.push(u);
            }
        }
        while let Some(v) = stack.pop() {
            for &p in f.predecessors(v) {
                if body.insert(p) {
                    stack.push(p);
                }
            }
        }
        let mut exit_edges = Vec::new();
        let mut exit_blocks = BTreeSet::new();
        for &b in &body {
            for s in f.successors(b) {
                if !body.contains(&s) {
                    exit_edges.push((b, s));
                    exit_blocks.insert(s);
                }
            }
        }
        loops.push(Loop {
            header,
            body,
            depth: 0,
            back_edges,
            exit_blocks,
            exit_edges,
            parent: None,
        });
    }

    // Parent = smallest strictly enclosing body.
    for i in 0..loops.len() {
        let parent = (0..loops.len())
            .filter(|&j| j != i && loops[j].body.len() > loops[i].body.len() && loops[j].body.is_superset(&loops[i].body))
            .min_by_key(|&j| loops[j].body.len());
        loops[i].parent = parent;
    }
    for i in 0..loops.len() {
        let mut depth = 1;
        let mut cur = loops[i].parent;
        while let Some(p) = cur {
            depth += 1;
            cur = loops[p].parent;
        }
        loops[i].depth = depth;
    }

    let innermost = (0..n)
        .map(|b| {
            (0..loops.len())
                .filter(|&l| loops[l].body.contains(&b))
                .min_by_key(|&l| loops[l].body.len())
        })
        .collect();

    LoopForest { loops, innermost }
}

/// Relation of a branch edge to the loop nest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeLoopRelation {
    ExitEdge,
    BackEdge,
    EntersInnerLoop,
    /// Also used for branches outside every loop.
    SameLoop,
}

impl EdgeLoopRelation {
    pub const ALL: [EdgeLoopRelation; 4] = [
        EdgeLoopRelation::ExitEdge,
        EdgeLoopRelation::BackEdge,
        EdgeLoopRelation::EntersInnerLoop,
        EdgeLoopRelation::SameLoop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EdgeLoopRelation::ExitEdge => "exit",
            EdgeLoopRelation::BackEdge => "back",
            EdgeLoopRelation::EntersInnerLoop => "inner",
            EdgeLoopRelation::SameLoop => "same",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }
}

/// Classifies `edge` with priority exit > back > enters-inner > same.
pub fn classify_edge(loops: &LoopForest, edge: Edge) -> EdgeLoopRelation {
    if loops.loops.iter().any(|l| l.exit_edges.contains(&edge)) {
        return EdgeLoopRelation::ExitEdge;
    }
    if loops.loops.iter().any(|l| l.back_edges.contains(&edge)) {
        return EdgeLoopRelation::BackEdge;
    }
    let (src, dst) = edge;
    if let Some(target) = loops.is_header(dst) {
        let enters = match loops.innermost(src) {
            None => true,
            Some(outer) => loops.is_nested_in(target, outer),
        };
        if enters {
            return EdgeLoopRelation::EntersInnerLoop;
        }
    }
    EdgeLoopRelation::SameLoop
}
