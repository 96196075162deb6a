//! Dominator and post-dominator trees (Cooper/Harvey/Kennedy iterative
//! algorithm) and control dependence.

use std::collections::BTreeSet;

use super::{reverse_post_order, BlockId, Edge, IrFunction, Terminator};

/// Immediate dominators of a rooted graph. The root is its own idom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomTree {
    root: usize,
    idom: Vec<usize>,
}

impl DomTree {
    pub fn root(&self) -> usize {
        self.root
    }

    pub fn idom(&self, node: usize) -> usize {
        self.idom[node]
    }

    pub fn len(&self) -> usize {
        self.idom.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idom.is_empty()
    }

    /// Does `a` dominate `b`? Every node dominates itself.
    pub fn dominates(&self, a: usize, b: usize) -> bool {
        let mut cur = b;
        loop {
            if cur == a {
                return true;
            }
            if cur == self.root {
                return false;
            }
            cur = self.idom[cur];
        }
    }

    /// `node` and all of its dominators, innermost first.
    pub fn ancestors(&self, node: usize) -> Vec<usize> {
        let mut out = vec![node];
        let mut cur = node;
        while cur != self.root {
            cur = self.idom[cur];
            out.push(cur);
        }
        out
    }
}

/// Post-dominator tree over the blocks plus a virtual exit node, whose index
/// is `f.num_blocks()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PostDomTree {
    tree: DomTree,
    synthetic: Vec<BlockId>,
}

impl PostDomTree {
    pub fn virtual_exit(&self) -> usize {
        self.tree.root
    }

    pub fn ipdom(&self, node: usize) -> usize {
        self.tree.idom(node)
    }

    pub fn postdominates(&self, a: usize, b: usize) -> bool {
        self.tree.dominates(a, b)
    }

    pub fn tree(&self) -> &DomTree {
        &self.tree
    }

    /// Blocks given a synthetic edge to the virtual exit because they could
    /// not otherwise reach a return.
    pub fn synthetic_exit_edges(&self) -> &[BlockId] {
        &self.synthetic
    }
}

fn intersect(idom: &[usize], order: &[usize], mut a: usize, mut b: usize) -> usize {
    while a != b {
        while order[a] > order[b] {
            a = idom[a];
        }
        while order[b] > order[a] {
            b = idom[b];
        }
    }
    a
}

/// Dominators of the nodes reachable from `root`. Unreachable nodes map to
/// `usize::MAX`.
fn dominators_of(succ: &[Vec<usize>], preds: &[Vec<usize>], root: usize) -> DomTree {
    let n = succ.len();
    let rpo = reverse_post_order(succ, root);
    let mut order = vec![usize::MAX; n];
    for (i, &v) in rpo.iter().enumerate() {
        order[v] = i;
    }
    const UNDEF: usize = usize::MAX;
    let mut idom = vec![UNDEF; n];
    idom[root] = root;
    let mut changed = true;
    while changed {
        changed = false;
        for &v in rpo.iter().skip(1) {
            let mut new_idom = UNDEF;
            for &p in &preds[v] {
                if idom[p] == UNDEF {
                    continue;
                }
                new_idom = if new_idom == UNDEF {
                    p
                } else {
                    intersect(&idom, &order, p, new_idom)
                };
            }
            if new_idom != idom[v] {
                idom[v] = new_idom;
                changed = true;
            }
        }
    }
    DomTree { root, idom }
}

pub fn compute_dominators(f: &IrFunction) -> DomTree {
    let n = f.num_blocks();
    let succ: Vec<Vec<usize>> = (0..n).map(|b| f.successors(b)).collect();
    let preds: Vec<Vec<usize>> = (0..n).map(|b| f.predecessors(b).to_vec()).collect();
    dominators_of(&succ, &preds, f.entry())
}

/// The reversed CFG with the virtual exit as root, and the synthetic edges
/// that were needed to make every block reach it.
pub(crate) fn reverse_graph_with_exit(f: &IrFunction, dom: &DomTree) -> (Vec<Vec<usize>>, Vec<Vec<usize>>, Vec<BlockId>) {
    let n = f.num_blocks();
    let exit = n;
    // Forward successor lists including edges into the exit.
    let mut fwd: Vec<Vec<usize>> = (0..n).map(|b| f.successors(b)).collect();
    fwd.push(Vec::new());
    for (b, succ) in fwd.iter_mut().enumerate().take(n) {
        if f.block(b).terminator == Terminator::Return {
            succ.push(exit);
        }
    }

    let headers = loop_header_candidates(f, dom);
    let mut synthetic = Vec::new();
    loop {
        let reaches = reaches_exit(&fwd, exit);
        let Some(stuck) = (0..n).find(|&b| !reaches[b]) else {
            break;
        };
        // Blocks are numbered in reverse post-order, so the lowest-numbered
        // stuck header is the entry-most one.
        let pick = headers.iter().copied().find(|&h| !reaches[h]).unwrap_or(stuck);
        fwd[pick].push(exit);
        synthetic.push(pick);
    }

    let mut rev_succ = vec![Vec::new(); n + 1];
    let mut rev_pred = vec![Vec::new(); n + 1];
    for (u, ss) in fwd.iter().enumerate() {
        for &v in ss {
            rev_succ[v].push(u);
            rev_pred[u].push(v);
        }
    }
    (rev_succ, rev_pred, synthetic)
}

fn loop_header_candidates(f: &IrFunction, dom: &DomTree) -> Vec<BlockId> {
    let mut headers: BTreeSet<BlockId> = BTreeSet::new();
    for (u, v) in f.edges() {
        if dom.dominates(v, u) {
            headers.insert(v);
        }
    }
    headers.into_iter().collect()
}

fn reaches_exit(fwd: &[Vec<usize>], exit: usize) -> Vec<bool> {
    let n = fwd.len();
    let mut rev = vec![Vec::new(); n];
    for (u, ss) in fwd.iter().enumerate() {
        for &v in ss {
            rev[v].push(u);
        }
    }
    let mut seen = vec![false; n];
    let mut stack = vec![exit];
    seen[exit] = true;
    while let Some(v) = stack.pop() {
        for &u in &rev[v] {
            if !seen[u] {
                seen[u] = true;
                stack.push(u);
            }
        }
    }
    seen
}

/// Post-dominators with a virtual exit joining all returns. Blocks that
/// cannot reach a return (infinite loops) get a synthetic edge to the exit
/// from the entry-most loop header among them.
pub fn compute_postdominators(f: &IrFunction) -> PostDomTree {
    let dom = compute_dominators(f);
    compute_postdominators_with(f, &dom)
}

pub(crate) fn compute_postdominators_with(f: &IrFunction, dom: &DomTree) -> PostDomTree {
    let (rev_succ, rev_pred, synthetic) = reverse_graph_with_exit(f, dom);
    let tree = dominators_of(&rev_succ, &rev_pred, f.num_blocks());
    PostDomTree { tree, synthetic }
}

/// Blocks that execute only if `edge` is taken: those post-dominating the
/// edge destination but not its source.
pub fn control_dependent_blocks(f: &IrFunction, pdom: &PostDomTree, edge: Edge) -> BTreeSet<BlockId> {
    let (src, dst) = edge;
    let exit = pdom.virtual_exit();
    let above_src: BTreeSet<usize> = pdom.tree().ancestors(src).into_iter().collect();
    let mut out = BTreeSet::new();
    for b in pdom.tree().ancestors(dst) {
        if above_src.contains(&b) {
            break;
        }
        if b != exit && b < f.num_blocks() {
            out.insert(b);
        }
    }
    out
}
