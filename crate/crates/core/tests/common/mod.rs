//! Shared helpers for the integration tests.
#![allow(dead_code)]

use bplab::features::{CfgShape, EmbedSpec, EncodedExample, Encoder, ExprTree, RawFeatures, Token};
use bplab::ir::{CalleeAttrs, EdgeLoopRelation, Opcode};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_token(rng: &mut ChaCha8Rng) -> Token {
    match rng.random_range(0..5) {
        // Extraction folds the Var opcode into Token::Var, so never emit it.
        0 => Token::Op(*Opcode::all().into_iter().filter(|&o| o != Opcode::Var).collect::<Vec<_>>().choose(rng).unwrap()),
        1 => Token::Const(rng.random_range(-3..4)),
        2 => Token::ConstUnknown,
        3 => Token::Var,
        _ => Token::Missing,
    }
}

pub fn random_raw(rng: &mut ChaCha8Rng) -> RawFeatures {
    let callees = ["abort", "log", "malloc", "free", "rare_a", "rare_b"];
    let files = ["a.c", "b.c", "c.c", "d.c"];
    let callee = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.4) {
            None
        } else {
            Some(callees.choose(rng).unwrap().to_string())
        }
    };
    let attrs = |rng: &mut ChaCha8Rng| {
        let mut a = CalleeAttrs::empty();
        for (flag, _) in CalleeAttrs::FLAGS {
            if rng.random_bool(0.3) {
                a.insert(flag);
            }
        }
        a
    };
    RawFeatures {
        expr: ExprTree {
            slots: std::array::from_fn(|_| random_token(rng)),
        },
        taken_callee: callee(rng),
        nottaken_callee: callee(rng),
        taken_callee_attrs: attrs(rng),
        nottaken_callee_attrs: attrs(rng),
        cfg_shape: *CfgShape::ALL.choose(rng).unwrap(),
        loop_depth: rng.random_range(0..4),
        loop_num_blocks: rng.random_range(0..20),
        loop_num_exit_blocks: rng.random_range(0..4),
        loop_num_exit_edges: rng.random_range(0..5),
        taken_edge_rel: *EdgeLoopRelation::ALL.choose(rng).unwrap(),
        nottaken_edge_rel: *EdgeLoopRelation::ALL.choose(rng).unwrap(),
        fn_num_instructions: rng.random_range(5..500),
        fn_num_blocks: rng.random_range(2..60),
        fn_num_edges: rng.random_range(1..90),
        file_name: files.choose(rng).unwrap().to_string(),
    }
}

/// An encoder fitted on `n` random feature records.
pub fn toy_encoder(rng: &mut ChaCha8Rng, n: usize) -> (Encoder, Vec<RawFeatures>) {
    let raws: Vec<RawFeatures> = (0..n).map(|_| random_raw(rng)).collect();
    (Encoder::fit(&raws, EmbedSpec::default()).unwrap(), raws)
}

/// A random input in the encoder's layout with arbitrary dense values.
pub fn random_encoded(rng: &mut ChaCha8Rng, enc: &Encoder) -> EncodedExample {
    EncodedExample {
        dense: (0..enc.dense_len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        embed: [
            rng.random_range(0..enc.callee_table_size()),
            rng.random_range(0..enc.callee_table_size()),
            rng.random_range(0..enc.file_table_size()),
        ],
    }
}

// ---------------------------------------------------------------------------
// Random CFGs and brute-force analysis oracles.

use bplab::ir::{build_function, BasicBlock, IrFunction, Terminator, Value};
use std::collections::BTreeSet;

/// A random CFG of `1..=max_blocks` blocks, every block reachable from the
/// entry. Blocks have zero, one or two distinct successors; edges may point
/// anywhere, so the result may be irreducible.
pub fn random_cfg(rng: &mut ChaCha8Rng, max_blocks: usize) -> IrFunction {
    let n = rng.random_range(1..=max_blocks);
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    // A random spanning tree keeps everything reachable.
    for i in 1..n {
        loop {
            let p = rng.random_range(0..i);
            if succ[p].len() < 2 {
                succ[p].push(i);
                break;
            }
        }
    }
    for s in succ.iter_mut() {
        let want = match rng.random_range(0..10) {
            0..=1 => 0,
            2..=4 => 1,
            _ => 2,
        }
        .min(n);
        while s.len() < want {
            let t = rng.random_range(0..n);
            if !s.contains(&t) {
                s.push(t);
            }
        }
    }
    let blocks = succ
        .iter()
        .enumerate()
        .map(|(id, s)| {
            let term = match s[..] {
                [] => Terminator::Return,
                [t] => Terminator::Jump(t),
                [t, nt] => Terminator::CondBranch {
                    cond: Value::Arg(0),
                    taken: t,
                    not_taken: nt,
                    expect: None,
                },
                _ => unreachable!(),
            };
            BasicBlock::new(id, vec![], term)
        })
        .collect();
    build_function("f", "cfg.c", blocks).expect("generated CFG is valid")
}

pub fn successor_lists(f: &IrFunction) -> Vec<Vec<usize>> {
    (0..f.num_blocks()).map(|b| f.successors(b)).collect()
}

/// Calls `visit` with every simple path from `from` that ends at `to`.
fn simple_paths(succ: &[Vec<usize>], from: usize, to: usize, visit: &mut impl FnMut(&[usize])) {
    fn go(succ: &[Vec<usize>], cur: usize, to: usize, path: &mut Vec<usize>, on: &mut Vec<bool>, visit: &mut impl FnMut(&[usize])) {
        path.push(cur);
        on[cur] = true;
        if cur == to {
            visit(path);
        } else {
            for &s in &succ[cur] {
                if !on[s] {
                    go(succ, s, to, path, on, visit);
                }
            }
        }
        on[cur] = false;
        path.pop();
    }
    let mut on = vec![false; succ.len()];
    go(succ, from, to, &mut Vec::new(), &mut on, visit);
}

/// `m[a][b]`: does `a` lie on every simple path from `root` to `b`?
/// Nodes with no such path are dominated by nothing.
pub fn brute_dominance(succ: &[Vec<usize>], root: usize) -> Vec<Vec<bool>> {
    let n = succ.len();
    let mut m = vec![vec![false; n]; n];
    for b in 0..n {
        let mut on_all = vec![true; n];
        let mut any = false;
        simple_paths(succ, root, b, &mut |path| {
            any = true;
            let on: BTreeSet<usize> = path.iter().copied().collect();
            for (a, flag) in on_all.iter_mut().enumerate() {
                *flag &= on.contains(&a);
            }
        });
        if any {
            for a in 0..n {
                m[a][b] = on_all[a];
            }
        }
    }
    m
}

/// The strict dominator of `b` dominated by all other strict dominators.
pub fn brute_idom(m: &[Vec<bool>], b: usize) -> Option<usize> {
    let strict: Vec<usize> = (0..m.len()).filter(|&a| a != b && m[a][b]).collect();
    strict.iter().copied().find(|&c| strict.iter().all(|&a| m[a][c]))
}

pub fn can_reach(succ: &[Vec<usize>], from: usize, avoid: Option<usize>) -> Vec<bool> {
    let mut seen = vec![false; succ.len()];
    if Some(from) == avoid {
        return seen;
    }
    let mut stack = vec![from];
    seen[from] = true;
    while let Some(v) = stack.pop() {
        for &s in &succ[v] {
            if !seen[s] && Some(s) != avoid {
                seen[s] = true;
                stack.push(s);
            }
        }
    }
    seen
}

/// Back edges `u -> h` where `h` dominates `u`, by brute force.
pub fn brute_back_edges(succ: &[Vec<usize>], dom: &[Vec<bool>]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (u, ss) in succ.iter().enumerate() {
        for &h in ss {
            if dom[h][u] {
                out.push((u, h));
            }
        }
    }
    out
}

/// Natural loops as `header -> body`: the header plus every block that
/// reaches a back-edge source without passing through the header.
pub fn brute_loops(succ: &[Vec<usize>], dom: &[Vec<bool>]) -> std::collections::BTreeMap<usize, BTreeSet<usize>> {
    let n = succ.len();
    let mut loops: std::collections::BTreeMap<usize, BTreeSet<usize>> = Default::default();
    for (u, h) in brute_back_edges(succ, dom) {
        let body = loops.entry(h).or_default();
        body.insert(h);
        for x in 0..n {
            if can_reach(succ, x, Some(h))[u] || x == u {
                body.insert(x);
            }
        }
    }
    loops
}

/// Every retreating DFS edge is a back edge.
pub fn is_reducible(succ: &[Vec<usize>], dom: &[Vec<bool>]) -> bool {
    fn dfs(succ: &[Vec<usize>], v: usize, state: &mut [u8], dom: &[Vec<bool>]) -> bool {
        state[v] = 1;
        for &s in &succ[v] {
            match state[s] {
                0 => {
                    if !dfs(succ, s, state, dom) {
                        return false;
                    }
                }
                1 if !dom[s][v] => return false,
                _ => {}
            }
        }
        state[v] = 2;
        true
    }
    let mut state = vec![0u8; succ.len()];
    dfs(succ, 0, &mut state, dom)
}

/// The post-dominance graph: blocks plus a virtual exit at index `n`.
/// Returns feed the exit; so does the lowest-numbered loop header among
/// blocks that cannot reach the exit (or the lowest such block when none
/// is a header), repeated until every block reaches the exit.
pub fn brute_exit_graph(succ: &[Vec<usize>], dom: &[Vec<bool>]) -> (Vec<Vec<usize>>, Vec<usize>) {
    let n = succ.len();
    let headers: BTreeSet<usize> = brute_back_edges(succ, dom).into_iter().map(|(_, h)| h).collect();
    let mut g: Vec<Vec<usize>> = succ.to_vec();
    g.push(Vec::new());
    for (b, s) in succ.iter().enumerate() {
        if s.is_empty() {
            g[b].push(n);
        }
    }
    let mut synthetic = Vec::new();
    loop {
        let stuck: Vec<usize> = (0..n).filter(|&b| !can_reach(&g, b, None)[n]).collect();
        let Some(&first) = stuck.first() else { break };
        let pick = stuck.iter().copied().find(|b| headers.contains(b)).unwrap_or(first);
        g[pick].push(n);
        synthetic.push(pick);
    }
    (g, synthetic)
}

/// `m[a][b]`: does `a` lie on every simple path from `b` to `exit`?
pub fn brute_postdominance(g: &[Vec<usize>], exit: usize) -> Vec<Vec<bool>> {
    let n = g.len();
    let mut m = vec![vec![false; n]; n];
    for b in 0..n {
        let mut on_all = vec![true; n];
        simple_paths(g, b, exit, &mut |path| {
            let on: BTreeSet<usize> = path.iter().copied().collect();
            for (a, flag) in on_all.iter_mut().enumerate() {
                *flag &= on.contains(&a);
            }
        });
        for a in 0..n {
            m[a][b] = on_all[a];
        }
    }
    m
}

/// Checks every CFG analysis of `f` against the brute-force oracles.
/// Loop checks only apply when `f` is reducible.
pub fn check_cfg_against_oracles(f: &IrFunction) -> Result<(), String> {
    use bplab::ir::{classify_edge, compute_dominators, compute_postdominators, control_dependent_blocks, find_natural_loops};

    let succ = successor_lists(f);
    let n = succ.len();
    let dom_m = brute_dominance(&succ, 0);
    let dom = compute_dominators(f);
    for b in 1..n {
        let want = brute_idom(&dom_m, b);
        if want != Some(dom.idom(b)) {
            return Err(format!("idom({b}): got {}, oracle {want:?}, cfg {succ:?}", dom.idom(b)));
        }
    }

    let (g, synthetic) = brute_exit_graph(&succ, &dom_m);
    let pdom = compute_postdominators(f);
    if pdom.virtual_exit() != n {
        return Err(format!("virtual exit {} != {n}", pdom.virtual_exit()));
    }
    if pdom.synthetic_exit_edges() != synthetic.as_slice() {
        return Err(format!("synthetic exits {:?} vs {synthetic:?}, cfg {succ:?}", pdom.synthetic_exit_edges()));
    }
    let pdom_m = brute_postdominance(&g, n);
    for b in 0..n {
        let want = brute_idom(&pdom_m, b);
        if want != Some(pdom.ipdom(b)) {
            return Err(format!("ipdom({b}): got {}, oracle {want:?}, cfg {succ:?}", pdom.ipdom(b)));
        }
    }

    for b in 0..n {
        if succ[b].len() != 2 {
            continue;
        }
        for &d in &succ[b] {
            let want: BTreeSet<usize> = (0..n).filter(|&x| pdom_m[x][d] && !pdom_m[x][b]).collect();
            let got = control_dependent_blocks(f, &pdom, (b, d));
            if got != want {
                return Err(format!("cd({b}->{d}): got {got:?}, oracle {want:?}, cfg {succ:?}"));
            }
        }
    }

    if !is_reducible(&succ, &dom_m) {
        return Ok(());
    }
    let forest = find_natural_loops(f, &dom);
    let want = brute_loops(&succ, &dom_m);
    let got: std::collections::BTreeMap<usize, BTreeSet<usize>> =
        forest.loops.iter().map(|l| (l.header, l.body.clone())).collect();
    if got != want || forest.loops.len() != want.len() {
        return Err(format!("loops: got {got:?}, oracle {want:?}, cfg {succ:?}"));
    }
    for l in &forest.loops {
        let enclosing: Vec<&BTreeSet<usize>> = want.values().filter(|b| b.is_superset(&l.body)).collect();
        if l.depth != enclosing.len() {
            return Err(format!("depth of loop {}: got {}, oracle {}", l.header, l.depth, enclosing.len()));
        }
        let parent = want
            .iter()
            .filter(|(_, b)| b.len() > l.body.len() && b.is_superset(&l.body))
            .min_by_key(|(_, b)| b.len())
            .map(|(h, _)| *h);
        if l.parent.map(|p| forest.loops[p].header) != parent {
            return Err(format!("parent of loop {}: got {:?}, oracle {parent:?}", l.header, l.parent));
        }
        let mut exits: Vec<(usize, usize)> = Vec::new();
        for &x in &l.body {
            for &s in &succ[x] {
                if !l.body.contains(&s) {
                    exits.push((x, s));
                }
            }
        }
        let mut got_exits = l.exit_edges.clone();
        got_exits.sort();
        exits.sort();
        let exit_blocks: BTreeSet<usize> = exits.iter().map(|e| e.1).collect();
        if got_exits != exits || l.exit_blocks != exit_blocks {
            return Err(format!("exits of loop {}: got {:?}, oracle {exits:?}", l.header, l.exit_edges));
        }
        let mut back: Vec<(usize, usize)> = l.back_edges.clone();
        back.sort();
        let mut want_back: Vec<(usize, usize)> =
            brute_back_edges(&succ, &dom_m).into_iter().filter(|e| e.1 == l.header).collect();
        want_back.sort();
        if back != want_back {
            return Err(format!("back edges of loop {}: got {back:?}, oracle {want_back:?}", l.header));
        }
    }

    for b in 0..n {
        if succ[b].len() != 2 {
            continue;
        }
        for &d in &succ[b] {
            let want = oracle_edge_relation(&dom_m, &want, (b, d));
            let got = classify_edge(&forest, (b, d));
            if got != want {
                return Err(format!("classify({b}->{d}): got {got:?}, oracle {want:?}, cfg {succ:?}"));
            }
        }
    }
    Ok(())
}

fn oracle_edge_relation(
    dom: &[Vec<bool>],
    loops: &std::collections::BTreeMap<usize, BTreeSet<usize>>,
    (src, dst): (usize, usize),
) -> EdgeLoopRelation {
    if loops.values().any(|b| b.contains(&src) && !b.contains(&dst)) {
        return EdgeLoopRelation::ExitEdge;
    }
    if loops.contains_key(&dst) && dom[dst][src] {
        return EdgeLoopRelation::BackEdge;
    }
    if let Some(target) = loops.get(&dst) {
        let inner = loops.values().filter(|b| b.contains(&src)).min_by_key(|b| b.len());
        let enters = match inner {
            None => true,
            Some(outer) => outer.len() > target.len() && outer.is_superset(target),
        };
        if enters {
            return EdgeLoopRelation::EntersInnerLoop;
        }
    }
    EdgeLoopRelation::SameLoop
}
