//! CFG analyses against brute-force path-enumeration oracles.

mod common;

use bplab::ir::{build_function, build_function_mapped, compute_dominators, find_natural_loops, EdgeLoopRelation, FunctionAnalyses};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn reducible_cfgs_match_oracles() {
    let (mut with_loops, mut with_synthetic, mut nested) = (0, 0, 0);
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < 1000 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        seed += 1;
        let f = random_cfg(&mut rng, 10);
        let succ = successor_lists(&f);
        if !is_reducible(&succ, &brute_dominance(&succ, 0)) {
            continue;
        }
        if let Err(e) = check_cfg_against_oracles(&f) {
            panic!("seed {}: {e}", seed - 1);
        }
        let a = FunctionAnalyses::compute(&f);
        with_loops += !a.loops.is_empty() as usize;
        with_synthetic += !a.pdom.synthetic_exit_edges().is_empty() as usize;
        nested += a.loops.loops.iter().any(|l| l.depth > 1) as usize;
        checked += 1;
    }
    // The generator must actually produce the interesting cases.
    assert!(with_loops > 200 && with_synthetic > 50 && nested > 20, "{with_loops} {with_synthetic} {nested}");
}

#[test]
fn irreducible_cfgs_match_dominance_oracles() {
    let mut checked = 0;
    let mut seed = 1_000_000u64;
    while checked < 200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        seed += 1;
        let f = random_cfg(&mut rng, 10);
        let succ = successor_lists(&f);
        if is_reducible(&succ, &brute_dominance(&succ, 0)) {
            continue;
        }
        if let Err(e) = check_cfg_against_oracles(&f) {
            panic!("seed {}: {e}", seed - 1);
        }
        checked += 1;
    }
}

#[test]
fn loop_partition_holds() {
    for seed in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_cfg(&mut rng, 10);
        let forest = find_natural_loops(&f, &compute_dominators(&f));
        for l in &forest.loops {
            assert!(l.body.contains(&l.header));
            assert!(l.back_edges.iter().all(|&(u, h)| h == l.header && l.body.contains(&u)));
            assert!(l.exit_edges.iter().all(|(s, d)| l.body.contains(s) && !l.body.contains(d)));
            assert!(l.exit_blocks.is_disjoint(&l.body));
            if let Some(p) = l.parent {
                let parent = &forest.loops[p];
                assert!(parent.body.is_superset(&l.body));
                assert_eq!(l.depth, parent.depth + 1);
            } else {
                assert_eq!(l.depth, 1);
            }
        }
    }
}

#[test]
fn every_branch_edge_gets_one_stable_category() {
    for seed in 0..300u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_cfg(&mut rng, 10);
        let a = FunctionAnalyses::compute(&f);
        let b = FunctionAnalyses::compute(&f);
        for br in f.branch_blocks() {
            for s in f.successors(br) {
                let rel = a.classify((br, s));
                assert!(EdgeLoopRelation::ALL.contains(&rel));
                assert_eq!(rel, b.classify((br, s)));
            }
        }
    }
}

#[test]
fn exit_wins_over_back_edge() {
    // 0 -> 1; 1 -> 2; 2 -> 2 | 1 ; 1 -> 3 ret. The edge 2->1 is the back edge
    // of the outer loop {1,2} and leaves the inner self-loop {2}.
    use bplab::ir::{BasicBlock, Terminator, Value};
    let br = |id, t, nt| {
        BasicBlock::new(
            id,
            vec![],
            Terminator::CondBranch { cond: Value::Arg(0), taken: t, not_taken: nt, expect: None },
        )
    };
    let (f, id) = build_function_mapped(
        "f",
        "x.c",
        vec![
            BasicBlock::new(0, vec![], Terminator::Jump(1)),
            br(1, 2, 3),
            br(2, 2, 1),
            BasicBlock::new(3, vec![], Terminator::Return),
        ],
    )
    .unwrap();
    let a = FunctionAnalyses::compute(&f);
    assert_eq!(a.classify((id[2], id[1])), EdgeLoopRelation::ExitEdge);
    assert_eq!(a.classify((id[2], id[2])), EdgeLoopRelation::BackEdge);
    assert_eq!(a.classify((id[1], id[2])), EdgeLoopRelation::EntersInnerLoop);
}

#[test]
fn rpo_renumbering_is_idempotent() {
    for seed in 0..300u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_cfg(&mut rng, 10);
        let again = build_function(f.name(), f.file_name(), f.blocks().to_vec()).unwrap();
        assert_eq!(f, again);
    }
}
