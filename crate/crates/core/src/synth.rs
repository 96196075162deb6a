//! Synthetic profiled corpora.
//!
//! Functions are built from structured statements (if/else, early returns,
//! error checks that call cold functions, do-while and while loops), so
//! every CFG is reducible. Each conditional branch gets a latent taken
//! probability that depends on its features:
//!
//! * ordinary compares draw from a corpus-wide table of condition templates
//!   whose probabilities follow a Beta distribution, shifted per file and
//!   per hot callee, plus a little per-branch noise;
//! * branches guarding cold calls go toward the call with probability
//!   U(0.001, 0.05);
//! * null checks and float equality are true with probability U(0.02, 0.15);
//! * loop branches stay in the loop with probability m/(m+1), where m is a
//!   geometric trip count whose mean grows with the loop bound constant.
//!
//! [`profile_module`] then executes each function by random walks.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Geometric, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::Profile;
use crate::ir::text::print_function;
use crate::ir::{
    build_function_mapped, BasicBlock, BlockId, CalleeAttrs, Expect, FCmpPred, ICmpPred, Instruction, IrError,
    IrFunction, IrModule, Opcode, Terminator, Value,
};

/// Maximum number of blocks executed in one profiling trial.
pub const STEP_CAP: u64 = 10_000;

const NUM_ARGS: u32 = 4;
const MAX_NESTING: usize = 3;
const BIG_CONST: i64 = 1 << 20;
const LATENT_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("generated function {name} is malformed: {source}")]
    Generator {
        name: String,
        #[source]
        source: IrError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_functions: usize,
    pub seed: u64,
    pub functions_per_file: usize,
    /// Chance that a statement is a loop (while nesting allows it).
    pub loop_prob: f64,
    pub max_loop_depth: usize,
    /// Chance that a non-loop statement is an error check.
    pub error_path_prob: f64,
    pub cold_callee_pool: Vec<String>,
    pub hot_callee_pool: Vec<String>,
    pub trip_count_mean: f64,
    pub trials_per_function: u64,
    /// Both shape parameters of the Beta distribution of template latents.
    pub beta_shape: f64,
    pub n_templates: usize,
    /// Standard deviation of the per-file logit shift.
    pub file_shift_sd: f64,
    /// Standard deviation of the per-branch logit noise.
    pub branch_noise_sd: f64,
    /// Upper bound on top-level statements per function.
    pub max_statements: usize,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_functions: 100,
            seed: 0,
            functions_per_file: 20,
            loop_prob: 0.15,
            max_loop_depth: 2,
            error_path_prob: 0.15,
            cold_callee_pool: strings(&["abort", "panic", "log_fatal", "report_error", "assert_fail"]),
            hot_callee_pool: strings(&[
                "memcpy",
                "strlen",
                "hash_lookup",
                "vec_push",
                "map_find",
                "str_cmp",
                "alloc_node",
                "free_node",
                "read_buf",
                "write_buf",
                "lock",
                "unlock",
            ]),
            trip_count_mean: 4.0,
            trials_per_function: 10_000,
            beta_shape: 0.4,
            n_templates: 150,
            file_shift_sd: 0.5,
            branch_noise_sd: 0.5,
            max_statements: 6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_functions == 0 {
            return bad("n_functions must be positive".into());
        }
        if self.functions_per_file == 0 {
            return bad("functions_per_file must be positive".into());
        }
        for (name, p) in [("loop_prob", self.loop_prob), ("error_path_prob", self.error_path_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name}={p} must lie in [0, 1]"));
            }
        }
        if self.max_loop_depth > 3 {
            return bad("max_loop_depth must be at most 3".into());
        }
        if self.cold_callee_pool.is_empty() || self.hot_callee_pool.is_empty() {
            return bad("callee pools must be non-empty".into());
        }
        if !(self.trip_count_mean >= 1.0 && self.trip_count_mean.is_finite()) {
            return bad("trip_count_mean must be at least 1".into());
        }
        if !(self.beta_shape > 0.0 && self.beta_shape.is_finite()) {
            return bad("beta_shape must be positive".into());
        }
        if self.n_templates == 0 {
            return bad("n_templates must be positive".into());
        }
        if !(self.file_shift_sd >= 0.0 && self.branch_noise_sd >= 0.0) {
            return bad("standard deviations must be nonnegative".into());
        }
        if self.max_statements == 0 {
            return bad("max_statements must be positive".into());
        }
        Ok(())
    }

    pub fn file_name(&self, function_index: usize) -> String {
        format!("file_{:04}.c", function_index / self.functions_per_file)
    }
}

/// Latent taken probability of every conditional branch, indexed by
/// function and block id. Non-branch blocks hold `None`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub functions: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Operand {
    Arg,
    Load,
    Arith(Opcode, i64),
    Const(i64),
    BigConst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Compare {
    I(ICmpPred),
    F(FCmpPred),
}

#[derive(Debug, Clone, Copy)]
struct Template {
    cmp: Compare,
    lhs: Operand,
    rhs: Operand,
    logit: f64,
}

struct Corpus {
    templates: Vec<Template>,
    hot_attrs: Vec<CalleeAttrs>,
    hot_shift: Vec<f64>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn clamp_latent(p: f64) -> f64 {
    p.clamp(LATENT_FLOOR, 1.0 - LATENT_FLOOR)
}

const ARITH_OPS: [Opcode; 7] = [
    Opcode::Add,
    Opcode::Sub,
    Opcode::Mul,
    Opcode::And,
    Opcode::Shl,
    Opcode::Shr,
    Opcode::Xor,
];
const SMALL_CONSTS: [i64; 10] = [0, 1, 2, 3, 4, 8, 10, 16, 32, -1];

fn random_operand(rng: &mut ChaCha8Rng, rhs: bool) -> Operand {
    let r: f64 = rng.random();
    if rhs {
        match r {
            r if r < 0.45 => Operand::Const(*SMALL_CONSTS.choose(rng).unwrap()),
            r if r < 0.55 => Operand::BigConst,
            r if r < 0.75 => Operand::Arg,
            _ => Operand::Load,
        }
    } else {
        match r {
            r if r < 0.25 => Operand::Arg,
            r if r < 0.5 => Operand::Load,
            _ => Operand::Arith(*ARITH_OPS.choose(rng).unwrap(), rng.random_range(1..9)),
        }
    }
}

fn build_corpus(cfg: &SynthConfig) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let beta = Beta::new(cfg.beta_shape, cfg.beta_shape).expect("validated shape");
    let icmp = [
        ICmpPred::Slt,
        ICmpPred::Sle,
        ICmpPred::Sgt,
        ICmpPred::Sge,
        ICmpPred::Ult,
        ICmpPred::Ugt,
        ICmpPred::Eq,
        ICmpPred::Ne,
    ];
    let mut seen = HashSet::new();
    let mut templates = Vec::with_capacity(cfg.n_templates);
    while templates.len() < cfg.n_templates {
        let cmp = if rng.random_bool(0.15) {
            Compare::F(*[FCmpPred::Olt, FCmpPred::Ogt].choose(&mut rng).unwrap())
        } else {
            Compare::I(*icmp.choose(&mut rng).unwrap())
        };
        let lhs = random_operand(&mut rng, false);
        let mut rhs = random_operand(&mut rng, true);
        // Keep pointer-vs-null compares out of the generic templates; they
        // have their own statement kind.
        if matches!(cmp, Compare::I(ICmpPred::Eq | ICmpPred::Ne)) && lhs == Operand::Load && rhs == Operand::Const(0) {
            rhs = Operand::Const(1);
        }
        let p = clamp_latent(beta.sample(&mut rng)).clamp(1e-4, 1.0 - 1e-4);
        // The per-template draw is consumed even for duplicates so the
        // table only depends on the seed.
        if seen.insert((cmp, lhs, rhs)) {
            templates.push(Template {
                cmp,
                lhs,
                rhs,
                logit: logit(p),
            });
        }
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let hot_shift = cfg.hot_callee_pool.iter().map(|_| normal.sample(&mut rng)).collect();
    let hot_attrs = cfg
        .hot_callee_pool
        .iter()
        .map(|_| match rng.random_range(0..4) {
            0 => CalleeAttrs::INLINE,
            1 => CalleeAttrs::ALWAYS_INLINE,
            2 => CalleeAttrs::NOINLINE,
            _ => CalleeAttrs::empty(),
        })
        .collect();
    Corpus {
        templates,
        hot_attrs,
        hot_shift,
    }
}

fn file_shift(cfg: &SynthConfig, file_index: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX - file_index as u64);
    Normal::new(0.0, cfg.file_shift_sd.max(0.0))
        .expect("finite sd")
        .sample(&mut rng)
}

struct Pending {
    insts: Vec<Instruction>,
    term: Option<Terminator>,
}

struct FnGen<'a> {
    cfg: &'a SynthConfig,
    corpus: &'a Corpus,
    rng: ChaCha8Rng,
    file_shift: f64,
    blocks: Vec<Pending>,
    truth: Vec<Option<f64>>,
    next_inst: usize,
    loop_depth: usize,
}

impl<'a> FnGen<'a> {
    fn new_block(&mut self) -> BlockId {
        self.blocks.push(Pending {
            insts: Vec::new(),
            term: None,
        });
        self.truth.push(None);
        self.blocks.len() - 1
    }

    fn emit(&mut self, b: BlockId, opcode: Opcode, operands: Vec<Value>) -> Value {
        let id = self.next_inst;
        self.next_inst += 1;
        self.blocks[b].insts.push(Instruction::new(id, opcode, operands));
        Value::Inst(id)
    }

    fn emit_call(&mut self, b: BlockId, callee: &str, attrs: CalleeAttrs) {
        let id = self.next_inst;
        self.next_inst += 1;
        let args = (0..self.rng.random_range(0..3)).map(|_| self.arg()).collect();
        self.blocks[b].insts.push(Instruction::call(id, callee, attrs, args));
    }

    fn arg(&mut self) -> Value {
        Value::Arg(self.rng.random_range(0..NUM_ARGS))
    }

    fn terminate(&mut self, b: BlockId, t: Terminator) {
        debug_assert!(self.blocks[b].term.is_none());
        self.blocks[b].term = Some(t);
    }

    fn branch(&mut self, b: BlockId, cond: Value, taken: BlockId, not_taken: BlockId, p_true: f64, expect: Option<Expect>) {
        self.terminate(
            b,
            Terminator::CondBranch {
                cond,
                taken,
                not_taken,
                expect,
            },
        );
        self.truth[b] = Some(clamp_latent(p_true));
    }

    fn noise(&mut self) -> f64 {
        let sd = self.cfg.branch_noise_sd;
        if sd == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, sd).expect("finite sd").sample(&mut self.rng)
    }

    fn filler(&mut self, b: BlockId) {
        let n = self.rng.random_range(1..4);
        let mut last: Option<Value> = None;
        for _ in 0..n {
            let op = *[
                Opcode::Add,
                Opcode::Sub,
                Opcode::Mul,
                Opcode::Xor,
                Opcode::And,
                Opcode::Or,
                Opcode::Shl,
                Opcode::Load,
                Opcode::Select,
                Opcode::Div,
            ]
            .choose(&mut self.rng)
            .unwrap();
            let a = match last {
                Some(v) if self.rng.random_bool(0.6) => v,
                _ => self.arg(),
            };
            let operands = match op {
                Opcode::Load => vec![a],
                Opcode::Select => vec![a, self.arg(), Value::Const(self.rng.random_range(0..4))],
                _ if self.rng.random_bool(0.5) => vec![a, Value::Const(self.rng.random_range(1..100))],
                _ => vec![a, self.arg()],
            };
            last = Some(self.emit(b, op, operands));
        }
    }

    fn operand(&mut self, b: BlockId, o: Operand) -> Value {
        match o {
            Operand::Arg => self.arg(),
            Operand::Load => {
                let a = self.arg();
                self.emit(b, Opcode::Load, vec![a])
            }
            Operand::Arith(op, k) => {
                let a = self.arg();
                let x = self.emit(b, Opcode::Load, vec![a]);
                self.emit(b, op, vec![x, Value::Const(k)])
            }
            Operand::Const(k) => Value::Const(k),
            Operand::BigConst => Value::Const(BIG_CONST + self.rng.random_range(0..1000)),
        }
    }

    /// Emits a random template compare into `b`; returns the condition and
    /// the template's base logit plus file shift and noise.
    fn template_cond(&mut self, b: BlockId) -> (Value, f64) {
        let t = *self.corpus.templates.choose(&mut self.rng).unwrap();
        let lhs = self.operand(b, t.lhs);
        let rhs = self.operand(b, t.rhs);
        let op = match t.cmp {
            Compare::I(p) => Opcode::ICmp(p),
            Compare::F(p) => Opcode::FCmp(p),
        };
        let cond = self.emit(b, op, vec![lhs, rhs]);
        let z = t.logit + self.file_shift + self.noise();
        (cond, z)
    }

    fn body(&mut self, cur: BlockId, depth: usize) -> BlockId {
        let n = self.rng.random_range(1..=3);
        self.seq(cur, n, depth)
    }

    fn seq(&mut self, mut cur: BlockId, n: usize, depth: usize) -> BlockId {
        for _ in 0..n {
            cur = self.stmt(cur, depth);
        }
        cur
    }

    fn stmt(&mut self, cur: BlockId, depth: usize) -> BlockId {
        if depth >= MAX_NESTING {
            self.filler(cur);
            return cur;
        }
        if self.loop_depth < self.cfg.max_loop_depth && self.rng.random_bool(self.cfg.loop_prob) {
            return if self.rng.random_bool(0.5) {
                self.do_while(cur, depth)
            } else {
                self.while_loop(cur, depth)
            };
        }
        if self.rng.random_bool(self.cfg.error_path_prob) {
            return self.error_check(cur);
        }
        match self.rng.random_range(0..11) {
            0..=2 => self.if_then(cur, depth),
            3..=4 => self.if_else(cur, depth),
            5..=6 => self.hot_call(cur),
            7 => self.null_check(cur),
            8 => self.float_eq(cur),
            9 => self.early_return(cur),
            _ => {
                self.filler(cur);
                cur
            }
        }
    }

    fn if_then(&mut self, cur: BlockId, depth: usize) -> BlockId {
        let (cond, z) = self.template_cond(cur);
        let then = self.new_block();
        let join = self.new_block();
        self.filler(then);
        let end = self.body(then, depth + 1);
        self.terminate(end, Terminator::Jump(join));
        self.triangle(cur, cond, then, join, sigmoid(z));
        join
    }

    fn if_else(&mut self, cur: BlockId, depth: usize) -> BlockId {
        let (cond, z) = self.template_cond(cur);
        let a = self.new_block();
        let b = self.new_block();
        let join = self.new_block();
        for side in [a, b] {
            self.filler(side);
            let end = self.body(side, depth + 1);
            self.terminate(end, Terminator::Jump(join));
        }
        self.branch(cur, cond, a, b, sigmoid(z), None);
        join
    }

    fn hot_call(&mut self, cur: BlockId) -> BlockId {
        let (cond, z) = self.template_cond(cur);
        let k = self.rng.random_range(0..self.cfg.hot_callee_pool.len());
        let side = self.new_block();
        let join = self.new_block();
        for _ in 0..self.rng.random_range(1..3) {
            let name = self.cfg.hot_callee_pool[k].clone();
            self.emit_call(side, &name, self.corpus.hot_attrs[k]);
        }
        if self.rng.random_bool(0.5) {
            self.filler(side);
        }
        self.terminate(side, Terminator::Jump(join));
        // The callee's shift pushes toward (or away from) the call side,
        // whichever edge the condition puts it on.
        let shift = self.corpus.hot_shift[k];
        if self.rng.random_bool(0.5) {
            self.branch(cur, cond, side, join, sigmoid(z + shift), None);
        } else {
            self.branch(cur, cond, join, side, sigmoid(z - shift), None);
        }
        join
    }

    fn null_compare(&mut self, b: BlockId) -> (Value, bool) {
        let a = self.arg();
        let p = self.emit(b, Opcode::Load, vec![a]);
        let eq = self.rng.random_bool(0.5);
        let pred = if eq { ICmpPred::Eq } else { ICmpPred::Ne };
        (self.emit(b, Opcode::ICmp(pred), vec![p, Value::Const(0)]), eq)
    }

    fn error_check(&mut self, cur: BlockId) -> BlockId {
        let err = self.new_block();
        let cont = self.new_block();
        let q = self.rng.random_range(0.001..0.05);
        let expect = self.rng.random_bool(0.3);
        let (cond, err_on_true) = if self.rng.random_bool(0.5) {
            let (c, eq) = self.null_compare(cur);
            (c, eq)
        } else {
            let (c, _) = self.template_cond(cur);
            (c, self.rng.random_bool(0.5))
        };
        if self.rng.random_bool(0.5) {
            self.filler(err);
        }
        let k = self.rng.random_range(0..self.cfg.cold_callee_pool.len());
        let name = self.cfg.cold_callee_pool[k].clone();
        self.emit_call(err, &name, CalleeAttrs::COLD | CalleeAttrs::NOINLINE);
        if self.rng.random_bool(0.6) {
            self.terminate(err, Terminator::Return);
        } else {
            self.terminate(err, Terminator::Jump(cont));
        }
        if err_on_true {
            self.branch(cur, cond, err, cont, q, expect.then_some(Expect::NotTaken));
        } else {
            self.branch(cur, cond, cont, err, 1.0 - q, expect.then_some(Expect::Taken));
        }
        cont
    }

    fn null_check(&mut self, cur: BlockId) -> BlockId {
        let (cond, eq) = self.null_compare(cur);
        let p_null = self.rng.random_range(0.02..0.15);
        let p_true = if eq { p_null } else { 1.0 - p_null };
        let side = self.new_block();
        let join = self.new_block();
        self.filler(side);
        self.terminate(side, Terminator::Jump(join));
        self.triangle(cur, cond, side, join, p_true);
        join
    }

    fn float_eq(&mut self, cur: BlockId) -> BlockId {
        let a = self.arg();
        let x = self.emit(cur, Opcode::Load, vec![a]);
        let y = self.arg();
        let oeq = self.rng.random_bool(0.5);
        let pred = if oeq { FCmpPred::Oeq } else { FCmpPred::One };
        let cond = self.emit(cur, Opcode::FCmp(pred), vec![x, y]);
        let p_eq = self.rng.random_range(0.01..0.15);
        let p_true = if oeq { p_eq } else { 1.0 - p_eq };
        let side = self.new_block();
        let join = self.new_block();
        self.filler(side);
        self.terminate(side, Terminator::Jump(join));
        self.triangle(cur, cond, side, join, p_true);
        join
    }

    /// Branches on `cond` between `side` and `join`, with `side` on the
    /// taken edge half of the time. `p_true` is the probability of `cond`.
    fn triangle(&mut self, cur: BlockId, cond: Value, side: BlockId, join: BlockId, p_true: f64) {
        if self.rng.random_bool(0.5) {
            self.branch(cur, cond, side, join, p_true, None);
        } else {
            self.branch(cur, cond, join, side, p_true, None);
        }
    }

    fn early_return(&mut self, cur: BlockId) -> BlockId {
        let (cond, z) = self.template_cond(cur);
        let ret = self.new_block();
        let cont = self.new_block();
        if self.rng.random_bool(0.5) {
            self.filler(ret);
        }
        self.terminate(ret, Terminator::Return);
        self.triangle(cur, cond, ret, cont, sigmoid(z));
        cont
    }

    /// Emits `load; add 1; icmp <pred> K` and returns the condition and the
    /// probability of staying in the loop.
    fn loop_cond(&mut self, b: BlockId, stay_on_true: bool) -> (Value, f64) {
        const BOUNDS: [(i64, f64); 6] = [(4, 0.5), (8, 0.75), (16, 1.0), (32, 1.5), (64, 2.0), (BIG_CONST, 1.25)];
        let (k, factor) = *BOUNDS.choose(&mut self.rng).unwrap();
        let k = if k == BIG_CONST {
            BIG_CONST + self.rng.random_range(0..1000)
        } else {
            k
        };
        let a = self.arg();
        let x = self.emit(b, Opcode::Load, vec![a]);
        let i = self.emit(b, Opcode::Add, vec![x, Value::Const(1)]);
        let pred = if stay_on_true {
            *[ICmpPred::Slt, ICmpPred::Ult, ICmpPred::Ne].choose(&mut self.rng).unwrap()
        } else {
            *[ICmpPred::Sge, ICmpPred::Uge, ICmpPred::Eq].choose(&mut self.rng).unwrap()
        };
        let cond = self.emit(b, Opcode::ICmp(pred), vec![i, Value::Const(k)]);
        let mean = (self.cfg.trip_count_mean * factor).max(1.0);
        let m = 1.0 + Geometric::new(1.0 / mean).expect("valid p").sample(&mut self.rng) as f64;
        (cond, m / (m + 1.0))
    }

    fn do_while(&mut self, cur: BlockId, depth: usize) -> BlockId {
        let header = self.new_block();
        self.terminate(cur, Terminator::Jump(header));
        self.filler(header);
        self.loop_depth += 1;
        let latch = self.body(header, depth + 1);
        self.loop_depth -= 1;
        let exit = self.new_block();
        let stay_on_true = self.rng.random_bool(0.7);
        let (cond, p_stay) = self.loop_cond(latch, stay_on_true);
        if stay_on_true {
            self.branch(latch, cond, header, exit, p_stay, None);
        } else {
            self.branch(latch, cond, exit, header, 1.0 - p_stay, None);
        }
        exit
    }

    fn while_loop(&mut self, cur: BlockId, depth: usize) -> BlockId {
        let header = self.new_block();
        self.terminate(cur, Terminator::Jump(header));
        let body = self.new_block();
        let exit = self.new_block();
        let stay_on_true = self.rng.random_bool(0.7);
        let (cond, p_stay) = self.loop_cond(header, stay_on_true);
        if stay_on_true {
            self.branch(header, cond, body, exit, p_stay, None);
        } else {
            self.branch(header, cond, exit, body, 1.0 - p_stay, None);
        }
        self.filler(body);
        self.loop_depth += 1;
        let end = self.body(body, depth + 1);
        self.loop_depth -= 1;
        self.terminate(end, Terminator::Jump(header));
        exit
    }
}

fn function_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn generate_function(
    cfg: &SynthConfig,
    corpus: &Corpus,
    index: usize,
) -> Result<(IrFunction, Vec<Option<f64>>), SynthError> {
    let mut g = FnGen {
        cfg,
        corpus,
        rng: function_rng(cfg.seed, index),
        file_shift: file_shift(cfg, index / cfg.functions_per_file),
        blocks: Vec::new(),
        truth: Vec::new(),
        next_inst: 0,
        loop_depth: 0,
    };
    let entry = g.new_block();
    g.filler(entry);
    let n = g.rng.random_range(1..=cfg.max_statements);
    let last = g.seq(entry, n, 0);
    g.terminate(last, Terminator::Return);

    let name = format!("fn_{index:05}");
    let blocks = g
        .blocks
        .into_iter()
        .enumerate()
        .map(|(id, p)| BasicBlock::new(id, p.insts, p.term.expect("every block terminated")))
        .collect();
    let (f, map) = build_function_mapped(&name, &cfg.file_name(index), blocks)
        .map_err(|source| SynthError::Generator { name, source })?;
    let mut truth = vec![None; f.num_blocks()];
    for (pos, t) in g.truth.into_iter().enumerate() {
        truth[map[pos]] = t;
    }
    Ok((f, truth))
}

/// Generates `cfg.n_functions` functions. Output only depends on the config.
pub fn generate_module(cfg: &SynthConfig) -> Result<(IrModule, GroundTruth), SynthError> {
    cfg.validate()?;
    let corpus = build_corpus(cfg);
    let results: Vec<_> = (0..cfg.n_functions)
        .into_par_iter()
        .map(|i| generate_function(cfg, &corpus, i))
        .collect();
    let mut module = IrModule::default();
    let mut truth = GroundTruth::default();
    for r in results {
        let (f, t) = r?;
        module.functions.push(f);
        truth.functions.push(t);
    }
    Ok((module, truth))
}

#[derive(Clone, Copy)]
enum Step {
    Branch(BlockId, BlockId, f64),
    Jump(BlockId),
    Return,
}

/// Taken/not-taken tallies per block after `trials` random walks from the
/// entry. Each walk stops at a return or after [`STEP_CAP`] blocks.
pub fn profile_function(f: &IrFunction, truth: &[Option<f64>], trials: u64, rng: &mut ChaCha8Rng) -> Vec<(u64, u64)> {
    assert_eq!(truth.len(), f.num_blocks(), "ground truth does not cover {}", f.name());
    let steps: Vec<Step> = f
        .blocks()
        .iter()
        .map(|b| match b.terminator {
            Terminator::CondBranch { taken, not_taken, .. } => Step::Branch(
                taken,
                not_taken,
                truth[b.id].unwrap_or_else(|| panic!("no latent for {}", f.branch_id(b.id))),
            ),
            Terminator::Jump(t) => Step::Jump(t),
            Terminator::Return => Step::Return,
        })
        .collect();
    let mut counts = vec![(0u64, 0u64); f.num_blocks()];
    for _ in 0..trials {
        let mut b = f.entry();
        for _ in 0..STEP_CAP {
            match steps[b] {
                Step::Branch(t, nt, p) => {
                    if rng.random::<f64>() < p {
                        counts[b].0 += 1;
                        b = t;
                    } else {
                        counts[b].1 += 1;
                        b = nt;
                    }
                }
                Step::Jump(t) => b = t,
                Step::Return => break,
            }
        }
    }
    counts
}

/// Profiles every function with its own generator stream derived from
/// `(seed, function index)`. Every conditional branch is listed, including
/// ones that never executed.
pub fn profile_module(module: &IrModule, truth: &GroundTruth, trials: u64, seed: u64) -> Profile {
    assert_eq!(module.functions.len(), truth.functions.len(), "ground truth does not cover the module");
    let per_fn: Vec<Vec<(String, (u64, u64))>> = module
        .functions
        .par_iter()
        .zip(truth.functions.par_iter())
        .enumerate()
        .map(|(i, (f, t))| {
            let mut rng = function_rng(seed ^ 0x9e37_79b9_7f4a_7c15, i);
            let counts = profile_function(f, t, trials, &mut rng);
            f.branch_blocks().map(|b| (f.branch_id(b), counts[b])).collect()
        })
        .collect();
    per_fn.into_iter().flatten().collect()
}

/// IR text per file name, functions in module order.
pub fn module_files(module: &IrModule) -> BTreeMap<String, String> {
    let mut files: BTreeMap<String, String> = BTreeMap::new();
    for f in &module.functions {
        let text = files.entry(f.file_name().to_string()).or_default();
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&print_function(f));
    }
    files
}

/// Writes one `.ir` file per source file, `profile.csv` and, when given,
/// `truth.csv` into `dir`.
pub fn write_corpus(dir: &Path, module: &IrModule, profile: &Profile, truth: Option<&GroundTruth>) -> Result<(), SynthError> {
    let io = |path: &Path, source| SynthError::Io {
        path: path.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for (file, text) in module_files(module) {
        let stem = file.rsplit_once('.').map_or(file.as_str(), |(s, _)| s);
        let path = dir.join(format!("{stem}.ir"));
        std::fs::write(&path, text).map_err(|e| io(&path, e))?;
    }
    let path = dir.join("profile.csv");
    crate::dataset::write_profile(profile, &path).map_err(|e| match e {
        crate::dataset::DatasetError::Io { source, .. } => io(&path, source),
        other => io(&path, std::io::Error::other(other.to_string())),
    })?;
    if let Some(truth) = truth {
        let mut text = String::from("branch_id,latent\n");
        for (f, t) in module.functions.iter().zip(&truth.functions) {
            for b in f.branch_blocks() {
                if let Some(p) = t[b] {
                    let _ = writeln!(text, "{},{p:?}", f.branch_id(b));
                }
            }
        }
        let path = dir.join("truth.csv");
        std::fs::write(&path, text).map_err(|e| io(&path, e))?;
    }
    Ok(())
}
