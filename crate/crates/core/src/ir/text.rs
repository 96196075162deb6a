//! Line-oriented text format for IR modules.
//!
//! ```text
//! func check_ptr file=src/util.cc
//! block 0:
//!   %0 = load arg0
//!   %1 = icmp eq %0 0
//!   br %1 %1 %2 expect=nottaken
//! block 1:
//!   %2 = call @log_error #cold
//!   jmp %2
//! block 2:
//!   ret
//! ```
//!
//! Values are `%<inst>`, `arg<k>` or decimal literals. Branch targets are
//! `%<block>`. A branch may carry a trailing `!weights <t> <nt>` annotation,
//! which the parser accepts and ignores.

use std::fmt::Write as _;

use thiserror::Error;

use super::{
    build_function_mapped, BasicBlock, BlockId, CalleeAttrs, Expect, FCmpPred, ICmpPred, Instruction, IrError,
    IrFunction, IrModule, Opcode, Terminator, Value,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{file}:{line}: {message}")]
pub struct ParseError {
    pub file: String,
    pub line: usize,
    pub message: String,
}

/// A parsed function plus, for every block (by new id), the zero-based line
/// index of its terminator in the source text.
#[derive(Debug, Clone)]
pub struct SourceFunction {
    pub function: IrFunction,
    pub terminator_lines: Vec<usize>,
}

struct PendingFunction {
    name: String,
    file: String,
    line: usize,
    blocks: Vec<BasicBlock>,
    term_lines: Vec<usize>,
    open: Option<(BlockId, Vec<Instruction>)>,
}

pub fn parse_module(text: &str, file: &str) -> Result<IrModule, ParseError> {
    Ok(IrModule {
        functions: parse_module_with_lines(text, file)?
            .into_iter()
            .map(|s| s.function)
            .collect(),
    })
}

pub fn parse_module_with_lines(text: &str, file: &str) -> Result<Vec<SourceFunction>, ParseError> {
    let err = |line: usize, message: String| ParseError {
        file: file.to_string(),
        line: line + 1,
        message,
    };
    let mut out = Vec::new();
    let mut cur: Option<PendingFunction> = None;

    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with(';') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "func" => {
                if let Some(p) = cur.take() {
                    out.push(finish(p).map_err(|(l, m)| err(l, m))?);
                }
                if tokens.len() != 3 || !tokens[2].starts_with("file=") {
                    return Err(err(ln, "expected `func <name> file=<path>`".into()));
                }
                cur = Some(PendingFunction {
                    name: tokens[1].to_string(),
                    file: tokens[2]["file=".len()..].to_string(),
                    line: ln,
                    blocks: Vec::new(),
                    term_lines: Vec::new(),
                    open: None,
                });
            }
            "block" => {
                let p = cur.as_mut().ok_or_else(|| err(ln, "block outside of a function".into()))?;
                if let Some((id, _)) = p.open {
                    return Err(err(ln, format!("block {id} has no terminator")));
                }
                let label = tokens
                    .get(1)
                    .and_then(|t| t.strip_suffix(':'))
                    .filter(|_| tokens.len() == 2)
                    .ok_or_else(|| err(ln, "expected `block <id>:`".into()))?;
                let id = label.parse().map_err(|_| err(ln, format!("bad block id `{label}`")))?;
                p.open = Some((id, Vec::new()));
            }
            first => {
                let p = cur.as_mut().ok_or_else(|| err(ln, "instruction outside of a function".into()))?;
                let Some((id, insts)) = p.open.as_mut() else {
                    return Err(err(ln, "instruction outside of a block".into()));
                };
                if first.starts_with('%') {
                    insts.push(parse_instruction(&tokens).map_err(|m| err(ln, m))?);
                } else {
                    let term = parse_terminator(&tokens).map_err(|m| err(ln, m))?;
                    let (id, insts) = (*id, std::mem::take(insts));
                    p.blocks.push(BasicBlock::new(id, insts, term));
                    p.term_lines.push(ln);
                    p.open = None;
                }
            }
        }
    }
    if let Some(p) = cur.take() {
        out.push(finish(p).map_err(|(l, m)| err(l, m))?);
    }
    Ok(out)
}

fn finish(p: PendingFunction) -> Result<SourceFunction, (usize, String)> {
    if let Some((id, _)) = p.open {
        return Err((p.line, format!("block {id} has no terminator")));
    }
    let (function, new_ids) =
        build_function_mapped(&p.name, &p.file, p.blocks).map_err(|e: IrError| (p.line, format!("function `{}`: {e}", p.name)))?;
    let mut terminator_lines = vec![0; new_ids.len()];
    for (pos, &new) in new_ids.iter().enumerate() {
        terminator_lines[new] = p.term_lines[pos];
    }
    Ok(SourceFunction {
        function,
        terminator_lines,
    })
}

fn parse_value(tok: &str) -> Result<Value, String> {
    if let Some(rest) = tok.strip_prefix('%') {
        rest.parse().map(Value::Inst).map_err(|_| format!("bad value `{tok}`"))
    } else if let Some(rest) = tok.strip_prefix("arg") {
        rest.parse().map(Value::Arg).map_err(|_| format!("bad argument `{tok}`"))
    } else {
        tok.parse().map(Value::Const).map_err(|_| format!("bad value `{tok}`"))
    }
}

fn parse_block_ref(tok: &str) -> Result<BlockId, String> {
    tok.strip_prefix('%')
        .and_then(|r| r.parse().ok())
        .ok_or_else(|| format!("bad block reference `{tok}`"))
}

fn parse_instruction(tokens: &[&str]) -> Result<Instruction, String> {
    if tokens.len() < 3 || tokens[1] != "=" {
        return Err("expected `%<id> = <opcode> ...`".into());
    }
    let id = match parse_value(tokens[0])? {
        Value::Inst(id) => id,
        _ => return Err(format!("bad instruction id `{}`", tokens[0])),
    };
    let mut rest = &tokens[3..];
    let opcode = match tokens[2] {
        "icmp" => {
            let pred = rest.first().ok_or("missing icmp predicate")?;
            let pred = ICmpPred::ALL
                .into_iter()
                .find(|p| p.mnemonic() == *pred)
                .ok_or_else(|| format!("unknown icmp predicate `{pred}`"))?;
            rest = &rest[1..];
            Opcode::ICmp(pred)
        }
        "fcmp" => {
            let pred = rest.first().ok_or("missing fcmp predicate")?;
            let pred = FCmpPred::ALL
                .into_iter()
                .find(|p| p.mnemonic() == *pred)
                .ok_or_else(|| format!("unknown fcmp predicate `{pred}`"))?;
            rest = &rest[1..];
            Opcode::FCmp(pred)
        }
        "call" => {
            let callee = rest
                .first()
                .and_then(|t| t.strip_prefix('@'))
                .ok_or("expected `call @<name>`")?;
            rest = &rest[1..];
            let mut attrs = CalleeAttrs::empty();
            while let Some(a) = rest.first().and_then(|t| t.strip_prefix('#')) {
                attrs.insert(CalleeAttrs::from_name(a).ok_or_else(|| format!("unknown attribute `#{a}`"))?);
                rest = &rest[1..];
            }
            let operands = rest.iter().map(|t| parse_value(t)).collect::<Result<_, _>>()?;
            return Ok(Instruction::call(id, callee, attrs, operands));
        }
        other => Opcode::all()
            .into_iter()
            .find(|op| !op.is_compare() && *op != Opcode::Call && op.base_mnemonic() == other)
            .ok_or_else(|| format!("unknown opcode `{other}`"))?,
    };
    let operands = rest.iter().map(|t| parse_value(t)).collect::<Result<_, _>>()?;
    Ok(Instruction::new(id, opcode, operands))
}

fn parse_terminator(tokens: &[&str]) -> Result<Terminator, String> {
    match tokens[0] {
        "ret" if tokens.len() == 1 => Ok(Terminator::Return),
        "jmp" if tokens.len() == 2 => Ok(Terminator::Jump(parse_block_ref(tokens[1])?)),
        "br" if tokens.len() >= 4 => {
            let cond = parse_value(tokens[1])?;
            let taken = parse_block_ref(tokens[2])?;
            let not_taken = parse_block_ref(tokens[3])?;
            let mut expect = None;
            let mut rest = &tokens[4..];
            if let Some(e) = rest.first().and_then(|t| t.strip_prefix("expect=")) {
                expect = Some(match e {
                    "taken" => Expect::Taken,
                    "nottaken" => Expect::NotTaken,
                    _ => return Err(format!("bad expect hint `{e}`")),
                });
                rest = &rest[1..];
            }
            match rest {
                [] => {}
                ["!weights", t, nt] if t.parse::<u64>().is_ok() && nt.parse::<u64>().is_ok() => {}
                _ => return Err(format!("unexpected tokens after branch: `{}`", rest.join(" "))),
            }
            Ok(Terminator::CondBranch {
                cond,
                taken,
                not_taken,
                expect,
            })
        }
        other => Err(format!("malformed terminator or unknown statement `{other}`")),
    }
}

pub fn print_instruction(inst: &Instruction) -> String {
    let mut s = format!("%{} = ", inst.id);
    match inst.opcode {
        Opcode::ICmp(p) => write!(s, "icmp {}", p.mnemonic()).unwrap(),
        Opcode::FCmp(p) => write!(s, "fcmp {}", p.mnemonic()).unwrap(),
        Opcode::Call => {
            write!(s, "call @{}", inst.callee.as_deref().unwrap_or("?")).unwrap();
            for name in inst.callee_attrs.names() {
                write!(s, " #{name}").unwrap();
            }
        }
        op => s.push_str(op.base_mnemonic()),
    }
    for v in &inst.operands {
        write!(s, " {v}").unwrap();
    }
    s
}

pub fn print_terminator(t: &Terminator) -> String {
    match t {
        Terminator::Return => "ret".to_string(),
        Terminator::Jump(b) => format!("jmp %{b}"),
        Terminator::CondBranch {
            cond,
            taken,
            not_taken,
            expect,
        } => {
            let mut s = format!("br {cond} %{taken} %{not_taken}");
            match expect {
                Some(Expect::Taken) => s.push_str(" expect=taken"),
                Some(Expect::NotTaken) => s.push_str(" expect=nottaken"),
                None => {}
            }
            s
        }
    }
}

pub fn print_function(f: &IrFunction) -> String {
    let mut s = format!("func {} file={}\n", f.name(), f.file_name());
    for b in f.blocks() {
        writeln!(s, "block {}:", b.id).unwrap();
        for inst in &b.instructions {
            writeln!(s, "  {}", print_instruction(inst)).unwrap();
        }
        writeln!(s, "  {}", print_terminator(&b.terminator)).unwrap();
    }
    s
}

pub fn print_module(m: &IrModule) -> String {
    let mut s = String::new();
    for (i, f) in m.functions.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        s.push_str(&print_function(f));
    }
    s
}

/// Rewrites the `br` lines of `text`, replacing any existing `!weights`
/// suffix with the weights returned by `weights(function index, block)`.
/// All other lines are copied unchanged.
pub fn annotate_branch_weights(
    text: &str,
    functions: &[SourceFunction],
    mut weights: impl FnMut(usize, BlockId) -> (u64, u64),
) -> String {
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    for (fi, sf) in functions.iter().enumerate() {
        for b in sf.function.branch_blocks() {
            let ln = sf.terminator_lines[b];
            let original = &lines[ln];
            let base = match original.find(" !weights") {
                Some(pos) => &original[..pos],
                None => original.trim_end(),
            };
            let (t, nt) = weights(fi, b);
            lines[ln] = format!("{base} !weights {t} {nt}");
        }
    }
    let mut out = lines.join("\n");
    if text.ends_with('\n') {
        out.push('\n');
    }
    out
}
