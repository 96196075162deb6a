//! Plain-text model files.
//!
//! ```text
//! BPMODEL v1
//! [spec]
//! hidden_layers=5
//! ...
//! [encoder.numeric]
//! loop_depth,1.25,0.5
//! [layer.0.W]
//! 212 64
//! 0.013,-0.2,...
//! [end]
//! ```
//!
//! Matrices start with a `rows cols` line followed by one comma-separated
//! line per row. Layer weights are stored as `inputs x outputs`. Floats use
//! Rust's shortest round-trip formatting, so a save/load cycle is exact.
//! Vocabulary entries are percent-escaped for `%`, `[` and line breaks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{LossKind, Model, ModelError, ModelSpec, Params};
use crate::features::{Encoder, NumericStat, OneHotGroup, NUMERIC_FEATURES};

pub const MODEL_MAGIC: &str = "BPMODEL v1";

const EXPR_SLOTS: usize = 7;

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '%' => out.push_str("%25"),
            '[' => out.push_str("%5B"),
            '\n' => out.push_str("%0A"),
            '\r' => out.push_str("%0D"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(pos) = rest.find('%') {
        out.push_str(&rest[..pos]);
        let code = rest.get(pos + 1..pos + 3)?;
        out.push(match code {
            "25" => '%',
            "5B" => '[',
            "0A" => '\n',
            "0D" => '\r',
            _ => return None,
        });
        rest = &rest[pos + 3..];
    }
    out.push_str(rest);
    Some(out)
}

fn write_matrix(out: &mut String, name: &str, rows: usize, cols: usize, data: &[f64]) {
    debug_assert_eq!(rows * cols, data.len());
    let _ = writeln!(out, "[{name}]\n{rows} {cols}");
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:?}");
        }
        out.push('\n');
    }
}

/// Serializes the model. Adagrad accumulators are not saved.
pub fn write_model(model: &Model) -> String {
    let mut out = String::new();
    let s = &model.spec;
    let _ = writeln!(out, "{MODEL_MAGIC}\n[spec]");
    let _ = writeln!(out, "hidden_layers={}", s.hidden_layers);
    let _ = writeln!(out, "hidden_width={}", s.hidden_width);
    let _ = writeln!(out, "callee_embed_dim={}", s.callee_embed_dim);
    let _ = writeln!(out, "file_embed_dim={}", s.file_embed_dim);
    let _ = writeln!(out, "loss={}", s.loss.name());
    let _ = writeln!(out, "batch_size={}", s.batch_size);
    let _ = writeln!(out, "epochs={}", s.epochs);
    let _ = writeln!(out, "learning_rate={:?}", s.learning_rate);
    let _ = writeln!(out, "adagrad_epsilon={:?}", s.adagrad_epsilon);
    let _ = writeln!(out, "adagrad_initial_accumulator={:?}", s.adagrad_initial_accumulator);
    let _ = writeln!(out, "seed={}", s.seed);
    let _ = writeln!(out, "weighted={}", s.weighted);

    let enc = &model.encoder;
    out.push_str("[encoder.numeric]\n");
    for n in enc.numeric_stats() {
        let _ = writeln!(out, "{},{:?},{:?}", n.name, n.mean, n.std);
    }
    out.push_str("[encoder.dropped]\n");
    for d in enc.dropped() {
        let _ = writeln!(out, "{d}");
    }
    for (k, g) in enc.expr_groups().iter().enumerate() {
        let _ = writeln!(out, "[encoder.expr.{k}]");
        for c in &g.categories {
            let _ = writeln!(out, "{}", escape(c));
        }
    }
    for (name, vocab) in [("callee", enc.callee_vocab()), ("file", enc.file_vocab())] {
        let _ = writeln!(out, "[encoder.vocab.{name}]");
        for v in vocab {
            let _ = writeln!(out, "{}", escape(v));
        }
    }

    let p = &model.params;
    write_matrix(&mut out, "embed.callee", enc.callee_table_size(), s.callee_embed_dim, &p.callee_embed);
    write_matrix(&mut out, "embed.file", enc.file_table_size(), s.file_embed_dim, &p.file_embed);
    for (k, l) in p.layers.iter().enumerate() {
        write_matrix(&mut out, &format!("layer.{k}.W"), l.inputs, l.outputs, &l.w);
        write_matrix(&mut out, &format!("layer.{k}.b"), 1, l.outputs, &l.b);
    }
    out.push_str("[end]\n");
    out
}

pub fn save_model(model: &Model, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, write_model(model)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<Model, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_model(&text)
}

struct Sections<'a> {
    map: BTreeMap<&'a str, Vec<&'a str>>,
}

impl<'a> Sections<'a> {
    fn get(&self, name: &str) -> Result<&[&'a str], ModelError> {
        self.map
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| corrupt(name))
    }
}

fn corrupt(section: &str) -> ModelError {
    ModelError::CorruptModel(section.to_string())
}

fn split_sections(body: &str) -> Result<Sections<'_>, ModelError> {
    let mut map: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut current: Option<&str> = None;
    for line in body.lines() {
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            if map.insert(name, Vec::new()).is_some() {
                return Err(corrupt(name));
            }
            current = Some(name);
        } else {
            let name = current.ok_or_else(|| corrupt("header"))?;
            map.get_mut(name).expect("section inserted").push(line);
        }
    }
    if !map.contains_key("end") {
        // Anything missing its terminator was cut short; blame the last
        // section that made it into the file.
        return Err(corrupt(current.unwrap_or("header")));
    }
    Ok(Sections { map })
}

fn parse_spec(lines: &[&str]) -> Option<ModelSpec> {
    let kv: BTreeMap<&str, &str> = lines.iter().map(|l| l.split_once('=')).collect::<Option<_>>()?;
    let get = |k: &str| kv.get(k).copied();
    Some(ModelSpec {
        hidden_layers: get("hidden_layers")?.parse().ok()?,
        hidden_width: get("hidden_width")?.parse().ok()?,
        callee_embed_dim: get("callee_embed_dim")?.parse().ok()?,
        file_embed_dim: get("file_embed_dim")?.parse().ok()?,
        loss: LossKind::from_name(get("loss")?)?,
        batch_size: get("batch_size")?.parse().ok()?,
        epochs: get("epochs")?.parse().ok()?,
        learning_rate: get("learning_rate")?.parse().ok()?,
        adagrad_epsilon: get("adagrad_epsilon")?.parse().ok()?,
        adagrad_initial_accumulator: get("adagrad_initial_accumulator")?.parse().ok()?,
        seed: get("seed")?.parse().ok()?,
        weighted: get("weighted")?.parse().ok()?,
    })
}

fn parse_numeric(lines: &[&str]) -> Option<Vec<NumericStat>> {
    lines
        .iter()
        .map(|l| {
            let mut it = l.split(',');
            let name = it.next()?;
            if !NUMERIC_FEATURES.contains(&name) {
                return None;
            }
            let mean = it.next()?.parse().ok()?;
            let std = it.next()?.parse().ok()?;
            if it.next().is_some() {
                return None;
            }
            Some(NumericStat {
                name: name.to_string(),
                mean,
                std,
            })
        })
        .collect()
}

fn parse_strings(lines: &[&str]) -> Option<Vec<String>> {
    lines.iter().map(|l| unescape(l)).collect()
}

fn parse_matrix(sections: &Sections, name: &str, rows: usize, cols: usize) -> Result<Vec<f64>, ModelError> {
    let lines = sections.get(name)?;
    let bad = || corrupt(name);
    let (shape, data) = lines.split_first().ok_or_else(bad)?;
    let (r, c) = shape.split_once(' ').ok_or_else(bad)?;
    if r.parse::<usize>().ok() != Some(rows) || c.parse::<usize>().ok() != Some(cols) || data.len() != rows {
        return Err(bad());
    }
    let mut out = Vec::with_capacity(rows * cols);
    for line in data {
        let before = out.len();
        for v in line.split(',') {
            out.push(v.parse::<f64>().map_err(|_| bad())?);
        }
        if out.len() - before != cols {
            return Err(bad());
        }
    }
    Ok(out)
}

pub fn read_model(text: &str) -> Result<Model, ModelError> {
    let (magic, body) = text.split_once('\n').unwrap_or((text, ""));
    if magic.trim_end() != MODEL_MAGIC {
        return Err(ModelError::VersionMismatch(magic.chars().take(40).collect()));
    }
    let sections = split_sections(body)?;

    let spec = parse_spec(sections.get("spec")?).ok_or_else(|| corrupt("spec"))?;
    spec.validate().map_err(|_| corrupt("spec"))?;

    let numeric = parse_numeric(sections.get("encoder.numeric")?).ok_or_else(|| corrupt("encoder.numeric"))?;
    let dropped = parse_strings(sections.get("encoder.dropped")?).ok_or_else(|| corrupt("encoder.dropped"))?;
    let mut expr_groups = Vec::with_capacity(EXPR_SLOTS);
    for k in 0..EXPR_SLOTS {
        let name = format!("encoder.expr.{k}");
        let cats = parse_strings(sections.get(&name)?).ok_or_else(|| corrupt(&name))?;
        if cats.is_empty() {
            return Err(corrupt(&name));
        }
        expr_groups.push(OneHotGroup::new(&format!("expr_slot_{k}"), cats));
    }
    let callee_vocab =
        parse_strings(sections.get("encoder.vocab.callee")?).ok_or_else(|| corrupt("encoder.vocab.callee"))?;
    let file_vocab = parse_strings(sections.get("encoder.vocab.file")?).ok_or_else(|| corrupt("encoder.vocab.file"))?;
    let encoder = Encoder::from_parts(numeric, dropped, expr_groups, callee_vocab, file_vocab);

    let mut params: Params = Model::zero_params(&spec, &encoder);
    params.callee_embed = parse_matrix(&sections, "embed.callee", encoder.callee_table_size(), spec.callee_embed_dim)?;
    params.file_embed = parse_matrix(&sections, "embed.file", encoder.file_table_size(), spec.file_embed_dim)?;
    for (k, l) in params.layers.iter_mut().enumerate() {
        l.w = parse_matrix(&sections, &format!("layer.{k}.W"), l.inputs, l.outputs)?;
        l.b = parse_matrix(&sections, &format!("layer.{k}.b"), 1, l.outputs)?;
    }
    let expected = params.layers.len();
    if sections.map.contains_key(format!("layer.{expected}.W").as_str()) {
        return Err(corrupt(&format!("layer.{expected}.W")));
    }
    let mut accum = Params::zeros_like(&params);
    for t in accum.tensors_mut() {
        t.fill(spec.adagrad_initial_accumulator);
    }
    Ok(Model {
        spec,
        encoder,
        params,
        accum,
    })
}
