//! Line-oriented assembly listings to basic blocks and intra-function
//! control-flow edges.
//!
//! Listing syntax:
//! - `<name>:` (optionally preceded by a hex address) opens a function;
//!   without any header the whole text is one function named `main`.
//! - `label:` defines a label, optionally followed by an instruction on the
//!   same line.
//! - `;` starts a comment, lines starting with `.` are directives and are
//!   ignored.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    /// Lowercase mnemonic.
    pub mnemonic: String,
    pub operands: Vec<String>,
}

impl Instruction {
    pub fn parse(text: &str) -> Self {
        let text = text.trim();
        let (mnemonic, rest) = match text.find(char::is_whitespace) {
            Some(i) => (&text[..i], text[i..].trim()),
            None => (text, ""),
        };
        let operands = if rest.is_empty() { Vec::new() } else { split_operands(rest) };
        Self { mnemonic: mnemonic.to_ascii_lowercase(), operands }
    }

    pub fn kind(&self) -> Transfer {
        let m = self.mnemonic.as_str();
        if m == "jmp" || m == "ljmp" {
            Transfer::Jump
        } else if m.starts_with('j') || m.starts_with("loop") {
            Transfer::Branch
        } else if m.starts_with("ret") || m.starts_with("iret") || m == "hlt" || m == "ud2" {
            Transfer::Return
        } else if m.starts_with("call") {
            Transfer::Call
        } else {
            Transfer::None
        }
    }

    pub fn text(&self) -> String {
        if self.operands.is_empty() {
            self.mnemonic.clone()
        } else {
            format!("{} {}", self.mnemonic, self.operands.join(", "))
        }
    }
}

/// Splits on top-level commas (commas inside brackets stay).
fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '[' | '(' => depth += 1,
            ']' | ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    out.push(cur.trim().to_string());
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transfer {
    None,
    /// Unconditional jump.
    Jump,
    /// Conditional jump.
    Branch,
    Return,
    Call,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsmFunction {
    pub name: String,
    pub lines: Vec<Instruction>,
    /// Label → index of the instruction it precedes.
    pub labels: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicBlock {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    /// Ends in a jump whose target could not be resolved statically.
    pub indirect: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedFunction {
    pub function: AsmFunction,
    pub blocks: Vec<BasicBlock>,
    pub edges: Vec<(usize, usize)>,
    /// `(block, callee name)` for every direct call.
    pub calls: Vec<(usize, String)>,
}

impl ParsedFunction {
    pub fn block_instructions(&self, b: usize) -> &[Instruction] {
        let blk = &self.blocks[b];
        &self.function.lines[blk.start..blk.end]
    }

    /// Blocks without successors.
    pub fn exits(&self) -> Vec<usize> {
        (0..self.blocks.len()).filter(|b| !self.edges.iter().any(|&(s, _)| s == *b)).collect()
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find(';') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn is_label_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || "_.$@?".contains(c))
        && chars.all(|c| c.is_ascii_alphanumeric() || "_.$@?".contains(c))
}

/// `<name>:` or `0000401126 <name>:`.
fn function_header(line: &str) -> Option<&str> {
    let rest = line.strip_suffix(':')?.trim();
    let rest = match rest.split_once(char::is_whitespace) {
        Some((addr, r)) if addr.chars().all(|c| c.is_ascii_hexdigit()) => r.trim(),
        _ => rest,
    };
    let name = rest.strip_prefix('<')?.strip_suffix('>')?;
    (!name.is_empty()).then_some(name)
}

/// Splits a leading `label:` off a line.
fn split_label(line: &str) -> (Option<&str>, &str) {
    if let Some(i) = line.find(':') {
        let head = line[..i].trim();
        if is_label_name(head) {
            return (Some(head), line[i + 1..].trim());
        }
    }
    (None, line)
}

fn read_functions(text: &str) -> Result<Vec<AsmFunction>> {
    let mut funcs: Vec<AsmFunction> = Vec::new();
    let mut current: Option<AsmFunction> = None;
    for raw in text.lines() {
        let line = strip_comment(raw).trim();
        if line.is_empty() || line.starts_with('.') {
            continue;
        }
        if let Some(name) = function_header(line) {
            if let Some(f) = current.take() {
                funcs.push(f);
            }
            current = Some(AsmFunction { name: name.to_string(), lines: Vec::new(), labels: BTreeMap::new() });
            continue;
        }
        let f = current.get_or_insert_with(|| AsmFunction {
            name: "main".to_string(),
            lines: Vec::new(),
            labels: BTreeMap::new(),
        });
        let (label, rest) = split_label(line);
        if let Some(l) = label {
            f.labels.insert(l.to_string(), f.lines.len());
        }
        if !rest.is_empty() {
            f.lines.push(Instruction::parse(rest));
        }
    }
    if let Some(f) = current.take() {
        funcs.push(f);
    }
    if funcs.is_empty() {
        return Err(Error::EmptyFunction("<listing>".into()));
    }
    Ok(funcs)
}

/// Jump target resolution: `Ok(Some(i))` for a defined label, `Ok(None)`
/// for an indirect or absolute target.
fn resolve_target(f: &AsmFunction, ins: &Instruction) -> Result<Option<usize>> {
    let Some(op) = ins.operands.first() else {
        return Ok(None);
    };
    let op = op.trim();
    let name = op.strip_prefix("short ").map(str::trim).unwrap_or(op);
    if !is_label_name(name) || super::strip::is_register(name) {
        return Ok(None);
    }
    match f.labels.get(name) {
        Some(&i) if i < f.lines.len() => Ok(Some(i)),
        _ => Err(Error::UnknownJumpTarget { function: f.name.clone(), label: name.to_string() }),
    }
}

fn direct_callee(ins: &Instruction) -> Option<String> {
    let op = ins.operands.first()?.trim();
    (is_label_name(op) && !super::strip::is_register(op)).then(|| op.to_string())
}

/// Leaders and edges of one function.
pub fn build_cfg(f: AsmFunction) -> Result<ParsedFunction> {
    let n = f.lines.len();
    if n == 0 {
        return Err(Error::EmptyFunction(f.name));
    }
    let mut targets = vec![None; n];
    let mut leaders = BTreeSet::from([0usize]);
    for (i, ins) in f.lines.iter().enumerate() {
        let kind = ins.kind();
        if matches!(kind, Transfer::Jump | Transfer::Branch) {
            targets[i] = resolve_target(&f, ins)?;
            if let Some(t) = targets[i] {
                leaders.insert(t);
            }
        }
        if kind != Transfer::None && i + 1 < n {
            leaders.insert(i + 1);
        }
    }
    let starts: Vec<usize> = leaders.into_iter().collect();
    let mut block_of = vec![0usize; n];
    let mut blocks = Vec::with_capacity(starts.len());
    for (b, &s) in starts.iter().enumerate() {
        let e = starts.get(b + 1).copied().unwrap_or(n);
        block_of[s..e].fill(b);
        let last = &f.lines[e - 1];
        let indirect = matches!(last.kind(), Transfer::Jump | Transfer::Branch) && targets[e - 1].is_none();
        blocks.push(BasicBlock { start: s, end: e, indirect });
    }

    let mut edges = BTreeSet::new();
    let mut calls = Vec::new();
    for (b, blk) in blocks.iter().enumerate() {
        let last = blk.end - 1;
        let ins = &f.lines[last];
        let falls = blk.end < n;
        let mut add = |dst: usize| {
            // The self loop is implicit in the renormalized adjacency.
            if dst != b {
                edges.insert((b, dst));
            }
        };
        match ins.kind() {
            Transfer::Jump => {
                if let Some(t) = targets[last] {
                    add(block_of[t]);
                }
            }
            Transfer::Branch => {
                if let Some(t) = targets[last] {
                    add(block_of[t]);
                }
                if falls {
                    add(b + 1);
                }
            }
            Transfer::Return => {}
            Transfer::Call => {
                if let Some(c) = direct_callee(ins) {
                    calls.push((b, c));
                }
                if falls {
                    add(b + 1);
                }
            }
            Transfer::None => {
                if falls {
                    add(b + 1);
                }
            }
        }
    }
    Ok(ParsedFunction { function: f, blocks, edges: edges.into_iter().collect(), calls })
}

/// Parses every function of a listing into blocks and edges.
pub fn parse_listing(text: &str) -> Result<Vec<ParsedFunction>> {
    read_functions(text)?.into_iter().map(build_cfg).collect()
}
