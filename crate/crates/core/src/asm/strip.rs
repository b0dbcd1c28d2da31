//! Removal of comments and symbol names, and lexing of instructions into
//! subword-training tokens.

use super::listing::{AsmFunction, Instruction};

pub const SYMBOL_PLACEHOLDER: &str = "<sym>";

const REGISTERS: &[&str] = &[
    "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp", "rip", "eax", "ebx", "ecx", "edx", "esi", "edi", "ebp",
    "esp", "eip", "ax", "bx", "cx", "dx", "si", "di", "bp", "sp", "ip", "al", "bl", "cl", "dl", "ah", "bh", "ch",
    "dh", "sil", "dil", "bpl", "spl", "cs", "ds", "es", "fs", "gs", "ss", "cr0", "cr2", "cr3", "cr4", "dr0", "dr1",
    "dr2", "dr3", "dr6", "dr7", "st",
];

const KEYWORDS: &[&str] = &[
    "byte", "word", "dword", "qword", "tword", "oword", "xmmword", "ymmword", "zmmword", "ptr", "short", "near",
    "far", "offset", "rel",
];

pub fn is_register(s: &str) -> bool {
    let s = s.to_ascii_lowercase();
    let s = s.strip_prefix('%').unwrap_or(&s);
    if REGISTERS.contains(&s) {
        return true;
    }
    // r8..r15 with optional d/w/b suffix, xmm/ymm/zmm/mm/k families
    let numbered = |prefix: &str, rest: &str| rest.strip_prefix(prefix).is_some_and(|d| !d.is_empty() && d.chars().all(|c| c.is_ascii_digit()));
    if let Some(rest) = s.strip_prefix('r') {
        let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
        let suffix = &rest[digits.len()..];
        if !digits.is_empty() && ["", "d", "w", "b"].contains(&suffix) {
            return true;
        }
    }
    ["xmm", "ymm", "zmm", "mm", "k"].iter().any(|p| numbered(p, s))
}

fn is_keyword(s: &str) -> bool {
    KEYWORDS.contains(&s.to_ascii_lowercase().as_str())
}

#[derive(Debug, Clone, PartialEq)]
enum Lexeme<'a> {
    Ident(&'a str),
    Number(&'a str),
    Placeholder(&'a str),
    Punct(char),
    Space,
}

fn lex(s: &str) -> Vec<Lexeme<'_>> {
    let mut out = Vec::new();
    let bytes = s.as_bytes();
    let mut i = 0;
    let ident = |c: char| c.is_ascii_alphanumeric() || "_.$@?".contains(c);
    while i < s.len() {
        let c = bytes[i] as char;
        let start = i;
        if c.is_whitespace() {
            while i < s.len() && (bytes[i] as char).is_whitespace() {
                i += 1;
            }
            out.push(Lexeme::Space);
        } else if s[i..].starts_with(SYMBOL_PLACEHOLDER) {
            i += SYMBOL_PLACEHOLDER.len();
            out.push(Lexeme::Placeholder(&s[start..i]));
        } else if c.is_ascii_digit() {
            while i < s.len() && (bytes[i] as char).is_ascii_alphanumeric() {
                i += 1;
            }
            out.push(Lexeme::Number(&s[start..i]));
        } else if ident(c) {
            while i < s.len() && ident(bytes[i] as char) {
                i += 1;
            }
            out.push(Lexeme::Ident(&s[start..i]));
        } else {
            let ch = s[i..].chars().next().expect("in bounds");
            i += ch.len_utf8();
            out.push(Lexeme::Punct(ch));
        }
    }
    out
}

/// Replaces every named symbol in an operand with `<sym>`. Registers,
/// size keywords and numbers stay verbatim.
pub fn strip_operand(op: &str) -> String {
    let mut out = String::with_capacity(op.len());
    for lx in lex(op) {
        match lx {
            Lexeme::Ident(id) if !is_register(id) && !is_keyword(id) => out.push_str(SYMBOL_PLACEHOLDER),
            Lexeme::Ident(s) | Lexeme::Number(s) | Lexeme::Placeholder(s) => out.push_str(s),
            Lexeme::Punct(c) => out.push(c),
            Lexeme::Space => out.push(' '),
        }
    }
    out
}

/// Comment removal plus symbol replacement on one source line.
pub fn strip_line(line: &str) -> String {
    let code = line.split(';').next().unwrap_or("").trim();
    if code.is_empty() {
        return String::new();
    }
    let ins = Instruction::parse(code);
    let mnemonic = code.split_whitespace().next().unwrap_or("");
    let ops: Vec<String> = ins.operands.iter().map(|o| strip_operand(o)).collect();
    if ops.is_empty() {
        mnemonic.to_string()
    } else {
        format!("{mnemonic} {}", ops.join(", "))
    }
}

pub fn strip_semantics(f: &AsmFunction) -> AsmFunction {
    let lines = f
        .lines
        .iter()
        .map(|ins| Instruction {
            mnemonic: ins.mnemonic.clone(),
            operands: ins.operands.iter().map(|o| strip_operand(o)).collect(),
        })
        .collect();
    AsmFunction { name: f.name.clone(), lines, labels: f.labels.clone() }
}

/// Tokens of one instruction: mnemonic, then identifiers, numbers,
/// placeholders and single punctuation characters. Whitespace separates
/// tokens and is dropped.
pub fn instruction_tokens(ins: &Instruction) -> Vec<String> {
    let mut out = vec![ins.mnemonic.clone()];
    for (k, op) in ins.operands.iter().enumerate() {
        if k > 0 {
            out.push(",".to_string());
        }
        for lx in lex(op) {
            match lx {
                Lexeme::Ident(s) | Lexeme::Number(s) | Lexeme::Placeholder(s) => out.push(s.to_ascii_lowercase()),
                Lexeme::Punct(c) => out.push(c.to_string()),
                Lexeme::Space => {}
            }
        }
    }
    out
}
