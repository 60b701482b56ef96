//! Text and binary forms of storage-function programs.
//!
//! Text: one instruction per line as `OPCODE dst, src, imm`, `_` for an
//! unused operand, `;` starts a comment. Header directives `.name`,
//! `.version`, `.block` and `.retcap` set program metadata.
//!
//! Binary: `SFN1` magic, little-endian header, then 16 bytes per
//! instruction (`op, dst, src, 5 x 0, imm:i64`), `0xff` for an absent register.

use std::fmt::Write as _;

use thiserror::Error;

use super::{Instruction, Opcode, Program};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("binary program: {0}")]
    Binary(&'static str),
}

fn syntax(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError::Syntax {
        line,
        msg: msg.into(),
    }
}

fn parse_reg(tok: &str, line: usize) -> Result<Option<u8>, AsmError> {
    if tok == "_" {
        return Ok(None);
    }
    let n = tok
        .strip_prefix('r')
        .and_then(|d| d.parse::<u8>().ok())
        .ok_or_else(|| syntax(line, format!("bad register `{tok}`")))?;
    Ok(Some(n))
}

fn parse_imm(tok: &str, line: usize) -> Result<i64, AsmError> {
    if tok == "_" {
        return Ok(0);
    }
    let (neg, body) = match tok.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, tok),
    };
    let v = if let Some(hex) = body.strip_prefix("0x") {
        u64::from_str_radix(hex, 16)
    } else {
        body.parse::<u64>()
    }
    .map(|v| v as i64)
    .map_err(|_| syntax(line, format!("bad immediate `{tok}`")))?;
    Ok(if neg { v.wrapping_neg() } else { v })
}

pub fn assemble(text: &str) -> Result<Program, AsmError> {
    let mut prog = Program::new("anon", Vec::new());
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let code = raw.split(';').next().unwrap().trim();
        if code.is_empty() {
            continue;
        }
        if let Some(dir) = code.strip_prefix('.') {
            let (key, val) = dir
                .split_once(char::is_whitespace)
                .map(|(k, v)| (k, v.trim()))
                .ok_or_else(|| syntax(line, "directive needs a value"))?;
            let num = || {
                val.parse::<u32>()
                    .map_err(|_| syntax(line, format!("bad number `{val}`")))
            };
            match key {
                "name" => prog.name = val.to_string(),
                "version" => prog.version = num()?,
                "block" => prog.block_size = num()? as usize,
                "retcap" => prog.max_return = num()? as usize,
                _ => return Err(syntax(line, format!("unknown directive `.{key}`"))),
            }
            continue;
        }
        let (mn, rest) = code.split_once(char::is_whitespace).unwrap_or((code, ""));
        let op = Opcode::from_mnemonic(&mn.to_ascii_uppercase())
            .ok_or_else(|| syntax(line, format!("unknown opcode `{mn}`")))?;
        let ops: Vec<&str> = if rest.trim().is_empty() {
            Vec::new()
        } else {
            rest.split(',').map(str::trim).collect()
        };
        if ops.len() > 3 || ops.iter().any(|o| o.is_empty()) {
            return Err(syntax(line, "expected `OPCODE dst, src, imm`"));
        }
        let get = |i: usize| ops.get(i).copied().unwrap_or("_");
        prog.insns.push(Instruction {
            op,
            dst: parse_reg(get(0), line)?,
            src: parse_reg(get(1), line)?,
            imm: parse_imm(get(2), line)?,
        });
    }
    Ok(prog)
}

pub fn disassemble(program: &Program) -> String {
    let mut s = String::new();
    let _ = writeln!(s, ".name {}", program.name);
    let _ = writeln!(s, ".version {}", program.version);
    let _ = writeln!(s, ".block {}", program.block_size);
    let _ = writeln!(s, ".retcap {}", program.max_return);
    let reg = |r: Option<u8>| r.map_or("_".to_string(), |r| format!("r{r}"));
    for insn in &program.insns {
        let _ = writeln!(
            s,
            "{} {}, {}, {}",
            insn.op.mnemonic(),
            reg(insn.dst),
            reg(insn.src),
            insn.imm
        );
    }
    s
}

const MAGIC: &[u8; 4] = b"SFN1";
const NO_REG: u8 = 0xff;

pub fn encode(program: &Program) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + program.name.len() + 16 * program.insns.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&program.version.to_le_bytes());
    out.extend_from_slice(&(program.block_size as u32).to_le_bytes());
    out.extend_from_slice(&(program.max_return as u32).to_le_bytes());
    out.extend_from_slice(&(program.name.len() as u16).to_le_bytes());
    out.extend_from_slice(program.name.as_bytes());
    out.extend_from_slice(&(program.insns.len() as u32).to_le_bytes());
    for insn in &program.insns {
        out.push(insn.op.code());
        out.push(insn.dst.unwrap_or(NO_REG));
        out.push(insn.src.unwrap_or(NO_REG));
        out.extend_from_slice(&[0; 5]);
        out.extend_from_slice(&insn.imm.to_le_bytes());
    }
    out
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AsmError> {
        if self.0.len() < n {
            return Err(AsmError::Binary("truncated"));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32, AsmError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Program, AsmError> {
    let mut r = Reader(bytes);
    if r.take(4)? != MAGIC {
        return Err(AsmError::Binary("bad magic"));
    }
    let version = r.u32()?;
    let block_size = r.u32()? as usize;
    let max_return = r.u32()? as usize;
    let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| AsmError::Binary("name is not utf-8"))?
        .to_string();
    let count = r.u32()? as usize;
    let mut insns = Vec::with_capacity(count.min(super::MAX_INSTRUCTIONS));
    for _ in 0..count {
        let rec = r.take(16)?;
        let op = Opcode::from_code(rec[0]).ok_or(AsmError::Binary("unknown opcode"))?;
        if rec[3..8] != [0; 5] {
            return Err(AsmError::Binary("nonzero padding"));
        }
        let reg = |b: u8| (b != NO_REG).then_some(b);
        insns.push(Instruction {
            op,
            dst: reg(rec[1]),
            src: reg(rec[2]),
            imm: i64::from_le_bytes(rec[8..16].try_into().unwrap()),
        });
    }
    if !r.0.is_empty() {
        return Err(AsmError::Binary("trailing bytes"));
    }
    Ok(Program {
        name,
        version,
        block_size,
        max_return,
        insns,
    })
}
