//! Storage functions: a small register bytecode run once per I/O completion.
//!
//! Control flow is forward-only, so every invocation executes each
//! instruction at most once. The verifier rejects backward or out-of-range
//! jumps, constant-offset loads outside the block, paths that can emit more
//! than the declared return buffer, and programs that can fall off the end.
//! Register-indexed loads are checked at run time; a trap aborts the chain.

mod asm;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use asm::{assemble, decode, disassemble, encode, AsmError};

pub const MAX_INSTRUCTIONS: usize = 4096;
pub const MAX_RETURN_BYTES: usize = 4096;
pub const NUM_REGS: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    LoadB,
    LoadW,
    LoadQ,
    MovI,
    Mov,
    Add,
    Sub,
    Mul,
    And,
    Or,
    Shl,
    Shr,
    Jeq,
    Jne,
    Jlt,
    Jge,
    Emit,
    Resubmit,
    Return,
    Drop,
}

impl Opcode {
    pub const ALL: [Opcode; 20] = [
        Opcode::LoadB,
        Opcode::LoadW,
        Opcode::LoadQ,
        Opcode::MovI,
        Opcode::Mov,
        Opcode::Add,
        Opcode::Sub,
        Opcode::Mul,
        Opcode::And,
        Opcode::Or,
        Opcode::Shl,
        Opcode::Shr,
        Opcode::Jeq,
        Opcode::Jne,
        Opcode::Jlt,
        Opcode::Jge,
        Opcode::Emit,
        Opcode::Resubmit,
        Opcode::Return,
        Opcode::Drop,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::LoadB => "LOADB",
            Opcode::LoadW => "LOADW",
            Opcode::LoadQ => "LOADQ",
            Opcode::MovI => "MOVI",
            Opcode::Mov => "MOV",
            Opcode::Add => "ADD",
            Opcode::Sub => "SUB",
            Opcode::Mul => "MUL",
            Opcode::And => "AND",
            Opcode::Or => "OR",
            Opcode::Shl => "SHL",
            Opcode::Shr => "SHR",
            Opcode::Jeq => "JEQ",
            Opcode::Jne => "JNE",
            Opcode::Jlt => "JLT",
            Opcode::Jge => "JGE",
            Opcode::Emit => "EMIT",
            Opcode::Resubmit => "RESUBMIT",
            Opcode::Return => "RETURN",
            Opcode::Drop => "DROP",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.mnemonic() == s)
    }

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&o| o == self).unwrap() as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn load_width(self) -> Option<u64> {
        match self {
            Opcode::LoadB => Some(1),
            Opcode::LoadW => Some(4),
            Opcode::LoadQ => Some(8),
            _ => None,
        }
    }

    pub fn is_branch(self) -> bool {
        matches!(self, Opcode::Jeq | Opcode::Jne | Opcode::Jlt | Opcode::Jge)
    }

    pub fn is_terminator(self) -> bool {
        matches!(self, Opcode::Resubmit | Opcode::Return | Opcode::Drop)
    }
}

/// `op dst, src, imm`. Unused operands are `None` / zero.
///
/// * loads: `dst = block[(src or 0) + imm]`, little-endian
/// * ALU: `dst = dst op (src or imm)`; `MOVI dst = imm`; `MOV dst = src`
/// * branches: if `dst cmp src` (unsigned) jump to `pc + 1 + imm`
/// * `EMIT dst, _, n`: append the low `n` bytes of `dst`
/// * `RESUBMIT dst`: next I/O at file offset `dst`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub op: Opcode,
    pub dst: Option<u8>,
    pub src: Option<u8>,
    pub imm: i64,
}

impl Instruction {
    pub fn new(op: Opcode, dst: Option<u8>, src: Option<u8>, imm: i64) -> Self {
        Self { op, dst, src, imm }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub name: String,
    pub version: u32,
    /// Bytes of block data each invocation sees.
    pub block_size: usize,
    /// Declared capacity of the return buffer.
    pub max_return: usize,
    pub insns: Vec<Instruction>,
}

impl Program {
    pub fn new(name: impl Into<String>, insns: Vec<Instruction>) -> Self {
        Self {
            name: name.into(),
            version: 1,
            block_size: 512,
            max_return: 8,
            insns,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VerifyReason {
    Empty,
    TooLong,
    BadHeader,
    BadOperand,
    BackwardJump,
    JumpOutOfRange,
    OutOfBounds,
    ReturnOverflow,
    MissingTerminator,
}

impl fmt::Display for VerifyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerifyReason::Empty => "empty-program",
            VerifyReason::TooLong => "too-long",
            VerifyReason::BadHeader => "bad-header",
            VerifyReason::BadOperand => "bad-operand",
            VerifyReason::BackwardJump => "backward-jump",
            VerifyReason::JumpOutOfRange => "jump-out-of-range",
            VerifyReason::OutOfBounds => "out-of-bounds",
            VerifyReason::ReturnOverflow => "return-overflow",
            VerifyReason::MissingTerminator => "missing-terminator",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("{reason} at instruction {index}")]
pub struct VerifyError {
    pub reason: VerifyReason,
    pub index: usize,
}

/// A program that passed [`verify`]. Only constructible through it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedProgram(Arc<Program>);

impl VerifiedProgram {
    pub fn program(&self) -> &Program {
        &self.0
    }
}

impl std::ops::Deref for VerifiedProgram {
    type Target = Program;
    fn deref(&self) -> &Program {
        &self.0
    }
}

fn reg_ok(r: Option<u8>) -> bool {
    r.is_none_or(|r| r < NUM_REGS)
}

fn check_operands(insn: &Instruction) -> bool {
    use Opcode::*;
    if !reg_ok(insn.dst) || !reg_ok(insn.src) {
        return false;
    }
    match insn.op {
        LoadB | LoadW | LoadQ => insn.dst.is_some(),
        MovI => insn.dst.is_some() && insn.src.is_none(),
        Mov => insn.dst.is_some() && insn.src.is_some(),
        Add | Sub | Mul | And | Or | Shl | Shr => insn.dst.is_some(),
        Jeq | Jne | Jlt | Jge => insn.dst.is_some() && insn.src.is_some(),
        Emit => insn.dst.is_some() && insn.src.is_none() && (1..=8).contains(&insn.imm),
        Resubmit => insn.dst.is_some() && insn.src.is_none(),
        Return | Drop => insn.dst.is_none() && insn.src.is_none(),
    }
}

/// Every problem in the program, in instruction order.
pub fn verify_all(program: &Program) -> Vec<VerifyError> {
    let mut errs = Vec::new();
    let n = program.insns.len();
    let err = |reason, index| VerifyError { reason, index };
    if program.block_size == 0
        || !program.block_size.is_multiple_of(512)
        || program.block_size > 4096
        || program.max_return > MAX_RETURN_BYTES
    {
        errs.push(err(VerifyReason::BadHeader, 0));
    }
    if n == 0 {
        errs.push(err(VerifyReason::Empty, 0));
        return errs;
    }
    if n > MAX_INSTRUCTIONS {
        errs.push(err(VerifyReason::TooLong, MAX_INSTRUCTIONS));
    }
    for (i, insn) in program.insns.iter().enumerate() {
        if !check_operands(insn) {
            errs.push(err(VerifyReason::BadOperand, i));
            continue;
        }
        if insn.op.is_branch() {
            if insn.imm < 0 {
                errs.push(err(VerifyReason::BackwardJump, i));
            } else if (i as u64) + 1 + insn.imm as u64 >= n as u64 {
                errs.push(err(VerifyReason::JumpOutOfRange, i));
            }
        }
        if let (Some(w), None) = (insn.op.load_width(), insn.src) {
            let in_bounds = insn.imm >= 0 && (insn.imm as u64) + w <= program.block_size as u64;
            if !in_bounds {
                errs.push(err(VerifyReason::OutOfBounds, i));
            }
        }
    }
    if !program.insns[n - 1].op.is_terminator() {
        errs.push(err(VerifyReason::MissingTerminator, n - 1));
    }
    if errs.is_empty() {
        // Longest emission along any path; the CFG is a DAG in index order.
        let mut worst = vec![0usize; n];
        let mut first_over = None;
        for i in (0..n).rev() {
            let insn = &program.insns[i];
            let own = if insn.op == Opcode::Emit {
                insn.imm as usize
            } else {
                0
            };
            let next = if insn.op.is_terminator() {
                0
            } else if insn.op.is_branch() {
                worst[i + 1].max(worst[i + 1 + insn.imm as usize])
            } else {
                worst[i + 1]
            };
            worst[i] = own + next;
            if own > 0 && own + next > program.max_return {
                first_over = Some(i);
            }
        }
        if worst[0] > program.max_return {
            errs.push(err(VerifyReason::ReturnOverflow, first_over.unwrap_or(0)));
        }
    }
    errs.sort_by_key(|e| e.index);
    errs
}

pub fn verify(program: Program) -> Result<VerifiedProgram, VerifyError> {
    match verify_all(&program).into_iter().next() {
        Some(e) => Err(e),
        None => Ok(VerifiedProgram(Arc::new(program))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Resubmit { file_offset: u64 },
    Return { buffer: Vec<u8> },
    Drop,
}

/// Per-chain resubmission budget enforced at the driver layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainBudget {
    pub hop_limit: u32,
    pub hops_used: u32,
}

impl ChainBudget {
    pub const DEFAULT_HOP_LIMIT: u32 = 16;

    pub fn new(hop_limit: u32) -> Self {
        Self {
            hop_limit,
            hops_used: 0,
        }
    }
}

impl Default for ChainBudget {
    fn default() -> Self {
        Self::new(Self::DEFAULT_HOP_LIMIT)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("block access out of bounds at instruction {pc} (address {addr})")]
    BoundsTrap { pc: usize, addr: u64 },
    #[error("resubmit offset {0} is not 512-byte aligned")]
    Misaligned(u64),
    #[error("hop limit {0} exceeded")]
    HopLimit(u32),
    #[error("block is {got} bytes, program expects {want}")]
    BlockSize { got: usize, want: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub action: Action,
    pub executed: usize,
}

/// Runs one invocation over `block`.
pub fn execute(
    program: &VerifiedProgram,
    block: &[u8],
    budget: &mut ChainBudget,
    mut regs: [u64; NUM_REGS as usize],
) -> Result<Outcome, ExecError> {
    if block.len() != program.block_size {
        return Err(ExecError::BlockSize {
            got: block.len(),
            want: program.block_size,
        });
    }
    let insns = &program.insns;
    let mut out = Vec::new();
    let mut pc = 0usize;
    let mut executed = 0usize;
    loop {
        let insn = insns[pc];
        executed += 1;
        debug_assert!(executed <= insns.len());
        let d = insn.dst.map(usize::from).unwrap_or(0);
        let operand = match insn.src {
            Some(s) => regs[s as usize],
            None => insn.imm as u64,
        };
        let mut next = pc + 1;
        match insn.op {
            Opcode::LoadB | Opcode::LoadW | Opcode::LoadQ => {
                let w = insn.op.load_width().unwrap();
                let base = insn.src.map(|s| regs[s as usize]).unwrap_or(0);
                let addr = base.wrapping_add(insn.imm as u64);
                if addr.checked_add(w).is_none_or(|end| end > block.len() as u64) {
                    return Err(ExecError::BoundsTrap { pc, addr });
                }
                let a = addr as usize;
                let mut bytes = [0u8; 8];
                bytes[..w as usize].copy_from_slice(&block[a..a + w as usize]);
                regs[d] = u64::from_le_bytes(bytes);
            }
            Opcode::MovI => regs[d] = insn.imm as u64,
            Opcode::Mov => regs[d] = operand,
            Opcode::Add => regs[d] = regs[d].wrapping_add(operand),
            Opcode::Sub => regs[d] = regs[d].wrapping_sub(operand),
            Opcode::Mul => regs[d] = regs[d].wrapping_mul(operand),
            Opcode::And => regs[d] &= operand,
            Opcode::Or => regs[d] |= operand,
            Opcode::Shl => regs[d] = regs[d].wrapping_shl((operand & 63) as u32),
            Opcode::Shr => regs[d] = regs[d].wrapping_shr((operand & 63) as u32),
            Opcode::Jeq | Opcode::Jne | Opcode::Jlt | Opcode::Jge => {
                let (a, b) = (regs[d], operand);
                let taken = match insn.op {
                    Opcode::Jeq => a == b,
                    Opcode::Jne => a != b,
                    Opcode::Jlt => a < b,
                    _ => a >= b,
                };
                if taken {
                    next = pc + 1 + insn.imm as usize;
                }
            }
            Opcode::Emit => {
                let n = insn.imm as usize;
                out.extend_from_slice(&regs[d].to_le_bytes()[..n]);
                debug_assert!(out.len() <= program.max_return);
            }
            Opcode::Resubmit => {
                let off = regs[d];
                if !off.is_multiple_of(512) {
                    return Err(ExecError::Misaligned(off));
                }
                if budget.hops_used >= budget.hop_limit {
                    return Err(ExecError::HopLimit(budget.hop_limit));
                }
                budget.hops_used += 1;
                return Ok(Outcome {
                    action: Action::Resubmit { file_offset: off },
                    executed,
                });
            }
            Opcode::Return => {
                return Ok(Outcome {
                    action: Action::Return { buffer: out },
                    executed,
                })
            }
            Opcode::Drop => {
                return Ok(Outcome {
                    action: Action::Drop,
                    executed,
                })
            }
        }
        pc = next;
    }
}
