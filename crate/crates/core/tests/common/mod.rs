//! Shared helpers for integration tests: a brute-force verifier reference
//! and random program generators.

#![allow(dead_code)]

use std::collections::HashSet;

use iochain::sfunc::{Instruction, Opcode, Program, VerifyReason};
use proptest::prelude::*;

/// Reference checker: recomputes each rejection reason from first
/// principles. Emission bounds are found by enumerating every path.
pub fn reference(p: &Program) -> HashSet<VerifyReason> {
    let mut out = HashSet::new();
    let n = p.insns.len();
    if ![512, 1024, 1536, 2048, 2560, 3072, 3584, 4096].contains(&p.block_size) || p.max_return > 4096 {
        out.insert(VerifyReason::BadHeader);
    }
    if n == 0 {
        out.insert(VerifyReason::Empty);
        return out;
    }
    let reg = |r: Option<u8>| r.is_none_or(|r| r <= 7);
    for (i, insn) in p.insns.iter().enumerate() {
        let (d, s) = (insn.dst.is_some(), insn.src.is_some());
        let shape = match insn.op {
            Opcode::LoadB | Opcode::LoadW | Opcode::LoadQ => d,
            Opcode::MovI => d && !s,
            Opcode::Mov => d && s,
            Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::And | Opcode::Or | Opcode::Shl | Opcode::Shr => d,
            Opcode::Jeq | Opcode::Jne | Opcode::Jlt | Opcode::Jge => d && s,
            Opcode::Emit => d && !s && insn.imm >= 1 && insn.imm <= 8,
            Opcode::Resubmit => d && !s,
            Opcode::Return | Opcode::Drop => !d && !s,
        };
        if !(shape && reg(insn.dst) && reg(insn.src)) {
            out.insert(VerifyReason::BadOperand);
            continue;
        }
        if matches!(insn.op, Opcode::Jeq | Opcode::Jne | Opcode::Jlt | Opcode::Jge) {
            let target = i as i128 + 1 + insn.imm as i128;
            if target <= i as i128 {
                out.insert(VerifyReason::BackwardJump);
            } else if target >= n as i128 {
                out.insert(VerifyReason::JumpOutOfRange);
            }
        }
        let width = match insn.op {
            Opcode::LoadB => 1,
            Opcode::LoadW => 4,
            Opcode::LoadQ => 8,
            _ => 0,
        };
        if width > 0 && insn.src.is_none() {
            // Every byte the load would touch must be inside the block.
            let ok = (0..width).all(|b| {
                let a = insn.imm as i128 + b;
                a >= 0 && a < p.block_size as i128
            });
            if !ok {
                out.insert(VerifyReason::OutOfBounds);
            }
        }
    }
    if n > 4096 {
        out.insert(VerifyReason::TooLong);
    }
    let terminal = |op: Opcode| matches!(op, Opcode::Resubmit | Opcode::Return | Opcode::Drop);
    // Falling off the end: the successor of a non-terminal last instruction.
    if !terminal(p.insns[n - 1].op) {
        out.insert(VerifyReason::MissingTerminator);
    }
    if out.is_empty() {
        fn walk(p: &Program, pc: usize, emitted: usize, worst: &mut usize) {
            let insn = &p.insns[pc];
            let emitted = emitted + if insn.op == Opcode::Emit { insn.imm as usize } else { 0 };
            match insn.op {
                Opcode::Resubmit | Opcode::Return | Opcode::Drop => *worst = (*worst).max(emitted),
                Opcode::Jeq | Opcode::Jne | Opcode::Jlt | Opcode::Jge => {
                    walk(p, pc + 1, emitted, worst);
                    walk(p, pc + 1 + insn.imm as usize, emitted, worst);
                }
                _ => walk(p, pc + 1, emitted, worst),
            }
        }
        let mut worst = 0;
        walk(p, 0, 0, &mut worst);
        if worst > p.max_return {
            out.insert(VerifyReason::ReturnOverflow);
        }
    }
    out
}

pub fn arb_insn(len: usize) -> impl Strategy<Value = Instruction> {
    let reg = prop_oneof![8 => (0u8..8).prop_map(Some), 1 => Just(None), 1 => (8u8..12).prop_map(Some)];
    let imm = prop_oneof![
        4 => -3i64..(len as i64 + 2),
        3 => 0i64..520,
        1 => any::<i64>(),
    ];
    (0..Opcode::ALL.len(), reg.clone(), reg, imm).prop_map(|(o, dst, src, imm)| {
        let op = Opcode::ALL[o];
        // Bias towards well-formed operand shapes so deeper checks run.
        let (dst, src) = match op {
            Opcode::Return | Opcode::Drop if dst.is_some_and(|r| r < 8) => (None, None),
            Opcode::MovI | Opcode::Emit | Opcode::Resubmit if src.is_some_and(|r| r < 8) => (dst, None),
            _ => (dst, src),
        };
        let imm = if op == Opcode::Emit && imm > 8 { 1 + imm.rem_euclid(8) } else { imm };
        Instruction::new(op, dst, src, imm)
    })
}

pub fn arb_program() -> impl Strategy<Value = Program> {
    (1usize..=32, prop_oneof![Just(512usize), Just(1024), Just(700)], 0usize..24).prop_flat_map(|(len, block, ret)| {
        proptest::collection::vec(arb_insn(len), len..=len).prop_map(move |insns| {
            let mut p = Program::new("fuzz", insns);
            p.block_size = block;
            p.max_return = ret;
            p
        })
    })
}

/// Mostly well-formed programs: in-range registers, forward in-range
/// jumps, in-bounds constant loads and a terminator at the end.
pub fn arb_wellformed() -> impl Strategy<Value = Program> {
    (2usize..=32).prop_flat_map(|len| {
        let body = proptest::collection::vec((0..Opcode::ALL.len(), 0u8..8, 0u8..8, any::<bool>(), 0i64..600), len - 1..=len - 1);
        let last = prop_oneof![
            Just(Instruction::new(Opcode::Return, None, None, 0)),
            Just(Instruction::new(Opcode::Drop, None, None, 0)),
            (0u8..8).prop_map(|r| Instruction::new(Opcode::Resubmit, Some(r), None, 0)),
        ];
        (body, last, 0usize..48).prop_map(move |(body, last, ret)| {
            let mut insns: Vec<Instruction> = body
                .into_iter()
                .enumerate()
                .map(|(i, (o, d, s, indexed, imm))| {
                    let op = Opcode::ALL[o];
                    let remaining = (len - i - 2) as i64;
                    match op {
                        Opcode::LoadB | Opcode::LoadW | Opcode::LoadQ if indexed => Instruction::new(op, Some(d), Some(s), imm % 64),
                        Opcode::LoadB | Opcode::LoadW | Opcode::LoadQ => Instruction::new(op, Some(d), None, imm % 505),
                        Opcode::MovI => Instruction::new(op, Some(d), None, imm * 512),
                        Opcode::Mov => Instruction::new(op, Some(d), Some(s), 0),
                        _ if op.is_branch() => Instruction::new(op, Some(d), Some(s), imm % (remaining + 1)),
                        Opcode::Emit => Instruction::new(op, Some(d), None, 1 + imm % 8),
                        Opcode::Resubmit => Instruction::new(op, Some(d), None, 0),
                        Opcode::Return | Opcode::Drop => Instruction::new(op, None, None, 0),
                        _ if indexed => Instruction::new(op, Some(d), Some(s), 0),
                        _ => Instruction::new(op, Some(d), None, imm % 70),
                    }
                })
                .collect();
            insns.push(last);
            let mut p = Program::new("wf", insns);
            p.max_return = ret;
            p
        })
    })
}

pub fn arb_mixed() -> impl Strategy<Value = Program> {
    prop_oneof![arb_program(), arb_wellformed()]
}

/// Forward jump counts are limited so path enumeration stays cheap.
pub fn few_branches(p: &Program) -> bool {
    p.insns.iter().filter(|i| i.op.is_branch()).count() <= 14
}
