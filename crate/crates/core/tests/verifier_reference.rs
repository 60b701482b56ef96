//! Verifier decisions against an independent brute-force checker, and
//! fuzzed execution of programs the verifier accepts.

mod common;

use std::collections::HashSet;

use common::{arb_mixed, few_branches, reference};
use iochain::btree;
use iochain::sfunc::{self, execute, Action, ChainBudget, ExecError, Instruction, Opcode, Program, VerifyReason};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4000))]

    #[test]
    fn verifier_agrees_with_reference(p in arb_mixed().prop_filter("branchy", few_branches)) {
        let got: HashSet<VerifyReason> = sfunc::verify_all(&p).into_iter().map(|e| e.reason).collect();
        let want = reference(&p);
        prop_assert_eq!(&got, &want, "{}", sfunc::disassemble(&p));
        prop_assert_eq!(sfunc::verify(p).is_ok(), want.is_empty());
    }

    #[test]
    fn verified_programs_never_fault_on_constant_loads(
        p in arb_mixed().prop_filter("branchy", few_branches),
        seed in any::<u64>(),
        regs in any::<[u64; 8]>(),
    ) {
        if let Ok(v) = sfunc::verify(p) {
            let mut block = vec![0u8; v.block_size];
            let mut x = seed;
            for b in block.iter_mut() {
                x = btree::splitmix64(x);
                *b = x as u8;
            }
            let mut budget = ChainBudget::new(4);
            match execute(&v, &block, &mut budget, regs) {
                Ok(out) => {
                    prop_assert!(out.executed <= v.insns.len());
                    if let Action::Return { buffer } = &out.action {
                        prop_assert!(buffer.len() <= v.max_return);
                    }
                    if let Action::Resubmit { file_offset } = out.action {
                        prop_assert_eq!(file_offset % 512, 0);
                    }
                }
                Err(ExecError::BoundsTrap { pc, .. }) => {
                    // Only register-indexed loads may trap.
                    prop_assert!(v.insns[pc].src.is_some(), "constant load trapped at {}", pc);
                }
                Err(ExecError::Misaligned(off)) => prop_assert_ne!(off % 512, 0),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}

fn p(insns: Vec<Instruction>) -> Program {
    Program::new("t", insns)
}

fn i(op: Opcode, dst: Option<u8>, src: Option<u8>, imm: i64) -> Instruction {
    Instruction::new(op, dst, src, imm)
}

#[test]
fn each_rejection_class_is_caught() {
    let cases = [
        (p(vec![i(Opcode::Jeq, Some(0), Some(0), -1), i(Opcode::Drop, None, None, 0)]), VerifyReason::BackwardJump),
        (p(vec![i(Opcode::Jne, Some(0), Some(1), 5), i(Opcode::Drop, None, None, 0)]), VerifyReason::JumpOutOfRange),
        (p(vec![i(Opcode::LoadW, Some(0), None, 509), i(Opcode::Drop, None, None, 0)]), VerifyReason::OutOfBounds),
        (p(vec![i(Opcode::LoadB, Some(0), None, -1), i(Opcode::Drop, None, None, 0)]), VerifyReason::OutOfBounds),
        (p(vec![i(Opcode::MovI, Some(0), None, 0)]), VerifyReason::MissingTerminator),
    ];
    for (prog, reason) in cases {
        let errs = sfunc::verify_all(&prog);
        assert!(errs.iter().any(|e| e.reason == reason), "{reason}: {errs:?}");
        assert!(reference(&prog).contains(&reason));
    }
}

#[test]
fn jump_to_self_counts_as_backward() {
    // imm = -1 targets the branch itself.
    let prog = p(vec![i(Opcode::Jeq, Some(0), Some(0), -1), i(Opcode::Drop, None, None, 0)]);
    assert_eq!(sfunc::verify(prog).unwrap_err().reason, VerifyReason::BackwardJump);
}

#[test]
fn compiled_lookups_verify_and_run_trap_free() {
    for depth in [1, 2, 5, 10] {
        let img = btree::standard_tree(depth).unwrap();
        for key in (0..2 * img.keys as u64 + 2).step_by(37) {
            let prog = btree::compile_lookup(key);
            assert!(sfunc::verify_all(&prog).is_empty());
            let mut budget = ChainBudget::default();
            let mut off = 0;
            loop {
                let out = execute(&prog, img.page(off).unwrap(), &mut budget, [0; 8]).unwrap();
                match out.action {
                    Action::Resubmit { file_offset } => off = file_offset,
                    _ => break,
                }
            }
        }
    }
}

#[test]
fn hop_limit_trips_on_exactly_one_past_the_limit() {
    let looping = sfunc::verify(p(vec![i(Opcode::MovI, Some(0), None, 512), i(Opcode::Resubmit, Some(0), None, 0)])).unwrap();
    for limit in [1, 2, 16, 40] {
        let mut budget = ChainBudget::new(limit);
        let mut attempts = 0;
        let err = loop {
            attempts += 1;
            match execute(&looping, &[0; 512], &mut budget, [0; 8]) {
                Ok(_) => assert!(budget.hops_used <= budget.hop_limit),
                Err(e) => break e,
            }
        };
        assert_eq!(err, ExecError::HopLimit(limit));
        assert_eq!(attempts, limit + 1);
    }
}

#[test]
fn generator_produces_accepted_programs() {
    use proptest::strategy::ValueTree;
    use proptest::test_runner::{Config, TestRng, TestRunner};
    let mut runner = TestRunner::new_with_rng(Config::default(), TestRng::deterministic_rng(Config::default().rng_algorithm));
    let strat = arb_mixed();
    let samples = 4000;
    let accepted = (0..samples)
        .filter(|_| sfunc::verify(strat.new_tree(&mut runner).unwrap().current()).is_ok())
        .count();
    eprintln!("accepted {accepted}/{samples}");
    assert!(accepted * 50 >= samples, "only {accepted} of {samples} fuzz programs verify");
}
