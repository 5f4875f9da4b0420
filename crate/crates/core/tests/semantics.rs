//! Wrapping arithmetic and overflow predicates against arbitrary-precision
//! integers.

use hfl::interp::{eval_bin, eval_cast};
use hfl::ir::{ArithOp, BinOp, CastOp, Operand, Signedness, Width};
use hfl::labels::Condition;
use num_bigint::BigInt;
use proptest::prelude::*;

fn width() -> impl Strategy<Value = Width> {
    prop_oneof![Just(8u32), Just(16), Just(32), Just(64)].prop_map(|b| Width::new(b).unwrap())
}

fn arith() -> impl Strategy<Value = ArithOp> {
    prop_oneof![Just(ArithOp::Add), Just(ArithOp::Sub), Just(ArithOp::Mul), Just(ArithOp::Div), Just(ArithOp::Rem)]
}

fn sign() -> impl Strategy<Value = Signedness> {
    prop_oneof![Just(Signedness::Signed), Just(Signedness::Unsigned)]
}

fn as_big(w: Width, v: u64, s: Signedness) -> BigInt {
    let v = v & w.mask();
    match s {
        Signedness::Unsigned => BigInt::from(v),
        Signedness::Signed if v >> (w.bits() - 1) & 1 == 1 => BigInt::from(v) - (BigInt::from(1) << w.bits()),
        Signedness::Signed => BigInt::from(v),
    }
}

/// Exact result, `None` for division by zero.
fn exact(op: ArithOp, a: &BigInt, b: &BigInt) -> Option<BigInt> {
    let zero = BigInt::from(0);
    Some(match op {
        ArithOp::Add => a + b,
        ArithOp::Sub => a - b,
        ArithOp::Mul => a * b,
        ArithOp::Div if *b == zero => return None,
        ArithOp::Div => a / b,
        ArithOp::Rem if *b == zero => return None,
        ArithOp::Rem => a % b,
    })
}

fn wrap(w: Width, v: &BigInt) -> u64 {
    let m = BigInt::from(1) << w.bits();
    let r = ((v % &m) + &m) % &m;
    u64::try_from(r).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn arithmetic_wraps(w in width(), op in arith(), s in sign(), a: u64, b: u64) {
        let (x, y) = (as_big(w, a, s), as_big(w, b, s));
        let expect = exact(op, &x, &y).map_or(0, |r| wrap(w, &r));
        prop_assert_eq!(eval_bin(BinOp::Arith(op, s), w, a, b), expect);
    }

    #[test]
    fn overflow_predicates_match_exact_range(w in width(), op in arith(), s in sign(), a: u64, b: u64) {
        let (x, y) = (as_big(w, a, s), as_big(w, b, s));
        let (lhs, rhs) = (Operand::Reg(0), Operand::Reg(1));
        let (cond, lo, hi) = match s {
            Signedness::Signed => (
                Condition::SignedOverflow { op, lhs, rhs, width: w },
                -(BigInt::from(1) << (w.bits() - 1)),
                (BigInt::from(1) << (w.bits() - 1)) - 1,
            ),
            Signedness::Unsigned => (
                Condition::UnsignedOverflow { op, lhs, rhs, width: w },
                BigInt::from(0),
                (BigInt::from(1) << w.bits()) - 1,
            ),
        };
        let expect = exact(op, &x, &y).is_some_and(|r| r < lo || r > hi);
        prop_assert_eq!(cond.holds(&[a & w.mask(), b & w.mask()]), expect);
    }

    #[test]
    fn shifts_and_bitwise(w in width(), a: u64, b: u64) {
        let (a, b) = (a & w.mask(), b & w.mask());
        let k = b % w.bits() as u64;
        let big = BigInt::from(a);
        prop_assert_eq!(eval_bin(BinOp::Shl, w, a, b), wrap(w, &(big.clone() << k)));
        prop_assert_eq!(eval_bin(BinOp::LShr, w, a, b), wrap(w, &(big >> k)));
        let signed = as_big(w, a, Signedness::Signed);
        // arithmetic shift floors
        prop_assert_eq!(eval_bin(BinOp::AShr, w, a, b), wrap(w, &(signed >> k)));
        prop_assert_eq!(eval_bin(BinOp::Xor, w, a, b), a ^ b);
        let shift = Condition::OversizedShift { amount: Operand::Reg(0), width: w };
        prop_assert_eq!(shift.holds(&[b]), b >= w.bits() as u64);
    }

    #[test]
    fn casts(a: u64) {
        let (w8, w32) = (Width::new(8).unwrap(), Width::new(32).unwrap());
        prop_assert_eq!(eval_cast(CastOp::Zext, w8, w32, a), a & 0xFF);
        prop_assert_eq!(eval_cast(CastOp::Sext, w8, w32, a), wrap(w32, &as_big(w8, a, Signedness::Signed)));
        prop_assert_eq!(eval_cast(CastOp::Trunc, w32, w8, a), a & 0xFF);
    }
}
