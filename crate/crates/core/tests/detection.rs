use pacsan_core::interp::{run_protected, run_unoptimized_oracle, ExecResult, Limits, Verdict};
use pacsan_core::miniir::load;
use pacsan_core::optpasses::OptLevel;
use pacsan_core::pacore::AddressConfig;
use pacsan_core::runtime::ViolationKind;
use proptest::prelude::*;

fn exec(src: &str, seed: u64, level: OptLevel) -> ExecResult {
    let p = load(src).unwrap();
    run_protected(&p, AddressConfig::default(), seed, level, Limits::default()).unwrap()
}

fn oracle(src: &str, seed: u64) -> ExecResult {
    let p = load(src).unwrap();
    run_unoptimized_oracle(&p, AddressConfig::default(), seed, Limits::default()).unwrap()
}

fn kind(r: &ExecResult) -> Option<ViolationKind> {
    r.verdict.violation().map(|v| v.kind)
}

fn footprint(size: u64) -> u64 {
    // allocations are rounded up to whole words, never below one word
    std::cmp::max(4, size.div_ceil(4) * 4)
}

fn access_program(size: u64, offset: i64, width: u64, store: bool) -> String {
    let ty = match width {
        1 => "i8",
        4 => "i32",
        _ => "i64",
    };
    let access = if store {
        format!("store.{ty} %q, 1")
    } else {
        format!("%x = load.{ty} %q")
    };
    format!(
        "func @main() -> i32 {{\nentry:\n  %before = malloc 8\n  %p = malloc {size}\n  %after = malloc 8\n  %q = gep %p, {offset}\n  {access}\n  ret 0\n}}\n"
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(192))]

    #[test]
    fn spatial_detection_matches_footprint(
        size in 1u64..48,
        offset in -12i64..60,
        width in prop_oneof![Just(1u64), Just(4), Just(8)],
        store in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let src = access_program(size, offset, width, store);
        let out_of_bounds = offset < 0 || offset as u64 + width > footprint(size);
        let r = exec(&src, seed, OptLevel::All);
        prop_assert_eq!(kind(&r), out_of_bounds.then_some(ViolationKind::SpatialOOB));
        let none = exec(&src, seed, OptLevel::None);
        let o = oracle(&src, seed);
        prop_assert_eq!(&none.verdict, &r.verdict);
        prop_assert_eq!(&o.verdict, &r.verdict);
    }

    #[test]
    fn stale_pointers_always_use_after_free(
        size in 1u64..40,
        churn in 0usize..4,
        reuse in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut body = format!("  %p = malloc {size}\n  store.i8 %p, 1\n  free %p\n");
        for k in 0..churn {
            body += &format!("  %t{k} = malloc 8\n");
        }
        if reuse {
            body += &format!("  %r = malloc {size}\n  store.i8 %r, 2\n");
        }
        let src = format!("func @main() -> i32 {{\nentry:\n{body}  %x = load.i8 %p\n  ret 0\n}}\n");
        let r = exec(&src, seed, OptLevel::All);
        prop_assert_eq!(kind(&r), Some(ViolationKind::UseAfterFree));
    }

    #[test]
    fn loop_check_counts(n in 1u64..16, bound in 0u64..24, seed in 0u64..100) {
        let src = format!(
            "func @main() -> i32 {{\nentry:\n  %a = malloc {bytes}\n  br head\nhead:\n  %i = phi.i32 [0, entry], [%i.next, body]\n  %c = icmp.slt.i32 %i, {bound}\n  cbr %c, body, done\nbody:\n  %o = sext.i64 %i\n  %o4 = mul.i64 %o, 4\n  %q = gep %a, %o4\n  store.i32 %q, %i\n  %i.next = add.i32 %i, 1\n  br head\ndone:\n  ret 0\n}}\n",
            bytes = 4 * n
        );
        let iterations = bound.min(n + 1);
        let overflow = bound > n;
        let none = exec(&src, seed, OptLevel::None);
        let all = exec(&src, seed, OptLevel::All);
        prop_assert_eq!(none.stats.checks_full, iterations);
        prop_assert_eq!(none.stats.checks_fast, 0);
        // first iteration is a full check; every later one goes through the
        // fast path, and the failing one falls back to a full check
        let (full, fast) = match (iterations, overflow) {
            (0, _) => (0, 0),
            (k, false) => (1, k - 1),
            (k, true) => (2, k - 1),
        };
        prop_assert_eq!((all.stats.checks_full, all.stats.checks_fast), (full, fast));
        prop_assert_eq!(kind(&all), overflow.then_some(ViolationKind::SpatialOOB));
        prop_assert_eq!(&none.verdict, &all.verdict);
    }
}

#[test]
fn reports_are_bit_identical_per_seed() {
    let src = access_program(10, 12, 4, true);
    for seed in [0, 1, u64::MAX] {
        assert_eq!(exec(&src, seed, OptLevel::All), exec(&src, seed, OptLevel::All));
    }
}

#[test]
fn padding_is_a_known_gap() {
    // bytes 10 and 11 of a 10-byte allocation share the last word
    for off in [10, 11] {
        let r = exec(&access_program(10, off, 1, true), 3, OptLevel::All);
        assert_eq!(r.verdict, Verdict::Completed(0));
    }
    let r = exec(&access_program(10, 12, 1, true), 3, OptLevel::All);
    assert_eq!(kind(&r), Some(ViolationKind::SpatialOOB));
}
