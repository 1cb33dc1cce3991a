use super::*;
use proptest::prelude::*;

const SAMPLE: &str = "
; sample program
global @table 40
extern @memset(ptr, i32, i64) -> ptr

func @sum(%p: ptr, %n: i32) -> i32 {
entry:
  br head
head:
  %i = phi.i32 [0, entry], [%i.next, body]
  %acc = phi.i32 [0, entry], [%acc.next, body]
  %c = icmp.slt.i32 %i, %n
  cbr %c, body, done
body:
  %off = sext.i64 %i
  %off4 = mul.i64 %off, 4
  %q = gep %p, %off4
  %v = load.i32 %q
  %acc.next = add.i32 %acc, %v
  %i.next = add.i32 %i, 1
  br head
done:
  ret %acc
}

func @main() -> i32 {
entry:
  %buf = alloca 16
  %g = globaladdr @table
  %r = call @memset(%g, 0, 40)
  store.i32 %buf, -7
  %x = call @sum(%g, 10)
  %h = malloc 0x20
  free %h
  ret %x
}
";

#[test]
fn parses_and_validates_sample() {
    let p = load(SAMPLE).unwrap();
    assert_eq!(p.funcs.len(), 2);
    assert_eq!(p.globals[0].size, 40);
    let main = p.func("main").unwrap();
    assert_eq!(main.blocks[0].insts.len(), 8);
    assert_eq!(main.blocks[0].insts[3].origin, Some(3));
    let sum = p.func("sum").unwrap();
    assert_eq!(sum.blocks[1].label, "head");
    assert!(matches!(sum.blocks[2].insts[2].op, Op::Gep { .. }));
}

#[test]
fn print_round_trips() {
    let p = load(SAMPLE).unwrap();
    let text = print(&p);
    let q = load(&text).unwrap();
    assert_eq!(p, q);
    assert_eq!(text, print(&q));
}

#[test]
fn instrumented_syntax_needs_directive() {
    let body = "
func @main() -> i32 {
entry:
  %p = pmalloc 8
  %c, %t = check.4 %p
  %d = fastcheck.4 %p, %t, %p
  store.i32 %d, 1
  pfree %p
  ret 0
}
";
    assert!(matches!(parse(body), Err(IrError::Parse { .. })));
    let text = format!("instrumented\n{body}");
    let p = load(&text).unwrap();
    assert!(p.instrumented);
    let check = &p.funcs[0].blocks[0].insts[1];
    assert!(matches!(check.op, Op::Check { width: 4, token: Some(_), .. }));
    assert_eq!(check.origin, None);
    assert_eq!(load(&print(&p)).unwrap(), p);
}

#[test]
fn origin_markers_survive() {
    let text = "instrumented\nfunc @main() -> i32 {\nentry:\n  %p = pmalloc 8 !0\n  ret 0 !1\n}\n";
    let p = load(text).unwrap();
    assert_eq!(p.funcs[0].blocks[0].insts[0].origin, Some(0));
    assert!(print(&p).contains("  %p = pmalloc 8 !0\n  ret 0 !1\n"));
}

#[test]
fn parse_errors_carry_position() {
    let err = parse("func @main() -> i32 {\nentry:\n  %x = const.i32 1\n  %y = add.i32 %x, $\n}\n").unwrap_err();
    assert_eq!(
        err,
        IrError::Parse {
            line: 4,
            col: 20,
            msg: "unexpected character '$'".to_string()
        }
    );
    match parse("global @g x\n").unwrap_err() {
        IrError::Parse { line: 1, col: 11, .. } => {}
        other => panic!("{other:?}"),
    }
}

fn rejects(src: &str, needle: &str) {
    match load(src) {
        Ok(_) => panic!("accepted:\n{src}"),
        Err(e) => assert!(e.to_string().contains(needle), "error '{e}' lacks '{needle}'"),
    }
}

fn wrap(body: &str) -> String {
    format!("func @main() -> i32 {{\nentry:\n{body}\n}}\n")
}

#[test]
fn validation_errors() {
    rejects("func @f() -> i32 {\nentry:\n  ret 0\n}\n", "no @main");
    rejects(&wrap("  %x = const.i32 1"), "terminator");
    rejects(&wrap("  ret 0\n  ret 0"), "middle");
    rejects(&wrap("  %x = const.i32 1\n  %x = const.i32 2\n  ret 0"), "more than once");
    rejects(&wrap("  %y = add.i32 %x, 1\n  %x = const.i32 1\n  ret 0"), "dominate");
    rejects(&wrap("  %x = load.i32 %nope\n  ret 0"), "never defined");
    rejects(&wrap("  %x = const.i64 1\n  ret %x"), "type i64");
    rejects(&wrap("  %p = malloc 8\n  %q = add.i32 %p, 1\n  ret 0"), "type ptr");
    rejects(&wrap("  br next\nnext:\n  %a = alloca 4\n  ret 0"), "alloca outside");
    rejects(&wrap("  ret 0\ndead:\n  ret 1"), "unreachable");
    rejects(&wrap("  br missing"), "undefined label");
    rejects(&format!("extern @system(ptr) -> i32\n{}", wrap("  ret 0")), "unknown external");
    rejects(&format!("extern @strlen(ptr) -> i32\n{}", wrap("  ret 0")), "wrong signature");
    rejects(&wrap("  %x = call @nothing()\n  ret 0"), "undeclared");
    rejects(&wrap("  %c = const.i32 1\n  cbr %c, a, b\na:\n  br j\nb:\n  br j\nj:\n  %v = phi.i32 [1, a]\n  ret %v"), "misses");
    rejects(&wrap("  %p = inttoptr 5\n  %x = const.ptr 7\n  ret 0"), "null");
    rejects(&wrap("  %x = frob.i32 1\n  ret 0"), "unknown instruction");
    rejects("func @main(%a: i32) -> i32 {\nentry:\n  ret %a\n}\n", "no arguments");
    rejects(&format!("global @g 4\nglobal @g 8\n{}", wrap("  ret 0")), "twice");
}

#[test]
fn phi_edge_dominance() {
    let ok = wrap(
        "  %c = const.i32 1\n  cbr %c, a, b\na:\n  %x = const.i32 5\n  br j\nb:\n  br j\nj:\n  %v = phi.i32 [%x, a], [0, b]\n  ret %v",
    );
    load(&ok).unwrap();
    let bad = wrap(
        "  %c = const.i32 1\n  cbr %c, a, b\na:\n  %x = const.i32 5\n  br j\nb:\n  br j\nj:\n  %v = phi.i32 [0, a], [%x, b]\n  ret %v",
    );
    rejects(&bad, "phi edge");
}

/// Random straight-line programs over a small instruction menu.
fn arb_program() -> impl Strategy<Value = String> {
    proptest::collection::vec((0u8..8, any::<i16>(), 0usize..64), 1..30).prop_map(|steps| {
        let mut ints: Vec<String> = vec!["%seed".to_string()];
        let mut ptrs: Vec<String> = Vec::new();
        let mut lines = vec!["  %seed = const.i32 3".to_string(), "  %slot = alloca 16".to_string()];
        ptrs.push("%slot".to_string());
        for (n, (kind, imm, pick)) in steps.into_iter().enumerate() {
            let int = ints[pick % ints.len()].clone();
            let ptr = ptrs[pick % ptrs.len()].clone();
            let line = match kind {
                0 => {
                    ints.push(format!("%v{n}"));
                    format!("  %v{n} = const.i32 {imm}")
                }
                1 => {
                    let op = BinOp::ALL[pick % BinOp::ALL.len()].name();
                    ints.push(format!("%v{n}"));
                    format!("  %v{n} = {op}.i32 {int}, {imm}")
                }
                2 => {
                    let pred = Pred::ALL[pick % Pred::ALL.len()].name();
                    ints.push(format!("%v{n}"));
                    format!("  %v{n} = icmp.{pred}.i32 {imm}, {int}")
                }
                3 => {
                    ptrs.push(format!("%p{n}"));
                    format!("  %p{n} = gep {ptr}, {imm}")
                }
                4 => {
                    ints.push(format!("%v{n}"));
                    format!("  %v{n} = load.i32 {ptr}")
                }
                5 => format!("  store.i8 {ptr}, {int}"),
                6 => {
                    ptrs.push(format!("%p{n}"));
                    format!("  %p{n} = malloc {}", imm.unsigned_abs())
                }
                _ => {
                    ints.push(format!("%v{n}"));
                    format!("  %w{n} = sext.i64 {int}\n  %v{n} = trunc.i32 %w{n}")
                }
            };
            lines.push(line);
        }
        lines.push(format!("  ret {}", ints.last().unwrap()));
        wrap(&lines.join("\n"))
    })
}

proptest! {
    #[test]
    fn generated_programs_round_trip(src in arb_program()) {
        let p = load(&src).unwrap();
        let printed = print(&p);
        let q = load(&printed).unwrap();
        prop_assert_eq!(&p, &q);
        prop_assert_eq!(printed, print(&q));
    }
}
