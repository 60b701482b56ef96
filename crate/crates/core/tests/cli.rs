//! End-to-end runs of the `iochain` binary.

use std::path::Path;
use std::process::{Command, Output};

use iochain::bench::CSV_HEADER;
use iochain::btree;
use iochain::sfunc;

fn iochain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iochain")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn build_tree_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.btx");
    let b = dir.path().join("b.btx");
    let oa = iochain(&["build-tree", "--depth", "3", "--fanout", "31", "--out", p(&a)]);
    let ob = iochain(&["build-tree", "--depth", "3", "--fanout", "31", "--out", p(&b)]);
    assert_eq!(oa.status.code(), Some(0), "{}", stderr(&oa));
    assert_eq!(stdout(&oa), stdout(&ob));
    assert!(stdout(&oa).contains("depth=3 fanout=31 pages=993"), "{}", stdout(&oa));
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(bytes.len(), 993 * 512);
    // Every stored key is found by the plain traversal.
    let img = btree::TreeImage::from_bytes(bytes, 512).unwrap();
    let pairs = btree::collect_pairs(&img).unwrap();
    assert_eq!(pairs.len(), 31 * 31 * 31);
    for (&k, &v) in pairs.iter().step_by(97) {
        assert_eq!(btree::lookup_user(&img, k).unwrap().value, Some(v));
    }
}

#[test]
fn build_tree_rejects_bad_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.btx");
    let o = iochain(&["build-tree", "--keys", "100", "--depth", "2", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = iochain(&["build-tree", "--keys", "5", "--depth", "4", "--fanout", "2", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.sf");
    std::fs::write(&good, sfunc::disassemble(&btree::compile_lookup(77))).unwrap();
    let o = iochain(&["verify", p(&good)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("ok: "));

    let bin = dir.path().join("good.sfn");
    std::fs::write(&bin, sfunc::encode(&btree::compile_lookup(77))).unwrap();
    assert_eq!(iochain(&["verify", p(&bin)]).status.code(), Some(0));

    let bad = dir.path().join("bad.sf");
    std::fs::write(&bad, "jeq r0, r1, -1\nloadw r2, _, 510\nmovi r0, _, 1\n").unwrap();
    let o = iochain(&["verify", p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    for reason in ["backward-jump", "out-of-bounds", "missing-terminator"] {
        assert!(text.contains(reason), "{reason} missing from {text}");
    }

    let garbage = dir.path().join("garbage.sf");
    std::fs::write(&garbage, "frobnicate r0\n").unwrap();
    assert_eq!(iochain(&["verify", p(&garbage)]).status.code(), Some(2));
    assert_eq!(iochain(&["verify", p(&dir.path().join("missing.sf"))]).status.code(), Some(2));
}

const SMALL_BENCH: &str = "[bench]\ndepth = 2,4\nworkers = 1,6\nmode = baseline,driver\nduration_ms = 1\n";

#[test]
fn bench_unknown_key_fails_closed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("b.ini");
    std::fs::write(&cfg, "[bench]\ndepth = 3\nwokers = 4\n").unwrap();
    let o = iochain(&["bench", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("wokers"), "{}", stderr(&o));
    std::fs::write(&cfg, "[benchmark]\n").unwrap();
    assert_eq!(iochain(&["bench", p(&cfg)]).status.code(), Some(2));
}

#[test]
fn bench_csv_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("b.ini");
    std::fs::write(&cfg, SMALL_BENCH).unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for csv in [&a, &b] {
        let o = iochain(&["--seed", "9", "bench", p(&cfg), "--csv", p(csv)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    // modes x depths x workers
    assert_eq!(lines.len() - 1, 2 * 2 * 2);
    let cols = CSV_HEADER.split(',').count();
    assert!(lines[1..].iter().all(|l| l.split(',').count() == cols));
    assert!(lines[1].starts_with("run-0001,baseline,2,1,0,"));

    // Appending keeps a single header.
    iochain(&["--seed", "9", "bench", p(&cfg), "--csv", p(&a)]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 1 + 16);
    assert_eq!(text.matches("run_id").count(), 1);
}

#[test]
fn bench_uring_rows_carry_batch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("u.ini");
    std::fs::write(&cfg, "[bench]\ndepth = 3\nworkers = 2\nmode = syscall\nio = uring\nbatch = 1,8\nduration_ms = 1\n").unwrap();
    let csv = dir.path().join("u.csv");
    let o = iochain(&["bench", p(&cfg), "--csv", p(&csv)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let batches: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(4).unwrap()).collect();
    assert_eq!(batches, ["1", "8"]);
}

#[test]
fn scattered_image_takes_split_path() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("big.btx");
    let o = iochain(&[
        "build-tree", "--keys", "3000", "--fanout", "40", "--page-size", "4096", "--out", p(&img), "--scatter", "9",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("extents=9"), "{}", stdout(&o));
    let fragment = std::fs::read_to_string(dir.path().join("big.btx.extents")).unwrap();
    let cfg = dir.path().join("s.ini");
    std::fs::write(&cfg, format!("{fragment}[bench]\nworkers = 2\nmode = driver\nduration_ms = 2\n")).unwrap();
    let o = iochain(&["bench", p(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = stdout(&o);
    let splits: u64 = summary
        .split_whitespace()
        .find_map(|f| f.strip_prefix("splits="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(splits > 0, "{summary}");
    assert!(summary.contains("aborts=0"));
}

#[test]
fn figures_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let o = iochain(&["figures", "--out", p(d), "--duration-ms", "1"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for name in ["fig3a.csv", "fig3b.csv", "fig3c.csv", "fig3d.csv"] {
        let x = std::fs::read(a.join(name)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(iochain(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(iochain(&["bench"]).status.code(), Some(2));
    assert_eq!(iochain(&["--help"]).status.code(), Some(0));
}
