use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use pqmatt::data::{align_records, read_tsv};
use pqmatt::metrics::EvalReport;
use pqmatt::model_store;
use pqmatt::training::evaluate;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pqmatt"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn pqmatt")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{:?} failed: {}", args, stderr(&o));
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    /// 32 training examples.
    small: PathBuf,
    /// Float model overfit on `small`, with learned ranges.
    model: PathBuf,
    quantized: PathBuf,
}

const OVERFIT: &[&str] = &["--set", "total_steps=300", "--set", "warmup_steps=30", "--set", "dropout=0", "--set", "log_every=0"];

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["gen-data", "--out", p(&root.join("data")), "--size", "400", "--seed", "3"]);
        let train = fs::read_to_string(root.join("data/train.tsv")).unwrap();
        let small = root.join("small.tsv");
        fs::write(&small, train.lines().take(32).map(|l| format!("{}\n", l)).collect::<String>()).unwrap();
        let model = root.join("model.pqmt");
        let mut args = vec!["train", "--data", p(&small), "--out", p(&model), "--quantize", "--seed", "5"];
        args.extend_from_slice(OVERFIT);
        ok(&args);
        let quantized = root.join("model.q.pqmt");
        ok(&["quantize", "--model-in", p(&model), "--model-out", p(&quantized)]);
        Fixture {
            _dir: dir,
            root,
            small,
            model,
            quantized,
        }
    })
}

fn report_value(out: &str, key: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{}\t", key)))
        .unwrap_or_else(|| panic!("no `{}` in {}", key, out))
        .parse()
        .unwrap()
}

#[test]
fn missing_data_is_a_usage_error() {
    let o = run(&["train", "--out", "x.pqmt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--data") && stderr(&o).contains("Usage"));
    assert!(o.stdout.is_empty());
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_data_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.tsv");
    fs::write(&bad, "call mom\t[IN:CREATE_CALL [SL:CONTACT mom ] ]\nno tab here\n").unwrap();
    let o = run(&["train", "--data", p(&bad), "--out", p(&dir.path().join("m.pqmt"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    let o = run(&["train", "--data", p(&bad), "--out", "m", "--set", "bogus=1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn overfit_run_reaches_full_exact_match() {
    let f = fixture();
    let out = ok(&["eval", "--model", p(&f.model), "--data", p(&f.small), "--topk", "4"]);
    assert_eq!(report_value(&out, "examples"), 32.0);
    assert_eq!(report_value(&out, "exact_match_top1"), 1.0, "{}", out);
    let ems: Vec<f64> = (1..=4).map(|k| report_value(&out, &format!("exact_match_top{}", k))).collect();
    assert!(ems.windows(2).all(|w| w[0] <= w[1]));
    for line in out.lines() {
        assert_eq!(line.split('\t').count(), 2, "{}", line);
    }
}

#[test]
fn eval_matches_library_and_writes_report() {
    let f = fixture();
    let report_path = f.root.join("report.json");
    let out = ok(&[
        "eval",
        "--model",
        p(&f.quantized),
        "--data",
        p(&f.root.join("data/dev.tsv")),
        "--topk",
        "3",
        "--report",
        p(&report_path),
        "--require-quantized",
    ]);
    let file = EvalReport::from_json(&fs::read_to_string(&report_path).unwrap()).unwrap();
    let loaded = model_store::load(&f.quantized).unwrap();
    let records = read_tsv(&f.root.join("data/dev.tsv")).unwrap();
    let (examples, dropped) = align_records(&records, &loaded.model().vocab);
    assert!(dropped.is_empty());
    let lib = evaluate(&loaded.engine().unwrap(), &examples, 3).unwrap();
    assert_eq!(file, lib);
    assert_eq!(out.replace('\t', "="), lib.to_key_value());
}

#[test]
fn eval_errors() {
    let f = fixture();
    let o = run(&["eval", "--model", p(&f.model), "--data", p(&f.small), "--require-quantized"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["eval", "--model", p(&f.model), "--data", p(&f.small), "--topk", "9"]);
    assert_eq!(o.status.code(), Some(1));
    // A label the model has never seen.
    let odd = f.root.join("odd.tsv");
    fs::write(&odd, "play jazz\t[IN:PLAY_JAZZ [SL:GENRE jazz ] ]\n").unwrap();
    let o = run(&["eval", "--model", p(&f.model), "--data", p(&odd)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn parse_output() {
    let f = fixture();
    let line = fs::read_to_string(&f.small).unwrap().lines().next().unwrap().to_string();
    let (query, gold) = line.split_once('\t').unwrap();
    let top4 = ok(&["parse", "--model", p(&f.model), "--query", query, "--topk", "4"]);
    let top1 = ok(&["parse", "--model", p(&f.model), "--query", query, "--topk", "1"]);
    assert_eq!(top1.lines().next(), top4.lines().next());
    let (lp, tree) = top1.trim_end().split_once('\t').unwrap();
    assert!(lp.parse::<f64>().unwrap() <= 0.0);
    assert_eq!(tree, gold);
    // Every leaf word comes from the query.
    let words: Vec<&str> = query.split_whitespace().collect();
    for tok in tree.split_whitespace().filter(|t| !t.starts_with('[') && *t != "]") {
        assert!(words.contains(&tok), "{}", tok);
    }
    let q = ok(&["parse", "--model", p(&f.quantized), "--query", query]);
    assert_eq!(q.trim_end().split_once('\t').unwrap().1, gold);
    let o = run(&["parse", "--model", p(&f.model), "--query", "   "]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn quantize_guards() {
    let f = fixture();
    let o = run(&["quantize", "--model-in", p(&f.quantized), "--model-out", p(&f.root.join("qq.pqmt"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("already quantized"));
    let out = ok(&["quantize", "--model-in", p(&f.model), "--model-out", p(&f.root.join("q2.pqmt"))]);
    assert!(report_value(&out, "ratio") < 0.3);
    assert_eq!(fs::read(f.root.join("q2.pqmt")).unwrap(), fs::read(&f.quantized).unwrap());

    // Trained without --quantize: no ranges.
    let plain = f.root.join("plain.pqmt");
    ok(&["train", "--data", p(&f.small), "--out", p(&plain), "--set", "total_steps=3", "--set", "warmup_steps=1", "--set", "log_every=0"]);
    let o = run(&["quantize", "--model-in", p(&plain), "--model-out", p(&f.root.join("x.pqmt"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("enc.bottleneck:in"), "{}", stderr(&o));
}

#[test]
fn fixed_seed_gives_identical_checkpoints() {
    let f = fixture();
    let a = f.root.join("seed_a.pqmt");
    let b = f.root.join("seed_b.pqmt");
    let c = f.root.join("seed_c.pqmt");
    for (out, seed) in [(&a, "11"), (&b, "11"), (&c, "12")] {
        ok(&["train", "--data", p(&f.small), "--out", p(out), "--quantize", "--seed", seed, "--set", "total_steps=6", "--set", "warmup_steps=2", "--set", "qat_start=0.5", "--set", "log_every=0"]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn config_file_and_overrides() {
    let f = fixture();
    let cfg = f.root.join("run.cfg");
    fs::write(&cfg, "# tiny run\nmodel=tiny\ntotal_steps=4\nwarmup_steps=1\nbatch_size=8\nlog_every=1\n").unwrap();
    let out = f.root.join("cfg.pqmt");
    let o = run(&["train", "--data", p(&f.small), "--config", p(&cfg), "--set", "total_steps=5", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = stderr(&o);
    assert!(log.contains("step=5 ") && !log.contains("step=6 "), "{}", log);
    assert!(stdout(&o).starts_with("model\t"));
    let params = ok(&["params", "--model", p(&out)]);
    let tiny = ok(&["params", "--preset", "tiny", "--vocab-size", &model_store::load(&out).unwrap().model().vocab.len().to_string()]);
    assert_eq!(params, tiny);
}

#[test]
fn params_and_gradcheck() {
    let out = ok(&["params"]);
    let total = report_value(&out, "total");
    assert!((3.0e6..=3.6e6).contains(&total));
    assert_eq!(report_value(&out, "projection"), 0.0);
    assert_eq!(report_value(&out, "bottleneck"), 262_400.0);
    let g = ok(&["gradcheck"]);
    assert!(g.contains("result\tpass"), "{}", g);
    let o = run(&["gradcheck", "--tolerance", "1e-12"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["gen-data", "--out", p(&a), "--size", "100", "--seed", "4"]);
    ok(&["gen-data", "--out", p(&b), "--size", "100", "--seed", "4"]);
    for f in ["train.tsv", "dev.tsv", "test.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    assert_eq!(run(&["gen-data", "--out", p(&a), "--size", "3"]).status.code(), Some(1));
}
