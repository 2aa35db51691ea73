use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtlgraph::checkpoint;

fn mtlgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtlgraph")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_SPEC: &str = "tasks = 3
shared_patterns = 6
private_patterns = 2
filler_vocab = 20
min_len = 3
max_len = 6
train = 24
dev = 8
test = 8
";

fn small_config(dir: &Path, mode: &str, epochs: usize) -> PathBuf {
    let path = dir.join(format!("{mode}-{epochs}.toml"));
    fs::write(
        &path,
        format!("mode = \"{mode}\"\nhidden = 6\nembed_dim = 5\nbatch_size = 4\nepochs = {epochs}\n"),
    )
    .unwrap();
    path
}

/// Three small synthetic tasks under `dir/data`.
fn synth_data(dir: &Path) -> PathBuf {
    let spec = dir.join("spec.toml");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let data = dir.join("data");
    let out = mtlgraph(&["gen-synth", "--out", p(&data), "--seed", "3", "--config", p(&spec)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    data
}

fn train(dir: &Path, data: &Path, mode: &str, extra: &[&str]) -> PathBuf {
    let out_dir = dir.join(format!("run-{mode}"));
    let cfg = small_config(dir, mode, 2);
    let mut args = vec!["train", "--config", p(&cfg), "--data", p(data), "--out", p(&out_dir)];
    args.extend_from_slice(extra);
    let out = mtlgraph(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    out_dir
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtlgraph(&["train", "--config", "/nonexistent.toml", "--data", ".", "--out", "x"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("not found"));
    assert_eq!(code(&mtlgraph(&["bogus-command"])), 1);
    assert_eq!(code(&mtlgraph(&["grad-check", "--scope", "nope"])), 1);

    let data = synth_data(dir.path());
    let cfg = small_config(dir.path(), "sg", 1);
    let out = mtlgraph(&[
        "train", "--config", p(&cfg), "--data", p(&data), "--out", p(&dir.path().join("o")),
        "--mode", "cg", "--tasks", "1",
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("at least 2 tasks"));
}

#[test]
fn help_exits_0() {
    assert_eq!(code(&mtlgraph(&["--help"])), 0);
}

#[test]
fn missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "sg", 1);
    let out = mtlgraph(&["train", "--config", p(&cfg), "--data", p(&dir.path().join("none")), "--out", "o"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gen_synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(code(&mtlgraph(&["gen-synth", "--out", p(d), "--seed", "7", "--config", p(&spec)])), 0);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 3 * 3 + 1);
    assert!(ta.iter().any(|(f, _)| f == Path::new("task2/dev.tsv")));
    assert_eq!(ta, tb);
}

#[test]
fn train_writes_three_artifacts_and_eval_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_data(dir.path());
    let run = train(dir.path(), &data, "sg", &["--tasks", "2"]);
    for f in ["model.ckpt", "train_log.jsonl", "config.resolved.toml"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let ck = checkpoint::load(&run.join("model.ckpt")).unwrap();
    assert_eq!(ck.model.num_tasks(), 2);

    // The snapshot reproduces the run exactly.
    let again = dir.path().join("again");
    let out = mtlgraph(&[
        "train", "--config", p(&run.join("config.resolved.toml")), "--data", p(&data),
        "--out", p(&again), "--tasks", "2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(run.join("model.ckpt")).unwrap(), fs::read(again.join("model.ckpt")).unwrap());
    assert_eq!(fs::read(run.join("train_log.jsonl")).unwrap(), fs::read(again.join("train_log.jsonl")).unwrap());

    let out = mtlgraph(&["eval", "--model", p(&run.join("model.ckpt")), "--data", p(&data)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["task"], "task0");
    assert_eq!(lines[0]["metric"], "error");
    assert_eq!(lines[1]["split"], "test");
}

#[test]
fn eval_on_memorized_fixture_has_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let task = dir.path().join("data/polarity");
    fs::create_dir_all(&task).unwrap();
    let mut rows = String::new();
    for i in 0..8 {
        rows.push_str(&format!("1\tgood w{i}\n0\tbad w{i}\n"));
    }
    for split in ["train", "dev", "test"] {
        fs::write(task.join(format!("{split}.tsv")), &rows).unwrap();
    }
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "mode = \"single\"\nhidden = 8\nembed_dim = 8\nepochs = 30\npatience = 30\ninit_range = 0.3\n").unwrap();
    let run = dir.path().join("run");
    let out = mtlgraph(&["train", "--config", p(&cfg), "--data", p(&dir.path().join("data")), "--out", p(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = mtlgraph(&["eval", "--model", p(&run.join("model.ckpt")), "--data", p(&dir.path().join("data"))]);
    let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(line["metric"], "error");
    assert_eq!(line["value"], 0.0);
}

#[test]
fn transfer_needs_a_shared_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_data(dir.path());
    let cg = train(dir.path(), &data, "cg", &[]);
    let cfg = small_config(dir.path(), "sg", 1);
    let out = mtlgraph(&[
        "transfer", "--pretrained", p(&cg.join("model.ckpt")), "--data", p(&data.join("task2")),
        "--config", p(&cfg), "--out", p(&dir.path().join("t")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no shared encoder"), "{}", stderr(&out));
}

#[test]
fn transfer_writes_frozen_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_data(dir.path());
    let sg = train(dir.path(), &data, "sg", &["--tasks", "2"]);
    let pretrained = checkpoint::load(&sg.join("model.ckpt")).unwrap().model;

    for epochs in [0, 2] {
        let cfg = small_config(dir.path(), "sg", epochs);
        let out_dir = dir.path().join(format!("transfer-{epochs}"));
        let out = mtlgraph(&[
            "transfer", "--pretrained", p(&sg.join("model.ckpt")), "--data", p(&data.join("task2")),
            "--config", p(&cfg), "--out", p(&out_dir),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out_dir.join("frozen_report.json")).unwrap()).unwrap();
        assert_eq!(report["identical"], true);
        assert_eq!(report["shared_before"], report["shared_after"]);
        assert!(out_dir.join("train_log.jsonl").is_file());

        let model = checkpoint::load(&out_dir.join("model.ckpt")).unwrap().model;
        assert_eq!(model.num_tasks(), 1);
        for name in pretrained.shared_names() {
            let (a, b) = (model.params.by_name(&name).unwrap(), pretrained.params.by_name(&name).unwrap());
            assert!(a.frozen);
            let bits = |t: &mtlgraph::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value), "{name}");
        }
    }
}

#[test]
fn export_attention_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SMALL_SPEC.replace("tasks = 3", "tasks = 4")).unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&mtlgraph(&["gen-synth", "--out", p(&data), "--config", p(&spec)])), 0);
    let input = dir.path().join("sentences.txt");
    fs::write(&input, "g0s1 w3 w4\nw1 unseen-word g0s2 w7\n").unwrap();

    let cg = train(dir.path(), &data, "cg", &[]);
    let out_dir = dir.path().join("attn-cg");
    let out = mtlgraph(&[
        "export-attn", "--model", p(&cg.join("model.ckpt")), "--task", "task1",
        "--input", p(&input), "--out", p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let topk = fs::read_to_string(out_dir.join("task1.topk.tsv")).unwrap();
    let lines: Vec<&str> = topk.lines().filter(|l| !l.is_empty()).collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[4].starts_with("unseen-word\t"));
    for l in &lines {
        // Default top 3 of the three source tasks; never the target itself.
        assert_eq!(l.split('\t').count(), 4, "{l}");
        assert!(!l.contains("task1:"));
    }

    let sg = train(dir.path(), &data, "sg", &[]);
    let out_dir = dir.path().join("attn-sg");
    let out = mtlgraph(&[
        "export-attn", "--model", p(&sg.join("model.ckpt")), "--input", p(&input), "--out", p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let parsed = mtlgraph::interpret::parse_attn_tsv(&fs::read_to_string(out_dir.join("task0.attn.tsv")).unwrap(), 0).unwrap();
    assert_eq!(parsed.len(), 2);
    assert_eq!(parsed[1].tokens.len(), 4);
    let exact = mtlgraph::interpret::from_jsonl(&fs::read_to_string(out_dir.join("task0.attn.jsonl")).unwrap()).unwrap();
    assert!(exact.iter().all(|e| e.max_row_deviation() <= 1e-9));
}

#[test]
fn grad_check_exit_codes() {
    let out = mtlgraph(&["grad-check"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 6);

    let out = mtlgraph(&["grad-check", "--scope", "crf"]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1);
    assert!(stdout.starts_with("crf"));

    let out = mtlgraph(&["grad-check", "--corrupt", "fused"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("fused"));
}
