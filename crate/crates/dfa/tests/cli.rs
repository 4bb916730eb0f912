use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use dfa::artifacts::{self, Checkpoint};
use dfa::cli;
use dfa::report;
use dfa::run::RunSummary;

const SMALL: &str = "\
[dataset]
n_classes = 3
n_source = 60
n_unlabeled = 60
shots = 2

[model]
hidden = [16]
feature_dim = 8

[optimizer]
iterations = 40

[train]
eval_interval = 10
unlabeled_batch = 16
labeled_batch = 12
";

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn dfa(args: &[&str]) -> i32 {
    let mut all = vec!["dfa"];
    all.extend_from_slice(args);
    cli::main_with(all, &[])
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dfa"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn resolved_config_reproduces_metrics_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(dfa(&["run", "-c", s(&cfg), "--seeds", "3,4", "--set", "gamma=0.25", "--out", s(&a)]), 0);
    let resolved = a.join("resolved_config.toml");
    assert_eq!(dfa(&["run", "-c", s(&resolved), "--out", s(&b)]), 0);
    for seed in [3, 4] {
        let ma = fs::read(a.join(format!("seed-{seed}/metrics.jsonl"))).unwrap();
        let mb = fs::read(b.join(format!("seed-{seed}/metrics.jsonl"))).unwrap();
        assert_eq!(ma, mb);
        let ca = fs::read(a.join(format!("seed-{seed}/checkpoint.json"))).unwrap();
        let cb = fs::read(b.join(format!("seed-{seed}/checkpoint.json"))).unwrap();
        assert_eq!(ca, cb);
    }
}

#[test]
fn zero_weight_dfa_matches_source_target_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let st = tmp.path().join("st");
    let z = tmp.path().join("zero");
    assert_eq!(dfa(&["run", "-c", s(&cfg), "--mode", "s+t", "--seeds", "1", "--out", s(&st)]), 0);
    assert_eq!(
        dfa(&["run", "-c", s(&cfg), "--mode", "dfa", "--seeds", "1", "--set", "alpha1=0", "alpha2=0", "alpha3=0", "--out", s(&z)]),
        0
    );
    let a: RunSummary = artifacts::read_json(&st.join("summary.json")).unwrap();
    let b: RunSummary = artifacts::read_json(&z.join("summary.json")).unwrap();
    assert_eq!(a.mean_accuracy.to_bits(), b.mean_accuracy.to_bits());
    assert_eq!(a.seeds[0].per_class, b.seeds[0].per_class);
}

#[test]
fn missing_class_count_is_named_with_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[dataset]\nn_source = 50\n");
    let out = binary().args(["run", "-c", s(&cfg), "--out", s(&tmp.path().join("r"))]).output().unwrap();
    assert_eq!(out.status.code(), Some(cli::EXIT_CONFIG));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dataset.n_classes"), "{err}");
    assert!(err.contains("config.toml:1"), "{err}");
}

#[test]
fn unknown_key_reports_file_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}\n[bank]\ngama = 0.3\n"));
    let out = binary().args(["run", "-c", s(&cfg)]).output().unwrap();
    assert_eq!(out.status.code(), Some(cli::EXIT_CONFIG));
    let err = String::from_utf8_lossy(&out.stderr);
    let line = SMALL.lines().count() + 3;
    assert!(err.contains(&format!("config.toml:{line}:")), "{err}");
}

#[test]
fn divergence_exits_nonzero_with_abort_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out_dir = tmp.path().join("r");
    let out = binary()
        .args(["run", "-c", s(&cfg), "--set", "optimizer.lr=1e150", "--out", s(&out_dir)])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(cli::EXIT_NON_FINITE));
    let abort: serde_json::Value = artifacts::read_json(&out_dir.join("seed-0/abort.json")).unwrap();
    assert!(abort["iteration"].as_u64().is_some());
    assert!(!out_dir.join("summary.json").exists());
}

#[test]
fn environment_overrides_apply_below_set_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out_dir = tmp.path().join("r");
    let env = vec![
        ("DFA__OPTIMIZER__ITERATIONS".to_string(), "20".to_string()),
        ("DFA__BANK__GAMMA".to_string(), "0.5".to_string()),
    ];
    let args = ["dfa", "run", "-c", s(&cfg), "--set", "gamma=0.25", "--out", s(&out_dir)];
    assert_eq!(cli::main_with(args, &env), 0);
    let resolved = fs::read_to_string(out_dir.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("iterations = 20"));
    assert!(resolved.contains("gamma = 0.25"));
}

#[test]
fn artifacts_cover_checkpoints_bank_log_and_dataset_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out_dir = tmp.path().join("r");
    let dump = tmp.path().join("dump");
    let code = dfa(&[
        "run",
        "-c",
        s(&cfg),
        "--set",
        "train.checkpoint_interval=20",
        "train.bank_log=true",
        "--out",
        s(&out_dir),
        "--dataset-dump",
        s(&dump),
    ]);
    assert_eq!(code, 0);
    let seed = out_dir.join("seed-0");
    for it in [20, 40] {
        let ck = Checkpoint::load(&seed.join(format!("checkpoints/iter-{it:06}.json"))).unwrap();
        assert_eq!(ck.iteration, it);
    }
    let last = Checkpoint::load(&seed.join("checkpoints/iter-000040.json")).unwrap();
    assert_eq!(last, Checkpoint::load(&seed.join("checkpoint.json")).unwrap());
    let log = artifacts::read_bank_log(&seed.join("bank_log.jsonl")).unwrap();
    assert!(!log.is_empty());
    assert_eq!(artifacts::read_metrics(&seed.join("metrics.jsonl")).unwrap().len(), 4);

    let single = tmp.path().join("single.tsv");
    assert_eq!(dfa(&["dump-dataset", "-c", s(&cfg), "--seed", "0", "--out", s(&single)]), 0);
    assert_eq!(fs::read(&single).unwrap(), fs::read(dump.join("episode-seed-0.tsv")).unwrap());
}

#[test]
fn exported_embeddings_match_the_run_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out_dir = tmp.path().join("r");
    assert_eq!(dfa(&["run", "-c", s(&cfg), "--seeds", "2", "--out", s(&out_dir)]), 0);
    let exported = tmp.path().join("emb.tsv");
    let ck = out_dir.join("seed-2/checkpoint.json");
    let resolved = out_dir.join("resolved_config.toml");
    assert_eq!(dfa(&["export-embeddings", "-c", s(&resolved), "--checkpoint", s(&ck), "--out", s(&exported)]), 0);
    assert_eq!(fs::read(&exported).unwrap(), fs::read(out_dir.join("seed-2/embeddings.tsv")).unwrap());

    let code = dfa(&["export-embeddings", "-c", s(&resolved), "--set", "gamma=0.5", "--checkpoint", s(&ck), "--out", s(&exported)]);
    assert_eq!(code, cli::EXIT_CONFIG);
}

#[test]
fn sweep_writes_every_table_format() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out_dir = tmp.path().join("sweep");
    let code = dfa(&["sweep-gamma", "-c", s(&cfg), "--gammas", "0.1", "--seeds", "0", "--out", s(&out_dir)]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(out_dir.join("sweep_gamma.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(out_dir.join("sweep_gamma.md").exists());
    let t: dfa::sweep::SweepTable = artifacts::read_json(&out_dir.join("sweep_gamma.json")).unwrap();
    assert_eq!(t.rows.len(), 1);
}

#[test]
fn report_of_one_run_is_its_final_record() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let run = tmp.path().join("r");
    assert_eq!(dfa(&["run", "-c", s(&cfg), "--out", s(&run)]), 0);
    let rep_dir = tmp.path().join("rep");
    assert_eq!(dfa(&["report", s(&run), "--out", s(&rep_dir)]), 0);
    let rep: report::Report = artifacts::read_json(&rep_dir.join("report.json")).unwrap();
    let metrics = artifacts::read_metrics(&run.join("seed-0/metrics.jsonl")).unwrap();
    let last = metrics.last().unwrap();
    assert_eq!(rep.runs[0].seeds[0].final_record(), last);
    assert_eq!(rep.runs[0].mean_accuracy, last.target_accuracy);
    assert_eq!(rep.runs[0].std_accuracy, 0.0);
    assert_eq!(rep.runs[0].mode.as_deref(), Some("dfa"));
    for f in ["report.md", "accuracy.csv", "loss_curves.csv", "selection_curves.csv", "embeddings.csv"] {
        assert!(rep_dir.join(f).exists(), "{f}");
    }
    let curves = fs::read_to_string(rep_dir.join("loss_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + metrics.len());
}

#[test]
fn identical_runs_have_zero_paired_variance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        assert_eq!(dfa(&["run", "-c", s(&cfg), "--seeds", "5,6", "--out", s(d)]), 0);
    }
    let rep = report::build(&[a, b]);
    assert_eq!(rep.paired.len(), 1);
    assert_eq!(rep.paired[0].differences, [0.0, 0.0]);
    assert_eq!(rep.paired[0].std_difference, 0.0);
    assert_eq!(rep.runs[0].mean_accuracy, rep.runs[1].mean_accuracy);
}

#[test]
fn report_names_runs_with_missing_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let good = tmp.path().join("good");
    let broken = tmp.path().join("broken");
    assert_eq!(dfa(&["run", "-c", s(&cfg), "--out", s(&good)]), 0);
    fs::create_dir_all(broken.join("seed-0")).unwrap();
    let rep_dir = tmp.path().join("rep");
    assert_eq!(dfa(&["report", s(&good), s(&broken), "--out", s(&rep_dir)]), cli::EXIT_PARTIAL);
    let rep = report::build(&[good, broken.clone()]);
    assert_eq!(rep.runs.len(), 1);
    assert_eq!(rep.errors.len(), 1);
    assert_eq!(rep.errors[0].0, broken);
    assert!(rep.errors[0].1.contains("missing metrics file"), "{}", rep.errors[0].1);
}
