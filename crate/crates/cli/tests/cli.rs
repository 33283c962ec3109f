use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use crnet_cli::config::{RunConfig, KEYS};
use crnet_core::io::read_tensor_file;
use crnet_core::model::DEFAULT_PARAM_COUNT;
use crnet_core::synth::read_dataset;

fn crnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crnet"))
        .args(args)
        .env("CRNET_THREADS", "1")
        .output()
        .expect("spawn crnet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, count: &str, seed: &str) -> Output {
    crnet(&["gen", "--preset", "desk", "--out", s(dir), "--count", count, "--seed", seed])
}

#[test]
fn gen_is_byte_deterministic_and_loadable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = gen(d, "4", "9");
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(stdout(&o).lines().count(), 5);
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?}");
    }
    let set = read_dataset(&a).unwrap();
    assert_eq!(set.len(), 4);
    assert_eq!(set[0].stack.extent(), (32, 32));
}

#[test]
fn gen_rejects_zero_count_and_non_empty_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gen(tmp.path(), "0", "0");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]"), "{}", stderr(&o));

    fs::write(tmp.path().join("keep.txt"), "x").unwrap();
    let o = gen(tmp.path(), "1", "0");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not empty"));
    let o = crnet(&["gen", "--preset", "desk", "--out", s(tmp.path()), "--count", "1", "--force"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

/// Keys listed by `--help`.
fn help_keys(help: &str) -> BTreeSet<String> {
    help.lines()
        .skip_while(|l| !l.starts_with("Config keys"))
        .skip(1)
        .take_while(|l| l.starts_with("  "))
        .map(|l| l.trim_start().split(" = ").next().unwrap().to_string())
        .collect()
}

#[test]
fn help_lists_exactly_the_accepted_keys() {
    let o = crnet(&["--help"]);
    assert!(o.status.success());
    let listed = help_keys(&stdout(&o));
    let known: BTreeSet<String> = KEYS.iter().map(|(k, _)| k.to_string()).collect();
    assert_eq!(listed, known);

    // every listed key is accepted with its default, anything else is not
    let defaults = RunConfig::default();
    for k in &listed {
        let mut c = RunConfig::default();
        c.set(k, &defaults.get(k).unwrap()).unwrap();
    }
    assert!(RunConfig::default().set("model.nope", "1").is_err());
    assert!(stdout(&o).contains("model.base_channels = 64"));
}

#[test]
fn params_prints_golden_count() {
    let o = crnet(&["params"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().next().unwrap(), format!("total {DEFAULT_PARAM_COUNT}"));
    let parts: usize = out.lines().skip(1).map(|l| l.split_whitespace().nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(parts, DEFAULT_PARAM_COUNT);
    assert!(out.contains("  hfem0 "));
}

#[test]
fn usage_errors_exit_2() {
    let o = crnet(&["params", "--set", "model.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown config key"), "{}", stderr(&o));
    let o = crnet(&["params", "--preset", "huge"]);
    assert_eq!(o.status.code(), Some(2));
    let o = crnet(&["params", "--set", "model.attn_heads=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(crnet(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_data_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = crnet(&["eval", "--data", s(&tmp.path().join("none")), "--ckpt", s(&tmp.path().join("c.crt1a"))]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.starts_with("error[") && err.lines().count() == 1, "{err}");
}

#[test]
fn train_eval_infer_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    assert!(gen(&data, "2", "1").status.success());

    let train = |extra: &[&str]| {
        let mut args = vec!["train", "--preset", "desk", "--data", s(&data), "--out", s(&run)];
        args.extend_from_slice(extra);
        crnet(&args)
    };
    let o = train(&["--set", "train.max_steps=2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.crt1a", "loss.csv", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let o = train(&["--resume", "--set", "train.max_steps=3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");

    // eval picks the model shape up from config.txt beside the checkpoint
    let ckpt = run.join("checkpoint.crt1a");
    let o = crnet(&["eval", "--data", s(&data), "--ckpt", s(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<_> = out.lines().collect();
    assert_eq!(lines[0], "sample_id,psnr_l,psnr_mu,ssim_l,ssim_mu");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("mean,"));

    // a checkpoint for a different model names the offending paths
    let o = crnet(&["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--set", "model.n_ceb=3"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("ceb2"), "{}", stderr(&o));

    let pred = tmp.path().join("pred.crt1");
    let stack = data.join("s00000.crt1a");
    let o = crnet(&["infer", "--stack", s(&stack), "--ckpt", s(&ckpt), "--out", s(&pred), "--zero-flow"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = read_tensor_file(&pred).unwrap();
    assert_eq!(t.shape(), [4, 32, 32]);
    let values = t.to_f64_vec();
    for c in 0..4 {
        let pfm = fs::read(tmp.path().join(format!("pred_c{c}.pfm"))).unwrap();
        let header = b"Pf\n32 32\n-1.0\n";
        assert_eq!(&pfm[..header.len()], header);
        assert_eq!(pfm.len(), header.len() + 32 * 32 * 4);
        // the first stored row is the bottom image row
        let first = f32::from_le_bytes(pfm[header.len()..header.len() + 4].try_into().unwrap());
        assert_eq!(first as f64, values[c * 1024 + 31 * 32]);
    }
}

#[test]
fn ablate_runs_a_named_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, "1", "2").status.success());
    let out = tmp.path().join("abl");
    let o = crnet(&[
        "ablate", "--preset", "desk", "--variant", "mbb_2_2", "--data", s(&data), "--out", s(&out), "--set",
        "train.max_steps=2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().nth(1).unwrap().starts_with("mbb_2_2,"), "{text}");
    assert!(out.join("mbb_2_2").join("checkpoint.crt1a").exists());

    let o = crnet(&["ablate", "--variant", "nope", "--data", s(&data), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("recurrent"));
}
