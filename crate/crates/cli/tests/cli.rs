use std::path::Path;
use std::process::{Command, Output};

fn deglass(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deglass"))
        .args(args)
        .env_remove("DEGLASS_CONFIG")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_lists_every_subcommand_and_flag() {
    let o = deglass(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["synth", "train-mask", "train-removal", "infer", "eval", "ablate"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    let o = deglass(&["ablate", "--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--variant", "--seeds", "--masks-only", "--config", "--set", "--resume"] {
        assert!(text.contains(flag), "{flag} missing from ablate help");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(deglass(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(deglass(&["synth"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let o = deglass(&["train-mask", "--set", "learnin_rate=1", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learnin_rate"), "{}", stderr(&o));
    let o = deglass(&["synth", "--out", p(&dir.path().join("d")), "--set", "glasses.colour=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
    let o = deglass(&["ablate", "--variant", "WO_EVERYTHING", "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn synth_creates_requested_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = deglass(&["-q", "synth", "--n", "10", "--n-real", "2", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_dir(out.join("samples")).unwrap().count(), 10);
    assert!(out.join("manifest.json").exists());
    // refusing to clobber is a runtime error
    let o = deglass(&["-q", "synth", "--n", "10", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        deglass(&["-q", "synth", "--n", "4", "--n-real", "1", "--out", p(&out), "--overwrite"])
            .status
            .success()
    );
}

#[test]
fn infer_with_missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("nothing_here.ckpt");
    let o = deglass(&["infer", "--checkpoint", p(&ck), "--image", "x.png"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nothing_here.ckpt"), "{}", stderr(&o));
}

#[test]
fn end_to_end_train_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let runs = dir.path().join("runs");
    let ok = |o: Output| assert!(o.status.success(), "{}", stderr(&o));
    ok(deglass(&[
        "-q",
        "synth",
        "--n",
        "16",
        "--n-real",
        "4",
        "--out",
        p(&data),
        "--set",
        "split=[0.5, 0.25, 0.25]",
    ]));

    let cfg = dir.path().join("train.toml");
    std::fs::write(
        &cfg,
        "lr = 0.001\nbatch_size = 4\nepochs_mask = 1\nepochs_removal = 1\nbase_channels = 4\nn_residual_blocks = 1\nfeature_channels = 8\nda_blocks = 1\ndisc_channels = 4\n",
    )
    .unwrap();
    let common = ["--config", p(&cfg), "--data", p(&data), "--out", p(&runs)];
    ok(deglass(&[&["-q", "train-mask"][..], &common].concat()));
    let mask_ckpt = runs.join("mask_last.ckpt");
    assert!(mask_ckpt.exists());
    ok(deglass(
        &[&["-q", "train-removal", "--mask-checkpoint", p(&mask_ckpt)][..], &common].concat(),
    ));
    let removal_ckpt = runs.join("removal_last.ckpt");

    let img = std::fs::read_dir(data.join("real")).unwrap().next().unwrap().unwrap().path();
    let out = dir.path().join("clean.png");
    let grid = dir.path().join("grid.png");
    ok(deglass(&[
        "-q",
        "infer",
        "--checkpoint",
        p(&removal_ckpt),
        "--image",
        p(&img),
        "--out",
        p(&out),
        "--debug-grid",
        p(&grid),
    ]));
    assert!(out.exists() && grid.exists());
    // a mask-only checkpoint cannot remove anything
    assert_eq!(
        deglass(&["-q", "infer", "--checkpoint", p(&mask_ckpt), "--image", p(&img)])
            .status
            .code(),
        Some(2)
    );

    let eval_dir = dir.path().join("eval");
    ok(deglass(&[
        "-q",
        "eval",
        "--checkpoint",
        p(&removal_ckpt),
        "--data",
        p(&data),
        "--out",
        p(&eval_dir),
    ]));
    let mut rdr = csv::Reader::from_path(eval_dir.join("eval.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for col in ["glass_iou", "shadow_iou", "l1_intermediate", "l1_final", "psnr_final"] {
        let i = headers.iter().position(|h| h == col).unwrap();
        for r in &rows {
            assert!(r[i].parse::<f64>().is_ok(), "{col} empty in {r:?}");
        }
    }
    assert_eq!(&rows[0][0], "FULL");
}
