use std::path::Path;
use std::process::{Command, Output};

fn tokenview(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokenview"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_and_usage_errors() {
    let o = tokenview(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for cmd in ["gen-data", "train", "eval", "synth", "probe", "sweep-ref-pose", "grad-check"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    let o = tokenview(&["train", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("--resume"));

    assert_eq!(tokenview(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(tokenview(&["nope"]).status.code(), Some(1));
    assert_eq!(tokenview(&[]).status.code(), Some(1));
    assert_eq!(tokenview(&["train", "--config", "c", "--stage", "3"]).status.code(), Some(1));
}

#[test]
fn missing_config_is_runtime_error() {
    let o = tokenview(&["train", "--config", "missing.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.cfg"), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("x.ckpt");
    std::fs::write(&ck, b"not a checkpoint").unwrap();
    let o = tokenview(&["eval", "--checkpoint", ck.to_str().unwrap(), "--dataset", "d"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
}

fn write_config(dir: &Path, data: &Path) -> std::path::PathBuf {
    let cfg = dir.join("run.cfg");
    let text = format!(
        "# micro run\n\
         image_size = 16\n\
         encoder_channels = 4,8\n\
         token_conv_layers = 2\n\
         volume_size = 4\n\
         volume_channels = 2\n\
         lift_channels = 4\n\
         decoder_channels = 4,4\n\
         discriminator_channels = 4,8\n\
         batch_size = 2\n\
         stage1_steps = 3\n\
         stage2_steps = 2\n\
         log_interval = 1\n\
         precision = 64\n\
         dataset = {}\n",
        data.display()
    );
    std::fs::write(&cfg, text).unwrap();
    cfg
}

#[test]
fn end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let s = |p: &Path| p.to_str().unwrap().to_string();

    let o = tokenview(&[
        "gen-data", "--objects", "6", "--size", "16", "--azimuths", "4", "--elevations", "0,10", "--seed", "7", "--out",
        &s(&data),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(data.join("manifest.tsv").exists());

    let cfg = write_config(d, &data);
    let ck = d.join("ck");
    let o = tokenview(&["train", "--config", &s(&cfg), "--out", &s(&ck)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stage2 = ck.join("stage2.ckpt");
    assert!(ck.join("stage1.ckpt").exists() && stage2.exists());
    let log = std::fs::read_to_string(ck.join("loss_stage1.tsv")).unwrap();
    assert_eq!(log.lines().count(), 4);

    // Resuming stage 1 with the same schedule rewrites an identical checkpoint.
    let stage1 = ck.join("stage1.ckpt");
    let before = std::fs::read(&stage1).unwrap();
    let o = tokenview(&["train", "--config", &s(&cfg), "--stage", "1", "--resume", &s(&stage1), "--out", &s(&ck)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(&stage1).unwrap(), before);

    let report = d.join("report.tsv");
    let o = tokenview(&["eval", "--checkpoint", &s(&stage2), "--dataset", &s(&data), "--out", &s(&report)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("object\tsrc_az\tsrc_el\ttgt_az\ttgt_el\tL1\tSSIM\n"));
    let o = tokenview(&["eval", "--checkpoint", &s(&stage2), "--dataset", &s(&data), "--out", &s(&report)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&report).unwrap(), text);

    let input = data.join("views/obj0000/90_10.ppm");
    let out = d.join("synth");
    let o = tokenview(&[
        "synth", "--checkpoint", &s(&stage2), "--input", &s(&input), "--pose", "0,0", "--pose", "180,20", "--out",
        &s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("synth_0_0.ppm").exists() && out.join("synth_180_20.ppm").exists());
    assert!(out.join("mosaic.ppm").exists());

    let o = tokenview(&[
        "probe", "--checkpoint", &s(&stage2), "--dataset", &s(&data), "--object", "obj0001", "--out", &s(&d.join("p")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(d.join("p/probe_obj0001.ppm").exists());
    let o = tokenview(&["probe", "--checkpoint", &s(&stage2), "--dataset", &s(&data), "--object", "obj0099"]);
    assert_eq!(o.status.code(), Some(2));

    let o = tokenview(&["sweep-ref-pose", "--config", &s(&cfg), "--pose", "0,0", "--out", &s(&d.join("sw"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let sweep = std::fs::read_to_string(d.join("sw/sweep.tsv")).unwrap();
    assert_eq!(sweep.lines().count(), 2);
    assert!(sweep.starts_with("pose\tL1\tSSIM\n0_0\t"));
}

#[test]
fn grad_check_passes() {
    let o = tokenview(&["grad-check", "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().skip(1).all(|l| l.ends_with("pass")));
}
