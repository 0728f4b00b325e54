mod common;

use radfield::dataset::load_dataset;
use radfield::field::load_checkpoint;
use radfield::mask::MaskSet;
use radfield_serve::cli::run;

use common::{argv, fixture, RECT};

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(argv(&[])), 2);
    assert_eq!(run(argv(&["frobnicate"])), 2);
    assert_eq!(run(argv(&["synth", "--out", "x", "--bogus"])), 2);
    assert_eq!(run(argv(&["mask", "--ckpt", "a", "--view", "0", "--rect", "1,2,3", "--out", "m"])), 2);
    assert_eq!(run(argv(&["synth", "--views", "many", "--out", "x"])), 2);
}

#[test]
fn help_exits_cleanly() {
    assert_eq!(run(argv(&["--help"])), 0);
    assert_eq!(run(argv(&["edit", "--help"])), 0);
}

#[test]
fn domain_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    assert_eq!(run(argv(&["train", "--data", missing.to_str().unwrap(), "--out", "x.rpck"])), 1);
    let out = dir.path().join("ds");
    assert_eq!(run(argv(&["synth", "--scene", "teapot", "--out", out.to_str().unwrap()])), 1);
    assert_eq!(run(argv(&["synth", "--res", "0", "--out", out.to_str().unwrap()])), 1);
    assert_eq!(run(argv(&["synth", "--views", "1", "--out", out.to_str().unwrap()])), 1);
}

#[test]
fn synth_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let code = run(argv(&["synth", "--views", "3", "--res", "12", "--seed", "5", "--out", out.to_str().unwrap()]));
        assert_eq!(code, 0);
    }
    let ds = load_dataset(&a).unwrap();
    assert_eq!(ds.views.len(), 3);
    assert_eq!(ds.resolution(), (12, 12));
    assert_eq!(ds.scene.as_ref().unwrap().rng_seed, 5);
    assert_eq!(ds, load_dataset(&b).unwrap());
}

#[test]
fn train_writes_checkpoint_and_loss_trace() {
    let f = fixture();
    let ck = load_checkpoint(&f.ckpt).unwrap();
    assert_eq!(ck.field.config.feature_dim, 8);
    assert!(ck.adam.is_some());
    let csv = std::fs::read_to_string(format!("{}.loss.csv", f.ckpt.display())).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "step,L_color,L_feature,L_depth,L_unmask,L_clip,grad_sds_norm");
    assert_eq!(lines.count(), 150);
}

#[test]
fn mask_then_edit_then_render() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let masks = dir.path().join("masks");
    let rect = RECT.map(|v| v.to_string()).join(",");
    let code = run(argv(&[
        "mask",
        "--ckpt",
        f.ckpt.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--view",
        "0",
        "--rect",
        &rect,
        "--out",
        masks.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let set = MaskSet::load(&masks).unwrap();
    assert_eq!(set.masks.len(), common::VIEWS);
    assert!(set.masks[0].count() > 0);

    let jobs = dir.path().join("jobs");
    let code = run(argv(&[
        "edit",
        "--base",
        f.ckpt.to_str().unwrap(),
        "--masks",
        masks.to_str().unwrap(),
        "--prompt",
        "a blue sphere on leaves",
        "--bgt",
        "leaves",
        "--steps",
        "6",
        "--out",
        jobs.to_str().unwrap(),
        "--job-id",
        "j1",
    ]));
    assert_eq!(code, 0);
    let job = jobs.join("j1");
    for file in ["final.rpck", "loss.csv", "status.json", "job.json"] {
        assert!(job.join(file).exists(), "{file}");
    }
    let status: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(job.join("status.json")).unwrap()).unwrap();
    assert_eq!(status["phase"], "done");

    let png = dir.path().join("view.png");
    let rpnf = dir.path().join("view.rpnf");
    let code = run(argv(&[
        "render",
        "--ckpt",
        job.join("final.rpck").to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--view",
        "1",
        "--out",
        png.to_str().unwrap(),
        "--rpnf",
        rpnf.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let plane = radfield::planes::Plane::read_rpnf(&rpnf).unwrap();
    assert_eq!((plane.width, plane.height, plane.channels), (common::RES, common::RES, 3));

    let code = run(argv(&[
        "render",
        "--ckpt",
        f.ckpt.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--view",
        "0",
        "--kind",
        "mask",
        "--out",
        png.to_str().unwrap(),
    ]));
    assert_eq!(code, 1, "mask view without a mask set is a domain error");

    let code = run(argv(&[
        "eval",
        "--ckpt",
        f.ckpt.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--masks",
        masks.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
}

#[test]
fn unknown_prompt_fails_before_any_work() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let code = run(argv(&[
        "edit",
        "--base",
        f.ckpt.to_str().unwrap(),
        "--masks",
        dir.path().join("none").to_str().unwrap(),
        "--prompt",
        "a castle",
        "--out",
        dir.path().join("jobs").to_str().unwrap(),
    ]));
    assert_eq!(code, 1);
    assert!(!dir.path().join("jobs").exists());
}
