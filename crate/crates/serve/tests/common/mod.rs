#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use radfield::field::FieldConfig;
use radfield::pipeline::{RunConfig, Stage1Config};
use tempfile::TempDir;

/// A tiny dataset and a briefly trained miniature checkpoint, built once
/// per test binary through the command line itself.
pub struct Fixture {
    pub root: TempDir,
    pub data: PathBuf,
    pub ckpt: PathBuf,
    pub config: PathBuf,
}

pub const VIEWS: usize = 4;
pub const RES: usize = 24;
/// Patch on the first object in view 0.
pub const RECT: [usize; 4] = [9, 5, 14, 10];

pub fn argv(args: &[&str]) -> Vec<String> {
    std::iter::once("radfield").chain(args.iter().copied()).map(String::from).collect()
}

pub fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let data = root.path().join("ds");
        let ckpt = root.path().join("s1.rpck");
        let config = root.path().join("run.toml");
        let cfg = RunConfig {
            field: FieldConfig::miniature(8),
            stage1: Stage1Config {
                steps: 150,
                ray_batch: 512,
                n_samples: 32,
                ..Stage1Config::default()
            },
            ..RunConfig::default()
        };
        std::fs::write(&config, cfg.to_toml()).unwrap();
        let views = VIEWS.to_string();
        let res = RES.to_string();
        let code = radfield_serve::cli::run(argv(&[
            "synth",
            "--scene",
            "two_spheres",
            "--views",
            &views,
            "--res",
            &res,
            "--out",
            data.to_str().unwrap(),
        ]));
        assert_eq!(code, 0);
        let code = radfield_serve::cli::run(argv(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
        ]));
        assert_eq!(code, 0);
        Fixture {
            root,
            data,
            ckpt,
            config,
        }
    })
}
