#![allow(dead_code)]

use std::path::{Path, PathBuf};

use duoflow_cli::{run_args, CliError};

/// Small model and short schedules so a whole pipeline takes seconds.
pub const SMALL: &str = r#"{
  "data": {"count": 60},
  "model": {"width": 32, "depth": 2},
  "train": {"steps": 20, "batch": 8, "checkpoint_every": 10, "log_every": 5},
  "finetune": {"steps": 10, "batch": 8, "checkpoint_every": 5, "log_every": 5},
  "sample": {"steps": 4, "batch": 8},
  "diagnose": {"steps": 4, "batch": 8}
}"#;

pub fn write_config(dir: &Path, json: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, json).unwrap();
    p
}

/// Run a command in process; returns its log on success.
pub fn duoflow(args: &[&str]) -> Result<String, CliError> {
    let mut log = Vec::new();
    let argv = std::iter::once("duoflow").chain(args.iter().copied());
    run_args(argv, &mut log)?;
    Ok(String::from_utf8(log).unwrap())
}

pub fn ok(args: &[&str]) -> String {
    duoflow(args).unwrap_or_else(|e| panic!("duoflow {args:?} failed: {e}"))
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Dataset, both pretrained branches and a finetuned bundle under `root`.
pub struct Pipeline {
    pub root: PathBuf,
    pub config: PathBuf,
    pub data: PathBuf,
    pub img: PathBuf,
    pub txt: PathBuf,
    pub joint: PathBuf,
}

impl Pipeline {
    pub fn build(root: &Path) -> Self {
        let config = write_config(root, SMALL);
        let p = Pipeline {
            root: root.to_path_buf(),
            data: root.join("data"),
            img: root.join("img"),
            txt: root.join("txt"),
            joint: root.join("joint"),
            config,
        };
        let c = s(&p.config);
        ok(&["datagen", "--config", c, "--out", s(&p.data)]);
        ok(&["train", "--config", c, "--data", s(&p.data), "--branch", "img", "--out", s(&p.img)]);
        ok(&["train", "--config", c, "--data", s(&p.data), "--branch", "txt", "--out", s(&p.txt)]);
        ok(&[
            "finetune", "--config", c, "--data", s(&p.data), "--img", s(&p.img), "--txt", s(&p.txt), "--out", s(&p.joint),
        ]);
        p
    }

    pub fn config(&self) -> &str {
        s(&self.config)
    }
}
