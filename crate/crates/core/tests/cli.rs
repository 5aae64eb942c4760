use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use patch_embed::synth::{natural_corpus, object_corpus, write_corpus};

const BIN: &str = env!("CARGO_BIN_EXE_patch-embed");

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut train = natural_corpus(4, 200, 200, 11);
        for (i, r) in train.iter_mut().enumerate() {
            r.image_id = format!("tr{i}");
        }
        write_corpus(&dir.path().join("train"), &train, false).unwrap();
        let mut eval = natural_corpus(2, 96, 96, 12);
        for (i, r) in eval.iter_mut().enumerate() {
            r.image_id = format!("ev{i}");
        }
        write_corpus(&dir.path().join("eval"), &eval, true).unwrap();
        write_corpus(&dir.path().join("unlabeled"), &eval, false).unwrap();
        write_corpus(
            &dir.path().join("object"),
            &object_corpus(2, 64, 64, 13),
            true,
        )
        .unwrap();
        fs::write(
            dir.path().join("run.cfg"),
            "# desk config\n\
             data.train=train/manifest.txt\n\
             data.eval=eval/manifest.txt\n\
             data.object=object/manifest.txt\n\
             arch.preset=tiny\n\
             train.epochs=1\n\
             train.heldout_fraction=0.25\n\
             eval.pairs_per_class=20\n\
             embed.stride=4\n\
             specialize.epochs=1\n\
             specialize.stride=4\n\
             out_dir=out\n",
        )
        .unwrap();
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn run(&self, args: &[&str]) -> Output {
        run(args, self.path())
    }

    fn ok(&self, args: &[&str]) {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        fs::read(self.path().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = fs::read(&p).unwrap();
                out.push((p, bytes));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn eval_without_label_maps_names_the_first_image() {
    let f = Fixture::new();
    f.ok(&["train", "-c", "run.cfg"]);
    let o = f.run(&[
        "eval",
        "-c",
        "run.cfg",
        "--set",
        "data.eval=unlabeled/manifest.txt",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ev0"), "{}", stderr(&o));
}

#[test]
fn train_then_eval_reports_encoder_and_baseline() {
    let f = Fixture::new();
    f.ok(&["train", "-c", "run.cfg"]);
    f.ok(&["eval", "-c", "run.cfg"]);
    let report = String::from_utf8(f.read("out/reports/eval.txt")).unwrap();
    let methods: Vec<&str> = report
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("method"))
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(methods, ["encoder", "raw_pixels"]);
    for sub in ["checkpoints", "deep", "viz", "labels", "reports"] {
        assert!(f.path().join("out").join(sub).is_dir(), "{sub}");
    }
    let manifest = String::from_utf8(f.read("out/run_eval.txt")).unwrap();
    assert!(manifest.contains("subcommand=eval"));
    assert!(manifest.contains("train.margin=0.2"));
    assert!(manifest.contains("version="));
}

#[test]
fn invalid_config_lists_every_bad_field() {
    let f = Fixture::new();
    let o = f.run(&[
        "train",
        "-c",
        "run.cfg",
        "--set",
        "train.margin=0",
        "--set",
        "eval.pairs_per_class=0",
        "--set",
        "train.colour=blue",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for key in ["train.margin", "eval.pairs_per_class", "train.colour"] {
        assert!(err.contains(key), "{key} not in {err}");
    }
    assert!(
        !f.path().join("out").exists(),
        "work started before validation"
    );
}

#[test]
fn malformed_config_line_is_reported_with_its_number() {
    let f = Fixture::new();
    fs::write(f.path().join("bad.cfg"), "seed=1\nthis line is wrong\n").unwrap();
    let o = f.run(&["sample", "-c", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.cfg:2"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_name_the_path() {
    let f = Fixture::new();
    let o = f.run(&[
        "train",
        "-c",
        "run.cfg",
        "--set",
        "data.train=nowhere/manifest.txt",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere/manifest.txt"));
    let o = f.run(&["embed", "-c", "run.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("final.ckpt"), "{}", stderr(&o));
    let o = f.run(&["visualize", "-c", "run.cfg", "-o", "fresh"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_refuses_training_images() {
    let f = Fixture::new();
    f.ok(&["train", "-c", "run.cfg"]);
    let o = f.run(&[
        "eval",
        "-c",
        "run.cfg",
        "--set",
        "data.eval=train/manifest.txt",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("data.train"));
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let f = Fixture::new();
    for out in ["a", "b"] {
        f.ok(&["train", "-c", "run.cfg", "--deterministic", "-o", out]);
        f.ok(&["eval", "-c", "run.cfg", "--deterministic", "-o", out]);
    }
    for rel in [
        "reports/loss_trace.tsv",
        "reports/eval.txt",
        "checkpoints/final.ckpt",
    ] {
        assert_eq!(
            f.read(&format!("a/{rel}")),
            f.read(&format!("b/{rel}")),
            "{rel}"
        );
    }
}

#[test]
fn full_pipeline_leaves_inputs_untouched() {
    let f = Fixture::new();
    let before = snapshot(f.path());
    for sub in [
        "sample",
        "train",
        "embed",
        "visualize",
        "segment",
        "specialize",
        "eval",
        "report",
    ] {
        f.ok(&[sub, "-c", "run.cfg"]);
    }
    let out = f.path().join("out");
    let after: Vec<_> = snapshot(f.path())
        .into_iter()
        .filter(|(p, _)| !p.starts_with(&out))
        .collect();
    assert_eq!(before, after);

    for rel in [
        "reports/triplet_plan.tsv",
        "deep/ev0.deep",
        "viz/ev1.png",
        "labels/ev0.png",
        "checkpoints/specialized.ckpt",
        "reports/summary.txt",
    ] {
        assert!(out.join(rel).is_file(), "{rel} missing");
    }
    let summary = String::from_utf8(f.read("out/reports/summary.txt")).unwrap();
    assert!(summary.contains("## training"));
    assert!(summary.contains("## specialization"));
    assert!(summary.contains("specialized\t"));
}

#[test]
fn synth_writes_a_loadable_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &[
            "synth", "--kind", "object", "--count", "2", "--width", "48", "--height", "40",
            "--prefix", "horse", "-o", "objs",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let records =
        patch_embed::corpus_io::load_manifest(&dir.path().join("objs/manifest.txt")).unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[1].image_id, "horse0001");
    assert_eq!(
        records[0].label_map.as_ref().unwrap().foreground_label,
        Some(1)
    );
}

#[test]
fn usage_errors_exit_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["fit"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["--help"], dir.path()).status.code(), Some(0));
}
