use std::process::{Command, Output};

use digpt::config::{Config, Provenance, REGISTRY};

const DATA: &str = "data.root=synthetic://color?train=32&test=16&classes=2&seed=1";

fn tiny() -> Vec<String> {
    [
        DATA,
        "data.image_size=8",
        "model.depth=1",
        "model.dim=8",
        "model.heads=2",
        "model.mlp_ratio=2",
        "decoder.depth=1",
        "decoder.dim=8",
        "decoder.heads=2",
        "train.batch_size=8",
        "train.epochs=2",
        "train.warmup_epochs=1",
        "probe.epochs=3",
        "finetune.epochs=1",
        "finetune.warmup_epochs=0",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn digpt(args: &[&str], overrides: &[String]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_digpt"));
    cmd.args(args);
    for o in overrides {
        cmd.arg("--override").arg(o);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn with(base: &[String], extra: &[String]) -> Vec<String> {
    base.iter().chain(extra).cloned().collect()
}

#[test]
fn check_masks_prints_pass_lines() {
    let o = digpt(&["check-masks", "--n", "4", "--patches", "4", "--seed", "0"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().count() >= 4);
    assert!(out.lines().all(|l| l.starts_with("PASS ")), "{out}");
}

#[test]
fn unknown_subcommand_exits_2() {
    let o = digpt(&["frobnicate"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn help_lists_every_key() {
    let o = digpt(&["--help"], &[]);
    assert!(o.status.success());
    let out = stdout(&o);
    for s in REGISTRY {
        assert!(out.contains(s.key), "--help is missing {}", s.key);
    }
    for sub in [
        "pretrain",
        "probe",
        "finetune",
        "ablate",
        "check-masks",
        "extract-teacher",
        "plot",
    ] {
        assert!(out.contains(sub), "{sub}");
    }
}

#[test]
fn config_errors_name_the_key() {
    let o = digpt(&["pretrain"], &["model.depthh=3".to_string()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.depthh"), "{}", stderr(&o));

    let o = digpt(
        &["pretrain"],
        &["teacher.kind=cache".into(), "teacher.path=x.bin".into()],
    );
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("teacher.kind") && err.contains("data.augment"), "{err}");
}

#[test]
fn file_then_override_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# decoder sweep\ndecoder.depth = 4\nmodel.mlp_ratio = 3\n").unwrap();
    let out = dir.path().join("run");
    let overrides: Vec<String> = tiny()
        .into_iter()
        .filter(|o| !o.starts_with("model.mlp_ratio"))
        .collect();
    let o = digpt(
        &["pretrain", "--config", cfg.to_str().unwrap()],
        &with(
            &overrides,
            &["decoder.depth=2".into(), format!("train.out_dir={}", out.display())],
        ),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let snapshot = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(snapshot.contains("decoder.depth = 2\n"), "{snapshot}");
    assert!(snapshot.contains("model.mlp_ratio = 3\n"), "{snapshot}");
}

#[test]
fn pretrain_plot_probe_finetune_teacher_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let base = with(&tiny(), &[format!("train.out_dir={}", run.display())]);

    let o = digpt(&["pretrain"], &base);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = run.join("metrics.jsonl");
    // 32 images, batch 8, 2 epochs
    assert_eq!(std::fs::read_to_string(&metrics).unwrap().lines().count(), 8);
    assert!(run.join("final.bin").exists());

    let svg = dir.path().join("loss.svg");
    let o = digpt(
        &[
            "plot",
            "--metrics",
            metrics.to_str().unwrap(),
            "--out",
            svg.to_str().unwrap(),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&svg).unwrap();
    for f in ["loss_total", "loss_gen", "loss_dis", "lr"] {
        assert!(text.contains(&format!("data-field=\"{f}\"")), "{f}");
    }
    let mut snapshot = Config::defaults();
    snapshot
        .apply_text(
            &std::fs::read_to_string(run.join("config.txt")).unwrap(),
            Provenance::File,
        )
        .unwrap();
    assert!(text.contains(&snapshot.hash()));

    let result = dir.path().join("probe.json");
    let o = digpt(
        &[
            "probe",
            "--checkpoint",
            run.join("final.bin").to_str().unwrap(),
            "--out",
            result.to_str().unwrap(),
        ],
        &base,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&result).unwrap()).unwrap();
    assert_eq!(r["protocol"], "Probe");
    assert_eq!(r["total"], 16);

    let teacher = dir.path().join("teacher.bin");
    let o = digpt(&["finetune", "--save", teacher.to_str().unwrap()], &base);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("Finetune"));

    let cache = dir.path().join("tokens.bin");
    let o = digpt(
        &[
            "extract-teacher",
            "--checkpoint",
            teacher.to_str().unwrap(),
            "--out",
            cache.to_str().unwrap(),
        ],
        &base,
    );
    assert!(o.status.success(), "{}", stderr(&o));

    for (kind, path) in [("frozen", &teacher), ("cache", &cache)] {
        let out = dir.path().join(kind);
        let o = digpt(
            &["pretrain"],
            &with(
                &base,
                &[
                    format!("teacher.kind={kind}"),
                    format!("teacher.path={}", path.display()),
                    "data.augment=off".into(),
                    format!("train.out_dir={}", out.display()),
                ],
            ),
        );
        assert!(o.status.success(), "{kind}: {}", stderr(&o));
        assert!(out.join("final.bin").exists());
    }
}

#[test]
fn ablate_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    let o = digpt(
        &[
            "ablate",
            "--axis",
            "clusters",
            "--values",
            "1,4",
            "--out",
            csv.to_str().unwrap(),
        ],
        &with(
            &tiny(),
            &[format!("train.out_dir={}", dir.path().join("runs").display())],
        ),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("clusters,1,1,8x8,"), "{}", lines[1]);
    assert!(lines[2].starts_with("clusters,4,4,4x4,"), "{}", lines[2]);

    let o = digpt(&["ablate", "--axis", "foo", "--values", "1"], &tiny());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("foo"));
}
