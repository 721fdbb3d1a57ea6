use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn geomtext(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geomtext"))
        .args(args)
        .env("GEOMTEXT_OUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path) {
    let o = geomtext(
        dir,
        &[
            "synth-data",
            "--classes",
            "3",
            "--per-class",
            "6",
            "--holdout",
            "6",
        ],
    );
    assert!(o.status.success(), "{o:?}");
}

#[test]
fn stats_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let train = dir.path().join("train.jsonl");
    let o = geomtext(dir.path(), &["stats", "--pairs", train.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("quantity\tavg_heavy_atoms\tavg_words"));
    assert!(lines.next().unwrap().starts_with("12\t"));
    assert!(dir.path().join("stats.manifest.json").exists());
}

const TINY: &str = r#"
[model.geom]
atom_embed_dim = 8
num_layers = 1
num_heads = 2
proj_dim = 6
proj_hidden = 8

[model.text]
token_embed_dim = 8
num_layers = 1
num_heads = 2
max_seq_len = 24
proj_dim = 6
proj_hidden = 8

[train]
total_steps = 4
warmup_steps = 1
batch_size = 4
accum_steps = 1
lr_max = 1e-3
seed = 7
"#;

#[test]
fn pretrain_twice_gives_identical_logs_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let train = dir.path().join("train.jsonl");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = geomtext(
            &out,
            &[
                "pretrain",
                "--config",
                cfg.to_str().unwrap(),
                "--pairs",
                train.to_str().unwrap(),
            ],
        );
        assert!(o.status.success(), "{o:?}");
        (
            fs::read_to_string(out.join("pretrain_log.tsv")).unwrap(),
            fs::read_to_string(out.join("pretrain.manifest.json")).unwrap(),
        )
    };
    let (log_a, man_a) = run("a");
    let (log_b, man_b) = run("b");
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.lines().count(), 5);
    // same inputs and config; the output directory comes from the environment
    assert_eq!(man_a, man_b);
    assert!(man_a.contains("\"seed\": 7"));

    let out = dir.path().join("a");
    let test = dir.path().join("test.jsonl");
    let o = geomtext(
        dir.path(),
        &[
            "retrieve",
            "--checkpoint",
            out.join("pretrain.ckpt").to_str().unwrap(),
            "--vocab",
            out.join("vocab.txt").to_str().unwrap(),
            "--pairs",
            test.to_str().unwrap(),
            "--k",
            "1,5",
        ],
    );
    assert!(o.status.success(), "{o:?}");
    let table = stdout(&o);
    assert!(table.starts_with("direction\tnum_queries\taccuracy\trecall@1\trecall@5\n"));
    assert!(table.contains("molecule->text\t6\t") && table.contains("text->molecule\t6\t"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\ntotal_steps = 4\nlearning_rate = 0.1\n").unwrap();
    let train = dir.path().join("train.jsonl");
    let o = geomtext(
        dir.path(),
        &[
            "pretrain",
            "--config",
            cfg.to_str().unwrap(),
            "--pairs",
            train.to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let o = geomtext(
        dir.path(),
        &["pretrain", "--pairs", train.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(1));
    let o = geomtext(dir.path(), &["stats", "--pairs", "/nonexistent.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_by_default_and_fails_at_tiny_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let o = geomtext(dir.path(), &["gradcheck"]);
    assert!(o.status.success(), "{o:?}");
    let table = stdout(&o);
    assert!(table.starts_with("loss\tmax_rel_error\tpassed\n"));
    for loss in [
        "contrastive",
        "denoising",
        "combined",
        "property",
        "caption",
    ] {
        assert!(table.contains(&format!("{loss}\t")), "{table}");
    }
    assert!(!table.contains("false"));

    let o = geomtext(dir.path(), &["gradcheck", "--tol", "1e-12"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("false"));

    for seed in ["5", "6"] {
        let o = geomtext(dir.path(), &["gradcheck", "--seed", seed]);
        assert!(o.status.success(), "seed {seed}: {o:?}");
    }
}

#[test]
fn caption_pipeline_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let train = dir.path().join("train.jsonl");
    let cfg = dir.path().join("cap.toml");
    fs::write(
        &cfg,
        format!(
            "{TINY}\n[model.caption]\nprefix_len = 2\nembed_dim = 8\nnum_layers = 1\nnum_heads = 2\nmax_seq_len = 24\n"
        ),
    )
    .unwrap();
    let o = geomtext(
        dir.path(),
        &[
            "caption-train",
            "--config",
            cfg.to_str().unwrap(),
            "--pairs",
            train.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{o:?}");
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let o = geomtext(
        dir.path(),
        &[
            "caption-gen",
            "--checkpoint",
            &p("caption.ckpt"),
            "--vocab",
            &p("vocab.txt"),
            "--pairs",
            &p("test.jsonl"),
        ],
    );
    assert!(o.status.success(), "{o:?}");
    let captions = fs::read_to_string(dir.path().join("captions.tsv")).unwrap();
    assert!(captions.starts_with("id\tcandidate\treference\n"));
    assert_eq!(captions.lines().count(), 7);
    let o = geomtext(
        dir.path(),
        &["eval-caption", "--captions", &p("captions.tsv")],
    );
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).starts_with("bleu2\tbleu4\trouge1\trouge2\trougeL\n"));
}

#[test]
fn property_finetuning_reports_mae() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let train = dir.path().join("train.jsonl");
    let test = dir.path().join("test.jsonl");
    let mut targets = String::from("id\tvalue\n");
    for f in [&train, &test] {
        for line in fs::read_to_string(f).unwrap().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let n = v["atoms"].as_array().unwrap().len();
            targets.push_str(&format!(
                "{}\t{}\n",
                v["id"].as_str().unwrap(),
                n as f64 * 0.5
            ));
        }
    }
    let tpath = dir.path().join("targets.tsv");
    fs::write(&tpath, targets).unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let o = geomtext(
        dir.path(),
        &[
            "finetune-property",
            "--config",
            cfg.to_str().unwrap(),
            "--pairs",
            train.to_str().unwrap(),
            "--targets",
            tpath.to_str().unwrap(),
            "--eval-pairs",
            test.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{o:?}");
    let table = stdout(&o);
    assert!(
        table.starts_with("split\tnum_molecules\tmae\ntrain\t12\t"),
        "{table}"
    );
    assert!(table.contains("\neval\t6\t"));
    assert!(dir.path().join("predictions.tsv").exists());
}
