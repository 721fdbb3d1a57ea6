use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use geomtext::encoders::{build_vocab, embed_molecule, embed_text, tokenize, Vocab};
use geomtext::heads::{
    caption_generate, predict_property, CaptionConfig, NormStats, PropertyHeadConfig,
};
use geomtext::metrics::{caption_scores, mae, retrieval_eval, retrieval_tsv};
use geomtext::molio::{
    corpus_stats, generate_synthetic_corpus, join_by_id, load_pairs, parse_xyz, split_holdout,
    to_jsonl, GeomTextPair, JoinOptions, SynthConfig,
};
use geomtext::selfcheck::check_losses;
use geomtext::tensor::ModelParams;
use geomtext::trainer::{
    caption_train, checkpoint_load, fit_property, pretrain, write_checkpoint, ModelConfig,
    PretrainLog,
};
use geomtext::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cli::*;
use crate::config::{existing, out_dir, require, RunConfig};
use crate::manifest::Manifest;

pub fn run(cli: Cli) -> Result<ExitCode> {
    let out = &cli.out_dir;
    match cli.command {
        Command::BuildData(a) => build_data(out, a),
        Command::SynthData(a) => synth_data(out, a),
        Command::Stats(a) => stats(out, a),
        Command::BuildVocab(a) => build_vocab_cmd(out, a),
        Command::Pretrain(a) => pretrain_cmd(out, a),
        Command::Retrieve(a) => retrieve(out, a),
        Command::FinetuneProperty(a) => finetune_property(out, a),
        Command::CaptionTrain(a) => caption_train_cmd(out, a),
        Command::CaptionGen(a) => caption_gen(out, a),
        Command::EvalCaption(a) => eval_caption(out, a),
        Command::Gradcheck(a) => {
            // a failed check is a numeric failure, not bad input
            return gradcheck(out, a).map(|ok| {
                if ok {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(2)
                }
            });
        }
    }?;
    Ok(ExitCode::SUCCESS)
}

fn pairs_from(path: &Path) -> Result<Vec<GeomTextPair>> {
    existing(path)?;
    let loaded = load_pairs(path, true)?;
    if loaded.pairs.is_empty() {
        return Err(Error::Config(format!("{} holds no pairs", path.display())));
    }
    Ok(loaded.pairs)
}

fn vocab_from(path: &Path) -> Result<Vocab> {
    existing(path)?;
    Vocab::load(path)
}

/// Rows of a tab-separated file split into at most `columns` fields. A
/// first row starting with `id` is taken as the header.
fn read_table(path: &Path, columns: usize) -> Result<Vec<Vec<String>>> {
    existing(path)?;
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (i == 0 && line.starts_with("id\t")) {
            continue;
        }
        let fields: Vec<String> = line.splitn(columns, '\t').map(str::to_string).collect();
        if fields.len() != columns {
            return Err(Error::Parse {
                line: i + 1,
                message: format!(
                    "{}: expected {columns} tab-separated fields",
                    path.display()
                ),
            });
        }
        rows.push(fields);
    }
    Ok(rows)
}

fn one_line(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

fn build_data(out: &Option<PathBuf>, a: BuildDataArgs) -> Result<()> {
    existing(&a.xyz_dir)?;
    let mut files: Vec<PathBuf> = fs::read_dir(&a.xyz_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xyz"))
        .collect();
    files.sort();
    let dir = out_dir(out, &None)?;
    #[derive(Serialize)]
    struct Config<'a> {
        xyz_dir: &'a Path,
        annotations: &'a Path,
        max_per_id: usize,
    }
    let config = Config {
        xyz_dir: &a.xyz_dir,
        annotations: &a.annotations,
        max_per_id: a.max_per_id,
    };
    let mut m = Manifest::new("build-data", &dir, 0, &config)?;
    let mut molecules = Vec::new();
    for f in &files {
        let text = fs::read_to_string(f)?;
        molecules
            .push(parse_xyz(&text).map_err(|e| Error::Config(format!("{}: {e}", f.display())))?);
        m.input(f)?;
    }
    let annotations: Vec<(String, String)> = read_table(&a.annotations, 2)?
        .into_iter()
        .map(|mut r| (std::mem::take(&mut r[0]), std::mem::take(&mut r[1])))
        .collect();
    m.input(&a.annotations)?;
    let opts = JoinOptions {
        max_per_id: a.max_per_id,
        ..JoinOptions::default()
    };
    let report = join_by_id(&molecules, &annotations, opts);
    m.write("pairs.jsonl", to_jsonl(&report.pairs)?)?;
    let mut unmatched = String::from("side\tid\n");
    for id in &report.unmatched_geometries {
        unmatched.push_str(&format!("geometry\t{id}\n"));
    }
    for id in &report.unmatched_annotations {
        unmatched.push_str(&format!("annotation\t{id}\n"));
    }
    m.write("unmatched.tsv", unmatched)?;
    m.finish()?;
    println!("pairs\tunmatched_geometries\tunmatched_annotations\tduplicate_geometries\tduplicate_annotations");
    println!(
        "{}\t{}\t{}\t{}\t{}",
        report.pairs.len(),
        report.unmatched_geometries.len(),
        report.unmatched_annotations.len(),
        report.duplicate_geometries,
        report.duplicate_annotations
    );
    Ok(())
}

fn synth_data(out: &Option<PathBuf>, a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_classes: a.classes,
        per_class: a.per_class,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let pairs = generate_synthetic_corpus(&cfg)?;
    let dir = out_dir(out, &None)?;
    #[derive(Serialize)]
    struct Config<'a> {
        synth: &'a SynthConfig,
        holdout: usize,
    }
    let mut m = Manifest::new(
        "synth-data",
        &dir,
        a.seed,
        &Config {
            synth: &cfg,
            holdout: a.holdout,
        },
    )?;
    if a.holdout > 0 {
        let (train, test) = split_holdout(&pairs, a.holdout, a.seed)?;
        m.write("train.jsonl", to_jsonl(&train)?)?;
        m.write("test.jsonl", to_jsonl(&test)?)?;
        println!(
            "wrote {} training and {} held-out pairs to {}",
            train.len(),
            test.len(),
            dir.display()
        );
    } else {
        m.write("pairs.jsonl", to_jsonl(&pairs)?)?;
        println!("wrote {} pairs to {}", pairs.len(), dir.display());
    }
    m.finish()?;
    Ok(())
}

fn stats(out: &Option<PathBuf>, a: StatsArgs) -> Result<()> {
    let pairs = pairs_from(&a.pairs)?;
    let s = corpus_stats(&pairs)?;
    let table = format!(
        "quantity\tavg_heavy_atoms\tavg_words\n{}\t{:.2}\t{:.2}\n",
        s.quantity, s.avg_heavy_atoms, s.avg_words
    );
    let dir = out_dir(out, &None)?;
    let mut m = Manifest::new("stats", &dir, 0, &a.pairs)?;
    m.input(&a.pairs)?;
    m.write("stats.tsv", &table)?;
    m.finish()?;
    print!("{table}");
    Ok(())
}

fn build_vocab_cmd(out: &Option<PathBuf>, a: VocabArgs) -> Result<()> {
    let pairs = pairs_from(&a.pairs)?;
    let texts: Vec<&str> = pairs.iter().map(|p| p.text.as_str()).collect();
    let vocab = build_vocab(&texts, a.min_freq)?;
    let dir = out_dir(out, &None)?;
    #[derive(Serialize)]
    struct Config<'a> {
        pairs: &'a Path,
        min_freq: usize,
    }
    let mut m = Manifest::new(
        "build-vocab",
        &dir,
        0,
        &Config {
            pairs: &a.pairs,
            min_freq: a.min_freq,
        },
    )?;
    m.input(&a.pairs)?;
    m.write("vocab.txt", vocab.to_file_string())?;
    m.finish()?;
    println!("vocabulary of {} tokens", vocab.len());
    Ok(())
}

/// Row-per-pair embedding matrices.
type Embeddings = Vec<Vec<f64>>;

/// Molecule and text embeddings, row i for pair i.
fn embed_pairs(
    params: &ModelParams,
    model: &ModelConfig,
    vocab: &Vocab,
    pairs: &[GeomTextPair],
) -> Result<(Embeddings, Embeddings)> {
    let mut g = Vec::with_capacity(pairs.len());
    let mut t = Vec::with_capacity(pairs.len());
    for p in pairs {
        g.push(embed_molecule(params, &model.geom, &p.molecule)?);
        let ids = tokenize(&p.text, vocab, model.text.max_seq_len);
        t.push(embed_text(params, &model.text, &ids)?);
    }
    Ok((g, t))
}

fn check_vocab(model: &ModelConfig, vocab: &Vocab) -> Result<()> {
    if model.text.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "checkpoint expects a vocabulary of {} tokens, the given one has {}",
            model.text.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

/// Vocabulary from `[paths] vocab`, or built from the corpus and written
/// as an artifact.
fn run_vocab(cfg: &RunConfig, pairs: &[GeomTextPair], m: &mut Manifest) -> Result<Vocab> {
    match &cfg.paths.vocab {
        Some(p) => {
            let v = vocab_from(p)?;
            m.input(p)?;
            Ok(v)
        }
        None => {
            let texts: Vec<&str> = pairs.iter().map(|p| p.text.as_str()).collect();
            let v = build_vocab(&texts, 1)?;
            m.write("vocab.txt", v.to_file_string())?;
            Ok(v)
        }
    }
}

/// Starting parameters: the configured checkpoint, or a fresh seeded init.
fn starting_point(cfg: &mut RunConfig, m: &mut Manifest) -> Result<ModelParams> {
    match &cfg.paths.checkpoint {
        Some(p) => {
            existing(p)?;
            let (params, model) = checkpoint_load(p)?;
            m.input(p)?;
            let caption = cfg.model.caption.take();
            let property = cfg.model.property.take();
            cfg.model = ModelConfig {
                caption: model.caption.or(caption),
                property: model.property.or(property),
                ..model
            };
            Ok(params)
        }
        None => cfg.model.init_params(cfg.train.seed),
    }
}

fn has_prefix(params: &ModelParams, prefix: &str) -> bool {
    params.names().any(|n| n.starts_with(prefix))
}

fn log_summary(log: &PretrainLog) {
    if let Some(e) = log.entries.last() {
        println!("step\tl_con\tl_den\ttotal");
        println!("{}\t{:.5}\t{:.5}\t{:.5}", e.step, e.l_con, e.l_den, e.total);
    }
}

fn pretrain_cmd(out: &Option<PathBuf>, a: PretrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.train)?;
    let pairs_path = require(&cfg.paths.pairs, "pairs")?;
    let pairs = pairs_from(&pairs_path)?;
    let val = match (&a.alpha_grid, &cfg.paths.val_pairs) {
        (Some(_), None) => return Err(Error::Config("--alpha-grid needs --val-pairs".into())),
        (_, Some(p)) => Some((p.clone(), pairs_from(p)?)),
        (None, None) => None,
    };
    let dir = out_dir(out, &cfg.paths.out_dir)?;
    let mut m = Manifest::new("pretrain", &dir, cfg.train.seed, &())?;
    m.input(&pairs_path)?;
    if let Some((p, _)) = &val {
        m.input(p)?;
    }
    let vocab = run_vocab(&cfg, &pairs, &mut m)?;
    if cfg.paths.checkpoint.is_none() {
        cfg.model.text.vocab_size = vocab.len();
        if let Some(c) = &mut cfg.model.caption {
            c.vocab_size = vocab.len();
        }
    }
    let init = starting_point(&mut cfg, &mut m)?;
    check_vocab(&cfg.model, &vocab)?;

    let grid = a.alpha_grid.clone().unwrap_or_default();
    #[derive(Serialize)]
    struct Config<'a> {
        run: &'a RunConfig,
        alpha_grid: &'a [f64],
    }
    let mut m = m.with_config(&Config {
        run: &cfg,
        alpha_grid: &grid,
    })?;

    if grid.is_empty() {
        let mut params = init;
        let log = pretrain(&pairs, &vocab, &cfg.model, &cfg.train, &mut params)?;
        m.write("pretrain_log.tsv", log.to_tsv())?;
        m.write("pretrain.ckpt", write_checkpoint(&params, &cfg.model)?)?;
        m.finish()?;
        log_summary(&log);
        return Ok(());
    }

    let (_, val_pairs) = val.expect("checked above");
    let mut table = String::from(
        "alpha\tmolecule_to_text_accuracy\ttext_to_molecule_accuracy\tmean_accuracy\n",
    );
    let mut best: Option<(f64, f64, ModelParams, PretrainLog)> = None;
    for &alpha in &grid {
        let train = geomtext::trainer::TrainConfig {
            alpha,
            ..cfg.train.clone()
        };
        let mut params = init.clone();
        let log = pretrain(&pairs, &vocab, &cfg.model, &train, &mut params)?;
        let (g, t) = embed_pairs(&params, &cfg.model, &vocab, &val_pairs)?;
        let [m2t, t2m] = retrieval_eval(&g, &t, &[1])?;
        let mean = (m2t.accuracy + t2m.accuracy) / 2.0;
        table.push_str(&format!(
            "{alpha}\t{}\t{}\t{mean}\n",
            m2t.accuracy, t2m.accuracy
        ));
        m.write(&format!("pretrain_log_alpha_{alpha}.tsv"), log.to_tsv())?;
        if best.as_ref().is_none_or(|b| mean > b.1) {
            best = Some((alpha, mean, params, log));
        }
    }
    let (alpha, mean, params, log) = best.expect("grid is non-empty");
    let model = cfg.model.clone();
    m.write("alpha_grid.tsv", &table)?;
    m.write("pretrain_log.tsv", log.to_tsv())?;
    m.write("pretrain.ckpt", write_checkpoint(&params, &model)?)?;
    m.finish()?;
    print!("{table}");
    println!("selected alpha {alpha} (mean validation accuracy {mean})");
    Ok(())
}

fn retrieve(out: &Option<PathBuf>, a: RetrieveArgs) -> Result<()> {
    existing(&a.checkpoint)?;
    let (params, model) = checkpoint_load(&a.checkpoint)?;
    let vocab = vocab_from(&a.vocab)?;
    check_vocab(&model, &vocab)?;
    let pairs = pairs_from(&a.pairs)?;
    let (g, t) = embed_pairs(&params, &model, &vocab, &pairs)?;
    let reports = retrieval_eval(&g, &t, &a.k)?;
    let table = retrieval_tsv(&reports);
    let dir = out_dir(out, &None)?;
    let mut m = Manifest::new("retrieve", &dir, 0, &a.k)?;
    for p in [&a.checkpoint, &a.vocab, &a.pairs] {
        m.input(p)?;
    }
    m.write("retrieval.tsv", &table)?;
    m.finish()?;
    print!("{table}");
    Ok(())
}

fn read_targets(path: &Path) -> Result<Vec<(String, f64)>> {
    read_table(path, 2)?
        .into_iter()
        .map(|r| {
            let v = r[1].trim().parse::<f64>().map_err(|_| {
                Error::Config(format!(
                    "{}: bad target {:?} for {}",
                    path.display(),
                    r[1],
                    r[0]
                ))
            })?;
            Ok((r[0].clone(), v))
        })
        .collect()
}

fn targets_for(pairs: &[GeomTextPair], targets: &[(String, f64)]) -> Result<Vec<f64>> {
    let map: std::collections::HashMap<&str, f64> =
        targets.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    pairs
        .iter()
        .map(|p| {
            map.get(p.id())
                .copied()
                .ok_or_else(|| Error::Config(format!("no target for molecule {}", p.id())))
        })
        .collect()
}

fn finetune_property(out: &Option<PathBuf>, a: PropertyArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.train)?;
    let pairs_path = require(&cfg.paths.pairs, "pairs")?;
    let pairs = pairs_from(&pairs_path)?;
    let eval = a.eval_pairs.as_deref().map(pairs_from).transpose()?;
    let targets = read_targets(&a.targets)?;
    let dir = out_dir(out, &cfg.paths.out_dir)?;
    let mut m = Manifest::new("finetune-property", &dir, cfg.train.seed, &())?;
    m.input(&pairs_path)?;
    m.input(&a.targets)?;
    if let Some(p) = &a.eval_pairs {
        m.input(p)?;
    }
    let mut params = starting_point(&mut cfg, &mut m)?;
    let head = *cfg
        .model
        .property
        .get_or_insert_with(PropertyHeadConfig::default);
    if !has_prefix(&params, "property.") {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        head.init_params(&cfg.model.geom, &mut params, &mut rng)?;
    }
    let y = targets_for(&pairs, &targets)?;
    let stats = NormStats::fit(&y)?;
    cfg.model.property_stats = Some(stats);
    let mut m = m.with_config(&cfg)?;
    let molecules: Vec<_> = pairs.iter().map(|p| p.molecule.clone()).collect();
    let log = fit_property(
        &molecules,
        &y,
        &stats,
        &cfg.model,
        &cfg.train,
        a.train.freeze_encoder,
        &mut params,
    )?;
    m.write("finetune_log.tsv", log.to_tsv())?;
    m.write("property.ckpt", write_checkpoint(&params, &cfg.model)?)?;

    let mut table = String::from("split\tnum_molecules\tmae\n");
    let predict = |set: &[GeomTextPair]| -> Result<Vec<f64>> {
        set.iter()
            .map(|p| predict_property(&params, &cfg.model.geom, Some(&stats), &p.molecule))
            .collect()
    };
    table.push_str(&format!(
        "train\t{}\t{}\n",
        pairs.len(),
        mae(&predict(&pairs)?, &y)?
    ));
    if let Some(eval) = &eval {
        let truth = targets_for(eval, &targets)?;
        let pred = predict(eval)?;
        let mut rows = String::from("id\ttarget\tprediction\n");
        for ((p, t), q) in eval.iter().zip(&truth).zip(&pred) {
            rows.push_str(&format!("{}\t{t}\t{q}\n", p.id()));
        }
        m.write("predictions.tsv", rows)?;
        table.push_str(&format!("eval\t{}\t{}\n", eval.len(), mae(&pred, &truth)?));
    }
    m.write("property_mae.tsv", &table)?;
    m.finish()?;
    print!("{table}");
    Ok(())
}

fn caption_train_cmd(out: &Option<PathBuf>, a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a)?;
    let pairs_path = require(&cfg.paths.pairs, "pairs")?;
    let pairs = pairs_from(&pairs_path)?;
    let dir = out_dir(out, &cfg.paths.out_dir)?;
    let mut m = Manifest::new("caption-train", &dir, cfg.train.seed, &())?;
    m.input(&pairs_path)?;
    let vocab = run_vocab(&cfg, &pairs, &mut m)?;
    if cfg.paths.checkpoint.is_none() {
        cfg.model.text.vocab_size = vocab.len();
        cfg.model
            .caption
            .get_or_insert_with(CaptionConfig::default)
            .vocab_size = vocab.len();
    }
    let mut params = starting_point(&mut cfg, &mut m)?;
    check_vocab(&cfg.model, &vocab)?;
    let cap = cfg.model.caption.get_or_insert_with(CaptionConfig::default);
    cap.vocab_size = vocab.len();
    cap.freeze_encoder |= a.freeze_encoder;
    let cap = cap.clone();
    if !has_prefix(&params, "caption.") {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        cap.init_params(&cfg.model.geom, &mut params, &mut rng)?;
    }
    let mut m = m.with_config(&cfg)?;
    let log = caption_train(&pairs, &vocab, &cfg.model, &cfg.train, &mut params)?;
    m.write("caption_log.tsv", log.to_tsv())?;
    m.write("caption.ckpt", write_checkpoint(&params, &cfg.model)?)?;
    m.finish()?;
    if let Some(l) = log.last_loss() {
        println!("step\tloss\n{}\t{l:.5}", log.entries.len());
    }
    Ok(())
}

fn caption_gen(out: &Option<PathBuf>, a: CaptionGenArgs) -> Result<()> {
    existing(&a.checkpoint)?;
    let (params, model) = checkpoint_load(&a.checkpoint)?;
    let cap = model.caption.clone().ok_or_else(|| {
        Error::Config(format!("{} has no caption decoder", a.checkpoint.display()))
    })?;
    let vocab = vocab_from(&a.vocab)?;
    if cap.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "caption decoder expects {} tokens, the vocabulary has {}",
            cap.vocab_size,
            vocab.len()
        )));
    }
    let pairs = pairs_from(&a.pairs)?;
    let max_len = a.max_len.unwrap_or(cap.max_seq_len);
    let mut table = String::from("id\tcandidate\treference\n");
    for p in &pairs {
        let ids = caption_generate(&params, &model.geom, &cap, &p.molecule, max_len)?;
        table.push_str(&format!(
            "{}\t{}\t{}\n",
            one_line(p.id()),
            one_line(&vocab.decode(&ids)),
            one_line(&p.text)
        ));
    }
    let dir = out_dir(out, &None)?;
    let mut m = Manifest::new("caption-gen", &dir, 0, &max_len)?;
    for p in [&a.checkpoint, &a.vocab, &a.pairs] {
        m.input(p)?;
    }
    m.write("captions.tsv", &table)?;
    m.finish()?;
    println!("generated {} captions", pairs.len());
    Ok(())
}

fn eval_caption(out: &Option<PathBuf>, a: EvalCaptionArgs) -> Result<()> {
    let rows = read_table(&a.captions, 3)?;
    let cands: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    let refs: Vec<&str> = rows.iter().map(|r| r[2].as_str()).collect();
    let table = caption_scores(&cands, &refs)?.to_tsv();
    let dir = out_dir(out, &None)?;
    let mut m = Manifest::new("eval-caption", &dir, 0, &())?;
    m.input(&a.captions)?;
    m.write("caption_scores.tsv", &table)?;
    m.finish()?;
    print!("{table}");
    Ok(())
}

fn gradcheck(out: &Option<PathBuf>, a: GradcheckArgs) -> Result<bool> {
    if !(a.tol > 0.0) {
        return Err(Error::Config(format!(
            "--tol must be positive, got {}",
            a.tol
        )));
    }
    let checks = check_losses(a.seed, a.step, a.tol)?;
    let mut table = String::from("loss\tmax_rel_error\tpassed\n");
    for c in &checks {
        table.push_str(&format!(
            "{}\t{:e}\t{}\n",
            c.loss, c.report.max_rel_error, c.report.passed
        ));
    }
    let dir = out_dir(out, &None)?;
    #[derive(Serialize)]
    struct Config {
        tol: f64,
        seed: u64,
        step: f64,
    }
    let mut m = Manifest::new(
        "gradcheck",
        &dir,
        a.seed,
        &Config {
            tol: a.tol,
            seed: a.seed,
            step: a.step,
        },
    )?;
    m.write("gradcheck.tsv", &table)?;
    m.finish()?;
    print!("{table}");
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.report.passed)
        .map(|c| c.loss)
        .collect();
    if !failed.is_empty() {
        eprintln!(
            "error: gradient check above tolerance {} for {}",
            a.tol,
            failed.join(", ")
        );
    }
    Ok(failed.is_empty())
}
