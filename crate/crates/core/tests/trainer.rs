use geomtext::encoders::{
    build_vocab, embed_molecule, embed_text, tokenize, GeomEncoderConfig, TextEncoderConfig, Vocab,
};
use geomtext::molio::{generate_synthetic_corpus, GeomTextPair, SynthConfig};
use geomtext::trainer::{
    checkpoint_load, checkpoint_save, pretrain, read_checkpoint, write_checkpoint, ModelConfig,
    TrainConfig,
};
use geomtext::Error;

fn corpus() -> (Vec<GeomTextPair>, Vocab) {
    let pairs = generate_synthetic_corpus(&SynthConfig {
        num_classes: 4,
        per_class: 10,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let texts: Vec<&str> = pairs.iter().map(|p| p.text.as_str()).collect();
    let vocab = build_vocab(&texts, 1).unwrap();
    (pairs, vocab)
}

fn model(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        geom: GeomEncoderConfig {
            atom_embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            proj_dim: 6,
            proj_hidden: 8,
            ..GeomEncoderConfig::default()
        },
        text: TextEncoderConfig {
            vocab_size: vocab.len(),
            token_embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            max_seq_len: 24,
            proj_dim: 6,
            proj_hidden: 8,
        },
        ..ModelConfig::default()
    }
}

fn config(batch_size: usize, accum_steps: usize) -> TrainConfig {
    TrainConfig {
        lr_max: 1e-3,
        warmup_steps: 2,
        batch_size,
        accum_steps,
        ..TrainConfig::new(6)
    }
}

#[test]
fn accumulation_matches_one_large_batch() {
    let (pairs, vocab) = corpus();
    let m = model(&vocab);
    let init = m.init_params(1).unwrap();
    let mut a = init.clone();
    let mut b = init.clone();
    let la = pretrain(&pairs, &vocab, &m, &config(8, 4), &mut a).unwrap();
    let lb = pretrain(&pairs, &vocab, &m, &config(32, 1), &mut b).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    assert!(init.max_abs_diff(&a).unwrap() > 1e-4);
    for (x, y) in la.entries.iter().zip(&lb.entries) {
        assert!((x.total - y.total).abs() < 1e-10);
    }
}

#[test]
fn runs_are_bit_identical() {
    let (pairs, vocab) = corpus();
    let m = model(&vocab);
    let run = || {
        let mut p = m.init_params(2).unwrap();
        let log = pretrain(&pairs, &vocab, &m, &config(4, 2), &mut p).unwrap();
        (log.to_tsv(), p)
    };
    let (l1, p1) = run();
    let (l2, p2) = run();
    assert_eq!(l1, l2);
    assert_eq!(p1, p2);
    assert!(l1.starts_with("step\tlr\tl_con\tl_den\ttotal\n"));
    assert_eq!(l1.lines().count(), 7);
}

#[test]
fn zero_alpha_leaves_the_decoder_untouched() {
    let (pairs, vocab) = corpus();
    let m = model(&vocab);
    let init = m.init_params(3).unwrap();
    let mut p = init.clone();
    let cfg = TrainConfig {
        alpha: 0.0,
        ..config(4, 2)
    };
    let log = pretrain(&pairs, &vocab, &m, &cfg, &mut p).unwrap();
    for name in init.names().filter(|n| n.starts_with("denoise.")) {
        assert_eq!(
            init.tensor(name).unwrap(),
            p.tensor(name).unwrap(),
            "{name} moved"
        );
    }
    assert!(init.tensor("geom.atom_embed").unwrap() != p.tensor("geom.atom_embed").unwrap());
    assert!(log
        .entries
        .iter()
        .all(|e| e.l_den > 0.0 && e.total == e.l_con));
}

#[test]
fn window_larger_than_corpus_is_rejected() {
    let (pairs, vocab) = corpus();
    let m = model(&vocab);
    let mut p = m.init_params(0).unwrap();
    let err = pretrain(&pairs[..10], &vocab, &m, &config(8, 2), &mut p).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

#[test]
fn checkpoint_round_trip_preserves_embeddings() {
    let (pairs, vocab) = corpus();
    let m = model(&vocab);
    let mut p = m.init_params(4).unwrap();
    pretrain(&pairs, &vocab, &m, &config(4, 2), &mut p).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint_save(&p, &m, &path).unwrap();
    let (q, m2) = checkpoint_load(&path).unwrap();
    assert_eq!(m2, m);
    assert!(p.max_abs_diff(&q).unwrap() < 1e-6);
    for pair in &pairs[..5] {
        let a = embed_molecule(&p, &m.geom, &pair.molecule).unwrap();
        let b = embed_molecule(&q, &m.geom, &pair.molecule).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-6));
        let ids = tokenize(&pair.text, &vocab, m.text.max_seq_len);
        let a = embed_text(&p, &m.text, &ids).unwrap();
        let b = embed_text(&q, &m.text, &ids).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-6));
    }
}

#[test]
fn tampered_shape_names_the_entry() {
    let m = ModelConfig::default();
    let p = m.init_params(0).unwrap();
    let bytes = write_checkpoint(&p, &m).unwrap();
    let split = bytes.windows(4).position(|w| w == b"end\n").unwrap() + 4;
    let header = std::str::from_utf8(&bytes[..split]).unwrap();
    let tampered = header.replace(
        "param geom.layer0.attn.wq 64×64",
        "param geom.layer0.attn.wq 64×63",
    );
    assert_ne!(tampered, header);
    let mut out = tampered.into_bytes();
    out.extend_from_slice(&bytes[split..]);
    let err = read_checkpoint(&out).unwrap_err().to_string();
    assert!(
        err.contains("geom.layer0.attn.wq: expected 64×64, found 64×63"),
        "{err}"
    );

    let mut cut = bytes.clone();
    cut.truncate(bytes.len() - 100);
    let err = read_checkpoint(&cut).unwrap_err().to_string();
    assert!(err.contains("truncated"), "{err}");
}
