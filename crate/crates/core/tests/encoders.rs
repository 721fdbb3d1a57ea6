mod common;

use common::{max_diff, random_molecule, random_rotation};
use geomtext::encoders::{
    embed_molecule, embed_text, encode_geometry, encode_text, GeomEncoderConfig, TextEncoderConfig,
};
use geomtext::molio::Molecule;
use geomtext::tensor::{finite_diff_check, ModelParams};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn geom_params(cfg: &GeomEncoderConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::new();
    cfg.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap();
    p
}

#[test]
fn geometry_embedding_is_rigid_motion_and_permutation_invariant() {
    let cfg = GeomEncoderConfig::default();
    let params = geom_params(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_motion, mut worst_perm) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.gen_range(3..=20);
        let m = random_molecule(&mut rng, n);
        let g = embed_molecule(&params, &cfg, &m).unwrap();
        let t = [0, 1, 2].map(|_| rng.gen_range(-10.0..10.0));
        let moved = m.transformed(&random_rotation(&mut rng), t);
        worst_motion = worst_motion.max(max_diff(
            &g,
            &embed_molecule(&params, &cfg, &moved).unwrap(),
        ));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let perm = m.permuted(&order).unwrap();
        worst_perm = worst_perm.max(max_diff(&g, &embed_molecule(&params, &cfg, &perm).unwrap()));
    }
    assert!(
        worst_motion < 1e-9,
        "rigid motion changed g by {worst_motion}"
    );
    assert!(worst_perm < 1e-9, "permutation changed g by {worst_perm}");
}

// Plain-loop reference for a one-atom molecule: attention over a single
// key is the identity on the value row, and the self-distance bias cancels
// in the softmax.
fn hand_forward(p: &ModelParams, cfg: &GeomEncoderConfig, z: usize) -> Vec<f64> {
    let get = |n: &str| p.tensor(n).unwrap().data().to_vec();
    let d = cfg.atom_embed_dim;
    let affine = |x: &[f64], w: &[f64], b: &[f64], out: usize| -> Vec<f64> {
        (0..out)
            .map(|j| b[j] + (0..x.len()).map(|i| x[i] * w[i * out + j]).sum::<f64>())
            .collect()
    };
    let norm = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let mu = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / x.len() as f64;
        let s = (var + 1e-5).sqrt();
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mu) / s * g[i] + b[i])
            .collect()
    };
    let gelu = |x: f64| {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    };

    let mut x: Vec<f64> = get("geom.atom_embed")[z * d..(z + 1) * d].to_vec();
    for l in 0..cfg.num_layers {
        let n = |s: &str| get(&format!("geom.layer{l}.{s}"));
        let h = norm(&x, &n("ln1.gamma"), &n("ln1.beta"));
        let v = affine(&h, &n("attn.wv"), &n("attn.bv"), d);
        let o = affine(&v, &n("attn.wo"), &n("attn.bo"), d);
        x = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let h = norm(&x, &n("ln2.gamma"), &n("ln2.beta"));
        let f: Vec<f64> = affine(&h, &n("ffn.w1"), &n("ffn.b1"), 2 * d)
            .into_iter()
            .map(gelu)
            .collect();
        let f = affine(&f, &n("ffn.w2"), &n("ffn.b2"), d);
        x = x.iter().zip(&f).map(|(a, b)| a + b).collect();
    }
    let z = norm(&x, &get("geom.ln_f.gamma"), &get("geom.ln_f.beta"));
    let h: Vec<f64> = affine(
        &z,
        &get("geom.proj.w1"),
        &get("geom.proj.b1"),
        cfg.proj_hidden,
    )
    .into_iter()
    .map(gelu)
    .collect();
    affine(&h, &get("geom.proj.w2"), &get("geom.proj.b2"), cfg.proj_dim)
}

#[test]
fn single_atom_matches_hand_trace() {
    let cfg = GeomEncoderConfig {
        atom_embed_dim: 4,
        num_layers: 2,
        num_heads: 2,
        rbf_centers: vec![0.0, 1.0, 2.0],
        proj_dim: 3,
        proj_hidden: 5,
        max_atomic_number: 10,
        ..GeomEncoderConfig::default()
    };
    let mut params = geom_params(&cfg, 3);
    // Non-trivial norm parameters so the affine part of layer norm is exercised.
    for (name, p) in params.iter_mut() {
        if name.contains("ln") {
            for (i, v) in p.tensor.data_mut().iter_mut().enumerate() {
                *v += 0.1 * i as f64;
            }
        }
    }
    let m = Molecule::new("c", vec![6], vec![[0.3, -1.0, 2.0]]).unwrap();
    let g = embed_molecule(&params, &cfg, &m).unwrap();
    let want = hand_forward(&params, &cfg, 6);
    assert!(max_diff(&g, &want) < 1e-12, "{g:?} vs {want:?}");
}

fn tiny_text() -> (TextEncoderConfig, ModelParams) {
    let cfg = TextEncoderConfig {
        vocab_size: 10,
        token_embed_dim: 4,
        num_layers: 1,
        num_heads: 2,
        max_seq_len: 8,
        proj_dim: 3,
        proj_hidden: 5,
    };
    let mut p = ModelParams::new();
    cfg.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(4))
        .unwrap();
    (cfg, p)
}

#[test]
fn padding_does_not_change_text_embedding() {
    let (cfg, params) = tiny_text();
    let ids = [2, 7, 8, 9];
    let base = embed_text(&params, &cfg, &ids).unwrap();
    for pad in 1..=4 {
        let mut padded = ids.to_vec();
        padded.extend(std::iter::repeat_n(0, pad));
        let t = embed_text(&params, &cfg, &padded).unwrap();
        assert!(max_diff(&base, &t) < 1e-9);
    }
}

#[test]
fn different_init_seeds_give_different_embeddings() {
    let cfg = TextEncoderConfig {
        vocab_size: 20,
        ..TextEncoderConfig::default()
    };
    let embed = |seed| {
        let mut p = ModelParams::new();
        cfg.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        embed_text(&p, &cfg, &[2, 10, 11, 12]).unwrap()
    };
    let (a, b) = (embed(1), embed(2));
    assert!(max_diff(&a, &b) > 1e-3);
    assert!(a.iter().any(|v| (v - a[0]).abs() > 1e-6), "constant output");
}

#[test]
fn text_encoder_gradients_match_finite_differences() {
    let (cfg, params) = tiny_text();
    let weights = [0.3, -1.1, 0.7];
    let report = finite_diff_check(&params, 1e-5, 1e-4, |tape, b| {
        let t = encode_text(tape, b, &cfg, &[2, 5, 9, 6, 0, 0])?;
        let w = tape.constant(&geomtext::tensor::Tensor::matrix(1, 3, weights.to_vec())?);
        Ok(tape.sum(tape.mul(t.embedding, w)?))
    })
    .unwrap();
    assert!(report.passed, "max rel error {}", report.max_rel_error);
}

#[test]
fn geometry_encoder_gradients_match_finite_differences() {
    let cfg = GeomEncoderConfig {
        atom_embed_dim: 4,
        num_layers: 1,
        num_heads: 2,
        rbf_centers: vec![0.0, 1.0, 2.0, 3.0],
        proj_dim: 3,
        proj_hidden: 5,
        max_atomic_number: 9,
        ..GeomEncoderConfig::default()
    };
    let params = geom_params(&cfg, 5);
    let m = random_molecule(&mut ChaCha8Rng::seed_from_u64(6), 5);
    let m = Molecule::new(
        "m",
        m.atoms().iter().map(|&z| z.min(9)).collect(),
        m.coords().to_vec(),
    )
    .unwrap();
    let report = finite_diff_check(&params, 1e-5, 1e-4, |tape, b| {
        let g = encode_geometry(tape, b, &cfg, &m)?;
        Ok(tape.sq_l2(g.embedding))
    })
    .unwrap();
    assert!(report.passed, "max rel error {}", report.max_rel_error);
}
