//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]
#![allow(clippy::needless_range_loop)]

use std::collections::HashMap;

use geomtext::metrics::BLEU_SMOOTHING;
use geomtext::molio::Molecule;
use geomtext::objectives::CorruptedMolecule;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Rotation from a random unit quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let q: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

pub fn random_molecule(rng: &mut impl Rng, n: usize) -> Molecule {
    let atoms = (0..n)
        .map(|_| *[1u8, 6, 7, 8, 9, 16, 17].choose(rng).unwrap())
        .collect();
    let coords = (0..n)
        .map(|_| [0, 1, 2].map(|_| rng.gen_range(-3.0..3.0)))
        .collect();
    Molecule::new("r", atoms, coords).unwrap()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt()
        * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Symmetric InfoNCE written as explicit loops over rows and columns.
pub fn contrastive_oracle(g: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
    let b = g.len();
    let s: Vec<Vec<f64>> = g
        .iter()
        .map(|gi| t.iter().map(|tj| cosine(gi, tj) / tau).collect())
        .collect();
    let mut total = 0.0;
    for i in 0..b {
        let row: f64 = (0..b).map(|j| s[i][j].exp()).sum();
        let col: f64 = (0..b).map(|j| s[j][i].exp()).sum();
        total += (row.ln() - s[i][i]) + (col.ln() - s[i][i]);
    }
    total / b as f64
}

/// Mean over masked atoms of squared error plus λ times the cross-entropy.
pub fn denoise_oracle(
    c: &CorruptedMolecule,
    coords: &[f64],
    logits: &[f64],
    v: usize,
    lambda: f64,
) -> f64 {
    let mut total = 0.0;
    for (k, target) in c.target_coords.iter().enumerate() {
        for d in 0..3 {
            total += (coords[3 * k + d] - target[d]).powi(2);
        }
        let row = &logits[k * v..(k + 1) * v];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lambda * (lse - row[c.target_types[k] as usize]);
    }
    total / c.mask.len() as f64
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn lcs_brute(a: &[&str], b: &[&str]) -> usize {
    let is_subseq = |s: &[&str]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    (0u32..1 << a.len())
        .map(|mask| {
            a.iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, x)| *x)
                .collect::<Vec<_>>()
        })
        .filter(|s| is_subseq(s))
        .map(|s| s.len())
        .max()
        .unwrap()
}

pub fn ngrams<'a>(s: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram hits and the candidate's n-gram count.
pub fn clipped(c: &[&str], r: &[&str], n: usize) -> (usize, usize) {
    let (cm, rm) = (ngrams(c, n), ngrams(r, n));
    let hits = cm
        .iter()
        .map(|(g, &k)| k.min(rm.get(g).copied().unwrap_or(0)))
        .sum();
    (hits, cm.values().sum())
}

pub fn bleu_oracle(c: &[&str], r: &[&str], n: usize) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let mut prod = 1.0;
    for i in 1..=n {
        let (hits, total) = clipped(c, r, i);
        let p = if hits == 0 {
            BLEU_SMOOTHING / total.max(1) as f64
        } else {
            hits as f64 / total as f64
        };
        prod *= p;
    }
    let bp = if c.len() >= r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    bp * prod.powf(1.0 / n as f64)
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Products and log-sums of the same precisions agree to rounding.
pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-14 * a.abs().max(b.abs())
}

pub fn fuzz_pair(rng: &mut ChaCha8Rng) -> (Vec<&'static str>, Vec<&'static str>) {
    const WORDS: [&str; 5] = ["the", "cat", "sat", "on", "mat"];
    let seq = |rng: &mut ChaCha8Rng| -> Vec<&'static str> {
        let len = rng.gen_range(0..=9);
        (0..len).map(|_| *WORDS.choose(rng).unwrap()).collect()
    };
    let c = seq(rng);
    let r = if rng.gen_bool(0.15) {
        c.clone()
    } else {
        seq(rng)
    };
    (c, r)
}
