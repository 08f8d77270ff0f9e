//! Oracles shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zsseg::dataio::{generate_dataset, Dataset, SceneConfig};
use zsseg::embeddings::{
    generate_synthetic_embeddings, make_split, ClassVocabulary, EmbeddingTable, SplitSpec,
};
use zsseg::model::{init_net, probabilities, NetConfig};
use zsseg::numerics::{grad_check, GradCheckReport, ParamSet, Tensor};
use zsseg::objectives::{bias_rectification, seg_cross_entropy, total_objective, IGNORE};

/// A random 8x8x3 source/target pair over 5 classes (2 unseen) with d = 4.
pub struct GradProblem {
    pub table: EmbeddingTable,
    pub split: SplitSpec,
    pub source_image: Tensor,
    pub source_mask: Vec<u16>,
    pub target_image: Tensor,
    pub params: ParamSet,
}

pub fn grad_problem(seed: u64) -> GradProblem {
    let vocab = ClassVocabulary::synthetic(4);
    let table = generate_synthetic_embeddings(&vocab, 4, seed).unwrap();
    let split = make_split(&vocab, &["obj03", "obj04"]).unwrap();
    let seen: Vec<u16> = split.seen().iter().map(|&c| c as u16).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source_image = Tensor::from_fn(&[8, 8, 3], |_| rng.random::<f64>());
    let target_image = Tensor::from_fn(&[8, 8, 3], |_| rng.random::<f64>());
    let source_mask = (0..64)
        .map(|_| seen[rng.random_range(0..seen.len())])
        .collect();
    GradProblem {
        params: init_net(&NetConfig::new(4, seed)).unwrap(),
        table,
        split,
        source_image,
        source_mask,
        target_image,
    }
}

/// Finite-difference check of `L_r + lambda * L_b` through the whole network.
pub fn check_full_objective(p: &GradProblem, lambda: f64, step: f64) -> GradCheckReport {
    let unseen = p.split.unseen_vec();
    grad_check(
        |tape, vars| {
            let xs = tape.input(p.source_image.clone());
            let ps = probabilities(tape, vars, xs, &p.table)?;
            let l_r = seg_cross_entropy(tape, ps, &p.source_mask, Some(IGNORE))?;
            let xt = tape.input(p.target_image.clone());
            let pt = probabilities(tape, vars, xt, &p.table)?;
            let l_b = bias_rectification(tape, pt, &unseen)?;
            total_objective(tape, &l_r, &l_b, lambda)
        },
        &p.params,
        step,
    )
    .unwrap()
}

/// Color of every class that appears in `ds`; panics if a class is not flat.
pub fn observed_colors(ds: &Dataset, into: &mut BTreeMap<usize, [f64; 3]>) {
    for i in 0..ds.len() {
        let img = ds.image(i).data();
        for (px, &label) in ds.evaluation_mask(i).iter().enumerate() {
            let rgb = [img[px * 3], img[px * 3 + 1], img[px * 3 + 2]];
            let prev = into.entry(label as usize).or_insert(rgb);
            assert_eq!(*prev, rgb, "class {label} is not a flat color");
        }
    }
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            let pivot = a[col].clone();
            for (x, p) in a[row][col..].iter_mut().zip(&pivot[col..]) {
                *x -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Per channel, least-squares weights for `color = w . [phi, 1]` over `classes`.
pub fn fit_affine(
    table: &EmbeddingTable,
    colors: &BTreeMap<usize, [f64; 3]>,
    classes: &[usize],
) -> Vec<Vec<f64>> {
    let d = table.dim();
    let feats: Vec<Vec<f64>> = classes
        .iter()
        .map(|&c| table.vector(c).iter().copied().chain([1.0]).collect())
        .collect();
    (0..3)
        .map(|ch| {
            let ata = (0..=d)
                .map(|i| {
                    (0..=d)
                        .map(|j| feats.iter().map(|f| f[i] * f[j]).sum())
                        .collect()
                })
                .collect();
            let atb = (0..=d)
                .map(|i| {
                    feats
                        .iter()
                        .zip(classes)
                        .map(|(f, c)| f[i] * colors[c][ch])
                        .sum()
                })
                .collect();
            solve(ata, atb)
        })
        .collect()
}

/// Generates noise-free reference scenes, fits colors on seen classes and
/// returns the largest error on any unseen-class color channel.
pub fn linear_recovery_error() -> f64 {
    let vocab = ClassVocabulary::synthetic(15);
    let table = generate_synthetic_embeddings(&vocab, 8, 7).unwrap();
    let split = make_split(&vocab, &["obj01", "obj02", "obj03", "obj04", "obj05"]).unwrap();
    let config = SceneConfig {
        noise_sigma: 0.0,
        height: 48,
        width: 48,
        ..SceneConfig::reference()
    };
    let (source, target) = generate_dataset(&vocab, &table, &split, 60, 40, &config).unwrap();
    let mut colors = BTreeMap::new();
    observed_colors(&source, &mut colors);
    observed_colors(&target, &mut colors);

    let seen: Vec<usize> = split.seen().iter().copied().collect();
    assert!(
        seen.iter().all(|c| colors.contains_key(c)),
        "every seen class must be observed"
    );
    assert!(seen.len() > table.dim() + 1, "fit must be overdetermined");
    let w = fit_affine(&table, &colors, &seen);

    let mut worst = 0.0f64;
    for &u in split.unseen() {
        let observed = colors
            .get(&u)
            .expect("every unseen class appears in the target set");
        let phi: Vec<f64> = table.vector(u).iter().copied().chain([1.0]).collect();
        for ch in 0..3 {
            let predicted: f64 = w[ch].iter().zip(&phi).map(|(a, b)| a * b).sum();
            worst = worst.max((predicted - observed[ch]).abs());
        }
    }
    worst
}
