//! Naive reference implementations of the adaptation losses.

use fate_core::clip::{clip_dp_loss, ClipModel};
use fate_core::tensor::{Tape, Tensor};
use fate_core::vision::nt_xent_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{class_names, random_images, tiny_dual};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Contrastive loss written as the literal double sum: rows `i` and `i + n`
/// are the two views of sample `i`, every row is an anchor.
pub fn naive_nt_xent(z: &[Vec<f64>], tau: f64) -> f64 {
    let rows = z.len();
    let n = rows / 2;
    let mut loss = 0.0;
    for i in 0..rows {
        let pos = (i + n) % rows;
        let num = (cosine(&z[i], &z[pos]) / tau).exp();
        let mut den = 0.0;
        for k in 0..rows {
            if k != i {
                den += (cosine(&z[k], &z[i]) / tau).exp();
            }
        }
        loss -= (num / den).ln();
    }
    loss
}

/// Mean cross-entropy of `s * cos(image, text)` against `labels`.
pub fn naive_pseudo_label_ce(image: &[Vec<f64>], text: &[Vec<f64>], labels: &[usize], s: f64) -> f64 {
    let mut loss = 0.0;
    for (x, &y) in image.iter().zip(labels) {
        let logits: Vec<f64> = text.iter().map(|t| s * cosine(x, t)).collect();
        let den: f64 = logits.iter().map(|l| l.exp()).sum();
        loss -= (logits[y].exp() / den).ln();
    }
    loss / labels.len() as f64
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

/// Largest absolute gap between the contrastive loss and its oracle over
/// `batches` random batches with `muB <= 8`.
pub fn nt_xent_gap(batches: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..batches {
        let n = rng.gen_range(1..=8);
        let d = rng.gen_range(2..=16);
        let tau = rng.gen_range(0.1..1.0);
        let z = Tensor::<f64>::uniform(&[2 * n, d], 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(z.clone());
        let l = nt_xent_loss(&mut tape, v, tau).unwrap();
        let got = tape.scalar(l).unwrap();
        worst = worst.max((got - naive_nt_xent(&rows(&z), tau)).abs());
    }
    worst
}

/// Largest absolute gap between the pseudo-label adaptation loss and its
/// oracle over `batches` random batches with `muB <= 8` and `Y <= 5`.
pub fn vl_adaptation_gap(batches: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for b in 0..batches {
        let y = rng.gen_range(2..=5);
        let n = rng.gen_range(1..=8);
        let (enc, mut store) = tiny_dual::<f64>(seed + b as u64, 30.0);
        let names = class_names()[..y].to_vec();
        let model = ClipModel::new(enc, 3, 0, names.clone()).unwrap();
        model.dp.as_ref().unwrap().init(&mut store, true, &mut rng);
        let images = random_images(n, model.encoder.vision.config.image_size, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..y)).collect();
        let f = model.encoder.class_features(&store, &names).unwrap();
        let mut tape = Tape::new();
        let l = clip_dp_loss(&mut tape, &store, &model, &images, &labels, &f).unwrap();
        let got = tape.scalar(l).unwrap();
        let img = model
            .encoder
            .image_features_value(&store, &model.visual_prompts(), &images)
            .unwrap();
        let want = naive_pseudo_label_ce(&rows(&img), &rows(&f), &labels, model.encoder.scale);
        worst = worst.max((got - want).abs());
    }
    worst
}
