use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::confusable::char_ngram_hashes;
use crate::Executor;

/// Sparse, L2-normalized hashed character n-gram features.
pub(crate) fn features(text: &str, dim: usize, max_n: usize) -> Vec<(u32, f32)> {
    let mut counts: BTreeMap<u32, f32> = BTreeMap::new();
    char_ngram_hashes(text, max_n, |h| *counts.entry((h % dim as u64) as u32).or_default() += 1.0);
    let norm = counts.values().map(|v| v * v).sum::<f32>().sqrt();
    counts.into_iter().map(|(i, v)| (i, if norm > 0.0 { v / norm } else { 0.0 })).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptronConfig {
    pub dim: usize,
    pub max_n: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for PerceptronConfig {
    fn default() -> Self {
        PerceptronConfig { dim: 1 << 14, max_n: 3, epochs: 8, seed: 0 }
    }
}

/// One-vs-rest averaged perceptron over hashed n-grams. Labels are kept sorted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NgramPerceptron {
    pub dim: usize,
    pub max_n: usize,
    pub labels: Vec<String>,
    pub weights: Vec<Vec<f32>>,
    pub bias: Vec<f32>,
}

impl NgramPerceptron {
    /// Trains one binary classifier per distinct label; classes train in parallel.
    pub fn train(docs: &[(&str, &str)], config: &PerceptronConfig, exec: &Executor) -> Self {
        let mut labels: Vec<String> = docs.iter().map(|(_, l)| l.to_string()).collect();
        labels.sort();
        labels.dedup();
        let xs: Vec<Vec<(u32, f32)>> = exec.map(docs, |(text, _)| features(text, config.dim, config.max_n));
        let ys: Vec<usize> = docs.iter().map(|(_, l)| labels.binary_search(&l.to_string()).expect("label present")).collect();
        let mut order: Vec<usize> = (0..docs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let orders: Vec<Vec<usize>> = (0..config.epochs)
            .map(|_| {
                order.shuffle(&mut rng);
                order.clone()
            })
            .collect();
        let trained = exec.map_range(labels.len(), |class| train_binary(&xs, &ys, class, &orders, config.dim));
        let (weights, bias) = trained.into_iter().unzip();
        NgramPerceptron { dim: config.dim, max_n: config.max_n, labels, weights, bias }
    }

    /// Raw score of every label, in label order.
    pub fn scores(&self, text: &str) -> Vec<f64> {
        let x = features(text, self.dim, self.max_n);
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| (x.iter().map(|(i, v)| w[*i as usize] * v).sum::<f32>() + b) as f64)
            .collect()
    }
}

fn train_binary(xs: &[Vec<(u32, f32)>], ys: &[usize], class: usize, orders: &[Vec<usize>], dim: usize) -> (Vec<f32>, f32) {
    let mut w = vec![0f32; dim];
    let mut acc = vec![0f32; dim];
    let (mut b, mut acc_b) = (0f32, 0f32);
    let mut step = 1f32;
    for order in orders {
        for &i in order {
            let y = if ys[i] == class { 1.0 } else { -1.0 };
            let margin: f32 = xs[i].iter().map(|(j, v)| w[*j as usize] * v).sum::<f32>() + b;
            if y * margin <= 0.0 {
                for (j, v) in &xs[i] {
                    w[*j as usize] += y * v;
                    acc[*j as usize] += step * y * v;
                }
                b += y;
                acc_b += step * y;
            }
            step += 1.0;
        }
    }
    let avg: Vec<f32> = w.iter().zip(&acc).map(|(w, a)| w - a / step).collect();
    (avg, b - acc_b / step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_classes() {
        let docs = [("the thief stole a phone", "theft"), ("stole a wallet quietly", "theft"), ("punched and robbed him", "robbery"), ("robbed at knifepoint", "robbery")];
        let m = NgramPerceptron::train(&docs, &PerceptronConfig { dim: 1024, ..Default::default() }, &Executor::sequential());
        assert_eq!(m.labels, ["robbery", "theft"]);
        let s = m.scores("someone stole a phone");
        assert!(s[1] > s[0]);
        let s = m.scores("robbed with a knife");
        assert!(s[0] > s[1]);
    }

    #[test]
    fn parallel_training_matches_sequential() {
        let docs: Vec<(String, String)> = (0..30).map(|i| (format!("case {i} text {}", i % 3), format!("l{}", i % 3))).collect();
        let refs: Vec<(&str, &str)> = docs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let cfg = PerceptronConfig { dim: 512, ..Default::default() };
        assert_eq!(
            NgramPerceptron::train(&refs, &cfg, &Executor::sequential()),
            NgramPerceptron::train(&refs, &cfg, &Executor::with_threads(4))
        );
    }
}
