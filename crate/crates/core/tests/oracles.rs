//! Vectorized routines checked against naive scalar reimplementations.

use dfa_core::alignment::{self, KernelSpec};
use dfa_core::datasets::{make_synthetic_episode, MixtureSpec, ShiftSpec, SSDAEpisode};
use dfa_core::linalg::{self, Matrix};
use dfa_core::model::{self, Activation, Backbone, CosineClassifier, MlpSpec, Model};
use dfa_core::pseudolabel::{self, PseudoBatch};
use dfa_core::trainer::{evaluate, score_predictions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

fn scalar_kernel(a: &[f64], b: &[f64], sigmas: &[f64]) -> f64 {
    let mut sq = 0.0;
    for i in 0..a.len() {
        sq += (a[i] - b[i]) * (a[i] - b[i]);
    }
    let mut total = 0.0;
    for s in sigmas {
        total += (-sq / (2.0 * s * s)).exp();
    }
    total
}

fn scalar_mmd(p: &Matrix, u: &Matrix, sigmas: &[f64]) -> f64 {
    let (k, n) = (p.rows(), u.rows());
    let mut pp = 0.0;
    for i in 0..k {
        for j in 0..k {
            pp += scalar_kernel(p.row(i), p.row(j), sigmas);
        }
    }
    let mut pu = 0.0;
    for i in 0..k {
        for j in 0..n {
            pu += scalar_kernel(p.row(i), u.row(j), sigmas);
        }
    }
    let mut uu = 0.0;
    for i in 0..n {
        for j in 0..n {
            uu += scalar_kernel(u.row(i), u.row(j), sigmas);
        }
    }
    pp / (k * k) as f64 - 2.0 * pu / (k * n) as f64 + uu / (n * n) as f64
}

#[test]
fn mmd_matches_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let k = rng.random_range(2..=8);
        let n = rng.random_range(2..=16);
        let d = rng.random_range(1..=8);
        let p = random_matrix(&mut rng, k, d, 1.5);
        let u = random_matrix(&mut rng, n, d, 1.5);
        let sigmas: Vec<f64> = (0..rng.random_range(1..=5)).map(|_| rng.random_range(0.1..4.0)).collect();
        let fast = alignment::mmd_with(&p, &u, &sigmas).unwrap();
        assert!((fast - scalar_mmd(&p, &u, &sigmas)).abs() < 1e-10);
        let (with_grad, _) = alignment::mmd_and_grad(&p, &u, &sigmas).unwrap();
        assert!((with_grad - fast).abs() < 1e-10);
    }
}

#[test]
fn median_bandwidths_follow_the_combined_set() {
    let p = Matrix::from_vec(2, 1, vec![0.0, 1.0]);
    let u = Matrix::from_vec(2, 1, vec![3.0, 7.0]);
    // pairwise distances 1, 3, 7, 2, 6, 4 -> median 3.5
    assert_eq!(alignment::median_pairwise_distance(&p, &u), 3.5);
    let s = KernelSpec::default().resolve(&p, &u).unwrap();
    assert_eq!(s, vec![0.875, 1.75, 3.5, 7.0, 14.0]);
    let fast = alignment::mmd(&p, &u, &KernelSpec::default()).unwrap();
    assert!((fast - scalar_mmd(&p, &u, &s)).abs() < 1e-12);
}

#[test]
fn mmd_feature_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_matrix(&mut rng, 4, 3, 1.0);
    let u = random_matrix(&mut rng, 5, 3, 1.0);
    let sigmas = [0.5, 1.0, 2.0];
    let (_, g) = alignment::mmd_and_grad(&p, &u, &sigmas).unwrap();
    let h = 1e-6;
    for idx in 0..u.as_slice().len() {
        let mut up = u.clone();
        up.as_mut_slice()[idx] += h;
        let mut dn = u.clone();
        dn.as_mut_slice()[idx] -= h;
        let fd = (scalar_mmd(&p, &up, &sigmas) - scalar_mmd(&p, &dn, &sigmas)) / (2.0 * h);
        assert!((fd - g.as_slice()[idx]).abs() < 1e-8, "{idx}: {fd} vs {}", g.as_slice()[idx]);
    }
}

#[test]
fn cosine_classifier_on_known_feature() {
    assert_eq!(model::normalize_feature(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
    let w = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 2.0]);
    let clf = CosineClassifier::new(w, 0.05, true).unwrap();
    let p = model::classify(&[0.6, 0.8], &clf).unwrap();
    let (z0, z1): (f64, f64) = (0.6 / 0.05, 0.8 / 0.05);
    let expected = 1.0 / (1.0 + (z0 - z1).exp());
    assert!((p[1] - expected).abs() < 1e-12);
    let loss = model::classification_loss(&clf.logits(&Matrix::from_vec(1, 2, vec![0.6, 0.8])).unwrap(), &[1]).unwrap().0;
    assert!((loss + expected.ln()).abs() < 1e-12);
}

fn small_episode(seed: u64, n_unlabeled: usize) -> SSDAEpisode {
    let spec = MixtureSpec { n_classes: 5, dim: 2, n_source: 50, n_unlabeled, shots: 3, radius: 2.0, cluster_std: 0.5 };
    make_synthetic_episode(seed, &spec, &ShiftSpec::rotation(30.0)).unwrap()
}

#[test]
fn accuracy_matches_scalar_argmax_and_compare() {
    let ep = small_episode(4, 50);
    let spec = MlpSpec { input_dim: 2, hidden: vec![8], output_dim: 4, activation: Activation::Tanh };
    let model = Model::mlp(&spec, 5, 0.05, true, 9).unwrap();
    let x = ep.unlabeled_inputs();
    let mut correct = 0;
    for i in 0..x.rows() {
        let m = model.extract(x.row(i)).unwrap();
        let p = model::classify(&m, &model.classifier).unwrap();
        let mut best = 0;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        if best == ep.hidden_labels()[i] {
            correct += 1;
        }
    }
    let eval = evaluate(&model, &ep).unwrap();
    assert_eq!(eval.n, 50);
    assert_eq!(eval.accuracy, correct as f64 / 50.0);
}

#[test]
fn random_models_score_at_chance() {
    let spec = MlpSpec { input_dim: 2, hidden: vec![8], output_dim: 4, activation: Activation::Tanh };
    let seeds = 40;
    let mut total = 0.0;
    for seed in 0..seeds {
        let ep = small_episode(seed, 200);
        let model = Model::mlp(&spec, 5, 0.05, true, 1000 + seed).unwrap();
        total += evaluate(&model, &ep).unwrap().accuracy;
    }
    let mean = total / seeds as f64;
    assert!((mean - 0.2).abs() <= 0.05, "{mean}");
}

/// Maps each unlabeled input to the one-hot vector of its hidden label.
#[derive(Debug, Clone)]
struct Lookup {
    inputs: Matrix,
    labels: Vec<usize>,
    k: usize,
}

impl Backbone for Lookup {
    type Cache = ();

    fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    fn output_dim(&self) -> usize {
        self.k
    }

    fn forward(&self, x: &Matrix) -> (Matrix, ()) {
        let mut out = Matrix::zeros(x.rows(), self.k);
        for i in 0..x.rows() {
            let j = (0..self.inputs.rows()).find(|&j| self.inputs.row(j) == x.row(i)).expect("unknown input");
            out.row_mut(i)[self.labels[j]] = 1.0;
        }
        (out, ())
    }

    fn backward(&self, _: &(), grad_out: &Matrix) -> (Vec<f64>, Matrix) {
        (Vec::new(), Matrix::zeros(grad_out.rows(), self.inputs.cols()))
    }

    fn num_params(&self) -> usize {
        0
    }

    fn params(&self) -> Vec<f64> {
        Vec::new()
    }

    fn set_params(&mut self, _: &[f64]) {}
}

#[test]
fn memorizing_model_scores_one() {
    let ep = small_episode(2, 100);
    let backbone = Lookup { inputs: ep.unlabeled_inputs().clone(), labels: ep.hidden_labels().to_vec(), k: 5 };
    let mut eye = Matrix::zeros(5, 5);
    for k in 0..5 {
        eye.row_mut(k)[k] = 1.0;
    }
    let model = Model { backbone, classifier: CosineClassifier::new(eye, 0.05, true).unwrap() };
    let eval = evaluate(&model, &ep).unwrap();
    assert_eq!(eval.accuracy, 1.0);
    assert!(eval.per_class.iter().all(|c| *c == Some(1.0)));
}

#[test]
fn scoring_matches_manual_count() {
    let preds = [0, 2, 1, 1, 0, 2, 2];
    let labels = [0, 1, 1, 1, 2, 2, 0];
    let e = score_predictions(&preds, &labels, 3);
    assert_eq!(e.accuracy, 4.0 / 7.0);
    assert_eq!(e.per_class, vec![Some(0.5), Some(2.0 / 3.0), Some(0.5)]);
}

#[test]
fn pseudo_label_is_classifier_argmax_not_prototype_argmax() {
    // feature sits closest to prototype 0 while the classifier favours class 1
    let features = Matrix::from_vec(1, 2, vec![1.0, 0.0]);
    let prototypes = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let w = Matrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
    let clf = CosineClassifier::new(w, 0.05, true).unwrap();
    let probs = linalg::softmax_rows(&clf.logits(&features).unwrap());

    let proto_probs = pseudolabel::prototype_softmax(&features, &prototypes, 0.07).unwrap();
    assert_eq!(linalg::argmax(proto_probs.row(0)), 0);

    let scores = pseudolabel::selection_scores(&features, &prototypes, 0.07).unwrap();
    let mask = pseudolabel::threshold(&scores, 0.3, 0.5).unwrap();
    assert_eq!(mask.n_pse(), 1);
    let batch = PseudoBatch::build(&mask, &scores, &probs);
    assert_eq!(batch.labels, vec![1]);
}
