//! Cross-module invariants, checked on randomly generated models and batches.

use proptest::prelude::*;

use uapforge::autodiff::Reduction;
use uapforge::data::{minibatches, synth_blobs, Dataset, PseudoLabelCache};
use uapforge::eval::fooling_ratio;
use uapforge::model::{backward, backward_with, build_model, param_distance, predict, ModelSpec, ModelState, Wrt};
use uapforge::Tensor;

fn small_cnn(seed: u64) -> ModelState<f64> {
    let spec = ModelSpec::cnn("cnn-test", &[1, 4, 4], [2, 3, 4], 3);
    build_model(&spec, seed).unwrap()
}

fn batch(seed: u64, n: usize) -> Dataset<f64> {
    synth_blobs::<f64>(3, n, &[1, 4, 4], 0.2, seed).unwrap()
}

fn repeat_rows(x: &Tensor<f64>, labels: &[usize], times: usize) -> (Tensor<f64>, Vec<usize>) {
    let idx: Vec<usize> = (0..times).flat_map(|_| 0..labels.len()).collect();
    let ys = idx.iter().map(|&i| labels[i]).collect();
    (x.gather_outer(&idx).unwrap(), ys)
}

fn concat(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    /// Gradient of `a·L1 + b·L2` (integer weights realized by repeating rows
    /// under a summed loss) equals `a·∇L1 + b·∇L2`.
    #[test]
    fn backward_is_linear(seed in 0u64..1000, a in 1usize..4, b in 1usize..4) {
        let m = small_cnn(seed);
        let d1 = batch(seed, 3);
        let d2 = batch(seed + 7, 4);
        let (y1, y2) = (d1.labels().unwrap(), d2.labels().unwrap());
        let g1 = backward_with(&m, d1.images(), y1, Wrt::Parameters, Reduction::Sum).unwrap().grad;
        let g2 = backward_with(&m, d2.images(), y2, Wrt::Parameters, Reduction::Sum).unwrap().grad;
        let (xa, ya) = repeat_rows(d1.images(), y1, a);
        let (xb, yb) = repeat_rows(d2.images(), y2, b);
        let x = concat(&xa, &xb);
        let y: Vec<usize> = ya.into_iter().chain(yb).collect();
        let g = backward_with(&m, &x, &y, Wrt::Parameters, Reduction::Sum).unwrap().grad;
        let expected: Vec<f64> = g1.data().iter().zip(g2.data()).map(|(p, q)| a as f64 * p + b as f64 * q).collect();
        let scale = expected.iter().fold(1.0f64, |s, v| s.max(v.abs()));
        prop_assert!(max_abs_diff(g.data(), &expected) <= 1e-12 * scale);
    }

    /// ∇δ of the mean loss equals the average of the per-input gradients at x_i + δ.
    #[test]
    fn perturbation_gradient_identity(seed in 0u64..1000, n in 3usize..8) {
        let m = small_cnn(seed);
        let d = batch(seed, n);
        let y = d.labels().unwrap();
        let delta = Tensor::from_fn(&[1, 4, 4], |i| 0.05 * ((i as f64 + seed as f64).sin()));
        let gd = backward(&m, d.images(), y, Wrt::Perturbation(&delta)).unwrap().grad;
        let shifted = Tensor::new(
            d.images().shape().to_vec(),
            d.images().data().iter().enumerate().map(|(i, &v)| v + delta.data()[i % 16]).collect(),
        ).unwrap();
        let gx = backward_with(&m, &shifted, y, Wrt::Input, Reduction::Sum).unwrap().grad;
        let mut avg = vec![0.0; 16];
        for row in gx.data().chunks_exact(16) {
            for (a, v) in avg.iter_mut().zip(row) {
                *a += v;
            }
        }
        avg.iter_mut().for_each(|a| *a /= n as f64);
        prop_assert!(max_abs_diff(gd.data(), &avg) <= 1e-12);
    }

    #[test]
    fn backward_is_deterministic(seed in 0u64..1000) {
        let m = small_cnn(seed);
        let d = batch(seed, 5);
        let y = d.labels().unwrap();
        let a = backward(&m, d.images(), y, Wrt::Parameters).unwrap();
        let b = backward(&m, d.images(), y, Wrt::Parameters).unwrap();
        prop_assert_eq!(a.grad.data(), b.grad.data());
        prop_assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }

    #[test]
    fn param_distance_is_a_metric(s1 in 0u64..500, s2 in 0u64..500, s3 in 0u64..500) {
        let (a, b, c) = (small_cnn(s1), small_cnn(s2), small_cnn(s3));
        let ab = param_distance(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, param_distance(&b, &a).unwrap());
        prop_assert_eq!(param_distance(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(ab == 0.0, s1 == s2);
        prop_assert!(param_distance(&a, &c).unwrap() <= ab + param_distance(&b, &c).unwrap() + 1e-12);
    }

    /// Shifting every logit by the same constant (via the output bias) keeps the argmax.
    #[test]
    fn predict_ignores_logit_shift(seed in 0u64..1000, c in -20.0f64..20.0) {
        let m = small_cnn(seed);
        let d = batch(seed, 8);
        let k = m.num_classes();
        let mut p = m.params().data().to_vec();
        let n = p.len();
        p[n - k..].iter_mut().for_each(|b| *b += c);
        let shifted = m.with_params(Tensor::vector(p)).unwrap();
        // Exact ties can break differently after rounding; random weights make them measure-zero.
        prop_assert_eq!(predict(&m, d.images()).unwrap(), predict(&shifted, d.images()).unwrap());
    }

    /// Batches carry exactly the cached pseudo-labels at their indices.
    #[test]
    fn batches_carry_cached_pseudo_labels(seed in 0u64..1000, b in 1usize..9) {
        let m = small_cnn(seed);
        let d = batch(seed, 20);
        let mut cache = PseudoLabelCache::new();
        let labels = cache.get_or_compute(&m, &d).unwrap().to_vec();
        let labeled = d.with_labels(labels.clone()).unwrap();
        for batch in minibatches(&labeled, b, seed).unwrap() {
            let expect: Vec<usize> = batch.indices.iter().map(|&i| labels[i]).collect();
            prop_assert_eq!(&batch.labels, &expect);
            let rows = d.images().gather_outer(&batch.indices).unwrap();
            prop_assert_eq!(batch.images.data(), rows.data());
        }
        cache.get_or_compute(&m, &d).unwrap();
        prop_assert_eq!(cache.len(), 1);
    }

    #[test]
    fn minibatches_reproducible_and_reshuffled(seed in 0u64..1000, n in 10usize..40) {
        let d = batch(seed, n);
        let idx = |s| minibatches(&d, 4, s).unwrap().into_iter().flat_map(|b| b.indices).collect::<Vec<_>>();
        prop_assert_eq!(idx(seed), idx(seed));
        prop_assert_ne!(idx(seed), idx(seed ^ 1));
    }

    /// Zero perturbation fools nothing; permuting the data leaves the counts alone;
    /// every correct→wrong flip is also a prediction change.
    #[test]
    fn fooling_ratio_invariants(seed in 0u64..1000, amp in 0.0f64..0.5) {
        let m = small_cnn(seed);
        let d = batch(seed, 30);
        let zero = Tensor::zeros(&[1, 4, 4]);
        prop_assert_eq!(fooling_ratio(&m, &d, &zero).unwrap().fooling_ratio, 0.0);
        let delta = Tensor::from_fn(&[1, 4, 4], |i| amp * if (i * 7 + seed as usize).is_multiple_of(3) { 1.0 } else { -1.0 });
        let r = fooling_ratio(&m, &d, &delta).unwrap();
        let perm = uapforge::data::permutation(30, seed);
        let rp = fooling_ratio(&m, &d.select(&perm).unwrap(), &delta).unwrap();
        prop_assert_eq!(r.n_changed, rp.n_changed);
        prop_assert!(r.n_changed >= r.n_correct_to_wrong.unwrap());
        prop_assert!((0.0..=1.0).contains(&r.fooling_ratio));
    }
}
