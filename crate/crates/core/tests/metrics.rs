use plood_core::metrics::*;
use plood_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Precision and recall at every distinct threshold, brute force.
fn sweep_ap(id: &[f64], ood: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = id.iter().chain(ood).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for t in thresholds {
        let tp = id.iter().filter(|&&s| s >= t).count() as f64;
        let fp = ood.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / id.len() as f64;
        if tp > 0.0 {
            ap += (recall - last_recall) * tp / (tp + fp);
        }
        last_recall = recall;
    }
    ap
}

fn sweep_fpr(id: &[f64], ood: &[f64]) -> f64 {
    let mut best: Option<f64> = None;
    for &t in id.iter().chain(ood) {
        let tpr = id.iter().filter(|&&s| s >= t).count() as f64 / id.len() as f64;
        if tpr >= 0.95 && best.map_or(true, |b| t > b) {
            best = Some(t);
        }
    }
    let t = best.expect("lowest score always qualifies");
    ood.iter().filter(|&&s| s >= t).count() as f64 / ood.len() as f64
}

fn random_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n_id = rng.gen_range(1..=25);
    let n_ood = rng.gen_range(1..=25);
    // coarse grid forces ties
    let draw = |rng: &mut ChaCha8Rng, shift: i32| f64::from(rng.gen_range(0..12) + shift);
    let id = (0..n_id).map(|_| draw(rng, 2)).collect();
    let ood = (0..n_ood).map(|_| draw(rng, 0)).collect();
    (id, ood)
}

#[test]
fn metrics_match_exhaustive_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let (id, ood) = random_case(&mut rng);
        let input = EvalInput::new(id.clone(), ood.clone());
        assert!((aupr_in(&input).unwrap() - sweep_ap(&id, &ood)).abs() < 1e-9);
        assert!((fpr95(&input).unwrap() - sweep_fpr(&id, &ood)).abs() < 1e-9);
    }
}

#[test]
fn metrics_ignore_monotone_transforms_and_orientation_flips() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let (id, ood) = random_case(&mut rng);
        let base = EvalInput::new(id.clone(), ood.clone());
        let f = |v: &f64| (0.3 * v).exp() * 5.0 - 7.0;
        let moved = EvalInput::new(id.iter().map(f).collect(), ood.iter().map(f).collect());
        let flipped = EvalInput {
            id_scores: id.iter().map(|v| -v).collect(),
            ood_scores: ood.iter().map(|v| -v).collect(),
            orientation: Orientation::LowerIsId,
        };
        for other in [&moved, &flipped] {
            assert_eq!(aupr_in(&base).unwrap(), aupr_in(other).unwrap());
            assert_eq!(fpr95(&base).unwrap(), fpr95(other).unwrap());
        }
    }
}

#[test]
fn accuracy_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (n, q) = (40, 5);
    let data: Vec<f64> = (0..n * q).map(|_| f64::from(rng.gen_range(0..3))).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..q)).collect();
    let mut hits = 0;
    for i in 0..n {
        let mut best = 0;
        for j in 1..q {
            if data[i * q + j] > data[i * q + best] {
                best = j;
            }
        }
        hits += usize::from(best == labels[i]);
    }
    let logits = Tensor::new(&[n, q], data).unwrap();
    assert_eq!(id_accuracy(&logits, &labels).unwrap(), hits as f64 / n as f64);
}
