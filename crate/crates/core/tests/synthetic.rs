use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tmrnet::synth::{make_dataset, LabeledSequence, SchemaConfig, WorkflowSchema};
use tmrnet::train::sample_batch;

fn default_data(seed: u64) -> (WorkflowSchema, tmrnet::synth::Dataset) {
    let s = WorkflowSchema::from_config(&SchemaConfig::default()).unwrap();
    let data = make_dataset(&s, 24, 6, 10, seed, (150, 300)).unwrap();
    (s, data)
}

/// Frames of phases `a` (class 0) and `b` (class 1).
fn pair_frames(videos: &[LabeledSequence], a: usize, b: usize) -> Vec<(Vec<f64>, usize)> {
    let mut out = Vec::new();
    for v in videos {
        for t in 0..v.len() {
            let l = v.labels[t];
            if l == a || l == b {
                out.push((v.frame(t).to_vec(), usize::from(l == b)));
            }
        }
    }
    out
}

/// Logistic regression by full-batch gradient descent on standardized inputs,
/// with balanced class weights.
fn fit_probe(train: &[(Vec<f64>, usize)]) -> impl Fn(&[f64]) -> usize {
    let d = train[0].0.len();
    let n = train.len() as f64;
    let mut mu = vec![0.0; d];
    for (x, _) in train {
        for (m, v) in mu.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for (x, _) in train {
        for ((s, v), m) in sd.iter_mut().zip(x).zip(&mu) {
            *s += (v - m).powi(2) / n;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| v.sqrt().max(1e-9)).collect();
    let z = move |x: &[f64]| -> Vec<f64> { x.iter().zip(&mu).zip(&sd).map(|((v, m), s)| (v - m) / s).collect() };
    let pos = train.iter().filter(|(_, y)| *y == 1).count() as f64;
    let cw = [n / (2.0 * (n - pos)), n / (2.0 * pos)];
    let xs: Vec<Vec<f64>> = train.iter().map(|(x, _)| z(x)).collect();
    let z = z.clone();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..300 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, (_, y)) in xs.iter().zip(train) {
            let s: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let p = 1.0 / (1.0 + (-s).exp());
            let g = cw[*y] * (p - *y as f64) / n;
            for (gi, xi) in gw.iter_mut().zip(x) {
                *gi += g * xi;
            }
            gb += g;
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= 0.5 * gi;
        }
        b -= 0.5 * gb;
    }
    move |x: &[f64]| {
        let s: f64 = b + z(x).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
        usize::from(s > 0.0)
    }
}

fn balanced_accuracy(probe: &dyn Fn(&[f64]) -> usize, test: &[(Vec<f64>, usize)]) -> f64 {
    let mut hit = [0.0; 2];
    let mut count = [0.0; 2];
    for (x, y) in test {
        count[*y] += 1.0;
        if probe(x) == *y {
            hit[*y] += 1.0;
        }
    }
    0.5 * (hit[0] / count[0] + hit[1] / count[1])
}

#[test]
fn memoryless_probe_cannot_separate_ambiguous_phases() {
    let (s, data) = default_data(3);
    for &(a, b) in &s.ambiguous_pairs {
        let probe = fit_probe(&pair_frames(&data.train, a, b));
        let acc = balanced_accuracy(&probe, &pair_frames(&data.test, a, b));
        assert!(acc <= 0.55, "phases {a}/{b}: balanced accuracy {acc}");
    }
    // the same probe separates an ordinary pair, so the check has teeth
    let probe = fit_probe(&pair_frames(&data.train, 0, 1));
    let acc = balanced_accuracy(&probe, &pair_frames(&data.test, 0, 1));
    assert!(acc >= 0.9, "phases 0/1: balanced accuracy {acc}");
}

#[test]
fn action_durations_vary() {
    let (s, data) = default_data(4);
    let mut per_action: Vec<Vec<f64>> = vec![Vec::new(); s.actions.len()];
    for v in data.train.iter().chain(&data.test) {
        for r in v.action_runs.iter().filter(|r| !r.truncated) {
            per_action[r.action].push((r.end - r.start) as f64);
        }
    }
    let mut checked = 0;
    for (i, xs) in per_action.iter().enumerate().filter(|(_, xs)| xs.len() >= 30) {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        assert!(sd / m >= 0.3, "action {i}: coefficient of variation {}", sd / m);
        checked += 1;
    }
    assert!(checked >= 8, "only {checked} actions had enough runs");
}

fn phase_means(videos: &[LabeledSequence], c: usize) -> Vec<Vec<f64>> {
    let d = videos[0].d_raw();
    let mut sum = vec![vec![0.0; d]; c];
    let mut n = vec![0.0; c];
    for v in videos {
        for t in 0..v.len() {
            n[v.labels[t]] += 1.0;
            for (s, x) in sum[v.labels[t]].iter_mut().zip(v.frame(t)) {
                *s += x;
            }
        }
    }
    sum.into_iter()
        .zip(n)
        .map(|(s, k)| s.into_iter().map(|x| x / k).collect())
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn train_and_test_share_phase_statistics() {
    let (s, data) = default_data(5);
    let c = s.num_phases();
    let tr = phase_means(&data.train, c);
    let te = phase_means(&data.test, c);
    let ambiguous = |i: usize, j: usize| s.ambiguous_pairs.iter().any(|&(a, b)| (a, b) == (i, j) || (b, a) == (i, j));
    let mut between = f64::INFINITY;
    for i in 0..c {
        for j in 0..c {
            if i != j && !ambiguous(i, j) {
                between = between.min(dist(&tr[i], &tr[j]));
            }
        }
    }
    for p in 0..c {
        let within = dist(&tr[p], &te[p]);
        assert!(within < 0.5 * between, "phase {p}: train/test mean distance {within}, closest other phase {between}");
    }
}

#[test]
fn batches_follow_the_frame_label_distribution() {
    let (s, data) = default_data(6);
    let c = s.num_phases();
    let mut frames = vec![0.0; c];
    for v in &data.train {
        for &l in &v.labels {
            frames[l] += 1.0;
        }
    }
    let total: f64 = frames.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = sample_batch(&data.train, 10_000, &mut rng).unwrap();
    assert_eq!(batch.len(), 10_000);
    let mut drawn = vec![0.0; c];
    for smp in &batch {
        assert_eq!(data.train[smp.video].labels[smp.t], smp.label);
        drawn[smp.label] += 1.0;
    }
    for p in 0..c {
        let diff = (drawn[p] / 10_000.0 - frames[p] / total).abs();
        assert!(diff <= 0.02, "phase {p}: sampled share differs by {diff}");
    }
    let again = sample_batch(&data.train, 10_000, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(batch, again);
}
