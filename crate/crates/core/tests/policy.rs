use navscale::curation::{mirror_augment, TrainingSample, CHUNK_LEN, RANGE_RAYS};
use navscale::policy::{
    encode_inputs, evaluate_loss, loss_scaled, train, Batch, MlpPolicy, PolicyArch, StaticSamples, TrainConfig,
    OUTPUT_DIM,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straightforward triple-loop forward pass.
fn naive_forward(p: &MlpPolicy, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    for (k, l) in p.layers.iter().enumerate() {
        let mut z = vec![0.0; l.w.nrows()];
        for (i, zi) in z.iter_mut().enumerate() {
            let mut s = l.b[i];
            for (j, aj) in a.iter().enumerate() {
                s += l.w[[i, j]] * aj;
            }
            *zi = if k + 1 < p.layers.len() { s.tanh() } else { s };
        }
        a = z;
    }
    a
}

/// Smooth, mirror-symmetric synthetic expert.
fn synthetic(rng: &mut ChaCha8Rng, history: usize) -> TrainingSample {
    let obs_history: Vec<Vec<f64>> = (0..history)
        .map(|_| (0..RANGE_RAYS).map(|_| rng.random_range(0.2..1.0)).collect())
        .collect();
    let goal_history: Vec<[f64; 2]> = (0..history)
        .map(|_| [rng.random_range(0.0..0.15), rng.random_range(-1.0..1.0)])
        .collect();
    let r = &obs_history[history - 1];
    let g = goal_history[history - 1];
    let front: f64 = r[24..40].iter().sum::<f64>() / 16.0;
    let side = r[40..].iter().sum::<f64>() / 24.0 - r[..24].iter().sum::<f64>() / 24.0;
    let mut target = [[0.0; 2]; CHUNK_LEN];
    for (k, a) in target.iter_mut().enumerate() {
        let decay = 1.0 - 0.05 * k as f64;
        *a = [0.8 * front * decay, (0.9 * g[1] + 0.5 * side).clamp(-1.0, 1.0) * decay];
    }
    TrainingSample {
        obs_history,
        goal_history,
        target_chunk: target,
        mirror_flag: false,
    }
}

fn random_policy(seed: u64, arch: &PolicyArch) -> MlpPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = MlpPolicy::init(arch, &mut rng);
    for l in &mut p.layers {
        l.b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    }
    p
}

#[test]
fn forward_matches_naive_oracle() {
    let arch = PolicyArch {
        history: 6,
        hidden: vec![64, 32, 16],
    };
    let p = random_policy(4, &arch);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x: Vec<f64> = (0..arch.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = p.forward(&x).unwrap();
        let slow = naive_forward(&p, &x);
        for k in 0..CHUNK_LEN {
            for j in 0..2 {
                let (a, b) = (fast[k][j], slow[2 * k + j]);
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn gradient_of_scaled_loss_is_scale_times_plain() {
    let arch = PolicyArch {
        history: 1,
        hidden: vec![10],
    };
    let p = random_policy(8, &arch);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = synthetic(&mut rng, 1);
    let batch = Batch::from_samples(&[&s], 1).unwrap();
    let (_, plain) = p.backward(&batch, 1.0, 1.0).unwrap();
    let scale = navscale::policy::loss_scale(batch.targets.row(0).as_slice().unwrap(), 1.0, 10.0);
    let (_, scaled) = p.backward(&batch, 1.0, 10.0).unwrap();
    for (a, b) in plain.layers.iter().zip(&scaled.layers) {
        for (x, y) in a.w.iter().zip(b.w.iter()) {
            assert!((x * scale - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
}

#[test]
fn memorizes_single_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = StaticSamples {
        history: 1,
        samples: vec![synthetic(&mut rng, 1)],
    };
    let arch = PolicyArch {
        history: 1,
        hidden: vec![32, 32],
    };
    let cfg = TrainConfig {
        batch_size: 1,
        lr: 3e-3,
        epochs: 600,
        mirror_prob: 0.0,
        weight_decay: 0.0,
        ..Default::default()
    };
    let out = train(&data, &arch, &cfg).unwrap();
    let loss = evaluate_loss(&out.policy, &data.samples, 1.0, 10.0).unwrap();
    assert!(loss < 1e-4, "loss {loss}");
}

#[test]
fn training_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let data = StaticSamples {
        history: 1,
        samples: (0..300).map(|_| synthetic(&mut rng, 1)).collect(),
    };
    let arch = PolicyArch {
        history: 1,
        hidden: vec![16, 16],
    };
    let cfg = TrainConfig {
        batch_size: 64,
        lr: 1e-3,
        epochs: 3,
        seed: 17,
        ..Default::default()
    };
    let a = train(&data, &arch, &cfg).unwrap();
    let b = train(&data, &arch, &cfg).unwrap();
    assert_eq!(a.policy, b.policy);
    assert_eq!(a.curve, b.curve);
}

#[test]
fn held_out_loss_decreases() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let all: Vec<TrainingSample> = (0..5000).map(|_| synthetic(&mut rng, 1)).collect();
    let (train_set, held_out) = all.split_at(4000);
    let arch = PolicyArch {
        history: 1,
        hidden: vec![64, 32],
    };
    let cfg = TrainConfig {
        batch_size: 64,
        lr: 1e-3,
        epochs: 4,
        seed: 1,
        ..Default::default()
    };
    let init = MlpPolicy::init(&arch, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let before = evaluate_loss(&init, held_out, 1.0, 10.0).unwrap();
    let data = StaticSamples {
        history: 1,
        samples: train_set.to_vec(),
    };
    let out = train(&data, &arch, &cfg).unwrap();
    let after = evaluate_loss(&out.policy, held_out, 1.0, 10.0).unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");
    let first = out.curve[0].loss;
    let last = out.curve.last().unwrap().loss;
    assert!(last < first);

    // Mirror consistency on symmetric data, as an empirical check: the
    // mean equivariance gap stays within the model's own fit error.
    let (mut gap, mut err, mut n) = (0.0, 0.0, 0.0);
    for s in held_out.iter().take(500) {
        let x = encode_inputs(&s.obs_history, &s.goal_history, 1).unwrap();
        let m = mirror_augment(s);
        let xm = encode_inputs(&m.obs_history, &m.goal_history, 1).unwrap();
        let y = out.policy.forward(&x).unwrap();
        let ym = out.policy.forward(&xm).unwrap();
        for k in 0..CHUNK_LEN {
            gap += (ym[k][1] + y[k][1]).powi(2) + (ym[k][0] - y[k][0]).powi(2);
            err += (y[k][0] - s.target_chunk[k][0]).powi(2) + (y[k][1] - s.target_chunk[k][1]).powi(2);
            n += 1.0;
        }
    }
    let (gap, err) = ((gap / n).sqrt(), (err / n).sqrt());
    println!("mirror gap {gap:.4}, fit error {err:.4}");
    assert!(gap < 2.0 * err, "mirror gap {gap} vs fit error {err}");
}

#[test]
fn loss_agrees_with_batch_mean() {
    let arch = PolicyArch {
        history: 1,
        hidden: vec![12, 7],
    };
    let p = random_policy(21, &arch);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let samples: Vec<TrainingSample> = (0..70).map(|_| synthetic(&mut rng, 1)).collect();
    let refs: Vec<&TrainingSample> = samples.iter().collect();
    let batch = Batch::from_samples(&refs, 1).unwrap();
    let (loss, _) = p.backward(&batch, 1.0, 10.0).unwrap();
    let manual: f64 = samples
        .iter()
        .map(|s| {
            let x = encode_inputs(&s.obs_history, &s.goal_history, 1).unwrap();
            loss_scaled(&p.forward(&x).unwrap(), &s.target_chunk, 1.0, 10.0)
        })
        .sum::<f64>()
        / samples.len() as f64;
    assert!((loss - manual).abs() < 1e-12);
    let empty = Batch {
        inputs: Array2::zeros((0, 66)),
        targets: Array2::zeros((0, OUTPUT_DIM)),
    };
    assert!(p.backward(&empty, 1.0, 10.0).is_err());
}
