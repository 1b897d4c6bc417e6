use super::*;
use crate::grid::MetricKind;
use crate::model::optim::InnerOptimizerConfig;
use nalgebra::{DMatrix, DVector};

fn tasks() -> Vec<TaskId> {
    vec![
        TaskId::shallow("POS", 3),
        TaskId::deep("NLI", 3, MetricKind::Accuracy),
        TaskId::deep_scalar("REG", 0.25),
        TaskId::shallow("NER", 2),
    ]
}

fn small_net() -> Network {
    let mut spec = ModelSpec::for_tasks(3, [6, 6], 4, &tasks());
    spec.activation = Activation::Tanh;
    Network::new(spec).unwrap()
}

fn random_batch(task: &TaskId, n: usize, len: usize, d: usize, rng: &mut StreamRng) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let tokens: Vec<f64> = (0..len * d).map(|_| rng.sample(StandardNormal)).collect();
            let target = match (task.kind, task.output) {
                (TaskKind::Shallow, Output::Classes(c)) => {
                    Target::Tokens((0..len).map(|_| rng.random_range(0..c)).collect())
                }
                (TaskKind::Deep, Output::Classes(c)) => Target::Class(rng.random_range(0..c)),
                (TaskKind::Deep, Output::Scalar { .. }) => Target::Scalar(rng.sample(StandardNormal)),
                _ => unreachable!(),
            };
            Example { tokens, len, target }
        })
        .collect()
}

/// Straightforward matrix re-implementation of the forward pass, reading the
/// flat vector in its documented order.
fn oracle_loss(net: &Network, params: &[f64], task: usize, batch: &[&Example]) -> f64 {
    let spec = net.spec();
    let [w1, w2] = spec.widths;
    let d = spec.d_in;
    let mut cursor = 0;
    let mut take = |rows: usize, cols: usize| {
        let w = DMatrix::from_row_slice(rows, cols, &params[cursor..cursor + rows * cols]);
        cursor += rows * cols;
        let b = DVector::from_column_slice(&params[cursor..cursor + rows]);
        cursor += rows;
        (w, b)
    };
    let (m1, b1) = take(w1, d);
    let (m2, b2) = take(w2, w1);
    let mut heads = Vec::new();
    for h in &spec.heads {
        let out = match h.output {
            Output::Classes(n) => n,
            Output::Scalar { .. } => 1,
        };
        match h.kind {
            TaskKind::Shallow => heads.push(vec![take(out, w2)]),
            TaskKind::Deep => heads.push(vec![take(spec.head_hidden, w2), take(out, spec.head_hidden)]),
        }
    }
    let xent = |logits: &DVector<f64>, label: usize| {
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        z.ln() - logits[label]
    };
    let encode = |ex: &Example| -> Vec<DVector<f64>> {
        (0..ex.len)
            .map(|t| {
                let x = DVector::from_column_slice(&ex.tokens[t * d..(t + 1) * d]);
                let h1 = (&m1 * x + &b1).map(f64::tanh);
                (&m2 * h1 + &b2).map(f64::tanh)
            })
            .collect()
    };
    let head = &heads[task];
    match spec.heads[task].kind {
        TaskKind::Shallow => {
            let mut sum = 0.0;
            let mut count = 0.0;
            for ex in batch {
                let Target::Tokens(labels) = &ex.target else { unreachable!() };
                for (h, &y) in encode(ex).iter().zip(labels) {
                    sum += xent(&(&head[0].0 * h + &head[0].1), y);
                    count += 1.0;
                }
            }
            sum / count
        }
        TaskKind::Deep => {
            let mut sum = 0.0;
            for ex in batch {
                let hs = encode(ex);
                let pooled = hs.iter().fold(DVector::zeros(w2), |a, h| a + h) / hs.len() as f64;
                let g = (&head[0].0 * pooled + &head[0].1).map(f64::tanh);
                let o = &head[1].0 * g + &head[1].1;
                sum += match ex.target {
                    Target::Class(c) => xent(&o, c),
                    Target::Scalar(y) => (o[0] - y).powi(2),
                    _ => unreachable!(),
                };
            }
            sum / batch.len() as f64
        }
    }
}

#[test]
fn init_is_deterministic_and_partitioned() {
    let net = small_net();
    assert_eq!(net.init_params(4), net.init_params(4));
    assert_ne!(net.init_params(4), net.init_params(5));
    let segs = net.segments();
    let mut covered = 0;
    for s in segs.iter() {
        assert_eq!(s.offset, covered);
        covered += s.len;
    }
    assert_eq!(covered, net.num_params());
    assert_eq!(segs.len(), 1 + tasks().len());
}

#[test]
fn init_loss_is_reasonable() {
    let net = small_net();
    let params = net.init_params(1);
    let mut rng = stream(0, "batch", &[]);
    for (i, t) in tasks().iter().enumerate() {
        let batch = random_batch(t, 32, 5, 3, &mut rng);
        let refs: Vec<&Example> = batch.iter().collect();
        let loss = net.forward_loss(&params.values, i, &refs).unwrap();
        let constant = match t.output {
            Output::Classes(c) => (c as f64).ln(),
            Output::Scalar { .. } => {
                let ys: Vec<f64> = batch
                    .iter()
                    .map(|e| match e.target {
                        Target::Scalar(y) => y,
                        _ => unreachable!(),
                    })
                    .collect();
                let mean = ys.iter().sum::<f64>() / ys.len() as f64;
                ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64
            }
        };
        assert!(loss.is_finite() && loss < 10.0 * constant, "{} {loss} {constant}", t.name);
    }
}

#[test]
fn uniform_logits_give_log_classes() {
    let net = small_net();
    let params = net.zeros();
    let mut rng = stream(0, "batch", &[]);
    let batch = random_batch(&tasks()[0], 4, 5, 3, &mut rng);
    let refs: Vec<&Example> = batch.iter().collect();
    let loss = net.forward_loss(&params.values, 0, &refs).unwrap();
    assert!((loss - 3f64.ln()).abs() < 1e-15);
    assert!((loss - 1.0986).abs() < 1e-4);
}

fn zero_error_regression() -> (Network, Vec<f64>, Vec<Example>) {
    let net = small_net();
    let mut params = net.zeros();
    let seg = params.segments.iter().find(|s| s.name == "head:REG").unwrap().clone();
    // last entry of the REG head is its output bias
    params.values[seg.offset + seg.len - 1] = 0.7;
    let mut rng = stream(0, "batch", &[]);
    let mut batch = random_batch(&tasks()[2], 6, 5, 3, &mut rng);
    for e in &mut batch {
        e.target = Target::Scalar(0.7);
    }
    (net, params.values, batch)
}

#[test]
fn zero_error_regression_has_zero_loss_and_gradient() {
    let (net, params, batch) = zero_error_regression();
    let refs: Vec<&Example> = batch.iter().collect();
    assert_eq!(net.forward_loss(&params, 2, &refs).unwrap(), 0.0);
    let (loss, grad) = net.gradient(&params, 2, &refs, None).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grad.norm() < 1e-8);
}

#[test]
fn forward_matches_matrix_oracle() {
    let net = small_net();
    let mut rng = stream(9, "batch", &[]);
    for seed in 0..5 {
        let params = net.init_params(seed);
        for (i, t) in tasks().iter().enumerate() {
            let batch = random_batch(t, 3, 4, 3, &mut rng);
            let refs: Vec<&Example> = batch.iter().collect();
            let ours = net.forward_loss(&params.values, i, &refs).unwrap();
            let theirs = oracle_loss(&net, &params.values, i, &refs);
            assert!((ours - theirs).abs() < 1e-10, "{ours} vs {theirs}");
        }
    }
}

fn max_relative_fd_error(net: &Network, params: &[f64], task: usize, batch: &[&Example]) -> f64 {
    let (_, grad) = net.gradient(params, task, batch, None).unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut p = params.to_vec();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let up = net.forward_loss(&p, task, batch).unwrap();
        p[i] = orig - eps;
        let down = net.forward_loss(&p, task, batch).unwrap();
        p[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let scale = grad.values[i].abs().max(fd.abs()).max(1e-6);
        worst = worst.max((grad.values[i] - fd).abs() / scale);
    }
    worst
}

#[test]
fn gradient_matches_finite_differences() {
    let net = small_net();
    assert!((150..=250).contains(&net.num_params()), "{}", net.num_params());
    let mut rng = stream(21, "fd", &[]);
    for draw in 0..20 {
        let params = net.init_params(100 + draw);
        for (i, t) in tasks().iter().enumerate() {
            let batch = random_batch(t, 3, 4, 3, &mut rng);
            let refs: Vec<&Example> = batch.iter().collect();
            let err = max_relative_fd_error(&net, &params.values, i, &refs);
            assert!(err < 1e-4, "draw {draw} task {} err {err}", t.name);
        }
    }
}

#[test]
fn relu_gradient_matches_finite_differences_away_from_kinks() {
    let mut spec = ModelSpec::for_tasks(3, [6, 6], 4, &tasks());
    spec.activation = Activation::Relu;
    let net = Network::new(spec).unwrap();
    let mut rng = stream(22, "fd", &[]);
    let params = net.init_params(3);
    let batch = random_batch(&tasks()[1], 2, 3, 3, &mut rng);
    let refs: Vec<&Example> = batch.iter().collect();
    assert!(max_relative_fd_error(&net, &params.values, 1, &refs) < 1e-4);
}

#[test]
fn other_heads_get_zero_gradient() {
    let net = small_net();
    let params = net.init_params(2);
    let mut rng = stream(1, "iso", &[]);
    for (i, t) in tasks().iter().enumerate() {
        let batch = random_batch(t, 4, 5, 3, &mut rng);
        let refs: Vec<&Example> = batch.iter().collect();
        let (_, grad) = net.gradient(&params.values, i, &refs, None).unwrap();
        for (j, other) in tasks().iter().enumerate() {
            let seg = net
                .segments()
                .iter()
                .find(|s| s.name == format!("head:{}", other.name))
                .unwrap();
            let sub = &grad.values[seg.offset..seg.offset + seg.len];
            if i == j {
                assert!(sub.iter().any(|&g| g != 0.0));
            } else {
                assert!(sub.iter().all(|&g| g == 0.0));
            }
        }
    }
}

#[test]
fn overfits_a_fixed_batch() {
    let net = small_net();
    let mut rng = stream(5, "fit", &[]);
    for (i, t) in tasks().iter().enumerate() {
        let batch = random_batch(t, 8, 5, 3, &mut rng);
        let refs: Vec<&Example> = batch.iter().collect();
        let mut params = net.init_params(7);
        let cfg = InnerOptimizerConfig {
            lr: 0.02,
            dropout: 0.0,
            ..Default::default()
        };
        let mut opt = InnerOptimizerState::new(cfg, net.num_params());
        let start = net.forward_loss(&params.values, i, &refs).unwrap();
        for _ in 0..50 {
            let (_, g) = net.gradient(&params.values, i, &refs, None).unwrap();
            opt.inner_step(&mut params.values, &g.values).unwrap();
        }
        let end = net.forward_loss(&params.values, i, &refs).unwrap();
        assert!(end < 0.8 * start, "{}: {start} -> {end}", t.name);
    }
}

#[test]
fn dropout_is_seeded_and_changes_loss() {
    let net = small_net();
    let params = net.init_params(2);
    let mut rng = stream(1, "drop", &[]);
    let batch = random_batch(&tasks()[0], 4, 5, 3, &mut rng);
    let refs: Vec<&Example> = batch.iter().collect();
    let run = |seed| {
        let mut r = stream(seed, "dropout", &[]);
        net.gradient(&params.values, 0, &refs, Some(Dropout { p: 0.5, rng: &mut r }))
            .unwrap()
    };
    assert_eq!(run(1), run(1));
    let plain = net.forward_loss(&params.values, 0, &refs).unwrap();
    assert_ne!(run(1).0, plain);
}

#[test]
fn mismatched_batches_are_rejected() {
    let net = small_net();
    let params = net.init_params(0);
    let mut rng = stream(1, "bad", &[]);
    let shallow = random_batch(&tasks()[0], 2, 5, 3, &mut rng);
    let refs: Vec<&Example> = shallow.iter().collect();
    assert!(net.forward_loss(&params.values, 1, &refs).is_err());
    let wide = random_batch(&tasks()[0], 2, 5, 4, &mut rng);
    let refs: Vec<&Example> = wide.iter().collect();
    assert!(net.forward_loss(&params.values, 0, &refs).is_err());
    assert!(net.forward_loss(&params.values[1..], 0, &refs).is_err());
    assert!(net.forward_loss(&params.values, 0, &[]).is_err());
}

#[test]
fn predictions_follow_head_kind() {
    let net = small_net();
    let params = net.init_params(0);
    let mut rng = stream(1, "pred", &[]);
    let ex = &random_batch(&tasks()[0], 1, 5, 3, &mut rng)[0];
    assert!(matches!(net.predict(&params.values, 0, ex), Prediction::Tokens(v) if v.len() == 5));
    assert!(matches!(net.predict(&params.values, 1, ex), Prediction::Class(c) if c < 3));
    assert!(matches!(net.predict(&params.values, 2, ex), Prediction::Scalar(_)));
}
