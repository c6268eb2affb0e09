// SPDX-License-Identifier: Apache-2.0

use kinaema_core::checks::tiny_spec;
use kinaema_core::model::{
    clamp_update_gates, param_counts, Core, DecoderKind, Family, MemoryModel, ModelSpec, Network, StateVar,
};
use kinaema_tensor::{Graph, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0))
}

fn dense(s: &StateVar) -> kinaema_tensor::Var {
    match s {
        StateVar::Dense(v) => *v,
        _ => panic!("dense state expected"),
    }
}

#[test]
fn clamped_gates_keep_memory() {
    for family in [Family::Kinaema, Family::Gru] {
        let spec = ModelSpec::for_family(family);
        let (mut ps, net) = Network::build::<f32>(&spec).unwrap();
        clamp_update_gates(&net, &mut ps, -40.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new(&ps);
        let init: StateVar = match family {
            Family::Kinaema => StateVar::Dense(g.input(rand_t(&mut rng, &[2 * spec.n_mem, spec.e_mem]))),
            _ => StateVar::Layers(
                (0..spec.gru_layers)
                    .map(|_| g.input(rand_t(&mut rng, &[2, spec.gru_hidden])))
                    .collect(),
            ),
        };
        let obs = g.input(rand_t(&mut rng, &[2, spec.obs_dim()]));
        let next = net.memory.update(&mut g, &init, obs).unwrap();
        let pairs: Vec<_> = match (&init, &next) {
            (StateVar::Dense(a), StateVar::Dense(b)) => vec![(*a, *b)],
            (StateVar::Layers(a), StateVar::Layers(b)) => a.iter().copied().zip(b.iter().copied()).collect(),
            _ => unreachable!(),
        };
        for (a, b) in pairs {
            let d = g.value(a).max_abs_diff(g.value(b));
            assert!(d <= 1e-6, "{family}: {d}");
        }
    }
}

#[test]
fn ema_matches_closed_form() {
    let spec = ModelSpec::for_family(Family::Ema);
    let (mut ps, net) = Network::build::<f64>(&spec).unwrap();
    let Core::Ema(core) = &net.memory.core else {
        unreachable!()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for v in ps.value_mut(core.lambda).data_mut() {
        *v = rng.random_range(-2.0..4.0);
    }
    let lam: Vec<f64> = ps
        .value(core.lambda)
        .data()
        .iter()
        .map(|&v| 1.0 / (1.0 + (-v).exp()))
        .collect();
    let m0: Vec<f64> = (0..spec.ema_size).map(|_| rng.random_range(-1.0..1.0)).collect();
    let inputs: Vec<Vec<f64>> = (0..50)
        .map(|_| (0..spec.obs_dim()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let w = ps.value(core.proj.w).clone();
    let b = ps.value(core.proj.b.unwrap()).clone();
    let project = |x: &[f64]| -> Vec<f64> {
        (0..spec.ema_size)
            .map(|j| {
                b.data()[j]
                    + x.iter()
                        .enumerate()
                        .map(|(i, &xi)| xi * w.data()[i * spec.ema_size + j])
                        .sum::<f64>()
            })
            .collect()
    };
    let mut g = Graph::new(&ps);
    let mut s = StateVar::Dense(g.input(Tensor::new(vec![1, spec.ema_size], m0.clone()).unwrap()));
    for x in &inputs {
        let obs = g.input(Tensor::new(vec![1, x.len()], x.clone()).unwrap());
        s = net.memory.update(&mut g, &s, obs).unwrap();
    }
    let got = g.value(dense(&s)).data().to_vec();
    let t = inputs.len() as i32;
    for j in 0..spec.ema_size {
        let mut want = lam[j].powi(t) * m0[j];
        for (k, x) in inputs.iter().enumerate() {
            want += lam[j].powi(t - 1 - k as i32) * project(x)[j];
        }
        assert!((got[j] - want).abs() < 1e-5, "entry {j}: {} vs {want}", got[j]);
    }
}

#[test]
fn ema_decay_limits() {
    let spec = ModelSpec::for_family(Family::Ema);
    let (mut ps, net) = Network::build::<f64>(&spec).unwrap();
    let Core::Ema(core) = net.memory.core.clone() else {
        unreachable!()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = rand_t(&mut rng, &[1, spec.ema_size]).cast::<f64>();
    ps.value_mut(core.lambda).data_mut().fill(40.0);
    ps.value_mut(core.proj.w).data_mut().fill(0.0);
    ps.value_mut(core.proj.b.unwrap()).data_mut().fill(0.0);
    {
        let mut g = Graph::new(&ps);
        let s = StateVar::Dense(g.input(m.clone()));
        let obs = g.input(Tensor::zeros(vec![1, spec.obs_dim()]));
        let s = net.memory.update(&mut g, &s, obs).unwrap();
        assert!(g.value(dense(&s)).max_abs_diff(&m) < 1e-12);
    }
    ps.value_mut(core.lambda).data_mut().fill(-40.0);
    ps.value_mut(core.proj.b.unwrap()).data_mut().fill(0.5);
    let mut g = Graph::new(&ps);
    let s = StateVar::Dense(g.input(m));
    let obs = g.input(Tensor::zeros(vec![1, spec.obs_dim()]));
    let s = net.memory.update(&mut g, &s, obs).unwrap();
    assert!(g.value(dense(&s)).data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    Tensor::new(
        t.shape().to_vec(),
        perm.iter().flat_map(|&i| t.row(i).to_vec()).collect(),
    )
    .unwrap()
}

#[test]
fn kinaema_update_is_jointly_permutation_equivariant() {
    let spec = ModelSpec::default();
    let (ps, net) = Network::build::<f64>(&spec).unwrap();
    let Core::Kinaema(core) = &net.memory.core else {
        unreachable!()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = rand_t(&mut rng, &[spec.n_mem, spec.e_mem]).cast::<f64>();
    let obs = rand_t(&mut rng, &[1, spec.obs_dim()]).cast::<f64>();
    let perm = [3, 0, 7, 1, 6, 2, 5, 4];
    let run = |ps: &ParamSet<f64>, m: &Tensor<f64>| {
        let mut g = Graph::new(ps);
        let mv = g.input(m.clone());
        let o = g.input(obs.clone());
        let out = core.update(&mut g, mv, o, 1).unwrap();
        g.value(out).clone()
    };
    let base = run(&ps, &m);
    let mut ps2 = ps.clone();
    let e = permute_rows(ps.value(core.pos_emb), &perm);
    *ps2.value_mut(core.pos_emb) = e;
    let permuted = run(&ps2, &permute_rows(&m, &perm));
    assert!(permute_rows(&base, &perm).max_abs_diff(&permuted) < 1e-5);
    // Without permuting e_n the slots are distinguishable.
    let unaligned = run(&ps, &permute_rows(&m, &perm));
    assert!(permute_rows(&base, &perm).max_abs_diff(&unaligned) > 1e-3);
}

#[test]
fn decoders_ignore_token_order() {
    for kind in [DecoderKind::Kinaema, DecoderKind::Chained] {
        let spec = ModelSpec {
            decoder: Some(kind),
            ..ModelSpec::default()
        };
        let (ps, net) = Network::build::<f64>(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = rand_t(&mut rng, &[2 * spec.n_read, spec.e_read]).cast::<f64>();
        let q = rand_t(&mut rng, &[6, spec.retina_len]).cast::<f64>();
        let perm: Vec<usize> = {
            let mut a: Vec<usize> = (0..spec.n_read).rev().collect();
            a.rotate_left(5);
            a.iter().copied().chain(a.iter().map(|&i| i + spec.n_read)).collect()
        };
        let run = |y: &Tensor<f64>| {
            let mut g = Graph::new(&ps);
            let yv = g.input(y.clone());
            let qv = g.input(q.clone());
            let tok = net.query.forward(&mut g, qv).unwrap();
            let out = net.rpe.forward(&mut g, yv, tok, 2, 6, spec.query_chunks).unwrap();
            g.value(out.pred).clone()
        };
        let d = run(&y).max_abs_diff(&run(&permute_rows(&y, &perm)));
        assert!(d < 1e-5, "{kind:?}: {d}");
    }
}

#[test]
fn single_token_readout_is_broadcast() {
    let spec = ModelSpec {
        n_read: 1,
        e_read: 16,
        family: Family::Gru,
        decoder: Some(DecoderKind::Kinaema),
        ..ModelSpec::default()
    };
    let (ps, net) = Network::build::<f64>(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let y = rand_t(&mut rng, &[1, 16]).cast::<f64>();
    let q1 = rand_t(&mut rng, &[1, spec.retina_len]).cast::<f64>();
    let q2 = rand_t(&mut rng, &[1, spec.retina_len]).cast::<f64>();
    let ca_out = |q: &Tensor<f64>| {
        let mut g = Graph::new(&ps);
        let yv = g.input(y.clone());
        let qv = g.input(q.clone());
        let tok = net.query.forward(&mut g, qv).unwrap();
        let kinaema_core::model::decoders::RpeBody::Kinaema { ca, .. } = &net.rpe.body else {
            unreachable!()
        };
        let a = ca.forward(&mut g, tok, Some(yv), 1).unwrap();
        g.value(a.out).clone()
    };
    let (a, b) = (ca_out(&q1), ca_out(&q2));
    // Every query token receives the same projected memory token.
    for r in 0..a.rows() {
        assert!(a.row(r).iter().zip(b.row(0)).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}

#[test]
fn chained_first_cross_attention_has_no_residual() {
    let spec = ModelSpec::for_family(Family::Gru);
    let (mut ps, net) = Network::build::<f64>(&spec).unwrap();
    let kinaema_core::model::decoders::RpeBody::Chained { chains } = net.rpe.body.clone() else {
        unreachable!()
    };
    assert!(!chains[0].ca.residual && chains[1..].iter().all(|c| c.ca.residual));
    for c in &chains {
        ps.value_mut(c.ca.attn.wv.w).data_mut().fill(0.0);
        ps.value_mut(c.ca.attn.wv.b.unwrap()).data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let run = |y: &Tensor<f64>, q: &Tensor<f64>| {
        let mut g = Graph::new(&ps);
        let yv = g.input(y.clone());
        let qv = g.input(q.clone());
        let tok = net.query.forward(&mut g, qv).unwrap();
        let out = net.rpe.forward(&mut g, yv, tok, 1, 2, spec.query_chunks).unwrap();
        g.value(out.pred).clone()
    };
    let (y1, y2) = (rand_t(&mut rng, &[32, 16]).cast(), rand_t(&mut rng, &[32, 16]).cast());
    let (q1, q2) = (rand_t(&mut rng, &[2, 128]).cast(), rand_t(&mut rng, &[2, 128]).cast());
    let base = run(&y1, &q1);
    // Memory no longer reaches the output.
    assert!(base.max_abs_diff(&run(&y2, &q1)) < 1e-12);
    // Neither do the queries: the first CA replaced them.
    assert!(base.max_abs_diff(&run(&y1, &q2)) < 1e-12);
}

#[test]
fn decoder_parameter_counts_are_comparable() {
    let count = |kind| {
        let (ps, _) = Network::build::<f32>(&ModelSpec {
            decoder: Some(kind),
            ..ModelSpec::default()
        })
        .unwrap();
        param_counts(&ps).rpe_decoder as f64
    };
    let (k, c) = (count(DecoderKind::Kinaema), count(DecoderKind::Chained));
    assert!((c - k).abs() / k <= 0.10, "kinaema {k} chained {c}");
}

#[test]
fn gru_readout_tokens_are_distinct() {
    let spec = ModelSpec::for_family(Family::Gru);
    let (ps, net) = Network::build::<f32>(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new(&ps);
    let s = StateVar::Layers(
        (0..spec.gru_layers)
            .map(|_| g.input(rand_t(&mut rng, &[1, spec.gru_hidden])))
            .collect(),
    );
    let y = net.memory.read(&mut g, &s).unwrap();
    let y = g.value(y);
    for i in 0..spec.n_read {
        for j in i + 1..spec.n_read {
            assert_ne!(y.row(i), y.row(j), "tokens {i} and {j}");
        }
    }
}

#[test]
fn trunc_hist_padding_and_window() {
    let spec = ModelSpec {
        t_trunc: 100,
        ..ModelSpec::for_family(Family::TruncHist)
    };
    let model = Network::build::<f32>(&spec).unwrap();
    let (ps, net) = (&model.0, &model.1);
    let mut g = Graph::new(ps);
    let mut s = net.memory.init(&mut g, 1).unwrap();
    let d = spec.obs_dim();
    let item = |t: usize| Tensor::full(vec![1, d], t as f32);
    for t in 1..=3 {
        let v = g.input(item(t));
        s = net.memory.update(&mut g, &s, v).unwrap();
    }
    let yv = net.memory.read(&mut g, &s).unwrap();
    let y = g.value(yv).clone();
    assert_eq!(y.shape(), &[100, d]);
    for r in 0..=96 {
        assert!(y.row(r).iter().all(|&v| v == 1.0), "row {r}");
    }
    assert!(y.row(97).iter().all(|&v| v == 1.0));
    assert!(y.row(98).iter().all(|&v| v == 2.0));
    assert!(y.row(99).iter().all(|&v| v == 3.0));
    for t in 4..=243 {
        let v = g.input(item(t));
        s = net.memory.update(&mut g, &s, v).unwrap();
    }
    let yv = net.memory.read(&mut g, &s).unwrap();
    let y = g.value(yv).clone();
    for r in 0..100 {
        assert!(y.row(r).iter().all(|&v| v == (144 + r) as f32));
    }
}

#[test]
fn trunc_hist_of_one_is_last_observation() {
    let spec = ModelSpec {
        t_trunc: 1,
        ..ModelSpec::for_family(Family::TruncHist)
    };
    let (ps, net) = Network::build::<f32>(&spec).unwrap();
    let mut g = Graph::new(&ps);
    let mut s = net.memory.init(&mut g, 1).unwrap();
    for t in 0..5 {
        let v = g.input(Tensor::full(vec![1, spec.obs_dim()], t as f32));
        s = net.memory.update(&mut g, &s, v).unwrap();
    }
    let y = net.memory.read(&mut g, &s).unwrap();
    assert_eq!(g.value(y).data(), &vec![4.0; spec.obs_dim()][..]);
}

#[test]
fn doubling_slots_only_grows_slot_parameters() {
    let base = ModelSpec::default();
    let doubled = ModelSpec {
        n_mem: 2 * base.n_mem,
        n_read: 2 * base.n_read,
        ..base.clone()
    };
    let (a, _) = Network::build::<f32>(&base).unwrap();
    let (b, _) = Network::build::<f32>(&doubled).unwrap();
    let (ca, cb) = (param_counts(&a), param_counts(&b));
    let ne = base.n_mem * base.e_mem;
    assert_eq!(cb.pos_emb - ca.pos_emb, ne);
    assert_eq!(cb.m0 - ca.m0, ne);
    assert_eq!(cb.transformer, ca.transformer);
    assert_eq!(cb.gating, ca.gating);
    assert_eq!(cb.correction, ca.correction);
    assert_eq!(cb.encoders, ca.encoders);
    assert_eq!(cb.rpe_decoder, ca.rpe_decoder);
    assert_eq!(cb.total - ca.total, 2 * ne);
    let zero_m0 = |s: &ModelSpec| {
        let (p, _) = Network::build::<f32>(&ModelSpec {
            learned_m0: false,
            ..s.clone()
        })
        .unwrap();
        p.num_elements()
    };
    assert_eq!(zero_m0(&doubled) - zero_m0(&base), ne);
}

#[test]
fn readout_reshape_is_lossless() {
    let spec = ModelSpec::full_scale();
    let t = Tensor::from_fn(vec![spec.n_mem, spec.e_mem], |i| i as f32);
    let y = t.clone().reshape(vec![spec.n_read, spec.e_read]).unwrap();
    assert_eq!(y.shape(), &[160, 384]);
    assert_eq!(y.reshape(vec![20, 3072]).unwrap(), t);
    let identity = ModelSpec {
        n_read: 8,
        e_read: 64,
        dec_heads: 4,
        ..ModelSpec::default()
    };
    let (ps, net) = Network::build::<f32>(&identity).unwrap();
    let mut g = Graph::new(&ps);
    let m = g.input(Tensor::from_fn(vec![8, 64], |i| i as f32 * 0.5));
    let y = net.memory.read(&mut g, &StateVar::Dense(m)).unwrap();
    assert_eq!(g.value(y), g.value(m));
}

#[test]
fn same_seed_same_initial_memory() {
    let spec = ModelSpec::default();
    let (a, na) = Network::build::<f32>(&spec).unwrap();
    let (b, _) = Network::build::<f32>(&spec).unwrap();
    let Core::Kinaema(k) = &na.memory.core else {
        unreachable!()
    };
    assert_eq!(a.value(k.m0.unwrap()), b.value(k.m0.unwrap()));
    let gru = ModelSpec::for_family(Family::Gru);
    let (ps, net) = Network::build::<f32>(&gru).unwrap();
    let s = net.init_state(&ps).unwrap();
    assert_eq!(s.numel(), 512);
    assert!(s.dense().is_none());
}

#[test]
fn zero_encoder_maps_zero_retina_to_zero() {
    let spec = ModelSpec::default();
    let mut ps = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = MemoryModel::new(&mut kinaema_tensor::ParamBuilder::new(&mut ps, &mut rng), &spec).unwrap();
    for id in ps.ids().collect::<Vec<_>>() {
        ps.value_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new(&ps);
    let r = g.input(Tensor::zeros(vec![1, spec.retina_len]));
    let x = m.enc.vis.forward(&mut g, r).unwrap();
    assert!(g.value(x).data().iter().all(|&v| v == 0.0));
}

#[test]
fn kinaema_footprint_is_slot_payload() {
    let spec = ModelSpec::default();
    let (ps, net) = Network::build::<f32>(&spec).unwrap();
    let mut s = net.init_state(&ps).unwrap();
    let retina = vec![0.1; spec.retina_len];
    for _ in 0..3 {
        s = net.step_inference(&ps, &s, &retina, [0.1, 0.0, 1.0, 0.0]).unwrap();
    }
    assert_eq!(s.step_count, 3);
    assert_eq!(s.dense().unwrap().shape(), &[spec.n_mem, spec.e_mem]);
    assert_eq!(s.footprint_bytes(), spec.n_mem * spec.e_mem * 4 + 8);
}

#[test]
fn ablations_build_and_run() {
    for (t, gt) in [(false, true), (true, false), (false, false)] {
        let spec = ModelSpec {
            use_transformer: t,
            use_gating: gt,
            ..tiny_spec(Family::Kinaema)
        };
        let (ps, net) = Network::build::<f32>(&spec).unwrap();
        assert_eq!(param_counts(&ps).transformer == 0, !t);
        assert_eq!(param_counts(&ps).gating == 0, !gt);
        let mut s = net.init_state(&ps).unwrap();
        s = net
            .step_inference(&ps, &s, &vec![0.2; spec.retina_len], [0.0, 0.0, 1.0, 0.0])
            .unwrap();
        assert!(net.read_state(&ps, &s).unwrap().all_finite());
    }
}
