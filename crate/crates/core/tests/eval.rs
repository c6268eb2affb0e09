// SPDX-License-Identifier: Apache-2.0

use std::f64::consts::PI;

use kinaema_core::checks::tiny_spec;
use kinaema_core::eval::attention::{assignments_csv, collect_attention};
use kinaema_core::eval::bench::{bench_model, find, BenchOptions};
use kinaema_core::eval::sweep::{from_csv, sweep_lengths, to_csv};
use kinaema_core::eval::{
    eval_rpe, eval_with_floor, nav_metrics, ConstantPredictor, EvalOptions, ModelPredictor, OraclePredictor, Predictor,
};
use kinaema_core::model::{Batch, Family, ModelSpec, Network};
use kinaema_core::train::assemble;
use kinaema_core::world::{generate_dataset, DataConfig, EpisodeRecord, Profile, WorldConfig};
use kinaema_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn episodes(n: usize, length: usize) -> Vec<EpisodeRecord> {
    let cfg = DataConfig {
        seed: 21,
        scenes: 3,
        episodes: n,
        length,
        profile: Profile::Eval,
    };
    generate_dataset(&WorldConfig::default(), &cfg).unwrap().episodes
}

fn spec(family: Family) -> ModelSpec {
    ModelSpec {
        retina_len: 128,
        ..tiny_spec(family)
    }
}

#[test]
fn oracle_is_perfect() {
    let eps = episodes(5, 12);
    let r = eval_rpe(&OraclePredictor, &eps, &[6, 12], &EvalOptions::default()).unwrap();
    for i in 0..3 {
        assert_eq!(r.accuracy(i), 1.0);
    }
    assert_eq!(r.count, 5 * 2 * (6 + 12));
    assert!(r.thresholds_nested());
}

fn wrap(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Counts hits of the mean-pose predictor straight from the recorded poses.
fn brute_force_floor(eps: &[EpisodeRecord], t: usize) -> (usize, [usize; 3]) {
    // Goal in the agent frame and relative heading, per query.
    let mut rel = Vec::new();
    for ep in eps {
        let [ax, ay, ah] = ep.poses[t - 1].map(f64::from);
        let goals = ep.poses[..t].iter().chain(&ep.alt_poses[..t]);
        for g in goals {
            let [gx, gy, gh] = g.map(f64::from);
            let (dx, dy) = (gx - ax, gy - ay);
            let lx = dx * ah.cos() + dy * ah.sin();
            let ly = -dx * ah.sin() + dy * ah.cos();
            rel.push((lx, ly, wrap(gh - ah)));
        }
    }
    let n = rel.len() as f64;
    let mut mean = [0.0; 5];
    for &(lx, ly, r) in &rel {
        let d = lx.hypot(ly);
        let b = if d == 0.0 { 0.0 } else { ly.atan2(lx) };
        for (m, v) in mean.iter_mut().zip([d, b.cos(), b.sin(), r.cos(), r.sin()]) {
            *m += v / n;
        }
    }
    let bn = mean[1].hypot(mean[2]);
    let (px, py) = (mean[0] * mean[1] / bn, mean[0] * mean[2] / bn);
    let prot = mean[4].atan2(mean[3]);
    let mut hits = [0; 3];
    for &(lx, ly, r) in &rel {
        let te = (px - lx).hypot(py - ly);
        let re = wrap(prot - r).abs().to_degrees();
        for (h, (tt, rt)) in hits.iter_mut().zip([(1.0, 10.0), (1.0, 90.0), (2.0, 90.0)]) {
            if te < tt && re < rt {
                *h += 1;
            }
        }
    }
    (rel.len(), hits)
}

#[test]
fn constant_floor_matches_brute_force() {
    let eps = episodes(12, 20);
    let t = 20;
    let c = ConstantPredictor::dataset_mean(&eps, &[t]).unwrap();
    let r = eval_rpe(&c, &eps, &[t], &EvalOptions::default()).unwrap();
    let (count, hits) = brute_force_floor(&eps, t);
    assert_eq!(r.count, count);
    for i in 0..3 {
        let got = r.thresholds[i].hits as i64;
        // f32 storage of targets may flip a query sitting on a threshold.
        assert!((got - hits[i] as i64).abs() <= 1, "threshold {i}: {got} vs {}", hits[i]);
    }
    assert!(r.thresholds_nested());
}

#[test]
fn untrained_models_report_nested_thresholds_and_floor() {
    let eps = episodes(4, 10);
    for family in Family::ALL {
        let s = spec(family);
        let (params, net) = Network::build::<f32>(&s).unwrap();
        let p = ModelPredictor {
            net: &net,
            params: &params,
            label: family.to_string(),
        };
        let r = eval_with_floor(&p, &eps, &[5, 10], &EvalOptions::default()).unwrap();
        assert!(r.thresholds_nested(), "{family}");
        assert!(r.constant_floor.is_some());
        assert_eq!(
            r.below_chance_equivalent,
            Some(r.accuracy(2) <= r.constant_floor.unwrap())
        );
        let again = eval_with_floor(&p, &eps, &[5, 10], &EvalOptions::default()).unwrap();
        assert_eq!(r, again);
    }
}

#[test]
fn evaluation_is_independent_of_chunking() {
    let eps = episodes(6, 8);
    let s = spec(Family::Gru);
    let (params, net) = Network::build::<f32>(&s).unwrap();
    let p = ModelPredictor {
        net: &net,
        params: &params,
        label: "gru".into(),
    };
    let a = eval_rpe(
        &p,
        &eps,
        &[8],
        &EvalOptions {
            batch_episodes: 1,
            ..EvalOptions::default()
        },
    )
    .unwrap();
    let b = eval_rpe(
        &p,
        &eps,
        &[8],
        &EvalOptions {
            batch_episodes: 4,
            ..EvalOptions::default()
        },
    )
    .unwrap();
    // Batching only changes summation order inside matrix products.
    for i in 0..3 {
        assert!((a.accuracy(i) - b.accuracy(i)).abs() <= 2.0 / a.count as f64);
    }
}

#[test]
fn sweep_is_deterministic_and_roundtrips() {
    let eps = episodes(3, 16);
    let s = spec(Family::Ema);
    let (params, net) = Network::build::<f32>(&s).unwrap();
    let p = ModelPredictor {
        net: &net,
        params: &params,
        label: "ema".into(),
    };
    let rows = sweep_lengths(&p, &eps, &[4, 8, 16], &EvalOptions::default()).unwrap();
    assert_eq!(rows.len(), 9);
    let again = sweep_lengths(&p, &eps, &[4, 8, 16], &EvalOptions::default()).unwrap();
    assert_eq!(to_csv(&rows), to_csv(&again));
    let back = from_csv(&to_csv(&rows)).unwrap();
    assert_eq!(to_csv(&back), to_csv(&rows));
    assert_eq!(back.len(), rows.len());
}

/// Exact inside a trailing window, mean pose outside it.
struct WindowOracle {
    window: usize,
    fallback: [f32; 5],
}

impl Predictor for WindowOracle {
    fn name(&self) -> String {
        "window-oracle".into()
    }

    fn predict(&self, batch: &Batch) -> Result<Vec<f32>> {
        Ok((0..batch.num_queries())
            .flat_map(|q| {
                if batch.length - 1 - batch.query_steps[q] < self.window {
                    batch.targets[q * 5..q * 5 + 5].try_into().unwrap()
                } else {
                    self.fallback
                }
            })
            .collect())
    }
}

#[test]
fn window_breakdown_separates_old_queries() {
    let eps = episodes(6, 24);
    let fallback = ConstantPredictor::dataset_mean(&eps, &[24]).unwrap().0;
    let p = WindowOracle { window: 6, fallback };
    let opts = EvalOptions {
        window: Some(6),
        ..EvalOptions::default()
    };
    let r = eval_rpe(&p, &eps, &[4, 24], &opts).unwrap();
    let short = r.length(4).unwrap();
    assert_eq!(short.beyond_window.as_ref().unwrap().thresholds[0].count, 0);
    assert_eq!(short.all.thresholds[2].accuracy, 1.0);
    let long = r.length(24).unwrap();
    let within = long.within_window.as_ref().unwrap();
    let beyond = long.beyond_window.as_ref().unwrap();
    assert_eq!(within.thresholds[0].count, 6 * 2 * 6);
    assert_eq!(beyond.thresholds[0].count, 6 * 2 * 18);
    assert_eq!(within.thresholds[2].accuracy, 1.0);
    assert!(beyond.thresholds[2].accuracy < 1.0);
    assert!(r.thresholds_nested());
}

fn predict_trunc(net: &Network, params: &kinaema_tensor::ParamSet<f32>, batch: &Batch) -> Vec<f32> {
    ModelPredictor {
        net,
        params,
        label: String::new(),
    }
    .predict(batch)
    .unwrap()
}

#[test]
fn truncated_history_sees_exactly_its_window() {
    let s = ModelSpec {
        t_trunc: 5,
        ..spec(Family::TruncHist)
    };
    let (params, net) = Network::build::<f32>(&s).unwrap();
    let eps = episodes(2, 12);
    let perturb_first = |b: &Batch| {
        let mut b = b.clone();
        for v in b.retinas[0].data_mut() {
            *v += 0.5;
        }
        b
    };
    // Within the window the first observation is still visible.
    let within = assemble(&[(&eps[0], 0), (&eps[1], 0)], 5).unwrap();
    assert_ne!(
        predict_trunc(&net, &params, &within),
        predict_trunc(&net, &params, &perturb_first(&within))
    );
    // Beyond it, the oldest observations no longer influence anything.
    let beyond = assemble(&[(&eps[0], 0), (&eps[1], 0)], 12).unwrap();
    assert_eq!(
        predict_trunc(&net, &params, &beyond),
        predict_trunc(&net, &params, &perturb_first(&beyond))
    );
    // A recurrent memory keeps it.
    let (gp, gnet) = Network::build::<f32>(&spec(Family::Gru)).unwrap();
    assert_ne!(
        predict_trunc(&gnet, &gp, &beyond),
        predict_trunc(&gnet, &gp, &perturb_first(&beyond))
    );
}

#[test]
fn attention_rows_and_head_mass() {
    let eps = episodes(1, 8);
    for (family, decoder) in [
        (Family::Kinaema, None),
        (Family::Gru, None),
        (Family::Kinaema, Some(kinaema_core::model::DecoderKind::Chained)),
    ] {
        let s = ModelSpec {
            decoder,
            ..spec(family)
        };
        let (params, net) = Network::build::<f32>(&s).unwrap();
        let dump = collect_attention(&net, &params, &eps[0], 8).unwrap();
        assert_eq!(dump.queries.len(), 16);
        for q in &dump.queries {
            assert_eq!(q.probs.len(), s.dec_heads);
            assert_eq!(q.assignment.len(), s.query_chunks);
            for head in &q.probs {
                for row in head {
                    assert_eq!(row.len(), s.n_read);
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                }
            }
        }
        for head in &dump.head_mass {
            assert!((head.iter().sum::<f64>() - 100.0).abs() < 1e-6);
        }
        let csv = assignments_csv(&dump);
        assert_eq!(csv.lines().count(), 1 + 16 * s.query_chunks);
    }
}

#[test]
fn bench_rows_are_positive_and_footprint_matches() {
    let opts = BenchOptions {
        steps: vec![2, 8],
        warmup: 2,
        samples: 3,
        min_sample: std::time::Duration::from_micros(50),
        queries: 1,
    };
    for family in Family::ALL {
        let s = spec(family);
        let rows = bench_model(&s, &opts).unwrap();
        for step in [2, 8] {
            for op in ["update", "decode"] {
                let r = find(&rows, family.as_str(), op, step).unwrap();
                assert!(r.median_ns > 0.0 && r.p95_ns >= r.median_ns);
            }
        }
        if family == Family::Kinaema {
            let r = find(&rows, "kinaema", "update", 8).unwrap();
            assert_eq!(r.footprint_bytes, s.n_mem * s.e_mem * 4 + 8);
        }
    }
}

#[test]
fn nav_metrics_hand_cases() {
    assert_eq!(nav_metrics(&[(true, 3.0, 3.0), (true, 1.5, 1.5)]).unwrap(), (1.0, 1.0));
    assert_eq!(nav_metrics(&[(true, 4.0, 2.0)]).unwrap(), (1.0, 0.5));
    assert_eq!(nav_metrics(&[(false, 4.0, 2.0)]).unwrap(), (0.0, 0.0));
    assert_eq!(nav_metrics(&[(true, 0.0, 2.0)]).unwrap_err().exit_code(), 2);
    assert!(nav_metrics(&[(true, 1.0, -1.0)]).is_err());
}

#[test]
fn spl_bounded_by_sr_on_random_tuples() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let eps: Vec<(bool, f64, f64)> = (0..1000)
        .map(|_| {
            (
                rng.random_bool(0.6),
                rng.random_range(0.1..30.0),
                rng.random_range(0.1..30.0),
            )
        })
        .collect();
    let (sr, spl) = nav_metrics(&eps).unwrap();
    assert!(spl <= sr);
    for chunk in eps.chunks(7) {
        let (sr, spl) = nav_metrics(chunk).unwrap();
        assert!(spl <= sr + 1e-12);
    }
}

proptest! {
    #[test]
    fn spl_never_exceeds_sr(eps in prop::collection::vec((any::<bool>(), 1e-3f64..100.0, 1e-3f64..100.0), 1..50)) {
        let (sr, spl) = nav_metrics(&eps).unwrap();
        prop_assert!(spl <= sr + 1e-12);
        prop_assert!((0.0..=1.0).contains(&sr) && spl >= 0.0);
    }
}
