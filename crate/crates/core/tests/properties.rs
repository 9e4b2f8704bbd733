use std::collections::VecDeque;

use proptest::prelude::*;

use mad_core::config::Config;
use mad_core::data::{make_blobs, split};
use mad_core::diffcore::{softmax_rows, Graph, RngState, Stream, Tensor};
use mad_core::losses::{clamp_penalty, js_divergence, kd_value};
use mad_core::models::{build_generator, ema_init, Conditioning, GeneratorNet, Parameterized};
use mad_core::trainer::MemoryBank;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-scale..scale, rows * cols)
        .prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

fn logits_pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..6, 2usize..7).prop_flat_map(|(n, c)| (matrix(n, c, 15.0), matrix(n, c, 15.0)))
}

fn flat(net: &GeneratorNet) -> Vec<f64> {
    net.parameters()
        .into_iter()
        .chain(net.buffers())
        .flat_map(|t| t.data().to_vec())
        .collect()
}

fn generator(seed: u64) -> GeneratorNet {
    let mut rng = RngState::new(seed, Stream::Init);
    build_generator(3, 0, &[4], 2, Conditioning::Uncond, 2, &mut rng).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn log_softmax_ignores_row_shifts(x in matrix(3, 5, 30.0), c in -50.0..50.0f64) {
        let mut g = Graph::new();
        let a = g.constant(x.clone());
        let b = g.constant(x.map(|v| v + c));
        let la = g.log_softmax(a).unwrap();
        let lb = g.log_softmax(b).unwrap();
        for (p, q) in g.value(la).data().iter().zip(g.value(lb).data()) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn kd_is_non_negative((t, s) in logits_pair()) {
        prop_assert!(kd_value(&t, &s).unwrap() >= -1e-12);
        prop_assert!(kd_value(&t, &t).unwrap().abs() < 1e-12);
    }

    #[test]
    fn js_is_bounded_and_symmetric((t, s) in logits_pair()) {
        let (p, q) = (softmax_rows(&t), softmax_rows(&s));
        let pq = js_divergence(&p, &q).unwrap();
        let qp = js_divergence(&q, &p).unwrap();
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&pq));
        prop_assert!((pq - qp).abs() < 1e-12);
        prop_assert!(js_divergence(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn clamp_penalty_is_mean_excess(x in matrix(4, 3, 40.0), bound in 0.5..30.0f64) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let c = clamp_penalty(&mut g, v, bound).unwrap();
        let want = x.data().iter().map(|a| (a.abs() - bound).max(0.0)).sum::<f64>() / x.len() as f64;
        prop_assert!((g.scalar(c) - want).abs() < 1e-12);
    }

    #[test]
    fn ema_stays_between_average_and_target(alpha in 0.0..=1.0f64, seeds in prop::collection::vec(0u64..1000, 1..8)) {
        let base = generator(10_000);
        let mut ema = ema_init(&base, None, alpha).unwrap();
        for s in seeds {
            let target = generator(s);
            let before = flat(&ema.generator);
            ema.update(&target, None).unwrap();
            for ((a, b), t) in flat(&ema.generator).iter().zip(&before).zip(&flat(&target)) {
                prop_assert!(*a >= b.min(*t) && *a <= b.max(*t));
            }
        }
    }

    #[test]
    fn ema_contracts_toward_a_fixed_generator(alpha in 0.0..1.0f64, k in 1i32..40) {
        let (start, target) = (generator(1), generator(2));
        let mut ema = ema_init(&start, None, alpha).unwrap();
        for _ in 0..k {
            ema.update(&target, None).unwrap();
        }
        let ak = alpha.powi(k);
        for ((n, s), t) in flat(&ema.generator).iter().zip(&flat(&start)).zip(&flat(&target)) {
            prop_assert!(((n - t) - ak * (s - t)).abs() < 1e-12);
        }
    }

    #[test]
    fn memory_bank_is_a_fifo(cap in 1usize..16, width in 1usize..4, batches in prop::collection::vec(1usize..24, 1..10)) {
        let mut bank = MemoryBank::new(cap, width).unwrap();
        let mut oracle = VecDeque::new();
        let mut next = 0.0;
        for n in batches {
            let mut data = Vec::new();
            for _ in 0..n {
                for k in 0..width {
                    data.push(next + k as f64 * 0.01);
                }
                oracle.push_back(next);
                if oracle.len() > cap {
                    oracle.pop_front();
                }
                next += 1.0;
            }
            bank.push(&Tensor::matrix(n, width, data).unwrap()).unwrap();
            prop_assert_eq!(bank.len(), oracle.len());
            let firsts: Vec<f64> = bank.contents().iter_rows().map(|r| r[0]).collect();
            prop_assert_eq!(firsts, oracle.iter().copied().collect::<Vec<_>>());
        }
    }

    #[test]
    fn memory_samples_are_distinct_rows(cap in 2usize..20, n in 2usize..20, seed in 0u64..100) {
        let mut bank = MemoryBank::new(cap, 1).unwrap();
        let rows: Vec<f64> = (0..cap).map(|i| i as f64).collect();
        bank.push(&Tensor::matrix(cap, 1, rows).unwrap()).unwrap();
        let n = n.min(cap);
        let mut rng = RngState::new(seed, Stream::Memory);
        let mut got: Vec<f64> = bank.sample(n, &mut rng).unwrap().data().to_vec();
        got.sort_by(f64::total_cmp);
        got.dedup();
        prop_assert_eq!(got.len(), n);
    }

    #[test]
    fn stratified_split_keeps_every_class(per_class in 4usize..30, frac in 0.1..0.6f64, seed in 0u64..50) {
        let mut rng = RngState::new(seed, Stream::Data);
        let ds = make_blobs(4, per_class, 2, 0.1, &mut rng).unwrap();
        let (train, test) = split(&ds, frac, &mut rng).unwrap();
        prop_assert_eq!(train.len() + test.len(), ds.len());
        prop_assert!(train.class_counts().iter().all(|&c| c >= 1));
        prop_assert!(test.class_counts().iter().all(|&c| c >= 1));
    }

    #[test]
    fn resolved_config_reparses(alpha in 0.0..=1.0f64, n_s in 1usize..50, seed in 0u64..1000) {
        let mut cfg = Config::preset("desk").unwrap();
        cfg.distill.alpha = alpha;
        cfg.distill.n_s = n_s;
        cfg.distill.seed = seed;
        let back = Config::parse_str(&cfg.to_resolved(&["note".into()])).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
