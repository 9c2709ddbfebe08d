//! Quantizer properties against brute-force oracles.

mod common;

use common::{random_tensor, rng};
use pqvae::quantize::{
    codebook_perplexity, codebook_usage, compose_codebook, compose_index, composed_size, decompose_index,
    fsq_grid, fsq_quantize, pq_quantize, rvq_quantize, vq_lookup, Codebook, PQConfig, DEFAULT_COMPOSE_CAP,
};
use pqvae::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn brute_nearest(rows: &[f64], dim: usize, e: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in rows.chunks(dim).enumerate() {
        let d: f64 = c.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

fn book(n: usize, d: usize, seed: u64) -> Codebook {
    Codebook::new(random_tensor(n, d, 1.0, &mut rng(seed)), 0.9).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vq_lookup_is_exhaustive_argmin(seed in 0u64..10_000, n in 2usize..40, d in 1usize..6) {
        let b = book(n, d, seed);
        let mut r = rng(seed + 1);
        for _ in 0..20 {
            let e: Vec<f64> = (0..d).map(|_| r.random_range(-1.5..1.5)).collect();
            let (i, c) = vq_lookup(&e, &b).unwrap();
            prop_assert_eq!(i, brute_nearest(b.codewords(), d, &e));
            prop_assert_eq!(c.as_slice(), b.codeword(i));
        }
    }

    #[test]
    fn compose_round_trip(sizes in prop::collection::vec(2usize..9, 1..5), pick in any::<u64>()) {
        let total = composed_size(&sizes).unwrap();
        let idx = pick % total;
        let subs = decompose_index(idx, &sizes).unwrap();
        prop_assert_eq!(compose_index(&subs, &sizes).unwrap(), idx);
        // Mixed radix with the first sub-index varying fastest.
        let mut expect = 0u64;
        let mut radix = 1u64;
        for (&i, &n) in subs.iter().zip(&sizes) {
            expect += i as u64 * radix;
            radix *= n as u64;
        }
        prop_assert_eq!(expect, idx);
    }

    #[test]
    fn pq_equals_composed_vq(seed in 0u64..10_000, sizes in prop::collection::vec(2usize..6, 1..4)) {
        let dims: Vec<usize> = (0..sizes.len()).map(|m| 1 + (m + seed as usize) % 3).collect();
        let books: Vec<Codebook> = sizes.iter().zip(&dims).enumerate()
            .map(|(m, (&n, &d))| book(n, d, seed * 7 + m as u64)).collect();
        let cfg = PQConfig::new(sizes.clone(), dims.clone()).unwrap();
        let big = compose_codebook(&books, DEFAULT_COMPOSE_CAP).unwrap();
        let e = random_tensor(16, cfg.dim(), 1.2, &mut rng(seed + 99));
        let res = pq_quantize(&e, &books, &cfg).unwrap();
        for t in 0..16 {
            let j = brute_nearest(big.codewords(), cfg.dim(), e.row(t));
            prop_assert_eq!(res.composed_index[t], j as u64);
            prop_assert_eq!(res.quantized.row(t), big.codeword(j));
        }
    }

    #[test]
    fn rvq_output_is_sum_of_stage_codewords(seed in 0u64..10_000, stages in 1usize..4, d in 1usize..5) {
        let books: Vec<Codebook> = (0..stages).map(|s| book(4, d, seed * 3 + s as u64)).collect();
        let e = random_tensor(10, d, 1.0, &mut rng(seed));
        let res = rvq_quantize(&e, &books).unwrap();
        for t in 0..10 {
            let mut acc = vec![0.0; d];
            let mut residual = e.row(t).to_vec();
            for (s, b) in books.iter().enumerate() {
                let i = res.sub_indices[t][s];
                prop_assert_eq!(i, brute_nearest(b.codewords(), d, &residual));
                for k in 0..d {
                    acc[k] += b.codeword(i)[k];
                    residual[k] -= b.codeword(i)[k];
                }
            }
            prop_assert_eq!(res.quantized.row(t), acc.as_slice());
        }
    }

    #[test]
    fn fsq_values_lie_on_grid(seed in 0u64..10_000, levels in prop::collection::vec(2usize..9, 1..5)) {
        let e = random_tensor(12, levels.len(), 3.0, &mut rng(seed));
        let res = fsq_quantize(&e, &levels).unwrap();
        for t in 0..12 {
            for (k, &l) in levels.iter().enumerate() {
                let v = res.quantized.row(t)[k];
                let grid = fsq_grid(l);
                prop_assert!(grid.contains(&v), "{} not on grid {:?}", v, grid);
                // Nearest grid point to tanh(e).
                let x = e.row(t)[k].tanh();
                let best = grid.iter().map(|g| (g - x).abs()).fold(f64::INFINITY, f64::min);
                prop_assert!(((v - x).abs() - best).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn metric_bounds(seed in 0u64..10_000, n in 1u64..64, len in 1usize..200) {
        let mut r = rng(seed);
        let stream: Vec<u64> = (0..len).map(|_| r.random_range(0..n)).collect();
        let u = codebook_usage(&stream, n).unwrap();
        let p = codebook_perplexity(&stream, n).unwrap();
        prop_assert!(1.0 <= p && p <= u as f64 && u as u64 <= n);
    }
}

#[test]
fn ema_matches_recurrence_replay() {
    for decay in [0.9, 0.999] {
        let (n, d) = (6, 3);
        let init = random_tensor(n, d, 1.0, &mut rng(5));
        let mut b = Codebook::new(init.clone(), decay).unwrap();
        let mut count = vec![1.0; n];
        let mut sum = init.data().to_vec();
        let mut r = rng(17);
        for _ in 0..1000 {
            let batch: Vec<(usize, Vec<f64>)> = (0..r.random_range(0..12))
                .map(|_| (r.random_range(0..n), (0..d).map(|_| r.random_range(-2.0..2.0)).collect()))
                .collect();
            b.ema_update(batch.iter().map(|(i, v)| (*i, v.as_slice()))).unwrap();
            for i in 0..n {
                let hits: Vec<&Vec<f64>> = batch.iter().filter(|(j, _)| *j == i).map(|(_, v)| v).collect();
                count[i] = decay * count[i] + (1.0 - decay) * hits.len() as f64;
                for k in 0..d {
                    let s: f64 = hits.iter().map(|v| v[k]).sum();
                    sum[i * d + k] = decay * sum[i * d + k] + (1.0 - decay) * s;
                }
            }
        }
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for k in 0..d {
                let expect = sum[i * d + k] / count[i].max(1e-5);
                worst = worst.max((b.codeword(i)[k] - expect).abs());
            }
        }
        assert!(worst < 1e-9, "decay {decay}: max diff {worst}");
    }
}

#[test]
fn uniform_stream_perplexity() {
    for k in [2u64, 16, 256] {
        let stream: Vec<u64> = (0..k * 5).map(|i| i % k).collect();
        assert!((codebook_perplexity(&stream, k).unwrap() - k as f64).abs() < 1e-9);
    }
}

#[test]
fn composed_size_arithmetic() {
    assert_eq!(composed_size(&[16, 16, 16, 16]).unwrap(), 65_536);
    let books: Vec<Codebook> = (0..2).map(|s| book(16, 2, s)).collect();
    assert_eq!(compose_codebook(&books, DEFAULT_COMPOSE_CAP).unwrap().size(), 256);
    assert!(compose_codebook(&books, 100).is_err());
    let t = Tensor::zeros(&[1, 4]);
    let cfg = PQConfig::new(vec![16, 16], vec![2, 2]).unwrap();
    assert_eq!(pq_quantize(&t, &books, &cfg).unwrap().sub_indices[0].len(), 2);
}
