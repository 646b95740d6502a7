use super::*;
use crate::sparsify::{sparsify_tensor, SparsifyConfig, SparsifyMode, TensorKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn qt(name: &str, shape: &[usize], levels: Vec<i64>) -> QuantizedTensor {
    QuantizedTensor {
        name: name.into(),
        shape: shape.to_vec(),
        step_size: 4.88e-4,
        levels,
    }
}

fn payload_len(levels: Vec<i64>) -> usize {
    let n = levels.len();
    let bytes = encode(&[qt("t", &[n], levels)]).unwrap();
    inspect(&bytes).unwrap()[0].payload_bytes
}

#[test]
fn quantize_known_levels() {
    let t = Tensor::new(vec![3], vec![9.76e-4, 0.0, -2.44e-4]).unwrap();
    let q = quantize("w", &t, 4.88e-4).unwrap();
    assert_eq!(q.levels, vec![2, 0, -1]);
}

#[test]
fn quantize_rejects_bad_input() {
    let t = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
    assert_eq!(quantize("w", &t, 0.1), Err(CodecError::NonFinite("w".into())));
    let t = Tensor::ones(&[2]);
    assert!(matches!(quantize("w", &t, 0.0), Err(CodecError::InvalidStep { .. })));
    assert!(matches!(quantize("w", &t, 1e-300), Err(CodecError::LevelOverflow(_))));
}

#[test]
fn dequantize_multiplies() {
    let q = QuantizedTensor {
        step_size: 2.44e-4,
        ..qt("w", &[2], vec![0, -3])
    };
    let t = dequantize(&q);
    assert_eq!(t.data()[0], 0.0);
    assert!((t.data()[1] + 7.32e-4).abs() < 1e-18);
}

#[test]
fn grid_points_are_fixed() {
    let q = qt("w", &[5], vec![-7, -1, 0, 1, 300]);
    let again = quantize("w", &dequantize(&q), q.step_size).unwrap();
    assert_eq!(again, q);
}

#[test]
fn all_zero_tensor_is_tiny() {
    assert!(payload_len(vec![0; 10_000]) < 100);
}

#[test]
fn single_element() {
    let q = vec![qt("one", &[1], vec![1])];
    assert_eq!(decode(&encode(&q).unwrap()).unwrap(), q);
}

#[test]
fn empty_stream() {
    let bytes = encode(&[]).unwrap();
    assert_eq!(bytes.len(), 10);
    assert!(decode(&bytes).unwrap().is_empty());
}

#[test]
fn header_layout() {
    let bytes = encode(&[qt("ab", &[2, 3], vec![0; 6])]).unwrap();
    assert_eq!(&bytes[..4], b"FSFL");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 1);
    assert_eq!(u16::from_le_bytes([bytes[10], bytes[11]]), 2);
    assert_eq!(&bytes[12..14], b"ab");
    assert_eq!(bytes[14], 2);
    assert_eq!(u32::from_le_bytes(bytes[15..19].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(bytes[19..23].try_into().unwrap()), 3);
    assert_eq!(f64::from_le_bytes(bytes[23..31].try_into().unwrap()), 4.88e-4);
    let len = u64::from_le_bytes(bytes[31..39].try_into().unwrap()) as usize;
    assert_eq!(bytes.len(), 39 + len);
    let info = &inspect(&bytes).unwrap()[0];
    assert_eq!(info.record_bytes, bytes.len() - 10);
}

#[test]
fn every_truncation_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let levels: Vec<i64> = (0..300)
        .map(|_| {
            if rng.random_bool(0.3) {
                rng.random_range(-40..40)
            } else {
                0
            }
        })
        .collect();
    let bytes = encode(&[qt("a", &[300], levels), qt("b", &[2], vec![1, -1])]).unwrap();
    for cut in 0..bytes.len() {
        assert!(
            matches!(decode(&bytes[..cut]), Err(CodecError::Corrupt(_))),
            "cut at {cut}"
        );
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode(&extra), Err(CodecError::Corrupt(_))));
}

#[test]
fn corrupted_header_fields() {
    let bytes = encode(&[qt("a", &[4], vec![1, 2, 3, 4])]).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(CodecError::Corrupt(m)) if m.contains("magic")));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode(&bad), Err(CodecError::Corrupt(m)) if m.contains("version")));
    let mut bad = bytes.clone();
    bad[19..27].copy_from_slice(&(-1.0f64).to_bits().to_le_bytes());
    assert!(matches!(decode(&bad), Err(CodecError::Corrupt(m)) if m.contains("step")));
}

#[test]
fn encode_rejects_inconsistent_tensor() {
    assert!(matches!(
        encode(&[qt("a", &[3], vec![1])]),
        Err(CodecError::Unrepresentable(..))
    ));
}

fn sparse_levels(rng: &mut ChaCha8Rng, n: usize, zero_fraction: f64) -> Vec<i64> {
    let normal = Normal::new(0.0, 3.0).unwrap();
    (0..n)
        .map(|_| {
            if rng.random_bool(zero_fraction) {
                0
            } else {
                let v: f64 = normal.sample(rng);
                let l = v.round() as i64;
                if l == 0 {
                    1
                } else {
                    l
                }
            }
        })
        .collect()
}

#[test]
fn sparser_tensor_codes_smaller() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let half = payload_len(sparse_levels(&mut rng, 10_000, 0.5));
    let most = payload_len(sparse_levels(&mut rng, 10_000, 0.96));
    assert!(most < half, "{most} vs {half}");
}

fn nested_zero_sizes(seed: u64, fractions: &[f64]) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = sparse_levels(&mut rng, 20_000, 0.0);
    // Nested zero patterns: every step zeroes a superset of the previous one.
    let order: Vec<f64> = (0..base.len()).map(|_| rng.random()).collect();
    fractions
        .iter()
        .map(|&frac| {
            payload_len(
                base.iter()
                    .zip(&order)
                    .map(|(&l, &u)| if u < frac { 0 } else { l })
                    .collect(),
            )
        })
        .collect()
}

#[test]
fn size_non_increasing_in_zero_fraction() {
    // Zeros must dominate: near zero sparsity the position entropy grows
    // faster than the magnitude bits shrink.
    let sizes = nested_zero_sizes(21, &[0.5, 0.6, 0.7, 0.8, 0.9, 0.96, 0.99, 1.0]);
    assert!(sizes.windows(2).all(|w| w[1] <= w[0]), "{sizes:?}");
}

#[test]
fn sparse_update_beats_raw_floats() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 50_000;
    let levels: Vec<i64> = (0..n)
        .map(|_| {
            if rng.random_bool(0.04) {
                rng.random_range(1..=3) * if rng.random_bool(0.5) { 1 } else { -1 }
            } else {
                0
            }
        })
        .collect();
    let bytes = encode(&[qt("w", &[n], levels)]).unwrap();
    assert!((bytes.len() as f64) < 0.15 * (4 * n) as f64, "{} bytes", bytes.len());
}

#[test]
fn fuzz_roundtrip_random_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..1000 {
        let rank = rng.random_range(1..=4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=6)).collect();
        let n = shape.iter().product();
        let zero_fraction = rng.random_range(0.0..1.0);
        let levels = (0..n)
            .map(|_| {
                if rng.random_bool(zero_fraction) {
                    0
                } else {
                    rng.random_range(-255..=255)
                }
            })
            .collect();
        let q = vec![QuantizedTensor {
            name: format!("t{i}"),
            shape,
            step_size: rng.random_range(1e-6..1e-2),
            levels,
        }];
        assert_eq!(decode(&encode(&q).unwrap()).unwrap(), q);
    }
}

#[test]
fn large_levels_roundtrip() {
    let q = vec![qt("big", &[6], vec![MAX_LEVEL, -MAX_LEVEL, 2, -2, 1 << 20, 0])];
    assert_eq!(decode(&encode(&q).unwrap()).unwrap(), q);
}

#[test]
fn sparsified_survivors_stay_nonzero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let normal = Normal::new(0.0, 1e-3).unwrap();
    let t = Tensor::new(vec![8, 50], (0..400).map(|_| normal.sample(&mut rng)).collect()).unwrap();
    let step = 4.88e-4;
    let cfg = SparsifyConfig {
        mode: SparsifyMode::Thresholded,
        delta: 0.0,
        gamma: 0.0,
        step_size: step,
        ..Default::default()
    };
    let s = sparsify_tensor(&t, TensorKind::Weight, &cfg);
    let q = quantize("w", &s, step).unwrap();
    for (v, l) in s.data().iter().zip(&q.levels) {
        assert_eq!(*v == 0.0, *l == 0);
    }
}

#[test]
fn raw_floats_are_four_bytes_each() {
    let mut p = ParamSet::new();
    p.insert("a", Tensor::new(vec![2, 2], vec![0.5, -1.0, 3.25, 0.0]).unwrap());
    p.insert("b", Tensor::new(vec![3], vec![1e-3, 2.0, -7.0]).unwrap());
    let bytes = encode_raw_f32(&p);
    assert_eq!(bytes.len(), 28);
    let back = decode_raw_f32(&bytes, &p).unwrap();
    assert_eq!(back.get("a"), p.get("a"));
    assert!((back.get("b").unwrap().data()[0] - 1e-3).abs() < 1e-10);
    assert!(decode_raw_f32(&bytes[..27], &p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn size_monotone_for_sparse_updates(seed in any::<u64>(), a in 0.5f64..1.0, b in 0.5f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let sizes = nested_zero_sizes(seed, &[lo, hi]);
        prop_assert!(sizes[1] <= sizes[0], "{lo}: {}, {hi}: {}", sizes[0], sizes[1]);
    }

    #[test]
    fn reconstruction_error_within_half_step(
        values in proptest::collection::vec(-1.0f64..1.0, 1..200),
        step in 1e-7f64..1e-1,
    ) {
        let n = values.len();
        let t = Tensor::new(vec![n], values).unwrap();
        let q = quantize("w", &t, step).unwrap();
        for (v, l) in t.data().iter().zip(&q.levels) {
            prop_assert!((v - *l as f64 * step).abs() <= step / 2.0);
            prop_assert_eq!(*v == 0.0 && *l != 0, false);
        }
    }

    #[test]
    fn lossless_roundtrip(
        tensors in proptest::collection::vec(
            (proptest::collection::vec(1usize..5, 1..4), any::<u64>(), 0.0f64..1.0),
            0..5,
        ),
    ) {
        let q: Vec<QuantizedTensor> = tensors
            .into_iter()
            .enumerate()
            .map(|(i, (shape, seed, zf))| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = shape.iter().product();
                QuantizedTensor {
                    name: format!("layer{i}.weight"),
                    shape,
                    step_size: 2.38e-6,
                    levels: (0..n).map(|_| if rng.random_bool(zf) { 0 } else { rng.random_range(-100_000..100_000) }).collect(),
                }
            })
            .collect();
        prop_assert_eq!(decode(&encode(&q).unwrap()).unwrap(), q);
    }
}
