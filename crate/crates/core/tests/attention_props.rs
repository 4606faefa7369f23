use assd::attention::{attention_forward, reduced_channels, AttentionParams, ATTENTION_CAPACITY};
use assd::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn nested(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.dim(0)).map(|r| t.row(r).to_vec()).collect()
}

fn instance(c: usize, side: usize, seed: u64) -> (Tensor, AttentionParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::random_uniform([1, c, side, side], -1.0, 1.0, &mut rng);
    (x, AttentionParams::init(c, &mut rng))
}

fn shapes() -> impl Strategy<Value = (usize, usize, u64)> {
    (prop_oneof![Just(8usize), Just(16)], 1usize..5, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_matches_dense_oracle((c, side, seed) in shapes()) {
        let (x, p) = instance(c, side, seed);
        let (y, maps) = attention_forward(&x, &p).unwrap();
        let n = side * side;
        let flat = x.reshape([c, n]).unwrap();
        let expected = assd_oracles::dense_attention(&nested(&flat), &nested(&p.wq), &nested(&p.wk), &nested(&p.wv));
        let y = y.reshape([c, n]).unwrap();
        for ch in 0..c {
            for i in 0..n {
                prop_assert!((y.at(&[ch, i]) - expected[ch][i]).abs() < 1e-10);
            }
        }
        for r in 0..n {
            prop_assert!((maps[0].query_row(r).unwrap().sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_value_weights_give_identity((c, side, seed) in shapes()) {
        let (x, p) = instance(c, side, seed);
        let p = AttentionParams::new(p.wq, p.wk, Tensor::zeros([c, c])).unwrap();
        prop_assert_eq!(attention_forward(&x, &p).unwrap().0, x);
    }

    #[test]
    fn permuting_locations_permutes_outputs((c, side, seed) in shapes(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let (x, p) = instance(c, side, seed);
        let n = side * side;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let permute = |t: &Tensor| {
            let mut out = Tensor::zeros([1, c, side, side]);
            for ch in 0..c {
                for (dst, &src) in perm.iter().enumerate() {
                    out.data_mut()[ch * n + dst] = t.data()[ch * n + src];
                }
            }
            out
        };
        let y = attention_forward(&x, &p).unwrap().0;
        let y_perm = attention_forward(&permute(&x), &p).unwrap().0;
        prop_assert!(y_perm.max_abs_diff(&permute(&y)).unwrap() < 1e-9);
    }
}

#[test]
fn reduced_width_is_an_eighth_with_floor_one() {
    assert_eq!(reduced_channels(64), 8);
    assert_eq!(reduced_channels(8), 1);
    assert_eq!(reduced_channels(3), 1);
}

#[test]
fn oversized_maps_are_rejected() {
    let side = (ATTENTION_CAPACITY as f64).sqrt() as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = AttentionParams::init(8, &mut rng);
    let x = Tensor::zeros([1, 8, side, side]);
    assert!(matches!(attention_forward(&x, &p), Err(Error::Capacity { .. })));
}

#[test]
fn zero_query_weights_give_uniform_rows() {
    let (x, p) = instance(8, 3, 5);
    let p = AttentionParams::new(Tensor::zeros([8, 1]), p.wk, p.wv).unwrap();
    let (_, maps) = attention_forward(&x, &p).unwrap();
    assert!(maps[0].scores.data().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
}

#[test]
fn batch_images_are_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = Tensor::random_uniform([3, 8, 4, 4], -1.0, 1.0, &mut rng);
    let p = AttentionParams::init(8, &mut rng);
    let (y, maps) = attention_forward(&x, &p).unwrap();
    assert_eq!(maps.len(), 3);
    let plane = 8 * 16;
    for b in 0..3 {
        let single = Tensor::new([1, 8, 4, 4], x.data()[b * plane..(b + 1) * plane].to_vec()).unwrap();
        let (ys, ms) = attention_forward(&single, &p).unwrap();
        assert_eq!(ys.data(), &y.data()[b * plane..(b + 1) * plane]);
        assert_eq!(ms[0].scores, maps[b].scores);
    }
}
