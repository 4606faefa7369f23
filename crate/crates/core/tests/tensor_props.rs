use assd::layers::{bilinear_upsample, conv2d, ConvParams};
use assd::Tensor;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let len = shape.iter().product::<usize>();
    prop::collection::vec(-3.0f64..3.0, len).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn matrix() -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| tensor(vec![r, c]))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(t in matrix(), shift in -50.0f64..50.0) {
        let p = t.softmax_rows().unwrap();
        for r in 0..p.dim(0) {
            let row = p.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
        let shifted = t.map(|v| v + shift).softmax_rows().unwrap();
        prop_assert!(shifted.max_abs_diff(&p).unwrap() < 1e-12);
    }

    #[test]
    fn matmul_matches_naive_and_associates(
        (a, b, c) in (1usize..5, 1usize..5, 1usize..5, 1usize..5)
            .prop_flat_map(|(m, k, n, p)| (tensor(vec![m, k]), tensor(vec![k, n]), tensor(vec![n, p])))
    ) {
        let ab = a.matmul(&b).unwrap();
        let naive = assd_oracles::matmul(a.data(), b.data(), a.dim(0), a.dim(1), b.dim(1));
        prop_assert!(ab.data().iter().zip(&naive).all(|(x, y)| (x - y).abs() < 1e-12));
        let left = ab.matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right).unwrap() < 1e-10);
    }

    #[test]
    fn conv_weights_act_linearly(
        x in tensor(vec![1, 2, 5, 5]),
        w1 in tensor(vec![3, 2, 3, 3]),
        w2 in tensor(vec![3, 2, 3, 3]),
        alpha in -2.0f64..2.0,
        stride in 1usize..3,
    ) {
        let zero_bias = Tensor::zeros([3]);
        let conv = |w: &Tensor| conv2d(&x, &ConvParams::new(w.clone(), zero_bias.clone(), stride, 1).unwrap()).unwrap();
        let combined = w1.add(&w2.scale(alpha)).unwrap();
        let expected = conv(&w1).add(&conv(&w2).scale(alpha)).unwrap();
        prop_assert!(conv(&combined).max_abs_diff(&expected).unwrap() < 1e-10);
    }

    #[test]
    fn conv_inputs_act_linearly(
        x1 in tensor(vec![2, 2, 4, 4]),
        x2 in tensor(vec![2, 2, 4, 4]),
        w in tensor(vec![2, 2, 3, 3]),
    ) {
        let p = ConvParams::new(w, Tensor::zeros([2]), 2, 1).unwrap();
        let sum = conv2d(&x1.add(&x2).unwrap(), &p).unwrap();
        let parts = conv2d(&x1, &p).unwrap().add(&conv2d(&x2, &p).unwrap()).unwrap();
        prop_assert!(sum.max_abs_diff(&parts).unwrap() < 1e-10);
    }

    #[test]
    fn upsampling_stays_within_input_range(
        (x, oh, ow) in (1usize..5, 1usize..5)
            .prop_flat_map(|(h, w)| (tensor(vec![1, 2, h, w]), h..12, w..12))
    ) {
        let y = bilinear_upsample(&x, oh, ow).unwrap();
        prop_assert_eq!(y.shape(), &[1, 2, oh, ow]);
        let (h, w) = (x.dim(2), x.dim(3));
        for c in 0..2 {
            let plane = &x.data()[c * h * w..(c + 1) * h * w];
            let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &y.data()[c * oh * ow..(c + 1) * oh * ow];
            prop_assert!(out.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }
}

#[test]
fn two_by_two_upsample_matches_formula() {
    let x = Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let y = bilinear_upsample(&x, 4, 4).unwrap();
    let coord = |d: usize| ((d as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
    for i in 0..4 {
        for j in 0..4 {
            // f(r, c) = 2r + c on the 2×2 grid is itself bilinear
            let expected = 2.0 * coord(i) + coord(j);
            assert!((y.at(&[0, 0, i, j]) - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn constant_maps_stay_constant() {
    let x = Tensor::full([1, 1, 3, 2], 0.7);
    let y = bilinear_upsample(&x, 7, 5).unwrap();
    assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    let one = Tensor::full([1, 1, 1, 1], -2.5);
    assert!(bilinear_upsample(&one, 4, 3).unwrap().data().iter().all(|&v| v == -2.5));
}
