mod support;

use hyatt_core::kernels::Conv2dParams;
use hyatt_core::tape::Tape;
use hyatt_core::Tensor;
use proptest::prelude::*;
use support::{rng, Array4, ConvSpec};

fn tensor(a: &Array4) -> Tensor<f64> {
    Tensor::new(&a.shape, a.data.clone()).unwrap()
}

fn conv(x: &Array4, w: &Array4, bias: Option<&[f64]>, p: Conv2dParams) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let xn = tape.constant(tensor(x));
    let wn = tape.constant(tensor(w));
    let bn = bias.map(|b| tape.constant(Tensor::new(&[b.len()], b.to_vec()).unwrap()));
    let y = tape.conv2d(xn, wn, bn, p).unwrap();
    tape.value(y).data().to_vec()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn grouped_conv_matches_direct_loop() {
    let x = Array4::random([1, 2, 4, 4], &mut rng(1));
    let w = Array4::random([2, 1, 3, 3], &mut rng(2));
    let got = conv(&x, &w, None, Conv2dParams::depthwise(2, 1));
    let spec = ConvSpec {
        stride: 1,
        pad: 1,
        dilation: 1,
        groups: 2,
    };
    assert!(close(&got, &support::conv2d(&x, &w, None, &spec).data, 1e-6));
}

#[test]
fn transposed_conv_is_input_gradient_of_conv() {
    // y = conv_transpose(x, w) equals d/dz <conv(z, w), x> for matched shapes
    let x = Array4::random([1, 3, 4, 5], &mut rng(3));
    let w = Array4::random([3, 2, 2, 2], &mut rng(4));
    let mut tape = Tape::<f64>::new();
    let z = tape.param(Tensor::zeros(&[1, 2, 8, 10]));
    let wn = tape.constant(tensor(&w));
    let c = tape.conv2d(z, wn, None, Conv2dParams::strided(2, 0)).unwrap();
    let xn = tape.constant(tensor(&x));
    let p = tape.mul(c, xn).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    let grad = tape.grad(z).unwrap().data().to_vec();

    let mut t2 = Tape::<f64>::new();
    let xn = t2.constant(tensor(&x));
    let wn = t2.constant(tensor(&w));
    let y = t2.conv_transpose2d(xn, wn, None, 2, 0).unwrap();
    assert!(close(t2.value(y).data(), &grad, 1e-6));
    assert!(close(
        t2.value(y).data(),
        &support::conv_transpose2d(&x, &w, None, 2).data,
        1e-12
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_loop(
        b in 1usize..3,
        groups in 1usize..3,
        cin_g in 1usize..10,
        cout_g in 1usize..4,
        h in 1usize..9,
        w in 1usize..9,
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3,
        dilation in 1usize..3,
        pad in 0usize..3,
        bias in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let span = dilation * (k - 1) + 1;
        prop_assume!(h + 2 * pad >= span && w + 2 * pad >= span);
        let (cin, cout) = (cin_g * groups, cout_g * groups);
        let mut r = rng(seed);
        let x = Array4::random([b, cin, h, w], &mut r);
        let wt = Array4::random([cout, cin_g, k, k], &mut r);
        let bv = Array4::random([1, 1, 1, cout], &mut r).data;
        let p = Conv2dParams { stride, padding: pad, dilation, groups };
        let got = conv(&x, &wt, bias.then_some(bv.as_slice()), p);
        let spec = ConvSpec { stride, pad, dilation, groups };
        let want = support::conv2d(&x, &wt, bias.then_some(bv.as_slice()), &spec);
        prop_assert!(close(&got, &want.data, 1e-10), "{p:?}");
    }

    #[test]
    fn depthwise_matches_direct_loop(c in 1usize..12, side in 1usize..10, k in prop::sample::select(vec![3usize, 5]), seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Array4::random([2, c, side, side], &mut r);
        let wt = Array4::random([c, 1, k, k], &mut r);
        let got = conv(&x, &wt, None, Conv2dParams::depthwise(c, k / 2));
        let spec = ConvSpec { stride: 1, pad: k / 2, dilation: 1, groups: c };
        prop_assert!(close(&got, &support::conv2d(&x, &wt, None, &spec).data, 1e-10));
    }

    #[test]
    fn transposed_conv_matches_scatter_loop(cin in 1usize..4, cout in 1usize..4, h in 1usize..5, w in 1usize..5, k in 1usize..4, stride in 1usize..3, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Array4::random([1, cin, h, w], &mut r);
        let wt = Array4::random([cin, cout, k, k], &mut r);
        let bv = Array4::random([1, 1, 1, cout], &mut r).data;
        let mut tape = Tape::<f64>::new();
        let xn = tape.constant(tensor(&x));
        let wn = tape.constant(tensor(&wt));
        let bn = tape.constant(Tensor::new(&[cout], bv.clone()).unwrap());
        let y = tape.conv_transpose2d(xn, wn, Some(bn), stride, 0).unwrap();
        let want = support::conv_transpose2d(&x, &wt, Some(&bv), stride);
        prop_assert_eq!(tape.shape(y), &want.shape);
        prop_assert!(close(tape.value(y).data(), &want.data, 1e-12));
    }
}
