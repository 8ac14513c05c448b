//! Kernel properties against naive f64 references.

use layerlight_nn::gemm::{gemm, MatRef};
use layerlight_nn::{par, Graph, Shape, Tensor};
use proptest::prelude::*;

fn values(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, n)
}

// [cout, b, ho, wo] with zero padding k/2, weight index co*(cin*k*k) + ci*k*k + ky*k + kx.
fn naive_conv(x: &Tensor, w: &[f32], bias: &[f32], cout: usize, k: usize, stride: usize) -> Vec<f64> {
    let s = x.shape();
    let ho = (s.h - 1) / stride + 1;
    let wo = (s.w - 1) / stride + 1;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0f64; cout * s.b * ho * wo];
    for co in 0..cout {
        for b in 0..s.b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = f64::from(bias[co]);
                    for ci in 0..s.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride) as isize + ky as isize - pad;
                                let ix = (ox * stride) as isize + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let xv = x.data()[x.index(ci, b, iy as usize, ix as usize)];
                                let wv = w[co * s.c * k * k + ci * k * k + ky * k + kx];
                                acc += f64::from(xv) * f64::from(wv);
                            }
                        }
                    }
                    out[((co * s.b + b) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gemm_matches_naive(m in 1usize..7, k in 1usize..9, n in 1usize..7, ta: bool, tb: bool,
                          seed in values(7 * 9 * 2 + 7 * 7)) {
        let a = &seed[..m * k];
        let b = &seed[63..63 + k * n];
        let c0 = &seed[126..126 + m * n];
        // Lay out operands so that the logical views are m x k and k x n.
        let am = if ta { MatRef::new(a, k, m).t() } else { MatRef::new(a, m, k) };
        let bm = if tb { MatRef::new(b, n, k).t() } else { MatRef::new(b, k, n) };
        let at = |i: usize, p: usize| if ta { a[p * m + i] } else { a[i * k + p] };
        let bt = |p: usize, j: usize| if tb { b[j * k + p] } else { b[p * n + j] };
        let mut c = c0.to_vec();
        gemm(am, bm, &mut c, 0.5);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = 0.5 * f64::from(c0[i * n + j])
                    + (0..k).map(|p| f64::from(at(i, p)) * f64::from(bt(p, j))).sum::<f64>();
                prop_assert!((f64::from(c[i * n + j]) - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_matches_direct_sum(cin in 1usize..4, cout in 1usize..4, b in 1usize..3, h in 1usize..7,
                               w in 1usize..7, k in prop::sample::select(vec![1usize, 3, 5]),
                               stride in 1usize..3, data in values(3 * 2 * 6 * 6 + 3 * 3 * 25 + 3)) {
        let shape = Shape::new(cin, b, h, w);
        let x = Tensor::from_vec(shape, data[..shape.len()].to_vec());
        let nw = cout * cin * k * k;
        let wt = data[216..216 + nw].to_vec();
        let bias = data[216 + 225..216 + 225 + cout].to_vec();
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let wv = g.constant(Tensor::from_vec(Shape::new(cout, 1, 1, cin * k * k), wt.clone()));
        let bv = g.constant(Tensor::from_vec(Shape::new(cout, 1, 1, 1), bias.clone()));
        let y = g.conv2d(xv, wv, Some(bv), k, stride);
        let want = naive_conv(&x, &wt, &bias, cout, k, stride);
        prop_assert_eq!(g.value(y).len(), want.len());
        for (got, want) in g.value(y).data().iter().zip(&want) {
            prop_assert!((f64::from(*got) - want).abs() < 1e-5);
        }
    }

    #[test]
    fn space_depth_round_trip(c in 1usize..4, b in 1usize..3, h in 1usize..4, w in 1usize..4,
                              data in values(3 * 2 * 6 * 6)) {
        let shape = Shape::new(c, b, 2 * h, 2 * w);
        let x = Tensor::from_vec(shape, data[..shape.len()].to_vec());
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let down = g.space_to_depth(xv);
        prop_assert_eq!(g.shape(down), Shape::new(4 * c, b, h, w));
        let up = g.depth_to_space(down);
        prop_assert_eq!(g.value(up).data(), x.data());
    }

    #[test]
    fn stack_inverts_batch_item(c in 1usize..4, b in 1usize..5, h in 1usize..5, w in 1usize..5,
                                data in values(3 * 4 * 4 * 4)) {
        let shape = Shape::new(c, b, h, w);
        let x = Tensor::from_vec(shape, data[..shape.len()].to_vec());
        let items: Vec<Tensor> = (0..b).map(|i| x.batch_item(i)).collect();
        let refs: Vec<&Tensor> = items.iter().collect();
        let stacked = Tensor::stack(&refs);
        prop_assert_eq!(stacked.data(), x.data());
    }

    #[test]
    fn map_indexed_keeps_order(n in 0usize..200) {
        let got = par::map_indexed(n, |i| i * i);
        prop_assert_eq!(got, (0..n).map(|i| i * i).collect::<Vec<_>>());
    }
}
