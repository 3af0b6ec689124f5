//! Layer kernels on channel-major `[c][h][w]` tensors.

use std::ops::Range;

/// Valid cross-correlation with stride 1.
pub(super) fn conv_forward(
    input: &[f64],
    (cin, h, w): (usize, usize, usize),
    weights: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
) -> Vec<f64> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..cin {
            let src = &input[c * h * w..(c + 1) * h * w];
            for u in 0..k {
                for v in 0..k {
                    let wt = weights[((o * cin + c) * k + u) * k + v];
                    if wt == 0.0 {
                        continue;
                    }
                    for i in 0..oh {
                        let row = &src[(i + u) * w + v..(i + u) * w + v + ow];
                        for (d, s) in plane[i * ow..(i + 1) * ow].iter_mut().zip(row) {
                            *d += wt * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates kernel and bias gradients into `grad`; returns the input
/// gradient when `input_grad` is set, otherwise an empty vector.
#[allow(clippy::too_many_arguments)]
pub(super) fn conv_backward(
    g_out: &[f64],
    input: &[f64],
    (cin, h, w): (usize, usize, usize),
    weights: &[f64],
    cout: usize,
    k: usize,
    grad: &mut [f64],
    w_range: Range<usize>,
    b_range: Range<usize>,
    input_grad: bool,
) -> Vec<f64> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut g_in = if input_grad { vec![0.0; cin * h * w] } else { Vec::new() };
    for o in 0..cout {
        let g = &g_out[o * oh * ow..(o + 1) * oh * ow];
        grad[b_range.start + o] += g.iter().sum::<f64>();
        for c in 0..cin {
            let src = &input[c * h * w..(c + 1) * h * w];
            for u in 0..k {
                for v in 0..k {
                    let widx = ((o * cin + c) * k + u) * k + v;
                    let mut acc = 0.0;
                    for i in 0..oh {
                        let row = &src[(i + u) * w + v..(i + u) * w + v + ow];
                        acc += g[i * ow..(i + 1) * ow].iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                    }
                    grad[w_range.start + widx] += acc;
                    if input_grad {
                        let wt = weights[widx];
                        let dst = &mut g_in[c * h * w..(c + 1) * h * w];
                        for i in 0..oh {
                            let row = &mut dst[(i + u) * w + v..(i + u) * w + v + ow];
                            for (d, s) in row.iter_mut().zip(&g[i * ow..(i + 1) * ow]) {
                                *d += wt * s;
                            }
                        }
                    }
                }
            }
        }
    }
    g_in
}

/// 2×2 max pooling with stride 2, dropping an odd last row or column.
/// Returns the pooled tensor and the flat input index of each maximum; ties
/// go to the first position in row-major order.
pub(super) fn pool_forward(input: &[f64], channels: usize, (h, w): (usize, usize)) -> (Vec<f64>, Vec<usize>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(channels * ph * pw);
    let mut arg = Vec::with_capacity(channels * ph * pw);
    for c in 0..channels {
        let base = c * h * w;
        for i in 0..ph {
            for j in 0..pw {
                let mut best = base + 2 * i * w + 2 * j;
                for idx in [
                    base + 2 * i * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(super) fn pool_backward(g_out: &[f64], arg: &[usize], input_len: usize) -> Vec<f64> {
    let mut g = vec![0.0; input_len];
    for (&idx, &v) in arg.iter().zip(g_out) {
        g[idx] += v;
    }
    g
}

/// `W x + b` with `W` stored row-major as `[out][in]`.
pub(crate) fn dense_forward(x: &[f64], weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + weights[o * n..(o + 1) * n].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

pub(crate) fn dense_backward(
    g_out: &[f64],
    x: &[f64],
    weights: &[f64],
    grad: &mut [f64],
    w_range: Range<usize>,
    b_range: Range<usize>,
) -> Vec<f64> {
    let n = x.len();
    let mut g_x = vec![0.0; n];
    for (o, &g) in g_out.iter().enumerate() {
        grad[b_range.start + o] += g;
        if g == 0.0 {
            continue;
        }
        let gw = &mut grad[w_range.start + o * n..w_range.start + (o + 1) * n];
        for (d, v) in gw.iter_mut().zip(x) {
            *d += g * v;
        }
        for (d, w) in g_x.iter_mut().zip(&weights[o * n..(o + 1) * n]) {
            *d += g * w;
        }
    }
    g_x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_sum() {
        let (cin, h, w, cout, k) = (2, 5, 6, 3, 3);
        let input: Vec<f64> = (0..cin * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let weights: Vec<f64> = (0..cout * cin * k * k).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let bias = [0.5, -1.0, 0.25];
        let out = conv_forward(&input, (cin, h, w), &weights, &bias, cout, k);
        let (oh, ow) = (h - k + 1, w - k + 1);
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = bias[o];
                    for c in 0..cin {
                        for u in 0..k {
                            for v in 0..k {
                                s += weights[((o * cin + c) * k + u) * k + v] * input[c * h * w + (i + u) * w + j + v];
                            }
                        }
                    }
                    assert!((out[(o * oh + i) * ow + j] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pool_picks_first_maximum() {
        let x = [1.0, 3.0, 0.0, 3.0, 2.0, 2.0, 9.0, 9.0, 5.0];
        let (out, arg) = pool_forward(&x, 1, (3, 3));
        assert_eq!(out, vec![3.0]);
        assert_eq!(arg, vec![1]);
    }
}
