//! Raw forward/backward kernels on flat buffers. Shapes are validated by the caller.

/// `C = op(A) * op(B)` (+ `C` when `accumulate`), where `op(A)` is `m x k` and
/// `op(B)` is `k x n`. A transposed operand is stored in its untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `C x H x W` image into the `(C*9) x (H*W)` patch matrix of a
/// 3x3, stride 1, zero-pad 1 convolution.
pub(crate) fn im2col(img: &[f32], c: usize, h: usize, w: usize, col: &mut [f32]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ch * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        *o = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image (adds).
pub(crate) fn col2im_add(col: &[f32], c: usize, h: usize, w: usize, img: &mut [f32]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut img[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ch * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

/// Returns the output `N x C_out x H x W` and the saved patch matrices.
pub(crate) fn conv2d_forward(
    d: &ConvDims,
    input: &[f32],
    kernel: &[f32],
    bias: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let hw = d.h * d.w;
    let ck = d.c_in * 9;
    let mut cols = vec![0.0f32; d.n * ck * hw];
    let mut out = vec![0.0f32; d.n * d.c_out * hw];
    for s in 0..d.n {
        let col = &mut cols[s * ck * hw..(s + 1) * ck * hw];
        im2col(&input[s * d.c_in * hw..(s + 1) * d.c_in * hw], d.c_in, d.h, d.w, col);
        let o = &mut out[s * d.c_out * hw..(s + 1) * d.c_out * hw];
        for (oc, row) in o.chunks_exact_mut(hw).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[oc]);
        }
        gemm(d.c_out, ck, hw, kernel, false, col, false, o, true);
    }
    (out, cols)
}

/// Gradients `(d_input, d_kernel, d_bias)`; `d_input` is skipped when not needed.
pub(crate) fn conv2d_backward(
    d: &ConvDims,
    kernel: &[f32],
    cols: &[f32],
    grad_out: &[f32],
    need_input: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let hw = d.h * d.w;
    let ck = d.c_in * 9;
    let mut dk = vec![0.0f32; d.c_out * ck];
    let mut db = vec![0.0f32; d.c_out];
    let mut dx = need_input.then(|| vec![0.0f32; d.n * d.c_in * hw]);
    let mut dcol = vec![0.0f32; ck * hw];
    for s in 0..d.n {
        let g = &grad_out[s * d.c_out * hw..(s + 1) * d.c_out * hw];
        let col = &cols[s * ck * hw..(s + 1) * ck * hw];
        gemm(d.c_out, hw, ck, g, false, col, true, &mut dk, true);
        for (oc, row) in g.chunks_exact(hw).enumerate() {
            db[oc] += row.iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
        if let Some(dx) = dx.as_mut() {
            gemm(ck, d.c_out, hw, kernel, true, g, false, &mut dcol, false);
            col2im_add(&dcol, d.c_in, d.h, d.w, &mut dx[s * d.c_in * hw..(s + 1) * d.c_in * hw]);
        }
    }
    (dx, dk, db)
}

pub(crate) fn avgpool2_forward(x: &[f32], nc: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; nc * oh * ow];
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let a = src[2 * i * w + 2 * j];
                let b = src[2 * i * w + 2 * j + 1];
                let c = src[(2 * i + 1) * w + 2 * j];
                let e = src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * ow + j] = (a + b + c + e) * 0.25;
            }
        }
    }
    out
}

pub(crate) fn avgpool2_backward(g: &[f32], nc: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0f32; nc * h * w];
    for p in 0..nc {
        let gs = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let v = gs[i * ow + j] * 0.25;
                dst[2 * i * w + 2 * j] = v;
                dst[2 * i * w + 2 * j + 1] = v;
                dst[(2 * i + 1) * w + 2 * j] = v;
                dst[(2 * i + 1) * w + 2 * j + 1] = v;
            }
        }
    }
    dx
}

/// Mean cross-entropy over rows of `logits` (`n x k`). Returns the loss and the
/// softmax probabilities.
pub(crate) fn cross_entropy(logits: &[f32], k: usize, labels: &[usize]) -> (f32, Vec<f32>) {
    let n = labels.len();
    let mut probs = vec![0.0f32; n * k];
    let mut total = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label] as f64;
        for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = ((v as f64 - lse).exp()) as f32;
        }
    }
    ((total / n as f64) as f32, probs)
}
