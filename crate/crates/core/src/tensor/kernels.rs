// Forward and backward kernels for the structured tape operations.
// All buffers are row-major; batched 1-D signals use the [n, channels, length] layout.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding: output length is `(len - k) / stride + 1`.
    Valid,
    /// Zero padding of `k - 1` split as `(k - 1) / 2` on the left, the rest on the right.
    Same,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub out_len: usize,
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input.
    pub fn new(
        n: usize,
        c_in: usize,
        len: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: Padding,
    ) -> Option<Self> {
        let (pad_left, pad_total) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => ((k - 1) / 2, k - 1),
        };
        let padded = len + pad_total;
        if k == 0 || stride == 0 || k > padded {
            return None;
        }
        Some(Self {
            n,
            c_in,
            len,
            c_out,
            k,
            stride,
            pad_left,
            out_len: (padded - k) / stride + 1,
        })
    }

    // Range of kernel taps j with 0 <= t*stride + j - pad_left < len.
    #[inline]
    fn taps(&self, t: usize) -> (usize, usize, isize) {
        let origin = (t * self.stride) as isize - self.pad_left as isize;
        let lo = (-origin).max(0) as usize;
        let hi = ((self.len as isize - origin).min(self.k as isize)).max(0) as usize;
        (lo, hi.max(lo), origin)
    }
}

pub(crate) fn conv1d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.c_out * g.out_len];
    for s in 0..g.n {
        let xs = &x[s * g.c_in * g.len..(s + 1) * g.c_in * g.len];
        for o in 0..g.c_out {
            let row = &mut out[(s * g.c_out + o) * g.out_len..(s * g.c_out + o + 1) * g.out_len];
            if let Some(b) = b {
                row.fill(b[o]);
            }
            for c in 0..g.c_in {
                let wk = &w[(o * g.c_in + c) * g.k..(o * g.c_in + c + 1) * g.k];
                let xc = &xs[c * g.len..(c + 1) * g.len];
                for (t, acc) in row.iter_mut().enumerate() {
                    let (lo, hi, origin) = g.taps(t);
                    let mut sum = 0.0;
                    for j in lo..hi {
                        sum += wk[j] * xc[(origin + j as isize) as usize];
                    }
                    *acc += sum;
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)` for upstream gradient `gy`.
pub(crate) fn conv1d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.c_out];
    for s in 0..g.n {
        let xs = &x[s * g.c_in * g.len..(s + 1) * g.c_in * g.len];
        let dxs = &mut dx[s * g.c_in * g.len..(s + 1) * g.c_in * g.len];
        for o in 0..g.c_out {
            let grow = &gy[(s * g.c_out + o) * g.out_len..(s * g.c_out + o + 1) * g.out_len];
            db[o] += grow.iter().sum::<f64>();
            for c in 0..g.c_in {
                let base = (o * g.c_in + c) * g.k;
                let xc = &xs[c * g.len..(c + 1) * g.len];
                let dxc = &mut dxs[c * g.len..(c + 1) * g.len];
                for (t, &gv) in grow.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    let (lo, hi, origin) = g.taps(t);
                    for j in lo..hi {
                        let pos = (origin + j as isize) as usize;
                        dw[base + j] += gv * xc[pos];
                        dxc[pos] += gv * w[base + j];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Non-overlapping max pooling over the last axis. Returns values and flat argmax indices.
pub(crate) fn maxpool_forward(rows: usize, len: usize, width: usize, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let out_len = len / width;
    let mut out = Vec::with_capacity(rows * out_len);
    let mut arg = Vec::with_capacity(rows * out_len);
    for r in 0..rows {
        for t in 0..out_len {
            let start = r * len + t * width;
            let mut best = start;
            for i in start + 1..start + width {
                if x[i] > x[best] {
                    best = i;
                }
            }
            out.push(x[best]);
            arg.push(best);
        }
    }
    (out, arg)
}

pub(crate) fn upsample_forward(rows: usize, len: usize, factor: usize, x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * len * factor);
    for r in 0..rows {
        for &v in &x[r * len..(r + 1) * len] {
            out.extend(std::iter::repeat_n(v, factor));
        }
    }
    out
}

pub(crate) fn upsample_backward(rows: usize, len: usize, factor: usize, gy: &[f64]) -> Vec<f64> {
    gy.chunks(factor)
        .take(rows * len)
        .map(|c| c.iter().sum())
        .collect()
}

/// `[n, ca, len] ++ [n, cb, len] -> [n, ca + cb, len]`.
pub(crate) fn concat_forward(n: usize, a_block: usize, b_block: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for s in 0..n {
        out.extend_from_slice(&a[s * a_block..(s + 1) * a_block]);
        out.extend_from_slice(&b[s * b_block..(s + 1) * b_block]);
    }
    out
}

pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        let orow = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[kk * p..(kk + 1) * p]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[n×k]ᵀ · b[n×p] -> [k×p]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * p];
    for i in 0..n {
        let brow = &b[i * p..(i + 1) * p];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[kk * p..(kk + 1) * p].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[n×p] · b[k×p]ᵀ -> [n×k]`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], n: usize, p: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let arow = &a[i * p..(i + 1) * p];
        for kk in 0..k {
            out[i * k + kk] = arow.iter().zip(&b[kk * p..(kk + 1) * p]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub(crate) fn sq_distances(e: &[f64], c: &[f64], n: usize, l: usize, m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * l);
    for i in 0..n {
        let ei = &e[i * m..(i + 1) * m];
        for k in 0..l {
            out.push(
                ei.iter()
                    .zip(&c[k * m..(k + 1) * m])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum(),
            );
        }
    }
    out
}

pub(crate) fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}
