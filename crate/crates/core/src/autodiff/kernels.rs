//! Dense kernels behind the tape ops. Convolutions are lowered to GEMM via
//! im2col with the column matrix laid out as `(C_in·K) × (B·L_out)`.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub len_out: usize,
}

impl ConvGeom {
    fn col_width(&self) -> usize {
        self.batch * self.len_out
    }

    /// Input position read by output position `lo` at tap `kk`, if inside the signal.
    #[inline]
    fn source(&self, lo: usize, kk: usize) -> Option<usize> {
        let pos = lo * self.stride + kk;
        if pos < self.padding || pos - self.padding >= self.len {
            None
        } else {
            Some(pos - self.padding)
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`, strides given as `(row, col)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs + 1;
    assert!(k == 0 || a.len() >= span(m, k, rsa, csa));
    assert!(k == 0 || b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let width = g.col_width();
    let mut cols = vec![0.0; g.c_in * g.k * width];
    for ci in 0..g.c_in {
        for kk in 0..g.k {
            let row = &mut cols[(ci * g.k + kk) * width..(ci * g.k + kk + 1) * width];
            for b in 0..g.batch {
                let src = &input[(b * g.c_in + ci) * g.len..(b * g.c_in + ci + 1) * g.len];
                let dst = &mut row[b * g.len_out..(b + 1) * g.len_out];
                for (lo, d) in dst.iter_mut().enumerate() {
                    if let Some(p) = g.source(lo, kk) {
                        *d = src[p];
                    }
                }
            }
        }
    }
    cols
}

/// Output in `[B, C_out, L_out]` layout.
pub(crate) fn conv_forward(cols: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let width = g.col_width();
    let ck = g.c_in * g.k;
    let mut out_t = vec![0.0; g.c_out * width];
    for (co, row) in out_t.chunks_exact_mut(width).enumerate() {
        row.fill(bias[co]);
    }
    gemm(g.c_out, ck, width, weight, (ck, 1), cols, (width, 1), &mut out_t, (width, 1), 1.0);
    from_channel_major(out_t, g)
}

fn from_channel_major(t: Vec<f64>, g: &ConvGeom) -> Vec<f64> {
    if g.batch == 1 {
        return t;
    }
    let width = g.col_width();
    let mut out = vec![0.0; t.len()];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let src = &t[co * width + b * g.len_out..co * width + (b + 1) * g.len_out];
            out[(b * g.c_out + co) * g.len_out..(b * g.c_out + co + 1) * g.len_out]
                .copy_from_slice(src);
        }
    }
    out
}

/// `[B, C_out, L_out]` to `C_out × (B·L_out)`.
pub(crate) fn to_channel_major(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    if g.batch == 1 {
        return x.to_vec();
    }
    let width = g.col_width();
    let mut t = vec![0.0; x.len()];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            t[co * width + b * g.len_out..co * width + (b + 1) * g.len_out].copy_from_slice(
                &x[(b * g.c_out + co) * g.len_out..(b * g.c_out + co + 1) * g.len_out],
            );
        }
    }
    t
}

pub(crate) fn conv_weight_grad(g_t: &[f64], cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let width = g.col_width();
    let ck = g.c_in * g.k;
    let mut gw = vec![0.0; g.c_out * ck];
    // dW[C_out × CK] = G[C_out × W] · colsᵀ[W × CK]
    gemm(g.c_out, width, ck, g_t, (width, 1), cols, (1, width), &mut gw, (ck, 1), 0.0);
    gw
}

pub(crate) fn conv_input_grad(g_t: &[f64], weight: &[f64], g: &ConvGeom) -> Vec<f64> {
    let width = g.col_width();
    let ck = g.c_in * g.k;
    let mut gcols = vec![0.0; ck * width];
    // dCols[CK × W] = Wᵀ[CK × C_out] · G[C_out × W]
    gemm(ck, g.c_out, width, weight, (1, ck), g_t, (width, 1), &mut gcols, (width, 1), 0.0);
    let mut gx = vec![0.0; g.batch * g.c_in * g.len];
    for ci in 0..g.c_in {
        for kk in 0..g.k {
            let row = &gcols[(ci * g.k + kk) * width..(ci * g.k + kk + 1) * width];
            for b in 0..g.batch {
                let dst = &mut gx[(b * g.c_in + ci) * g.len..(b * g.c_in + ci + 1) * g.len];
                for (lo, v) in row[b * g.len_out..(b + 1) * g.len_out].iter().enumerate() {
                    if let Some(p) = g.source(lo, kk) {
                        dst[p] += v;
                    }
                }
            }
        }
    }
    gx
}
