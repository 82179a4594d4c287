//! Raw numeric kernels on flat buffers. Shapes are validated by the caller.

/// `[m,k] x [k,n] -> [m,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub(crate) fn new(x: &[usize], k: &[usize], stride: usize, padding: usize) -> Option<Self> {
        if x.len() != 3 || k.len() != 4 || k[1] != x[0] || stride == 0 {
            return None;
        }
        let (ph, pw) = (x[1] + 2 * padding, x[2] + 2 * padding);
        if k[2] > ph || k[3] > pw {
            return None;
        }
        Some(Self {
            c_in: x[0],
            h: x[1],
            w: x[2],
            c_out: k[0],
            kh: k[2],
            kw: k[3],
            stride,
            padding,
            oh: (ph - k[2]) / stride + 1,
            ow: (pw - k[3]) / stride + 1,
        })
    }

    /// Range of output positions `o` along one axis for which `o*s + kk - p`
    /// lands inside `0..extent`.
    #[inline]
    fn valid(&self, kk: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let p = self.padding;
        // o*s + kk >= p
        let lo = if kk >= p { 0 } else { (p - kk).div_ceil(s) };
        // o*s + kk - p <= extent - 1
        let hi_excl = if extent + p > kk {
            ((extent + p - kk - 1) / s + 1).min(out_extent)
        } else {
            0
        };
        (lo, hi_excl.max(lo))
    }

    #[inline]
    fn valid_y(&self, ky: usize) -> (usize, usize) {
        self.valid(ky, self.h, self.oh)
    }

    #[inline]
    fn valid_x(&self, kx: usize) -> (usize, usize) {
        self.valid(kx, self.w, self.ow)
    }
}

/// Patch matrix `[c_in*kh*kw, oh*ow]`; out-of-image taps stay zero.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.oh * g.ow;
    let mut cols = vec![0.0; g.c_in * g.kh * g.kw * n];
    for ci in 0..g.c_in {
        let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y0, y1) = g.valid_y(ky);
            for kx in 0..g.kw {
                let (x0, x1) = g.valid_x(kx);
                let row = &mut cols[((ci * g.kh + ky) * g.kw + kx) * n..][..n];
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let irow = &xin[iy * g.w..(iy + 1) * g.w];
                    let orow = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in x0..x1 {
                        orow[ox] = irow[ox * g.stride + kx - g.padding];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a patch matrix back onto an image; adjoint of [`im2col`].
fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.oh * g.ow;
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let xin = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y0, y1) = g.valid_y(ky);
            for kx in 0..g.kw {
                let (x0, x1) = g.valid_x(kx);
                let row = &cols[((ci * g.kh + ky) * g.kw + kx) * n..][..n];
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let orow = &row[oy * g.ow..(oy + 1) * g.ow];
                    let irow = &mut xin[iy * g.w..(iy + 1) * g.w];
                    for ox in x0..x1 {
                        irow[ox * g.stride + kx - g.padding] += orow[ox];
                    }
                }
            }
        }
    }
    x
}

fn patch_len(g: &ConvGeom) -> usize {
    g.c_in * g.kh * g.kw
}

pub(crate) fn conv2d(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    matmul(k, &cols, g.c_out, patch_len(g), g.oh * g.ow)
}

/// Adjoint of [`conv2d`] with respect to its input.
pub(crate) fn conv2d_input_grad(gout: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let r = patch_len(g);
    let mut kt = vec![0.0; r * g.c_out];
    for co in 0..g.c_out {
        for j in 0..r {
            kt[j * g.c_out + co] = k[co * r + j];
        }
    }
    let dcols = matmul(&kt, gout, r, g.c_out, g.oh * g.ow);
    col2im(&dcols, g)
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub(crate) fn conv2d_kernel_grad(x: &[f64], gout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.oh * g.ow;
    let r = patch_len(g);
    let cols = im2col(x, g);
    let mut dk = vec![0.0; g.c_out * r];
    for co in 0..g.c_out {
        let gy = &gout[co * n..(co + 1) * n];
        for j in 0..r {
            dk[co * r + j] = gy.iter().zip(&cols[j * n..(j + 1) * n]).map(|(a, b)| a * b).sum();
        }
    }
    dk
}
