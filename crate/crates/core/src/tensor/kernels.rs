//! Slice-level numeric kernels behind the tape operations.

use super::Float;

/// Row-major matrix view: `rows × cols`, optionally read transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `out = a·b + beta·out`, with `out` row-major `m × n`.
pub fn matmul<T: Float>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], beta: T) {
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    let (m, k, rsa, csa) = a.logical();
    let (k2, n, rsb, csb) = b.logical();
    assert_eq!(k, k2, "matmul inner dimensions");
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.iter_mut() {
            *v = *v * beta;
        }
        return;
    }
    // SAFETY: lengths were checked above against the logical shapes and strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a same-padded, stride-1 convolution on one H×W×C image.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub f: usize,
}

impl ConvGeom {
    fn radius(&self) -> usize {
        self.k / 2
    }

    fn pixels(&self) -> usize {
        self.h * self.w
    }

    /// Row pitch of the zero-padded image.
    fn padded_width(&self) -> usize {
        self.w + 2 * self.radius()
    }

    /// Rows of the padded-width output grid (junk columns at the end of each row).
    fn grid_rows(&self) -> usize {
        self.h * self.padded_width()
    }

    /// Pixel rows in the padded input, with slack so every shifted window
    /// of `grid_rows` rows stays in bounds.
    fn padded_rows(&self) -> usize {
        let r = self.radius();
        (self.h + 2 * r) * self.padded_width() + 2 * r
    }

    /// Row offset of kernel tap (ky, kx) inside the padded input.
    fn tap_offset(&self, ky: usize, kx: usize) -> usize {
        ky * self.padded_width() + kx
    }
}

/// Copies an H×W×C image into the interior of a zero border of width k/2.
fn pad_input<T: Float>(input: &[T], g: ConvGeom) -> Vec<T> {
    let (r, wp) = (g.radius(), g.padded_width());
    let mut out = vec![T::zero(); g.padded_rows() * g.c];
    for y in 0..g.h {
        let dst = ((y + r) * wp + r) * g.c;
        out[dst..dst + g.w * g.c].copy_from_slice(&input[y * g.w * g.c..(y + 1) * g.w * g.c]);
    }
    out
}

/// Spreads H×W×F rows onto the padded-width grid, zeros in the junk columns.
fn to_grid<T: Float>(x: &[T], g: ConvGeom, channels: usize) -> Vec<T> {
    let wp = g.padded_width();
    let row = g.w * channels;
    let mut out = vec![T::zero(); g.grid_rows() * channels];
    for y in 0..g.h {
        out[y * wp * channels..][..row].copy_from_slice(&x[y * row..(y + 1) * row]);
    }
    out
}

fn from_grid<T: Float>(grid: &[T], g: ConvGeom, channels: usize, border: usize) -> Vec<T> {
    let wp = g.padded_width();
    let mut out = Vec::with_capacity(g.pixels() * channels);
    for y in 0..g.h {
        let start = ((y + border) * wp + border) * channels;
        out.extend_from_slice(&grid[start..start + g.w * channels]);
    }
    out
}

/// Same-padded convolution as one GEMM per kernel tap: on a zero-padded
/// image, tap (ky, kx) is a constant row shift, so every tap multiplies a
/// contiguous window of pixel rows by its C×F filter slice.
pub fn conv2d_forward<T: Float>(input: &[T], filters: &[T], bias: &[T], g: ConvGeom) -> Vec<T> {
    if g.k == 1 {
        let mut out = Vec::with_capacity(g.pixels() * g.f);
        for _ in 0..g.pixels() {
            out.extend_from_slice(bias);
        }
        matmul(Mat::new(input, g.pixels(), g.c), Mat::new(filters, g.c, g.f), &mut out, T::one());
        return out;
    }
    let padded = pad_input(input, g);
    let m = g.grid_rows();
    let slice = g.c * g.f;
    let mut grid = Vec::with_capacity(m * g.f);
    for _ in 0..m {
        grid.extend_from_slice(bias);
    }
    for (ky, kx) in taps(g.k) {
        let off = g.tap_offset(ky, kx) * g.c;
        let tap = (ky * g.k + kx) * slice;
        matmul(
            Mat::new(&padded[off..off + m * g.c], m, g.c),
            Mat::new(&filters[tap..tap + slice], g.c, g.f),
            &mut grid,
            T::one(),
        );
    }
    from_grid(&grid, g, g.f, 0)
}

fn taps(k: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..k).flat_map(move |ky| (0..k).map(move |kx| (ky, kx)))
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub filters: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Float>(
    input: &[T],
    filters: &[T],
    dout: &[T],
    g: ConvGeom,
    want: [bool; 3],
) -> ConvGrads<T> {
    let bias = want[2].then(|| {
        let mut d = vec![T::zero(); g.f];
        for row in dout.chunks_exact(g.f) {
            for (acc, &v) in d.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
        d
    });
    if g.k == 1 {
        let p = g.pixels();
        let dout_m = Mat::new(dout, p, g.f);
        let input_grad = want[0].then(|| {
            let mut d = vec![T::zero(); p * g.c];
            matmul(dout_m, Mat::new(filters, g.c, g.f).t(), &mut d, T::zero());
            d
        });
        let filters_grad = want[1].then(|| {
            let mut d = vec![T::zero(); g.c * g.f];
            matmul(Mat::new(input, p, g.c).t(), dout_m, &mut d, T::zero());
            d
        });
        return ConvGrads {
            input: input_grad,
            filters: filters_grad,
            bias,
        };
    }
    let m = g.grid_rows();
    let slice = g.c * g.f;
    let dgrid = to_grid(dout, g, g.f);
    let dgrid_m = Mat::new(&dgrid, m, g.f);
    let input_grad = want[0].then(|| {
        let mut dpad = vec![T::zero(); g.padded_rows() * g.c];
        for (ky, kx) in taps(g.k) {
            let off = g.tap_offset(ky, kx) * g.c;
            let tap = (ky * g.k + kx) * slice;
            matmul(
                dgrid_m,
                Mat::new(&filters[tap..tap + slice], g.c, g.f).t(),
                &mut dpad[off..off + m * g.c],
                T::one(),
            );
        }
        from_grid(&dpad, g, g.c, g.radius())
    });
    let filters_grad = want[1].then(|| {
        let padded = pad_input(input, g);
        let mut d = vec![T::zero(); g.k * g.k * slice];
        for (ky, kx) in taps(g.k) {
            let off = g.tap_offset(ky, kx) * g.c;
            let tap = (ky * g.k + kx) * slice;
            matmul(
                Mat::new(&padded[off..off + m * g.c], m, g.c).t(),
                dgrid_m,
                &mut d[tap..tap + slice],
                T::zero(),
            );
        }
        d
    });
    ConvGrads {
        input: input_grad,
        filters: filters_grad,
        bias,
    }
}

/// Index of the source element for every destination element of depth-to-space.
///
/// Output pixel (i·r+di, j·r+dj, c) reads input channel c·r² + di·r + dj at (i, j).
pub fn depth_to_space_index(h: usize, w: usize, cin: usize, r: usize) -> Vec<usize> {
    let cout = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut idx = Vec::with_capacity(oh * ow * cout);
    for oy in 0..oh {
        for ox in 0..ow {
            let (i, di) = (oy / r, oy % r);
            let (j, dj) = (ox / r, ox % r);
            for c in 0..cout {
                idx.push((i * w + j) * cin + c * r * r + di * r + dj);
            }
        }
    }
    idx
}

/// Gram matrix Fᵀ·F / (H·W·C) of a P×C feature matrix.
pub fn gram<T: Float>(features: &[T], pixels: usize, channels: usize) -> Vec<T> {
    let mut g = vec![T::zero(); channels * channels];
    let f = Mat::new(features, pixels, channels);
    matmul(f.t(), f, &mut g, T::zero());
    let norm = T::from_usize(pixels * channels).unwrap_or_else(T::one);
    if pixels * channels > 0 {
        for v in g.iter_mut() {
            *v = *v / norm;
        }
    }
    g
}

/// dF = F·(dG + dGᵀ) / (H·W·C).
pub fn gram_backward<T: Float>(features: &[T], dgram: &[T], pixels: usize, channels: usize) -> Vec<T> {
    let norm = T::from_usize((pixels * channels).max(1)).unwrap_or_else(T::one);
    let mut sym = vec![T::zero(); channels * channels];
    for a in 0..channels {
        for b in 0..channels {
            sym[a * channels + b] = (dgram[a * channels + b] + dgram[b * channels + a]) / norm;
        }
    }
    let mut d = vec![T::zero(); pixels * channels];
    matmul(
        Mat::new(features, pixels, channels),
        Mat::new(&sym, channels, channels),
        &mut d,
        T::zero(),
    );
    d
}

pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
