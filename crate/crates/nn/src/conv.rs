//! 2-D convolution over `[batch, channel, time, freq]` arrays, and its
//! transposed counterpart, lowered to GEMM through an im2col patch matrix.
//!
//! Time padding is either centred or entirely on the past side
//! (`causal_time`); frequency padding is symmetric, `dilation_f * (k_f - 1) / 2`
//! bins on each side. 1-D temporal convolutions are expressed with a
//! singleton frequency axis.

use crate::error::{dim_err, NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(k_t, k_f)`.
    pub kernel: (usize, usize),
    /// `(s_t, s_f)`.
    pub stride: (usize, usize),
    /// `(d_t, d_f)`.
    pub dilation: (usize, usize),
    pub causal_time: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            dilation: (1, 1),
            causal_time: false,
        }
    }

    /// A 1×1 convolution.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, (1, 1))
    }

    pub fn with_stride(mut self, s_t: usize, s_f: usize) -> Self {
        self.stride = (s_t, s_f);
        self
    }

    pub fn with_dilation(mut self, d_t: usize, d_f: usize) -> Self {
        self.dilation = (d_t, d_f);
        self
    }

    pub fn causal(mut self) -> Self {
        self.causal_time = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
            self.stride.0,
            self.stride.1,
            self.dilation.0,
            self.dilation.1,
        ];
        if dims.contains(&0) {
            return dim_err(format!("all convolution dimensions must be >= 1: {self:?}"));
        }
        Ok(())
    }

    /// Zero frames inserted before and after the time axis.
    pub fn time_padding(&self) -> (usize, usize) {
        let total = self.dilation.0 * (self.kernel.0 - 1);
        if self.causal_time {
            (total, 0)
        } else {
            let past = total / 2;
            (past, total - past)
        }
    }

    /// Zero bins inserted on each side of the frequency axis.
    pub fn freq_padding(&self) -> usize {
        self.dilation.1 * (self.kernel.1 - 1) / 2
    }

    pub fn out_time(&self, t: usize) -> usize {
        if t == 0 {
            0
        } else {
            (t - 1) / self.stride.0 + 1
        }
    }

    /// Output frequency extent, `None` when the kernel does not fit.
    pub fn out_freq(&self, f: usize) -> Option<usize> {
        let reach = self.dilation.1 * (self.kernel.1 - 1) + 1;
        let padded = f + 2 * self.freq_padding();
        (padded >= reach).then(|| (padded - reach) / self.stride.1 + 1)
    }

    /// Smallest frequency extent that [`out_freq`](Self::out_freq) maps onto `f_small`.
    pub fn transposed_out_freq(&self, f_small: usize) -> usize {
        let reach = self.dilation.1 * (self.kernel.1 - 1) + 1;
        ((f_small.max(1) - 1) * self.stride.1 + reach).saturating_sub(2 * self.freq_padding())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    pub fn transposed_weight_shape(&self) -> [usize; 4] {
        [self.in_channels, self.out_channels, self.kernel.0, self.kernel.1]
    }

    /// Weight plus bias scalar count.
    pub fn num_params(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel.0 * self.kernel.1 + self.out_channels
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1)
    }
}

/// Patch-matrix geometry relating a "wide" source plane to a "narrow"
/// destination grid. Row `(c, i, j)` and column `(td, fd)` of the patch matrix
/// hold `src[c, td * s_t + t_off[i], fd * s_f - p_f + j * d_f]`.
struct Patch {
    channels: usize,
    kt: usize,
    kf: usize,
    src_t: usize,
    src_f: usize,
    dst_t: usize,
    dst_f: usize,
    st: usize,
    sf: usize,
    df: usize,
    pf: usize,
    t_off: Vec<isize>,
}

impl Patch {
    fn rows(&self) -> usize {
        self.channels * self.kt * self.kf
    }

    fn cols(&self) -> usize {
        self.dst_t * self.dst_f
    }

    fn src_time(&self, td: usize, i: usize) -> Option<usize> {
        let ts = (td * self.st) as isize + self.t_off[i];
        (ts >= 0 && (ts as usize) < self.src_t).then_some(ts as usize)
    }

    /// Destination columns `fd` whose source bin is inside the plane, for tap `j`.
    fn freq_range(&self, j: usize) -> (usize, usize) {
        let shift = (j * self.df) as isize - self.pf as isize;
        let sf = self.sf as isize;
        // smallest fd with fd*sf + shift >= 0
        let lo = if shift >= 0 { 0 } else { ((-shift) + sf - 1) / sf };
        // largest fd with fd*sf + shift <= src_f - 1
        let last = self.src_f as isize - 1 - shift;
        let hi = if last < 0 { 0 } else { (last / sf + 1).min(self.dst_f as isize) };
        let lo = lo.min(self.dst_f as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    fn gather<T: Scalar>(&self, src: &[T], cols: &mut [T]) {
        let ncols = self.cols();
        for c in 0..self.channels {
            for i in 0..self.kt {
                for j in 0..self.kf {
                    let row = (c * self.kt + i) * self.kf + j;
                    let out = &mut cols[row * ncols..(row + 1) * ncols];
                    let (lo, hi) = self.freq_range(j);
                    let shift = j * self.df;
                    for td in 0..self.dst_t {
                        let seg = &mut out[td * self.dst_f..(td + 1) * self.dst_f];
                        let Some(ts) = self.src_time(td, i) else {
                            seg.fill(T::zero());
                            continue;
                        };
                        let plane = &src[(c * self.src_t + ts) * self.src_f..][..self.src_f];
                        seg[..lo].fill(T::zero());
                        seg[hi..].fill(T::zero());
                        if self.sf == 1 {
                            let s0 = lo + shift - self.pf;
                            seg[lo..hi].copy_from_slice(&plane[s0..s0 + (hi - lo)]);
                        } else {
                            for (fd, v) in seg.iter_mut().enumerate().take(hi).skip(lo) {
                                *v = plane[fd * self.sf + shift - self.pf];
                            }
                        }
                    }
                }
            }
        }
    }

    fn scatter_add<T: Scalar>(&self, cols: &[T], src: &mut [T]) {
        let ncols = self.cols();
        for c in 0..self.channels {
            for i in 0..self.kt {
                for j in 0..self.kf {
                    let row = (c * self.kt + i) * self.kf + j;
                    let inp = &cols[row * ncols..(row + 1) * ncols];
                    let (lo, hi) = self.freq_range(j);
                    let shift = j * self.df;
                    for td in 0..self.dst_t {
                        let Some(ts) = self.src_time(td, i) else {
                            continue;
                        };
                        let seg = &inp[td * self.dst_f..(td + 1) * self.dst_f];
                        let plane = &mut src[(c * self.src_t + ts) * self.src_f..][..self.src_f];
                        for fd in lo..hi {
                            let fs = fd * self.sf + shift - self.pf;
                            plane[fs] = plane[fs] + seg[fd];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return dim_err(format!(
                "bias shape {:?} does not match {channels} output channels",
                b.shape()
            ));
        }
    }
    Ok(())
}

fn add_bias<T: Scalar>(y: &mut [T], bias: Option<&Tensor<T>>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in y.chunks_mut(plane).zip(b.data()) {
            for v in chunk {
                *v = *v + bv;
            }
        }
    }
}

fn bias_grad<T: Scalar>(gy: &[T], channels: usize, plane: usize, batch: usize) -> Tensor<T> {
    let mut out = vec![0.0f64; channels];
    for b in 0..batch {
        for (c, acc) in out.iter_mut().enumerate() {
            let s = (b * channels + c) * plane;
            *acc += gy[s..s + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    Tensor::from_fn(&[channels], |c| T::of_f64(out[c]))
}

fn conv_patch(spec: &ConvSpec, t: usize, f: usize, to: usize, fo: usize) -> Patch {
    let (past, _) = spec.time_padding();
    Patch {
        channels: spec.in_channels,
        kt: spec.kernel.0,
        kf: spec.kernel.1,
        src_t: t,
        src_f: f,
        dst_t: to,
        dst_f: fo,
        st: spec.stride.0,
        sf: spec.stride.1,
        df: spec.dilation.1,
        pf: spec.freq_padding(),
        t_off: (0..spec.kernel.0)
            .map(|i| (i * spec.dilation.0) as isize - past as isize)
            .collect(),
    }
}

/// Output dims of a forward convolution, validating the input.
pub fn conv_output_dims<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec) -> Result<[usize; 4]> {
    spec.validate()?;
    let [b, c, t, f] = x.dims4()?;
    if c != spec.in_channels {
        return dim_err(format!(
            "conv expects {} input channels, got {c}",
            spec.in_channels
        ));
    }
    let fo = spec
        .out_freq(f)
        .ok_or_else(|| NnError::Dimension(format!("frequency extent {f} too small for {spec:?}")))?;
    Ok([b, spec.out_channels, spec.out_time(t), fo])
}

pub fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let [bsz, cout, to, fo] = conv_output_dims(x, spec)?;
    if w.shape() != spec.weight_shape() {
        return dim_err(format!(
            "conv weight shape {:?}, expected {:?}",
            w.shape(),
            spec.weight_shape()
        ));
    }
    check_bias(bias, cout)?;
    let [_, cin, t, f] = x.dims4()?;
    let patch = conv_patch(spec, t, f, to, fo);
    let (k, n) = (patch.rows(), patch.cols());
    let mut y = Tensor::zeros(&[bsz, cout, to, fo]);
    let mut cols = if spec.is_pointwise() { Vec::new() } else { vec![T::zero(); k * n] };
    for b in 0..bsz {
        let xb = &x.data()[b * cin * t * f..(b + 1) * cin * t * f];
        let rhs: &[T] = if spec.is_pointwise() {
            xb
        } else {
            patch.gather(xb, &mut cols);
            &cols
        };
        let yb = &mut y.data_mut()[b * cout * n..(b + 1) * cout * n];
        T::gemm(cout, k, n, w.data(), k, 1, rhs, n, 1, T::zero(), yb, n, 1);
        add_bias(yb, bias, n);
    }
    Ok(y)
}

pub struct ConvGrads<T> {
    pub x: Option<Tensor<T>>,
    pub w: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    spec: &ConvSpec,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let [bsz, cin, t, f] = x.dims4()?;
    let [_, cout, to, fo] = gy.dims4()?;
    let patch = conv_patch(spec, t, f, to, fo);
    let (k, n) = (patch.rows(), patch.cols());
    let mut gx = need.0.then(|| Tensor::zeros(x.shape()));
    let mut gw = need.1.then(|| Tensor::zeros(w.shape()));
    let mut cols = if spec.is_pointwise() { Vec::new() } else { vec![T::zero(); k * n] };
    for b in 0..bsz {
        let gyb = &gy.data()[b * cout * n..(b + 1) * cout * n];
        let xb = &x.data()[b * cin * t * f..(b + 1) * cin * t * f];
        if let Some(gw) = gw.as_mut() {
            let rhs: &[T] = if spec.is_pointwise() {
                xb
            } else {
                patch.gather(xb, &mut cols);
                &cols
            };
            T::gemm(cout, n, k, gyb, n, 1, rhs, 1, n, T::one(), gw.data_mut(), k, 1);
        }
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx.data_mut()[b * cin * t * f..(b + 1) * cin * t * f];
            if spec.is_pointwise() {
                T::gemm(k, cout, n, w.data(), 1, k, gyb, n, 1, T::zero(), gxb, n, 1);
            } else {
                T::gemm(k, cout, n, w.data(), 1, k, gyb, n, 1, T::zero(), &mut cols, n, 1);
                patch.scatter_add(&cols, gxb);
            }
        }
    }
    Ok(ConvGrads {
        x: gx,
        w: gw,
        bias: need.2.then(|| bias_grad(gy.data(), cout, n, bsz)),
    })
}

fn transposed_patch(spec: &ConvSpec, t: usize, f_small: usize, f_big: usize) -> Patch {
    let (past, _) = spec.time_padding();
    let kt = spec.kernel.0;
    let dt = spec.dilation.0;
    let t_off = (0..kt)
        .map(|i| {
            if spec.causal_time {
                // output frame t + (k_t-1-i)*d_t receives input frame t: never earlier
                ((kt - 1 - i) * dt) as isize
            } else {
                (i * dt) as isize - past as isize
            }
        })
        .collect();
    Patch {
        channels: spec.out_channels,
        kt,
        kf: spec.kernel.1,
        src_t: t,
        src_f: f_big,
        dst_t: t,
        dst_f: f_small,
        st: 1,
        sf: spec.stride.1,
        df: spec.dilation.1,
        pf: spec.freq_padding(),
        t_off,
    }
}

/// Output dims of a transposed convolution producing `out_freq` bins.
pub fn transposed_output_dims<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    out_freq: usize,
) -> Result<[usize; 4]> {
    spec.validate()?;
    let [b, c, t, f] = x.dims4()?;
    if c != spec.in_channels {
        return dim_err(format!(
            "transposed conv expects {} input channels, got {c}",
            spec.in_channels
        ));
    }
    if spec.stride.0 != 1 {
        return dim_err("transposed conv supports time stride 1 only");
    }
    if spec.out_freq(out_freq) != Some(f) {
        return dim_err(format!(
            "transposed conv cannot map {f} bins onto {out_freq} with {spec:?}"
        ));
    }
    Ok([b, spec.out_channels, t, out_freq])
}

pub fn transposed_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
    out_freq: usize,
) -> Result<Tensor<T>> {
    let [bsz, cout, t, fb] = transposed_output_dims(x, spec, out_freq)?;
    if w.shape() != spec.transposed_weight_shape() {
        return dim_err(format!(
            "transposed weight shape {:?}, expected {:?}",
            w.shape(),
            spec.transposed_weight_shape()
        ));
    }
    check_bias(bias, cout)?;
    let [_, cin, _, fs] = x.dims4()?;
    let patch = transposed_patch(spec, t, fs, fb);
    let (k, n) = (patch.rows(), patch.cols());
    let mut y = Tensor::zeros(&[bsz, cout, t, fb]);
    let mut cols = vec![T::zero(); k * n];
    for b in 0..bsz {
        let xb = &x.data()[b * cin * n..(b + 1) * cin * n];
        T::gemm(k, cin, n, w.data(), 1, k, xb, n, 1, T::zero(), &mut cols, n, 1);
        let yb = &mut y.data_mut()[b * cout * t * fb..(b + 1) * cout * t * fb];
        patch.scatter_add(&cols, yb);
        add_bias(yb, bias, t * fb);
    }
    Ok(y)
}

pub fn transposed_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    spec: &ConvSpec,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let [bsz, cin, t, fs] = x.dims4()?;
    let [_, cout, _, fb] = gy.dims4()?;
    let patch = transposed_patch(spec, t, fs, fb);
    let (k, n) = (patch.rows(), patch.cols());
    let mut gx = need.0.then(|| Tensor::zeros(x.shape()));
    let mut gw = need.1.then(|| Tensor::zeros(w.shape()));
    let mut cols = vec![T::zero(); k * n];
    for b in 0..bsz {
        if gx.is_none() && gw.is_none() {
            break;
        }
        let gyb = &gy.data()[b * cout * t * fb..(b + 1) * cout * t * fb];
        patch.gather(gyb, &mut cols);
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx.data_mut()[b * cin * n..(b + 1) * cin * n];
            T::gemm(cin, k, n, w.data(), k, 1, &cols, n, 1, T::zero(), gxb, n, 1);
        }
        if let Some(gw) = gw.as_mut() {
            let xb = &x.data()[b * cin * n..(b + 1) * cin * n];
            T::gemm(cin, n, k, xb, n, 1, &cols, 1, n, T::one(), gw.data_mut(), k, 1);
        }
    }
    Ok(ConvGrads {
        x: gx,
        w: gw,
        bias: need.2.then(|| bias_grad(gy.data(), cout, t * fb, bsz)),
    })
}
