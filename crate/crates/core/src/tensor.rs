//! Dense `f64` fields, same-size 2-D convolution with both adjoints, and
//! pointwise activations.
//!
//! All kernels run sequentially with a fixed summation order, so identical
//! inputs always give bitwise-identical outputs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A `channels × height × width` field stored row-major in (channel, row, column) order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureField {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "field dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "{} values for a {channels}x{height}x{width} field",
                values.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    /// Builds a field by evaluating `f(channel, row, col)` at every entry.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for r in 0..height {
                for col in 0..width {
                    values.push(f(c, r, col));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            values,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    fn index(&self, c: usize, r: usize, col: usize) -> usize {
        debug_assert!(c < self.channels && r < self.height && col < self.width);
        (c * self.height + r) * self.width + col
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.values[self.index(c, r, col)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, r: usize, col: usize, value: f64) {
        let i = self.index(c, r, col);
        self.values[i] = value;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &FeatureField) -> bool {
        self.shape() == other.shape()
    }

    fn check_same_shape(&self, other: &FeatureField, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &FeatureField) -> Result<()> {
        self.check_same_shape(x, "axpy")?;
        for (s, v) in self.values.iter_mut().zip(&x.values) {
            *s += a * v;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        for v in &mut self.values {
            *v *= a;
        }
    }

    pub fn scaled(&self, a: f64) -> FeatureField {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    /// Pointwise product.
    pub fn hadamard(&self, other: &FeatureField) -> Result<FeatureField> {
        self.check_same_shape(other, "hadamard")?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .collect();
        Ok(FeatureField {
            channels: self.channels,
            height: self.height,
            width: self.width,
            values,
        })
    }

    /// Euclidean inner product over all entries, summed in storage order.
    pub fn inner(&self, other: &FeatureField) -> Result<f64> {
        self.check_same_shape(other, "inner")?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Writes the field in FTF1 format: `"FTF1"`, three little-endian `u64`
    /// dims (C, H, W), then C·H·W little-endian `f64` values.
    pub fn write_ftf1<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"FTF1")?;
        for d in [self.channels, self.height, self.width] {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_ftf1<R: Read>(mut r: R) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: "<stream>".into(),
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"FTF1" {
            return Err(bad("bad magic"));
        }
        let mut dims = [0usize; 3];
        let mut buf = [0u8; 8];
        for d in &mut dims {
            r.read_exact(&mut buf)?;
            *d = usize::try_from(u64::from_le_bytes(buf)).map_err(|_| bad("dimension too large"))?;
        }
        let [c, h, w] = dims;
        let n = c
            .checked_mul(h)
            .and_then(|x| x.checked_mul(w))
            .ok_or_else(|| bad("dimension overflow"))?;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes"));
        }
        FeatureField::from_vec(c, h, w, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_ftf1(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_ftf1(BufReader::new(File::open(path)?)).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}

/// Convolution weights `out_channels × in_channels × kernel_height × kernel_width`.
///
/// Acts as the block matrix whose block-rows are output channels and whose
/// block-columns are input channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernelStack {
    out_channels: usize,
    in_channels: usize,
    kernel_height: usize,
    kernel_width: usize,
    weights: Vec<f64>,
}

impl ConvKernelStack {
    pub fn zeros(out_channels: usize, in_channels: usize, kernel_height: usize, kernel_width: usize) -> Self {
        assert!(
            kernel_height % 2 == 1 && kernel_width % 2 == 1,
            "kernel sizes must be odd"
        );
        Self {
            out_channels,
            in_channels,
            kernel_height,
            kernel_width,
            weights: vec![0.0; out_channels * in_channels * kernel_height * kernel_width],
        }
    }

    pub fn from_vec(
        out_channels: usize,
        in_channels: usize,
        kernel_height: usize,
        kernel_width: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::Dimension("kernel channel counts must be positive".into()));
        }
        if kernel_height.is_multiple_of(2) || kernel_width.is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "kernel sizes must be odd, got {kernel_height}x{kernel_width}"
            )));
        }
        if weights.len() != out_channels * in_channels * kernel_height * kernel_width {
            return Err(Error::Dimension(format!(
                "{} weights for a {out_channels}x{in_channels}x{kernel_height}x{kernel_width} stack",
                weights.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_height,
            kernel_width,
            weights,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_height(&self) -> usize {
        self.kernel_height
    }

    pub fn kernel_width(&self) -> usize {
        self.kernel_width
    }

    /// `(out, in, kh, kw)`
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (
            self.out_channels,
            self.in_channels,
            self.kernel_height,
            self.kernel_width,
        )
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_channels + i) * self.kernel_height + ky) * self.kernel_width + kx]
    }

    #[inline]
    pub fn set(&mut self, o: usize, i: usize, ky: usize, kx: usize, value: f64) {
        let idx = ((o * self.in_channels + i) * self.kernel_height + ky) * self.kernel_width + kx;
        self.weights[idx] = value;
    }

    fn taps(&self, o: usize, i: usize) -> &[f64] {
        let n = self.kernel_height * self.kernel_width;
        let start = (o * self.in_channels + i) * n;
        &self.weights[start..start + n]
    }

    /// Inner product of the flattened weights.
    pub fn inner(&self, other: &ConvKernelStack) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "kernel inner: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self.weights.iter().zip(&other.weights).map(|(a, b)| a * b).sum())
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &ConvKernelStack) -> Result<()> {
        if self.shape() != x.shape() {
            return Err(Error::Dimension(format!(
                "kernel axpy: {:?} vs {:?}",
                self.shape(),
                x.shape()
            )));
        }
        for (s, v) in self.weights.iter_mut().zip(&x.weights) {
            *s += a * v;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|v| v.is_finite())
    }

    /// Channel-swapped, spatially flipped copy: `t[i,o,ky,kx] = w[o,i,kh-1-ky,kw-1-kx]`.
    pub fn transposed(&self) -> ConvKernelStack {
        let (oc, ic, kh, kw) = self.shape();
        let mut t = ConvKernelStack::zeros(ic, oc, kh, kw);
        for o in 0..oc {
            for i in 0..ic {
                for ky in 0..kh {
                    for kx in 0..kw {
                        t.set(i, o, kh - 1 - ky, kw - 1 - kx, self.get(o, i, ky, kx));
                    }
                }
            }
        }
        t
    }

    /// Persists the stack as an FTF1 tensor of shape `(out·in, kh, kw)`.
    pub fn to_field(&self) -> FeatureField {
        FeatureField {
            channels: self.out_channels * self.in_channels,
            height: self.kernel_height,
            width: self.kernel_width,
            values: self.weights.clone(),
        }
    }

    pub fn from_field(out_channels: usize, in_channels: usize, field: FeatureField) -> Result<Self> {
        if field.channels != out_channels * in_channels {
            return Err(Error::Dimension(format!(
                "kernel file has {} planes, expected {out_channels}x{in_channels}",
                field.channels
            )));
        }
        let (kh, kw) = (field.height, field.width);
        Self::from_vec(out_channels, in_channels, kh, kw, field.values)
    }
}

/// Pointwise nonlinearity used inside each residual step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// ReLU'(0) is taken as 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Parameter(format!("unknown activation '{other}'"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn activate(x: &FeatureField, f: Activation) -> FeatureField {
    let mut out = x.clone();
    out.values.iter_mut().for_each(|v| *v = f.value(*v));
    out
}

pub fn activate_deriv(x: &FeatureField, f: Activation) -> FeatureField {
    let mut out = x.clone();
    out.values.iter_mut().for_each(|v| *v = f.derivative(*v));
    out
}

// The hot loops are compiled twice: once for the baseline target and once with
// AVX2 enabled, chosen at runtime. Neither path contracts into FMA and lane
// order is explicit, so both produce identical bits.
macro_rules! multiversion {
    ($name:ident => $generic:ident($($arg:ident: $ty:ty),*)) => {
        fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide($($arg: $ty),*) {
                    $generic($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: AVX2 support was just detected.
                    unsafe { wide($($arg),*) };
                    return;
                }
            }
            $generic($($arg),*)
        }
    };
}

multiversion!(correlate_all_dispatch => correlate_all(padded: &PaddedPlanes, k: &ConvKernelStack, out: &mut FeatureField));
multiversion!(weight_dots_dispatch => weight_dots(cotangent: &FeatureField, padded: &PaddedPlanes, grad: &mut ConvKernelStack));

/// Zero-padded copy of every plane with a `ph`-row and `pw`-column halo.
struct PaddedPlanes {
    values: Vec<f64>,
    padded_width: usize,
    plane_len: usize,
}

impl PaddedPlanes {
    fn new(field: &FeatureField, ph: usize, pw: usize) -> Self {
        let (c, h, w) = field.shape();
        let padded_width = w + 2 * pw;
        let plane_len = (h + 2 * ph) * padded_width;
        let mut values = vec![0.0; c * plane_len];
        for ch in 0..c {
            let src = field.plane(ch);
            for r in 0..h {
                let start = ch * plane_len + (r + ph) * padded_width + pw;
                values[start..start + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
        }
        Self {
            values,
            padded_width,
            plane_len,
        }
    }

    #[inline]
    fn row(&self, channel: usize, padded_row: usize) -> &[f64] {
        let start = channel * self.plane_len + padded_row * self.padded_width;
        &self.values[start..start + self.padded_width]
    }
}

/// `dst[c] += Σ_kx taps[kx] · src[c + kx]`
#[inline(always)]
fn correlate_row(dst: &mut [f64], taps: &[f64], src: &[f64]) {
    let w = dst.len();
    match *taps {
        [t0] => {
            for (d, s) in dst.iter_mut().zip(&src[..w]) {
                *d += t0 * s;
            }
        }
        [t0, t1, t2] => {
            let (s0, s1, s2) = (&src[..w], &src[1..w + 1], &src[2..w + 2]);
            for c in 0..w {
                dst[c] += t0 * s0[c] + t1 * s1[c] + t2 * s2[c];
            }
        }
        _ => {
            for (kx, &t) in taps.iter().enumerate() {
                for (d, s) in dst.iter_mut().zip(&src[kx..kx + w]) {
                    *d += t * s;
                }
            }
        }
    }
}

/// `acc[kx] += Σ_c a[c] · src[c + kx]`, each tap with four fixed-order lanes.
#[inline(always)]
fn correlate_dot(acc: &mut [[f64; 4]], a: &[f64], src: &[f64]) {
    let w = a.len();
    for (kx, lanes) in acc.iter_mut().enumerate() {
        let b = &src[kx..kx + w];
        let mut l = *lanes;
        let mut ca = a.chunks_exact(4);
        let mut cb = b.chunks_exact(4);
        for (x, y) in (&mut ca).zip(&mut cb) {
            l[0] += x[0] * y[0];
            l[1] += x[1] * y[1];
            l[2] += x[2] * y[2];
            l[3] += x[3] * y[3];
        }
        for (k, (x, y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
            l[k] += x * y;
        }
        *lanes = l;
    }
}

/// Same-size cross-correlation with zero padding:
/// `out[o,r,c] = Σ_i Σ_ky Σ_kx w[o,i,ky,kx] · in[i, r+ky-ph, c+kx-pw]`.
pub fn conv2d(input: &FeatureField, k: &ConvKernelStack) -> Result<FeatureField> {
    if input.channels != k.in_channels {
        return Err(Error::Dimension(format!(
            "conv2d: input has {} channels, kernel expects {}",
            input.channels, k.in_channels
        )));
    }
    let padded = PaddedPlanes::new(input, k.kernel_height / 2, k.kernel_width / 2);
    let mut out = FeatureField::zeros(k.out_channels, input.height, input.width);
    correlate_all_dispatch(&padded, k, &mut out);
    Ok(out)
}

#[inline(always)]
fn correlate_all(padded: &PaddedPlanes, k: &ConvKernelStack, out: &mut FeatureField) {
    let (h, w) = (out.height, out.width);
    let (kh, kw) = (k.kernel_height, k.kernel_width);
    for o in 0..k.out_channels {
        let out_plane = out.plane_mut(o);
        for i in 0..k.in_channels {
            let taps = k.taps(o, i);
            for r in 0..h {
                let out_row = &mut out_plane[r * w..(r + 1) * w];
                for ky in 0..kh {
                    correlate_row(out_row, &taps[ky * kw..(ky + 1) * kw], padded.row(i, r + ky));
                }
            }
        }
    }
}

/// Applies the transpose of `v ↦ conv2d(v, k)` to `cotangent`.
///
/// With odd kernels and symmetric zero padding the transpose is itself a
/// same-size correlation with the channel-swapped, spatially flipped kernel.
pub fn conv2d_adjoint_input(cotangent: &FeatureField, k: &ConvKernelStack) -> Result<FeatureField> {
    if cotangent.channels != k.out_channels {
        return Err(Error::Dimension(format!(
            "conv2d_adjoint_input: cotangent has {} channels, kernel produces {}",
            cotangent.channels, k.out_channels
        )));
    }
    conv2d(cotangent, &k.transposed())
}

/// Gradient of `K ↦ ⟨conv2d(input, K), cotangent⟩` for a kernel of the given
/// `(out, in, kh, kw)` shape.
pub fn conv2d_adjoint_weights(
    cotangent: &FeatureField,
    input: &FeatureField,
    shape: (usize, usize, usize, usize),
) -> Result<ConvKernelStack> {
    let (oc, ic, kh, kw) = shape;
    if cotangent.channels != oc || input.channels != ic {
        return Err(Error::Dimension(format!(
            "conv2d_adjoint_weights: cotangent {} / input {} channels vs kernel {oc}x{ic}",
            cotangent.channels, input.channels
        )));
    }
    if cotangent.height != input.height || cotangent.width != input.width {
        return Err(Error::Dimension(format!(
            "conv2d_adjoint_weights: cotangent {:?} vs input {:?}",
            cotangent.shape(),
            input.shape()
        )));
    }
    let padded = PaddedPlanes::new(input, kh / 2, kw / 2);
    let mut grad = ConvKernelStack::zeros(oc, ic, kh, kw);
    weight_dots_dispatch(cotangent, &padded, &mut grad);
    Ok(grad)
}

#[inline(always)]
fn weight_dots(cotangent: &FeatureField, padded: &PaddedPlanes, grad: &mut ConvKernelStack) {
    let (oc, ic, kh, kw) = grad.shape();
    let (h, w) = (cotangent.height, cotangent.width);
    let mut acc = vec![[0.0f64; 4]; kh * kw];
    for o in 0..oc {
        let cot_plane = cotangent.plane(o);
        for i in 0..ic {
            acc.iter_mut().for_each(|a| *a = [0.0; 4]);
            for r in 0..h {
                let cot_row = &cot_plane[r * w..(r + 1) * w];
                for ky in 0..kh {
                    correlate_dot(&mut acc[ky * kw..(ky + 1) * kw], cot_row, padded.row(i, r + ky));
                }
            }
            for (tap, a) in acc.iter().enumerate() {
                grad.set(o, i, tap / kw, tap % kw, (a[0] + a[1]) + (a[2] + a[3]));
            }
        }
    }
}
