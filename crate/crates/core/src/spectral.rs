//! Centered 2D Fourier transforms and the normalized radial frequency field.
//!
//! Spectra are stored fft-shifted: the DC bin sits at `(height / 2, width / 2)`.
//! The forward transform is unnormalized; the inverse carries the `1 / (h * w)`
//! factor, so a constant image of value `c` maps to amplitude `h * w * c` at DC.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tape::{BackwardFn, Tape, Var};
use crate::tensor::Tensor;

/// One real-valued image channel in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImagePlane<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape {
                op: "ImagePlane::new",
                lhs: vec![height, width],
                rhs: vec![data.len()],
            });
        }
        check_finite(&data, "ImagePlane")?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![T::zero(); height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Amplitude and phase planes of a centered 2D DFT.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum<T> {
    height: usize,
    width: usize,
    amplitude: Vec<T>,
    phase: Vec<T>,
}

impl<T: Scalar> Spectrum<T> {
    pub fn new(height: usize, width: usize, amplitude: Vec<T>, phase: Vec<T>) -> Result<Self> {
        let n = height * width;
        if amplitude.len() != n || phase.len() != n {
            return Err(Error::Shape {
                op: "Spectrum::new",
                lhs: vec![height, width],
                rhs: vec![amplitude.len(), phase.len()],
            });
        }
        check_finite(&amplitude, "Spectrum amplitude")?;
        check_finite(&phase, "Spectrum phase")?;
        if let Some(i) = amplitude.iter().position(|&a| a < T::zero()) {
            return Err(invalid(format!("negative amplitude at bin {i}")));
        }
        Ok(Self {
            height,
            width,
            amplitude,
            phase,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn amplitude(&self) -> &[T] {
        &self.amplitude
    }

    pub fn phase(&self) -> &[T] {
        &self.phase
    }

    /// Same phase, new amplitude. Used to take filtered amplitudes back to image space.
    pub fn with_amplitude(&self, amplitude: Vec<T>) -> Result<Self> {
        Self::new(self.height, self.width, amplitude, self.phase.clone())
    }

    pub fn dc_index(&self) -> usize {
        (self.height / 2) * self.width + self.width / 2
    }
}

/// Normalized radial frequency distance of every shifted bin.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialField<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> RadialField<T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }

    pub fn center(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `D(u, v) = sqrt(X^2 + Y^2)` with `X = (u - c_col) / max(h, w)` and
/// `Y = (v - c_row) / max(h, w)`, center at `(h / 2, w / 2)`.
pub fn radial_field<T: Scalar>(height: usize, width: usize) -> Result<RadialField<T>> {
    if height < 2 || width < 2 {
        return Err(invalid(format!(
            "radial field needs at least 2x2 bins, got {height}x{width}"
        )));
    }
    let (c_row, c_col) = (height / 2, width / 2);
    let scale = T::from_usize_lossy(height.max(width));
    let mut values = Vec::with_capacity(height * width);
    for v in 0..height {
        let y = (T::from_usize_lossy(v) - T::from_usize_lossy(c_row)) / scale;
        for u in 0..width {
            let x = (T::from_usize_lossy(u) - T::from_usize_lossy(c_col)) / scale;
            values.push((x * x + y * y).sqrt());
        }
    }
    Ok(RadialField {
        height,
        width,
        values,
    })
}

/// Reusable forward/inverse plans for one image size.
#[derive(Clone)]
pub struct Fft2d<T: Scalar> {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Scalar> std::fmt::Debug for Fft2d<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2d({}x{})", self.height, self.width)
    }
}

impl<T: Scalar> Fft2d<T> {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(invalid(format!(
                "2D FFT needs at least 2x2 samples, got {height}x{width}"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// In-place unnormalized transform of a row-major, unshifted buffer.
    pub fn transform(&self, buf: &mut [Complex<T>], inverse: bool) {
        let (h, w) = (self.height, self.width);
        debug_assert_eq!(buf.len(), h * w);
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process(buf);
        let mut column = vec![Complex::new(T::zero(), T::zero()); h];
        for c in 0..w {
            for r in 0..h {
                column[r] = buf[r * w + c];
            }
            col.process(&mut column);
            for r in 0..h {
                buf[r * w + c] = column[r];
            }
        }
    }

    /// Centered complex spectrum of a real plane.
    pub fn forward_complex(&self, data: &[T]) -> Vec<Complex<T>> {
        let mut buf: Vec<Complex<T>> = data.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.transform(&mut buf, false);
        shift(&buf, self.height, self.width)
    }

    pub fn forward(&self, img: &ImagePlane<T>) -> Result<Spectrum<T>> {
        self.check_dims(img.height, img.width)?;
        check_finite(&img.data, "fft2d input")?;
        let centered = self.forward_complex(&img.data);
        let mut amplitude = Vec::with_capacity(centered.len());
        let mut phase = Vec::with_capacity(centered.len());
        for z in centered {
            amplitude.push(z.norm());
            phase.push(wrap_phase(z.arg()));
        }
        Ok(Spectrum {
            height: self.height,
            width: self.width,
            amplitude,
            phase,
        })
    }

    /// Real image from centered amplitude/phase planes, plus the L2 norm of the
    /// discarded imaginary part.
    pub fn synthesize(&self, amplitude: &[T], phase: &[T]) -> (Vec<T>, T) {
        let centered: Vec<Complex<T>> = amplitude
            .iter()
            .zip(phase)
            .map(|(&a, &p)| Complex::from_polar(a, p))
            .collect();
        self.inverse_centered(&centered)
    }

    pub fn inverse_centered(&self, centered: &[Complex<T>]) -> (Vec<T>, T) {
        let mut buf = unshift(centered, self.height, self.width);
        self.transform(&mut buf, true);
        let norm = T::one() / T::from_usize_lossy(self.height * self.width);
        let mut residue = T::zero();
        let real = buf
            .iter()
            .map(|z| {
                let im = z.im * norm;
                residue = residue + im * im;
                z.re * norm
            })
            .collect();
        (real, residue.sqrt())
    }

    pub fn inverse(&self, spec: &Spectrum<T>) -> Result<Reconstruction<T>> {
        self.check_dims(spec.height, spec.width)?;
        let (data, residue) = self.synthesize(&spec.amplitude, &spec.phase);
        Ok(Reconstruction {
            image: ImagePlane {
                height: self.height,
                width: self.width,
                data,
            },
            imaginary_residue: residue,
        })
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        if h != self.height || w != self.width {
            return Err(Error::Shape {
                op: "Fft2d",
                lhs: vec![self.height, self.width],
                rhs: vec![h, w],
            });
        }
        Ok(())
    }
}

/// Output of [`ifft2d`]: the real image and the norm of the imaginary part that
/// was dropped (non-zero when filtering broke conjugate symmetry).
#[derive(Debug, Clone)]
pub struct Reconstruction<T> {
    pub image: ImagePlane<T>,
    pub imaginary_residue: T,
}

pub fn fft2d<T: Scalar>(img: &ImagePlane<T>) -> Result<Spectrum<T>> {
    Fft2d::new(img.height, img.width)?.forward(img)
}

pub fn ifft2d<T: Scalar>(spec: &Spectrum<T>) -> Result<Reconstruction<T>> {
    Fft2d::new(spec.height, spec.width)?.inverse(spec)
}

/// Transforms each channel independently and combines them into one spectrum:
/// mean amplitude, circular mean of the phases.
pub fn channel_mean_spectrum<T: Scalar>(planes: &[ImagePlane<T>]) -> Result<Spectrum<T>> {
    let first = planes
        .first()
        .ok_or_else(|| invalid("no channels to transform"))?;
    let plan = Fft2d::new(first.height, first.width)?;
    if planes.len() == 1 {
        return plan.forward(first);
    }
    let n = first.height * first.width;
    let mut amp = vec![T::zero(); n];
    let mut phasor = vec![Complex::new(T::zero(), T::zero()); n];
    for p in planes {
        let s = plan.forward(p)?;
        for i in 0..n {
            amp[i] = amp[i] + s.amplitude[i];
            phasor[i] = phasor[i] + Complex::from_polar(T::one(), s.phase[i]);
        }
    }
    let k = T::from_usize_lossy(planes.len());
    Spectrum::new(
        first.height,
        first.width,
        amp.into_iter().map(|a| a / k).collect(),
        phasor.into_iter().map(|z| wrap_phase(z.arg())).collect(),
    )
}

/// Moves DC from `(0, 0)` to `(h / 2, w / 2)`.
pub fn shift<V: Copy>(buf: &[V], h: usize, w: usize) -> Vec<V> {
    let (ch, cw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(buf.len());
    for r in 0..h {
        let src_r = (r + h - ch) % h;
        for c in 0..w {
            out.push(buf[src_r * w + (c + w - cw) % w]);
        }
    }
    out
}

/// Inverse of [`shift`].
pub fn unshift<V: Copy>(buf: &[V], h: usize, w: usize) -> Vec<V> {
    let (ch, cw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(buf.len());
    for r in 0..h {
        let src_r = (r + ch) % h;
        for c in 0..w {
            out.push(buf[src_r * w + (c + cw) % w]);
        }
    }
    out
}

/// Maps `-pi` onto `pi` so phases live in `(-pi, pi]`.
#[inline]
pub fn wrap_phase<T: Scalar>(p: T) -> T {
    if p <= -T::PI() {
        T::PI()
    } else {
        p
    }
}

/// Mean of `values` inside `n_bins` equal-width radial rings over `[0, max D]`.
pub fn radial_profile<T: Scalar>(values: &[T], radial: &RadialField<T>, n_bins: usize) -> Vec<T> {
    let max_d = radial
        .values
        .iter()
        .fold(T::zero(), |m, &d| if d > m { d } else { m });
    let mut sums = vec![T::zero(); n_bins];
    let mut counts = vec![0usize; n_bins];
    for (&v, &d) in values.iter().zip(&radial.values) {
        let mut b = ((d / max_d) * T::from_usize_lossy(n_bins))
            .to_usize()
            .unwrap_or(0);
        if b >= n_bins {
            b = n_bins - 1;
        }
        sums[b] = sums[b] + v;
        counts[b] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| {
            if c == 0 {
                T::zero()
            } else {
                s / T::from_usize_lossy(c)
            }
        })
        .collect()
}

/// Differentiable `Re(IDFT(M e^{i phi}))` for centered magnitudes `[.., bins]`
/// under fixed phases of the same shape. The output keeps the input shape,
/// each row holding one row-major image.
///
/// Backward: `dM_k = Re(e^{i phi_k} conj(FFT(g)_k)) / (h w)` in centered order.
pub fn synthesize_var<T: Scalar>(tape: &Tape<T>, plan: &Fft2d<T>, magnitude: Var, phase: &Tensor<T>) -> Result<Var> {
    let shape = tape.shape(magnitude);
    let bins = plan.height * plan.width;
    if shape != phase.shape() || shape.last() != Some(&bins) {
        return Err(Error::Shape {
            op: "synthesize",
            lhs: shape,
            rhs: phase.shape().to_vec(),
        });
    }
    let rotors: Vec<Complex<T>> = phase
        .data()
        .iter()
        .map(|&p| Complex::from_polar(T::one(), p))
        .collect();
    let mut out = Vec::with_capacity(rotors.len());
    {
        let m = tape.value(magnitude);
        for (mag, rot) in m.data().chunks(bins).zip(rotors.chunks(bins)) {
            let centered: Vec<Complex<T>> = mag.iter().zip(rot).map(|(&a, &r)| r * a).collect();
            out.extend(plan.inverse_centered(&centered).0);
        }
    }
    let value = Tensor::new(shape, out)?;
    let plan = plan.clone();
    let backward: BackwardFn<T> = Box::new(move |ctx| {
        let norm = T::one() / T::from_usize_lossy(bins);
        let mut dm = Vec::with_capacity(ctx.grad.len());
        for (g, rot) in ctx.grad.chunks(bins).zip(rotors.chunks(bins)) {
            let gf = plan.forward_complex(g);
            dm.extend(gf.iter().zip(rot).map(|(z, r)| (*r * z.conj()).re * norm));
        }
        vec![Some(dm)]
    });
    Ok(tape.custom(&[magnitude], value, backward))
}

pub(crate) fn check_finite<T: Scalar>(data: &[T], context: &'static str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { context, index }),
        None => Ok(()),
    }
}
