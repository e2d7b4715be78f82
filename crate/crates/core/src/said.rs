//! Idempotent decoupling chain and the correlation-based decoupling loss.
//!
//! The same filter is applied three times: `A -> (di, ds)`, `di -> (di1, ds1)`,
//! `di1 -> (di2, ds2)`. The loss
//!
//! ```text
//! lambda * (r(ds, ds1) + r(ds, ds2))^2 / (max((r(di, di1) r(di, di2))^k, 0) + eps)
//! ```
//!
//! is small when the specific parts decorrelate and the invariant parts stay
//! put under re-filtering. Only amplitudes are filtered; phase passes through.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::filter::{free_features, free_gain, soft_gain, AdaptiveFilter, FilterBank, FreeFilterParams, FreeVars};
use crate::scalar::Scalar;
use crate::spectral::{RadialField, Spectrum};
use crate::tape::{BackwardFn, Tape, Var};
use crate::tensor::Tensor;

/// What the correlations are computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PccInput {
    /// `ln(1 + a)` per bin.
    #[default]
    LogAmplitude,
    Amplitude,
}

impl PccInput {
    fn map<T: Scalar>(self, v: T) -> T {
        match self {
            PccInput::LogAmplitude => v.ln_1p(),
            PccInput::Amplitude => v,
        }
    }

    fn map_var<T: Scalar>(self, tape: &Tape<T>, v: Var) -> Var {
        match self {
            PccInput::LogAmplitude => tape.ln_1p(v),
            PccInput::Amplitude => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoupleLossCfg<T> {
    k: u32,
    epsilon: T,
    lambda_dcp: T,
    input: PccInput,
}

impl<T: Scalar> DecoupleLossCfg<T> {
    pub fn new(k: u32, epsilon: T, lambda_dcp: T) -> Result<Self> {
        if k < 1 {
            return Err(invalid("k must be >= 1"));
        }
        if !(epsilon > T::zero()) || !epsilon.is_finite() {
            return Err(invalid(format!("epsilon must be > 0, got {epsilon}")));
        }
        if !(lambda_dcp >= T::zero()) || !lambda_dcp.is_finite() {
            return Err(invalid(format!("lambda_dcp must be >= 0, got {lambda_dcp}")));
        }
        Ok(Self {
            k,
            epsilon,
            lambda_dcp,
            input: PccInput::LogAmplitude,
        })
    }

    pub fn with_input(mut self, input: PccInput) -> Self {
        self.input = input;
        self
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    pub fn lambda_dcp(&self) -> T {
        self.lambda_dcp
    }

    pub fn input(&self) -> PccInput {
        self.input
    }
}

impl<T: Scalar> Default for DecoupleLossCfg<T> {
    fn default() -> Self {
        Self::new(2, T::lit(1e-8), T::lit(50.0)).expect("defaults are valid")
    }
}

/// The six amplitude planes of the chain, the filter that produced them and
/// the untouched phase.
#[derive(Debug, Clone)]
pub struct SaidOutput<T> {
    pub height: usize,
    pub width: usize,
    pub di: Vec<T>,
    pub ds: Vec<T>,
    pub di1: Vec<T>,
    pub ds1: Vec<T>,
    pub di2: Vec<T>,
    pub ds2: Vec<T>,
    pub filter: AdaptiveFilter<T>,
    pub phase: Vec<T>,
}

pub const SAID_LAYOUT: [&str; 6] = ["di", "ds", "di1", "ds1", "di2", "ds2"];

impl<T: Scalar> SaidOutput<T> {
    /// Planes in [`SAID_LAYOUT`] order.
    pub fn planes(&self) -> [&[T]; 6] {
        [&self.di, &self.ds, &self.di1, &self.ds1, &self.di2, &self.ds2]
    }

    /// Largest bin-wise violation of `di + ds = A`, `di1 + ds1 = di`, `di2 + ds2 = di1`.
    pub fn conservation_error(&self, amplitude: &[T]) -> T {
        let stage = |whole: &[T], a: &[T], b: &[T]| {
            whole
                .iter()
                .zip(a.iter().zip(b))
                .fold(T::zero(), |m, (&w, (&x, &y))| m.max((x + y - w).abs()))
        };
        stage(amplitude, &self.di, &self.ds)
            .max(stage(&self.di, &self.di1, &self.ds1))
            .max(stage(&self.di1, &self.di2, &self.ds2))
    }
}

pub fn decouple<T: Scalar>(spec: &Spectrum<T>, filter: &AdaptiveFilter<T>) -> Result<SaidOutput<T>> {
    if spec.height() != filter.height() || spec.width() != filter.width() {
        return Err(Error::Shape {
            op: "decouple",
            lhs: vec![spec.height(), spec.width()],
            rhs: vec![filter.height(), filter.width()],
        });
    }
    let a = spec.amplitude();
    let di = filter.apply(a);
    let ds = filter.apply_complement(a);
    let di1 = filter.apply(&di);
    let ds1 = filter.apply_complement(&di);
    let di2 = filter.apply(&di1);
    let ds2 = filter.apply_complement(&di1);
    Ok(SaidOutput {
        height: spec.height(),
        width: spec.width(),
        di,
        ds,
        di1,
        ds1,
        di2,
        ds2,
        filter: filter.clone(),
        phase: spec.phase().to_vec(),
    })
}

/// A correlation and whether it was forced to 0 by a constant input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pcc<T> {
    pub value: T,
    pub degenerate: bool,
}

struct Moments<T> {
    xc: Vec<T>,
    yc: Vec<T>,
    sxx: T,
    syy: T,
    sxy: T,
    degenerate: bool,
}

fn moments<T: Scalar>(x: &[T], y: &[T]) -> Moments<T> {
    let n = T::from_usize_lossy(x.len());
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let xc: Vec<T> = x.iter().map(|&v| v - mx).collect();
    let yc: Vec<T> = y.iter().map(|&v| v - my).collect();
    let sxx: T = xc.iter().map(|&v| v * v).sum();
    let syy: T = yc.iter().map(|&v| v * v).sum();
    let sxy: T = xc.iter().zip(&yc).map(|(&a, &b)| a * b).sum();
    // A spread below a few ulps of the data scale is rounding noise.
    let floor = |v: &[T], s: T| {
        let scale = v.iter().fold(T::zero(), |m, &a| m.max(a.abs()));
        let tol = T::lit(4.0) * T::epsilon() * scale;
        s / n <= tol * tol
    };
    let degenerate = floor(x, sxx) || floor(y, syy);
    Moments {
        xc,
        yc,
        sxx,
        syy,
        sxy,
        degenerate,
    }
}

/// Pearson correlation with population statistics.
pub fn pcc<T: Scalar>(x: &[T], y: &[T]) -> Result<Pcc<T>> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape {
            op: "pcc",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    let m = moments(x, y);
    if m.degenerate {
        return Ok(Pcc {
            value: T::zero(),
            degenerate: true,
        });
    }
    let r = m.sxy / (m.sxx * m.syy).sqrt();
    Ok(Pcc {
        value: r.max(-T::one()).min(T::one()),
        degenerate: false,
    })
}

/// Row-wise correlation of `x, y: [.., n]`, shape `[..]`, with analytic backward
/// `dr/dx = yc / sqrt(sxx syy) - r xc / sxx`. Degenerate rows give 0 and no gradient.
pub fn pcc_var<T: Scalar>(tape: &Tape<T>, x: Var, y: Var) -> Result<Var> {
    let (sx, sy) = (tape.shape(x), tape.shape(y));
    if sx != sy || sx.is_empty() || sx[sx.len() - 1] < 2 {
        return Err(Error::Shape {
            op: "pcc",
            lhs: sx,
            rhs: sy,
        });
    }
    let n = sx[sx.len() - 1];
    let mut rs = Vec::new();
    let mut rows = Vec::new();
    {
        let (xv, yv) = (tape.value(x), tape.value(y));
        for (a, b) in xv.data().chunks(n).zip(yv.data().chunks(n)) {
            let m = moments(a, b);
            let r = if m.degenerate {
                T::zero()
            } else {
                m.sxy / (m.sxx * m.syy).sqrt()
            };
            rs.push(r);
            rows.push(m);
        }
    }
    let value = Tensor::new(sx[..sx.len() - 1].to_vec(), rs.clone())?;
    let backward: BackwardFn<T> = Box::new(move |ctx| {
        let mut gx = Vec::with_capacity(n * rows.len());
        let mut gy = Vec::with_capacity(n * rows.len());
        for ((m, &r), &g) in rows.iter().zip(&rs).zip(ctx.grad) {
            if m.degenerate {
                gx.extend(std::iter::repeat_n(T::zero(), n));
                gy.extend(std::iter::repeat_n(T::zero(), n));
                continue;
            }
            let inv = T::one() / (m.sxx * m.syy).sqrt();
            for i in 0..n {
                gx.push(g * (m.yc[i] * inv - r * m.xc[i] / m.sxx));
                gy.push(g * (m.xc[i] * inv - r * m.yc[i] / m.syy));
            }
        }
        vec![ctx.needs[0].then_some(gx), ctx.needs[1].then_some(gy)]
    });
    Ok(tape.custom(&[x, y], value, backward))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PccStats<T> {
    pub pcc_ds_ds1: T,
    pub pcc_ds_ds2: T,
    pub pcc_di_di1: T,
    pub pcc_di_di2: T,
}

/// Correlations of one chain and whether any of them was degenerate.
pub fn pcc_stats<T: Scalar>(out: &SaidOutput<T>, input: PccInput) -> Result<(PccStats<T>, bool)> {
    let m = |v: &[T]| v.iter().map(|&a| input.map(a)).collect::<Vec<T>>();
    let (di, ds, di1, ds1, di2, ds2) = (m(&out.di), m(&out.ds), m(&out.di1), m(&out.ds1), m(&out.di2), m(&out.ds2));
    let a = pcc(&ds, &ds1)?;
    let b = pcc(&ds, &ds2)?;
    let c = pcc(&di, &di1)?;
    let d = pcc(&di, &di2)?;
    Ok((
        PccStats {
            pcc_ds_ds1: a.value,
            pcc_ds_ds2: b.value,
            pcc_di_di1: c.value,
            pcc_di_di2: d.value,
        },
        a.degenerate || b.degenerate || c.degenerate || d.degenerate,
    ))
}

/// Scalar loss from four correlations. The denominator is floored at `eps`.
pub fn loss_from_stats<T: Scalar>(s: &PccStats<T>, cfg: &DecoupleLossCfg<T>) -> T {
    let num = s.pcc_ds_ds1 + s.pcc_ds_ds2;
    let raw = (s.pcc_di_di1 * s.pcc_di_di2).powi(cfg.k as i32);
    if raw < T::zero() {
        log::warn!("decoupling denominator {raw} < 0 clamped to eps");
    }
    cfg.lambda_dcp * num * num / (raw.max(T::zero()) + cfg.epsilon)
}

pub fn decouple_loss<T: Scalar>(out: &SaidOutput<T>, cfg: &DecoupleLossCfg<T>) -> Result<T> {
    Ok(loss_from_stats(&pcc_stats(out, cfg.input)?.0, cfg))
}

/// Tape-side chain outputs.
#[derive(Debug, Clone, Copy)]
pub struct ChainVars {
    pub di: Var,
    pub ds: Var,
    pub di1: Var,
    pub ds1: Var,
    pub di2: Var,
    pub ds2: Var,
}

/// Differentiable chain for amplitudes `[.., bins]` and gains `h_inv`
/// broadcastable to them.
pub fn decouple_var<T: Scalar>(tape: &Tape<T>, amplitude: Var, h_inv: Var) -> Result<ChainVars> {
    let h_spe = tape.rsub_scalar(T::one(), h_inv);
    let di = tape.mul(amplitude, h_inv)?;
    let ds = tape.mul(amplitude, h_spe)?;
    let di1 = tape.mul(di, h_inv)?;
    let ds1 = tape.mul(di, h_spe)?;
    let di2 = tape.mul(di1, h_inv)?;
    let ds2 = tape.mul(di1, h_spe)?;
    Ok(ChainVars {
        di,
        ds,
        di1,
        ds1,
        di2,
        ds2,
    })
}

/// Batch-mean decoupling loss (already scaled by `lambda_dcp`) of a chain
/// whose rows are independent spectra.
pub fn decouple_loss_var<T: Scalar>(tape: &Tape<T>, c: &ChainVars, cfg: &DecoupleLossCfg<T>) -> Result<Var> {
    let m = |v| cfg.input.map_var(tape, v);
    let (di, ds) = (m(c.di), m(c.ds));
    let r_ds1 = pcc_var(tape, ds, m(c.ds1))?;
    let r_ds2 = pcc_var(tape, ds, m(c.ds2))?;
    let r_di1 = pcc_var(tape, di, m(c.di1))?;
    let r_di2 = pcc_var(tape, di, m(c.di2))?;
    let num = tape.square(tape.add(r_ds1, r_ds2)?);
    let raw = tape.powi(tape.mul(r_di1, r_di2)?, cfg.k as i32);
    if tape.value(raw).data().iter().any(|&v| v < T::zero()) {
        log::warn!("decoupling denominator < 0 clamped to eps");
    }
    let den = tape.add_scalar(tape.clamp_min(raw, T::zero()), cfg.epsilon);
    let ratio = tape.div(num, den)?;
    Ok(tape.scale(tape.mean(ratio), cfg.lambda_dcp))
}

/// Where a filter's trainable parameters come from.
#[derive(Debug, Clone, Copy)]
pub enum FilterSource<'a, T> {
    Hard(&'a AdaptiveFilter<T>),
    Soft {
        bank: &'a FilterBank<T>,
        weights: &'a [T],
    },
    Free {
        radial: &'a RadialField<T>,
        params: &'a FreeFilterParams<T>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T> {
    pub loss: T,
    /// Soft: one entry per weight. Free: `w1, b1, w2, b2` flattened. Hard: empty.
    pub grad: Vec<T>,
}

/// Loss of one spectrum and its gradient with respect to the filter parameters.
pub fn decouple_loss_grad<T: Scalar>(
    spec: &Spectrum<T>,
    source: FilterSource<'_, T>,
    cfg: &DecoupleLossCfg<T>,
) -> Result<LossGrad<T>> {
    let bins = spec.height() * spec.width();
    let tape = Tape::new();
    let amp = tape.constant(Tensor::new(vec![1, bins], spec.amplitude().to_vec())?);
    let (h, params): (Var, Vec<Var>) = match source {
        FilterSource::Hard(f) => (tape.constant(Tensor::new(vec![1, bins], f.h_inv().to_vec())?), vec![]),
        FilterSource::Soft { bank, weights } => {
            let bank_m = tape.constant(bank.normalized_matrix());
            let w = tape.leaf(&Tensor::param(vec![1, weights.len()], weights.to_vec())?);
            (soft_gain(&tape, bank_m, w)?, vec![w])
        }
        FilterSource::Free { radial, params } => {
            let feats = tape.constant(free_features(radial, spec.amplitude())?);
            let v = FreeVars {
                w1: tape.leaf(&trainable(&params.w1)?),
                b1: tape.leaf(&trainable(&params.b1)?),
                w2: tape.leaf(&trainable(&params.w2)?),
                b2: tape.leaf(&trainable(&params.b2)?),
            };
            let h = free_gain(&tape, feats, v)?;
            (tape.reshape(h, &[1, bins])?, vec![v.w1, v.b1, v.w2, v.b2])
        }
    };
    if tape.shape(h).last() != Some(&bins) {
        return Err(Error::Shape {
            op: "decouple_loss_grad",
            lhs: vec![bins],
            rhs: tape.shape(h),
        });
    }
    let chain = decouple_var(&tape, amp, h)?;
    let loss = decouple_loss_var(&tape, &chain, cfg)?;
    let value = tape.item(loss);
    let grads = tape.backward(loss)?;
    let mut grad = Vec::new();
    for p in params {
        match grads.get(p) {
            Some(g) => grad.extend_from_slice(g),
            None => grad.extend(std::iter::repeat_n(T::zero(), tape.value(p).numel())),
        }
    }
    Ok(LossGrad { loss: value, grad })
}

fn trainable<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    Tensor::param(t.shape().to_vec(), t.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{combine_soft, make_bank, make_free, make_hard};
    use crate::gradcheck::{central_difference, max_rel_error};
    use crate::spectral::{fft2d, radial_field, ImagePlane};

    fn spectrum(h: usize, w: usize, seed: u64) -> Spectrum<f64> {
        let mut s = seed;
        let img = ImagePlane::from_fn(h, w, |r, c| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let noise = (s >> 11) as f64 / (1u64 << 53) as f64;
            0.5 + 0.3 * ((r as f64) * 0.7).sin() * ((c as f64) * 0.4).cos() + 0.2 * noise
        });
        fft2d(&img).unwrap()
    }

    #[test]
    fn pcc_fixtures() {
        assert!((pcc(&[1.0f64, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap().value - 1.0).abs() < 1e-15);
        assert!((pcc(&[1.0f64, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().value + 1.0).abs() < 1e-15);
        assert!((pcc(&[1.0f64, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap().value - 0.8).abs() < 1e-12);
        let flat = pcc(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(flat.value, 0.0);
        assert!(flat.degenerate);
        assert!(pcc(&[1.0], &[1.0]).is_err());
        assert!(pcc(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn loss_fixtures() {
        let cfg = DecoupleLossCfg::<f64>::new(2, 1e-8, 1.0).unwrap();
        let ones = PccStats {
            pcc_ds_ds1: 1.0,
            pcc_ds_ds2: 1.0,
            pcc_di_di1: 1.0,
            pcc_di_di2: 1.0,
        };
        assert!((loss_from_stats(&ones, &cfg) - 4.0 / (1.0f64 + 1e-8)).abs() < 1e-12);
        let zero_num = PccStats {
            pcc_ds_ds1: 0.0,
            pcc_ds_ds2: 0.0,
            ..ones
        };
        for k in 1..5 {
            let c = DecoupleLossCfg::new(k, 1e-8, 1.0).unwrap();
            assert_eq!(loss_from_stats(&zero_num, &c), 0.0);
        }
        let negative = PccStats {
            pcc_di_di1: -0.5,
            pcc_di_di2: 0.5,
            ..ones
        };
        let odd = DecoupleLossCfg::new(3, 1e-8, 1.0).unwrap();
        assert!((loss_from_stats(&negative, &odd) - 4.0f64 / 1e-8).abs() < 1e-3);
        assert!(DecoupleLossCfg::new(0, 1e-8, 1.0).is_err());
        assert!(DecoupleLossCfg::<f64>::new(2, 0.0, 1.0).is_err());
        assert!(DecoupleLossCfg::<f64>::new(2, 1e-8, -1.0).is_err());
    }

    #[test]
    fn chain_conservation_and_masks() {
        let spec = spectrum(16, 16, 1);
        let r = radial_field::<f64>(16, 16).unwrap();
        let bank = make_bank(&r, 6).unwrap();
        let f = combine_soft(&bank, &[0.2, 0.9, 0.4, 0.1, 0.7, 0.3]).unwrap();
        let out = decouple(&spec, &f).unwrap();
        assert!(out.conservation_error(spec.amplitude()) < 1e-12);

        let pass = AdaptiveFilter::all_pass(16, 16);
        let out = decouple(&spec, &pass).unwrap();
        assert_eq!(out.di, spec.amplitude());
        assert_eq!(out.di1, out.di);
        assert_eq!(out.di2, out.di);
        assert!(out.ds.iter().all(|&v| v == 0.0));
        let (stats, degenerate) = pcc_stats(&out, PccInput::LogAmplitude).unwrap();
        assert!(degenerate);
        assert_eq!(loss_from_stats(&stats, &DecoupleLossCfg::default()), 0.0);

        let stop = AdaptiveFilter::from_invariant_gain(16, 16, vec![0.0; 256], crate::filter::Provenance::Fixed).unwrap();
        let out = decouple(&spec, &stop).unwrap();
        assert!(out.di.iter().all(|&v| v == 0.0));
        assert_eq!(out.ds, spec.amplitude());

        let mask = AdaptiveFilter::binary_mask(&r, |d| d < 0.2);
        let out = decouple(&spec, &mask).unwrap();
        let direct: Vec<f64> = spec
            .amplitude()
            .iter()
            .zip(r.values())
            .map(|(&a, &d)| if d < 0.2 { a } else { 0.0 })
            .collect();
        assert_eq!(out.di, direct);
        assert_eq!(out.di1, out.di);
        assert_eq!(out.di2, out.di1);

        assert!(decouple(&spec, &AdaptiveFilter::all_pass(8, 8)).is_err());
    }

    #[test]
    fn tape_loss_matches_eager() {
        let spec = spectrum(12, 12, 2);
        let r = radial_field::<f64>(12, 12).unwrap();
        let hard = make_hard(&r, 0.1).unwrap();
        let cfg = DecoupleLossCfg::default();
        let eager = decouple_loss(&decouple(&spec, &hard).unwrap(), &cfg).unwrap();
        let lg = decouple_loss_grad(&spec, FilterSource::Hard(&hard), &cfg).unwrap();
        assert!((eager - lg.loss).abs() <= 1e-12 * eager.abs().max(1.0));
        assert!(lg.grad.is_empty());
    }

    #[test]
    fn pcc_var_gradient() {
        let x: Vec<f64> = (0..14).map(|i| (i as f64 * 1.3).sin() + 0.1 * i as f64).collect();
        let y: Vec<f64> = (0..14).map(|i| (i as f64 * 0.6).cos()).collect();
        let f = |v: &[f64]| {
            let tape = Tape::new();
            let a = tape.leaf(&Tensor::param(vec![2, 7], v[..14].to_vec()).unwrap());
            let b = tape.leaf(&Tensor::param(vec![2, 7], v[14..].to_vec()).unwrap());
            let r = pcc_var(&tape, a, b).unwrap();
            let w = tape.constant(Tensor::from_vec(vec![0.7, -1.9]));
            let l = tape.sum(tape.mul(r, w).unwrap());
            let g = tape.backward(l).unwrap();
            let mut grad = g.get(a).unwrap().to_vec();
            grad.extend_from_slice(g.get(b).unwrap());
            (tape.item(l), grad)
        };
        let v: Vec<f64> = x.iter().chain(&y).copied().collect();
        let numeric = central_difference(|p| f(p).0, &v, 1e-5);
        assert!(max_rel_error(&f(&v).1, &numeric) < 1e-6);
        // Eager and tape agree.
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 7], x.clone()).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 7], y.clone()).unwrap());
        let r = pcc_var(&tape, a, b).unwrap();
        let eager = pcc(&x[..7], &y[..7]).unwrap().value;
        assert!((tape.value(r).data()[0] - eager).abs() < 1e-14);
    }

    #[test]
    fn soft_weight_gradient_matches_finite_differences() {
        let spec = spectrum(16, 16, 3);
        let r = radial_field::<f64>(16, 16).unwrap();
        let bank = make_bank(&r, 5).unwrap();
        let cfg = DecoupleLossCfg::<f64>::new(2, 1e-8, 1.0).unwrap();
        let w0 = vec![0.15, 0.3, 0.22, 0.18, 0.26];
        let lg = decouple_loss_grad(&spec, FilterSource::Soft { bank: &bank, weights: &w0 }, &cfg).unwrap();
        let numeric = central_difference(
            |w| {
                let f = combine_soft(&bank, w).unwrap();
                decouple_loss(&decouple(&spec, &f).unwrap(), &cfg).unwrap()
            },
            &w0,
            1e-4,
        );
        assert!(max_rel_error(&lg.grad, &numeric) < 1e-4, "{:?} vs {numeric:?}", lg.grad);
    }

    #[test]
    fn free_param_gradient_matches_finite_differences() {
        let spec = spectrum(8, 8, 4);
        let r = radial_field::<f64>(8, 8).unwrap();
        let hidden = 3;
        let flat: Vec<f64> = (0..4 * hidden + 1).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.15).collect();
        let p = FreeFilterParams::from_flat(hidden, &flat).unwrap();
        let cfg = DecoupleLossCfg::<f64>::new(2, 1e-8, 1.0).unwrap();
        let lg = decouple_loss_grad(&spec, FilterSource::Free { radial: &r, params: &p }, &cfg).unwrap();
        let numeric = central_difference(
            |v| {
                let q = FreeFilterParams::from_flat(hidden, v).unwrap();
                let f = make_free(&r, spec.amplitude(), &q).unwrap();
                decouple_loss(&decouple(&spec, &f).unwrap(), &cfg).unwrap()
            },
            &flat,
            1e-4,
        );
        assert!(max_rel_error(&lg.grad, &numeric) < 1e-4);
    }
}
