//! Radial spectral filters: the fixed Gaussian (hard), the weighted
//! difference-of-Gaussians bank (soft) and the per-bin parametric filter (free).
//!
//! Every constructor yields an [`AdaptiveFilter`] whose domain-specific gain is
//! computed as `1 - h_inv` from the domain-invariant gain, bin by bin.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::spectral::RadialField;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassKind {
    LowPass,
    HighPass,
}

/// Radial Gaussian gain `exp(-D^2 / 2 sigma^2)` or its complement.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFilter<T> {
    sigma_h: T,
    kind: PassKind,
    response: Vec<T>,
}

impl<T: Scalar> GaussianFilter<T> {
    pub fn new(radial: &RadialField<T>, sigma_h: T, kind: PassKind) -> Result<Self> {
        if !(sigma_h > T::zero()) {
            return Err(invalid(format!("sigma_h must be > 0, got {sigma_h}")));
        }
        let two_s2 = T::two() * sigma_h * sigma_h;
        let response = radial
            .values()
            .iter()
            .map(|&d| {
                let low = (-(d * d) / two_s2).exp();
                match kind {
                    PassKind::LowPass => low,
                    PassKind::HighPass => T::one() - low,
                }
            })
            .collect();
        Ok(Self {
            sigma_h,
            kind,
            response,
        })
    }

    pub fn sigma_h(&self) -> T {
        self.sigma_h
    }

    pub fn kind(&self) -> PassKind {
        self.kind
    }

    pub fn response(&self) -> &[T] {
        &self.response
    }
}

/// `N` difference-of-Gaussians band-pass gains with `delta_f = 0.5 / (N + 1)`,
/// `sigma_n = n delta_f` and `sigma~_n = (n + 1) delta_f`:
/// `G_n(D) = exp(-D^2 / 2 sigma~_n^2) - exp(-D^2 / 2 sigma_n^2)`.
#[derive(Debug, Clone)]
pub struct FilterBank<T> {
    n_filters: usize,
    delta_f: T,
    responses: Vec<Vec<T>>,
    peak_normalized: Vec<Vec<T>>,
    radial: RadialField<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankMetadata {
    pub n_filters: usize,
    pub delta_f: f64,
    /// `[sigma_n, sigma~_n]` for `n = 1..=N`.
    pub sigma_list: Vec<[f64; 2]>,
}

pub fn make_bank<T: Scalar>(radial: &RadialField<T>, n_filters: usize) -> Result<FilterBank<T>> {
    if n_filters == 0 {
        return Err(invalid("filter bank needs at least one filter"));
    }
    let delta_f = T::half() / T::from_usize_lossy(n_filters + 1);
    let mut responses = Vec::with_capacity(n_filters);
    let mut peak_normalized = Vec::with_capacity(n_filters);
    for n in 1..=n_filters {
        let (inner, outer) = bank_sigmas(delta_f, n);
        let g: Vec<T> = radial
            .values()
            .iter()
            .map(|&d| dog(d, inner, outer))
            .collect();
        let peak = g.iter().fold(T::zero(), |m, &v| m.max(v));
        let norm = if peak > T::zero() {
            g.iter().map(|&v| v / peak).collect()
        } else {
            vec![T::zero(); g.len()]
        };
        responses.push(g);
        peak_normalized.push(norm);
    }
    Ok(FilterBank {
        n_filters,
        delta_f,
        responses,
        peak_normalized,
        radial: radial.clone(),
    })
}

/// `(sigma_n, sigma~_n)`.
pub fn bank_sigmas<T: Scalar>(delta_f: T, n: usize) -> (T, T) {
    (
        T::from_usize_lossy(n) * delta_f,
        T::from_usize_lossy(n + 1) * delta_f,
    )
}

/// One DoG band at radial distance `d`.
pub fn dog<T: Scalar>(d: T, sigma: T, sigma_wide: T) -> T {
    let d2 = d * d;
    (-d2 / (T::two() * sigma_wide * sigma_wide)).exp() - (-d2 / (T::two() * sigma * sigma)).exp()
}

impl<T: Scalar> FilterBank<T> {
    pub fn n_filters(&self) -> usize {
        self.n_filters
    }

    pub fn delta_f(&self) -> T {
        self.delta_f
    }

    pub fn radial(&self) -> &RadialField<T> {
        &self.radial
    }

    pub fn response(&self, n: usize) -> &[T] {
        &self.responses[n]
    }

    pub fn responses(&self) -> &[Vec<T>] {
        &self.responses
    }

    /// `G_n / max(G_n)` over the field.
    pub fn peak_normalized(&self, n: usize) -> &[T] {
        &self.peak_normalized[n]
    }

    /// Closed form of `sum_n G_n(D)`: `exp(-2 D^2) - exp(-D^2 / 2 delta_f^2)`.
    pub fn telescoped(&self, d: T) -> T {
        let d2 = d * d;
        (-T::two() * d2).exp() - (-d2 / (T::two() * self.delta_f * self.delta_f)).exp()
    }

    /// `[N, bins]` matrix of peak-normalized responses.
    pub fn normalized_matrix(&self) -> Tensor<T> {
        let bins = self.radial.len();
        let data = self.peak_normalized.iter().flatten().copied().collect();
        Tensor::new(vec![self.n_filters, bins], data).expect("bank matrix shape")
    }

    pub fn metadata(&self) -> BankMetadata {
        BankMetadata {
            n_filters: self.n_filters,
            delta_f: self.delta_f.to_f64_lossy(),
            sigma_list: (1..=self.n_filters)
                .map(|n| {
                    let (a, b) = bank_sigmas(self.delta_f, n);
                    [a.to_f64_lossy(), b.to_f64_lossy()]
                })
                .collect(),
        }
    }
}

/// Which side of the hard-mode Gaussian is treated as domain-invariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardAssignment {
    #[default]
    HighPassInvariant,
    LowPassInvariant,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance<T> {
    Hard {
        sigma_h: T,
        assignment: HardAssignment,
    },
    Soft {
        weights: Vec<T>,
    },
    Free {
        params: FreeFilterParams<T>,
    },
    /// Any externally supplied gain, e.g. a binary mask.
    Fixed,
}

/// Complementary per-bin gains over a shifted spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveFilter<T> {
    height: usize,
    width: usize,
    h_inv: Vec<T>,
    h_spe: Vec<T>,
    provenance: Provenance<T>,
}

impl<T: Scalar> AdaptiveFilter<T> {
    pub fn from_invariant_gain(
        height: usize,
        width: usize,
        h_inv: Vec<T>,
        provenance: Provenance<T>,
    ) -> Result<Self> {
        if h_inv.len() != height * width {
            return Err(Error::Shape {
                op: "AdaptiveFilter",
                lhs: vec![height, width],
                rhs: vec![h_inv.len()],
            });
        }
        if let Some(i) = h_inv
            .iter()
            .position(|&h| !(h >= T::zero() && h <= T::one()))
        {
            return Err(invalid(format!("h_inv[{i}] = {} outside [0, 1]", h_inv[i])));
        }
        let h_spe = h_inv.iter().map(|&h| T::one() - h).collect();
        Ok(Self {
            height,
            width,
            h_inv,
            h_spe,
            provenance,
        })
    }

    /// Gain 1 where `keep(D)` holds, 0 elsewhere.
    pub fn binary_mask(radial: &RadialField<T>, keep: impl Fn(T) -> bool) -> Self {
        let h = radial
            .values()
            .iter()
            .map(|&d| if keep(d) { T::one() } else { T::zero() })
            .collect();
        Self::from_invariant_gain(radial.height(), radial.width(), h, Provenance::Fixed)
            .expect("mask gains are 0 or 1")
    }

    pub fn all_pass(height: usize, width: usize) -> Self {
        Self::from_invariant_gain(height, width, vec![T::one(); height * width], Provenance::Fixed)
            .expect("unit gain")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn h_inv(&self) -> &[T] {
        &self.h_inv
    }

    pub fn h_spe(&self) -> &[T] {
        &self.h_spe
    }

    pub fn provenance(&self) -> &Provenance<T> {
        &self.provenance
    }

    /// `values ⊙ h_inv`.
    pub fn apply(&self, values: &[T]) -> Vec<T> {
        values.iter().zip(&self.h_inv).map(|(&a, &h)| a * h).collect()
    }

    /// `values ⊙ h_spe`.
    pub fn apply_complement(&self, values: &[T]) -> Vec<T> {
        values.iter().zip(&self.h_spe).map(|(&a, &h)| a * h).collect()
    }

    /// `||apply(apply(a)) - apply(a)|| / ||apply(a)||`; zero for a binary mask.
    pub fn idempotency_ratio(&self, amplitude: &[T]) -> T {
        let once = self.apply(amplitude);
        let twice = self.apply(&once);
        let num: T = once
            .iter()
            .zip(&twice)
            .map(|(&a, &b)| (b - a) * (b - a))
            .sum::<T>()
            .sqrt();
        let den: T = once.iter().map(|&a| a * a).sum::<T>().sqrt();
        if den > T::zero() {
            num / den
        } else {
            T::zero()
        }
    }
}

/// Hard mode with the default assignment: the Gaussian high-pass
/// `1 - exp(-D^2 / 2 sigma_h^2)` is domain-invariant.
pub fn make_hard<T: Scalar>(radial: &RadialField<T>, sigma_h: T) -> Result<AdaptiveFilter<T>> {
    make_hard_with(radial, sigma_h, HardAssignment::HighPassInvariant)
}

pub fn make_hard_with<T: Scalar>(
    radial: &RadialField<T>,
    sigma_h: T,
    assignment: HardAssignment,
) -> Result<AdaptiveFilter<T>> {
    let kind = match assignment {
        HardAssignment::HighPassInvariant => PassKind::HighPass,
        HardAssignment::LowPassInvariant => PassKind::LowPass,
    };
    let g = GaussianFilter::new(radial, sigma_h, kind)?;
    AdaptiveFilter::from_invariant_gain(
        radial.height(),
        radial.width(),
        g.response,
        Provenance::Hard {
            sigma_h,
            assignment,
        },
    )
}

/// `h_inv = clamp(sum_n w_n G^_n, 0, 1)` with peak-normalized bands `G^_n`.
pub fn combine_soft<T: Scalar>(bank: &FilterBank<T>, weights: &[T]) -> Result<AdaptiveFilter<T>> {
    if weights.len() != bank.n_filters {
        return Err(Error::Shape {
            op: "combine_soft",
            lhs: vec![bank.n_filters],
            rhs: vec![weights.len()],
        });
    }
    if let Some(i) = weights
        .iter()
        .position(|&w| !(w >= T::zero() && w <= T::one()))
    {
        return Err(invalid(format!("soft weight {i} = {} outside [0, 1]", weights[i])));
    }
    let tape = Tape::new();
    let bank_m = tape.constant(bank.normalized_matrix());
    let w = tape.constant(Tensor::new(vec![1, weights.len()], weights.to_vec())?);
    let h = soft_gain(&tape, bank_m, w)?;
    let h_inv = tape.value(h).data().to_vec();
    let r = bank.radial();
    AdaptiveFilter::from_invariant_gain(
        r.height(),
        r.width(),
        h_inv,
        Provenance::Soft {
            weights: weights.to_vec(),
        },
    )
}

/// Differentiable soft combination: `weights [.., N] x bank [N, bins]`,
/// clamped into `[0, 1]`.
pub fn soft_gain<T: Scalar>(tape: &Tape<T>, bank: Var, weights: Var) -> Result<Var> {
    let mixed = tape.matmul(weights, bank)?;
    Ok(tape.clamp(mixed, T::zero(), T::one()))
}

/// Two-layer per-bin network of the free mode:
/// `h_inv = sigmoid(w2 . tanh(W1 [D, a] + b1) + b2)`, `a = ln(1 + A) / ln(1 + bins)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeFilterParams<T> {
    /// `[2, hidden]`
    pub w1: Tensor<T>,
    /// `[hidden]`
    pub b1: Tensor<T>,
    /// `[hidden, 1]`
    pub w2: Tensor<T>,
    /// `[1]`
    pub b2: Tensor<T>,
}

impl<T: Scalar> FreeFilterParams<T> {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(vec![2, hidden]),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::zeros(vec![hidden, 1]),
            b2: Tensor::zeros(vec![1]),
        }
    }

    pub fn from_flat(hidden: usize, flat: &[T]) -> Result<Self> {
        let need = 4 * hidden + 1;
        if flat.len() != need {
            return Err(Error::Shape {
                op: "FreeFilterParams::from_flat",
                lhs: vec![need],
                rhs: vec![flat.len()],
            });
        }
        let (w1, rest) = flat.split_at(2 * hidden);
        let (b1, rest) = rest.split_at(hidden);
        let (w2, b2) = rest.split_at(hidden);
        Ok(Self {
            w1: Tensor::new(vec![2, hidden], w1.to_vec())?,
            b1: Tensor::new(vec![hidden], b1.to_vec())?,
            w2: Tensor::new(vec![hidden, 1], w2.to_vec())?,
            b2: Tensor::new(vec![1], b2.to_vec())?,
        })
    }

    pub fn flat(&self) -> Vec<T> {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn hidden(&self) -> usize {
        self.b1.numel()
    }
}

/// `[bins, 2]` per-bin features `[D, ln(1 + A) / ln(1 + bins)]`.
pub fn free_features<T: Scalar>(radial: &RadialField<T>, amplitude: &[T]) -> Result<Tensor<T>> {
    if amplitude.len() != radial.len() {
        return Err(Error::Shape {
            op: "free_features",
            lhs: vec![radial.len()],
            rhs: vec![amplitude.len()],
        });
    }
    let scale = T::one() / T::from_usize_lossy(radial.len()).ln_1p();
    let mut data = Vec::with_capacity(2 * radial.len());
    for (&d, &a) in radial.values().iter().zip(amplitude) {
        data.push(d);
        data.push(a.ln_1p() * scale);
    }
    Tensor::new(vec![radial.len(), 2], data)
}

/// Tape leaves for the free-mode parameters.
#[derive(Debug, Clone, Copy)]
pub struct FreeVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Differentiable free-mode gain over `features [.., bins, 2]`, returning `[.., bins]`.
pub fn free_gain<T: Scalar>(tape: &Tape<T>, features: Var, p: FreeVars) -> Result<Var> {
    let pre = tape.matmul(features, p.w1)?;
    let hid = tape.tanh(tape.add(pre, p.b1)?);
    let out = tape.add(tape.matmul(hid, p.w2)?, p.b2)?;
    let g = tape.sigmoid(out);
    let mut shape = tape.shape(g);
    shape.pop();
    tape.reshape(g, &shape)
}

pub fn make_free<T: Scalar>(
    radial: &RadialField<T>,
    amplitude: &[T],
    params: &FreeFilterParams<T>,
) -> Result<AdaptiveFilter<T>> {
    let tape = Tape::new();
    let feats = tape.constant(free_features(radial, amplitude)?);
    let vars = FreeVars {
        w1: tape.constant(params.w1.clone()),
        b1: tape.constant(params.b1.clone()),
        w2: tape.constant(params.w2.clone()),
        b2: tape.constant(params.b2.clone()),
    };
    let h = free_gain(&tape, feats, vars)?;
    let h_inv = tape.value(h).data().to_vec();
    AdaptiveFilter::from_invariant_gain(
        radial.height(),
        radial.width(),
        h_inv,
        Provenance::Free {
            params: params.clone(),
        },
    )
}
