//! Spatial-spectral coupling.
//!
//! Feature maps are channels-last `[batch, height, width, channels]`. Early
//! levels gate the backbone with the spectral map,
//! `out = a * sigmoid(F_inv W + b) ⊙ F_B + (1 - a) * F_B`. Late levels run
//! single-head cross-attention with queries from the spectral map,
//! `out = a * softmax(Ln(F_inv W_Q) Ln(F_B W_K)^T / sqrt(d)) Ln(F_B W_V) + (1 - a) * F_B`.
//! Fusion weights `a` are passed already bounded to `[0, 1]`.

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

pub const LEVELS: usize = 5;
/// Levels below this index use gated fusion; the rest use cross-attention.
pub const EARLY_LEVELS: usize = 2;
pub const LN_EPS: f64 = 1e-5;

/// Five maps with non-increasing spatial size.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<Var>,
}

impl FeaturePyramid {
    pub fn new<T: Scalar>(tape: &Tape<T>, levels: Vec<Var>) -> Result<Self> {
        if levels.len() != LEVELS {
            return Err(invalid(format!("pyramid needs {LEVELS} levels, got {}", levels.len())));
        }
        for pair in levels.windows(2) {
            let (a, b) = (tape.shape(pair[0]), tape.shape(pair[1]));
            if a.len() != 4 || b.len() != 4 || b[1] > a[1] || b[2] > a[2] {
                return Err(Error::Shape {
                    op: "FeaturePyramid",
                    lhs: a,
                    rhs: b,
                });
            }
        }
        Ok(Self { levels })
    }

    pub fn level(&self, l: usize) -> Var {
        self.levels[l]
    }

    pub fn levels(&self) -> &[Var] {
        &self.levels
    }
}

/// Spectral maps matched level by level to a backbone pyramid.
#[derive(Debug, Clone)]
pub struct SpectralPyramid {
    levels: Vec<Var>,
}

impl SpectralPyramid {
    pub fn new<T: Scalar>(tape: &Tape<T>, backbone: &FeaturePyramid, levels: Vec<Var>) -> Result<Self> {
        if levels.len() != LEVELS {
            return Err(invalid(format!("pyramid needs {LEVELS} levels, got {}", levels.len())));
        }
        for (&s, &b) in levels.iter().zip(backbone.levels()) {
            if tape.shape(s) != tape.shape(b) {
                return Err(Error::Shape {
                    op: "SpectralPyramid",
                    lhs: tape.shape(b),
                    rhs: tape.shape(s),
                });
            }
        }
        Ok(Self { levels })
    }

    pub fn level(&self, l: usize) -> Var {
        self.levels[l]
    }
}

/// Early-level gate projection `[c, c]`, `[c]`.
#[derive(Debug, Clone, Copy)]
pub struct GateParams {
    pub w: Var,
    pub b: Var,
}

/// Late-level projections, each `[c, c]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// `a * m + (1 - a) * f_b`.
fn blend<T: Scalar>(tape: &Tape<T>, mixed: Var, f_b: Var, alpha: Var) -> Result<Var> {
    let keep = tape.rsub_scalar(T::one(), alpha);
    let a = tape.mul(mixed, alpha)?;
    let b = tape.mul(f_b, keep)?;
    tape.add(a, b)
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb || sa.len() != 4 {
        return Err(Error::Shape { op, lhs: sa, rhs: sb });
    }
    Ok(sa)
}

/// `sigmoid(f_inv W + b) ⊙ f_b`.
pub fn gate_map<T: Scalar>(tape: &Tape<T>, f_b: Var, f_inv: Var, g: GateParams) -> Result<Var> {
    same_shape(tape, "gate_map", f_b, f_inv)?;
    let logits = tape.add(tape.matmul(f_inv, g.w)?, g.b)?;
    tape.mul(tape.sigmoid(logits), f_b)
}

pub fn fuse_early<T: Scalar>(tape: &Tape<T>, f_b: Var, f_inv: Var, g: GateParams, alpha: Var) -> Result<Var> {
    let a_inv = gate_map(tape, f_b, f_inv, g)?;
    blend(tape, a_inv, f_b, alpha)
}

/// Fused map and the `[batch, hw, hw]` attention weights.
pub fn fuse_late<T: Scalar>(
    tape: &Tape<T>,
    f_b: Var,
    f_f: Var,
    p: AttentionParams,
    alpha: Var,
) -> Result<(Var, Var)> {
    let s = same_shape(tape, "fuse_late", f_b, f_f)?;
    let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
    let d = tape.shape(p.wq)[1];
    let flat_b = tape.reshape(f_b, &[b, hw, c])?;
    let flat_f = tape.reshape(f_f, &[b, hw, c])?;
    let eps = T::lit(LN_EPS);
    let q = tape.layer_norm(tape.matmul(flat_f, p.wq)?, eps)?;
    let k = tape.layer_norm(tape.matmul(flat_b, p.wk)?, eps)?;
    let v = tape.layer_norm(tape.matmul(flat_b, p.wv)?, eps)?;
    let scores = tape.scale(tape.matmul(q, tape.transpose(k)?)?, T::one() / T::from_usize_lossy(d).sqrt());
    let attn = tape.softmax(scores)?;
    let mixed = tape.matmul(attn, v)?;
    if tape.shape(mixed) != [b, hw, c] {
        return Err(Error::Shape {
            op: "fuse_late",
            lhs: vec![b, hw, c],
            rhs: tape.shape(mixed),
        });
    }
    let mixed = tape.reshape(mixed, &s)?;
    Ok((blend(tape, mixed, f_b, alpha)?, attn))
}

/// How the two DS planes are summarized before the token projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsPool {
    /// Average over a `g x g` grid of equal patches.
    Grid(usize),
    /// Average over all positions.
    Global,
}

impl DsPool {
    pub fn features(self) -> usize {
        match self {
            DsPool::Grid(g) => 2 * g * g,
            DsPool::Global => 2,
        }
    }
}

/// Maps `[batch, h, w, 2]` DS planes to `[batch, n_tokens, d]` with a pooled
/// linear embedding; `w: [pool features, n_tokens * d]`, `b: [n_tokens * d]`.
pub fn embed_ds_tokens<T: Scalar>(
    tape: &Tape<T>,
    f_spe: Var,
    pool: DsPool,
    w: Var,
    b: Var,
    n_tokens: usize,
) -> Result<Var> {
    let s = tape.shape(f_spe);
    if s.len() != 4 || s[3] != 2 {
        return Err(invalid(format!("DS embedding wants [batch, h, w, 2], got {s:?}")));
    }
    let batch = s[0];
    let pooled = match pool {
        DsPool::Grid(g) => {
            if g == 0 || !s[1].is_multiple_of(g) || !s[2].is_multiple_of(g) || s[1] != s[2] {
                return Err(invalid(format!("cannot pool {s:?} onto a {g}x{g} grid")));
            }
            let p = tape.avg_pool(f_spe, s[1] / g)?;
            tape.reshape(p, &[batch, 2 * g * g])?
        }
        DsPool::Global => {
            let r = tape.reshape(f_spe, &[batch, s[1] * s[2], 2])?;
            tape.mean_last(tape.transpose(r)?)?
        }
    };
    let flat = tape.add(tape.matmul(pooled, w)?, b)?;
    let width = tape.shape(flat)[1];
    if !width.is_multiple_of(n_tokens) {
        return Err(invalid(format!("token projection width {width} not a multiple of {n_tokens}")));
    }
    tape.reshape(flat, &[batch, n_tokens, width / n_tokens])
}

/// Backbone stand-in: five `space_to_depth(2) -> linear -> relu` stages.
pub fn backbone<T: Scalar>(tape: &Tape<T>, input: Var, stages: &[(Var, Var)]) -> Result<Vec<Var>> {
    let mut x = input;
    let mut out = Vec::with_capacity(stages.len());
    for &(w, b) in stages {
        x = stage(tape, x, w, b)?;
        out.push(x);
    }
    Ok(out)
}

/// One backbone stage.
pub fn stage<T: Scalar>(tape: &Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let folded = tape.space_to_depth(x, 2)?;
    Ok(tape.relu(tape.add(tape.matmul(folded, w)?, b)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_rel_error};
    use crate::tensor::Tensor;

    fn vals(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    fn c(tape: &Tape<f64>, shape: &[usize], seed: u64) -> Var {
        let n = shape.iter().product();
        tape.constant(Tensor::new(shape.to_vec(), vals(n, seed)).unwrap())
    }

    #[test]
    fn early_degenerate_cases() {
        let tape = Tape::new();
        let fb = c(&tape, &[2, 2, 2, 3], 1);
        let fi = c(&tape, &[2, 2, 2, 3], 2);
        let g = GateParams {
            w: c(&tape, &[3, 3], 3),
            b: c(&tape, &[3], 4),
        };
        let zero = fuse_early(&tape, fb, fi, g, tape.scalar(0.0)).unwrap();
        assert_eq!(tape.value(zero).data(), tape.value(fb).data());
        let one = fuse_early(&tape, fb, fi, g, tape.scalar(1.0)).unwrap();
        let a_inv = gate_map(&tape, fb, fi, g).unwrap();
        assert_eq!(tape.value(one).data(), tape.value(a_inv).data());
        let half = fuse_early(&tape, fb, fi, g, tape.scalar(0.5)).unwrap();
        for ((h, a), b) in tape
            .value(half)
            .data()
            .iter()
            .zip(tape.value(a_inv).data())
            .zip(tape.value(fb).data())
        {
            assert!((h - 0.5 * (a + b)).abs() < 1e-15);
        }
        let wrong = c(&tape, &[2, 2, 1, 3], 5);
        assert!(fuse_early(&tape, fb, wrong, g, tape.scalar(0.5)).is_err());
    }

    #[test]
    fn late_degenerate_cases() {
        let tape = Tape::new();
        let fb = c(&tape, &[2, 3, 3, 4], 6);
        let ff = c(&tape, &[2, 3, 3, 4], 7);
        let p = AttentionParams {
            wq: c(&tape, &[4, 4], 8),
            wk: c(&tape, &[4, 4], 9),
            wv: c(&tape, &[4, 4], 10),
        };
        let (zero, attn) = fuse_late(&tape, fb, ff, p, tape.scalar(0.0)).unwrap();
        assert_eq!(tape.value(zero).data(), tape.value(fb).data());
        assert_eq!(tape.shape(zero), tape.shape(fb));
        for row in tape.value(attn).data().chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn late_single_position_is_value_projection() {
        let tape = Tape::new();
        let fb = c(&tape, &[1, 1, 1, 4], 11);
        let ff = c(&tape, &[1, 1, 1, 4], 12);
        let p = AttentionParams {
            wq: c(&tape, &[4, 4], 13),
            wk: c(&tape, &[4, 4], 14),
            wv: c(&tape, &[4, 4], 15),
        };
        let alpha = 0.3;
        let (out, _) = fuse_late(&tape, fb, ff, p, tape.scalar(alpha)).unwrap();
        // Hand evaluation: Ln(W_V^T f_b) with population variance.
        let f = tape.value(fb).data().to_vec();
        let wv = tape.value(p.wv).data().to_vec();
        let proj: Vec<f64> = (0..4).map(|j| (0..4).map(|i| f[i] * wv[i * 4 + j]).sum()).collect();
        let m = proj.iter().sum::<f64>() / 4.0;
        let var = proj.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 4.0;
        let ln: Vec<f64> = proj.iter().map(|v| (v - m) / (var + LN_EPS).sqrt()).collect();
        for j in 0..4 {
            let want = alpha * ln[j] + (1.0 - alpha) * f[j];
            assert!((tape.value(out).data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn late_gradient_wrt_query_projection() {
        let wq0 = vals(16, 20);
        let run = |wq: &[f64]| {
            let tape = Tape::new();
            let fb = c(&tape, &[1, 4, 4, 4], 21);
            let ff = c(&tape, &[1, 4, 4, 4], 22);
            let q = tape.leaf(&Tensor::param(vec![4, 4], wq.to_vec()).unwrap());
            let p = AttentionParams {
                wq: q,
                wk: c(&tape, &[4, 4], 23),
                wv: c(&tape, &[4, 4], 24),
            };
            let (out, _) = fuse_late(&tape, fb, ff, p, tape.scalar(0.7)).unwrap();
            let probe = c(&tape, &[1, 4, 4, 4], 25);
            let l = tape.sum(tape.mul(out, probe).unwrap());
            let g = tape.backward(l).unwrap();
            (tape.item(l), g.get(q).unwrap().to_vec())
        };
        let numeric = central_difference(|w| run(w).0, &wq0, 1e-4);
        assert!(max_rel_error(&run(&wq0).1, &numeric) < 1e-4);
    }

    #[test]
    fn ds_tokens_shape_linearity_and_pool_invariance() {
        let (nt, d) = (8, 5);
        for (h, pool) in [(8, DsPool::Grid(2)), (12, DsPool::Grid(2)), (16, DsPool::Global)] {
            let tape = Tape::new();
            let x = c(&tape, &[2, h, h, 2], 30);
            let w = c(&tape, &[pool.features(), nt * d], 31);
            let b = tape.constant(Tensor::zeros(vec![nt * d]));
            let t1 = embed_ds_tokens(&tape, x, pool, w, b, nt).unwrap();
            assert_eq!(tape.shape(t1), vec![2, nt, d]);
            let t2 = embed_ds_tokens(&tape, tape.scale(x, 2.0), pool, w, b, nt).unwrap();
            for (a, b) in tape.value(t1).data().iter().zip(tape.value(t2).data()) {
                assert!((2.0 * a - b).abs() < 1e-12);
            }
            let z = tape.constant(Tensor::zeros(vec![2, h, h, 2]));
            let t0 = embed_ds_tokens(&tape, z, pool, w, b, nt).unwrap();
            assert!(tape.value(t0).data().iter().all(|&v| v == 0.0));
        }
        // Dyadic inputs sum exactly in any order, so the global pool is
        // permutation invariant bit for bit.
        let tape = Tape::new();
        let n = 8 * 8;
        let base: Vec<f64> = (0..n * 2).map(|i| ((i * 37) % 19) as f64 / 8.0).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.swap(3, 40);
        let mut shuffled = vec![0.0; n * 2];
        for (dst, &src) in perm.iter().enumerate() {
            shuffled[2 * dst] = base[2 * src];
            shuffled[2 * dst + 1] = base[2 * src + 1];
        }
        let w = c(&tape, &[2, nt * d], 32);
        let b = c(&tape, &[nt * d], 33);
        let a = tape.constant(Tensor::new(vec![1, 8, 8, 2], base).unwrap());
        let s = tape.constant(Tensor::new(vec![1, 8, 8, 2], shuffled).unwrap());
        let ta = embed_ds_tokens(&tape, a, DsPool::Global, w, b, nt).unwrap();
        let ts = embed_ds_tokens(&tape, s, DsPool::Global, w, b, nt).unwrap();
        assert_eq!(tape.value(ta).data(), tape.value(ts).data());
        let bad = c(&tape, &[1, 8, 8, 3], 34);
        assert!(embed_ds_tokens(&tape, bad, DsPool::Global, w, b, nt).is_err());
    }

    #[test]
    fn backbone_pyramid_shapes() {
        let tape = Tape::new();
        let x = c(&tape, &[2, 32, 32, 1], 40);
        let chs = [1, 8, 16, 6, 6, 6];
        let stages: Vec<(Var, Var)> = (0..5)
            .map(|l| (c(&tape, &[4 * chs[l], chs[l + 1]], 41 + l as u64), c(&tape, &[chs[l + 1]], 50 + l as u64)))
            .collect();
        let levels = backbone(&tape, x, &stages).unwrap();
        let sizes: Vec<usize> = levels.iter().map(|&v| tape.shape(v)[1]).collect();
        assert_eq!(sizes, vec![16, 8, 4, 2, 1]);
        let pyr = FeaturePyramid::new(&tape, levels.clone()).unwrap();
        assert!(SpectralPyramid::new(&tape, &pyr, levels).is_ok());
        assert!(FeaturePyramid::new(&tape, vec![x]).is_err());
    }
}
