//! Toy grid detector with the spectral branch.
//!
//! Forward pass for a batch of single-channel images:
//! 1. centered spectrum per image, gain `h_inv` from the configured filter
//!    mode, decoupling chain and its loss;
//! 2. DI image (filtered amplitude, original phase) feeding a spectral
//!    pyramid that is fused into the backbone level by level;
//! 3. per-cell tokens from levels 2..5, optionally joined by DS tokens, one
//!    self-attention layer, then `1 + C` logits per cell (objectness, classes).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{FilterMode, RunConfig};
use crate::coupling::{self, AttentionParams, DsPool, GateParams, EARLY_LEVELS, LEVELS};
use crate::data::{BACKGROUND, N_CLASSES};
use crate::error::{invalid, Result};
use crate::filter::{free_gain, make_bank, make_hard_with, soft_gain, AdaptiveFilter, FreeVars, Provenance};
use crate::params::Bound;
use crate::ParamStore;
use crate::rng::{stream, Stream};
use crate::said::{decouple_loss_var, decouple_var, DecoupleLossCfg};
use crate::spectral::{radial_field, synthesize_var, Fft2d, ImagePlane, RadialField};
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::Tensor;

/// Inputs of one forward pass, transformed once up front.
#[derive(Debug, Clone)]
pub struct Batch {
    pub len: usize,
    /// `[n, size, size, 1]`
    pub images: Tensor<f64>,
    /// `[n, bins]`, centered.
    pub amplitude: Tensor<f64>,
    pub phase: Tensor<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `[n, cells, 1 + C]`
    pub logits: Var,
    /// Batch-mean decoupling loss, scaled by `lambda_dcp`.
    pub l_dcp: Option<Var>,
    /// `[n, bins]` or `[bins]`.
    pub h_inv: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Detector {
    size: usize,
    grid: usize,
    d: usize,
    n_tokens: usize,
    ds_pool: DsPool,
    mode: FilterMode,
    said: bool,
    coupling: bool,
    soft_hidden: usize,
    free_hidden: usize,
    plan: Fft2d<f64>,
    radial: RadialField<f64>,
    /// `[N, bins]` peak-normalized bands.
    bank: Tensor<f64>,
    /// `[bins, N]`: per-band mean of `ln(1 + A)`, centered across bands.
    band_features: Tensor<f64>,
    soft_bias: f64,
    hard: Tensor<f64>,
    loss_cfg: DecoupleLossCfg<f64>,
}

fn channels(d: usize) -> [usize; LEVELS + 1] {
    [1, 8, 16, d, d, d]
}

impl Detector {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let size = cfg.image_size();
        let plan = Fft2d::new(size, size)?;
        let radial = radial_field(size, size)?;
        let bins = size * size;
        let s = &cfg.said;
        let bank_obj = make_bank(&radial, s.n_filters)?;
        let bank = bank_obj.normalized_matrix();
        let n = s.n_filters;
        let mut band_features = vec![0.0; bins * n];
        for k in 0..n {
            let g = bank_obj.peak_normalized(k);
            let total: f64 = g.iter().sum();
            for (i, &v) in g.iter().enumerate() {
                band_features[i * n + k] = v / total;
            }
        }
        // Subtract the across-band mean so features are offset-free.
        for row in band_features.chunks_mut(n) {
            let m = row.iter().sum::<f64>() / n as f64;
            row.iter_mut().for_each(|v| *v -= m);
        }
        // Start every weight at the level where the combined gain peaks at 0.5,
        // away from the clamp.
        let max_sum = (0..bins)
            .map(|i| (0..n).map(|k| bank.data()[k * bins + i]).sum::<f64>())
            .fold(0.0, f64::max);
        let p = (0.5 / max_sum).clamp(1e-6, 1.0 - 1e-6);
        let hard = make_hard_with(&radial, s.sigma_h, s.hard_assignment)?;
        Ok(Self {
            size,
            grid: cfg.data.grid,
            d: cfg.model.d,
            n_tokens: cfg.model.n_tokens,
            ds_pool: if cfg.model.ds_grid == 0 {
                DsPool::Global
            } else {
                DsPool::Grid(cfg.model.ds_grid)
            },
            mode: s.mode,
            said: cfg.ablation.said,
            coupling: cfg.ablation.coupling,
            soft_hidden: s.soft_hidden,
            free_hidden: s.free_hidden,
            plan,
            radial,
            bank,
            band_features: Tensor::new(vec![bins, n], band_features)?,
            soft_bias: (p / (1.0 - p)).ln(),
            hard: Tensor::from_vec(hard.h_inv().to_vec()),
            loss_cfg: DecoupleLossCfg::new(s.k, s.epsilon, s.lambda_dcp)?.with_input(s.pcc_input),
        })
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn plan(&self) -> &Fft2d<f64> {
        &self.plan
    }

    pub fn radial(&self) -> &RadialField<f64> {
        &self.radial
    }

    pub fn uses_said(&self) -> bool {
        self.said
    }

    fn ds_tokens(&self) -> bool {
        self.said && self.coupling
    }

    /// Fresh parameters drawn from the init stream of `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = stream(seed, Stream::Init);
        let mut s = ParamStore::new();
        let chs = channels(self.d);
        let c = N_CLASSES;
        let normal = |rng: &mut rand_chacha::ChaCha8Rng, shape: Vec<usize>| -> Result<Tensor<f64>> {
            let dist = Normal::new(0.0, 1.0 / (shape[0] as f64).sqrt()).map_err(|e| invalid(e.to_string()))?;
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
        };
        let zeros = |shape: Vec<usize>| Tensor::zeros(shape);
        for l in 0..LEVELS {
            s.insert(format!("bb{l}.w"), normal(&mut rng, vec![4 * chs[l], chs[l + 1]])?)?;
            s.insert(format!("bb{l}.b"), zeros(vec![chs[l + 1]]))?;
        }
        if self.coupling {
            for l in 0..LEVELS {
                s.insert(format!("sp{l}.w"), normal(&mut rng, vec![4 * chs[l], chs[l + 1]])?)?;
                s.insert(format!("sp{l}.b"), zeros(vec![chs[l + 1]]))?;
            }
            for l in 0..EARLY_LEVELS {
                let ch = chs[l + 1];
                s.insert(format!("gate{l}.w"), normal(&mut rng, vec![ch, ch])?)?;
                s.insert(format!("gate{l}.b"), zeros(vec![ch]))?;
            }
            for l in EARLY_LEVELS..LEVELS {
                for m in ["wq", "wk", "wv"] {
                    s.insert(format!("att{l}.{m}"), normal(&mut rng, vec![self.d, self.d])?)?;
                }
            }
            for l in 0..LEVELS {
                s.insert(format!("alpha{l}"), zeros(vec![1]))?;
            }
        }
        if self.said {
            let n = self.bank.shape()[0];
            match self.mode {
                FilterMode::Soft => {
                    let h = self.soft_hidden;
                    s.insert("soft.w1", normal(&mut rng, vec![n, h])?)?;
                    s.insert("soft.b1", zeros(vec![h]))?;
                    s.insert("soft.w2", zeros(vec![h, n]))?;
                    s.insert("soft.b2", Tensor::full(vec![n], self.soft_bias))?;
                }
                FilterMode::Free => {
                    let h = self.free_hidden;
                    s.insert("free.w1", normal(&mut rng, vec![2, h])?)?;
                    s.insert("free.b1", zeros(vec![h]))?;
                    s.insert("free.w2", zeros(vec![h, 1]))?;
                    s.insert("free.b2", zeros(vec![1]))?;
                }
                FilterMode::Hard => {}
            }
        }
        if self.ds_tokens() {
            let f = self.ds_pool.features();
            s.insert("ds.w", normal(&mut rng, vec![f, self.n_tokens * self.d])?)?;
            s.insert("ds.b", zeros(vec![self.n_tokens * self.d]))?;
        }
        s.insert("cell.w", normal(&mut rng, vec![chs[2] + 3 * self.d, self.d])?)?;
        s.insert("cell.b", zeros(vec![self.d]))?;
        for m in ["wq", "wk", "wv"] {
            s.insert(format!("head.{m}"), normal(&mut rng, vec![self.d, self.d])?)?;
        }
        s.insert("out.w", normal(&mut rng, vec![self.d, 1 + c])?)?;
        s.insert("out.b", zeros(vec![1 + c]))?;
        Ok(s)
    }

    pub fn prepare(&self, images: &[&ImagePlane<f64>]) -> Result<Batch> {
        if images.is_empty() {
            return Err(invalid("empty batch"));
        }
        let bins = self.size * self.size;
        let mut px = Vec::with_capacity(images.len() * bins);
        let mut amp = Vec::with_capacity(images.len() * bins);
        let mut phase = Vec::with_capacity(images.len() * bins);
        for img in images {
            let spec = self.plan.forward(img)?;
            px.extend_from_slice(img.data());
            amp.extend_from_slice(spec.amplitude());
            phase.extend_from_slice(spec.phase());
        }
        let n = images.len();
        Ok(Batch {
            len: n,
            images: Tensor::new(vec![n, self.size, self.size, 1], px)?,
            amplitude: Tensor::new(vec![n, bins], amp)?,
            phase: Tensor::new(vec![n, bins], phase)?,
        })
    }

    /// Per-image invariant gain, or `None` when the spectral branch is off.
    pub fn filter_gain(&self, tape: &Tape<f64>, p: &Params<'_>, batch: &Batch) -> Result<Option<Var>> {
        if !self.said {
            return Ok(None);
        }
        let bins = self.size * self.size;
        let log_amp = || Tensor::new(batch.amplitude.shape().to_vec(), batch.amplitude.data().iter().map(|a| a.ln_1p()).collect());
        let h = match self.mode {
            FilterMode::Hard => tape.constant(self.hard.clone()),
            FilterMode::Soft => {
                let feats = tape.matmul(tape.constant(log_amp()?), tape.constant(self.band_features.clone()))?;
                let hid = tape.relu(tape.add(tape.matmul(feats, p.var("soft.w1")?)?, p.var("soft.b1")?)?);
                let w = tape.sigmoid(tape.add(tape.matmul(hid, p.var("soft.w2")?)?, p.var("soft.b2")?)?);
                soft_gain(tape, tape.constant(self.bank.clone()), w)?
            }
            FilterMode::Free => {
                let scale = 1.0 / (bins as f64).ln_1p();
                let mut f = Vec::with_capacity(2 * batch.amplitude.numel());
                for row in batch.amplitude.data().chunks(bins) {
                    for (&a, &d) in row.iter().zip(self.radial.values()) {
                        f.push(d);
                        f.push(a.ln_1p() * scale);
                    }
                }
                let feats = tape.constant(Tensor::new(vec![batch.len, bins, 2], f)?);
                let v = FreeVars {
                    w1: p.var("free.w1")?,
                    b1: p.var("free.b1")?,
                    w2: p.var("free.w2")?,
                    b2: p.var("free.b2")?,
                };
                free_gain(tape, feats, v)?
            }
        };
        Ok(Some(h))
    }

    pub fn forward(&self, tape: &Tape<f64>, p: &Params<'_>, batch: &Batch) -> Result<Forward> {
        let (n, size) = (batch.len, self.size);
        let x = tape.constant(batch.images.clone());
        let h_inv = self.filter_gain(tape, p, batch)?;
        let mut l_dcp = None;
        let mut ds_planes = None;
        let spectral_in = match h_inv {
            Some(h) => {
                let amp = tape.constant(batch.amplitude.clone());
                let chain = decouple_var(tape, amp, h)?;
                if self.loss_cfg.lambda_dcp() > 0.0 {
                    l_dcp = Some(decouple_loss_var(tape, &chain, &self.loss_cfg)?);
                }
                let di_img = synthesize_var(tape, &self.plan, chain.di, &batch.phase)?;
                if self.ds_tokens() {
                    let ds_img = synthesize_var(tape, &self.plan, chain.ds, &batch.phase)?;
                    let a = tape.reshape(tape.ln_1p(chain.ds), &[n, size, size, 1])?;
                    let b = tape.reshape(ds_img, &[n, size, size, 1])?;
                    ds_planes = Some(tape.concat(&[a, b], 3)?);
                }
                tape.reshape(di_img, &[n, size, size, 1])?
            }
            // All-pass: the DI image is the input itself.
            None => x,
        };

        let mut fb = x;
        let mut fi = spectral_in;
        let mut levels = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            fb = coupling::stage(tape, fb, p.var(&format!("bb{l}.w"))?, p.var(&format!("bb{l}.b"))?)?;
            if self.coupling {
                fi = coupling::stage(tape, fi, p.var(&format!("sp{l}.w"))?, p.var(&format!("sp{l}.b"))?)?;
                let alpha = tape.sigmoid(p.var(&format!("alpha{l}"))?);
                fb = if l < EARLY_LEVELS {
                    let g = GateParams {
                        w: p.var(&format!("gate{l}.w"))?,
                        b: p.var(&format!("gate{l}.b"))?,
                    };
                    coupling::fuse_early(tape, fb, fi, g, alpha)?
                } else {
                    let a = AttentionParams {
                        wq: p.var(&format!("att{l}.wq"))?,
                        wk: p.var(&format!("att{l}.wk"))?,
                        wv: p.var(&format!("att{l}.wv"))?,
                    };
                    coupling::fuse_late(tape, fb, fi, a, alpha)?.0
                };
            }
            levels.push(fb);
        }
        coupling::FeaturePyramid::new(tape, levels.clone())?;

        let cells = self.cells();
        let mut parts = vec![levels[1]];
        for (l, f) in [(2, 2), (3, 4), (4, 8)] {
            parts.push(tape.upsample(levels[l], f)?);
        }
        let cat = tape.concat(&parts, 3)?;
        let width = tape.shape(cat)[3];
        let cat = tape.reshape(cat, &[n, cells, width])?;
        let tok = tape.relu(tape.add(tape.matmul(cat, p.var("cell.w")?)?, p.var("cell.b")?)?);
        let all = match ds_planes {
            Some(planes) => {
                let ds = coupling::embed_ds_tokens(tape, planes, self.ds_pool, p.var("ds.w")?, p.var("ds.b")?, self.n_tokens)?;
                tape.concat(&[tok, ds], 1)?
            }
            None => tok,
        };
        let q = tape.matmul(all, p.var("head.wq")?)?;
        let k = tape.matmul(all, p.var("head.wk")?)?;
        let v = tape.matmul(all, p.var("head.wv")?)?;
        let scores = tape.scale(tape.matmul(q, tape.transpose(k)?)?, 1.0 / (self.d as f64).sqrt());
        let att = tape.matmul(tape.softmax(scores)?, v)?;
        let tok = tape.add(tok, tape.slice(att, 1, 0, cells)?)?;
        let logits = tape.add(tape.matmul(tok, p.var("out.w")?)?, p.var("out.b")?)?;
        debug_assert_eq!(tape.shape(logits), vec![n, cells, 1 + N_CLASSES]);
        Ok(Forward { logits, l_dcp, h_inv })
    }

    /// The filter `store` produces for one image.
    pub fn image_filter(&self, store: &ParamStore, img: &ImagePlane<f64>) -> Result<AdaptiveFilter<f64>> {
        let tape = Tape::new();
        let bound = store.bind_frozen(&tape);
        let batch = self.prepare(&[img])?;
        let h = self
            .filter_gain(&tape, &Params::new(store, &bound), &batch)?
            .ok_or_else(|| invalid("the spectral branch is disabled"))?;
        let gain = tape.value(h).data().to_vec();
        AdaptiveFilter::from_invariant_gain(self.size, self.size, gain, Provenance::Fixed)
    }

    /// Mean of `||A h^2 - A h|| / ||A h||` over the images.
    pub fn idempotency_ratio(&self, store: &ParamStore, images: &[&ImagePlane<f64>]) -> Result<f64> {
        let tape = Tape::new();
        let bound = store.bind_frozen(&tape);
        let p = Params::new(store, &bound);
        let batch = self.prepare(images)?;
        let Some(h) = self.filter_gain(&tape, &p, &batch)? else {
            return Ok(0.0);
        };
        let bins = self.size * self.size;
        let hv = tape.value(h);
        let hd = hv.data();
        let mut total = 0.0;
        for (i, a) in batch.amplitude.data().chunks(bins).enumerate() {
            let hr = if hd.len() == bins { hd } else { &hd[i * bins..(i + 1) * bins] };
            let (mut num, mut den) = (0.0, 0.0);
            for (&av, &g) in a.iter().zip(hr) {
                let once = av * g;
                let twice = once * g;
                num += (twice - once).powi(2);
                den += once * once;
            }
            total += if den > 0.0 { (num / den).sqrt() } else { 0.0 };
        }
        Ok(total / batch.len as f64)
    }
}

/// Name lookup of bound parameters.
pub struct Params<'a> {
    store: &'a ParamStore,
    bound: &'a Bound,
}

impl<'a> Params<'a> {
    pub fn new(store: &'a ParamStore, bound: &'a Bound) -> Self {
        Self { store, bound }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .index_of(name)
            .map(|i| self.bound.var(i))
            .ok_or_else(|| invalid(format!("model has no parameter `{name}`")))
    }
}

/// `sum_cells w_cell * (BCE(objectness) + CE(class))` for cells labelled
/// `labels` (background cells carry no class term).
pub fn detection_loss(tape: &Tape<f64>, logits: Var, labels: &[i32], weights: &[f64]) -> Result<Var> {
    let s = tape.shape(logits);
    let (n, cells, c) = (s[0], s[1], s[2] - 1);
    if labels.len() != n * cells || weights.len() != n * cells {
        return Err(invalid(format!(
            "{} labels and {} weights for {} cells",
            labels.len(),
            weights.len(),
            n * cells
        )));
    }
    let obj: Vec<f64> = labels.iter().map(|&l| if l >= 0 { 1.0 } else { 0.0 }).collect();
    let mut onehot = vec![0.0; n * cells * c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            onehot[i * c + l as usize] = 1.0;
        }
    }
    let z = tape.reshape(tape.slice(logits, 2, 0, 1)?, &[n * cells])?;
    let y = tape.constant(Tensor::from_vec(obj));
    let bce = tape.sub(tape.softplus(z), tape.mul(z, y)?)?;
    let ls = tape.log_softmax(tape.slice(logits, 2, 1, 1 + c)?)?;
    let picked = tape.mul(ls, tape.constant(Tensor::new(vec![n, cells, c], onehot)?))?;
    let ce = tape.neg(tape.reshape(tape.sum_last(picked)?, &[n * cells])?);
    let per = tape.add(bce, ce)?;
    let w = tape.constant(Tensor::from_vec(weights.to_vec()));
    Ok(tape.sum(tape.mul(per, w)?))
}

/// Per-cell `(label, confidence)`: objects when `sigmoid(objectness) > 0.5`
/// with confidence `p_obj * max p_class`, otherwise background with `1 - p_obj`.
pub fn predict(logits: &Tensor<f64>) -> Vec<(i32, f64)> {
    let c = logits.shape()[2];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let p_obj = sigmoid(row[0]);
            let m = row[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row[1..].iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let pc: Vec<f64> = e.iter().map(|v| v / z).collect();
            let (k, &best) = pc
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, x| if *x.1 > *acc.1 { x } else { acc });
            if p_obj > 0.5 {
                (k as i32, p_obj * best)
            } else {
                (BACKGROUND, 1.0 - p_obj)
            }
        })
        .collect()
}

/// Uniform per-cell weights summing to 1.
pub fn mean_weights(n_cells: usize) -> Vec<f64> {
    vec![1.0 / n_cells as f64; n_cells]
}

#[doc(hidden)]
pub fn random_images<R: Rng>(rng: &mut R, n: usize, size: usize) -> Vec<ImagePlane<f64>> {
    (0..n)
        .map(|_| ImagePlane::from_fn(size, size, |_, _| rng.gen::<f64>()))
        .collect()
}
