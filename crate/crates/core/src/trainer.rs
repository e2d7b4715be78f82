//! Two-stage training: supervised burn-in on the labelled source, then
//! mutual learning where an EMA teacher pseudo-labels weak target views and
//! the student learns from strong views of the same scenes.
//!
//! Invariants:
//! * the teacher never receives a gradient; it is bound as constants;
//! * it changes only through `teacher <- a * teacher + (1 - a) * student`;
//! * the student is pulled toward the teacher every `ssm_step` mutual steps.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{generate_dataset, strong_augment, weak_augment, Dataset, SyntheticScene, N_CLASSES};
use crate::error::{invalid, Result};
use crate::model::{detection_loss, mean_weights, predict, Detector, Params};
use crate::rng::{stream, Stream};
use crate::spectral::ImagePlane;
use crate::svg::line_chart;
use crate::tape::Tape;
use crate::ParamStore;

const EVAL_BATCH: usize = 50;
const IDEMPOTENCY_IMAGES: usize = 20;

/// `teacher <- alpha * teacher + (1 - alpha) * student`.
pub fn apply_ema(teacher: &mut ParamStore, student: &ParamStore, alpha: f64) -> Result<()> {
    teacher.blend_from(student, alpha)
}

/// `student <- alpha * student + (1 - alpha) * teacher`.
pub fn apply_ssm(student: &mut ParamStore, teacher: &ParamStore, alpha: f64) -> Result<()> {
    student.blend_from(teacher, alpha)
}

/// Hard pseudo-labels with a keep mask: a cell is kept when its confidence
/// is strictly above `threshold`.
pub fn pseudo_labels(preds: &[(i32, f64)], threshold: f64) -> (Vec<i32>, Vec<f64>) {
    preds
        .iter()
        .map(|&(l, c)| (l, if c > threshold { 1.0 } else { 0.0 }))
        .unzip()
}

/// `mask / max(1, sum mask)`: the masked-mean weights.
pub fn masked_weights(mask: &[f64]) -> Vec<f64> {
    let n = mask.iter().sum::<f64>().max(1.0);
    mask.iter().map(|m| m / n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Per-label cell accuracy; index 0 is background.
    pub per_label: Vec<f64>,
    /// Mean over labels present in the set.
    pub mean: f64,
}

pub fn evaluate(det: &Detector, store: &ParamStore, scenes: &[SyntheticScene]) -> Result<EvalResult> {
    let mut correct = [0usize; N_CLASSES + 1];
    let mut total = [0usize; N_CLASSES + 1];
    for chunk in scenes.chunks(EVAL_BATCH) {
        let tape = Tape::new();
        let bound = store.bind_frozen(&tape);
        let imgs: Vec<&ImagePlane<f64>> = chunk.iter().map(|s| &s.image).collect();
        let batch = det.prepare(&imgs)?;
        let f = det.forward(&tape, &Params::new(store, &bound), &batch)?;
        let preds = predict(&tape.value(f.logits));
        for ((label, _), &truth) in preds.iter().zip(chunk.iter().flat_map(|s| &s.labels)) {
            let k = (truth + 1) as usize;
            total[k] += 1;
            correct[k] += usize::from(*label == truth);
        }
    }
    let per_label: Vec<f64> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| if t > 0 { c as f64 / t as f64 } else { f64::NAN })
        .collect();
    let present: Vec<f64> = per_label.iter().cloned().filter(|v| v.is_finite()).collect();
    let mean = present.iter().sum::<f64>() / present.len().max(1) as f64;
    Ok(EvalResult { per_label, mean })
}

/// One row of `metrics.csv`; stage-specific columns are empty when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub l_sup: f64,
    pub l_dcp: f64,
    pub l_mt: Option<f64>,
    pub pseudo_count: Option<usize>,
    pub eval_acc: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let opt = |v: Option<String>| v.unwrap_or_default();
    let mut s = String::from("iteration,l_sup,l_dcp,l_mt,pseudo_count,eval_acc\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration,
            r.l_sup,
            r.l_dcp,
            opt(r.l_mt.map(|v| v.to_string())),
            opt(r.pseudo_count.map(|v| v.to_string())),
            opt(r.eval_acc.map(|v| v.to_string())),
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Idempotency {
    pub init: f64,
    pub after_burn_in: f64,
    #[serde(rename = "final")]
    pub last: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub mode: String,
    pub said: bool,
    pub coupling: bool,
    pub ssm: bool,
    pub burn_in_steps: usize,
    pub mutual_steps: usize,
    /// Which weights were evaluated: `teacher` after mutual learning, else `student`.
    pub evaluated: String,
    pub burn_in_eval: EvalResult,
    pub final_eval: EvalResult,
    pub idempotency: Idempotency,
    pub l_dcp_first10: f64,
    pub l_dcp_last10: f64,
    pub mean_pseudo_fraction: Option<f64>,
}

/// Stepwise trainer; `run` drives it end to end.
pub struct Trainer {
    cfg: RunConfig,
    det: Detector,
    data: Dataset,
    student: ParamStore,
    teacher: Option<ParamStore>,
    sampling: ChaCha8Rng,
    augment: ChaCha8Rng,
    step: usize,
    rows: Vec<MetricsRow>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let det = Detector::new(&cfg)?;
        let data = generate_dataset(&cfg.data, cfg.seed)?;
        let student = det.init_params(cfg.seed)?;
        Ok(Self {
            sampling: stream(cfg.seed, Stream::Sampling),
            augment: stream(cfg.seed, Stream::Augment),
            cfg,
            det,
            data,
            student,
            teacher: None,
            step: 0,
            rows: Vec::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn detector(&self) -> &Detector {
        &self.det
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn student(&self) -> &ParamStore {
        &self.student
    }

    pub fn teacher(&self) -> Option<&ParamStore> {
        self.teacher.as_ref()
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    /// Weights that represent the model: the teacher once it exists.
    pub fn deployed(&self) -> &ParamStore {
        self.teacher.as_ref().unwrap_or(&self.student)
    }

    fn sample(&mut self, n: usize) -> Vec<usize> {
        (0..self.cfg.train.batch_size).map(|_| self.sampling.gen_range(0..n)).collect()
    }

    /// Supervised step on a source batch: `L_sup + L_dcp`.
    pub fn burn_in_step(&mut self) -> Result<&MetricsRow> {
        let idx = self.sample(self.data.source.len());
        let scenes: Vec<&SyntheticScene> = idx.iter().map(|&i| &self.data.source[i]).collect();
        let tape = Tape::new();
        let bound = self.student.bind(&tape);
        let p = Params::new(&self.student, &bound);
        let (l_sup, l_dcp) = self.supervised_terms(&tape, &p, &scenes)?;
        let total = match l_dcp {
            Some(d) => tape.add(l_sup, d)?,
            None => l_sup,
        };
        let grads = tape.backward(total)?;
        self.student.zero_grads();
        self.student.absorb_grads(&bound, &grads)?;
        self.student.sgd_step(self.cfg.train.lr)?;
        self.step += 1;
        self.rows.push(MetricsRow {
            iteration: self.step,
            l_sup: tape.item(l_sup),
            l_dcp: l_dcp.map_or(0.0, |d| tape.item(d)),
            l_mt: None,
            pseudo_count: None,
            eval_acc: None,
        });
        Ok(self.rows.last().expect("row pushed"))
    }

    fn supervised_terms(
        &self,
        tape: &Tape<f64>,
        p: &Params<'_>,
        scenes: &[&SyntheticScene],
    ) -> Result<(crate::tape::Var, Option<crate::tape::Var>)> {
        let imgs: Vec<&ImagePlane<f64>> = scenes.iter().map(|s| &s.image).collect();
        let batch = self.det.prepare(&imgs)?;
        let f = self.det.forward(tape, p, &batch)?;
        let labels: Vec<i32> = scenes.iter().flat_map(|s| s.labels.iter().copied()).collect();
        let l = detection_loss(tape, f.logits, &labels, &mean_weights(labels.len()))?;
        Ok((l, f.l_dcp))
    }

    /// Copies the student into the teacher; mutual steps need it.
    pub fn start_mutual(&mut self) {
        if self.teacher.is_none() {
            self.teacher = Some(self.student.clone());
        }
    }

    /// One mutual-learning step. The teacher labels a weak target view, the
    /// student trains on the strong view plus a source batch of equal size,
    /// then EMA (and every `ssm_step` steps, SSM) runs.
    pub fn mutual_step(&mut self, mutual_index: usize) -> Result<&MetricsRow> {
        if self.teacher.is_none() {
            return Err(invalid("mutual_step before start_mutual"));
        }
        let tidx = self.sample(self.data.target_unlabeled.len());
        let sidx = self.sample(self.data.source.len());
        let mut weak = Vec::with_capacity(tidx.len());
        let mut strong = Vec::with_capacity(tidx.len());
        for &i in &tidx {
            let w = weak_augment(&mut self.augment, &self.data.target_unlabeled[i].image, &self.cfg.augment);
            let s = strong_augment(&mut self.augment, &w, &self.cfg.augment, self.det.plan(), self.det.radial());
            weak.push(w);
            strong.push(s);
        }

        let preds = {
            let teacher = self.teacher.as_ref().expect("checked above");
            let tape = Tape::new();
            let bound = teacher.bind_frozen(&tape);
            let batch = self.det.prepare(&weak.iter().collect::<Vec<_>>())?;
            let f = self.det.forward(&tape, &Params::new(teacher, &bound), &batch)?;
            let v = tape.value(f.logits);
            predict(&v)
        };
        let (labels, mask) = pseudo_labels(&preds, self.cfg.train.threshold);
        let kept = mask.iter().filter(|&&m| m > 0.0).count();

        let tape = Tape::new();
        let bound = self.student.bind(&tape);
        let p = Params::new(&self.student, &bound);
        let tb = self.det.prepare(&strong.iter().collect::<Vec<_>>())?;
        let ft = self.det.forward(&tape, &p, &tb)?;
        let l_mt = detection_loss(&tape, ft.logits, &labels, &masked_weights(&mask))?;
        let src: Vec<&SyntheticScene> = sidx.iter().map(|&i| &self.data.source[i]).collect();
        let (l_sup, l_dcp) = self.supervised_terms(&tape, &p, &src)?;
        let mut total = tape.add(l_mt, l_sup)?;
        let mut dcp_value = 0.0;
        for d in [l_dcp, ft.l_dcp].into_iter().flatten() {
            dcp_value += tape.item(d);
            total = tape.add(total, d)?;
        }
        let grads = tape.backward(total)?;
        self.student.zero_grads();
        self.student.absorb_grads(&bound, &grads)?;
        self.student.sgd_step(self.cfg.train.lr)?;

        let t = &self.cfg.train;
        let teacher = self.teacher.as_mut().expect("set before the step");
        apply_ema(teacher, &self.student, t.alpha_ema)?;
        if self.cfg.ablation.ssm && (mutual_index + 1).is_multiple_of(t.ssm_step) {
            apply_ssm(&mut self.student, teacher, t.alpha_ssm)?;
            log::debug!("ssm pull at mutual step {}", mutual_index + 1);
        }
        self.step += 1;
        self.rows.push(MetricsRow {
            iteration: self.step,
            l_sup: tape.item(l_sup),
            l_dcp: dcp_value,
            l_mt: Some(tape.item(l_mt)),
            pseudo_count: Some(kept),
            eval_acc: None,
        });
        Ok(self.rows.last().expect("row pushed"))
    }

    pub fn evaluate_deployed(&self) -> Result<EvalResult> {
        evaluate(&self.det, self.deployed(), &self.data.target_eval)
    }

    fn idempotency(&self) -> Result<f64> {
        let imgs: Vec<&ImagePlane<f64>> = self
            .data
            .target_eval
            .iter()
            .take(IDEMPOTENCY_IMAGES)
            .map(|s| &s.image)
            .collect();
        self.det.idempotency_ratio(self.deployed(), &imgs)
    }

    fn mark_eval(&mut self, acc: f64) {
        if let Some(r) = self.rows.last_mut() {
            r.eval_acc = Some(acc);
        }
    }

    /// Runs both stages and returns the summary.
    pub fn run(&mut self) -> Result<Summary> {
        let t = self.cfg.train.clone();
        let init = self.idempotency()?;
        for i in 0..t.burn_in_steps {
            let r = self.burn_in_step()?;
            if i % 100 == 0 {
                log::info!("burn-in {i}: l_sup {:.4} l_dcp {:.4}", r.l_sup, r.l_dcp);
            }
            if t.eval_every > 0 && (i + 1) % t.eval_every == 0 {
                let acc = self.evaluate_deployed()?.mean;
                self.mark_eval(acc);
            }
        }
        let burn_in_eval = self.evaluate_deployed()?;
        self.mark_eval(burn_in_eval.mean);
        let after_burn_in = self.idempotency()?;
        log::info!("after burn-in: target accuracy {:.4}", burn_in_eval.mean);

        let dcp: Vec<f64> = self.rows.iter().map(|r| r.l_dcp).collect();
        let avg = |s: &[f64]| if s.is_empty() { f64::NAN } else { s.iter().sum::<f64>() / s.len() as f64 };
        let l_dcp_first10 = avg(&dcp[..dcp.len().min(10)]);
        let l_dcp_last10 = avg(&dcp[dcp.len().saturating_sub(10)..]);

        let mut kept = 0usize;
        if t.mutual_steps > 0 {
            self.start_mutual();
            for i in 0..t.mutual_steps {
                let r = self.mutual_step(i)?;
                kept += r.pseudo_count.unwrap_or(0);
                if i % 100 == 0 {
                    log::info!(
                        "mutual {i}: l_sup {:.4} l_mt {:.4} kept {}",
                        r.l_sup,
                        r.l_mt.unwrap_or(f64::NAN),
                        r.pseudo_count.unwrap_or(0)
                    );
                }
                if t.eval_every > 0 && (i + 1) % t.eval_every == 0 {
                    let acc = self.evaluate_deployed()?.mean;
                    self.mark_eval(acc);
                }
            }
        }
        let final_eval = self.evaluate_deployed()?;
        self.mark_eval(final_eval.mean);
        log::info!("final target accuracy {:.4}", final_eval.mean);
        let cells_per_step = (t.batch_size * self.det.cells()) as f64;
        Ok(Summary {
            seed: self.cfg.seed,
            mode: format!("{:?}", self.cfg.said.mode).to_lowercase(),
            said: self.cfg.ablation.said,
            coupling: self.cfg.ablation.coupling,
            ssm: self.cfg.ablation.ssm,
            burn_in_steps: t.burn_in_steps,
            mutual_steps: t.mutual_steps,
            evaluated: if self.teacher.is_some() { "teacher" } else { "student" }.into(),
            burn_in_eval,
            final_eval,
            idempotency: Idempotency {
                init,
                after_burn_in,
                last: self.idempotency()?,
            },
            l_dcp_first10,
            l_dcp_last10,
            mean_pseudo_fraction: (t.mutual_steps > 0).then(|| kept as f64 / (t.mutual_steps as f64 * cells_per_step)),
        })
    }

    /// Writes `config.json`, `metrics.csv`, `summary.json`, `losses.svg` and,
    /// when enabled, the checkpoints into `dir`.
    pub fn write_outputs(&self, dir: &Path, summary: &Summary) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: &str, body: String| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, body)?;
            written.push(p);
            Ok(())
        };
        put("config.json", self.cfg.to_json())?;
        put("metrics.csv", metrics_csv(&self.rows))?;
        put("summary.json", serde_json::to_string_pretty(summary)?)?;
        let series = |f: fn(&MetricsRow) -> Option<f64>| -> Vec<(f64, f64)> {
            self.rows.iter().filter_map(|r| f(r).map(|v| (r.iteration as f64, v))).collect()
        };
        put(
            "losses.svg",
            line_chart(
                "training losses",
                "iteration",
                &[
                    ("l_sup", series(|r| Some(r.l_sup))),
                    ("l_dcp", series(|r| Some(r.l_dcp))),
                    ("l_mt", series(|r| r.l_mt)),
                ],
            ),
        )?;
        if self.cfg.train.checkpoint {
            let (b, m) = self.student.save(&dir.join("student"))?;
            written.extend([b, m]);
            if let Some(t) = &self.teacher {
                let (b, m) = t.save(&dir.join("teacher"))?;
                written.extend([b, m]);
            }
        }
        Ok(written)
    }
}

/// Trains with `cfg` and, if `out` is given, writes the run directory.
pub fn run(cfg: RunConfig, out: Option<&Path>) -> Result<Summary> {
    let mut t = Trainer::new(cfg)?;
    let s = t.run()?;
    if let Some(dir) = out {
        t.write_outputs(dir, &s)?;
    }
    Ok(s)
}

/// Evaluates saved weights on the target evaluation split of `cfg`.
pub fn evaluate_checkpoint(cfg: &RunConfig, weights: &ParamStore) -> Result<EvalResult> {
    let det = Detector::new(cfg)?;
    let expected = det.init_params(cfg.seed)?;
    if !expected.same_layout(weights) {
        return Err(invalid("checkpoint does not match the configured model"));
    }
    let data = generate_dataset(&cfg.data, cfg.seed)?;
    evaluate(&det, weights, &data.target_eval)
}
