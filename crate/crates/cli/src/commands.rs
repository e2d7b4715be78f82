use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use ssdc_core::config::{FilterMode, RunConfig};
use ssdc_core::filter::{make_bank, make_hard_with};
use ssdc_core::io::{read_pnm, write_pgm, write_planes, write_spectrum};
use ssdc_core::model::Detector;
use ssdc_core::said::{decouple, loss_from_stats, pcc_stats, DecoupleLossCfg, PccStats, SAID_LAYOUT};
use ssdc_core::spectral::{radial_field, radial_profile, Fft2d};
use ssdc_core::svg::line_chart;
use ssdc_core::trainer::{self, EvalResult, Summary};
use ssdc_core::{ImagePlane, ParamStore};

use crate::{Axis, Mode, Preset, RunArgs};

const PROFILE_BINS: usize = 32;

/// Config file or preset, then command-line overrides, then validation.
pub fn resolve(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => match run.preset {
            Preset::Default => RunConfig::default(),
            Preset::Benchmark => RunConfig::benchmark(),
        },
    };
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(o) = &run.out {
        cfg.out = o.to_string_lossy().into_owned();
    }
    if let Some(m) = run.mode {
        cfg.said.mode = match m {
            Mode::Hard => FilterMode::Hard,
            Mode::Soft => FilterMode::Soft,
            Mode::Free => FilterMode::Free,
        };
    }
    if run.no_said {
        cfg.ablation.said = false;
    }
    if run.no_coupling {
        cfg.ablation.coupling = false;
    }
    if run.no_ssm {
        cfg.ablation.ssm = false;
    }
    if run.source_only {
        cfg = cfg.source_only();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Offset that keeps a plane with negative values inside a byte.
fn pgm_offset(values: &[f64]) -> i32 {
    if values.iter().any(|&v| v < -0.5 / 255.0) {
        128
    } else {
        0
    }
}

#[derive(Serialize)]
struct DecomposeReport {
    mode: String,
    height: usize,
    width: usize,
    /// Stored byte = round(255 * value) + offset.
    di_offset: i32,
    ds_offset: i32,
    l_dcp: f64,
    pcc: PccStats<f64>,
    pcc_degenerate: bool,
    conservation_error: f64,
}

pub fn decompose(image: &Path, run: &RunArgs, sigma_h: Option<f64>, checkpoint: Option<&Path>) -> Result<()> {
    let mut cfg = resolve(run)?;
    if let Some(s) = sigma_h {
        cfg.said.sigma_h = s;
    }
    cfg.validate()?;
    let channels = read_pnm::<f64>(image).with_context(|| format!("reading {}", image.display()))?;
    let (h, w) = (channels[0].height(), channels[0].width());
    let n = channels.len() as f64;
    let gray = ImagePlane::new(
        h,
        w,
        (0..h * w).map(|i| channels.iter().map(|c| c.data()[i]).sum::<f64>() / n).collect(),
    )?;
    let plan = Fft2d::new(h, w)?;
    let radial = radial_field(h, w)?;
    let spec = plan.forward(&gray)?;
    let filter = match cfg.said.mode {
        FilterMode::Hard => make_hard_with(&radial, cfg.said.sigma_h, cfg.said.hard_assignment)?,
        mode => {
            let side = cfg.image_size();
            if h != side || w != side {
                bail!("{mode:?} mode filters {side}x{side} images (data.grid = {}); got {h}x{w}", cfg.data.grid);
            }
            cfg.ablation.said = true;
            let det = Detector::new(&cfg)?;
            let store = match checkpoint {
                Some(stem) => ParamStore::load(stem).with_context(|| format!("loading {}", stem.display()))?,
                None => det.init_params(cfg.seed)?,
            };
            det.image_filter(&store, &gray)?
        }
    };
    let out = decouple(&spec, &filter)?;
    let loss_cfg = DecoupleLossCfg::new(cfg.said.k, cfg.said.epsilon, cfg.said.lambda_dcp)?.with_input(cfg.said.pcc_input);
    let (stats, degenerate) = pcc_stats(&out, loss_cfg.input())?;
    let conservation = out.conservation_error(spec.amplitude());
    let scale = spec.amplitude().iter().fold(1.0f64, |m, &a| m.max(a));
    if conservation > 1e-12 * scale {
        bail!("decomposition does not conserve the amplitude (error {conservation:e})");
    }

    let (di_img, _) = plan.synthesize(&out.di, &out.phase);
    let (ds_img, _) = plan.synthesize(&out.ds, &out.phase);
    let dir = out_dir(&cfg)?;
    let (di_off, ds_off) = (pgm_offset(&di_img), pgm_offset(&ds_img));
    write_pgm(&dir.join("di.pgm"), &ImagePlane::new(h, w, di_img.clone())?, di_off)?;
    write_pgm(&dir.join("ds.pgm"), &ImagePlane::new(h, w, ds_img.clone())?, ds_off)?;
    write_spectrum(&dir.join("spectrum"), &spec)?;
    let mut names: Vec<&str> = SAID_LAYOUT.to_vec();
    names.push("h_inv");
    let mut planes: Vec<&[f64]> = out.planes().to_vec();
    planes.push(filter.h_inv());
    write_planes(&dir.join("said"), h, w, &names, &planes)?;
    write_planes(&dir.join("images"), h, w, &["di", "ds"], &[&di_img, &ds_img])?;

    let energy = |v: &[f64]| {
        let sq: Vec<f64> = v.iter().map(|a| a * a).collect();
        radial_profile(&sq, &radial, PROFILE_BINS)
            .into_iter()
            .enumerate()
            .map(|(i, e)| ((i as f64 + 0.5) / PROFILE_BINS as f64, e.ln_1p()))
            .collect::<Vec<_>>()
    };
    let svg = line_chart(
        "radial energy ln(1 + mean |A|^2)",
        "radius / max radius",
        &[("amplitude", energy(spec.amplitude())), ("di", energy(&out.di)), ("ds", energy(&out.ds))],
    );
    fs::write(dir.join("profiles.svg"), svg)?;
    write_json(
        &dir.join("decompose.json"),
        &DecomposeReport {
            mode: format!("{:?}", cfg.said.mode).to_lowercase(),
            height: h,
            width: w,
            di_offset: di_off,
            ds_offset: ds_off,
            l_dcp: loss_from_stats(&stats, &loss_cfg),
            pcc: stats,
            pcc_degenerate: degenerate,
            conservation_error: conservation,
        },
    )?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    println!("{}", dir.display());
    Ok(())
}

pub fn filterbank(run: &RunArgs, n_filters: Option<usize>, size: Option<usize>) -> Result<()> {
    let mut cfg = resolve(run)?;
    if let Some(n) = n_filters {
        cfg.said.n_filters = n;
    }
    cfg.validate()?;
    let side = size.unwrap_or_else(|| cfg.image_size());
    let radial = radial_field(side, side)?;
    let bank = make_bank(&radial, cfg.said.n_filters)?;
    let dir = out_dir(&cfg)?;
    let names: Vec<String> = (0..bank.n_filters()).map(|i| format!("g{i}")).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let planes: Vec<&[f64]> = (0..bank.n_filters()).map(|i| bank.peak_normalized(i)).collect();
    write_planes(&dir.join("bank"), side, side, &name_refs, &planes)?;
    // bank.json is both the raw sidecar and the bank description.
    let sidecar = dir.join("bank.json");
    let mut meta: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&fs::read_to_string(&sidecar)?)?;
    let serde_json::Value::Object(extra) = serde_json::to_value(bank.metadata())? else {
        unreachable!("metadata serializes to an object")
    };
    meta.extend(extra);
    write_json(&sidecar, &meta)?;
    // At most eight evenly spaced profiles keep the chart legible.
    let step = bank.n_filters().div_ceil(8);
    let series: Vec<(&str, Vec<(f64, f64)>)> = (0..bank.n_filters())
        .step_by(step)
        .map(|i| {
            let prof = radial_profile(bank.peak_normalized(i), &radial, 2 * PROFILE_BINS);
            let pts = prof
                .into_iter()
                .enumerate()
                .map(|(b, v)| ((b as f64 + 0.5) / (2 * PROFILE_BINS) as f64, v))
                .collect();
            (name_refs[i], pts)
        })
        .collect();
    fs::write(dir.join("bank.svg"), line_chart("normalized band responses", "radius / max radius", &series))?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    println!("{}", dir.display());
    Ok(())
}

fn train_into(cfg: RunConfig, dir: &Path) -> Result<Summary> {
    let mut t = trainer::Trainer::new(cfg)?;
    let summary = t.run()?;
    t.write_outputs(dir, &summary)?;
    Ok(summary)
}

pub fn train(run: &RunArgs) -> Result<()> {
    let cfg = resolve(run)?;
    let dir = out_dir(&cfg)?;
    let s = train_into(cfg, &dir)?;
    println!("{}", serde_json::to_string(&s.final_eval)?);
    Ok(())
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::FilterCount => "filter_count",
        Axis::K => "k",
        Axis::LambdaDcp => "lambda_dcp",
        Axis::SsmStep => "ssm_step",
    }
}

fn apply_axis(cfg: &mut RunConfig, axis: Axis, v: f64) -> Result<()> {
    let whole = || -> Result<usize> {
        if v.fract() != 0.0 || v < 0.0 {
            bail!("{} takes whole numbers, got {v}", axis_name(axis));
        }
        Ok(v as usize)
    };
    match axis {
        Axis::FilterCount => cfg.said.n_filters = whole()?,
        Axis::K => cfg.said.k = u32::try_from(whole()?)?,
        Axis::LambdaDcp => cfg.said.lambda_dcp = v,
        Axis::SsmStep => cfg.train.ssm_step = whole()?,
    }
    cfg.validate()?;
    Ok(())
}

pub fn sweep(run: &RunArgs, axis: Axis, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let base = resolve(run)?;
    let root = out_dir(&base)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut csv = String::from("axis,value,eval_acc,burn_in_acc,l_dcp_last10,idempotency_final\n");
    for v in sorted {
        let mut cfg = base.clone();
        apply_axis(&mut cfg, axis, v)?;
        let dir = root.join(format!("{}_{v}", axis_name(axis)));
        cfg.out = dir.to_string_lossy().into_owned();
        log::info!("sweep {} = {v}", axis_name(axis));
        let s = train_into(cfg, &dir)?;
        csv.push_str(&format!(
            "{},{v},{},{},{},{}\n",
            axis_name(axis),
            s.final_eval.mean,
            s.burn_in_eval.mean,
            s.l_dcp_last10,
            s.idempotency.last
        ));
    }
    fs::write(root.join("sweep.csv"), &csv)?;
    fs::write(root.join("config.json"), base.to_json())?;
    print!("{csv}");
    Ok(())
}

pub fn eval(run: &RunArgs, checkpoint: &Path) -> Result<()> {
    let cfg = resolve(run)?;
    let weights = ParamStore::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let r: EvalResult = trainer::evaluate_checkpoint(&cfg, &weights)?;
    if run.out.is_some() {
        let dir = out_dir(&cfg)?;
        write_json(&dir.join("eval.json"), &r)?;
        fs::write(dir.join("config.json"), cfg.to_json())?;
    }
    println!("{}", serde_json::to_string(&r)?);
    Ok(())
}
