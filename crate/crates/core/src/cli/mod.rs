//! Library side of the `csrnet` command: training, evaluation, single-image
//! super-resolution, dataset degradation and checkpoint inspection.

mod config;

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub use config::{
    DataConfig, EvalConfig, LogConfig, OptimizerConfig, RunConfig, ScheduleConfig, KEYS,
};

use crate::autograd::LayerGraph;
use crate::data::{self, EpochSampler, ImageBuffer, Manifest, PatchBatch, TrainingSet};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalProtocol, FloatImage};
use crate::model::{self, build_csrnet, init_params, save_checkpoint, CsrnetConfig};
use crate::optim::{Optimizer, ScheduleState};
use crate::tensor::Scalar;

pub const LOSS_LOG: &str = "loss.tsv";
pub const EFFECTIVE_CONFIG: &str = "effective_config.txt";
pub const FINAL_CHECKPOINT: &str = "final.csrn";
pub const ABORT_CHECKPOINT: &str = "abort.csrn";

/// One optimization step on `batch`: forward, MAE loss, backward, update at
/// the schedule's current rate. Returns the loss before the update.
pub fn train_step<T: Scalar>(
    g: &mut LayerGraph<T>,
    optimizer: &mut Optimizer,
    lr: f64,
    batch: &PatchBatch<T>,
) -> Result<f64> {
    let out = g.forward(&batch.lr)?;
    let (loss, grad) = metrics::mae_loss(&out, &batch.hr)?;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("loss is {loss}")));
    }
    g.zero_grads();
    g.backward(&grad)?;
    optimizer.step(g.params_mut(), lr)?;
    Ok(loss)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub iterations: usize,
    pub final_loss: Option<f64>,
    pub out_dir: PathBuf,
}

/// Run the training loop described by `cfg`, writing the effective
/// configuration, a per-iteration loss log, periodic checkpoints and
/// `final.csrn` under `log.out_dir`. On a numeric failure the current
/// weights are saved to `abort.csrn` before the error is returned.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let out_dir = cfg.log.out_dir.clone();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let cfg_path = out_dir.join(EFFECTIVE_CONFIG);
    fs::write(&cfg_path, cfg.dump()).map_err(|e| Error::io(&cfg_path, e))?;

    let mut g: LayerGraph<f32> = build_csrnet(&cfg.model)?;
    init_params(&mut g, cfg.data.seed);
    if cfg.data.epochs == 0 {
        save_checkpoint(&g, &cfg.model, out_dir.join(FINAL_CHECKPOINT))?;
        return Ok(TrainSummary {
            iterations: 0,
            final_loss: None,
            out_dir,
        });
    }

    let set = TrainingSet::load(&cfg.data.train_dir, cfg.model.scale, cfg.data.patch)?;
    let per_epoch = match cfg.data.iterations_per_epoch {
        0 => set.len().div_ceil(cfg.data.batch),
        n => n,
    };
    log::info!(
        "training on {} images, {per_epoch} iterations per epoch, {} epochs",
        set.len(),
        cfg.data.epochs
    );
    let mut optimizer = cfg.optimizer();
    let mut schedule = cfg.schedule_state()?;
    let log_path = out_dir.join(LOSS_LOG);
    let mut log_file =
        BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    writeln!(log_file, "iteration\tepoch\tlr\tloss").map_err(|e| Error::io(&log_path, e))?;

    let mut iteration = 0;
    let mut final_loss = None;
    for epoch in 0..cfg.data.epochs {
        let mut sampler = EpochSampler::new(
            &set,
            cfg.data.seed,
            epoch as u64,
            cfg.data.patch,
            cfg.data.augment,
        );
        for _ in 0..per_epoch {
            let step = run_iteration(
                &mut g,
                &mut optimizer,
                &mut schedule,
                &mut sampler,
                cfg.data.batch,
                per_epoch,
            );
            let (lr, loss) = match step {
                Ok(v) => v,
                Err(e) => {
                    let _ = log_file.flush();
                    if matches!(e, Error::Numeric(_)) {
                        save_checkpoint(&g, &cfg.model, out_dir.join(ABORT_CHECKPOINT))?;
                    }
                    return Err(e);
                }
            };
            iteration += 1;
            final_loss = Some(loss);
            writeln!(log_file, "{iteration}\t{}\t{lr}\t{loss}", epoch + 1)
                .map_err(|e| Error::io(&log_path, e))?;
        }
        let interval = cfg.log.checkpoint_interval;
        if interval > 0 && (epoch + 1) % interval == 0 && epoch + 1 < cfg.data.epochs {
            save_checkpoint(
                &g,
                &cfg.model,
                out_dir.join(format!("epoch_{:04}.csrn", epoch + 1)),
            )?;
        }
        log::info!("epoch {} done, last loss {:?}", epoch + 1, final_loss);
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    save_checkpoint(&g, &cfg.model, out_dir.join(FINAL_CHECKPOINT))?;
    Ok(TrainSummary {
        iterations: iteration,
        final_loss,
        out_dir,
    })
}

fn run_iteration(
    g: &mut LayerGraph<f32>,
    optimizer: &mut Optimizer,
    schedule: &mut ScheduleState,
    sampler: &mut EpochSampler<'_>,
    batch: usize,
    per_epoch: usize,
) -> Result<(f64, f64)> {
    let b = sampler.next_batch(batch)?;
    let lr = schedule.lr()?;
    let loss = train_step(g, optimizer, lr, &b)?;
    schedule.advance(1.0 / per_epoch as f64);
    Ok((lr, loss))
}

/// Run the network on one image (grayscale is replicated) and quantize the
/// result to an 8-bit RGB image.
pub fn super_resolve(g: &mut LayerGraph<f32>, img: &ImageBuffer) -> Result<ImageBuffer> {
    let out = g.infer(&img.to_unit_tensor())?;
    ImageBuffer::from_unit_tensor(&out)
}

/// PSNR (dB) and SSIM of one prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub name: String,
    pub model: Option<Score>,
    pub bicubic: Option<Score>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Images without a usable pair, with the reason.
    pub skipped: Vec<(String, String)>,
}

fn mean_of(scores: impl Iterator<Item = Score>) -> Option<Score> {
    let (mut n, mut p, mut s) = (0usize, 0.0, 0.0);
    for sc in scores {
        n += 1;
        p += sc.psnr;
        s += sc.ssim;
    }
    (n > 0).then(|| Score {
        psnr: p / n as f64,
        ssim: s / n as f64,
    })
}

impl EvalReport {
    pub fn mean_model(&self) -> Option<Score> {
        mean_of(self.rows.iter().filter_map(|r| r.model))
    }

    pub fn mean_bicubic(&self) -> Option<Score> {
        mean_of(self.rows.iter().filter_map(|r| r.bicubic))
    }

    /// Tab-separated table: one line per image, then the mean.
    pub fn to_tsv(&self) -> String {
        let cell = |s: Option<Score>| {
            s.map_or("-\t-".to_string(), |s| {
                format!("{:.4}\t{:.4}", s.psnr, s.ssim)
            })
        };
        let mut out = String::from("image\tpsnr\tssim\tbicubic_psnr\tbicubic_ssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}", r.name, cell(r.model), cell(r.bicubic));
        }
        let _ = writeln!(
            out,
            "mean\t{}\t{}",
            cell(self.mean_model()),
            cell(self.mean_bicubic())
        );
        for (name, why) in &self.skipped {
            let _ = writeln!(out, "# skipped\t{name}\t{why}");
        }
        out
    }
}

fn score(pred: &FloatImage, hr: &FloatImage, proto: &EvalProtocol) -> Result<Score> {
    Ok(Score {
        psnr: metrics::psnr(pred, hr, proto)?,
        ssim: metrics::ssim(pred, hr, proto)?,
    })
}

/// Evaluation pairs of `dir`: HR images from `dir/HR` (or `dir` itself),
/// cropped to a multiple of `scale`, with LR images from `dir/LR_x{scale}`.
/// When that directory does not exist the LR images are synthesised by
/// bicubic downscaling.
pub fn eval_pairs(
    dir: &Path,
    scale: usize,
) -> Result<(
    Vec<(String, ImageBuffer, ImageBuffer)>,
    Vec<(String, String)>,
)> {
    let hr_dir = dir.join("HR");
    let hr_dir = if hr_dir.is_dir() {
        hr_dir
    } else {
        dir.to_path_buf()
    };
    let lr_dir = dir.join(data::lr_dir_name(scale));
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for hr_path in data::list_pngs(&hr_dir)? {
        let name = hr_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let pair = data::load_image(&hr_path).and_then(|hr| {
            let hr = hr.crop_to_multiple(scale)?;
            let lr = if lr_dir.is_dir() {
                data::load_image(&lr_dir.join(&name))?
            } else {
                data::degrade(&hr, scale)?
            };
            if (lr.width * scale, lr.height * scale) != (hr.width, hr.height) {
                return Err(Error::config(format!(
                    "LR {}x{} does not match HR {}x{} at scale {scale}",
                    lr.width, lr.height, hr.width, hr.height
                )));
            }
            Ok((hr, lr))
        });
        match pair {
            Ok((hr, lr)) => pairs.push((name, hr, lr)),
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                skipped.push((name, e.to_string()));
            }
        }
    }
    Ok((pairs, skipped))
}

/// Score a model and/or the bicubic baseline on every pair under `dir`.
pub fn evaluate(
    mut model: Option<&mut LayerGraph<f32>>,
    dir: &Path,
    scale: usize,
    proto: &EvalProtocol,
    bicubic: bool,
) -> Result<EvalReport> {
    let (pairs, skipped) = eval_pairs(dir, scale)?;
    if pairs.is_empty() {
        return Err(Error::config(format!(
            "no evaluation pairs in {}",
            dir.display()
        )));
    }
    let mut report = EvalReport {
        rows: Vec::new(),
        skipped,
    };
    for (name, hr, lr) in pairs {
        let hr_f = FloatImage::from(&hr.to_rgb());
        let model_score = match model.as_deref_mut() {
            Some(g) => {
                let out = g.infer(&lr.to_unit_tensor())?;
                Some(score(&FloatImage::from_unit_tensor(&out)?, &hr_f, proto)?)
            }
            None => None,
        };
        let bicubic_score = if bicubic {
            let up = data::bicubic_resize(&lr.to_rgb(), hr.width, hr.height)?;
            Some(score(&FloatImage::from(&up), &hr_f, proto)?)
        } else {
            None
        };
        log::info!("{name}: model {model_score:?} bicubic {bicubic_score:?}");
        report.rows.push(EvalRow {
            name,
            model: model_score,
            bicubic: bicubic_score,
        });
    }
    Ok(report)
}

/// Write `LR_x{scale}` images and a manifest for every PNG in `hr_dir`.
pub fn degrade_dir(hr_dir: &Path, scale: usize, out_dir: &Path) -> Result<Manifest> {
    if !matches!(scale, 2..=4) {
        return Err(Error::config(format!(
            "scale must be 2, 3 or 4, got {scale}"
        )));
    }
    data::make_lr_set(hr_dir, scale, out_dir)
}

/// Report for the `inspect` command. Any decoding problem surfaces as an
/// integrity, version or schema error.
pub fn inspect(path: &Path) -> Result<String> {
    let ckpt = model::read_checkpoint(path)?;
    Ok(model::inspect_checkpoint(&ckpt))
}

/// Load a checkpoint and make sure it was trained for `scale`, if given.
pub fn load_model(path: &Path, scale: Option<usize>) -> Result<(LayerGraph<f32>, CsrnetConfig)> {
    let (g, cfg) = model::load_checkpoint(path)?;
    if let Some(s) = scale {
        if s != cfg.scale {
            return Err(Error::config(format!(
                "checkpoint is for scale {}, requested {s}",
                cfg.scale
            )));
        }
    }
    Ok((g, cfg))
}
