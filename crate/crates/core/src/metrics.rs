//! Full-reference image quality: PSNR, SSIM and a batch evaluation report.
//!
//! SSIM follows the widespread Gaussian-window convention: 11x11 window with
//! `σ = 1.5`, `K1 = 0.01`, `K2 = 0.03`, data range 1, population (not sample)
//! statistics, averaged over the valid window positions of every RGB channel.
//! Libraries that use a uniform 7x7 window, sample covariance or luma-only
//! scoring report different numbers for the same images.

use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use sapnet_autograd::{Tape, Var};

use crate::data::PairedSample;
use crate::derain::{derain, DerainWeights, ModelConfig};
use crate::image::ImageTensor;
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - centre;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn check_pair(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Input(format!("image dimensions differ: {a:?} vs {b:?}")));
    }
    if a.len() != 3 {
        return Err(Error::Input(format!("expected [C, H, W] images, got {a:?}")));
    }
    Ok(())
}

/// Differentiable mean SSIM of two `[C, H, W]` values.
pub fn ssim_graph<'t>(x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    let (xs, ys) = (x.shape(), y.shape());
    check_pair(&xs, &ys)?;
    if xs[1] < SSIM_WINDOW || xs[2] < SSIM_WINDOW {
        return Err(Error::TooSmall {
            what: "SSIM",
            min_height: SSIM_WINDOW,
            min_width: SSIM_WINDOW,
            height: xs[1],
            width: xs[2],
        });
    }
    let window = Rc::new(gaussian_window(SSIM_WINDOW, SSIM_SIGMA));
    let blur = |v: Var<'t>| v.filter_valid_separable(Rc::clone(&window));
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;

    let mu_x = blur(x);
    let mu_y = blur(y);
    let mu_xx = mu_x.square();
    let mu_yy = mu_y.square();
    let mu_xy = mu_x * mu_y;
    let var_x = blur(x.square()) - mu_xx;
    let var_y = blur(y.square()) - mu_yy;
    let cov = blur(x * y) - mu_xy;

    let numerator = (mu_xy.scale(2.0) + c1) * (cov.scale(2.0) + c2);
    let denominator = (mu_xx + mu_yy + c1) * (var_x + var_y + c2);
    Ok((numerator / denominator).mean())
}

/// Mean SSIM of two images.
pub fn ssim_metric(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let tape = Tape::new();
    Ok(ssim_graph(tape.constant(a.tensor()), tape.constant(b.tensor()))?.item())
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the images are equal.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, data_range: f64) -> Result<f64> {
    check_pair(a.tensor().shape(), b.tensor().shape())?;
    let n = a.tensor().numel() as f64;
    let mse = a
        .tensor()
        .data()
        .iter()
        .zip(b.tensor().data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Formats a score, writing infinite PSNR as `inf`.
pub fn format_score(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_owned()
    } else {
        format!("{v:.6}")
    }
}

/// Anything that maps a rainy image to a restored one.
pub trait Restorer {
    fn restore(&self, rainy: &ImageTensor) -> Result<ImageTensor>;
}

/// Returns its input unchanged; the baseline every model should beat.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Restorer for Identity {
    fn restore(&self, rainy: &ImageTensor) -> Result<ImageTensor> {
        Ok(rainy.clone())
    }
}

/// A derain network with its weights.
#[derive(Clone, Debug)]
pub struct DerainModel {
    pub config: ModelConfig,
    pub weights: DerainWeights,
}

impl Restorer for DerainModel {
    fn restore(&self, rainy: &ImageTensor) -> Result<ImageTensor> {
        Ok(derain(rainy, &self.weights, &self.config)?.into_final())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_image: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    /// Builds a report; means are summed in list order.
    pub fn from_scores(per_image: Vec<ImageScore>) -> Self {
        let n = per_image.len() as f64;
        let mean = |f: fn(&ImageScore) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        let (mean_psnr, mean_ssim) = if per_image.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (mean(|s| s.psnr_db), mean(|s| s.ssim))
        };
        Self {
            per_image,
            mean_psnr,
            mean_ssim,
        }
    }

    /// Tab-separated report: header, one row per image, then a `MEAN` row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id\tpsnr_db\tssim\n");
        for s in &self.per_image {
            let _ = writeln!(out, "{}\t{}\t{}", s.id, format_score(s.psnr_db), format_score(s.ssim));
        }
        let _ = writeln!(
            out,
            "MEAN\t{}\t{}",
            format_score(self.mean_psnr),
            format_score(self.mean_ssim)
        );
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Restores every rainy image, clamps it to `[0, 1]` and scores it against
/// the clean image.
pub fn evaluate(model: &dyn Restorer, pairs: &[PairedSample]) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let restored = model.restore(&pair.rainy)?.clamp01();
        scores.push(ImageScore {
            id: pair.id.clone(),
            psnr_db: psnr(&restored, &pair.clean, 1.0)?,
            ssim: ssim_metric(&restored, &pair.clean)?,
        });
    }
    Ok(EvalReport::from_scores(scores))
}
