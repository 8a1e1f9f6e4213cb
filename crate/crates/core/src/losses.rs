//! Training objective: negative SSIM, focal segmentation confidence,
//! perceptual contrastive loss (PCL) and the learned-perceptual-style image
//! similarity loss (LPISL), combined as
//!
//! ```text
//! total = λ1·ssim_loss + λ2·seg_loss + λ3·pcl + λ4·lpisl
//! ```
//!
//! Only the derained image `xD` carries gradients. Features of the ground
//! truth `xG` and the rainy negative `xR` are computed on detached copies.

use std::fmt;
use std::str::FromStr;

use sapnet_autograd::{Tape, Var};

use crate::features::{ExtractorConfig, FeatureExtractor};
use crate::image::ImageTensor;
use crate::metrics::ssim_graph;
use crate::segmenter::focal_seg_loss;
use crate::{Error, Result};

/// Denominator guard of the contrastive ratio.
pub const CONTRASTIVE_EPS: f64 = 1e-7;
const NORM_EPS: f64 = 1e-20;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    /// Per-tap contrastive weights.
    pub omega: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 0.1,
            lambda4: 0.1,
            omega: vec![0.25, 0.5, 1.0],
        }
    }
}

impl LossWeights {
    /// `((λ1·s + λ2·g) + λ3·p) + λ4·l`, the same association the graph uses.
    pub fn combine(&self, ssim_loss: f64, seg_loss: f64, pcl: f64, lpisl: f64) -> f64 {
        self.lambda1 * ssim_loss + self.lambda2 * seg_loss + self.lambda3 * pcl + self.lambda4 * lpisl
    }
}

/// Contrastive term variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContrastiveKind {
    /// Ratio of feature-space L1 distances over the extractor taps.
    Perceptual,
    /// Ratio of pixel-space L1 distances.
    L1,
}

impl fmt::Display for ContrastiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Perceptual => "pcl",
            Self::L1 => "l1",
        })
    }
}

impl FromStr for ContrastiveKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pcl" => Ok(Self::Perceptual),
            "l1" => Ok(Self::L1),
            other => Err(format!("unknown contrastive loss `{other}` (expected pcl or l1)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub contrastive: ContrastiveKind,
    /// Side of the square both images are resized to before LPISL.
    pub lpisl_size: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub extractor: ExtractorConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            contrastive: ContrastiveKind::Perceptual,
            lpisl_size: 256,
            focal_alpha: 1.0,
            focal_gamma: 2.0,
            extractor: ExtractorConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        for (key, v) in [
            ("loss.lambda1", w.lambda1),
            ("loss.lambda2", w.lambda2),
            ("loss.lambda3", w.lambda3),
            ("loss.lambda4", w.lambda4),
            ("loss.focal_alpha", self.focal_alpha),
            ("loss.focal_gamma", self.focal_gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a finite nonnegative number"));
            }
        }
        let min = self.extractor.min_input_side();
        if self.lpisl_size < min {
            return Err(Error::config("loss.lpisl_size", format!("must be at least {min}")));
        }
        if w.omega.len() != self.extractor.taps.len() {
            return Err(Error::config(
                "loss.omega",
                format!("{} weights for {} taps", w.omega.len(), self.extractor.taps.len()),
            ));
        }
        self.extractor.validate()
    }

    /// Whether any enabled term needs the feature extractor.
    pub fn needs_extractor(&self) -> bool {
        let w = &self.weights;
        w.lambda4 > 0.0 || (w.lambda3 > 0.0 && self.contrastive == ContrastiveKind::Perceptual)
    }
}

/// The four loss values and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ssim_loss: f64,
    pub seg_loss: f64,
    pub pcl: f64,
    pub lpisl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        w.combine(self.ssim_loss, self.seg_loss, self.pcl, self.lpisl)
    }

    pub fn is_finite(&self) -> bool {
        [self.ssim_loss, self.seg_loss, self.pcl, self.lpisl, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Componentwise mean with the total recomposed from the means.
    pub fn mean(items: &[LossBreakdown], w: &LossWeights) -> Self {
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        let mut out = Self {
            ssim_loss: avg(|b| b.ssim_loss),
            seg_loss: avg(|b| b.seg_loss),
            pcl: avg(|b| b.pcl),
            lpisl: avg(|b| b.lpisl),
            total: 0.0,
        };
        out.total = out.recompose(w);
        out
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ssim_loss={} seg_loss={} pcl={} lpisl={} total={}",
            self.ssim_loss, self.seg_loss, self.pcl, self.lpisl, self.total
        )
    }
}

fn same_dims(a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::Input(format!("image dimensions differ: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

fn mean_abs<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    (a - b).abs().mean()
}

/// `-SSIM(xD, xG)`.
pub fn negative_ssim_loss<'t>(xd: Var<'t>, xg: Var<'t>) -> Result<Var<'t>> {
    same_dims(&xd, &xg)?;
    Ok(-ssim_graph(xd, xg)?)
}

/// `Σ_i ω_i · L1(V_i(xD), V_i(xG)) / (L1(V_i(xD), V_i(xR)) + ε)`.
pub fn pcl<'t>(xd: Var<'t>, xg: Var<'t>, xr: Var<'t>, fe: &FeatureExtractor, omega: &[f64]) -> Result<Var<'t>> {
    same_dims(&xd, &xg)?;
    same_dims(&xd, &xr)?;
    if omega.len() != fe.tap_count() {
        return Err(Error::config(
            "loss.omega",
            format!("{} weights for {} taps", omega.len(), fe.tap_count()),
        ));
    }
    let fd = fe.extract(xd)?;
    let fg = fe.extract(xg.detach())?;
    let fr = fe.extract(xr.detach())?;
    let mut total: Option<Var<'t>> = None;
    for (i, &w) in omega.iter().enumerate() {
        let term = (mean_abs(fd[i], fg[i]) / (mean_abs(fd[i], fr[i]) + CONTRASTIVE_EPS)).scale(w);
        total = Some(match total {
            Some(t) => t + term,
            None => term,
        });
    }
    Ok(total.expect("at least one tap"))
}

/// Pixel-space contrastive ratio `L1(xD, xG) / (L1(xD, xR) + ε)`.
pub fn l1_contrastive<'t>(xd: Var<'t>, xg: Var<'t>, xr: Var<'t>) -> Result<Var<'t>> {
    same_dims(&xd, &xg)?;
    same_dims(&xd, &xr)?;
    Ok(mean_abs(xd, xg.detach()) / (mean_abs(xd, xr.detach()) + CONTRASTIVE_EPS))
}

fn unit_channels(v: Var<'_>) -> Var<'_> {
    v.div_spatial((v.square().sum_channels() + NORM_EPS).sqrt())
}

/// Mean over positions of the squared distance between channel-normalised
/// features of the two images after resizing both to `size x size`, summed
/// over taps.
pub fn lpisl<'t>(xd: Var<'t>, xg: Var<'t>, fe: &FeatureExtractor, size: usize) -> Result<Var<'t>> {
    same_dims(&xd, &xg)?;
    let fd = fe.extract(xd.resize_bilinear(size, size))?;
    let fg = fe.extract(xg.detach().resize_bilinear(size, size))?;
    let mut total: Option<Var<'t>> = None;
    for (d, g) in fd.into_iter().zip(fg) {
        let term = (unit_channels(d) - unit_channels(g)).square().sum_channels().mean();
        total = Some(match total {
            Some(t) => t + term,
            None => term,
        });
    }
    Ok(total.expect("at least one tap"))
}

/// Scalar loss graph together with its breakdown.
pub struct TotalLoss<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
}

/// Assembles the weighted objective. Terms whose weight is zero are skipped
/// and reported as 0; `segprobs = None` skips the segmentation term.
pub fn total_loss<'t>(
    xd: Var<'t>,
    xg: Var<'t>,
    xr: Var<'t>,
    segprobs: Option<Var<'t>>,
    fe: Option<&FeatureExtractor>,
    cfg: &LossConfig,
) -> Result<TotalLoss<'t>> {
    let w = &cfg.weights;
    let need_fe = || fe.ok_or_else(|| Error::config("loss.vgg", "an enabled loss term needs the feature extractor"));

    let ssim = negative_ssim_loss(xd, xg)?;
    let mut total = ssim.scale(w.lambda1);
    let mut breakdown = LossBreakdown {
        ssim_loss: ssim.item(),
        ..LossBreakdown::default()
    };
    if let Some(probs) = segprobs.filter(|_| w.lambda2 > 0.0) {
        let seg = focal_seg_loss(probs, cfg.focal_alpha, cfg.focal_gamma);
        breakdown.seg_loss = seg.item();
        total = total + seg.scale(w.lambda2);
    }
    if w.lambda3 > 0.0 {
        let c = match cfg.contrastive {
            ContrastiveKind::Perceptual => pcl(xd, xg, xr, need_fe()?, &w.omega)?,
            ContrastiveKind::L1 => l1_contrastive(xd, xg, xr)?,
        };
        breakdown.pcl = c.item();
        total = total + c.scale(w.lambda3);
    }
    if w.lambda4 > 0.0 {
        let l = lpisl(xd, xg, need_fe()?, cfg.lpisl_size)?;
        breakdown.lpisl = l.item();
        total = total + l.scale(w.lambda4);
    }
    breakdown.total = total.item();
    Ok(TotalLoss { total, breakdown })
}

/// Evaluates [`total_loss`] on plain images.
pub fn loss_breakdown(
    xd: &ImageTensor,
    xg: &ImageTensor,
    xr: &ImageTensor,
    segprobs: Option<&sapnet_autograd::Tensor>,
    fe: Option<&FeatureExtractor>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let c = |img: &ImageTensor| tape.constant(img.tensor());
    let probs = segprobs.map(|p| tape.constant(p));
    Ok(total_loss(c(xd), c(xg), c(xr), probs, fe, cfg)?.breakdown)
}
