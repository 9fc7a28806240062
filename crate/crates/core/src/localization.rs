//! Saliency maps from the input gradient of the training objective.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::config::{ChannelReduction, ExperimentConfig};
use crate::data::{denormalize, DefectBox};
use crate::error::{Error, Result};
use crate::losses::{build_objective, Alphas, ObjectiveInputs, TeacherView};
use crate::meta::{write_png, write_text_with_meta, Meta};
use crate::model::{GanPair, Mode, Network};
use crate::tensor::Tensor;

/// Guard for the in/out ratio when the outside of the box is all zero.
pub const QUALITY_EPS: f64 = 1e-8;
/// Weight of the input image in the heatmap overlay.
pub const BLEND: f64 = 0.5;
/// Width of the pixel range `[-1, 1]`; SmoothGrad's sigma is a fraction of it.
pub const INPUT_RANGE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyMethod {
    Vanilla,
    #[serde(rename = "smoothgrad")]
    SmoothGrad,
    Guided,
}

impl std::fmt::Display for SaliencyMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SaliencyMethod::Vanilla => "vanilla",
            SaliencyMethod::SmoothGrad => "smoothgrad",
            SaliencyMethod::Guided => "guided",
        })
    }
}

impl std::str::FromStr for SaliencyMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "smoothgrad" => Ok(Self::SmoothGrad),
            "guided" => Ok(Self::Guided),
            other => Err(Error::Invalid(format!("unknown method `{other}` (vanilla, smoothgrad, guided)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothParams {
    pub n: usize,
    /// Absolute noise standard deviation.
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub sample_id: String,
    pub method: SaliencyMethod,
    pub size: usize,
    /// Row-major `size x size`, in `[0, 1]`.
    pub map: Vec<f64>,
    /// Channel-reduced magnitudes before normalization.
    pub reduced: Vec<f64>,
    /// Signed input gradient, `channels x size x size`.
    pub gradient: Vec<f64>,
    pub params: Option<SmoothParams>,
}

/// The networks and weights of the objective being differentiated.
pub struct SaliencyModel<'a> {
    pub config: &'a ExperimentConfig,
    pub student: &'a GanPair,
    pub teacher: Option<&'a GanPair>,
    pub alphas: Alphas,
}

fn single_image(x: &Tensor) -> Result<(usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if n != 1 || h != w {
        return Err(Error::Shape(format!("saliency needs one square image, got {:?}", x.shape())));
    }
    Ok((c, h))
}

/// Gradient of the full objective with respect to the input image.
pub fn input_gradient(model: &SaliencyModel<'_>, x: &Tensor, guided: bool) -> Result<Tensor> {
    single_image(x)?;
    let mut tape = Tape::new();
    tape.set_guided(guided);
    let xv = tape.leaf(x.clone(), true);
    let sg = model.student.generator.bind(&mut tape, false);
    let sd = model.student.discriminator.bind(&mut tape, false);
    let tb = model.teacher.map(|t| (t.generator.bind(&mut tape, false), t.discriminator.bind(&mut tape, false)));
    let teacher = match (model.teacher, &tb) {
        (Some(pair), Some((g, d))) => Some(TeacherView { pair, gen: Some(g), disc: d, mode: Mode::Eval, cached: None }),
        _ => None,
    };
    let obj = build_objective(
        &mut tape,
        ObjectiveInputs {
            config: model.config,
            student: model.student,
            student_gen: &sg,
            student_disc: &sd,
            student_mode: Mode::Eval,
            teacher,
            x: xv,
            alphas: Some(model.alphas),
        },
    )?;
    let grads = tape.backward(obj.total)?;
    let g = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    if !g.all_finite() || !obj.parts.total.is_finite() {
        return Err(Error::NonFinite { what: "input gradient".into(), detail: format!("{:?}", obj.parts) });
    }
    Ok(g)
}

/// Per-pixel magnitude collapsed over channels.
pub fn reduce_channels(grad: &[f64], channels: usize, reduction: ChannelReduction) -> Vec<f64> {
    let plane = grad.len() / channels;
    (0..plane)
        .map(|p| {
            let it = (0..channels).map(|c| grad[c * plane + p].abs());
            match reduction {
                ChannelReduction::Max => it.fold(0.0, f64::max),
                ChannelReduction::Mean => it.sum::<f64>() / channels as f64,
            }
        })
        .collect()
}

/// Min-max to `[0, 1]`. A constant nonzero map becomes all ones; a zero
/// map stays zero.
pub fn normalize_map(raw: &[f64]) -> Vec<f64> {
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 {
        return vec![0.0; raw.len()];
    }
    if max == min {
        return vec![1.0; raw.len()];
    }
    raw.iter().map(|v| (v - min) / (max - min)).collect()
}

fn finish(
    sample_id: &str,
    method: SaliencyMethod,
    gradient: Tensor,
    reduction: ChannelReduction,
    params: Option<SmoothParams>,
) -> Result<SaliencyMap> {
    let (c, size) = single_image(&gradient)?;
    let reduced = reduce_channels(gradient.data(), c, reduction);
    Ok(SaliencyMap {
        sample_id: sample_id.to_string(),
        method,
        size,
        map: normalize_map(&reduced),
        reduced,
        gradient: gradient.into_data(),
        params,
    })
}

pub fn vanilla_gradient(model: &SaliencyModel<'_>, sample_id: &str, x: &Tensor) -> Result<SaliencyMap> {
    let g = input_gradient(model, x, false)?;
    finish(sample_id, SaliencyMethod::Vanilla, g, model.config.channel_reduction, None)
}

/// Mean signed gradient over `n` noisy copies of `x`. With `sigma = 0` the
/// running mean reproduces the vanilla gradient bit for bit.
pub fn smooth_gradient(
    model: &SaliencyModel<'_>,
    sample_id: &str,
    x: &Tensor,
    n: usize,
    sigma: f64,
    seed: u64,
) -> Result<SaliencyMap> {
    if n == 0 {
        return Err(Error::Invalid("smoothgrad needs at least one sample".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!("smoothgrad sigma must be >= 0, got {sigma}")));
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = Tensor::zeros(x.shape());
    for k in 1..=n {
        let mut xn = x.clone();
        if sigma > 0.0 {
            xn.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        let g = input_gradient(model, &xn, false)?;
        for (m, gi) in mean.data_mut().iter_mut().zip(g.data()) {
            *m += (gi - *m) / k as f64;
        }
    }
    let params = Some(SmoothParams { n, sigma, seed });
    finish(sample_id, SaliencyMethod::SmoothGrad, mean, model.config.channel_reduction, params)
}

/// Gradient with only positive upstream gradients passed through every
/// rectifier, leaky ones included.
pub fn guided_backprop(model: &SaliencyModel<'_>, sample_id: &str, x: &Tensor) -> Result<SaliencyMap> {
    let g = input_gradient(model, x, true)?;
    finish(sample_id, SaliencyMethod::Guided, g, model.config.channel_reduction, None)
}

/// Dispatch on `method`, taking SmoothGrad's settings from the config.
pub fn saliency(
    model: &SaliencyModel<'_>,
    method: SaliencyMethod,
    sample_id: &str,
    x: &Tensor,
    seed: u64,
) -> Result<SaliencyMap> {
    match method {
        SaliencyMethod::Vanilla => vanilla_gradient(model, sample_id, x),
        SaliencyMethod::Guided => guided_backprop(model, sample_id, x),
        SaliencyMethod::SmoothGrad => {
            let c = model.config;
            smooth_gradient(model, sample_id, x, c.smoothgrad_samples, c.smoothgrad_sigma_fraction * INPUT_RANGE, seed)
        }
    }
}

/// Mean saliency inside the box over mean saliency outside it.
pub fn saliency_quality(map: &[f64], size: usize, defect: &DefectBox) -> Result<f64> {
    if map.len() != size * size {
        return Err(Error::Shape(format!("map of {} values is not {size}x{size}", map.len())));
    }
    if defect.x1 <= defect.x0 || defect.y1 <= defect.y0 || defect.x1 > size || defect.y1 > size {
        return Err(Error::Invalid(format!("degenerate box {defect:?} for a {size}x{size} map")));
    }
    if defect.area() == size * size {
        return Err(Error::Invalid("box covers the whole map".into()));
    }
    let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..size {
        for x in 0..size {
            let v = map[y * size + x];
            if defect.contains(x, y) {
                sin += v;
                nin += 1;
            } else {
                sout += v;
                nout += 1;
            }
        }
    }
    Ok((sin / nin as f64) / (sout / nout as f64 + QUALITY_EPS))
}

/// Black to red to yellow to white.
fn heat(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [(3.0 * v).min(1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)]
}

/// RGB overlay of the map on `x` (planar, `[-1, 1]`): each pixel is
/// `BLEND * image + (1 - BLEND) * colour(map)`, so a zero map dims the image.
pub fn overlay(map: &[f64], x: &[f64], channels: usize, size: usize) -> Result<Vec<u8>> {
    let plane = size * size;
    if map.len() != plane || x.len() != channels * plane || !(channels == 1 || channels == 3) {
        return Err(Error::Shape(format!("cannot overlay a {}-value map on {} pixels", map.len(), x.len())));
    }
    let mut out = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        let col = heat(map[p]);
        for (c, hc) in col.iter().enumerate() {
            let src = if channels == 1 { x[p] } else { x[c * plane + p] };
            let img = denormalize(src) as f64;
            out.push((BLEND * img + (1.0 - BLEND) * 255.0 * hc).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn export_heatmap(map: &SaliencyMap, x: &Tensor, path: &Path, meta: &Meta) -> Result<()> {
    let (c, size) = single_image(x)?;
    let rgb = overlay(&map.map, x.data(), c, size)?;
    write_png(path, size as u32, size as u32, 3, &rgb, meta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMetric {
    pub sample_id: String,
    pub method: SaliencyMethod,
    pub ratio: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[SaliencyMetric], meta: &Meta) -> Result<()> {
    let mut s = String::from("sample_id,method,ratio\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.sample_id, r.method, r.ratio));
    }
    write_text_with_meta(path, meta, &s)
}
