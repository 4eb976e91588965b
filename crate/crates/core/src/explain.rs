//! Grad-CAM saliency maps and reconstruction comparison grids.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, no_grad, Tensor};
use crate::data::{Plane, SliceStack, WindowPair};
use crate::error::{Error, Result};
use crate::models::{batch_tensor, ForwardCtx, Model};
use crate::training::losses::l2_loss;

/// Default Grad-CAM layers: the first generator convolution and the fourth
/// generator attention module.
pub const DEFAULT_LAYERS: [&str; 2] = ["enc1", "sa4"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CamObjective {
    /// Negative L2 between the reconstruction and the window target.
    #[default]
    NegL2,
    /// Critic score of (input, reconstruction); adversarial models only.
    CriticScore,
}

impl fmt::Display for CamObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CamObjective::NegL2 => "NEG_L2",
            CamObjective::CriticScore => "CRITIC_SCORE",
        })
    }
}

impl FromStr for CamObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "neg_l2" | "l2" => Ok(CamObjective::NegL2),
            "critic_score" | "critic" => Ok(CamObjective::CriticScore),
            _ => Err(Error::Config(format!("unknown Grad-CAM objective `{s}`"))),
        }
    }
}

/// Heatmap over one slice, values in `[0, 1]`, row-major `height x width`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub layer: String,
    pub objective: String,
    pub scan_id: String,
    pub window_index: usize,
    pub plane: Plane,
    /// Set when the weighted activation map vanished everywhere; `values`
    /// are then all zero.
    pub degenerate: bool,
    /// Range of the upsampled map before min-max normalization.
    pub raw_min: f64,
    pub raw_max: f64,
}

/// Grad-CAM of `layer` for `window` under `objective`.
pub fn grad_cam(
    model: &Model,
    window: &WindowPair,
    layer: &str,
    objective: CamObjective,
) -> Result<SaliencyMap> {
    let critic = match objective {
        CamObjective::CriticScore => Some(model.critic().ok_or_else(|| {
            Error::Config(format!("{} has no critic to score with", model.kind()))
        })?),
        CamObjective::NegL2 => None,
    };
    let target = batch_tensor(&[&window.target]);
    grad_cam_with(
        model,
        window,
        layer,
        &objective.to_string(),
        |input, out| match critic {
            Some(c) => c.forward(input, out, &mut ForwardCtx::eval()).sum(),
            None => l2_loss(out, &target).expect("shapes checked").neg(),
        },
    )
}

/// Grad-CAM with a caller-defined scalar objective of `(input, output)`.
pub fn grad_cam_with(
    model: &Model,
    window: &WindowPair,
    layer: &str,
    objective_name: &str,
    objective: impl Fn(&Tensor, &Tensor) -> Tensor,
) -> Result<SaliencyMap> {
    if !model.layer_names().iter().any(|n| n == layer) {
        return Err(Error::Layer(layer.to_string()));
    }
    model.check_input(&window.input)?;
    let x = batch_tensor(&[&window.input]);
    let mut ctx = ForwardCtx::eval().tap(layer);
    let out = model.generate(&x, &mut ctx);
    let activation = ctx
        .tapped(layer)
        .cloned()
        .ok_or_else(|| Error::Layer(layer.to_string()))?;
    let obj = objective(&x, &out);
    let g = grad(&obj, &[&activation], false).remove(0);

    let (c, h, w) = (activation.dim(1), activation.dim(2), activation.dim(3));
    let (a, gd) = (activation.data(), g.data());
    let mut cam = vec![0.0; h * w];
    for ch in 0..c {
        let plane = ch * h * w..(ch + 1) * h * w;
        let weight = gd[plane.clone()].iter().sum::<f64>() / (h * w) as f64;
        for (v, av) in cam.iter_mut().zip(&a[plane]) {
            *v += weight * av;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));

    let (_, out_h, out_w) = window.input.dims();
    let up = bilinear(&cam, h, w, out_h, out_w);
    let lo = up.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = up.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(hi - lo > 1e-12 * hi.abs().max(1.0)) || !hi.is_finite();
    let values = if degenerate {
        vec![0.0; up.len()]
    } else {
        up.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    Ok(SaliencyMap {
        height: out_h,
        width: out_w,
        values,
        layer: layer.to_string(),
        objective: objective_name.to_string(),
        scan_id: window.scan_id.clone(),
        window_index: window.window_index,
        plane: window.plane,
        degenerate,
        raw_min: lo,
        raw_max: hi,
    })
}

/// Half-pixel-centred bilinear resize of a row-major `h x w` map.
pub fn bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| {
        let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Reconstruction of a window as a stack shaped like its target.
pub fn reconstruct_window(model: &Model, window: &WindowPair) -> Result<SliceStack> {
    model.check_input(&window.input)?;
    let out = no_grad(|| model.reconstruct(&batch_tensor(&[&window.input])));
    let (c, h, w) = (out.dim(1), out.dim(2), out.dim(3));
    let data = ndarray::Array3::from_shape_vec((c, h, w), out.to_vec()).expect("output shape");
    Ok(SliceStack {
        data,
        plane: window.target.plane,
        indices: window.target.indices.clone(),
    })
}

/// PSNR annotation text, two decimals.
pub fn psnr_label(psnr: f64) -> String {
    if psnr.is_infinite() {
        "PSNR inf dB".into()
    } else {
        format!("PSNR {psnr:.2} dB")
    }
}

/// Sidecar written next to every PNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub image: String,
    pub rows: usize,
    pub cols: usize,
    pub columns: Vec<String>,
    pub annotation: String,
    /// `None` when the reconstruction is exact.
    pub psnr_db: Option<f64>,
    pub psnr_peak: f64,
    pub scale: usize,
}

/// Side-by-side panels: one row per channel, columns input | target |
/// reconstruction, with the PSNR written above. Writes `path` and a JSON
/// sidecar at `path` with extension `.json`.
pub fn render_grid(
    input: &SliceStack,
    target: &SliceStack,
    recon: &SliceStack,
    psnr: f64,
    path: &Path,
) -> Result<GridSidecar> {
    if input.dims() != target.dims() || target.dims() != recon.dims() {
        return Err(Error::Shape(format!(
            "grid panels {:?}, {:?}, {:?}",
            input.dims(),
            target.dims(),
            recon.dims()
        )));
    }
    let (c, h, w) = input.dims();
    let scale = (128 / h.max(w)).max(1);
    let (ph, pw) = (h * scale, w * scale);
    let gap = 2;
    let label = psnr_label(psnr);
    let band = 7 * TEXT_SCALE + 2 * gap;
    let width = (3 * pw + 4 * gap).max(text_width(&label) + 2 * gap) as u32;
    let height = (band + c * ph + (c + 1) * gap) as u32;
    let mut img = RgbImage::from_pixel(width, height, Rgb([24, 24, 24]));
    draw_text(&mut img, &label, gap, gap, Rgb([255, 255, 255]));
    for (col, stack) in [input, target, recon].into_iter().enumerate() {
        for row in 0..c {
            let slice = stack.data.index_axis(ndarray::Axis(0), row);
            let (x0, y0) = (gap + col * (pw + gap), band + gap + row * (ph + gap));
            for y in 0..ph {
                for x in 0..pw {
                    let v = gray(slice[[y / scale, x / scale]]);
                    img.put_pixel((x0 + x) as u32, (y0 + y) as u32, Rgb([v, v, v]));
                }
            }
        }
    }
    img.save(path)?;
    let sidecar = GridSidecar {
        image: file_name(path),
        rows: c,
        cols: 3,
        columns: vec!["input".into(), "target".into(), "reconstruction".into()],
        annotation: label,
        psnr_db: psnr.is_finite().then_some(psnr),
        psnr_peak: crate::evaluation::PSNR_PEAK,
        scale,
    };
    std::fs::write(
        path.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(sidecar)
}

/// Sidecar for a saliency PNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencySidecar {
    pub image: String,
    pub layer: String,
    pub objective: String,
    pub scan_id: String,
    pub window_index: usize,
    pub plane: Plane,
    pub degenerate: bool,
    pub raw_min: f64,
    pub raw_max: f64,
    pub columns: Vec<String>,
}

/// Writes the base slice, the heatmap and their blend side by side, plus a
/// JSON sidecar.
pub fn render_saliency(
    map: &SaliencyMap,
    base: &SliceStack,
    channel: usize,
    path: &Path,
) -> Result<SaliencySidecar> {
    let (c, h, w) = base.dims();
    if (h, w) != (map.height, map.width) || channel >= c {
        return Err(Error::Shape(format!(
            "saliency {}x{} over slice {h}x{w} (channel {channel} of {c})",
            map.height, map.width
        )));
    }
    let scale = (128 / h.max(w)).max(1);
    let (ph, pw, gap) = (h * scale, w * scale, 2);
    let mut img = RgbImage::from_pixel(
        (3 * pw + 4 * gap) as u32,
        (ph + 2 * gap) as u32,
        Rgb([24, 24, 24]),
    );
    let slice = base.data.index_axis(ndarray::Axis(0), channel);
    for y in 0..ph {
        for x in 0..pw {
            let (sy, sx) = (y / scale, x / scale);
            let g = gray(slice[[sy, sx]]);
            let heat = jet(map.values[sy * w + sx]);
            let a = 0.5 * map.values[sy * w + sx];
            let blend =
                Rgb([0, 1, 2].map(|k| (g as f64 * (1.0 - a) + heat.0[k] as f64 * a).round() as u8));
            let yy = (gap + y) as u32;
            img.put_pixel((gap + x) as u32, yy, Rgb([g, g, g]));
            img.put_pixel((2 * gap + pw + x) as u32, yy, heat);
            img.put_pixel((3 * gap + 2 * pw + x) as u32, yy, blend);
        }
    }
    img.save(path)?;
    let sidecar = SaliencySidecar {
        image: file_name(path),
        layer: map.layer.clone(),
        objective: map.objective.clone(),
        scan_id: map.scan_id.clone(),
        window_index: map.window_index,
        plane: map.plane,
        degenerate: map.degenerate,
        raw_min: map.raw_min,
        raw_max: map.raw_max,
        columns: vec!["slice".into(), "heatmap".into(), "overlay".into()],
    };
    std::fs::write(
        path.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(sidecar)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn gray(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Blue to red colormap.
fn jet(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f64| gray((1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0));
    Rgb([ch(3.0), ch(2.0), ch(1.0)])
}

const TEXT_SCALE: usize = 2;

/// 5x7 glyphs, one byte per row, high bit on the left.
fn glyph(ch: char) -> [u8; 7] {
    match ch {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'd' => [0x01, 0x01, 0x0D, 0x13, 0x11, 0x11, 0x0F],
        'i' => [0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E],
        'n' => [0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11],
        'f' => [0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08],
        _ => [0; 7],
    }
}

fn text_width(text: &str) -> usize {
    text.chars().count() * 6 * TEXT_SCALE
}

fn draw_text(img: &mut RgbImage, text: &str, x0: usize, y0: usize, color: Rgb<u8>) {
    for (i, ch) in text.chars().enumerate() {
        let g = glyph(ch);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..5 {
                if bits & (0x10 >> col) == 0 {
                    continue;
                }
                for dy in 0..TEXT_SCALE {
                    for dx in 0..TEXT_SCALE {
                        let x = x0 + (i * 6 + col) * TEXT_SCALE + dx;
                        let y = y0 + row * TEXT_SCALE + dy;
                        if (x as u32) < img.width() && (y as u32) < img.height() {
                            img.put_pixel(x as u32, y as u32, color);
                        }
                    }
                }
            }
        }
    }
}
