//! Image quality metrics and result-set evaluation.
//!
//! PSNR and SSIM work on 8-bit images over all channels; SSIM uses an 11×11
//! Gaussian window (σ = 1.5), `K1 = 0.01`, `K2 = 0.03`, population
//! statistics, and averages the local map over positions where the window
//! fits, then over channels. PSNR of identical images is reported as 100 dB,
//! and every PSNR value is capped there.
//!
//! Feature distances depend on the extractor: values from the built-in
//! surrogate are not on the scale of VGG distances.

use std::path::{Path, PathBuf};
use std::process::Command;

use rayon::prelude::*;
use unblur_autograd::Float;

use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::image::ImageTensor;
use crate::manifest::is_image_name;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// 8-bit image, channel-planar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} bytes for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Image8 {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_tensor(img: &ImageTensor) -> Self {
        let (c, h, w) = img.dims();
        Image8 {
            channels: c,
            height: h,
            width: w,
            data: img.to_u8(),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn plane(&self, c: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

fn same_shape(x: &Image8, y: &Image8) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.dims(), y.dims())));
    }
    if x.data.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    Ok(())
}

/// `10·log10(255² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(x: &Image8, y: &Image8) -> Result<f64> {
    same_shape(x, y)?;
    let se: f64 = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    let mse = se / x.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

pub fn ssim(x: &Image8, y: &Image8) -> Result<f64> {
    same_shape(x, y)?;
    if x.height < SSIM_WINDOW || x.width < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            x.height, x.width
        )));
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let k = gaussian_window();
    let (h, w) = (x.height, x.width);
    let mut total = 0.0;
    for c in 0..x.channels {
        let a: Vec<f64> = x.plane(c).iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = y.plane(c).iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let mx = filter_valid(&a, h, w, &k);
        let my = filter_valid(&b, h, w, &k);
        let mxx = filter_valid(&prod(&a, &a), h, w, &k);
        let myy = filter_valid(&prod(&b, &b), h, w, &k);
        let mxy = filter_valid(&prod(&a, &b), h, w, &k);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / x.channels as f64)
}

/// Euclidean distance between the flattened features of `x` and `y`.
pub fn feature_distance<T: Float>(
    extractor: &dyn FeatureExtractor<T>,
    x: &ImageTensor,
    y: &ImageTensor,
) -> Result<f64> {
    let fx = crate::features::extract(extractor, x)?;
    let fy = crate::features::extract(extractor, y)?;
    if fx.shape() != fy.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", fx.shape(), fy.shape())));
    }
    let s: f64 = fx
        .data()
        .iter()
        .zip(fy.data())
        .map(|(a, b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(s.sqrt())
}

/// Edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate of `recognized` against a nonempty `truth`.
pub fn cer(recognized: &str, truth: &str) -> Result<f64> {
    let n = truth.chars().count();
    if n == 0 {
        return Err(Error::Param("ground-truth text is empty".into()));
    }
    Ok(levenshtein(recognized, truth) as f64 / n as f64)
}

/// External OCR program: invoked as `<program> [args...] <image path>`, it
/// prints the recognized text on standard output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OcrAdapter {
    pub program: String,
    pub args: Vec<String>,
}

impl OcrAdapter {
    /// Splits a command line on whitespace.
    pub fn parse(command: &str) -> Option<Self> {
        let mut parts = command.split_whitespace().map(String::from);
        let program = parts.next()?;
        Some(OcrAdapter {
            program,
            args: parts.collect(),
        })
    }

    /// Recognized text, or `None` when the program cannot be run or fails.
    pub fn recognize(&self, image: &Path) -> Option<String> {
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(image)
            .output()
            .ok()?;
        if !out.status.success() {
            log::warn!("OCR command failed on {}", image.display());
            return None;
        }
        Some(String::from_utf8_lossy(&out.stdout).trim().to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub path: String,
    pub psnr: f64,
    pub ssim: f64,
    pub d_feat: f64,
    /// `None` when OCR is not configured, fails, or no ground-truth text
    /// exists.
    pub cer: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Aggregates {
    pub psnr: f64,
    pub ssim: f64,
    pub d_feat: f64,
    /// Mean over images where CER is available.
    pub cer: Option<f64>,
}

impl Aggregates {
    pub fn of(rows: &[ImageMetrics]) -> Self {
        let n = rows.len().max(1) as f64;
        let cers: Vec<f64> = rows.iter().filter_map(|r| r.cer).collect();
        Aggregates {
            psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            d_feat: rows.iter().map(|r| r.d_feat).sum::<f64>() / n,
            cer: (!cers.is_empty()).then(|| cers.iter().sum::<f64>() / cers.len() as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregates: Aggregates,
    /// Result files without a ground-truth counterpart.
    pub unmatched: Vec<String>,
}

fn fmt_cer(c: Option<f64>) -> String {
    c.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"))
}

impl MetricsReport {
    /// Tab-separated table: one row per image and a final `mean` row.
    pub fn render_table(&self) -> String {
        let mut out = String::from("image\tPSNR\tSSIM\td_feat\tCER\n");
        for r in &self.per_image {
            out.push_str(&format!(
                "{}\t{:.2}\t{:.4}\t{:.4}\t{}\n",
                r.path,
                r.psnr,
                r.ssim,
                r.d_feat,
                fmt_cer(r.cer)
            ));
        }
        let a = &self.aggregates;
        out.push_str(&format!(
            "mean\t{:.2}\t{:.4}\t{:.4}\t{}\n",
            a.psnr,
            a.ssim,
            a.d_feat,
            fmt_cer(a.cer)
        ));
        out
    }

    /// Machine-readable records, one per image, tab-separated in the order
    /// `path psnr ssim d_feat cer`, full precision, `NA` for missing CER.
    pub fn render_records(&self) -> String {
        let mut out = String::from("path\tpsnr\tssim\td_feat\tcer\n");
        for r in &self.per_image {
            let cer = r.cer.map_or_else(|| "NA".to_string(), |v| v.to_string());
            out.push_str(&format!("{}\t{}\t{}\t{}\t{cer}\n", r.path, r.psnr, r.ssim, r.d_feat));
        }
        out
    }
}

/// Table with one row per labelled configuration.
pub fn render_summary_table(rows: &[(String, Option<Aggregates>)]) -> String {
    let mut out = String::from("variant\tPSNR\tSSIM\td_feat\tCER\n");
    for (label, agg) in rows {
        match agg {
            Some(a) => out.push_str(&format!(
                "{label}\t{:.2}\t{:.4}\t{:.4}\t{}\n",
                a.psnr,
                a.ssim,
                a.d_feat,
                fmt_cer(a.cer)
            )),
            None => out.push_str(&format!("{label}\tNA\tNA\tNA\tNA\n")),
        }
    }
    out
}

/// Metrics of one result/ground-truth pair.
pub fn compare(
    result: &ImageTensor,
    truth: &ImageTensor,
    extractor: &dyn FeatureExtractor<f32>,
) -> Result<(f64, f64, f64)> {
    let (a, b) = (Image8::from_tensor(result), Image8::from_tensor(truth));
    Ok((psnr(&a, &b)?, ssim(&a, &b)?, feature_distance(extractor, result, truth)?))
}

/// Compares every image in `results_dir` with the same-named file in
/// `truth_dir`. Ground-truth text for CER is read from `<stem>.txt` next to
/// the ground-truth image.
pub fn evaluate(
    results_dir: &Path,
    truth_dir: &Path,
    extractor: &dyn FeatureExtractor<f32>,
    ocr: Option<&OcrAdapter>,
) -> Result<MetricsReport> {
    let mut names: Vec<String> = std::fs::read_dir(results_dir)
        .map_err(|e| Error::io(results_dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| is_image_name(n))
        .collect();
    names.sort();
    let (matched, unmatched): (Vec<String>, Vec<String>) =
        names.into_iter().partition(|n| truth_dir.join(n).is_file());
    for n in &unmatched {
        log::warn!("{n}: no ground truth in {}", truth_dir.display());
    }
    if matched.is_empty() {
        return Err(Error::Data(format!(
            "no result in {} matches a file in {}",
            results_dir.display(),
            truth_dir.display()
        )));
    }
    let per_image = matched
        .par_iter()
        .map(|name| -> Result<ImageMetrics> {
            let truth_path = truth_dir.join(name);
            let truth = ImageTensor::load(&truth_path, None)?;
            let result_path = results_dir.join(name);
            let result = ImageTensor::load(&result_path, Some(truth.channels()))?;
            if result.dims() != truth.dims() {
                return Err(Error::Shape(format!(
                    "{name}: result is {:?}, ground truth {:?}",
                    result.dims(),
                    truth.dims()
                )));
            }
            let (p, s, d) = compare(&result, &truth, extractor)?;
            let cer = ocr.and_then(|o| {
                let text_path: PathBuf = truth_path.with_extension("txt");
                let text = std::fs::read_to_string(text_path).ok()?;
                let recognized = o.recognize(&result_path)?;
                cer(&recognized, text.trim()).ok()
            });
            Ok(ImageMetrics {
                path: name.clone(),
                psnr: p,
                ssim: s,
                d_feat: d,
                cer,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregates = Aggregates::of(&per_image);
    Ok(MetricsReport {
        per_image,
        aggregates,
        unmatched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SurrogateExtractor;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> u8) -> Image8 {
        Image8::new(1, h, w, (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let x = gray(12, 12, |y, x| (y * 12 + x) as u8);
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);
        let y = gray(12, 12, |y, x| (y * 12 + x) as u8 + 5);
        assert!((psnr(&x, &y).unwrap() - 20.0 * (255.0f64 / 5.0).log10()).abs() < 1e-12);
        let c = gray(12, 12, |y, x| if (y + x) % 2 == 0 { 0 } else { 255 });
        let ci = gray(12, 12, |y, x| if (y + x) % 2 == 0 { 255 } else { 0 });
        assert_eq!(psnr(&c, &ci).unwrap(), 0.0);
        assert!(psnr(&x, &gray(12, 11, |_, _| 0)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let x = gray(16, 16, |y, x| ((y * 7 + x * 13) % 256) as u8);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let p = gray(16, 16, |y, x| if (y / 2 + x / 3) % 2 == 0 { 10 } else { 245 });
        let inv = Image8::new(1, 16, 16, p.data.iter().map(|v| 255 - v).collect()).unwrap();
        assert!(ssim(&p, &inv).unwrap() < 0.0);
        assert!(ssim(&gray(10, 16, |_, _| 0), &gray(10, 16, |_, _| 0)).is_err());
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer("kitten", "sitting").unwrap(), 3.0 / 7.0);
        assert_eq!(cer("ABC", "ABC").unwrap(), 0.0);
        assert_eq!(cer("", "ABCD").unwrap(), 1.0);
        assert!(cer("x", "").is_err());
        assert_eq!(levenshtein("flaw", "lawn"), 2);
    }

    #[test]
    fn missing_ocr_program_is_unavailable() {
        let o = OcrAdapter::parse("definitely-not-an-ocr-binary --flag").unwrap();
        assert_eq!(o.recognize(Path::new("x.png")), None);
        assert!(OcrAdapter::parse("  ").is_none());
    }

    #[test]
    fn evaluate_identical_directories() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            ImageTensor::from_fn(1, 16, 16, |_, y, x| ((y * 3 + x * i) % 7) as f32 / 7.0)
                .save(&dir.path().join(format!("{i}.png")))
                .unwrap();
        }
        let ex = SurrogateExtractor::embedding(1, 1);
        let r = evaluate(dir.path(), dir.path(), &ex, None).unwrap();
        assert_eq!(r.per_image.len(), 3);
        assert_eq!(r.aggregates.psnr, 100.0);
        assert!((r.aggregates.ssim - 1.0).abs() < 1e-12);
        assert_eq!(r.aggregates.d_feat, 0.0);
        assert_eq!(r.aggregates.cer, None);
        assert_eq!(r.render_table().lines().count(), 5);
        let empty = tempfile::tempdir().unwrap();
        assert!(evaluate(dir.path(), empty.path(), &ex, None).is_err());
    }
}
