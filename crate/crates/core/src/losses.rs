//! The four loss terms and their weighted sum.
//!
//! Each term has a value-level form over plain images and posteriors, and a
//! tape form (generic over the float type) used during training. Every term
//! is a mean over batch and spatial elements, so the weights do not depend
//! on resolution.

use std::fmt;
use std::str::FromStr;

use unblur_autograd::{Float, Graph, Var};

use crate::error::{Error, Result};
use crate::features::{self, FeatureExtractor};
use crate::image::ImageTensor;
use crate::nets::{BlurPosterior, ScoreMap};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_kl: f64,
    pub lambda_cc: f64,
    pub lambda_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_adv: 1.0,
            lambda_kl: 0.01,
            lambda_cc: 10.0,
            lambda_p: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_adv", self.lambda_adv),
            ("lambda_kl", self.lambda_kl),
            ("lambda_cc", self.lambda_cc),
            ("lambda_p", self.lambda_p),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Param(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Image domain the model is trained for. Text drops the perceptual term
/// and horizontal flips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TaskPreset {
    Face,
    Text,
    #[default]
    Generic,
}

impl fmt::Display for TaskPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskPreset::Face => "face",
            TaskPreset::Text => "text",
            TaskPreset::Generic => "generic",
        })
    }
}

impl FromStr for TaskPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "face" => Ok(TaskPreset::Face),
            "text" => Ok(TaskPreset::Text),
            "generic" => Ok(TaskPreset::Generic),
            other => Err(Error::Config(format!("unknown task preset `{other}`"))),
        }
    }
}

/// Unweighted loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub kl: f64,
    pub adv_ds: f64,
    pub adv_db: f64,
    pub cycle: f64,
    pub perceptual: f64,
}

/// Loss components together with their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub kl: f64,
    pub adv_ds: f64,
    pub adv_db: f64,
    pub cycle: f64,
    pub perceptual: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            kl: self.kl,
            adv_ds: self.adv_ds,
            adv_db: self.adv_db,
            cycle: self.cycle,
            perceptual: self.perceptual,
        }
    }

    /// Field names and values in log order.
    pub fn fields(&self) -> [(&'static str, f64); 6] {
        [
            ("kl", self.kl),
            ("adv_ds", self.adv_ds),
            ("adv_db", self.adv_db),
            ("cycle", self.cycle),
            ("perceptual", self.perceptual),
            ("total", self.total),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Discriminator,
    Generator,
}

/// `½·Σ(μ² + σ² − log σ² − 1)` over the code dimensions.
pub fn kl_closed_form(mu: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

pub fn kl_loss(post: &BlurPosterior) -> Result<f64> {
    if !post.is_finite() || post.mu.len() != post.log_var.len() {
        return Err(Error::Param("posterior must be finite with matching lengths".into()));
    }
    let mu: Vec<f64> = post.mu.iter().map(|&v| v as f64).collect();
    let lv: Vec<f64> = post.log_var.iter().map(|&v| v as f64).collect();
    Ok(kl_closed_form(&mu, &lv))
}

fn check_scores(maps: &[ScoreMap]) -> Result<()> {
    for m in maps {
        if let Some(s) = m.scores.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
            return Err(Error::Param(format!("discriminator score {s} outside (0, 1)")));
        }
        if m.scores.is_empty() {
            return Err(Error::Shape("empty score map".into()));
        }
    }
    Ok(())
}

fn mean_over_scales(maps: &[ScoreMap], f: impl Fn(f64) -> f64) -> f64 {
    maps.iter()
        .map(|m| m.scores.iter().map(|&s| f(s)).sum::<f64>() / m.scores.len() as f64)
        .sum::<f64>()
        / maps.len() as f64
}

/// Adversarial loss from per-scale probability maps. The discriminator side
/// is `−[log D(real) + log(1 − D(fake))]`, the generator side the
/// non-saturating `−log D(fake)` (`real` is ignored). Each scale is averaged
/// over its elements, then scales are averaged.
pub fn adversarial_losses(real: &[ScoreMap], fake: &[ScoreMap], side: Side) -> Result<f64> {
    if fake.is_empty() {
        return Err(Error::Shape("no fake score maps".into()));
    }
    check_scores(fake)?;
    match side {
        Side::Generator => Ok(mean_over_scales(fake, |s| -s.ln())),
        Side::Discriminator => {
            if real.len() != fake.len() {
                return Err(Error::Shape(format!(
                    "{} real score maps vs {} fake",
                    real.len(),
                    fake.len()
                )));
            }
            check_scores(real)?;
            Ok(mean_over_scales(real, |s| -s.ln()) + mean_over_scales(fake, |s| -(1.0 - s).ln()))
        }
    }
}

/// Mean absolute difference between two images.
pub fn l1_mean(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `mean|s − ŝ| + mean|b − b̂|`.
pub fn cycle_loss(
    s: &ImageTensor,
    s_hat: &ImageTensor,
    b: &ImageTensor,
    b_hat: &ImageTensor,
) -> Result<f64> {
    Ok(l1_mean(s, s_hat)? + l1_mean(b, b_hat)?)
}

/// Mean squared feature difference between `s_b` and its blurred source.
pub fn perceptual_loss(
    extractor: &dyn FeatureExtractor<f64>,
    s_b: &ImageTensor,
    b: &ImageTensor,
) -> Result<f64> {
    let fa = features::extract(extractor, s_b)?;
    let fb = features::extract(extractor, b)?;
    if fa.shape() != fb.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", fa.shape(), fb.shape())));
    }
    let sum: f64 = fa.data().iter().zip(fb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / fa.len() as f64)
}

/// Weighted sum of the components. The text preset drops the perceptual
/// term.
pub fn total_loss(c: &LossComponents, w: &LossWeights, task: TaskPreset) -> Result<LossBreakdown> {
    w.validate()?;
    let all = [c.kl, c.adv_ds, c.adv_db, c.cycle, c.perceptual];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::Param("loss components must be finite".into()));
    }
    let perceptual = if task == TaskPreset::Text { 0.0 } else { c.perceptual };
    let total = w.lambda_adv * (c.adv_ds + c.adv_db)
        + w.lambda_kl * c.kl
        + w.lambda_cc * c.cycle
        + w.lambda_p * perceptual;
    Ok(LossBreakdown {
        kl: c.kl,
        adv_ds: c.adv_ds,
        adv_db: c.adv_db,
        cycle: c.cycle,
        perceptual,
        total,
    })
}

/// KL term on the tape for `[N, d]` posteriors: summed over code dimensions,
/// averaged over the batch.
pub fn kl_term<T: Float>(g: &mut Graph<T>, mu: Var, log_var: Var) -> Var {
    let d = g.shape(mu).last().copied().unwrap_or(1);
    let m2 = g.square(mu);
    let var = g.exp(log_var);
    let a = g.add(m2, var);
    let a = g.sub(a, log_var);
    let a = g.add_scalar(a, -1.0);
    let m = g.mean(a);
    g.scale(m, 0.5 * d as f64)
}

fn average<T: Float>(g: &mut Graph<T>, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// Discriminator loss on per-scale logit maps:
/// `−log σ(r) − log(1 − σ(f)) = softplus(−r) + softplus(f)`.
pub fn disc_adv_term<T: Float>(g: &mut Graph<T>, real: &[Var], fake: &[Var]) -> Var {
    assert!(!real.is_empty() && real.len() == fake.len(), "mismatched score maps");
    let per_scale: Vec<Var> = real
        .iter()
        .zip(fake)
        .map(|(&r, &f)| {
            let nr = g.scale(r, -1.0);
            let lr = g.softplus(nr);
            let lr = g.mean(lr);
            let lf = g.softplus(f);
            let lf = g.mean(lf);
            g.add(lr, lf)
        })
        .collect();
    average(g, &per_scale)
}

/// Non-saturating generator loss on logits: `−log σ(f) = softplus(−f)`.
pub fn gen_adv_term<T: Float>(g: &mut Graph<T>, fake: &[Var]) -> Var {
    assert!(!fake.is_empty(), "no score maps");
    let per_scale: Vec<Var> = fake
        .iter()
        .map(|&f| {
            let nf = g.scale(f, -1.0);
            let l = g.softplus(nf);
            g.mean(l)
        })
        .collect();
    average(g, &per_scale)
}

pub fn l1_term<T: Float>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean(d)
}

/// Perceptual term on the tape. Gradients flow into `s_b` only; `b` is the
/// fixed reference.
pub fn perceptual_term<T: Float>(
    g: &mut Graph<T>,
    extractor: &dyn FeatureExtractor<T>,
    s_b: Var,
    b: Var,
) -> Result<Var> {
    let fa = extractor.features(g, s_b)?;
    let fb = extractor.features(g, b)?;
    let fb = g.constant(g.value(fb).clone());
    let d = g.sub(fa, fb);
    let d = g.square(d);
    Ok(g.mean(d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SurrogateExtractor;
    use unblur_autograd::Tensor;

    fn post(mu: Vec<f32>, log_var: Vec<f32>) -> BlurPosterior {
        BlurPosterior { mu, log_var }
    }

    fn maps(v: f64, n: usize) -> Vec<ScoreMap> {
        (0..2)
            .map(|_| ScoreMap {
                height: 1,
                width: n,
                scores: vec![v; n],
            })
            .collect()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_loss(&post(vec![0.0; 4], vec![0.0; 4])).unwrap(), 0.0);
        assert!((kl_loss(&post(vec![1.0], vec![0.0])).unwrap() - 0.5).abs() < 1e-12);
        let e = std::f64::consts::E;
        assert!((kl_closed_form(&[0.0, 0.0], &[1.0, 1.0]) - (e - 2.0)).abs() < 1e-12);
        assert!(kl_loss(&post(vec![f32::NAN], vec![0.0])).is_err());
    }

    #[test]
    fn adversarial_examples() {
        let half = maps(0.5, 3);
        let d = adversarial_losses(&half, &half, Side::Discriminator).unwrap();
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
        let gen = adversarial_losses(&[], &half, Side::Generator).unwrap();
        assert!((gen - 2f64.ln()).abs() < 1e-12);
        let fooled = adversarial_losses(&[], &maps(1.0 - 1e-12, 3), Side::Generator).unwrap();
        assert!(fooled < 1e-11);
        assert!(adversarial_losses(&half, &maps(1.0, 3), Side::Discriminator).is_err());
        assert!(adversarial_losses(&half, &maps(0.0, 3), Side::Generator).is_err());
    }

    #[test]
    fn cycle_examples() {
        let s = ImageTensor::from_fn(1, 4, 4, |_, y, x| (y as f32 - x as f32) * 0.1);
        let b = ImageTensor::from_fn(1, 4, 4, |_, y, x| (y * x) as f32 * 0.05);
        assert_eq!(cycle_loss(&s, &s, &b, &b).unwrap(), 0.0);
        let mut shifted = s.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 0.1);
        assert!((cycle_loss(&s, &shifted, &b, &b).unwrap() - 0.1).abs() < 1e-6);
        let other = ImageTensor::filled(1, 8, 8, 0.0);
        assert!(cycle_loss(&s, &other, &b, &b).is_err());
    }

    #[test]
    fn perceptual_is_zero_on_identity_and_symmetric() {
        let ex = SurrogateExtractor::perceptual(1, 11);
        let a = ImageTensor::from_fn(1, 4, 4, |_, y, x| ((y * 4 + x) as f32 / 8.0) - 1.0);
        let b = ImageTensor::from_fn(1, 4, 4, |_, y, x| ((x * 3 + y) as f32 / 10.0) - 0.5);
        assert_eq!(perceptual_loss(&ex, &a, &a).unwrap(), 0.0);
        let ab = perceptual_loss(&ex, &a, &b).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, perceptual_loss(&ex, &b, &a).unwrap());
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        let zero = total_loss(&LossComponents::default(), &w, TaskPreset::Face).unwrap();
        assert_eq!(zero.total, 0.0);
        let ones = LossComponents {
            kl: 1.0,
            adv_ds: 1.0,
            adv_db: 1.0,
            cycle: 1.0,
            perceptual: 1.0,
        };
        let t = total_loss(&ones, &w, TaskPreset::Face).unwrap();
        assert!((t.total - 12.11).abs() < 1e-12);
        let text = total_loss(
            &LossComponents {
                perceptual: 5.0,
                ..LossComponents::default()
            },
            &w,
            TaskPreset::Text,
        )
        .unwrap();
        assert_eq!((text.perceptual, text.total), (0.0, 0.0));
        let bad = LossWeights {
            lambda_cc: -1.0,
            ..w
        };
        assert!(total_loss(&ones, &bad, TaskPreset::Face).is_err());
    }

    #[test]
    fn tape_terms_match_value_forms() {
        let mut g = Graph::<f64>::new();
        let mu = g.constant(Tensor::new(vec![2, 2], vec![0.3, -0.2, 1.0, 0.5]));
        let lv = g.constant(Tensor::new(vec![2, 2], vec![0.1, -0.4, 0.0, 0.7]));
        let kl = kl_term(&mut g, mu, lv);
        let expect = 0.5
            * (kl_closed_form(&[0.3, -0.2], &[0.1, -0.4]) + kl_closed_form(&[1.0, 0.5], &[0.0, 0.7]));
        assert!((g.scalar(kl) - expect).abs() < 1e-12);

        let logits = [0.4, -1.3, 2.0, 0.0];
        let real = g.constant(Tensor::new(vec![1, 1, 2, 2], logits.to_vec()));
        let fake = g.constant(Tensor::new(vec![1, 1, 2, 2], logits.iter().map(|v| -v).collect()));
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let as_map = |sign: f64| ScoreMap {
            height: 2,
            width: 2,
            scores: logits.iter().map(|v| sig(sign * v)).collect(),
        };
        let d = disc_adv_term(&mut g, &[real], &[fake]);
        let dv = adversarial_losses(&[as_map(1.0)], &[as_map(-1.0)], Side::Discriminator).unwrap();
        assert!((g.scalar(d) - dv).abs() < 1e-12);
        let gl = gen_adv_term(&mut g, &[fake]);
        let gv = adversarial_losses(&[], &[as_map(-1.0)], Side::Generator).unwrap();
        assert!((g.scalar(gl) - gv).abs() < 1e-12);
    }
}
