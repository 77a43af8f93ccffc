//! Toy corpora and multi-variant runs (component ablation, λ_p sweep).

use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::blur::{apply_blur, kernel_for_index, TrajectoryParams};
use crate::config::{AblationPreset, TrainConfig};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::glyphs;
use crate::image::ImageTensor;
use crate::metrics::{self, Aggregates, ImageMetrics};
use crate::nets::ModelState;
use crate::checkpoint::Checkpoint;
use crate::train::{self, Dataset};

/// Values of λ_p compared by the sensitivity sweep.
pub const LAMBDA_P_SWEEP: [f64; 3] = [1.0, 0.1, 0.01];

/// Smallest odd kernel size that holds a path of extent `max_len`.
pub fn kernel_size_for(max_len: f64) -> usize {
    let k = max_len.ceil() as usize + 1;
    k | 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpusSpec {
    pub images: usize,
    pub held_out: usize,
    pub size: usize,
    pub chars: usize,
    pub max_len: f64,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            images: 200,
            held_out: 20,
            size: 32,
            chars: 2,
            max_len: 5.0,
            seed: 0,
        }
    }
}

/// Glyph corpus with an unpaired training split (sharp images from the
/// first half of the training indices, blurred ones from the second half)
/// and paired held-out images.
#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub train_sharp: Dataset,
    pub train_blurred: Dataset,
    pub held_sharp: Vec<ImageTensor>,
    pub held_blurred: Vec<ImageTensor>,
    pub held_text: Vec<String>,
}

impl ToyCorpus {
    pub fn generate(spec: &ToyCorpusSpec) -> Result<Self> {
        if spec.held_out + 2 > spec.images {
            return Err(Error::Param("need at least two training images".into()));
        }
        let items = glyphs::corpus(spec.images, spec.seed, spec.size, spec.chars)?;
        let params = TrajectoryParams {
            max_len: spec.max_len,
            seed: spec.seed,
            ..TrajectoryParams::default()
        };
        let k = kernel_size_for(spec.max_len);
        let blurred: Vec<ImageTensor> = items
            .par_iter()
            .enumerate()
            .map(|(i, (_, img))| apply_blur(img, &kernel_for_index(&params, k, i)?.1))
            .collect::<Result<_>>()?;
        let n_train = spec.images - spec.held_out;
        let half = n_train / 2;
        Ok(ToyCorpus {
            train_sharp: Dataset::new(items[..half].iter().map(|x| x.1.clone()).collect())?,
            train_blurred: Dataset::new(blurred[half..n_train].to_vec())?,
            held_sharp: items[n_train..].iter().map(|x| x.1.clone()).collect(),
            held_blurred: blurred[n_train..].to_vec(),
            held_text: items[n_train..].iter().map(|x| x.0.clone()).collect(),
        })
    }
}

/// Held-out metrics of the blurred inputs and of their deblurred versions,
/// both against the sharp ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeldOutScore {
    pub blurred: Aggregates,
    pub deblurred: Aggregates,
}

fn score(
    results: &[ImageTensor],
    truth: &[ImageTensor],
    extractor: &dyn FeatureExtractor<f32>,
) -> Result<Aggregates> {
    let rows = results
        .par_iter()
        .zip(truth)
        .enumerate()
        .map(|(i, (r, t))| {
            let (psnr, ssim, d_feat) = metrics::compare(r, t, extractor)?;
            Ok(ImageMetrics {
                path: i.to_string(),
                psnr,
                ssim,
                d_feat,
                cer: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Aggregates::of(&rows))
}

pub fn score_held_out(
    state: &ModelState,
    blurred: &[ImageTensor],
    sharp: &[ImageTensor],
    extractor: &dyn FeatureExtractor<f32>,
) -> Result<HeldOutScore> {
    if blurred.len() != sharp.len() || blurred.is_empty() {
        return Err(Error::Data("held-out sets must be nonempty and paired".into()));
    }
    let deblurred = blurred
        .par_iter()
        .map(|b| train::deblur(state, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(HeldOutScore {
        blurred: score(blurred, sharp, extractor)?,
        deblurred: score(&deblurred, sharp, extractor)?,
    })
}

/// Configurations of the component ablation, one per preset.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    AblationPreset::ALL
        .iter()
        .map(|&p| {
            (
                p.label().to_string(),
                TrainConfig {
                    ablation_preset: p,
                    ..base.clone()
                },
            )
        })
        .collect()
}

/// Full-model configurations for each swept λ_p.
pub fn lambda_p_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    LAMBDA_P_SWEEP
        .iter()
        .map(|&lp| {
            let mut c = base.clone();
            c.ablation_preset = AblationPreset::AddPerceptual;
            c.weights.lambda_p = lp;
            (format!("lambda_p = {lp}"), c)
        })
        .collect()
}

/// Trains each variant into `out_dir/<index>_<preset>` and scores it on the
/// held-out pairs. The combined table is rewritten to `out_dir/table_file`
/// after every variant, so partial results survive an interruption. Variants
/// not started before `budget` runs out are reported without metrics.
#[allow(clippy::too_many_arguments)]
pub fn run_variants(
    variants: &[(String, TrainConfig)],
    sharp: &Dataset,
    blurred: &Dataset,
    held_blurred: &[ImageTensor],
    held_sharp: &[ImageTensor],
    extractor: &dyn FeatureExtractor<f32>,
    out_dir: &Path,
    table_file: &str,
    budget: Option<Duration>,
) -> Result<Vec<(String, Option<Aggregates>)>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let start = Instant::now();
    let mut rows: Vec<(String, Option<Aggregates>)> =
        variants.iter().map(|(l, _)| (l.clone(), None)).collect();
    let table_path = out_dir.join(table_file);
    for (i, (label, cfg)) in variants.iter().enumerate() {
        if budget.is_some_and(|b| start.elapsed() >= b) {
            log::warn!("time budget exhausted; skipping `{label}`");
            continue;
        }
        let dir = out_dir.join(format!("{i}_{}", cfg.ablation_preset));
        log::info!("training `{label}` into {}", dir.display());
        let ckpt = train::train_datasets(cfg, sharp, blurred, &dir, None)?;
        let state = Checkpoint::load(&ckpt)?.state;
        let s = score_held_out(&state, held_blurred, held_sharp, extractor)?;
        rows[i].1 = Some(s.deblurred);
        let table = metrics::render_summary_table(&rows);
        std::fs::write(&table_path, table).map_err(|e| Error::io(&table_path, e))?;
    }
    Ok(rows)
}
