//! Step 1: unsupervised segmentation of one micrograph into homogeneous
//! regions (HRs) and harvesting of their patches.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mcforge_core::imagecore::{
    connected_regions, extract_neighborhoods, harvest_patches, load_micrograph, save_label_mask, save_micrograph, LabelMask,
    Micrograph, Patch,
};
use mcforge_core::scorefield::{compute_scores, fit_predictor, reduce_scores, smooth_scores};
use mcforge_core::vbgmm::{fit_vbgmm, information_criteria, segment_labels, significant_clusters, write_ic_csv, BgmHyper, IcCurve};

use crate::config::{PipelineConfig, Step1Config};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    /// Relative to the step 1 directory.
    pub file: String,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrSummary {
    pub id: u32,
    /// Mixture label of the region in `mask.pgm`.
    pub label: u32,
    pub pixels: usize,
    /// (top, left, bottom, right), inclusive.
    pub bbox: (usize, usize, usize, usize),
    pub patches: Vec<PatchEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step1Summary {
    pub source: String,
    pub width: usize,
    pub height: usize,
    /// Unlabeled band width, `l_s + l_w`.
    pub border: usize,
    pub score_dim: usize,
    /// Vectors the mixture was fitted on.
    pub fit_vectors: usize,
    pub suggested_k: usize,
    pub fitted_k: usize,
    /// Posterior mixture weights at the fitted K.
    pub weights: Vec<f64>,
    pub significant: Vec<usize>,
    pub regions: Vec<HrSummary>,
}

#[derive(Clone, Debug)]
pub struct Step1Output {
    pub summary: Step1Summary,
    pub curve: IcCurve,
    pub mask: LabelMask,
    /// Harvested patches, one list per entry of `summary.regions`.
    pub patches: Vec<Vec<Patch>>,
}

fn patch_file(hr: u32, p: &Patch) -> String {
    format!("patches/hr{hr:03}_{:04}_{:04}.pgm", p.row, p.col)
}

pub fn run_step1(m: &Micrograph, cfg: &Step1Config, seed: u64) -> Result<Step1Output> {
    let samples = extract_neighborhoods(m, cfg.l_s).context("step1: neighborhoods")?;
    let predictor = fit_predictor(&samples, &cfg.predictor, seed).context("step1: predictor fit")?;
    let raw = compute_scores(m, &predictor).context("step1: scores")?;
    let mut field = smooth_scores(&raw, cfg.l_w, cfg.sigma()).context("step1: smoothing")?;
    if let Some(n) = cfg.reduce {
        field = reduce_scores(&field, n).context("step1: score reduction")?;
    }
    let sub = field.subsample(cfg.stride());
    let n = sub.len() / field.dim;
    let k_range: Vec<usize> = (1..=cfg.k_max.min(n)).collect();
    let curve = information_criteria(&sub, field.dim, &k_range, &cfg.mixture).context("step1: information criteria")?;
    let k = cfg.k.unwrap_or(curve.suggested_k);
    let hyper = BgmHyper::from_data(&sub, field.dim, k, &cfg.mixture).context("step1: mixture prior")?;
    let post = fit_vbgmm(&sub, field.dim, &hyper)
        .and_then(|p| p.reassigned(&field.data))
        .context("step1: mixture fit")?;
    let significant = significant_clusters(&post, cfg.weight_threshold);
    let mask = segment_labels(&post, &field, &significant).context("step1: labeling")?;

    let mut regions = Vec::new();
    let mut patches = Vec::new();
    for (i, region) in connected_regions(&mask, cfg.min_region_pixels())
        .context("step1: regions")?
        .iter()
        .enumerate()
    {
        let id = i as u32;
        let found = harvest_patches(m, region, cfg.patch_size, cfg.patch_stride).context("step1: patch harvest")?;
        regions.push(HrSummary {
            id,
            label: region.label,
            pixels: region.len(),
            bbox: region.bbox,
            patches: found
                .iter()
                .map(|p| PatchEntry {
                    file: patch_file(id, p),
                    row: p.row,
                    col: p.col,
                })
                .collect(),
        });
        patches.push(found);
    }
    log::info!(
        "step1: {}: suggested K {}, fitted K {}, {} labels, {} regions",
        m.id,
        curve.suggested_k,
        k,
        significant.len(),
        regions.len()
    );
    Ok(Step1Output {
        summary: Step1Summary {
            source: m.id.clone(),
            width: m.width,
            height: m.height,
            border: field.border,
            score_dim: field.dim,
            fit_vectors: n,
            suggested_k: curve.suggested_k,
            fitted_k: k,
            weights: post.pi_hat.clone(),
            significant,
            regions,
        },
        curve,
        mask,
        patches,
    })
}

/// Writes `config.json`, `ic.csv`, `weights.csv`, `mask.pgm`,
/// `summary.json` and `patches/` under `dir`. Nothing written depends on
/// the clock, so reruns are byte-identical.
pub fn write_step1(out: &Step1Output, cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("patches")).with_context(|| format!("creating {}", dir.display()))?;
    cfg.save(&dir.join("config.json"))?;
    write_ic_csv(&out.curve, dir.join("ic.csv"))?;
    let s = &out.summary;
    let mut weights = String::from("component,weight,significant\n");
    for (j, w) in s.weights.iter().enumerate() {
        weights += &format!("{j},{w},{}\n", s.significant.contains(&j));
    }
    fs::write(dir.join("weights.csv"), weights)?;
    save_label_mask(&out.mask, dir.join("mask.pgm"))?;
    for (hr, found) in s.regions.iter().zip(&out.patches) {
        for (entry, p) in hr.patches.iter().zip(found) {
            save_micrograph(&p.to_micrograph(&entry.file), dir.join(&entry.file))?;
        }
    }
    fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(s)?)?;
    Ok(())
}

pub fn step1(image: &Path, cfg: &PipelineConfig, dir: &Path) -> Result<Step1Output> {
    let m = load_micrograph(image).with_context(|| format!("step1: loading {}", image.display()))?;
    let out = run_step1(&m, &cfg.step1, cfg.seed)?;
    write_step1(&out, cfg, dir)?;
    Ok(out)
}

/// One HR with its patches, as read back for step 2.
#[derive(Clone, Debug)]
pub struct Hr {
    pub id: u32,
    pub label: u32,
    pub patches: Vec<(PatchEntry, Micrograph)>,
}

/// Reads the HRs of a step 1 directory. A directory without `summary.json`
/// is taken as a flat set of patch images forming a single HR.
pub fn load_hrs(dir: &Path) -> Result<(String, Vec<Hr>)> {
    let summary_path = dir.join("summary.json");
    if summary_path.exists() {
        let summary: Step1Summary = serde_json::from_slice(&fs::read(&summary_path)?)
            .with_context(|| format!("parsing {}", summary_path.display()))?;
        let hrs = summary
            .regions
            .iter()
            .map(|r| {
                let patches = r
                    .patches
                    .iter()
                    .map(|e| Ok((e.clone(), load_micrograph(dir.join(&e.file))?)))
                    .collect::<Result<_>>()?;
                Ok(Hr {
                    id: r.id,
                    label: r.label,
                    patches,
                })
            })
            .collect::<Result<_>>()?;
        return Ok((summary.source, hrs));
    }
    if !dir.is_dir() {
        bail!("{} is neither a step 1 output nor a patch directory", dir.display());
    }
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm" || e == "png"))
        .collect();
    files.sort();
    let patches = files
        .iter()
        .map(|p| {
            let entry = PatchEntry {
                file: p.file_name().unwrap().to_string_lossy().into_owned(),
                row: 0,
                col: 0,
            };
            Ok((entry, load_micrograph(p)?))
        })
        .collect::<Result<_>>()?;
    let source = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok((
        source,
        vec![Hr {
            id: 0,
            label: 0,
            patches,
        }],
    ))
}
