//! Training the classifier and the segmenter from catalog exemplars, and
//! running the segmenter (step 3).

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use mcforge_core::augment::{build_dataset, ClassExemplars, DatasetItem, Split};
use mcforge_core::catalog::{Catalog, ModelKind};
use mcforge_core::edlclassify::{train_classifier, EpochMetrics, LabeledPatch};
use mcforge_core::imagecore::{save_label_mask, LabelMask, Micrograph};
use mcforge_core::neuralnet::Checkpoint;
use mcforge_core::segnet::{expand_classes, train_segnet, SegEpochMetrics, SegNetConfig, Segmenter};

use crate::config::{ClassifyConfig, SegmentConfig};

fn exemplar_images(c: &Catalog) -> Result<Vec<(u32, Vec<Micrograph>)>> {
    c.records()
        .iter()
        .map(|r| {
            let images = r
                .exemplars
                .iter()
                .map(|e| {
                    c.patch_micrograph(&e.patch)
                        .with_context(|| format!("class {} exemplar {} is missing", r.id, e.patch))
                })
                .collect::<Result<_>>()?;
            Ok((r.id, images))
        })
        .collect()
}

/// Training and validation patches, holding out every `val_every`-th
/// exemplar of each class.
pub fn classifier_sets(c: &Catalog, val_every: usize) -> Result<(Vec<LabeledPatch>, Vec<LabeledPatch>)> {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (class, images) in exemplar_images(c)? {
        for (i, m) in images.into_iter().enumerate() {
            let p = LabeledPatch {
                pixels: m.pixels,
                label: class,
            };
            if val_every > 0 && i % val_every == val_every - 1 {
                val.push(p);
            } else {
                train.push(p);
            }
        }
    }
    Ok((train, val))
}

/// `latest`, if its class list is a prefix of `classes`.
fn prefix_of<'a>(latest: Option<&'a Checkpoint>, classes: &[u32]) -> Option<&'a Checkpoint> {
    latest.filter(|ck| classes.starts_with(&ck.classes))
}

/// Trains a classifier on every catalog class, warm-started from the latest
/// registered classifier when its classes are a prefix of the current ones.
pub fn train_catalog_classifier(c: &Catalog, cfg: &ClassifyConfig) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    let classes = c.class_ids();
    if classes.len() < 2 {
        bail!("train-classifier: the catalog has {} class(es); at least two are needed", classes.len());
    }
    let (train, val) = classifier_sets(c, cfg.val_every)?;
    let warm = prefix_of(c.latest_model(ModelKind::Classifier).map(|(_, ck)| ck), &classes);
    log::info!(
        "train-classifier: {} classes, {} train / {} val patches{}",
        classes.len(),
        train.len(),
        val.len(),
        if warm.is_some() { ", warm start" } else { "" }
    );
    Ok(train_classifier(&train, &val, &classes, c.patch_size(), &cfg.train, warm).context("train-classifier")?)
}

pub fn classifier_metrics(log: &[EpochMetrics]) -> serde_json::Value {
    json!({ "epochs": log.len(), "last": log.last() })
}

pub fn catalog_exemplars(c: &Catalog) -> Result<Vec<ClassExemplars>> {
    Ok(exemplar_images(c)?
        .into_iter()
        .map(|(class, exemplars)| ClassExemplars { class, exemplars })
        .collect())
}

pub fn segment_dataset(c: &Catalog, cfg: &SegmentConfig, seed: u64) -> Result<Vec<DatasetItem>> {
    let classes = catalog_exemplars(c)?;
    if classes.is_empty() {
        bail!("augment: the catalog has no classes");
    }
    Ok(build_dataset(&classes, cfg.count, &cfg.collage, cfg.ratios, seed).context("augment")?)
}

pub fn pairs(items: &[DatasetItem], split: Split) -> Vec<(Micrograph, LabelMask)> {
    items
        .iter()
        .filter(|i| i.split == split)
        .map(|i| (i.collage.image.clone(), i.collage.mask.clone()))
        .collect()
}

/// How a segmenter was initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegStart {
    Scratch,
    FineTune,
    /// Output channels were appended for new classes before fine-tuning.
    Expanded { added: usize },
}

/// Starting point for a segmenter over `classes`: the latest one when its
/// classes are a prefix, with channels appended for the new classes.
pub fn segmenter_start(latest: Option<&Checkpoint>, classes: &[u32], seed: u64) -> Result<(Option<Checkpoint>, SegStart)> {
    let Some(base) = prefix_of(latest, classes) else {
        return Ok((None, SegStart::Scratch));
    };
    let added = &classes[base.classes.len()..];
    let mut ck = base.clone();
    for (i, &class) in added.iter().enumerate() {
        ck = expand_classes(&ck, class, seed.wrapping_add(i as u64), false)?;
    }
    let start = if added.is_empty() {
        SegStart::FineTune
    } else {
        SegStart::Expanded { added: added.len() }
    };
    Ok((Some(ck), start))
}

pub fn train_segmenter_on(
    items: &[DatasetItem],
    classes: &[u32],
    cfg: &SegmentConfig,
    warm: Option<&Checkpoint>,
) -> Result<(Checkpoint, Vec<SegEpochMetrics>)> {
    let net = SegNetConfig {
        classes: classes.len(),
        ..cfg.net.clone()
    };
    let (train, val) = (pairs(items, Split::Train), pairs(items, Split::Val));
    Ok(train_segnet(&train, &val, classes, &net, &cfg.train, warm).context("train-segnet")?)
}

/// Builds collages from the catalog and trains a segmenter, expanding or
/// fine-tuning the latest registered one where possible.
pub fn train_catalog_segmenter(c: &Catalog, cfg: &SegmentConfig, seed: u64) -> Result<(Checkpoint, Vec<SegEpochMetrics>, SegStart)> {
    let classes = c.class_ids();
    if classes.len() < 2 {
        bail!("train-segnet: the catalog has {} class(es); at least two are needed", classes.len());
    }
    let items = segment_dataset(c, cfg, seed)?;
    let (warm, start) = segmenter_start(c.latest_model(ModelKind::Segmenter).map(|(_, ck)| ck), &classes, seed)?;
    log::info!("train-segnet: {} classes, {} collages, {start:?}", classes.len(), items.len());
    let (ck, log) = train_segmenter_on(&items, &classes, cfg, warm.as_ref())?;
    Ok((ck, log, start))
}

pub fn segmenter_metrics(log: &[SegEpochMetrics], start: SegStart) -> serde_json::Value {
    json!({ "epochs": log.len(), "start": start, "last": log.last() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub source: String,
    pub classes: Vec<u32>,
    pub fractions: Vec<f64>,
    pub mean_confidence: f64,
}

/// Segments `m` and writes `mask.pgm` and `segmentation.json` under `dir`.
pub fn segment_image(ck: &Checkpoint, m: &Micrograph, dir: &Path) -> Result<SegmentSummary> {
    let seg = Segmenter::from_checkpoint(ck).context("segment: checkpoint")?;
    let out = seg.segment(m).context("segment")?;
    fs::create_dir_all(dir)?;
    save_label_mask(&out.mask, dir.join("mask.pgm"))?;
    let summary = SegmentSummary {
        source: m.id.clone(),
        classes: seg.classes.clone(),
        fractions: out.class_fractions(&seg.classes),
        mean_confidence: out.mean_confidence(),
    };
    fs::write(dir.join("segmentation.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}
