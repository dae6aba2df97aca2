//! One pass of the discovery loop over a new micrograph.
//!
//! The first phase runs steps 1 and 2 and commits the review queue. Once
//! every queued item is decided, the second phase (run directly with
//! `--auto`, or later with `--resume`) files the new exemplars, retrains
//! both models and registers them. Each phase works on an in-memory copy
//! and commits once at its end, so a failure leaves the catalog untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use mcforge_core::catalog::{Catalog, CatalogLock, Decision, ModelKind, PatchRef, ReviewState, AUTO_DECIDER};
use mcforge_core::edlclassify::Classifier;

use crate::config::PipelineConfig;
use crate::models::{classifier_metrics, segmenter_metrics, train_catalog_classifier, train_catalog_segmenter, SegStart};
use crate::step1::{load_hrs, step1};
use crate::step2::{step2, HrDecision, Step2Report};

const STEP1_DIR: &str = "step1";
const STEP2_REPORT: &str = "step2.json";
const ITERATION_REPORT: &str = "iteration.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IterateOptions {
    /// Decide queued items automatically (novel HRs become new classes,
    /// tied HRs take their top candidate). For testing only.
    pub auto: bool,
    /// Continue a run whose review items have since been decided.
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub source: String,
    pub classes_before: usize,
    pub classes_after: usize,
    pub exemplars_added: usize,
    pub classifier_model: Option<u64>,
    pub segmenter_model: Option<u64>,
    pub segmenter_start: Option<SegStart>,
    pub catalog_version: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    AwaitingReview { items: Vec<u64> },
    Completed(IterationReport),
}

/// A classifier matching the catalog's class list, trained and registered
/// first if the latest one is stale.
fn current_classifier(c: &mut Catalog, cfg: &PipelineConfig) -> Result<Classifier> {
    let classes = c.class_ids();
    if let Some((_, ck)) = c.latest_model(ModelKind::Classifier).filter(|(m, _)| m.classes == classes) {
        return Ok(Classifier::from_checkpoint(ck)?);
    }
    let (ck, log) = train_catalog_classifier(c, &cfg.classify)?;
    let model = Classifier::from_checkpoint(&ck)?;
    c.register_model(ModelKind::Classifier, ck, classifier_metrics(&log))?;
    Ok(model)
}

fn unique_name(c: &Catalog, base: &str) -> String {
    let taken = |n: &str| c.records().iter().any(|r| r.name == n);
    let mut name = base.to_string();
    let mut i = 2;
    while taken(&name) {
        name = format!("{base}-{i}");
        i += 1;
    }
    name
}

/// Machine decisions for every item queued by `report`. Novel HRs sharing a
/// step 1 label become one new class.
fn auto_decide(c: &mut Catalog, report: &Step2Report) -> Result<()> {
    let mut created: BTreeMap<u32, u32> = BTreeMap::new();
    for hr in &report.hrs {
        let Some(item) = hr.item else { continue };
        let decision = match (hr.verdict.decision, created.get(&hr.label)) {
            (HrDecision::Novel, Some(&class_id)) => Decision::Assign { class_id },
            (HrDecision::Novel, None) => Decision::CreateNew {
                name: unique_name(c, &format!("{}-hr{}", report.source, hr.hr)),
            },
            _ => {
                let top = c.item(item).and_then(|i| i.prediction.candidates.first()).map(|cand| cand.class);
                Decision::Assign {
                    class_id: top.context("tied HR has no candidate")?,
                }
            }
        };
        let (_, new) = c.decide_review(item, decision, AUTO_DECIDER)?;
        if let Some(r) = new {
            created.insert(hr.label, r.id);
        }
    }
    Ok(())
}

/// Class an HR's exemplars belong to after review, if it has one.
fn resolved_class(c: &Catalog, decision: HrDecision, item: Option<u64>) -> Result<Option<u32>> {
    if let HrDecision::Existing { class } = decision {
        return Ok(Some(class));
    }
    let Some(id) = item else { return Ok(None) };
    let item = c.item(id).with_context(|| format!("review item {id} is missing from the catalog"))?;
    if item.state != ReviewState::Decided {
        bail!("review item {id} is still pending");
    }
    Ok(match item.decision.as_ref() {
        Some(Decision::Assign { class_id }) => Some(*class_id),
        Some(Decision::CreateNew { name }) => c.records().iter().find(|r| &r.name == name).map(|r| r.id),
        None => None,
    })
}

/// Files the HR patches under their resolved classes. The representative
/// of a reviewed HR is already filed by the decision itself.
fn add_hr_exemplars(c: &mut Catalog, report: &Step2Report) -> Result<usize> {
    let mut added = 0;
    for hr in &report.hrs {
        let Some(class) = resolved_class(c, hr.verdict.decision, hr.item)? else {
            continue;
        };
        let skip = usize::from(hr.item.is_some());
        let have: BTreeSet<&str> = c
            .record(class)
            .with_context(|| format!("class {class} is missing"))?
            .exemplars
            .iter()
            .map(|e| e.patch.as_str())
            .collect();
        let new: Vec<PatchRef> = hr
            .exemplars
            .iter()
            .skip(skip)
            .filter(|e| !have.contains(e.patch.as_str()))
            .cloned()
            .collect();
        if !new.is_empty() {
            added += new.len();
            c.add_exemplars(class, new)?;
        }
    }
    Ok(added)
}

pub fn iterate(image: Option<&Path>, root: &Path, work: &Path, cfg: &PipelineConfig, opts: IterateOptions) -> Result<Outcome> {
    let _lock = CatalogLock::acquire(root)?;
    let mut catalog = Catalog::load(root).with_context(|| format!("loading catalog {}", root.display()))?;
    let report_path = work.join(STEP2_REPORT);
    let report = if opts.resume {
        if work.join(ITERATION_REPORT).exists() {
            bail!("the iteration in {} has already completed", work.display());
        }
        Step2Report::load(&report_path)?
    } else {
        let image = image.context("iterate needs an image unless resuming")?;
        let pending = catalog.pending().len();
        if pending > 0 {
            bail!("{pending} review item(s) are pending from an earlier run; decide them and resume that run first");
        }
        fs::create_dir_all(work).with_context(|| format!("creating {}", work.display()))?;
        cfg.save(&work.join("config.json"))?;
        let model = current_classifier(&mut catalog, cfg)?;
        step1(image, cfg, &work.join(STEP1_DIR))?;
        let (source, hrs) = load_hrs(&work.join(STEP1_DIR))?;
        let report = step2(&mut catalog, &source, &hrs, &model, &cfg.classify)?;
        report.save(&report_path)?;
        if opts.auto {
            auto_decide(&mut catalog, &report)?;
        } else if !report.queued().is_empty() {
            catalog.commit(root)?;
            return Ok(Outcome::AwaitingReview { items: report.queued() });
        }
        report
    };

    let pending: Vec<u64> = catalog.pending().iter().map(|i| i.id).collect();
    if !pending.is_empty() {
        bail!("retraining is blocked by {} pending review item(s): {pending:?}", pending.len());
    }
    let classes_before = report.classes.len();
    let exemplars_added = add_hr_exemplars(&mut catalog, &report)?;
    let mut iteration = IterationReport {
        source: report.source.clone(),
        classes_before,
        classes_after: catalog.records().len(),
        exemplars_added,
        classifier_model: None,
        segmenter_model: None,
        segmenter_start: None,
        catalog_version: 0,
    };
    if catalog.records().len() >= 2 {
        let (ck, log) = train_catalog_classifier(&catalog, &cfg.classify)?;
        iteration.classifier_model = Some(catalog.register_model(ModelKind::Classifier, ck, classifier_metrics(&log))?.id);
        let (ck, log, start) = train_catalog_segmenter(&catalog, &cfg.segment, cfg.seed)?;
        iteration.segmenter_model = Some(catalog.register_model(ModelKind::Segmenter, ck, segmenter_metrics(&log, start))?.id);
        iteration.segmenter_start = Some(start);
    } else {
        log::warn!("iterate: fewer than two classes; models are not retrained");
    }
    iteration.catalog_version = catalog.version();
    catalog.commit(root)?;
    fs::write(work.join(ITERATION_REPORT), serde_json::to_vec_pretty(&json!(iteration))?)?;
    Ok(Outcome::Completed(iteration))
}
