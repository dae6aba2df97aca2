//! Step 2: classify each HR against the catalog and queue the uncertain
//! ones for human review.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mcforge_core::catalog::{Catalog, PatchRef};
use mcforge_core::edlclassify::{classify_patch, novelty_decision, Classifier, ClassifyOptions, Novelty, RankedPrediction};
use mcforge_core::imagecore::Patch;

use crate::config::ClassifyConfig;
use crate::step1::Hr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HrDecision {
    Existing { class: u32 },
    Novel,
    /// No single majority; sent to review like a novel HR.
    Tie,
}

impl HrDecision {
    pub fn needs_review(self) -> bool {
        !matches!(self, HrDecision::Existing { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrVerdict {
    pub decision: HrDecision,
    /// Patch votes keyed by class id, or "novel".
    pub votes: BTreeMap<String, usize>,
    pub mean_uncertainty: f64,
    /// Patch shown to the reviewer.
    pub representative: Option<usize>,
}

fn vote_key(v: Option<u32>) -> String {
    v.map_or_else(|| "novel".to_string(), |c| c.to_string())
}

fn argmax_uncertainty<'a>(preds: impl Iterator<Item = (usize, &'a RankedPrediction)>) -> Option<usize> {
    preds
        .fold(None, |best: Option<(usize, f64)>, (i, p)| match best {
            Some((_, u)) if u >= p.uncertainty => best,
            _ => Some((i, p.uncertainty)),
        })
        .map(|(i, _)| i)
}

/// Majority vote over patch-level novelty decisions. A novel or tied HR is
/// represented in review by its most uncertain patch (among the novel votes
/// when novel wins).
pub fn vote(preds: &[RankedPrediction], tau_u: f64) -> HrVerdict {
    let decisions: Vec<Option<u32>> = preds
        .iter()
        .map(|p| match novelty_decision(p, tau_u) {
            Novelty::Existing(c) => Some(c),
            Novelty::Novel => None,
        })
        .collect();
    let mut counts: BTreeMap<Option<u32>, usize> = BTreeMap::new();
    for d in &decisions {
        *counts.entry(*d).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    let leaders: Vec<Option<u32>> = counts.iter().filter(|(_, &n)| n == top).map(|(k, _)| *k).collect();
    let decision = match leaders.as_slice() {
        [Some(c)] => HrDecision::Existing { class: *c },
        [None] => HrDecision::Novel,
        _ => HrDecision::Tie,
    };
    let representative = match decision {
        HrDecision::Existing { .. } => None,
        HrDecision::Novel => argmax_uncertainty(preds.iter().enumerate().filter(|(i, _)| decisions[*i].is_none())),
        HrDecision::Tie => argmax_uncertainty(preds.iter().enumerate()),
    };
    HrVerdict {
        decision,
        votes: counts.into_iter().map(|(k, n)| (vote_key(k), n)).collect(),
        mean_uncertainty: preds.iter().map(|p| p.uncertainty).sum::<f64>() / preds.len().max(1) as f64,
        representative,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrReport {
    pub hr: u32,
    pub label: u32,
    #[serde(flatten)]
    pub verdict: HrVerdict,
    /// Review item for novel and tied HRs.
    pub item: Option<u64>,
    /// Stored exemplar candidates; for reviewed HRs the first one is the
    /// representative.
    pub exemplars: Vec<PatchRef>,
    pub predictions: Vec<RankedPrediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step2Report {
    pub source: String,
    pub catalog_version: u64,
    pub classes: Vec<u32>,
    pub hrs: Vec<HrReport>,
}

impl Step2Report {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn queued(&self) -> Vec<u64> {
        self.hrs.iter().filter_map(|h| h.item).collect()
    }
}

/// Classifies every HR, stores exemplar candidates in the patch store and
/// queues novel and tied HRs for review.
pub fn step2(catalog: &mut Catalog, source: &str, hrs: &[Hr], model: &Classifier, cfg: &ClassifyConfig) -> Result<Step2Report> {
    let classes = catalog.class_ids();
    if model.classes != classes {
        bail!(
            "step2: the classifier knows classes {:?} but catalog version {} has {:?}; retrain the classifier",
            model.classes,
            catalog.version(),
            classes
        );
    }
    if model.meta.patch_size != catalog.patch_size() {
        bail!(
            "step2: classifier patches are {} px but catalog patches are {} px",
            model.meta.patch_size,
            catalog.patch_size()
        );
    }
    let opts = ClassifyOptions {
        k_prime: cfg.k_prime,
        prior_subset: None,
        tau_u: cfg.tau_u,
    };
    let mut report = Step2Report {
        source: source.to_string(),
        catalog_version: catalog.version(),
        classes,
        hrs: Vec::new(),
    };
    if hrs.iter().all(|h| h.patches.is_empty()) {
        log::warn!("step2: {source} has no patches; nothing to classify");
        return Ok(report);
    }
    for hr in hrs.iter().filter(|h| !h.patches.is_empty()) {
        let mut preds = Vec::with_capacity(hr.patches.len());
        let mut refs = Vec::with_capacity(hr.patches.len());
        for (entry, m) in &hr.patches {
            let patch = Patch {
                row: entry.row,
                col: entry.col,
                size: m.width,
                pixels: m.pixels.clone(),
            };
            let r = catalog
                .store_patch(&patch, source, hr.id)
                .with_context(|| format!("step2: storing {}", entry.file))?;
            preds.push(classify_patch(model, &r.patch, &m.pixels, &opts).context("step2: classification")?);
            refs.push(r);
        }
        let verdict = vote(&preds, cfg.tau_u);
        // Exemplar candidates: the representative first, then the patches
        // that agree with the HR decision, least uncertain first.
        let mut order: Vec<usize> = (0..preds.len())
            .filter(|&i| match verdict.decision {
                HrDecision::Existing { class } => novelty_decision(&preds[i], cfg.tau_u) == Novelty::Existing(class),
                _ => Some(i) != verdict.representative,
            })
            .collect();
        order.sort_by(|&a, &b| preds[a].uncertainty.total_cmp(&preds[b].uncertainty));
        order.splice(0..0, verdict.representative);
        order.truncate(cfg.max_exemplars_per_hr.max(1));
        let exemplars: Vec<PatchRef> = order.iter().map(|&i| refs[i].clone()).collect();

        let item = match verdict.representative {
            Some(i) => {
                let pred = preds[i].clone();
                let forced = !pred.novel;
                Some(catalog.enqueue_review(refs[i].clone(), pred, forced)?.id)
            }
            None => None,
        };
        log::info!(
            "step2: {source} HR {} ({} patches): {:?}{}",
            hr.id,
            preds.len(),
            verdict.decision,
            item.map(|i| format!(", review item {i}")).unwrap_or_default()
        );
        report.hrs.push(HrReport {
            hr: hr.id,
            label: hr.label,
            verdict,
            item,
            exemplars,
            predictions: preds,
        });
    }
    Ok(report)
}
