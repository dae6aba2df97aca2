mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use common::*;
use mcforge_cli::iterate::{iterate, IterateOptions, Outcome};
use mcforge_cli::models::{segmenter_metrics, train_catalog_classifier, train_catalog_segmenter, SegStart};
use mcforge_cli::step1::{load_hrs, run_step1, step1};
use mcforge_cli::step2::{step2, HrDecision};
use mcforge_cli::PipelineConfig;
use mcforge_core::catalog::{Catalog, CatalogLock, Decision, McStatus, ModelKind};
use mcforge_core::edlclassify::Classifier;
use mcforge_core::imagecore::UNLABELED;
use mcforge_core::segnet::Segmenter;
use mcforge_core::synth::{bank_texture, render};

fn class_id(c: &Catalog, name: &str) -> u32 {
    c.records().iter().find(|r| r.name == name).unwrap().id
}

fn exemplar_counts(c: &Catalog) -> Vec<usize> {
    c.records().iter().map(|r| r.exemplars.len()).collect()
}

fn known_catalog(dir: &Path) -> PathBuf {
    let root = dir.join("catalog");
    seeded_catalog(&KNOWN, 40).commit(&root).unwrap();
    root
}

fn three_texture_config() -> PipelineConfig {
    let mut cfg = fast_config();
    cfg.step1.l_s = 3;
    cfg.step1.l_w = 8;
    cfg.step1.fit_stride = Some(8);
    cfg.step1.patch_size = 16;
    cfg.step1.patch_stride = 16;
    cfg
}

#[test]
fn step1_finds_three_textures_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = three_texture_config();
    let image = save(&three_phase(["grain", "streak-h", "bands-8"], 128, 0), tmp.path(), "three.pgm");

    let out = step1(&image, &cfg, &tmp.path().join("a")).unwrap();
    let s = &out.summary;
    assert_eq!(s.suggested_k, 3);
    assert_eq!(s.significant.len(), 3);
    assert_eq!(s.border, 11);

    let labels: BTreeSet<u32> = out.mask.labels.iter().copied().collect();
    assert_eq!(labels.len(), 4);
    assert!(labels.contains(&UNLABELED));
    for (i, &l) in out.mask.labels.iter().enumerate() {
        let (r, c) = (i / 128, i % 128);
        let inside = (11..128 - 11).contains(&r) && (11..128 - 11).contains(&c);
        assert_eq!(l != UNLABELED, inside, "pixel ({r}, {c})");
    }
    assert!(!s.regions.is_empty());
    assert!(s.regions.iter().all(|r| r.pixels >= cfg.step1.min_region_pixels()));

    let ic = fs::read_to_string(tmp.path().join("a/ic.csv")).unwrap();
    assert_eq!(ic.lines().count(), 1 + cfg.step1.k_max);
    for f in ["config.json", "weights.csv", "mask.pgm", "summary.json"] {
        assert!(tmp.path().join("a").join(f).is_file(), "{f}");
    }
    let (_, hrs) = load_hrs(&tmp.path().join("a")).unwrap();
    assert_eq!(hrs.len(), s.regions.len());
    assert!(hrs.iter().all(|h| h.patches.iter().all(|(_, m)| m.width == 16)));

    step1(&image, &cfg, &tmp.path().join("b")).unwrap();
    assert_eq!(hash_dir(&tmp.path().join("a")), hash_dir(&tmp.path().join("b")));
}

#[test]
fn uniform_image_is_one_region() {
    let cfg = three_texture_config();
    let m = render(&bank_texture("grain").unwrap(), 128, 128, 5);
    let out = run_step1(&m, &cfg.step1, cfg.seed).unwrap();
    assert_eq!(out.summary.suggested_k, 1);
    assert_eq!(out.summary.regions.len(), 1);
}

#[test]
fn step2_keeps_known_regions_and_queues_novel_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config();
    let mut c = seeded_catalog(&KNOWN, 40);
    let (ck, _) = train_catalog_classifier(&c, &cfg.classify).unwrap();
    let model = Classifier::from_checkpoint(&ck).unwrap();
    let before = exemplar_counts(&c);
    let version = c.version();

    let image = save(&two_phase(["streak-h", "mottle"], 256, 3), tmp.path(), "mixed.pgm");
    step1(&image, &cfg, &tmp.path().join("s1")).unwrap();
    let (source, hrs) = load_hrs(&tmp.path().join("s1")).unwrap();
    let report = step2(&mut c, &source, &hrs, &model, &cfg.classify).unwrap();

    let streak = class_id(&c, "streak-h");
    assert!(report.hrs.iter().any(|h| h.verdict.decision == HrDecision::Existing { class: streak }));
    assert!(report.hrs.iter().any(|h| h.verdict.decision == HrDecision::Novel));
    for h in &report.hrs {
        assert_eq!(h.item.is_some(), h.verdict.decision.needs_review());
        assert_eq!(h.predictions.len(), hrs.iter().find(|r| r.id == h.hr).unwrap().patches.len());
        assert!(!h.exemplars.is_empty() && h.exemplars.len() <= cfg.classify.max_exemplars_per_hr);
        if let Some(i) = h.verdict.representative {
            assert_eq!(h.exemplars[0].patch, h.predictions[i].patch_id);
        }
    }
    let pending: Vec<u64> = c.pending().iter().map(|i| i.id).collect();
    assert_eq!(pending, report.queued());
    assert!(c.pending().iter().all(|i| i.prediction.novel || i.prediction.uncertainty <= cfg.classify.tau_u));
    assert_eq!(c.version(), version + report.queued().len() as u64);
    // Step 2 never files exemplars on its own.
    assert_eq!(exemplar_counts(&c), before);
}

#[test]
fn step2_without_patches_is_a_no_op() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config();
    let mut c = seeded_catalog(&KNOWN[..2], 10);
    let (ck, _) = train_catalog_classifier(&c, &cfg.classify).unwrap();
    let model = Classifier::from_checkpoint(&ck).unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let (source, hrs) = load_hrs(&empty).unwrap();
    let version = c.version();
    let report = step2(&mut c, &source, &hrs, &model, &cfg.classify).unwrap();
    assert!(report.hrs.is_empty());
    assert_eq!(c.version(), version);
}

#[test]
fn step2_rejects_a_stale_classifier() {
    let cfg = fast_config();
    let mut c = seeded_catalog(&KNOWN[..2], 10);
    let (ck, _) = train_catalog_classifier(&c, &cfg.classify).unwrap();
    let model = Classifier::from_checkpoint(&ck).unwrap();
    let refs = c.records()[0].exemplars[..2].to_vec();
    c.add_mc("extra", refs).unwrap();
    let err = step2(&mut c, "x", &[], &model, &cfg.classify).unwrap_err();
    assert!(format!("{err:#}").contains("retrain"), "{err:#}");
}

#[test]
fn auto_iterations_grow_the_catalog_and_the_segmenter() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config();
    let root = known_catalog(tmp.path());
    {
        let mut c = Catalog::load(&root).unwrap();
        let (ck, log, start) = train_catalog_segmenter(&c, &cfg.segment, cfg.seed).unwrap();
        assert_eq!(start, SegStart::Scratch);
        c.register_model(ModelKind::Segmenter, ck, segmenter_metrics(&log, start)).unwrap();
        c.commit(&root).unwrap();
    }
    let auto = IterateOptions { auto: true, resume: false };

    let image = save(&two_phase(["grain", "anti-diag"], 256, 4), tmp.path(), "novel.pgm");
    let Outcome::Completed(r) = iterate(Some(&image), &root, &tmp.path().join("w1"), &cfg, auto).unwrap() else {
        panic!("auto iteration stopped for review");
    };
    assert_eq!((r.classes_before, r.classes_after), (4, 5));
    assert_eq!(r.segmenter_start, Some(SegStart::Expanded { added: 1 }));
    assert!(r.exemplars_added > 0);
    assert!(tmp.path().join("w1/iteration.json").is_file());

    let c = Catalog::load(&root).unwrap();
    assert_eq!(c.version(), r.catalog_version);
    assert!(c.pending().is_empty());
    let new = &c.records()[4];
    assert_eq!(new.status, McStatus::Provisional);
    let (entry, ck) = c.latest_model(ModelKind::Segmenter).unwrap();
    assert_eq!(Some(entry.id), r.segmenter_model);
    let seg = Segmenter::from_checkpoint(ck).unwrap();
    assert_eq!(seg.classes, c.class_ids());
    assert_eq!(seg.net.output_shape()[0], 5);
    assert_eq!(c.latest_model(ModelKind::Classifier).unwrap().0.classes, c.class_ids());

    let before = exemplar_counts(&c);
    let image = save(&two_phase(["streak-h", "grain"], 256, 5), tmp.path(), "known.pgm");
    let Outcome::Completed(r) = iterate(Some(&image), &root, &tmp.path().join("w2"), &cfg, auto).unwrap() else {
        panic!("auto iteration stopped for review");
    };
    assert_eq!((r.classes_before, r.classes_after), (5, 5));
    assert_eq!(r.segmenter_start, Some(SegStart::FineTune));
    let c = Catalog::load(&root).unwrap();
    let after = exemplar_counts(&c);
    assert!(after.iter().zip(&before).all(|(a, b)| a >= b));
    assert_eq!(after.iter().sum::<usize>(), before.iter().sum::<usize>() + r.exemplars_added);
    assert!(r.exemplars_added > 0);
}

#[test]
fn reviewed_iteration_waits_for_decisions_then_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config();
    let root = known_catalog(tmp.path());
    let work = tmp.path().join("work");
    let image = save(&two_phase(["streak-h", "mottle"], 256, 6), tmp.path(), "mixed.pgm");

    let Outcome::AwaitingReview { items } = iterate(Some(&image), &root, &work, &cfg, IterateOptions::default()).unwrap()
    else {
        panic!("novel texture was not queued");
    };
    assert!(!items.is_empty());
    let snapshot = hash_dir(&root);

    // Neither a new run nor a resume may retrain while items are pending.
    let err = iterate(Some(&image), &root, &tmp.path().join("other"), &cfg, IterateOptions::default()).unwrap_err();
    assert!(format!("{err:#}").contains("pending"), "{err:#}");
    let resume = IterateOptions { auto: false, resume: true };
    let err = iterate(None, &root, &work, &cfg, resume).unwrap_err();
    assert!(format!("{err:#}").contains("pending"), "{err:#}");
    assert_eq!(hash_dir(&root), snapshot);

    {
        let _lock = CatalogLock::acquire(&root).unwrap();
        let mut c = Catalog::load(&root).unwrap();
        let mut mottle = None;
        for id in &items {
            let top = c.item(*id).unwrap().prediction.candidates[0].class;
            let decision = match (c.item(*id).unwrap().prediction.novel, mottle) {
                (true, None) => Decision::CreateNew { name: "mottle".into() },
                (true, Some(class_id)) => Decision::Assign { class_id },
                (false, _) => Decision::Assign { class_id: top },
            };
            if let (_, Some(r)) = c.decide_review(*id, decision, "reviewer").unwrap() {
                mottle = Some(r.id);
            }
        }
        assert!(mottle.is_some());
        c.commit(&root).unwrap();
    }

    let Outcome::Completed(r) = iterate(None, &root, &work, &cfg, resume).unwrap() else {
        panic!("resume did not complete");
    };
    assert_eq!((r.classes_before, r.classes_after), (4, 5));
    assert_eq!(r.segmenter_start, Some(SegStart::Scratch));
    let c = Catalog::load(&root).unwrap();
    let mottle = c.record(class_id(&c, "mottle")).unwrap();
    assert_eq!(mottle.status, McStatus::Verified);
    assert!(mottle.exemplars.len() > 1);

    let err = iterate(None, &root, &work, &cfg, resume).unwrap_err();
    assert!(format!("{err:#}").contains("already completed"), "{err:#}");
}

#[test]
fn failed_iteration_leaves_the_catalog_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config();
    let root = known_catalog(tmp.path());
    let snapshot = hash_dir(&root);
    let missing = tmp.path().join("missing.pgm");
    let err = iterate(Some(&missing), &root, &tmp.path().join("w"), &cfg, IterateOptions::default()).unwrap_err();
    assert!(format!("{err:#}").contains("missing.pgm"), "{err:#}");
    assert_eq!(hash_dir(&root), snapshot);
    // The lock was released.
    drop(CatalogLock::acquire(&root).unwrap());
}
