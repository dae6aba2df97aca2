#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use mcforge_cli::config::PipelineConfig;
use mcforge_core::catalog::Catalog;
use mcforge_core::imagecore::{save_micrograph, Micrograph, Patch};
use mcforge_core::synth::{bank_texture, compose, render, three_phase_regions, two_phase_regions};

pub const PATCH: usize = 32;
pub const KNOWN: [&str; 4] = ["smooth", "streak-h", "grain", "bands-8"];

/// Small patches and short training so a full iteration takes seconds.
pub fn fast_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.step1.patch_size = PATCH;
    cfg.step1.patch_stride = PATCH / 2;
    cfg.segment.net.input_size = PATCH;
    cfg.segment.collage.size = PATCH;
    cfg.segment.count = 60;
    cfg.segment.train.epochs = 3;
    cfg
}

/// A catalog of `names`, each with `per` rendered exemplars.
pub fn seeded_catalog(names: &[&str], per: usize) -> Catalog {
    let mut c = Catalog::new(PATCH);
    for (k, name) in names.iter().enumerate() {
        let spec = bank_texture(name).unwrap();
        let refs = (0..per)
            .map(|j| {
                let m = render(&spec, PATCH, PATCH, 1000 * k as u64 + j as u64);
                let p = Patch {
                    row: 0,
                    col: 0,
                    size: PATCH,
                    pixels: m.pixels,
                };
                c.store_patch(&p, name, 0).unwrap()
            })
            .collect();
        c.add_mc(name, refs).unwrap();
    }
    c
}

pub fn two_phase(names: [&str; 2], size: usize, seed: u64) -> Micrograph {
    let tex = names.map(|n| bank_texture(n).unwrap());
    compose(&tex, &two_phase_regions(size, seed), seed).unwrap()
}

pub fn three_phase(names: [&str; 3], size: usize, seed: u64) -> Micrograph {
    let tex = names.map(|n| bank_texture(n).unwrap());
    compose(&tex, &three_phase_regions(size, seed), seed).unwrap()
}

pub fn save(m: &Micrograph, dir: &Path, name: &str) -> PathBuf {
    let path = dir.join(name);
    save_micrograph(m, &path).unwrap();
    path
}

/// Digest over every file under `dir`: relative paths and contents.
pub fn hash_dir(dir: &Path) -> String {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, out);
            } else {
                out.push(p);
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    hex::encode(h.finalize())
}
