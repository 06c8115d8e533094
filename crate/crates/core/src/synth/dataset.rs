use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::pgm;
use crate::seed::{derive_seed, streams};

use super::{generate_sample, SynthConfig};

pub const IMAGES_DIR: &str = "images";
pub const TRUTH_DIR: &str = "truth";
pub const LABELS_DIR: &str = "labels";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub seed: u64,
    pub image: String,
    pub truth: String,
    pub label: String,
    pub curve_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub master_seed: u64,
    pub count: usize,
    pub samples: Vec<SampleRecord>,
}

/// Tracks what we created so a failed run can be rolled back.
struct Created {
    root_existed: bool,
    root: PathBuf,
    dirs: Vec<PathBuf>,
    files: Vec<PathBuf>,
}

impl Created {
    fn rollback(&self) {
        if !self.root_existed {
            let _ = fs::remove_dir_all(&self.root);
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
}

fn mkdir(path: &Path, created: &mut Created) -> Result<()> {
    if !path.is_dir() {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        created.dirs.push(path.to_path_buf());
    }
    Ok(())
}

/// Writes `count` samples plus `manifest.json` under `out_dir`. On any
/// failure everything this call created is removed again.
pub fn generate_dataset(
    config: &SynthConfig,
    count: usize,
    out_dir: &Path,
    backgrounds: Option<&[Image]>,
) -> Result<Manifest> {
    config.validate()?;
    if let Some(b) = backgrounds {
        if b.is_empty() {
            return Err(Error::Dataset("background list is empty".into()));
        }
    }
    let mut created = Created { root_existed: out_dir.exists(), root: out_dir.to_path_buf(), dirs: vec![], files: vec![] };
    let result = write_all(config, count, out_dir, backgrounds, &mut created);
    if result.is_err() {
        created.rollback();
    }
    result
}

fn write_all(
    config: &SynthConfig,
    count: usize,
    out_dir: &Path,
    backgrounds: Option<&[Image]>,
    created: &mut Created,
) -> Result<Manifest> {
    mkdir(out_dir, created)?;
    for sub in [IMAGES_DIR, TRUTH_DIR, LABELS_DIR] {
        mkdir(&out_dir.join(sub), created)?;
    }
    let samples: Vec<_> = (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(config.seed, streams::SAMPLE, i as u64);
            let bg = backgrounds.map(|b| &b[i % b.len()]);
            generate_sample(config, seed, bg).map(|s| (i, seed, s))
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(count);
    for (i, seed, sample) in samples {
        let id = format!("{i:04}");
        let rel = |d: &str| format!("{d}/{id}.pgm");
        let rec = SampleRecord {
            id: id.clone(),
            seed,
            image: rel(IMAGES_DIR),
            truth: rel(TRUTH_DIR),
            label: rel(LABELS_DIR),
            curve_count: sample.curves.len(),
        };
        let writes: [(&String, pgm::Pgm); 3] = [
            (&rec.image, pgm::image_to_pgm(&sample.image)),
            (&rec.truth, pgm::mask_to_pgm(&sample.truth)),
            (&rec.label, pgm::mask_to_pgm(&sample.pseudo)),
        ];
        for (rel_path, p) in writes {
            let path = out_dir.join(rel_path);
            pgm::write(&path, &p)?;
            created.files.push(path);
        }
        records.push(rec);
    }
    let manifest = Manifest { config: config.clone(), master_seed: config.seed, count, samples: records };
    let path = out_dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    created.files.push(path);
    Ok(manifest)
}

/// One loaded sample; masks are present only if their directory exists.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub image: Image,
    pub labels: Option<LabelMap>,
    pub truth: Option<LabelMap>,
}

/// Sample ids (file stems of `images/*.pgm`), sorted.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let images = dir.join(IMAGES_DIR);
    let entries = fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
    let mut ids = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(&images, e))?;
        let p = e.path();
        if p.extension().is_some_and(|x| x == "pgm") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<LoadedSample>> {
    let ids = list_ids(dir)?;
    let has = |sub: &str| dir.join(sub).is_dir();
    let (has_labels, has_truth) = (has(LABELS_DIR), has(TRUTH_DIR));
    ids.into_iter()
        .map(|id| {
            let file = |sub: &str| dir.join(sub).join(format!("{id}.pgm"));
            let image = pgm::read_image(&file(IMAGES_DIR))?;
            let labels = if has_labels { Some(pgm::read_mask(&file(LABELS_DIR))?) } else { None };
            let truth = if has_truth { Some(pgm::read_mask(&file(TRUTH_DIR))?) } else { None };
            Ok(LoadedSample { id, image, labels, truth })
        })
        .collect()
}
