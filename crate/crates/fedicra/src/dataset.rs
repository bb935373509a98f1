//! Dataset dump and load: one directory per site holding PGM images, full
//! masks and sparse labels, plus a JSON-lines manifest.
//!
//! Images are quantized to 8 bits on disk, so a loaded dataset differs from
//! the generated one by up to half a grey level.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fedicra_core::losses::SparseLabelMap;
use fedicra_core::synthdata::{Annotation, BoxAnnotation, Sample, SiteData, SiteSpec};
use fedicra_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{annotation_name, parse_annotation};
use crate::error::{Error, Result};
use crate::pgm::{self, Gray};

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub site: usize,
    pub index: usize,
    pub split: String,
    pub image: String,
    pub mask: String,
    pub labels: String,
    pub annotation: String,
    pub seed: u64,
    pub point_fallbacks: Vec<u8>,
    /// `[class, y0, x0, y1, x1]` per box.
    pub boxes: Vec<[usize; 5]>,
}

fn to_gray(values: impl Iterator<Item = u8>, h: usize, w: usize) -> Gray {
    Gray {
        width: w,
        height: h,
        pixels: values.collect(),
    }
}

fn site_dir(root: &Path, site: usize) -> PathBuf {
    root.join(format!("site{}", site))
}

/// Writes every site below `root` and the manifest at `root/manifest.jsonl`.
pub fn dump(root: &Path, sites: &[SiteData]) -> Result<()> {
    let mut manifest = Vec::new();
    for data in sites {
        let spec = &data.spec;
        let dir = site_dir(root, spec.site_id);
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        for (split, samples) in [("train", &data.train), ("test", &data.test)] {
            for s in samples.iter() {
                let (_, h, w) = s.image.dims3()?;
                let stem = format!("{}_{:04}", split, s.index);
                let names = [format!("{}_image.pgm", stem), format!("{}_mask.pgm", stem), format!("{}_labels.pgm", stem)];
                let image = to_gray(s.image.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8), h, w);
                pgm::write(&dir.join(&names[0]), &image)?;
                pgm::write(&dir.join(&names[1]), &to_gray(s.full_mask.iter().copied(), h, w))?;
                pgm::write(&dir.join(&names[2]), &to_gray(s.sparse.labels.labels().iter().copied(), h, w))?;
                let rel = |n: &str| format!("site{}/{}", spec.site_id, n);
                let entry = ManifestEntry {
                    site: spec.site_id,
                    index: s.index,
                    split: split.into(),
                    image: rel(&names[0]),
                    mask: rel(&names[1]),
                    labels: rel(&names[2]),
                    annotation: annotation_name(spec.annotation).into(),
                    seed: spec.seed,
                    point_fallbacks: s.sparse.point_fallbacks.clone(),
                    boxes: s.sparse.boxes.iter().map(|b| [b.class as usize, b.y0, b.x0, b.y1, b.x1]).collect(),
                };
                manifest.push(serde_json::to_string(&entry)?);
            }
        }
    }
    let path = root.join(MANIFEST);
    let mut f = fs::File::create(&path).map_err(Error::io(&path))?;
    for line in manifest {
        writeln!(f, "{}", line).map_err(Error::io(&path))?;
    }
    Ok(())
}

/// Reads a dumped dataset back. `specs` supply the task and domain
/// parameters, which the manifest does not carry.
pub fn load(root: &Path, specs: &[SiteSpec]) -> Result<Vec<SiteData>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let mut sites: Vec<SiteData> = specs
        .iter()
        .map(|s| SiteData {
            spec: s.clone(),
            train: Vec::new(),
            test: Vec::new(),
        })
        .collect();
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let e: ManifestEntry =
            serde_json::from_str(line).map_err(|err| Error::format(&path, format!("line {}: {}", lineno + 1, err)))?;
        let Some(site) = sites.iter_mut().find(|s| s.spec.site_id == e.site) else {
            return Err(Error::format(&path, format!("line {}: site {} not configured", lineno + 1, e.site)));
        };
        let kind = parse_annotation(&e.annotation).map_err(|m| Error::format(&path, m))?;
        let image = pgm::read(&root.join(&e.image))?;
        let mask = pgm::read(&root.join(&e.mask))?;
        let labels = pgm::read(&root.join(&e.labels))?;
        let (h, w) = (image.height, image.width);
        let classes = site.spec.task.num_classes();
        let sample = Sample {
            index: e.index,
            image: Tensor::new(&[1, h, w], image.pixels.iter().map(|&p| p as f64 / 255.0).collect())?,
            full_mask: mask.pixels,
            annotation: kind,
            sparse: Annotation {
                labels: SparseLabelMap::new(h, w, labels.pixels, classes)?,
                boxes: e
                    .boxes
                    .iter()
                    .map(|b| BoxAnnotation {
                        class: b[0] as u8,
                        y0: b[1],
                        x0: b[2],
                        y1: b[3],
                        x1: b[4],
                    })
                    .collect(),
                point_fallbacks: e.point_fallbacks,
            },
        };
        match e.split.as_str() {
            "train" => site.train.push(sample),
            "test" => site.test.push(sample),
            other => return Err(Error::format(&path, format!("line {}: unknown split {:?}", lineno + 1, other))),
        }
    }
    for s in &sites {
        if s.train.is_empty() {
            return Err(Error::Core(fedicra_core::Error::EmptyDataset(s.spec.site_id)));
        }
    }
    Ok(sites)
}
