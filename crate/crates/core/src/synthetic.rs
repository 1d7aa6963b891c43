//! Synthetic retinal-band images with planted dark and bright blobs, written
//! as a complete dataset directory (manifest, rasters, captions, caches).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, SampleEntry, Split};
use crate::error::{Error, Result};
use crate::fsutil::{write_atomic, write_json};
use crate::raster::{gray_png, labels_png};
use crate::tensor::{Grid, LabelMap};
use crate::text::{stub_embed, EmbeddingCache};

pub const CLASSES: [&str; 3] = ["background", "SRF", "PED"];
pub const CAPTION_PREFIX: &str = "a black and white photo of";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub slices_per_volume: usize,
    pub clip_dim: usize,
    pub desc_dim: usize,
    pub text_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 32,
            height: 128,
            width: 128,
            seed: 0,
            slices_per_volume: 8,
            clip_dim: 32,
            desc_dim: 16,
            text_seed: 0,
        }
    }
}

/// One generated sample held in memory.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub id: String,
    pub image: Grid,
    pub healthy: Grid,
    pub layer: Grid,
    pub mask: LabelMap,
    pub labels: Vec<String>,
    pub caption: String,
}

/// Lesion tags by index: SRF, PED, both, none.
fn lesions_for(i: usize) -> (bool, bool) {
    match i % 4 {
        0 => (true, false),
        1 => (false, true),
        2 => (true, true),
        _ => (false, false),
    }
}

/// Captions describe only the band geometry, never the lesions.
fn caption(amp_frac: f64, thick_frac: f64) -> String {
    let shape = if amp_frac < 0.04 { "a gentle wave" } else { "a curvy wave" };
    let width = if thick_frac < 0.31 { "thin" } else { "thick" };
    format!("{CAPTION_PREFIX} {shape} with {width} stripes")
}

pub fn generate_sample(i: usize, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> SynthSample {
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let amp_frac: f64 = rng.random_range(0.02..0.06);
    let thick_frac: f64 = rng.random_range(0.28..0.34);
    let (amp, thick) = (hf * amp_frac, hf * thick_frac);
    let center = |x: usize| hf * 0.5 + amp * (x as f64 / wf * std::f64::consts::TAU + phase).sin();

    let mut healthy = Grid::zeros(h, w);
    let mut layer = Grid::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let top = center(x) - thick / 2.0;
            let rel = (y as f64 - top) / thick;
            let (base, lay) = if (0.0..1.0).contains(&rel) {
                let sub = (rel * 3.0).floor() as usize;
                ([0.45, 0.6, 0.5][sub], (sub + 1) as f64 / 3.0)
            } else {
                (0.2f64, 0.0)
            };
            healthy.set(y, x, (base + noise.sample(rng)).clamp(0.0, 1.0));
            layer.set(y, x, lay);
        }
    }

    let (srf, ped) = lesions_for(i);
    let mut image = healthy.clone();
    let mut mask = LabelMap::from_vec(h, w, vec![0; h * w]).unwrap();
    let mut plant = |class: u32, value: f64, lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
        let cx = wf * rng.random_range(lo..hi);
        let cy = center(cx as usize);
        let rx = wf * rng.random_range(0.15..0.2);
        let ry = hf * rng.random_range(0.12..0.16);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    image.set(y, x, (value + noise.sample(rng)).clamp(0.0, 1.0));
                    mask.data[y * w + x] = class;
                }
            }
        }
    };
    match (srf, ped) {
        (true, true) => {
            plant(1, 0.02, 0.22, 0.3, rng);
            plant(2, 0.95, 0.7, 0.78, rng);
        }
        (true, false) => plant(1, 0.02, 0.25, 0.75, rng),
        (false, true) => plant(2, 0.95, 0.25, 0.75, rng),
        (false, false) => {}
    }

    let mut labels = Vec::new();
    if srf {
        labels.push(CLASSES[1].to_string());
    }
    if ped {
        labels.push(CLASSES[2].to_string());
    }
    SynthSample {
        id: format!("s{i:03}"),
        image,
        healthy,
        layer,
        mask,
        labels,
        caption: caption(amp_frac, thick_frac),
    }
}

pub fn generate(spec: &SynthSpec) -> Vec<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.count).map(|i| generate_sample(i, spec, &mut rng)).collect()
}

/// Paths of a written synthetic dataset.
#[derive(Clone, Debug)]
pub struct SynthLayout {
    pub manifest: PathBuf,
    pub captions: PathBuf,
    pub label_cache: PathBuf,
    pub description_cache: PathBuf,
    pub masks: PathBuf,
}

pub fn write_dataset(dir: &Path, spec: &SynthSpec) -> Result<SynthLayout> {
    if spec.count == 0 || spec.height == 0 || spec.width == 0 || spec.slices_per_volume == 0 {
        return Err(Error::Config("synthetic dataset sizes must be positive".into()));
    }
    let samples = generate(spec);
    let mut entries = Vec::with_capacity(samples.len());
    let mut captions = BTreeMap::new();
    let mut labels = EmbeddingCache::create(&dir.join("embeddings/labels"));
    let mut descs = EmbeddingCache::create(&dir.join("embeddings/descriptions"));
    let f32s = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();

    for (i, s) in samples.iter().enumerate() {
        let rel = |sub: &str| PathBuf::from(sub).join(format!("{}.png", s.id));
        write_atomic(&dir.join(rel("images")), &gray_png(&s.image)?)?;
        write_atomic(&dir.join(rel("healthy")), &gray_png(&s.healthy)?)?;
        write_atomic(&dir.join(rel("layers")), &gray_png(&s.layer)?)?;
        write_atomic(&dir.join(rel("masks")), &labels_png(&s.mask)?)?;
        entries.push(SampleEntry {
            id: s.id.clone(),
            image: rel("images"),
            labels: s.labels.clone(),
            layer: Some(rel("layers")),
            anomaly: None,
            healthy: Some(rel("healthy")),
            caption: Some(s.caption.clone()),
            mask: Some(rel("masks")),
            split: Split::Train,
            volume_id: Some(format!("vol{}", i / spec.slices_per_volume)),
            slice_index: Some(i % spec.slices_per_volume),
        });
        captions.insert(s.id.clone(), s.caption.clone());
        descs.insert(&s.id, &f32s(stub_embed(&s.caption, spec.desc_dim, spec.text_seed)), Some(&s.caption))?;
    }
    for c in CLASSES {
        labels.insert(c, &f32s(stub_embed(c, spec.clip_dim, spec.text_seed)), Some(c))?;
    }
    labels.save()?;
    descs.save()?;

    let manifest = DatasetManifest {
        classes: CLASSES.iter().map(|c| c.to_string()).collect(),
        samples: entries,
    };
    let layout = SynthLayout {
        manifest: dir.join("manifest.json"),
        captions: dir.join("captions.json"),
        label_cache: dir.join("embeddings/labels"),
        description_cache: dir.join("embeddings/descriptions"),
        masks: dir.join("masks"),
    };
    write_json(&layout.manifest, &manifest)?;
    write_json(&layout.captions, &captions)?;
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_dataset;
    use crate::parallel::Execution;

    #[test]
    fn labels_follow_planted_blobs() {
        let spec = SynthSpec {
            count: 8,
            height: 64,
            width: 64,
            ..Default::default()
        };
        for s in generate(&spec) {
            let has = |k: u32| s.mask.data.contains(&k);
            assert_eq!(has(1), s.labels.iter().any(|l| l == "SRF"), "{}", s.id);
            assert_eq!(has(2), s.labels.iter().any(|l| l == "PED"), "{}", s.id);
            assert!(s.caption.starts_with(CAPTION_PREFIX));
            assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generation_is_seeded() {
        let spec = SynthSpec {
            count: 2,
            height: 32,
            width: 32,
            ..Default::default()
        };
        let a = generate(&spec);
        let b = generate(&spec);
        assert_eq!(a[1].image, b[1].image);
        let c = generate(&SynthSpec { seed: 1, ..spec });
        assert_ne!(a[1].image, c[1].image);
    }

    #[test]
    fn written_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            count: 4,
            height: 32,
            width: 32,
            slices_per_volume: 2,
            ..Default::default()
        };
        let layout = write_dataset(dir.path(), &spec).unwrap();
        let ds = load_dataset(&layout.manifest, (32, 32), Execution::Sequential).unwrap();
        assert_eq!(ds.samples.len(), 4);
        assert_eq!(ds.samples[2].label, vec![0.0, 1.0, 1.0]);
        assert_eq!(ds.samples[3].label, vec![1.0, 0.0, 0.0]);
        assert!(ds.samples.iter().all(|s| s.mask.is_some()));
        let cache = EmbeddingCache::open(&layout.label_cache).unwrap();
        assert_eq!(cache.get("PED").unwrap().len(), spec.clip_dim);
    }
}
