//! Dataset manifests, sample loading and structural-branch inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::{self, Execution};
use crate::raster;
use crate::tensor::{Grid, LabelMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
}

/// One manifest entry. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub image: PathBuf,
    /// Class names present in the image; empty means background only.
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub healthy: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default)]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Ordered class names; index 0 is the background.
    pub classes: Vec<String>,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Manifest("class list is empty".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(c) {
                return Err(Error::Manifest(format!("duplicate class `{c}`")));
            }
        }
        for s in &self.samples {
            self.encode_labels(&s.labels)
                .map_err(|e| Error::Manifest(format!("sample `{}`: {e}", s.id)))?;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Multi-hot vector from class tags. No lesion tag means background only.
    pub fn encode_labels(&self, tags: &[String]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.classes.len()];
        for t in tags {
            let k = self
                .classes
                .iter()
                .position(|c| c == t)
                .ok_or_else(|| Error::Manifest(format!("label `{t}` is not a known class")))?;
            y[k] = 1.0;
        }
        if y.iter().all(|&v| v == 0.0) {
            y[0] = 1.0;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Grid,
    /// Multi-hot, length K.
    pub label: Vec<f64>,
    pub layer: Option<Grid>,
    pub anomaly: Option<Grid>,
    pub healthy: Option<Grid>,
    pub caption: Option<String>,
    pub mask: Option<LabelMap>,
    pub split: Split,
    pub volume_id: Option<String>,
    pub slice_index: Option<usize>,
}

impl ImageSample {
    /// Anomaly map, derived from the healthy counterpart when not stored.
    pub fn anomaly_map(&self) -> Result<Option<Grid>> {
        match (&self.anomaly, &self.healthy) {
            (Some(a), _) => Ok(Some(a.clone())),
            (None, Some(h)) => compute_anomaly_map(&self.image, h).map(Some),
            (None, None) => Ok(None),
        }
    }

    /// Structural-encoder input from the layer and anomaly maps (missing maps count as zero).
    pub fn structural_input(&self) -> Result<Grid> {
        let zeros = || Grid::zeros(self.image.height, self.image.width);
        let layer = self.layer.clone().unwrap_or_else(zeros);
        let anomaly = self.anomaly_map()?.unwrap_or_else(zeros);
        compose_structural_input(&layer, &anomaly)
    }

    pub fn binary_label(&self) -> Result<[f64; 2]> {
        binarize_label(&self.label)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> Vec<&ImageSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

/// Loads every sample and resizes to `input_size = (height, width)`:
/// bilinear for intensities and structural maps, nearest for masks.
pub fn load_dataset(manifest_path: &Path, input_size: (usize, usize), exec: Execution) -> Result<Dataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let samples = parallel::try_map(exec, &manifest.samples, |entry| {
        load_sample(&manifest, root, entry, input_size)
    })?;
    Ok(Dataset {
        classes: manifest.classes,
        samples,
    })
}

fn load_sample(
    manifest: &DatasetManifest,
    root: &Path,
    entry: &SampleEntry,
    (h, w): (usize, usize),
) -> Result<ImageSample> {
    let wrap = |e: Error| match e {
        Error::Manifest(m) => Error::Manifest(m),
        other => Error::Load {
            id: entry.id.clone(),
            reason: other.to_string(),
        },
    };
    let gray = |p: &Path| -> Result<Grid> {
        let full = root.join(p);
        if !full.exists() {
            return Err(Error::Load {
                id: entry.id.clone(),
                reason: format!("missing file {}", full.display()),
            });
        }
        Ok(raster::resize_bilinear(&raster::read_gray(&full).map_err(wrap)?, h, w))
    };
    let opt = |p: &Option<PathBuf>| p.as_deref().map(gray).transpose();
    let mask = match &entry.mask {
        Some(p) => {
            let full = root.join(p);
            if !full.exists() {
                return Err(Error::Load {
                    id: entry.id.clone(),
                    reason: format!("missing file {}", full.display()),
                });
            }
            let m = raster::resize_nearest(&raster::read_labels(&full).map_err(wrap)?, h, w);
            if let Some(&bad) = m.data.iter().find(|&&v| v as usize >= manifest.num_classes()) {
                return Err(Error::Load {
                    id: entry.id.clone(),
                    reason: format!("mask value {bad} exceeds the class count"),
                });
            }
            Some(m)
        }
        None => None,
    };
    Ok(ImageSample {
        id: entry.id.clone(),
        image: gray(&entry.image)?,
        label: manifest.encode_labels(&entry.labels)?,
        layer: opt(&entry.layer)?,
        anomaly: opt(&entry.anomaly)?,
        healthy: opt(&entry.healthy)?,
        caption: entry.caption.clone(),
        mask,
        split: entry.split,
        volume_id: entry.volume_id.clone(),
        slice_index: entry.slice_index,
    })
}

/// `A = |X − G|`.
pub fn compute_anomaly_map(image: &Grid, healthy: &Grid) -> Result<Grid> {
    if !image.same_shape(healthy) {
        return Err(Error::Dimension(format!(
            "image {}x{} vs healthy counterpart {}x{}",
            image.height, image.width, healthy.height, healthy.width
        )));
    }
    Ok(Grid {
        height: image.height,
        width: image.width,
        data: image.data.iter().zip(&healthy.data).map(|(x, g)| (x - g).abs()).collect(),
    })
}

/// Min-max normalized `L + A`; a constant sum maps to all zeros.
pub fn compose_structural_input(layer: &Grid, anomaly: &Grid) -> Result<Grid> {
    if !layer.same_shape(anomaly) {
        return Err(Error::Dimension(format!(
            "layer map {}x{} vs anomaly map {}x{}",
            layer.height, layer.width, anomaly.height, anomaly.width
        )));
    }
    let sum: Vec<f64> = layer.data.iter().zip(&anomaly.data).map(|(l, a)| l + a).collect();
    let (lo, hi) = sum
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let data = if range > 0.0 {
        sum.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; sum.len()]
    };
    Ok(Grid {
        height: layer.height,
        width: layer.width,
        data,
    })
}

/// `(1,0)` for background-only labels, `(0,1)` when any lesion bit is set.
pub fn binarize_label(label: &[f64]) -> Result<[f64; 2]> {
    if label.is_empty() || label.iter().all(|&v| v == 0.0) {
        return Err(Error::Label("label vector has no active class".into()));
    }
    if label[1..].iter().any(|&v| v != 0.0) {
        Ok([0.0, 1.0])
    } else {
        Ok([1.0, 0.0])
    }
}
