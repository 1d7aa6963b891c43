//! Micro-averaged IoU, the background-threshold sweep, and caption and
//! embedding statistics.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::parallel::{self, Execution};
use crate::pseudo::label_map;
use crate::tensor::{Heatmap, LabelMap};

/// Dataset-aggregated per-class intersection and union pixel counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.union.len()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Dimension(format!(
                "prediction is {}x{}, ground truth is {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let k = self.num_classes() as u32;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if p >= k || g >= k {
                return Err(Error::Label(format!("class index {} outside 0..{k}", p.max(g))));
            }
            if p == g {
                self.intersection[p as usize] += 1;
                self.union[p as usize] += 1;
            } else {
                self.union[p as usize] += 1;
                self.union[g as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
    }

    /// Classes with zero union are left out of the mean.
    pub fn miou(&self) -> Result<IouReport> {
        let per_class: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Metric("every class has an empty union".into()));
        }
        Ok(IouReport {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
        })
    }
}

pub fn count_dataset(pairs: &[(LabelMap, LabelMap)], num_classes: usize, exec: Execution) -> Result<ConfusionCounts> {
    let partial = parallel::try_map(exec, pairs, |(p, g)| {
        let mut c = ConfusionCounts::new(num_classes);
        c.accumulate(p, g)?;
        Ok::<_, Error>(c)
    })?;
    let mut total = ConfusionCounts::new(num_classes);
    for c in &partial {
        total.merge(c);
    }
    Ok(total)
}

pub const SWEEP_STEPS: usize = 100;

pub fn sweep_grid() -> Vec<f64> {
    (0..=SWEEP_STEPS).map(|i| i as f64 / SWEEP_STEPS as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_lambda: f64,
    pub best_miou: f64,
    pub curve: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn best(&self) -> &SweepPoint {
        self.curve
            .iter()
            .find(|p| p.lambda == self.best_lambda)
            .expect("best point lies on the curve")
    }
}

/// Evaluates every grid threshold on precomputed foreground maps; the lowest
/// threshold wins ties.
pub fn sweep(foregrounds: &[Heatmap], gts: &[LabelMap], num_classes: usize, exec: Execution) -> Result<SweepResult> {
    if foregrounds.is_empty() {
        return Err(Error::Metric("cannot sweep an empty dataset".into()));
    }
    if foregrounds.len() != gts.len() {
        return Err(Error::Dimension(format!(
            "{} heatmaps vs {} ground-truth maps",
            foregrounds.len(),
            gts.len()
        )));
    }
    let grid = sweep_grid();
    let curve = parallel::try_map(exec, &grid, |&lambda| -> Result<SweepPoint> {
        let mut counts = ConfusionCounts::new(num_classes);
        for (fg, gt) in foregrounds.iter().zip(gts) {
            counts.accumulate(&label_map(fg, lambda)?, gt)?;
        }
        let r = counts.miou()?;
        Ok(SweepPoint {
            lambda,
            miou: r.miou,
            per_class: r.per_class,
        })
    })?;
    let mut best = &curve[0];
    for p in &curve[1..] {
        if p.miou > best.miou {
            best = p;
        }
    }
    Ok(SweepResult {
        best_lambda: best.lambda,
        best_miou: best.miou,
        curve,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Debug)]
pub struct SliceEmbedding {
    pub volume_id: String,
    pub slice_index: i64,
    pub vector: Vec<f64>,
}

pub fn default_windows() -> Vec<usize> {
    (3..=65).step_by(2).collect()
}

/// For each odd window size, the mean over center slices of the mean cosine
/// between the center and its in-window neighbors within the same volume.
pub fn sliding_similarity(slices: &[SliceEmbedding], windows: &[usize]) -> Result<Vec<(usize, f64)>> {
    for &w in windows {
        if w % 2 == 0 || !(3..=65).contains(&w) {
            return Err(Error::Config(format!("window size must be odd in 3..=65, got {w}")));
        }
    }
    let mut volumes: BTreeMap<&str, Vec<&SliceEmbedding>> = BTreeMap::new();
    for s in slices {
        volumes.entry(&s.volume_id).or_default().push(s);
    }
    for v in volumes.values_mut() {
        v.sort_by_key(|s| s.slice_index);
    }
    if volumes.values().all(|v| v.len() < 2) {
        return Err(Error::Metric("no volume has more than one slice".into()));
    }
    let mut out = Vec::with_capacity(windows.len());
    for &w in windows {
        let half = w / 2;
        let mut total = 0.0;
        let mut centers = 0usize;
        for vol in volumes.values() {
            if vol.len() < 2 {
                continue;
            }
            for i in 0..vol.len() {
                let lo = i.saturating_sub(half);
                let hi = (i + half).min(vol.len() - 1);
                let sims: Vec<f64> = (lo..=hi)
                    .filter(|&j| j != i)
                    .map(|j| cosine(&vol[i].vector, &vol[j].vector))
                    .collect();
                total += sims.iter().sum::<f64>() / sims.len() as f64;
                centers += 1;
            }
        }
        out.push((w, total / centers as f64));
    }
    Ok(out)
}

const STOPWORDS_TXT: &str = include_str!("../data/stopwords.txt");

pub fn stopwords() -> HashSet<&'static str> {
    STOPWORDS_TXT.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Per-group word counts, ordered by count descending then alphabetically.
pub fn word_frequency(captions: &[(String, String)]) -> BTreeMap<String, Vec<(String, usize)>> {
    let stop = stopwords();
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (group, caption) in captions {
        let entry = counts.entry(group.clone()).or_default();
        for tok in tokenize(caption) {
            if !stop.contains(tok.as_str()) {
                *entry.entry(tok).or_default() += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|(g, words)| {
            let mut v: Vec<(String, usize)> = words.into_iter().collect();
            v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            (g, v)
        })
        .collect()
}

pub fn histogram_csv(hist: &BTreeMap<String, Vec<(String, usize)>>) -> String {
    let mut s = String::from("group,word,count\n");
    for (g, words) in hist {
        for (w, c) in words {
            s.push_str(&format!("{g},{w},{c}\n"));
        }
    }
    s
}

pub fn similarity_csv(rows: &[(usize, f64)]) -> String {
    let mut s = String::from("window,similarity\n");
    for (w, v) in rows {
        s.push_str(&format!("{w},{v}\n"));
    }
    s
}

pub fn write_csv(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub classes: Vec<String>,
    pub per_class_iou: BTreeMap<String, Option<f64>>,
    pub miou: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curve: Option<Vec<SweepPoint>>,
}

impl Metrics {
    pub fn from_report(classes: &[String], report: &IouReport) -> Self {
        Self {
            classes: classes.to_vec(),
            per_class_iou: classes.iter().cloned().zip(report.per_class.iter().copied()).collect(),
            miou: report.miou,
            best_lambda: None,
            curve: None,
        }
    }

    pub fn from_sweep(classes: &[String], sweep: &SweepResult) -> Self {
        let best = sweep.best();
        Self {
            classes: classes.to_vec(),
            per_class_iou: classes.iter().cloned().zip(best.per_class.iter().copied()).collect(),
            miou: sweep.best_miou,
            best_lambda: Some(sweep.best_lambda),
            curve: Some(sweep.curve.clone()),
        }
    }
}
