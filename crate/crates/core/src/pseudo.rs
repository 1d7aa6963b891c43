//! Heatmap fusion, background thresholding and pseudo-label export.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{write_atomic, write_json};
use crate::raster::{labels_png, read_labels, resize_bilinear};
use crate::tensor::{Grid, Heatmap, LabelMap};

/// Fusion weights for the classifier CAM and the two similarity maps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gammas {
    pub cam: f64,
    pub sim3: f64,
    pub sim4: f64,
}

impl Default for Gammas {
    fn default() -> Self {
        Self {
            cam: 1.0,
            sim3: 1.0,
            sim4: 1.0,
        }
    }
}

impl Gammas {
    pub fn new(cam: f64, sim3: f64, sim4: f64) -> Result<Self> {
        let g = Self { cam, sim3, sim4 };
        g.validate()?;
        Ok(g)
    }

    /// Parses `a,b,c`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("gamma list {s:?}: {e}")))?;
        match parts[..] {
            [a, b, c] => Self::new(a, b, c),
            _ => Err(Error::Config(format!("gamma list {s:?} needs three values"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.cam, self.sim3, self.sim4] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("gamma weights must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// ReLU, bilinear resize to `height×width`, γ-weighted sum, then per-channel
/// min-max normalization. Constant channels become all zeros.
pub fn fuse_heatmaps(
    cam: &Heatmap,
    sim3: &Heatmap,
    sim4: &Heatmap,
    gammas: &Gammas,
    height: usize,
    width: usize,
) -> Result<Heatmap> {
    gammas.validate()?;
    let k = cam.channels;
    if sim3.channels != k || sim4.channels != k {
        return Err(Error::Dimension(format!(
            "heatmap channel counts differ: {} / {} / {}",
            cam.channels, sim3.channels, sim4.channels
        )));
    }
    let mut out = Heatmap::zeros(k, height, width);
    for c in 0..k {
        let plane = out.plane_mut(c);
        for (src, w) in [(cam, gammas.cam), (sim3, gammas.sim3), (sim4, gammas.sim4)] {
            if w == 0.0 {
                continue;
            }
            let mut g = src.channel(c);
            g.data.iter_mut().for_each(|v| *v = v.max(0.0));
            let r = resize_bilinear(&g, height, width);
            for (o, v) in plane.iter_mut().zip(&r.data) {
                *o += w * v;
            }
        }
        normalize_min_max(plane);
    }
    Ok(out)
}

pub fn normalize_min_max(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi <= lo {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if *v == hi { 1.0 } else { (*v - lo) / span };
    }
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Config(format!("background threshold must lie in [0,1], got {lambda}")))
    }
}

/// Constant background score map.
pub fn background_map(lambda: f64, height: usize, width: usize) -> Grid {
    Grid::filled(height, width, lambda)
}

/// Prepends the background channel and takes the per-pixel argmax; ties go
/// to the lowest class index.
pub fn finalize(foreground: &Heatmap, lambda: f64) -> Result<(Heatmap, LabelMap)> {
    check_lambda(lambda)?;
    let bg = background_map(lambda, foreground.height, foreground.width);
    let mut grids = vec![bg];
    grids.extend((0..foreground.channels).map(|c| foreground.channel(c)));
    let full = Heatmap::from_grids(&grids)?;
    let labels = argmax_labels(&full);
    Ok((full, labels))
}

/// Labels only, without materializing the full stack.
pub fn label_map(foreground: &Heatmap, lambda: f64) -> Result<LabelMap> {
    check_lambda(lambda)?;
    let n = foreground.height * foreground.width;
    let data = (0..n)
        .map(|p| {
            let mut best = 0u32;
            let mut score = lambda;
            for c in 0..foreground.channels {
                let v = foreground.plane(c)[p];
                if v > score {
                    score = v;
                    best = c as u32 + 1;
                }
            }
            best
        })
        .collect();
    LabelMap::from_vec(foreground.height, foreground.width, data)
}

pub fn argmax_labels(stack: &Heatmap) -> LabelMap {
    let n = stack.height * stack.width;
    let data = (0..n)
        .map(|p| {
            let mut best = 0u32;
            for c in 1..stack.channels {
                if stack.plane(c)[p] > stack.plane(best as usize)[p] {
                    best = c as u32;
                }
            }
            best
        })
        .collect();
    LabelMap {
        height: stack.height,
        width: stack.width,
        data,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideCar {
    pub id: String,
    pub classes: Vec<String>,
    pub lambda: f64,
    pub gammas: Gammas,
    pub checkpoint: String,
}

/// Writes `<id>.png` (pixel = class index) and `<id>.json`.
pub fn export(dir: &Path, labels: &LabelMap, side: &SideCar) -> Result<()> {
    if side.classes.len() > 256 {
        return Err(Error::Export(format!(
            "{} classes do not fit an 8-bit label image",
            side.classes.len()
        )));
    }
    write_atomic(&dir.join(format!("{}.png", side.id)), &labels_png(labels)?)?;
    write_json(&dir.join(format!("{}.json", side.id)), side)
}

pub fn import(path: &Path) -> Result<LabelMap> {
    read_labels(path)
}

#[derive(Serialize)]
struct DumpHeader<'a> {
    id: &'a str,
    class: &'a str,
    height: usize,
    width: usize,
    dtype: &'static str,
}

/// Per-class little-endian `f32` rasters plus a JSON shape header.
pub fn dump_cams(dir: &Path, id: &str, classes: &[String], foreground: &Heatmap) -> Result<()> {
    for c in 0..foreground.channels {
        let class = classes.get(c + 1).map(String::as_str).unwrap_or("?");
        let stem = format!("{id}.cam{}", c + 1);
        let bytes: Vec<u8> = foreground
            .plane(c)
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        write_atomic(&dir.join(format!("{stem}.f32")), &bytes)?;
        write_json(
            &dir.join(format!("{stem}.json")),
            &DumpHeader {
                id,
                class,
                height: foreground.height,
                width: foreground.width,
                dtype: "f32le",
            },
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hm(planes: &[&[&[f64]]]) -> Heatmap {
        let grids: Vec<Grid> = planes.iter().map(|p| Grid::from_rows(p).unwrap()).collect();
        Heatmap::from_grids(&grids).unwrap()
    }

    #[test]
    fn single_source_hand_normalization() {
        let m = hm(&[&[&[-1.0, 2.0], &[4.0, 0.0]]]);
        let z = Heatmap::zeros(1, 1, 1);
        let fg = fuse_heatmaps(&m, &z, &z, &Gammas::new(1.0, 0.0, 0.0).unwrap(), 2, 2).unwrap();
        assert_eq!(fg.plane(0), &[0.0, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn all_zero_sources_and_constant_channels() {
        let z = Heatmap::zeros(2, 2, 2);
        let fg = fuse_heatmaps(&z, &z, &z, &Gammas::default(), 4, 4).unwrap();
        assert!(fg.plane(0).iter().chain(fg.plane(1)).all(|&v| v == 0.0));
        let mut c = vec![3.0; 5];
        normalize_min_max(&mut c);
        assert_eq!(c, vec![0.0; 5]);
    }

    #[test]
    fn finalize_hand_cases() {
        let fg = hm(&[&[&[0.8]], &[&[0.3]]]);
        let (full, labels) = finalize(&fg, 0.5).unwrap();
        assert_eq!(full.plane(0), &[0.5]);
        assert_eq!(labels.data, vec![1]);

        let fg = hm(&[&[&[0.0, 1.0], &[0.2, 0.7]]]);
        assert_eq!(finalize(&fg, 1.0).unwrap().1.data, vec![0; 4]);
        assert_eq!(finalize(&fg, 0.0).unwrap().1.data, vec![0, 1, 1, 1]);
        assert!(finalize(&fg, 1.01).is_err());
        assert!(finalize(&fg, -0.1).is_err());
        assert!(label_map(&fg, f64::NAN).is_err());
    }

    #[test]
    fn gamma_parse() {
        assert_eq!(Gammas::parse("1,0,0.5").unwrap(), Gammas::new(1.0, 0.0, 0.5).unwrap());
        assert!(Gammas::parse("1,2").is_err());
        assert!(Gammas::parse("1,-2,0").is_err());
        assert!(Gammas::parse("x,1,1").is_err());
    }

    #[test]
    fn export_roundtrip_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelMap::from_rows(&[&[0, 1, 2], &[2, 1, 0]]).unwrap();
        let side = SideCar {
            id: "s1".into(),
            classes: vec!["bg".into(), "a".into(), "b".into()],
            lambda: 0.37,
            gammas: Gammas::default(),
            checkpoint: "abc".into(),
        };
        export(dir.path(), &labels, &side).unwrap();
        assert_eq!(import(&dir.path().join("s1.png")).unwrap(), labels);
        let back: SideCar = crate::fsutil::read_json(&dir.path().join("s1.json")).unwrap();
        assert_eq!(back.lambda, 0.37);

        let many = SideCar {
            classes: (0..257).map(|i| i.to_string()).collect(),
            ..side
        };
        assert!(matches!(export(dir.path(), &labels, &many), Err(Error::Export(_))));
    }

    #[test]
    fn cam_dump_layout() {
        let dir = tempfile::tempdir().unwrap();
        let fg = hm(&[&[&[0.25, 1.0]]]);
        dump_cams(dir.path(), "x", &["bg".into(), "SRF".into()], &fg).unwrap();
        let raw = std::fs::read(dir.path().join("x.cam1.f32")).unwrap();
        assert_eq!(raw.len(), 8);
        assert_eq!(f32::from_le_bytes(raw[4..8].try_into().unwrap()), 1.0);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn fused_maps_hit_exact_extremes(vals in proptest::collection::vec(-5.0f64..5.0, 16), g in 0.1f64..10.0) {
                let m = Heatmap { channels: 1, height: 4, width: 4, data: vals.clone() };
                let z = Heatmap::zeros(1, 2, 2);
                let fg = fuse_heatmaps(&m, &z, &z, &Gammas::new(g, 0.0, 0.0).unwrap(), 4, 4).unwrap();
                let relu: Vec<f64> = vals.iter().map(|v| v.max(0.0)).collect();
                let constant = relu.iter().all(|&v| v == relu[0]);
                let p = fg.plane(0);
                prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
                if constant {
                    prop_assert!(p.iter().all(|&v| v == 0.0));
                } else {
                    prop_assert_eq!(p.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
                    prop_assert_eq!(p.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
                }
            }

            #[test]
            fn gamma_magnitude_does_not_change_labels(vals in proptest::collection::vec(-1.0f64..3.0, 8), a in 0.01f64..100.0, b in 0.01f64..100.0) {
                let m = Heatmap { channels: 2, height: 2, width: 2, data: vals };
                let z = Heatmap::zeros(2, 1, 1);
                let fa = fuse_heatmaps(&m, &z, &z, &Gammas::new(a, 0.0, 0.0).unwrap(), 2, 2).unwrap();
                let fb = fuse_heatmaps(&m, &z, &z, &Gammas::new(b, 0.0, 0.0).unwrap(), 2, 2).unwrap();
                for (x, y) in fa.data.iter().zip(&fb.data) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }

            #[test]
            fn label_map_agrees_with_finalize(vals in proptest::collection::vec(0.0f64..1.0, 12), lambda in 0.0f64..1.0) {
                let fg = Heatmap { channels: 3, height: 2, width: 2, data: vals };
                prop_assert_eq!(label_map(&fg, lambda).unwrap(), finalize(&fg, lambda).unwrap().1);
            }
        }
    }
}
