//! Bottom-up saliency. Nothing here touches a tape: the saliency model is
//! frozen and enters the detector as a constant.
//!
//! [`bms_saliency`] is a boolean-map model: threshold each color channel at
//! several levels, keep the regions of each binary map (and its complement)
//! that are enclosed, i.e. do not touch the image border, and average.
//! [`oracle_saliency`] is a ground-truth stand-in for a learned model on
//! synthetic scenes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::synthdata::Scene;
use crate::tensor::Tensor;

/// A map with values in `[0,1]`, at the resolution of its source image.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(shape_err(
                "saliency",
                format!("{} values for {height}x{width}", values.len()),
            ));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("saliency values must lie in [0,1]".into()));
        }
        Ok(SaliencyMap {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        SaliencyMap {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Area-averages to `h×w` and re-normalizes to `[0,1]`; a constant
    /// result becomes all zeros.
    pub fn downscale(&self, h: usize, w: usize) -> SaliencyMap {
        let span = |i: usize, out: usize, src: usize| {
            let a = i * src / out;
            let b = ((i + 1) * src / out).max(a + 1).min(src);
            a..b
        };
        let mut pooled = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let (rows, cols) = (span(i, h, self.height), span(j, w, self.width));
                let n = (rows.len() * cols.len()) as f64;
                let mut acc = 0.0;
                for y in rows {
                    for x in cols.clone() {
                        acc += self.get(y, x);
                    }
                }
                pooled.push(acc / n);
            }
        }
        SaliencyMap {
            height: h,
            width: w,
            values: min_max_or(pooled, |_| 0.0),
        }
    }
}

/// Min-max normalization; a constant input is mapped through `constant`.
fn min_max_or(mut values: Vec<f64>, constant: impl Fn(f64) -> f64) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        let c = constant(lo).clamp(0.0, 1.0);
        values.iter_mut().for_each(|v| *v = c);
    } else {
        values.iter_mut().for_each(|v| *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0));
    }
    values
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BmsConfig {
    pub thresholds_per_channel: usize,
    pub opening_radius: usize,
}

impl Default for BmsConfig {
    fn default() -> Self {
        BmsConfig {
            thresholds_per_channel: 8,
            opening_radius: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMap {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BoolMap {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width);
        BoolMap {
            height,
            width,
            bits,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn complement(&self) -> BoolMap {
        BoolMap::new(self.height, self.width, self.bits.iter().map(|b| !b).collect())
    }
}

/// For each channel and each threshold `t_k = k/(T+1)`, the map
/// `channel > t_k` followed by its complement: `3·T·2` maps.
pub fn boolean_maps(image: &Tensor, cfg: &BmsConfig) -> Result<Vec<BoolMap>> {
    let [c, h, w] = *image.shape() else {
        return Err(shape_err("boolean_maps", format!("{:?}", image.shape())));
    };
    if cfg.thresholds_per_channel == 0 {
        return Err(Error::Config("thresholds_per_channel must be >= 1".into()));
    }
    let t = cfg.thresholds_per_channel;
    let mut maps = Vec::with_capacity(c * t * 2);
    for plane in image.data().chunks(h * w) {
        for k in 1..=t {
            let thr = k as f64 / (t + 1) as f64;
            let map = BoolMap::new(h, w, plane.iter().map(|&v| v > thr).collect());
            let comp = map.complement();
            maps.push(map);
            maps.push(comp);
        }
    }
    Ok(maps)
}

/// Clears every 4-connected true region touching the border, then applies a
/// morphological opening with a `(2r+1)²` square.
pub fn surroundedness(map: &BoolMap, opening_radius: usize) -> BoolMap {
    let (h, w) = (map.height, map.width);
    let mut keep = map.bits.clone();
    let mut queue = VecDeque::new();
    let seed = |y: usize, x: usize, keep: &mut Vec<bool>, q: &mut VecDeque<(usize, usize)>| {
        if keep[y * w + x] {
            keep[y * w + x] = false;
            q.push_back((y, x));
        }
    };
    for x in 0..w {
        seed(0, x, &mut keep, &mut queue);
        seed(h - 1, x, &mut keep, &mut queue);
    }
    for y in 0..h {
        seed(y, 0, &mut keep, &mut queue);
        seed(y, w - 1, &mut keep, &mut queue);
    }
    while let Some((y, x)) = queue.pop_front() {
        if y > 0 {
            seed(y - 1, x, &mut keep, &mut queue);
        }
        if y + 1 < h {
            seed(y + 1, x, &mut keep, &mut queue);
        }
        if x > 0 {
            seed(y, x - 1, &mut keep, &mut queue);
        }
        if x + 1 < w {
            seed(y, x + 1, &mut keep, &mut queue);
        }
    }
    let interior = BoolMap::new(h, w, keep);
    if opening_radius == 0 {
        return interior;
    }
    dilate(&erode(&interior, opening_radius), opening_radius)
}

fn window(map: &BoolMap, r: usize, all: bool) -> BoolMap {
    let (h, w) = (map.height, map.width);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = all;
            'scan: for dy in -(r as isize)..=r as isize {
                for dx in -(r as isize)..=r as isize {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    let inside = yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w;
                    let v = inside && map.get(yy as usize, xx as usize);
                    if all && !v {
                        acc = false;
                        break 'scan;
                    }
                    if !all && v {
                        acc = true;
                        break 'scan;
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    BoolMap::new(h, w, out)
}

fn erode(map: &BoolMap, r: usize) -> BoolMap {
    window(map, r, true)
}

fn dilate(map: &BoolMap, r: usize) -> BoolMap {
    window(map, r, false)
}

/// Mean of all surroundedness maps, min-max normalized; a constant mean map
/// yields all zeros.
pub fn bms_saliency(image: &Tensor, cfg: &BmsConfig) -> Result<SaliencyMap> {
    let maps = boolean_maps(image, cfg)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut mean = vec![0.0; h * w];
    for m in &maps {
        let s = surroundedness(m, cfg.opening_radius);
        for (acc, &b) in mean.iter_mut().zip(&s.bits) {
            if b {
                *acc += 1.0;
            }
        }
    }
    let n = maps.len() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    SaliencyMap::new(h, w, min_max_or(mean, |_| 0.0))
}

/// Union of every object mask (annotated or not), 3×3 box-blurred
/// `blur_radius` times, min-max normalized. A constant union keeps its
/// value, so an empty scene is all zeros and a full-frame object all ones.
pub fn oracle_saliency(scene: &Scene, blur_radius: usize) -> Result<SaliencyMap> {
    let (h, w) = (scene.height(), scene.width());
    let mut union = vec![0.0; h * w];
    for obj in &scene.objects {
        if obj.mask.height != h || obj.mask.width != w {
            return Err(shape_err(
                "oracle_saliency",
                format!("mask {}x{} for {h}x{w} image", obj.mask.height, obj.mask.width),
            ));
        }
        for (u, &b) in union.iter_mut().zip(&obj.mask.bits) {
            if b {
                *u = 1.0;
            }
        }
    }
    for _ in 0..blur_radius {
        union = box_blur(&union, h, w);
    }
    SaliencyMap::new(h, w, min_max_or(union, |c| c))
}

fn box_blur(values: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    acc += values[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * w + x] = acc / n;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyKind {
    Oracle,
    Bms,
}

/// Which map feeds the bottom-up path during training and evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaliencyConfig {
    pub kind: SaliencyKind,
    pub blur_radius: usize,
    pub bms: BmsConfig,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        SaliencyConfig {
            kind: SaliencyKind::Oracle,
            blur_radius: 2,
            bms: BmsConfig::default(),
        }
    }
}

impl SaliencyConfig {
    pub fn compute(&self, scene: &Scene) -> Result<SaliencyMap> {
        match self.kind {
            SaliencyKind::Oracle => oracle_saliency(scene, self.blur_radius),
            SaliencyKind::Bms => bms_saliency(&scene.image, &self.bms),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bm(rows: &[&str]) -> BoolMap {
        let h = rows.len();
        let w = rows[0].len();
        BoolMap::new(h, w, rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect())
    }

    #[test]
    fn constant_zero_image_single_threshold() {
        let img = Tensor::zeros(vec![3, 4, 4]);
        let maps = boolean_maps(&img, &BmsConfig { thresholds_per_channel: 1, opening_radius: 1 }).unwrap();
        assert_eq!(maps.len(), 6);
        for pair in maps.chunks(2) {
            assert!(pair[0].bits.iter().all(|b| !b));
            assert!(pair[1].bits.iter().all(|&b| b));
        }
    }

    #[test]
    fn pixels_at_threshold_fall_in_complement() {
        let img = Tensor::full(vec![3, 2, 2], 0.5);
        let maps = boolean_maps(&img, &BmsConfig { thresholds_per_channel: 1, opening_radius: 0 }).unwrap();
        assert!(maps[0].bits.iter().all(|b| !b));
        assert!(maps[1].bits.iter().all(|&b| b));
    }

    #[test]
    fn checkerboard_map_is_the_high_squares() {
        let (h, w) = (4, 4);
        let plane: Vec<f64> = (0..h * w).map(|i| if (i / w + i % w) % 2 == 0 { 0.9 } else { 0.1 }).collect();
        let img = Tensor::new(vec![3, h, w], [plane.clone(), plane.clone(), plane.clone()].concat()).unwrap();
        let maps = boolean_maps(&img, &BmsConfig { thresholds_per_channel: 1, opening_radius: 0 }).unwrap();
        let want: Vec<bool> = plane.iter().map(|&v| v > 0.5).collect();
        assert_eq!(maps[0].bits, want);
    }

    #[test]
    fn zero_thresholds_rejected() {
        let img = Tensor::zeros(vec![3, 2, 2]);
        assert!(boolean_maps(&img, &BmsConfig { thresholds_per_channel: 0, opening_radius: 1 }).is_err());
    }

    #[test]
    fn all_true_map_vanishes() {
        let m = BoolMap::new(5, 5, vec![true; 25]);
        assert!(surroundedness(&m, 1).bits.iter().all(|b| !b));
    }

    #[test]
    fn centre_pixel_survives_without_opening() {
        let m = bm(&[".....", ".....", "..#..", ".....", "....."]);
        assert_eq!(surroundedness(&m, 0), m);
    }

    #[test]
    fn border_block_removed_interior_block_kept() {
        let m = bm(&[
            "........",
            "###.....",
            "###..##.",
            "###..##.",
            "........",
            "........",
        ]);
        let want = bm(&[
            "........",
            "........",
            ".....##.",
            ".....##.",
            "........",
            "........",
        ]);
        assert_eq!(surroundedness(&m, 0), want);
    }

    #[test]
    fn oracle_cases() {
        use crate::synthdata::{generate_scene, SceneConfig};
        let empty_cfg = SceneConfig {
            min_objects: 0,
            max_objects: 0,
            allow_empty: true,
            ..SceneConfig::default()
        };
        let empty = generate_scene(0, &empty_cfg).unwrap();
        assert!(oracle_saliency(&empty, 2).unwrap().values().iter().all(|&v| v == 0.0));

        let mut full = empty.clone();
        let mask = crate::synthdata::Mask { height: 64, width: 64, bits: vec![true; 64 * 64] };
        full.objects.push(crate::synthdata::SceneObject {
            class_id: 1,
            bbox: mask.tight_box().unwrap(),
            mask,
            annotated: true,
        });
        assert!(oracle_saliency(&full, 2).unwrap().values().iter().all(|&v| v == 1.0));

        let mut one = empty;
        let mut bits = vec![false; 64 * 64];
        for y in 20..30 {
            for x in 5..15 {
                bits[y * 64 + x] = true;
            }
        }
        let mask = crate::synthdata::Mask { height: 64, width: 64, bits: bits.clone() };
        one.objects.push(crate::synthdata::SceneObject {
            class_id: 2,
            bbox: mask.tight_box().unwrap(),
            mask,
            annotated: false,
        });
        let s = oracle_saliency(&one, 0).unwrap();
        let want: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        assert_eq!(s.values(), want.as_slice());
    }

    #[test]
    fn downscale_stays_in_unit_range_and_zeroes_constants() {
        let s = SaliencyMap::new(4, 4, (0..16).map(|v| v as f64 / 15.0).collect()).unwrap();
        let d = s.downscale(2, 2);
        assert_eq!(d.values().len(), 4);
        assert!(d.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(d.values()[0], 0.0);
        assert_eq!(d.values()[3], 1.0);
        let c = SaliencyMap::new(4, 4, vec![1.0; 16]).unwrap().downscale(2, 2);
        assert_eq!(c.values(), &[0.0; 4]);
    }
}
