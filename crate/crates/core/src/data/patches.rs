//! Patch sampling over co-registered HSI/LiDAR/label rasters.
//!
//! A sample is a labeled pixel coordinate; its HSI and LiDAR patches are cut
//! on demand, centered at the coordinate with reflect padding at raster
//! borders. Train/test splits are seeded, per class, without replacement,
//! and disjoint by construction.

use crate::data::raster::{LabelRaster, Raster};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One labeled pixel: center coordinate, 1-based class label, split tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub y: usize,
    pub x: usize,
    pub label: usize,
    pub split: Split,
}

/// Requested per-class sample counts (index 0 = class 1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PerClassCounts {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl PerClassCounts {
    /// The same counts for every class.
    pub fn uniform(classes: usize, train: usize, test: usize) -> Self {
        PerClassCounts {
            train: vec![train; classes],
            test: vec![test; classes],
        }
    }
}

/// Patch dataset over shared rasters. Patches are materialized per access.
#[derive(Clone, Debug)]
pub struct PatchDataset {
    pub hsi: Raster,
    pub lidar: Raster,
    pub labels: LabelRaster,
    pub patch_size: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

/// Mirror an out-of-range index back into [0, n): reflection about the edge
/// pixels without repeating them (period 2n - 2).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

impl PatchDataset {
    /// HSI patch (bands, p, p), LiDAR patch (1, p, p) and 0-based class
    /// index of the sample at `idx`.
    pub fn patches(&self, idx: usize) -> (Tensor, Tensor, usize) {
        let s = self.samples[idx];
        let p = self.patch_size;
        let r = (p / 2) as isize;
        let (h, w) = (self.hsi.height, self.hsi.width);

        let mut hsi = vec![0.0f64; self.hsi.bands * p * p];
        for b in 0..self.hsi.bands {
            for dy in 0..p {
                let yy = reflect(s.y as isize + dy as isize - r, h);
                for dx in 0..p {
                    let xx = reflect(s.x as isize + dx as isize - r, w);
                    hsi[(b * p + dy) * p + dx] = self.hsi.get(b, yy, xx) as f64;
                }
            }
        }
        let mut lidar = vec![0.0f64; p * p];
        for dy in 0..p {
            let yy = reflect(s.y as isize + dy as isize - r, h);
            for dx in 0..p {
                let xx = reflect(s.x as isize + dx as isize - r, w);
                lidar[dy * p + dx] = self.lidar.get(0, yy, xx) as f64;
            }
        }
        (
            Tensor::new(vec![self.hsi.bands, p, p], hsi).expect("patch shape"),
            Tensor::new(vec![1, p, p], lidar).expect("patch shape"),
            s.label - 1,
        )
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Test-sample count per class (index 0 = class 1).
    pub fn test_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        for s in &self.samples {
            if s.split == Split::Test {
                counts[s.label - 1] += 1;
            }
        }
        counts
    }
}

/// Build a seeded per-class train/test split over the labeled pixels.
///
/// For each class in ascending order, all its labeled coordinates (raster
/// scan order) are shuffled with a ChaCha stream seeded from `seed`; the
/// first `train[c]` become train samples and the next `test[c]` test
/// samples. Unlabeled pixels (class 0) are never sampled.
pub fn sample_patches(
    hsi: Raster,
    lidar: Raster,
    labels: LabelRaster,
    patch_size: usize,
    counts: &PerClassCounts,
    seed: u64,
) -> Result<PatchDataset> {
    if hsi.height != labels.height || hsi.width != labels.width {
        return Err(Error::shape(
            "sample_patches",
            format!("labels of {}x{}", hsi.height, hsi.width),
            format!("{}x{}", labels.height, labels.width),
        ));
    }
    if lidar.height != hsi.height || lidar.width != hsi.width || lidar.bands != 1 {
        return Err(Error::shape(
            "sample_patches",
            format!("single-band LiDAR of {}x{}", hsi.height, hsi.width),
            format!("{} bands, {}x{}", lidar.bands, lidar.height, lidar.width),
        ));
    }
    let classes = labels.max_class();
    if classes < 1 {
        return Err(Error::Config("label raster contains no labeled pixels".into()));
    }
    if counts.train.len() != classes || counts.test.len() != classes {
        return Err(Error::Config(format!(
            "per-class counts cover {} classes but the raster has {}",
            counts.train.len().min(counts.test.len()),
            classes
        )));
    }

    let mut by_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); classes];
    for y in 0..labels.height {
        for x in 0..labels.width {
            let v = labels.get(y, x);
            if v > 0 {
                by_class[v as usize - 1].push((y, x));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for c in 0..classes {
        let want = counts.train[c] + counts.test[c];
        let available = by_class[c].len();
        if want > available {
            return Err(Error::InfeasibleCount {
                class: c + 1,
                name: format!("class {}", c + 1),
                requested: want,
                available,
            });
        }
        by_class[c].shuffle(&mut rng);
        for (i, &(y, x)) in by_class[c].iter().take(want).enumerate() {
            samples.push(Sample {
                y,
                x,
                label: c + 1,
                split: if i < counts.train[c] { Split::Train } else { Split::Test },
            });
        }
    }

    Ok(PatchDataset {
        hsi,
        lidar,
        labels,
        patch_size,
        classes,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_rasters(h: usize, w: usize, label_of: impl Fn(usize, usize) -> i16) -> (Raster, Raster, LabelRaster) {
        let mut hsi = Raster::zeros(3, h, w);
        for b in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    hsi.set(b, y, x, (b * 100 + y * 10 + x) as f32);
                }
            }
        }
        let mut lidar = Raster::zeros(1, h, w);
        for y in 0..h {
            for x in 0..w {
                lidar.set(0, y, x, (y + x) as f32);
            }
        }
        let mut labels = LabelRaster::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                labels.set(y, x, label_of(y, x));
            }
        }
        (hsi, lidar, labels)
    }

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        // n = 4: ... 2 1 [0 1 2 3] 2 1 ...
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(-2, 4), 2);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(5, 4), 1);
        assert_eq!(reflect(0, 4), 0);
        assert_eq!(reflect(3, 4), 3);
        assert_eq!(reflect(-3, 1), 0);
    }

    #[test]
    fn exact_count_lands_everything_in_train() {
        let (hsi, lidar, labels) = toy_rasters(4, 4, |y, _| if y < 2 { 1 } else { 2 });
        // class 1 has exactly 8 pixels; request (8, 0)
        let counts = PerClassCounts { train: vec![8, 1], test: vec![0, 1] };
        let ds = sample_patches(hsi, lidar, labels, 3, &counts, 7).unwrap();
        let class1: Vec<_> = ds.samples.iter().filter(|s| s.label == 1).collect();
        assert_eq!(class1.len(), 8);
        assert!(class1.iter().all(|s| s.split == Split::Train));
    }

    #[test]
    fn infeasible_count_names_class_and_availability() {
        let (hsi, lidar, labels) = toy_rasters(4, 4, |y, _| if y == 0 { 1 } else { 2 });
        let counts = PerClassCounts { train: vec![3, 1], test: vec![2, 0] };
        let err = sample_patches(hsi, lidar, labels, 3, &counts, 7).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("class 1") && msg.contains("requested 5") && msg.contains("4"), "{msg}");
    }

    #[test]
    fn same_seed_same_dataset() {
        let make = || {
            let (hsi, lidar, labels) = toy_rasters(6, 6, |y, x| ((y * 6 + x) % 3 + 1) as i16);
            sample_patches(hsi, lidar, labels, 3, &PerClassCounts::uniform(3, 4, 4), 99).unwrap()
        };
        assert_eq!(make().samples, make().samples);
    }

    #[test]
    fn splits_are_coordinate_disjoint_across_seeds() {
        for seed in 0..100 {
            let (hsi, lidar, labels) = toy_rasters(6, 6, |y, x| ((y * 6 + x) % 3 + 1) as i16);
            let ds =
                sample_patches(hsi, lidar, labels, 3, &PerClassCounts::uniform(3, 5, 5), seed).unwrap();
            let train: std::collections::BTreeSet<_> = ds
                .samples
                .iter()
                .filter(|s| s.split == Split::Train)
                .map(|s| (s.y, s.x))
                .collect();
            let test: std::collections::BTreeSet<_> = ds
                .samples
                .iter()
                .filter(|s| s.split == Split::Test)
                .map(|s| (s.y, s.x))
                .collect();
            assert!(train.is_disjoint(&test), "seed {seed} produced overlapping splits");
        }
    }

    #[test]
    fn patch_centers_on_the_sample_pixel() {
        let (hsi, lidar, labels) = toy_rasters(5, 5, |_, _| 1);
        let ds = sample_patches(hsi, lidar, labels, 3, &PerClassCounts::uniform(1, 25, 0), 1).unwrap();
        let idx = ds.samples.iter().position(|s| (s.y, s.x) == (2, 2)).unwrap();
        let (hpatch, lpatch, class) = ds.patches(idx);
        assert_eq!(class, 0);
        assert_eq!(hpatch.shape(), &[3, 3, 3]);
        // center of the patch equals the raster at (2, 2)
        assert_eq!(hpatch.at(&[0, 1, 1]), 22.0);
        assert_eq!(hpatch.at(&[1, 1, 1]), 122.0);
        assert_eq!(lpatch.at(&[0, 1, 1]), 4.0);
    }

    #[test]
    fn border_patch_uses_reflect_padding() {
        let (hsi, lidar, labels) = toy_rasters(4, 4, |_, _| 1);
        let ds = sample_patches(hsi, lidar, labels, 3, &PerClassCounts::uniform(1, 16, 0), 1).unwrap();
        let idx = ds.samples.iter().position(|s| (s.y, s.x) == (0, 0)).unwrap();
        let (hpatch, _, _) = ds.patches(idx);
        // position (-1, -1) reflects to (1, 1) = value 11
        assert_eq!(hpatch.at(&[0, 0, 0]), 11.0);
        // position (-1, 0) reflects to (1, 0) = 10
        assert_eq!(hpatch.at(&[0, 0, 1]), 10.0);
    }
}
