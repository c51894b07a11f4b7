//! Synthetic desk-scale scenes with built-in modality confounds.
//!
//! Labels tile the canvas with square cells in a balanced, seeded shuffle,
//! so every class is guaranteed a fair pixel share. Class signatures are
//! constructed so that neither modality separates everything on its own:
//!
//! - classes 1 and 2 share one spectrum, classes 3 and 4 share another
//!   (HSI-confounded pairs, separated only by elevation);
//! - classes 1/3, 2/4 and 5/6 share elevations (LiDAR-confounded pairs,
//!   separated only by spectrum).
//!
//! With balanced classes a spectra-only classifier is capped at
//! (classes - 2) / classes accuracy, and a LiDAR-only classifier at one
//! class per elevation level. The fused model can reach 100%.

use crate::data::raster::{LabelRaster, Raster};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Scene geometry and noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            classes: 6,
            height: 64,
            width: 64,
            bands: 16,
            noise_sigma: 0.3,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("scene needs >= 2 classes, got {}", self.classes)));
        }
        if self.bands < 4 {
            return Err(Error::Config(format!("scene needs >= 4 bands, got {}", self.bands)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "scene needs dimensions >= 8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Spectrum index and elevation level per class, realizing the confounds.
/// Returns (spectrum_id per class, elevation per class).
fn class_signature_plan(classes: usize) -> (Vec<usize>, Vec<f64>) {
    let mut spectrum = Vec::with_capacity(classes);
    let mut elevation = Vec::with_capacity(classes);
    for c in 0..classes {
        match c {
            // classes 1+2 share spectrum 0, classes 3+4 share spectrum 1
            0 | 1 if classes >= 2 => spectrum.push(0),
            2 | 3 if classes >= 4 => spectrum.push(1),
            _ => spectrum.push(c - 2),
        }
        match c {
            // elevations: 1/3 at level 0, 2/4 at level 1, 5/6 at level 2,
            // later classes one fresh level each
            0 | 2 => elevation.push(1.0),
            1 | 3 => elevation.push(2.0),
            4 | 5 => elevation.push(3.0),
            _ => elevation.push((c - 2) as f64),
        }
    }
    (spectrum, elevation)
}

/// Generate a (hsi, lidar, labels) triple per the spec. Deterministic per
/// seed; with `noise_sigma == 0` all pixels of a class carry the identical
/// spectrum and elevation.
pub fn synth_scene(spec: &SceneSpec) -> Result<(Raster, Raster, LabelRaster)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let (spectrum_of, elevation_of) = class_signature_plan(spec.classes);
    let n_spectra = spectrum_of.iter().copied().max().unwrap_or(0) + 1;
    let spectra: Vec<Vec<f64>> = (0..n_spectra)
        .map(|_| (0..spec.bands).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();

    // Balanced cell tiling: every class gets ncells/classes cells (+/- 1),
    // shuffled into place.
    let cell = 8usize;
    let grid_h = spec.height.div_ceil(cell);
    let grid_w = spec.width.div_ceil(cell);
    let ncells = grid_h * grid_w;
    let mut cell_class: Vec<i16> = (0..ncells)
        .map(|i| (i % spec.classes + 1) as i16)
        .collect();
    cell_class.shuffle(&mut rng);

    let mut labels = LabelRaster::zeros(spec.height, spec.width);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let c = cell_class[(y / cell) * grid_w + x / cell];
            labels.set(y, x, c);
        }
    }

    let mut hsi = Raster::zeros(spec.bands, spec.height, spec.width);
    for b in 0..spec.bands {
        for y in 0..spec.height {
            for x in 0..spec.width {
                let class = labels.get(y, x) as usize - 1;
                let clean = spectra[spectrum_of[class]][b];
                let noise = spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                hsi.set(b, y, x, (clean + noise) as f32);
            }
        }
    }

    let mut lidar = Raster::zeros(1, spec.height, spec.width);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let class = labels.get(y, x) as usize - 1;
            let noise = spec.noise_sigma * 0.2 * rng.sample::<f64, _>(StandardNormal);
            lidar.set(0, y, x, (elevation_of[class] + noise) as f32);
        }
    }

    Ok((hsi, lidar, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_encodes_the_confounds() {
        let (spectrum, elevation) = class_signature_plan(6);
        // spectrally identical pairs
        assert_eq!(spectrum[0], spectrum[1]);
        assert_eq!(spectrum[2], spectrum[3]);
        assert_ne!(spectrum[0], spectrum[2]);
        assert_ne!(spectrum[4], spectrum[5]);
        // elevation-identical pairs, spectrally different
        assert_eq!(elevation[0], elevation[2]);
        assert_eq!(elevation[1], elevation[3]);
        assert_eq!(elevation[4], elevation[5]);
        assert_ne!(elevation[0], elevation[1]);
        assert_ne!(elevation[2], elevation[3]);
    }

    #[test]
    fn zero_noise_gives_identical_spectra_within_class() {
        let spec = SceneSpec { noise_sigma: 0.0, ..SceneSpec::default() };
        let (hsi, lidar, labels) = synth_scene(&spec).unwrap();
        let mut spectra_by_class: Vec<Option<Vec<f32>>> = vec![None; spec.classes];
        for y in 0..spec.height {
            for x in 0..spec.width {
                let c = labels.get(y, x) as usize - 1;
                let pixel: Vec<f32> = (0..spec.bands).map(|b| hsi.get(b, y, x)).collect();
                match &spectra_by_class[c] {
                    None => spectra_by_class[c] = Some(pixel),
                    Some(reference) => assert_eq!(&pixel, reference),
                }
                let _ = lidar.get(0, y, x);
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::default();
        let a = synth_scene(&spec).unwrap();
        let b = synth_scene(&spec).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn every_class_gets_a_fair_pixel_share() {
        let spec = SceneSpec::default();
        let (_, _, labels) = synth_scene(&spec).unwrap();
        let mut counts = vec![0usize; spec.classes];
        for &v in &labels.values {
            assert!(v >= 1 && v as usize <= spec.classes);
            counts[v as usize - 1] += 1;
        }
        // 64 cells over 6 classes: at least 10 cells = 640 pixels each
        for (c, &n) in counts.iter().enumerate() {
            assert!(n >= 600, "class {} has only {} pixels", c + 1, n);
        }
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert!(synth_scene(&SceneSpec { classes: 1, ..SceneSpec::default() }).is_err());
        assert!(synth_scene(&SceneSpec { bands: 3, ..SceneSpec::default() }).is_err());
    }
}
