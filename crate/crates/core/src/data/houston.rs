//! Reference constants for the Houston 2013 benchmark: raster geometry,
//! class roster with the customary train/test counts, and the accuracy
//! figures reported for this architecture on that benchmark. The dataset
//! itself is user-supplied; these values document the target setup and feed
//! the readiness checks.

pub const WIDTH: usize = 1905;
pub const HEIGHT: usize = 349;
pub const BANDS: usize = 144;
/// Ground sampling distance in meters.
pub const RESOLUTION_M: f64 = 2.5;

pub const CLASS_NAMES: [&str; 15] = [
    "Healthy grass",
    "Stressed grass",
    "Synthetic grass",
    "Trees",
    "Soil",
    "Water",
    "Residential",
    "Commercial",
    "Road",
    "Highway",
    "Railway",
    "Parking lot 1",
    "Parking lot 2",
    "Tennis court",
    "Running track",
];

pub const TRAIN_COUNTS: [usize; 15] = [
    198, 190, 192, 188, 186, 182, 196, 191, 193, 191, 181, 192, 184, 181, 187,
];

pub const TEST_COUNTS: [usize; 15] = [
    1053, 1064, 505, 1056, 1056, 143, 1072, 1036, 1059, 1036, 1054, 1041, 285, 247, 473,
];

/// Reported Houston accuracy of this model, mean and std in percent
/// (OA, AA) and in kappa points: reference targets only, not reproducible
/// at desk scale.
pub const REFERENCE_DNL_OA: (f64, f64) = (93.74, 0.76);
pub const REFERENCE_DNL_AA: (f64, f64) = (94.78, 0.62);
pub const REFERENCE_DNL_KAPPA: (f64, f64) = (93.41, 0.79);

/// Reported Houston accuracy of the coupled non-local baseline.
pub const REFERENCE_NL_OA: (f64, f64) = (93.22, 0.68);
pub const REFERENCE_NL_AA: (f64, f64) = (93.99, 0.64);
pub const REFERENCE_NL_KAPPA: (f64, f64) = (93.01, 0.72);

/// Reported OA per ablation-grid wiring (same row order as
/// `WiringConfig::ablation_grid`).
pub const REFERENCE_ABLATION_OA: [(f64, f64); 8] = [
    (93.48, 0.21),
    (93.14, 0.45),
    (92.85, 0.52),
    (93.12, 0.63),
    (92.71, 0.46),
    (46.96, 0.25),
    (88.52, 0.34),
    (93.74, 0.76),
];
