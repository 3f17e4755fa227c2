//! The eight-dimensional mid-level feature space.

use serde::{Deserialize, Serialize};

/// Number of mid-level dimensions.
pub const MID_LEVEL_DIM: usize = 8;

/// Dimension names in storage order.
pub const DIMENSION_NAMES: [&str; MID_LEVEL_DIM] = [
    "melodiousness",
    "articulation",
    "rhythm_stability",
    "rhythm_complexity",
    "dissonance",
    "tonal_stability",
    "minorness",
    "onset_density",
];

/// Index of onset density within a feature vector.
pub const ONSET_DENSITY: usize = 7;

/// Eight measured perceptual features of one recording.
///
/// Values are finite and `onset_density` (onsets per second) is non-negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MidLevelVector([f64; MID_LEVEL_DIM]);

impl MidLevelVector {
    pub fn new(values: [f64; MID_LEVEL_DIM]) -> Result<Self, String> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(format!("{} is not finite", DIMENSION_NAMES[i]));
        }
        if values[ONSET_DENSITY] < 0.0 {
            return Err(format!(
                "onset_density must be >= 0, got {}",
                values[ONSET_DENSITY]
            ));
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self, String> {
        let arr: [f64; MID_LEVEL_DIM] = values
            .try_into()
            .map_err(|_| format!("expected {MID_LEVEL_DIM} values, found {}", values.len()))?;
        Self::new(arr)
    }

    pub fn values(&self) -> &[f64; MID_LEVEL_DIM] {
        &self.0
    }

    pub fn melodiousness(&self) -> f64 {
        self.0[0]
    }
    pub fn articulation(&self) -> f64 {
        self.0[1]
    }
    pub fn rhythm_stability(&self) -> f64 {
        self.0[2]
    }
    pub fn rhythm_complexity(&self) -> f64 {
        self.0[3]
    }
    pub fn dissonance(&self) -> f64 {
        self.0[4]
    }
    pub fn tonal_stability(&self) -> f64 {
        self.0[5]
    }
    pub fn minorness(&self) -> f64 {
        self.0[6]
    }
    pub fn onset_density(&self) -> f64 {
        self.0[ONSET_DENSITY]
    }

    /// Returns a copy with onset density replaced.
    pub fn with_onset_density(&self, value: f64) -> Result<Self, String> {
        let mut values = self.0;
        values[ONSET_DENSITY] = value;
        Self::new(values)
    }
}

impl Serialize for MidLevelVector {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for MidLevelVector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(deserializer)?;
        MidLevelVector::from_slice(&values).map_err(serde::de::Error::custom)
    }
}


/// Eight finite coordinates in the space where ranking happens.
///
/// Unlike [`MidLevelVector`] these may be standardized scores or model
/// predictions, so no sign constraint applies to onset density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Profile(pub [f64; MID_LEVEL_DIM]);

impl Profile {
    pub const ZERO: Profile = Profile([0.0; MID_LEVEL_DIM]);

    pub fn values(&self) -> &[f64; MID_LEVEL_DIM] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Profile) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, c: f64) -> Profile {
        Profile(self.0.map(|v| v * c))
    }

    pub fn sub(&self, other: &Profile) -> Profile {
        let mut out = self.0;
        out.iter_mut().zip(&other.0).for_each(|(a, b)| *a -= b);
        Profile(out)
    }

    /// Component-wise mean; `None` for an empty input.
    pub fn mean<'a>(profiles: impl IntoIterator<Item = &'a Profile>) -> Option<Profile> {
        let mut sum = [0.0; MID_LEVEL_DIM];
        let mut n = 0usize;
        for p in profiles {
            sum.iter_mut().zip(&p.0).for_each(|(s, v)| *s += v);
            n += 1;
        }
        (n > 0).then(|| Profile(sum.map(|s| s / n as f64)))
    }
}

impl From<MidLevelVector> for Profile {
    fn from(v: MidLevelVector) -> Self {
        Profile(*v.values())
    }
}
