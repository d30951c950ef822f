use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the three attribute axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Artist,
    Period,
    Genre,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Artist, Axis::Period, Axis::Genre];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Artist => "artist",
            Axis::Period => "period",
            Axis::Genre => "genre",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Result<Axis> {
        match s {
            "artist" => Ok(Axis::Artist),
            "period" => Ok(Axis::Period),
            "genre" => Ok(Axis::Genre),
            other => Err(Error::Precondition(format!(
                "unknown axis {other:?}; expected artist, period or genre"
            ))),
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered label lists for artist, period and genre. List lengths are the
/// one-hot widths of the condition vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    artists: Vec<String>,
    periods: Vec<String>,
    genres: Vec<String>,
}

impl AttributeSchema {
    pub fn new(artists: Vec<String>, periods: Vec<String>, genres: Vec<String>) -> Result<Self> {
        let schema = AttributeSchema {
            artists,
            periods,
            genres,
        };
        for axis in Axis::ALL {
            let labels = schema.labels(axis);
            if labels.len() < 2 {
                return Err(Error::Schema(format!(
                    "{axis} axis needs at least 2 labels, got {}",
                    labels.len()
                )));
            }
            for (i, l) in labels.iter().enumerate() {
                if l.is_empty() {
                    return Err(Error::Schema(format!("empty {axis} label")));
                }
                if labels[..i].contains(l) {
                    return Err(Error::Schema(format!("duplicate {axis} label {l:?}")));
                }
            }
        }
        Ok(schema)
    }

    pub fn from_strs(artists: &[&str], periods: &[&str], genres: &[&str]) -> Result<Self> {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self::new(own(artists), own(periods), own(genres))
    }

    pub fn labels(&self, axis: Axis) -> &[String] {
        match axis {
            Axis::Artist => &self.artists,
            Axis::Period => &self.periods,
            Axis::Genre => &self.genres,
        }
    }

    pub fn size(&self, axis: Axis) -> usize {
        self.labels(axis).len()
    }

    /// `(N_a, N_p, N_g)`.
    pub fn sizes(&self) -> [usize; 3] {
        [self.artists.len(), self.periods.len(), self.genres.len()]
    }

    /// Width of the concatenated condition vector.
    pub fn condition_dim(&self) -> usize {
        self.sizes().iter().sum()
    }

    pub fn index_of(&self, axis: Axis, label: &str) -> Result<usize> {
        let labels = self.labels(axis);
        labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel {
                axis: axis.name(),
                label: label.to_string(),
                valid: labels.join(", "),
            })
    }

    /// Errors naming the first axis on which `other` disagrees.
    pub fn ensure_matches(&self, other: &AttributeSchema) -> Result<()> {
        for axis in Axis::ALL {
            if self.labels(axis) != other.labels(axis) {
                return Err(Error::Schema(format!(
                    "{axis} axis mismatch: [{}] vs [{}]",
                    self.labels(axis).join(", "),
                    other.labels(axis).join(", ")
                )));
            }
        }
        Ok(())
    }
}

/// Per-sample `(artist, period, genre)` label indices.
pub type LabelTriple = [usize; 3];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_invariants() {
        assert!(AttributeSchema::from_strs(&["a", "b"], &["x", "y"], &["p", "q"]).is_ok());
        assert!(AttributeSchema::from_strs(&["a"], &["x", "y"], &["p", "q"]).is_err());
        assert!(AttributeSchema::from_strs(&["a", "a"], &["x", "y"], &["p", "q"]).is_err());
        assert!(AttributeSchema::from_strs(&["a", ""], &["x", "y"], &["p", "q"]).is_err());
    }

    #[test]
    fn mismatch_names_axis() {
        let a = AttributeSchema::from_strs(&["a", "b"], &["x", "y"], &["p", "q"]).unwrap();
        let b = AttributeSchema::from_strs(&["a", "b"], &["x", "z"], &["p", "q"]).unwrap();
        let err = a.ensure_matches(&b).unwrap_err().to_string();
        assert!(err.contains("period"), "{err}");
        a.ensure_matches(&a.clone()).unwrap();
    }
}
