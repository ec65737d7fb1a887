use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Action `class` active on frames `start..=end` (0-based, inclusive).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalLabelSet {
    pub video_id: String,
    pub class_count: usize,
    pub intervals: Vec<Interval>,
}

/// Row-major `frames × classes` binary label matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseLabels {
    pub frames: usize,
    pub classes: usize,
    pub data: Vec<bool>,
}

impl DenseLabels {
    pub fn zeros(frames: usize, classes: usize) -> Self {
        Self {
            frames,
            classes,
            data: vec![false; frames * classes],
        }
    }

    pub fn active(&self, frame: usize, class: usize) -> bool {
        self.data[frame * self.classes + class]
    }

    pub fn set(&mut self, frame: usize, class: usize) {
        self.data[frame * self.classes + class] = true;
    }

    pub fn row(&self, frame: usize) -> &[bool] {
        &self.data[frame * self.classes..(frame + 1) * self.classes]
    }
}

impl IntervalLabelSet {
    pub fn validate(&self, frames: usize) -> Result<()> {
        for iv in &self.intervals {
            if iv.class >= self.class_count || iv.start > iv.end || iv.end >= frames {
                return Err(Error::Bounds(format!(
                    "video `{}`: interval {iv:?} outside {frames} frames x {} classes",
                    self.video_id, self.class_count
                )));
            }
        }
        Ok(())
    }

    /// `matrix[t][c]` is set iff some interval of class `c` covers frame `t`.
    pub fn densify(&self, frames: usize) -> Result<DenseLabels> {
        self.validate(frames)?;
        let mut out = DenseLabels::zeros(frames, self.class_count);
        for iv in &self.intervals {
            for t in iv.start..=iv.end {
                out.set(t, iv.class);
            }
        }
        Ok(out)
    }
}

/// For each action class, the attribute indices it involves.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeMap {
    pub class_to_attributes: Vec<Vec<usize>>,
}

impl AttributeMap {
    pub fn class_count(&self) -> usize {
        self.class_to_attributes.len()
    }

    pub fn validate(&self, attributes: usize) -> Result<()> {
        for (c, attrs) in self.class_to_attributes.iter().enumerate() {
            if attrs.is_empty() {
                return Err(Error::Corpus(format!("class {c} maps to no attribute")));
            }
            if let Some(&a) = attrs.iter().find(|&&a| a >= attributes) {
                return Err(Error::Bounds(format!(
                    "class {c} maps to attribute {a}, but only {attributes} attributes exist"
                )));
            }
        }
        Ok(())
    }

    /// Union of the attributes of the active classes in one label row.
    pub fn active_attributes(&self, row: &[bool], attributes: usize) -> Vec<bool> {
        let mut out = vec![false; attributes];
        for (c, _) in row.iter().enumerate().filter(|(_, &on)| on) {
            for &a in &self.class_to_attributes[c] {
                out[a] = true;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(intervals: &[(usize, usize, usize)], classes: usize) -> IntervalLabelSet {
        IntervalLabelSet {
            video_id: "v".into(),
            class_count: classes,
            intervals: intervals
                .iter()
                .map(|&(class, start, end)| Interval { class, start, end })
                .collect(),
        }
    }

    fn column(d: &DenseLabels, c: usize) -> Vec<bool> {
        (0..d.frames).map(|t| d.active(t, c)).collect()
    }

    #[test]
    fn single_interval() {
        let d = set(&[(0, 1, 2)], 1).densify(4).unwrap();
        assert_eq!(column(&d, 0), [false, true, true, false]);
    }

    #[test]
    fn overlapping_same_class_equals_union() {
        let a = set(&[(0, 1, 4), (0, 3, 6)], 1).densify(8).unwrap();
        let b = set(&[(0, 1, 6)], 1).densify(8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn multi_label_frames() {
        let d = set(&[(0, 0, 3), (1, 2, 5)], 2).densify(6).unwrap();
        assert!(d.active(2, 0) && d.active(2, 1));
        assert!(d.active(3, 0) && d.active(3, 1));
        assert!(!d.active(4, 0) && d.active(4, 1));
    }

    #[test]
    fn out_of_range_interval_is_rejected() {
        assert!(matches!(set(&[(0, 2, 4)], 1).densify(4), Err(Error::Bounds(_))));
        assert!(matches!(set(&[(1, 0, 0)], 1).densify(4), Err(Error::Bounds(_))));
        assert!(matches!(set(&[(0, 3, 2)], 1).densify(4), Err(Error::Bounds(_))));
    }

    #[test]
    fn attribute_map_validation() {
        let m = AttributeMap {
            class_to_attributes: vec![vec![0], vec![1, 2]],
        };
        assert!(m.validate(3).is_ok());
        assert!(m.validate(2).is_err());
        let empty = AttributeMap {
            class_to_attributes: vec![vec![]],
        };
        assert!(empty.validate(3).is_err());
        assert_eq!(m.active_attributes(&[false, true], 3), [false, true, true]);
    }

    proptest! {
        #[test]
        fn densify_ignores_interval_order(
            raw in prop::collection::vec((0usize..3, 0usize..10, 0usize..10), 0..8),
            rot in 0usize..8,
        ) {
            let intervals: Vec<_> = raw.iter().map(|&(c, a, b)| (c, a.min(b), a.max(b))).collect();
            let mut rotated = intervals.clone();
            if !rotated.is_empty() {
                let k = rot % rotated.len();
                rotated.rotate_left(k);
                rotated.reverse();
            }
            let a = set(&intervals, 3).densify(10).unwrap();
            let b = set(&rotated, 3).densify(10).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
