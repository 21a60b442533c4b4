use std::collections::BTreeMap;

use crate::data::{Label, IGNORE};
use crate::error::{Error, Result};

/// Total mapping from raw semantic ids to training classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMap {
    raw_to_train: BTreeMap<u16, Label>,
    class_names: Vec<String>,
}

impl ClassMap {
    /// `pairs` maps raw ids to a class index or `None` for IGNORE.
    pub fn new(
        class_names: Vec<String>,
        pairs: impl IntoIterator<Item = (u16, Option<Label>)>,
    ) -> Result<Self> {
        let n = class_names.len();
        if n == 0 {
            return Err(Error::config("classes", "at least one class is required"));
        }
        let mut raw_to_train = BTreeMap::new();
        for (raw, train) in pairs {
            let train = match train {
                Some(t) if (t as usize) < n => t,
                Some(t) => {
                    return Err(Error::config(
                        format!("classes.map.{raw}"),
                        format!("class {t} out of range for {n} classes"),
                    ))
                }
                None => IGNORE,
            };
            raw_to_train.insert(raw, train);
        }
        Ok(Self {
            raw_to_train,
            class_names,
        })
    }

    /// Raw id `i` is class `i`; raw 0xFFFF is IGNORE.
    pub fn identity(num_classes: usize) -> Self {
        let names = (0..num_classes).map(|i| format!("class{i}")).collect();
        let pairs = (0..num_classes as u16)
            .map(|i| (i, Some(Label::from(i))))
            .chain([(u16::MAX, None)]);
        Self::new(names, pairs).expect("identity map is valid")
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.class_names.len() {
            return Err(Error::config(
                "classes.names",
                format!(
                    "{} names given for {} classes",
                    names.len(),
                    self.class_names.len()
                ),
            ));
        }
        self.class_names = names;
        Ok(self)
    }

    /// The 19-class SemanticKITTI learning map; unlabeled, outlier,
    /// other-structure and other-object are ignored and moving classes fold
    /// into their static counterparts.
    pub fn semantic_kitti() -> Self {
        const NAMES: [&str; 19] = [
            "car",
            "bicycle",
            "motorcycle",
            "truck",
            "other-vehicle",
            "person",
            "bicyclist",
            "motorcyclist",
            "road",
            "parking",
            "sidewalk",
            "other-ground",
            "building",
            "fence",
            "vegetation",
            "trunk",
            "terrain",
            "pole",
            "traffic-sign",
        ];
        // raw id -> learning id, learning id 0 is ignored
        const LEARNING: [(u16, u32); 34] = [
            (0, 0),
            (1, 0),
            (10, 1),
            (11, 2),
            (13, 5),
            (15, 3),
            (16, 5),
            (18, 4),
            (20, 5),
            (30, 6),
            (31, 7),
            (32, 8),
            (40, 9),
            (44, 10),
            (48, 11),
            (49, 12),
            (50, 13),
            (51, 14),
            (52, 0),
            (60, 9),
            (70, 15),
            (71, 16),
            (72, 17),
            (80, 18),
            (81, 19),
            (99, 0),
            (252, 1),
            (253, 7),
            (254, 6),
            (255, 8),
            (256, 5),
            (257, 5),
            (258, 4),
            (259, 5),
        ];
        let pairs = LEARNING
            .iter()
            .map(|&(raw, l)| (raw, l.checked_sub(1)));
        Self::new(NAMES.iter().map(|s| s.to_string()).collect(), pairs)
            .expect("built-in map is valid")
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn to_train(&self, raw: u16) -> Result<Label> {
        self.raw_to_train
            .get(&raw)
            .copied()
            .ok_or_else(|| Error::Data(format!("raw label id {raw} is not in the class map")))
    }

    /// Smallest raw id mapping to `label`.
    pub fn to_raw(&self, label: Label) -> Result<u16> {
        self.raw_to_train
            .iter()
            .find(|(_, &t)| t == label)
            .map(|(&r, _)| r)
            .ok_or_else(|| {
                Error::Data(if label == IGNORE {
                    "class map has no raw id for IGNORE".to_string()
                } else {
                    format!("class map has no raw id for class {label}")
                })
            })
    }

    pub fn raw_ids(&self) -> impl Iterator<Item = (u16, Label)> + '_ {
        self.raw_to_train.iter().map(|(&r, &t)| (r, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kitti_map_folds_moving_classes() {
        let m = ClassMap::semantic_kitti();
        assert_eq!(m.num_classes(), 19);
        assert_eq!(m.to_train(40).unwrap(), 8);
        assert_eq!(m.to_train(252).unwrap(), m.to_train(10).unwrap());
        assert_eq!(m.to_train(0).unwrap(), IGNORE);
        assert_eq!(m.to_raw(IGNORE).unwrap(), 0);
        assert!(m.to_train(2).is_err());
    }

    #[test]
    fn out_of_range_class_is_config_error() {
        let err = ClassMap::new(vec!["a".into()], [(5, Some(1))]).unwrap_err();
        assert!(err.to_string().contains("classes.map.5"));
    }

    #[test]
    fn identity_round_trips() {
        let m = ClassMap::identity(4);
        for c in 0..4 {
            assert_eq!(m.to_train(m.to_raw(c).unwrap()).unwrap(), c);
        }
        assert_eq!(m.to_raw(IGNORE).unwrap(), u16::MAX);
    }
}
