//! TOML configuration: one file holds every numeric hyperparameter.
//!
//! ```toml
//! num_classes = 4
//!
//! [projection]
//! height = 16
//! width = 256
//! fov_up_deg = 3.0
//! fov_down_deg = 25.0
//!
//! [model]
//! heads = "top,mid,edge"
//! top = { kind = "mobile", blocks = 9 }
//!
//! [loss]
//! lambda = 0.1
//!
//! [knn]
//! k = 5
//!
//! [train]
//! iterations = 100
//!
//! [classes]
//! names = ["ground", "car", "pole", "wall"]
//! map = { "0" = 0, "10" = 1, "80" = 2, "50" = 3, "99" = -1 }
//! ```
//!
//! Omitted fields take the reference defaults. Negative class-map targets
//! mark raw ids as ignored.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::data::ClassMap;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::config::{path_blocks, BASE_BOTTOM, BASE_MIDDLE, BASE_TOP};
use crate::model::{Heads, ModelConfig};
use crate::nn::{BlockKind, BlockSpec};
use crate::postprocess::KnnConfig;
use crate::projection::{PitchOffset, ProjectionConfig, CHANNELS};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub projection: ProjectionConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub knn: KnnConfig,
    pub train: TrainConfig,
    pub classes: ClassMap,
}

impl Config {
    /// Reference defaults for `num_classes` classes with an identity class map.
    pub fn new(num_classes: usize) -> Self {
        Self {
            projection: ProjectionConfig::default(),
            model: ModelConfig::new(num_classes),
            loss: LossConfig::default(),
            knn: KnnConfig::default(),
            train: TrainConfig::default(),
            classes: ClassMap::identity(num_classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.projection.validate()?;
        self.model.validate()?;
        self.loss.validate(self.model.num_classes)?;
        self.knn.validate()?;
        self.train.validate()?;
        if self.classes.num_classes() != self.model.num_classes {
            return Err(Error::config(
                "classes",
                format!(
                    "class map has {} classes, num_classes is {}",
                    self.classes.num_classes(),
                    self.model.num_classes
                ),
            ));
        }
        let (mh, mw) = self.model.input_multiple();
        if !self.projection.h.is_multiple_of(mh) || !self.projection.w.is_multiple_of(mw) {
            return Err(Error::config(
                "projection",
                format!(
                    "{}×{} is not a multiple of {mh}×{mw}",
                    self.projection.h, self.projection.w
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileDoc {
    num_classes: Option<usize>,
    projection: ProjectionDoc,
    model: ModelDoc,
    loss: LossConfig,
    knn: KnnConfig,
    train: TrainConfig,
    classes: ClassesDoc,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ProjectionDoc {
    height: Option<usize>,
    width: Option<usize>,
    fov_up_deg: Option<f64>,
    fov_down_deg: Option<f64>,
    channel_mean: Option<[f64; CHANNELS]>,
    channel_std: Option<[f64; CHANNELS]>,
    pitch_offset: Option<PitchOffset>,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ModelDoc {
    expansion: Option<usize>,
    interactions: Option<bool>,
    mfm_tap: Option<bool>,
    heads: Option<String>,
    mfm: Option<Vec<RowDoc>>,
    top: Option<PathDoc>,
    middle: Option<PathDoc>,
    bottom: Option<PathDoc>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Stride {
    Both(usize),
    Axes([usize; 2]),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RowDoc {
    kind: BlockKind,
    k: usize,
    c: usize,
    stride: Option<Stride>,
    repeat: Option<usize>,
}

impl RowDoc {
    fn spec(&self) -> BlockSpec {
        let stride = match self.stride {
            None => (1, 1),
            Some(Stride::Both(s)) => (s, s),
            Some(Stride::Axes([v, h])) => (v, h),
        };
        BlockSpec {
            kind: self.kind,
            k: self.k,
            c: self.c,
            stride,
            repeat: self.repeat.unwrap_or(1),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PathDoc {
    Shorthand { kind: BlockKind, blocks: usize },
    Rows(Vec<RowDoc>),
}

impl PathDoc {
    fn specs(&self, base: &[usize]) -> Vec<BlockSpec> {
        match self {
            PathDoc::Shorthand { kind, blocks } => path_blocks(*kind, *blocks, base),
            PathDoc::Rows(rows) => rows.iter().map(RowDoc::spec).collect(),
        }
    }
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ClassesDoc {
    /// `identity` or `semantic_kitti`.
    preset: Option<String>,
    names: Option<Vec<String>>,
    map: Option<BTreeMap<String, i64>>,
}

impl ClassesDoc {
    fn build(&self, num_classes: Option<usize>) -> Result<ClassMap> {
        let map = match (self.preset.as_deref(), &self.map) {
            (Some(_), Some(_)) => {
                return Err(Error::config("classes", "give either a preset or a map, not both"))
            }
            (Some("semantic_kitti"), None) => ClassMap::semantic_kitti(),
            (Some("identity") | None, None) => {
                let n = num_classes
                    .or(self.names.as_ref().map(Vec::len))
                    .ok_or_else(|| Error::config("num_classes", "required"))?;
                ClassMap::identity(n)
            }
            (Some(other), None) => {
                return Err(Error::config(
                    "classes.preset",
                    format!("unknown preset `{other}`; expected identity or semantic_kitti"),
                ))
            }
            (None, Some(map)) => {
                let n = num_classes
                    .or(self.names.as_ref().map(Vec::len))
                    .ok_or_else(|| Error::config("num_classes", "required with a class map"))?;
                let mut pairs = Vec::with_capacity(map.len());
                for (raw, &target) in map {
                    let path = format!("classes.map.{raw}");
                    let raw: u16 = raw
                        .parse()
                        .map_err(|_| Error::config(&path, "raw ids are integers in 0..=65535"))?;
                    let target = if target < 0 {
                        None
                    } else {
                        Some(u32::try_from(target).map_err(|_| Error::config(&path, "class id too large"))?)
                    };
                    pairs.push((raw, target));
                }
                let names = (0..n).map(|i| format!("class{i}")).collect();
                ClassMap::new(names, pairs)?
            }
        };
        match &self.names {
            Some(names) => map.with_names(names.clone()),
            None => Ok(map),
        }
    }
}

/// Parses a configuration document and validates every section.
pub fn parse_config(text: &str) -> Result<Config> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::config("", e.message()))?;
    let doc: FileDoc = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let message = e.into_inner().message().to_string();
        Error::Config { path, message }
    })?;
    let classes = doc.classes.build(doc.num_classes)?;
    let num_classes = doc.num_classes.unwrap_or(classes.num_classes());

    let mut projection = ProjectionConfig::default();
    let p = &doc.projection;
    projection.h = p.height.unwrap_or(projection.h);
    projection.w = p.width.unwrap_or(projection.w);
    projection.fov_up = p.fov_up_deg.map_or(projection.fov_up, f64::to_radians);
    projection.fov_down = p.fov_down_deg.map_or(projection.fov_down, f64::to_radians);
    projection.channel_mean = p.channel_mean.unwrap_or(projection.channel_mean);
    projection.channel_std = p.channel_std.unwrap_or(projection.channel_std);
    projection.pitch_offset = p.pitch_offset.unwrap_or(projection.pitch_offset);

    let mut model = ModelConfig::new(num_classes);
    let m = &doc.model;
    model.expansion = m.expansion.unwrap_or(model.expansion);
    model.interactions = m.interactions.unwrap_or(model.interactions);
    model.mfm_tap = m.mfm_tap.unwrap_or(model.mfm_tap);
    if let Some(h) = &m.heads {
        model.heads = Heads::parse(h).map_err(|e| match e {
            Error::Config { message, .. } => Error::config("model.heads", message),
            e => e,
        })?;
    }
    if let Some(rows) = &m.mfm {
        model.mfm.blocks = rows.iter().map(RowDoc::spec).collect();
    }
    if let Some(t) = &m.top {
        model.mim.top = t.specs(&BASE_TOP);
    }
    if let Some(t) = &m.middle {
        model.mim.middle = t.specs(&BASE_MIDDLE);
    }
    if let Some(t) = &m.bottom {
        model.mim.bottom = t.specs(&BASE_BOTTOM);
    }

    let cfg = Config {
        projection,
        model,
        loss: doc.loss,
        knn: doc.knn,
        train: doc.train,
        classes,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
