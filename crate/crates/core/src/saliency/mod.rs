//! Class-activation saliency and instance extraction.
//!
//! A GAP + softmax head is trained on the ingested conv maps. Its class
//! weights turn a map into a saliency map `M_c(x, y) = sum_u w_u^c f_u(x, y)`,
//! which is binarized by OTSU; the bounding box of the largest 8-connected
//! foreground region is mean-pooled into the image's instance feature.

mod components;
mod head;
mod otsu;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use components::{largest_component_bbox, BoundingBox, Component};
pub use head::{global_average_pool, train_gap_head, GapHead, GapHyper, GapTraining, HeadGradient};
pub use otsu::{binarize, normalize, otsu_threshold, quantize, OtsuThreshold, BINS};

use crate::features::FeatureMap;

#[derive(Debug, Error, PartialEq)]
pub enum SaliencyError {
    #[error("no feature map for image {0:?}")]
    MissingMap(String),
    #[error("training labels must cover at least two classes")]
    SingleClass,
    #[error("map has {found} channels, head expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("class {class} out of range for a {classes}-class head")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("map has fewer than two distinct values")]
    DegenerateMap,
    #[error("mask has no foreground cells")]
    EmptyMask,
    #[error("bounding box {0:?} lies outside the map")]
    BoxOutOfRange(BoundingBox),
    #[error("grid data length {found} does not match {height}x{width}")]
    GridShape { height: usize, width: usize, found: usize },
}

/// Row-major H x W grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self, SaliencyError> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(SaliencyError::GridShape {
                height,
                width,
                found: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }
}

fn check_channels(map: &FeatureMap, head: &GapHead) -> Result<(), SaliencyError> {
    if map.channels() != head.channel_count {
        return Err(SaliencyError::ChannelMismatch {
            expected: head.channel_count,
            found: map.channels(),
        });
    }
    Ok(())
}

/// Channel sum weighted by class `class`'s head weights. The bias is
/// spatially constant and left out.
pub fn compute_saliency_map(map: &FeatureMap, head: &GapHead, class: usize) -> Result<Grid<f64>, SaliencyError> {
    check_channels(map, head)?;
    if class >= head.class_count {
        return Err(SaliencyError::ClassOutOfRange {
            class,
            classes: head.class_count,
        });
    }
    let weights = head.class_weights(class);
    let mut data = vec![0.0; map.height() * map.width()];
    for (u, &w) in weights.iter().enumerate() {
        for (cell, &f) in data.iter_mut().zip(map.channel(u)) {
            *cell += w * f;
        }
    }
    Grid::new(map.height(), map.width(), data)
}

/// Per-channel mean over the cells of `bbox`.
pub fn extract_instance(map: &FeatureMap, bbox: &BoundingBox) -> Result<Vec<f64>, SaliencyError> {
    if bbox.x_min > bbox.x_max || bbox.y_min > bbox.y_max || bbox.x_max >= map.width() || bbox.y_max >= map.height() {
        return Err(SaliencyError::BoxOutOfRange(*bbox));
    }
    let cells = bbox.cells() as f64;
    Ok((0..map.channels())
        .map(|u| {
            let mut sum = 0.0;
            for y in bbox.y_min..=bbox.y_max {
                for x in bbox.x_min..=bbox.x_max {
                    sum += map.at(u, y, x);
                }
            }
            sum / cells
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyResult {
    pub class: usize,
    pub map: Grid<f64>,
    /// OTSU threshold on the normalized map; `None` when the map was flat.
    pub threshold: Option<OtsuThreshold>,
    pub mask: Grid<bool>,
    pub bbox: BoundingBox,
    pub component_size: usize,
    pub instance_feature: Vec<f64>,
    /// Set when the saliency map was constant and the whole map was pooled.
    pub fallback: bool,
}

/// Saliency map, OTSU mask, largest-component box and pooled instance for
/// one image. A constant saliency map carries no localization signal, so
/// the whole map is pooled and the result is flagged.
pub fn localize(map: &FeatureMap, head: &GapHead, class: usize) -> Result<SaliencyResult, SaliencyError> {
    let saliency = compute_saliency_map(map, head, class)?;
    let (h, w) = (saliency.height, saliency.width);
    match otsu_threshold(&saliency) {
        Ok(otsu) => {
            let mask = binarize(&saliency, &otsu)?;
            let component = largest_component_bbox(&mask)?;
            let instance_feature = extract_instance(map, &component.bbox)?;
            Ok(SaliencyResult {
                class,
                map: saliency,
                threshold: Some(otsu),
                mask,
                bbox: component.bbox,
                component_size: component.size,
                instance_feature,
                fallback: false,
            })
        }
        Err(SaliencyError::DegenerateMap) => {
            let bbox = BoundingBox::full(h, w);
            Ok(SaliencyResult {
                class,
                map: saliency,
                threshold: None,
                mask: Grid::new(h, w, vec![true; h * w])?,
                bbox,
                component_size: h * w,
                instance_feature: extract_instance(map, &bbox)?,
                fallback: true,
            })
        }
        Err(e) => Err(e),
    }
}
