//! Spatio-angular volumes: the ordered view sequences optical flow runs on.

use crate::error::{Error, Result};
use crate::image::ImageRef;
use crate::lightfield::LightField;

/// Which angular axis the volume traverses. `Row` fixes t and walks s
/// (horizontal camera motion); `Column` fixes s and walks t.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Row,
    Column,
}

/// Ordered sequence of N views along one angular axis at a fixed index on
/// the other. Views are shared handles; mutating a volume can never corrupt
/// the light field.
#[derive(Debug, Clone)]
pub struct SpatioAngularVolume {
    pub images: Vec<ImageRef>,
    pub axis: Axis,
    pub fixed_index: usize,
    /// Source indices along the traversed axis, strictly increasing with
    /// unit step.
    pub angular_coords: Vec<usize>,
}

impl SpatioAngularVolume {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Extract the full row (or column) of views passing through `fixed_index`
/// on the other axis.
pub fn extract_volume(lf: &LightField, axis: Axis, fixed_index: usize) -> Result<SpatioAngularVolume> {
    let (s_count, t_count) = lf.angular_size();
    let (fixed_extent, traversed_extent) = match axis {
        Axis::Row => (t_count, s_count),
        Axis::Column => (s_count, t_count),
    };
    if fixed_index >= fixed_extent {
        return Err(Error::Index(format!(
            "fixed index {fixed_index} outside extent {fixed_extent} for {axis:?}"
        )));
    }
    if traversed_extent < 2 {
        return Err(Error::Structure(format!(
            "{axis:?} volume would have N = {traversed_extent} < 2 views"
        )));
    }
    let images = (0..traversed_extent)
        .map(|i| match axis {
            Axis::Row => lf.view(i, fixed_index).clone(),
            Axis::Column => lf.view(fixed_index, i).clone(),
        })
        .collect();
    Ok(SpatioAngularVolume {
        images,
        axis,
        fixed_index,
        angular_coords: (0..traversed_extent).collect(),
    })
}
