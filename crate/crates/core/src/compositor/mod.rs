//! Pasting patches into annotated images.
//!
//! Each ground-truth box is patched independently with probability `pi`.
//! A placed patch is scaled relative to its box, rotated about the box
//! centre and bilinearly resampled; pixels outside the rotated patch stay
//! untouched. Every decision is logged so that a run can be replayed
//! exactly.

mod annotation;
mod image;
mod place;
mod source;

pub use annotation::{
    filter_small_boxes, load_annotations, load_json_annotations, load_yolo_annotations, Annotation, BoundingBox,
    FilterCounts, LabeledBox, MIN_BOX_AREA_PX,
};
pub use image::Image;
pub use place::{
    compose_dataset, draw_transform, patch_image, place_patch, read_placements, replay, write_placements,
    PatchMode, PlacementConfig, PlacementRecord, ScaleAnchor, Transform,
};
pub use source::{
    AeSource, CvaeSource, FixedPatch, PatchSource, PcaSource, SetSource, SourcedPatch,
};
