//! Dataset machinery: the synthetic shapes generator and COCO-panoptic
//! interchange.

pub mod coco;
pub mod synthetic;

pub use coco::{
    read_coco_panoptic, read_dataset, read_image_png, rgb_to_segment_id, segment_id_to_rgb,
    write_coco_panoptic, write_dataset, write_image_png,
};
pub use synthetic::{generate_synthetic_dataset, DatasetItem, SyntheticSpec};
