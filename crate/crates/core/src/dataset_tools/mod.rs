//! Dataset construction helpers: representative-frame selection for sparse
//! annotation and thermal-to-RGB spatial alignment.

pub mod alignment;
pub mod frames;

pub use alignment::{apply_alignment, estimate_alignment, estimate_alignment_with, AlignmentMap, MotionModel, Point};
pub use frames::{frame_descriptors, kmeans, select_representative_frames, FrameDescriptor, KMeans, Selection};
