//! From probability maps to instance labels.

pub mod distance;
pub mod maps;
pub mod markers;
pub mod watershed;

pub use distance::{distance_transform, distance_transform_brute, DistanceMap};
pub use maps::{foreground_channel, threshold_prob, BinaryMask, LabelMap};
pub use markers::extract_markers;
pub use watershed::{
    components_from_prob, connected_components, finalize_instances, segment_instances, watershed, watershed_brute, PostConfig,
};
