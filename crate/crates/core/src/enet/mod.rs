//! The ENet segmentation network and the three-net fused pipeline.

pub mod blocks;
pub mod boundary;
pub mod layers;
pub mod model;

pub use boundary::{derive_boundary_target, dilate};
pub use blocks::{Bottleneck, BottleneckSpec, Variant};
pub use layers::{Named, NamedMut, TensorKind};
pub use model::{build_enet, build_enet_with_dropout, required_padding, Enet, EnetCache, Role, Widths, LAYER_COUNT, SPATIAL_FACTOR};
pub mod pipeline;
pub use pipeline::{fusion_input, infer_any_size, network_input, FusedMaps, FusedPipeline, InputChannel};
