//! Procedural multi-view dataset: scenes, renderer, container and pairs.

pub mod container;
pub mod pairs;
pub mod render;
pub mod scene;

pub use container::{build_dataset, object_seed, Dataset, Split, ViewRig};
pub use pairs::{sample_pair, wrap_degrees, RelativePose, ViewPair};
pub use render::{render_view, Camera, RenderedView};
pub use scene::{generate_object, Primitive, PrimitiveKind, SceneSpec};
