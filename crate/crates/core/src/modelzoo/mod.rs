//! Heterogeneous model construction: extractors, the `K`-dimension adapter,
//! the classifier head, named groups and client assignment.

mod groups;
mod instance;
mod spec;

pub use groups::{builtin_group, ZooConfig, BUILTIN_GROUPS};
pub use instance::{Binding, Bound, ModelInstance, NamedParam};
pub use spec::{assign_model, auxiliary_spec, Extractor, ModelGroup, ModelSpec, Part};
