//! Dense MLP building blocks with an explicit backbone/head boundary.

pub mod checkpoint;
mod layer;
mod model;

pub use layer::LinearLayer;
pub use model::{
    backward, backward_with_feature_grad, clone_model, copy_backbone, forward_backbone, forward_head, init_params, BackboneCache,
    BackboneNet, ForwardCache, HeadLayer, Scope, SplitModel,
};
