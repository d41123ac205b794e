mod feature;
mod pyramid;

pub use feature::{FeatureMap, FeaturePyramid};
pub use pyramid::{
    backbone_forward, extra_scale, patch_embed, Backbone, BackboneOutput, ExtraScale, PatchEmbed, PyramidConfig,
    StageConfig,
};
