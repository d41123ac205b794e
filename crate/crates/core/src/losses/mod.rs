mod boxes;
mod matching;
mod terms;

pub use boxes::{giou, iou, BBox};
pub use matching::{hungarian_match, matching_cost, CostWeights, MatchAssignment};
pub use terms::{
    aware_targets, bce, criterion_targets, focal_loss, giou_rows, loss_aware, loss_aware_with, loss_cls_bbox, loss_token,
    match_layer, set_criterion, token_targets, total_loss, AwareTargets, LayerTargets, LossTerms, LossValues, LossWeights, Targets, FOCAL_ALPHA, FOCAL_EPS, FOCAL_GAMMA,
};
