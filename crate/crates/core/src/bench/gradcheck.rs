use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::data::generate_sample;
use super::train::init_model;
use crate::autodiff::{check_param_gradients, Graph, ParamStore, Var};
use crate::error::Result;

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_CHECK_TOLERANCE
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            writeln!(s, "{:<28} {:>10.3e}  ({} coords, worst {})", g.group, g.max_rel_error, g.checked, g.worst_param).unwrap();
        }
        let verdict = if self.passed() { "ok" } else { "FAILED" };
        writeln!(s, "max relative error {:.3e} (tolerance {GRAD_CHECK_TOLERANCE:e}): {verdict}", self.max_rel_error).unwrap();
        s
    }
}

/// `stage1.block0.attn.q.weight` belongs to group `stage1.block0`.
pub fn param_group(name: &str) -> String {
    name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".")
}

/// Central-difference check of `build` over every parameter tensor,
/// summarized per parameter group.
pub fn grad_check_model<F>(store: &ParamStore, h: f64, coords: usize, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let checks = check_param_gradients(store, h, Some(coords.max(1)), build)?;
    let mut groups: BTreeMap<String, GroupCheck> = BTreeMap::new();
    for c in checks {
        let key = param_group(&c.name);
        let e = groups.entry(key.clone()).or_insert(GroupCheck {
            group: key,
            max_rel_error: 0.0,
            worst_param: c.name.clone(),
            checked: 0,
        });
        e.checked += c.check.checked;
        if c.check.max_rel_error > e.max_rel_error {
            e.max_rel_error = c.check.max_rel_error;
            e.worst_param = c.name;
        }
    }
    let groups: Vec<GroupCheck> = groups.into_values().collect();
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { groups, max_rel_error })
}

/// Checks the full training loss of the configured model on one seeded
/// synthetic image, with the criterion's constants frozen.
pub fn grad_check_config(cfg: &RunConfig) -> Result<GradCheckReport> {
    cfg.validate()?;
    let (detector, store) = init_model(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed());
    let sample = generate_sample(cfg.model.backbone.image_size, &mut rng);
    let targets = sample.targets();
    // matching and the detached aware targets stay at their base-point values
    let frozen = detector.criterion_targets(&store, &sample.image, &targets)?;
    grad_check_model(&store, cfg.eval.grad_check_step, cfg.eval.grad_check_coords, |g| {
        Ok(detector.loss_with(g, &sample.image, &targets, Some(&frozen))?.0)
    })
}
