use std::sync::Arc;

use crate::error::{Error, Result};
use crate::registry::{Named, Registry};

/// Which classification heads exist and whose class cost enters matching.
pub trait MatchStrategy: Named + Send + Sync {
    /// Short ablation label, `"1"`, `"2"` or `"3"`.
    fn label(&self) -> &'static str;

    /// The top-left decoder has its own classification head.
    fn separate_class_heads(&self) -> bool;

    fn uses_top_left_class_cost(&self) -> bool;

    fn uses_center_class_cost(&self) -> bool {
        true
    }
}

/// Strategy (1): per-decoder heads, both class costs.
#[derive(Debug, Default, Clone, Copy)]
pub struct SeparateHeadsBothCosts;

/// Strategy (2): shared head, both class costs.
#[derive(Debug, Default, Clone, Copy)]
pub struct SharedHeadBothCosts;

/// Strategy (3): shared head, center class cost only.
#[derive(Debug, Default, Clone, Copy)]
pub struct SharedHeadCenterCost;

macro_rules! strategy {
    ($ty:ty, $name:literal, $label:literal, $separate:expr, $tl_cost:expr) => {
        impl Named for $ty {
            fn name(&self) -> &'static str {
                $name
            }
        }

        impl MatchStrategy for $ty {
            fn label(&self) -> &'static str {
                $label
            }
            fn separate_class_heads(&self) -> bool {
                $separate
            }
            fn uses_top_left_class_cost(&self) -> bool {
                $tl_cost
            }
        }
    };
}

strategy!(SeparateHeadsBothCosts, "separate_heads_both_costs", "1", true, true);
strategy!(SharedHeadBothCosts, "shared_head_both_costs", "2", false, true);
strategy!(SharedHeadCenterCost, "shared_head_center_cost", "3", false, false);

pub fn match_strategies() -> Registry<dyn MatchStrategy> {
    let mut reg: Registry<dyn MatchStrategy> = Registry::new("match strategy");
    reg.register(Arc::new(SeparateHeadsBothCosts))
        .register(Arc::new(SharedHeadBothCosts))
        .register(Arc::new(SharedHeadCenterCost));
    reg
}

/// Looks a strategy up by registry name or by its ablation label.
pub fn resolve_match_strategy(key: &str) -> Result<Arc<dyn MatchStrategy>> {
    let reg = match_strategies();
    if let Ok(s) = reg.get(key) {
        return Ok(s);
    }
    let found = reg.names().filter_map(|n| reg.get(n).ok()).find(|s| s.label() == key);
    found.ok_or_else(|| Error::unknown("match strategy", key, ["1", "2", "3"].into_iter().chain(reg.names())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_names_resolve_to_same_strategy() {
        for (label, name) in [("1", "separate_heads_both_costs"), ("2", "shared_head_both_costs"), ("3", "shared_head_center_cost")] {
            assert_eq!(resolve_match_strategy(label).unwrap().name(), name);
            assert_eq!(resolve_match_strategy(name).unwrap().label(), label);
        }
        assert!(resolve_match_strategy("4").is_err());
    }

    #[test]
    fn flags() {
        let s1 = resolve_match_strategy("1").unwrap();
        assert!(s1.separate_class_heads() && s1.uses_top_left_class_cost());
        let s3 = resolve_match_strategy("3").unwrap();
        assert!(!s3.separate_class_heads() && !s3.uses_top_left_class_cost() && s3.uses_center_class_cost());
    }
}
