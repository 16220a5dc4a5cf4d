use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AdModel, CatalogIndex, RecommenderError, UserProfile};
use crate::numerics::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TagConfig {
    /// Number of categories kept.
    pub k: usize,
    /// Weight of the model's mean predicted CTR; the empirical click rate gets `1 - blend`.
    pub blend: f64,
    /// Pseudo-impressions at the user's overall click rate added to each
    /// category's counts before taking its rate.
    pub prior_strength: f64,
}

impl Default for TagConfig {
    fn default() -> Self {
        Self { k: 3, blend: 0.5, prior_strength: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserTag {
    pub category: String,
    pub weight: f64,
}

/// A user's top categories, heaviest first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UserTagSet {
    tags: Vec<UserTag>,
}

impl UserTagSet {
    pub fn tags(&self) -> &[UserTag] {
        &self.tags
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn contains(&self, category: &str) -> bool {
        self.tags.iter().any(|t| t.category == category)
    }

    /// Weight of `category`, 0 if it is not a tag.
    pub fn weight(&self, category: &str) -> f64 {
        self.tags.iter().find(|t| t.category == category).map_or(0.0, |t| t.weight)
    }

    pub fn top(&self) -> Option<&UserTag> {
        self.tags.first()
    }
}

/// `(clicks, impressions)` per category over the profile's history.
pub fn category_counts(profile: &UserProfile) -> BTreeMap<&str, (u32, u32)> {
    let mut counts: BTreeMap<&str, (u32, u32)> = BTreeMap::new();
    for e in profile.events() {
        let c = counts.entry(e.ad_category.as_str()).or_default();
        c.0 += u32::from(e.clicked);
        c.1 += 1;
    }
    counts
}

/// Derives the user's tags from their history alone (no data leaves the
/// caller). Per category seen in the history, the weight blends the model's
/// mean predicted CTR over those historical ads with the empirical click
/// rate; the top `k` by weight are kept, ties broken by category name.
pub fn build_user_tags<T: Scalar>(
    profile: &UserProfile,
    model: &AdModel<T>,
    catalog: &CatalogIndex<T>,
    config: &TagConfig,
) -> Result<UserTagSet, RecommenderError> {
    if profile.is_cold() {
        return Err(RecommenderError::EmptyHistory(profile.user_id.clone()));
    }
    let counts = category_counts(profile);
    let (all_clicks, all_imps) = counts.values().fold((0, 0), |a, c| (a.0 + c.0, a.1 + c.1));
    let overall = f64::from(all_clicks) / f64::from(all_imps);
    let a = config.prior_strength.max(0.0);
    let mut tags = Vec::with_capacity(counts.len());
    for (&category, &(clicks, imps)) in &counts {
        let empirical = (f64::from(clicks) + a * overall) / (f64::from(imps) + a);
        let mut predicted = Vec::new();
        for e in profile.events().iter().filter(|e| e.ad_category == category) {
            if let Some((_, emb)) = catalog.get(&e.ad_id) {
                let f = model.features(e.device, e.time_of_day, category, empirical);
                predicted.push(model.predict(emb, &f)?.as_f64());
            }
        }
        let propensity =
            if predicted.is_empty() { empirical } else { predicted.iter().sum::<f64>() / predicted.len() as f64 };
        let weight = (config.blend * propensity + (1.0 - config.blend) * empirical).clamp(0.0, 1.0);
        tags.push(UserTag { category: category.to_string(), weight });
    }
    tags.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.category.cmp(&b.category)));
    tags.truncate(config.k);
    Ok(UserTagSet { tags })
}
