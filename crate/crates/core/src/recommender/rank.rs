use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{build_user_tags, AdModel, CatalogIndex, RecommenderError, TagConfig, UserProfile, UserTagSet};
use crate::numerics::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub ad_id: String,
    pub score: f64,
}

/// Descending score, ties by ascending ad id.
pub fn sort_scored(items: &mut [Scored]) {
    items.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.ad_id.cmp(&b.ad_id)));
}

/// Tags the user from their history, then ranks with [`recommend_with_tags`].
/// Cold-start profiles rank the whole catalog with a zero affinity feature.
pub fn recommend<T: Scalar>(
    profile: &UserProfile,
    catalog: &CatalogIndex<T>,
    model: &AdModel<T>,
    tag_config: &TagConfig,
    k: usize,
) -> Result<Vec<Scored>, RecommenderError> {
    let tags = if profile.is_cold() { None } else { Some(build_user_tags(profile, model, catalog, tag_config)?) };
    recommend_with_tags(profile, tags.as_ref(), catalog, model, k)
}

/// Candidates are the ads in a tagged category (the whole catalog when no
/// ad matches or there are no tags), scored by predicted CTR.
pub fn recommend_with_tags<T: Scalar>(
    profile: &UserProfile,
    tags: Option<&UserTagSet>,
    catalog: &CatalogIndex<T>,
    model: &AdModel<T>,
    k: usize,
) -> Result<Vec<Scored>, RecommenderError> {
    if catalog.is_empty() {
        return Err(RecommenderError::EmptyCatalog);
    }
    let matching: Vec<_> = match tags {
        Some(t) => catalog.entries().iter().filter(|(ad, _)| t.contains(&ad.category)).collect(),
        None => Vec::new(),
    };
    let candidates: Vec<_> = if matching.is_empty() { catalog.entries().iter().collect() } else { matching };
    let mut scored = candidates
        .into_iter()
        .map(|(ad, emb)| {
            let affinity = tags.map_or(0.0, |t| t.weight(&ad.category));
            let f = model.features(profile.device, profile.time_of_day, &ad.category, affinity);
            Ok(Scored { ad_id: ad.ad_id.clone(), score: model.predict(emb, &f)?.as_f64() })
        })
        .collect::<Result<Vec<_>, RecommenderError>>()?;
    sort_scored(&mut scored);
    scored.truncate(k);
    Ok(scored)
}

/// CSV with header `user_id,rank,ad_id,score`; ranks start at 1 and scores
/// carry six decimals.
pub fn write_rankings_csv<W: Write>(out: W, rankings: &[(String, Vec<Scored>)]) -> Result<(), RecommenderError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["user_id", "rank", "ad_id", "score"]).map_err(csv_err)?;
    for (user, ranked) in rankings {
        for (i, s) in ranked.iter().enumerate() {
            w.write_record([user.as_str(), &(i + 1).to_string(), &s.ad_id, &format!("{:.6}", s.score)])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> RecommenderError {
    RecommenderError::Parse { line: 0, message: e.to_string() }
}
