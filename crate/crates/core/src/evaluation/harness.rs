use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baselines::{derive_seed, recommend_content, recommend_random, AlsModel};
use super::metrics::auc;
use super::synthetic::{GroundTruth, SyntheticData};
use super::EvalError;
use crate::numerics::Scalar;
use crate::recommender::{
    affinity, category_counts, recommend, sort_scored, Ad, AdModel, CatalogIndex, ImpressionEvent, Scored, TagConfig, UserProfile,
};

/// A system under evaluation.
pub trait Recommender: Sync {
    fn name(&self) -> &str;

    fn recommend(&self, profile: &UserProfile, k: usize) -> Result<Vec<Scored>, EvalError>;

    /// Predicted click probability of `ad` for this user, if the system
    /// produces one.
    fn score(&self, _profile: &UserProfile, _ad: &Ad) -> Result<Option<f64>, EvalError> {
        Ok(None)
    }
}

pub struct RandomSystem {
    pub catalog: Vec<Ad>,
    pub seed: u64,
}

impl Recommender for RandomSystem {
    fn name(&self) -> &str {
        "Random"
    }

    fn recommend(&self, profile: &UserProfile, k: usize) -> Result<Vec<Scored>, EvalError> {
        recommend_random(profile, &self.catalog, k, self.seed)
    }
}

pub struct ContentSystem<'a, T> {
    pub index: &'a CatalogIndex<T>,
    pub seed: u64,
}

impl<T: Scalar> Recommender for ContentSystem<'_, T> {
    fn name(&self) -> &str {
        "Content-based"
    }

    fn recommend(&self, profile: &UserProfile, k: usize) -> Result<Vec<Scored>, EvalError> {
        recommend_content(profile, self.index, k, self.seed)
    }
}

pub struct CfSystem {
    pub als: AlsModel,
    pub catalog: Vec<Ad>,
}

impl Recommender for CfSystem {
    fn name(&self) -> &str {
        "CF"
    }

    fn recommend(&self, profile: &UserProfile, k: usize) -> Result<Vec<Scored>, EvalError> {
        self.als.recommend(profile, &self.catalog, k)
    }
}

/// The trained encoder + click head, ranking within the user's tags.
pub struct ModelSystem<'a, T> {
    pub model: &'a AdModel<T>,
    pub index: &'a CatalogIndex<T>,
    pub tags: TagConfig,
}

impl<T: Scalar> Recommender for ModelSystem<'_, T> {
    fn name(&self) -> &str {
        "Model"
    }

    fn recommend(&self, profile: &UserProfile, k: usize) -> Result<Vec<Scored>, EvalError> {
        Ok(recommend(profile, self.index, self.model, &self.tags, k)?)
    }

    /// Uses the user's empirical click rate in the ad's category as the
    /// affinity feature, as in training.
    fn score(&self, profile: &UserProfile, ad: &Ad) -> Result<Option<f64>, EvalError> {
        let Some((_, emb)) = self.index.get(&ad.ad_id) else {
            return Err(EvalError::UnknownAd(ad.ad_id.clone()));
        };
        let counts = category_counts(profile).get(ad.category.as_str()).copied().unwrap_or_default();
        let affinity = affinity(counts);
        let f = self.model.features(profile.device, profile.time_of_day, &ad.category, affinity);
        Ok(Some(self.model.predict(emb, &f)?.as_f64()))
    }
}

/// Knows the planted click probabilities; an upper bound for the others.
pub struct OracleSystem<'a> {
    pub truth: &'a GroundTruth,
    pub catalog: Vec<Ad>,
}

impl Recommender for OracleSystem<'_> {
    fn name(&self) -> &str {
        "Oracle"
    }

    fn recommend(&self, profile: &UserProfile, k: usize) -> Result<Vec<Scored>, EvalError> {
        if self.catalog.is_empty() {
            return Err(EvalError::EmptyCatalog);
        }
        let mut scored: Vec<Scored> = self
            .catalog
            .iter()
            .map(|ad| Scored { ad_id: ad.ad_id.clone(), score: self.truth.click_probability(&profile.user_id, &ad.category) })
            .collect();
        sort_scored(&mut scored);
        scored.truncate(k);
        Ok(scored)
    }

    fn score(&self, profile: &UserProfile, ad: &Ad) -> Result<Option<f64>, EvalError> {
        Ok(Some(self.truth.click_probability(&profile.user_id, &ad.category)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub system: String,
    pub ctr: f64,
    pub cr: f64,
    pub auc: Option<f64>,
    pub n_impressions: usize,
    pub clicks: usize,
    pub conversions: usize,
    /// Users the system failed on, with the error message.
    pub skipped: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub spec_hash: String,
    pub k: usize,
    pub users: usize,
    pub systems: Vec<SystemReport>,
}

/// Simulated outcome of showing `ad_id` to `user_id`, drawn from a stream
/// keyed by (seed, user, ad) so every system sees the same coin flips.
pub fn simulate_outcome(truth: &GroundTruth, seed: u64, user_id: &str, ad_id: &str, category: &str) -> (bool, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["outcome", user_id, ad_id]));
    let click = rng.random::<f64>() < truth.click_probability(user_id, category);
    let convert = rng.random::<f64>() < truth.conversion_rate;
    (click, click && convert)
}

/// Shows each user their top-`k` from every system and samples outcomes from
/// the planted click model. AUC is computed on the held-out log for systems
/// that score ads.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    systems: &[&dyn Recommender],
    profiles: &[UserProfile],
    catalog: &[Ad],
    truth: &GroundTruth,
    test_log: &[ImpressionEvent],
    k: usize,
    seed: u64,
    spec_hash: &str,
) -> Result<EvalReport, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidSpec("k must be positive".into()));
    }
    if test_log.is_empty() {
        return Err(EvalError::EmptyTestLog);
    }
    let ads: HashMap<&str, &Ad> = catalog.iter().map(|a| (a.ad_id.as_str(), a)).collect();
    let by_user: HashMap<&str, &UserProfile> = profiles.iter().map(|p| (p.user_id.as_str(), p)).collect();
    let mut reports = Vec::with_capacity(systems.len());
    for system in systems {
        let per_user: Vec<Result<(usize, usize, usize), EvalError>> = profiles
            .par_iter()
            .map(|p| {
                let ranked = system.recommend(p, k)?;
                let mut counts = (ranked.len(), 0, 0);
                for s in &ranked {
                    let ad = ads.get(s.ad_id.as_str()).ok_or_else(|| EvalError::UnknownAd(s.ad_id.clone()))?;
                    let (click, convert) = simulate_outcome(truth, seed, &p.user_id, &ad.ad_id, &ad.category);
                    counts.1 += usize::from(click);
                    counts.2 += usize::from(convert);
                }
                Ok(counts)
            })
            .collect();
        let mut r = SystemReport {
            system: system.name().to_string(),
            ctr: 0.0,
            cr: 0.0,
            auc: None,
            n_impressions: 0,
            clicks: 0,
            conversions: 0,
            skipped: Vec::new(),
        };
        for (p, result) in profiles.iter().zip(per_user) {
            match result {
                Ok((n, c, v)) => {
                    r.n_impressions += n;
                    r.clicks += c;
                    r.conversions += v;
                }
                Err(e) => {
                    log::warn!("{} failed on user {}: {e}", r.system, p.user_id);
                    r.skipped.push((p.user_id.clone(), e.to_string()));
                }
            }
        }
        if r.n_impressions > 0 {
            r.ctr = r.clicks as f64 / r.n_impressions as f64;
            r.cr = r.conversions as f64 / r.n_impressions as f64;
        }
        r.auc = held_out_auc(*system, &by_user, &ads, test_log)?;
        reports.push(r);
    }
    Ok(EvalReport { seed, spec_hash: spec_hash.to_string(), k, users: profiles.len(), systems: reports })
}

fn held_out_auc(
    system: &dyn Recommender,
    profiles: &HashMap<&str, &UserProfile>,
    ads: &HashMap<&str, &Ad>,
    test_log: &[ImpressionEvent],
) -> Result<Option<f64>, EvalError> {
    let scores: Vec<Option<f64>> = test_log
        .par_iter()
        .map(|e| {
            let ad = ads.get(e.ad_id.as_str()).ok_or_else(|| EvalError::UnknownAd(e.ad_id.clone()))?;
            let cold;
            let profile = match profiles.get(e.user_id.as_str()) {
                Some(p) => *p,
                None => {
                    cold = UserProfile::cold(e.user_id.clone(), e.device, e.time_of_day);
                    &cold
                }
            };
            system.score(profile, ad)
        })
        .collect::<Result<_, _>>()?;
    let Some(scores) = scores.into_iter().collect::<Option<Vec<f64>>>() else {
        return Ok(None);
    };
    let labels: Vec<bool> = test_log.iter().map(|e| e.clicked).collect();
    Ok(auc(&scores, &labels))
}

impl SyntheticData {
    /// One profile per generated user built from the training log; users
    /// without training events are cold, with their device.
    pub fn profiles(&self) -> Result<Vec<UserProfile>, EvalError> {
        let mut grouped: BTreeMap<&str, Vec<ImpressionEvent>> = BTreeMap::new();
        for e in &self.train {
            grouped.entry(&e.user_id).or_default().push(e.clone());
        }
        self.users
            .iter()
            .map(|u| match grouped.remove(u.user_id.as_str()) {
                Some(events) => Ok(UserProfile::new(u.user_id.clone(), events)?),
                None => Ok(UserProfile::cold(u.user_id.clone(), u.device, crate::recommender::TimeOfDay::Morning)),
            })
            .collect()
    }
}

impl EvalReport {
    pub fn system(&self, name: &str) -> Option<&SystemReport> {
        self.systems.iter().find(|s| s.system == name)
    }

    /// One row per system; AUC is empty where not applicable.
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| EvalError::Io(std::io::Error::other(e));
        w.write_record(["system", "ctr", "cr", "auc", "n_impressions", "clicks", "conversions", "skipped_users", "k", "seed", "spec_hash"])
            .map_err(io)?;
        for s in &self.systems {
            w.write_record([
                s.system.clone(),
                format!("{:.6}", s.ctr),
                format!("{:.6}", s.cr),
                s.auc.map(|a| format!("{a:.6}")).unwrap_or_default(),
                s.n_impressions.to_string(),
                s.clicks.to_string(),
                s.conversions.to_string(),
                s.skipped.len().to_string(),
                self.k.to_string(),
                self.seed.to_string(),
                self.spec_hash.clone(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Percent table: system, CTR, CR.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| System | CTR (%) | CR (%) |\n|---|---:|---:|\n");
        for s in &self.systems {
            let _ = writeln!(out, "| {} | {:.2} | {:.2} |", s.system, 100.0 * s.ctr, 100.0 * s.cr);
        }
        out
    }
}
