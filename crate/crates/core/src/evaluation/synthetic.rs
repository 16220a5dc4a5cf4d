use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EvalError;
use crate::recommender::{Ad, Device, ImpressionEvent, TimeOfDay};

/// Parameters of the planted-interest click simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub users: usize,
    pub ads: usize,
    pub categories: Vec<String>,
    /// Distinct categories each user is interested in, drawn uniformly.
    pub interests_per_user: usize,
    /// Probability that a logged impression is drawn from the user's interest
    /// categories rather than from the whole catalog.
    pub interest_exposure: f64,
    pub impressions_per_user: usize,
    pub base_click_rate: f64,
    /// Click-probability multiplier when the ad's category is an interest.
    pub affinity_lift: f64,
    /// Probability of a conversion given a click.
    pub conversion_rate: f64,
    /// Fraction of each label class held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
}

pub const DEFAULT_CATEGORIES: [&str; 8] =
    ["Electronics", "Health & Fitness", "Travel", "Entertainment", "Home & Living", "Finance", "Education", "Fashion"];

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 200,
            ads: 50,
            categories: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            interests_per_user: 2,
            interest_exposure: 0.5,
            impressions_per_user: 40,
            base_click_rate: 0.3,
            affinity_lift: 3.0,
            conversion_rate: 0.3,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        let fail = |m: String| Err(EvalError::InvalidSpec(m));
        if self.users == 0 || self.ads == 0 {
            return fail("user and ad counts must be positive".into());
        }
        if self.categories.is_empty() {
            return fail("at least one category is required".into());
        }
        let unique: BTreeSet<&String> = self.categories.iter().collect();
        if unique.len() != self.categories.len() {
            return fail("categories must be distinct".into());
        }
        if self.interests_per_user == 0 || self.interests_per_user > self.categories.len() {
            return fail(format!("interests_per_user must be in 1..={}", self.categories.len()));
        }
        for (name, p) in [
            ("interest_exposure", self.interest_exposure),
            ("base_click_rate", self.base_click_rate),
            ("conversion_rate", self.conversion_rate),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if !(self.affinity_lift >= 1.0) || !self.affinity_lift.is_finite() {
            return fail(format!("affinity_lift must be >= 1, got {}", self.affinity_lift));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The generator's user: identity, device and planted interests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticUser {
    pub user_id: String,
    pub device: Device,
    pub interests: Vec<String>,
}

/// Planted click model used to simulate outcomes of recommended ads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub base_click_rate: f64,
    pub affinity_lift: f64,
    pub conversion_rate: f64,
    pub interests: BTreeMap<String, BTreeSet<String>>,
}

impl GroundTruth {
    pub fn is_interest(&self, user_id: &str, category: &str) -> bool {
        self.interests.get(user_id).is_some_and(|s| s.contains(category))
    }

    /// `min(1, base × lift)` for interest categories, `base` otherwise.
    pub fn click_probability(&self, user_id: &str, category: &str) -> f64 {
        let lift = if self.is_interest(user_id, category) { self.affinity_lift } else { 1.0 };
        (self.base_click_rate * lift).min(1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub users: Vec<SyntheticUser>,
    pub catalog: Vec<Ad>,
    pub train: Vec<ImpressionEvent>,
    pub test: Vec<ImpressionEvent>,
    pub truth: GroundTruth,
}

const KEYWORDS: [(&str, &str, [&str; 5]); 8] = [
    ("Electronics", "gadget", ["smartphone", "laptop", "headphones", "tablet", "camera"]),
    ("Health & Fitness", "wellness", ["fitness tracker", "yoga mat", "protein", "gym membership", "running shoes"]),
    ("Travel", "getaway", ["vacation package", "flight", "hotel", "cruise", "city break"]),
    ("Entertainment", "fun", ["streaming service", "concert tickets", "movie pass", "video game", "music subscription"]),
    ("Home & Living", "cozy", ["home appliances", "sofa", "kitchen set", "bedding", "smart lamp"]),
    ("Finance", "money", ["car insurance", "credit card", "savings account", "investment app", "loan"]),
    ("Education", "learning", ["online learning", "language course", "coding bootcamp", "ebook bundle", "tutoring"]),
    ("Fashion", "style", ["sneakers", "jacket", "handbag", "sunglasses", "watch"]),
];

const OFFERS: [&str; 6] = ["promotion", "discount", "sale", "deal", "offer", "bundle"];

/// Theme word and product keywords of a category.
fn vocabulary_for(category: &str) -> (String, Vec<String>) {
    match KEYWORDS.iter().find(|(c, _, _)| *c == category) {
        Some((_, theme, kws)) => (theme.to_string(), kws.iter().map(|s| s.to_string()).collect()),
        None => {
            let base = category.to_lowercase();
            (format!("{base} picks"), (1..=5).map(|i| format!("{base} item{i}")).collect())
        }
    }
}

/// First timestamp of the simulated log (2023-11-14T22:13:20Z).
const START_TS: i64 = 1_700_000_000;

/// Simulates a catalog, users with planted interests and an impression log,
/// then splits the log into train/test stratified by click label. The same
/// spec always yields the same data.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData, EvalError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_cat = spec.categories.len();

    let catalog: Vec<Ad> = (0..spec.ads)
        .map(|i| {
            let category = &spec.categories[i % n_cat];
            let (theme, kws) = vocabulary_for(category);
            let keyword = &kws[(i / n_cat) % kws.len()];
            let offer = OFFERS[rng.random_range(0..OFFERS.len())];
            let copy = format!("{category} {theme} {keyword} {offer}");
            Ad { ad_id: format!("A{:03}", i + 1), copy, category: category.clone() }
        })
        .collect();
    let mut by_category: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, ad) in catalog.iter().enumerate() {
        by_category.entry(&ad.category).or_default().push(i);
    }

    let mut users = Vec::with_capacity(spec.users);
    let mut interests = BTreeMap::new();
    for u in 0..spec.users {
        let mut picked: Vec<String> =
            rand::seq::index::sample(&mut rng, n_cat, spec.interests_per_user).iter().map(|i| spec.categories[i].clone()).collect();
        picked.sort();
        let user = SyntheticUser {
            user_id: format!("U{:04}", u + 1),
            device: *Device::ALL.choose(&mut rng).expect("devices"),
            interests: picked,
        };
        interests.insert(user.user_id.clone(), user.interests.iter().cloned().collect());
        users.push(user);
    }
    let truth = GroundTruth {
        base_click_rate: spec.base_click_rate,
        affinity_lift: spec.affinity_lift,
        conversion_rate: spec.conversion_rate,
        interests,
    };

    let mut log = Vec::with_capacity(spec.users * spec.impressions_per_user);
    for user in &users {
        let pool: Vec<usize> =
            user.interests.iter().flat_map(|c| by_category.get(c.as_str()).cloned().unwrap_or_default()).collect();
        let mut ts = START_TS + rng.random_range(0..86_400);
        for _ in 0..spec.impressions_per_user {
            ts += rng.random_range(1_800..4 * 3_600);
            let ad = if !pool.is_empty() && rng.random_bool(spec.interest_exposure) {
                &catalog[*pool.choose(&mut rng).expect("pool")]
            } else {
                catalog.choose(&mut rng).expect("catalog")
            };
            let clicked = rng.random_bool(truth.click_probability(&user.user_id, &ad.category));
            let converted = clicked && rng.random_bool(spec.conversion_rate);
            log.push(ImpressionEvent {
                user_id: user.user_id.clone(),
                ad_id: ad.ad_id.clone(),
                ts,
                clicked,
                converted,
                ad_category: ad.category.clone(),
                device: user.device,
                time_of_day: TimeOfDay::from_timestamp(ts),
            });
        }
    }

    let (train, test) = stratified_split(log, spec.test_fraction, &mut rng);
    Ok(SyntheticData { users, catalog, train, test, truth })
}

/// Holds out `fraction` of the clicked and of the unclicked events
/// separately; both halves keep the original event order.
pub fn stratified_split<R: Rng + ?Sized>(
    log: Vec<ImpressionEvent>,
    fraction: f64,
    rng: &mut R,
) -> (Vec<ImpressionEvent>, Vec<ImpressionEvent>) {
    let mut held_out = vec![false; log.len()];
    for label in [true, false] {
        let mut idx: Vec<usize> = (0..log.len()).filter(|&i| log[i].clicked == label).collect();
        idx.shuffle(rng);
        let n = (idx.len() as f64 * fraction).round() as usize;
        for &i in &idx[..n] {
            held_out[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (e, h) in log.into_iter().zip(held_out) {
        if h {
            test.push(e);
        } else {
            train.push(e);
        }
    }
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(lift: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec { affinity_lift: lift, base_click_rate: 0.05, seed, ..SyntheticSpec::default() }
    }

    /// Empirical (clicks, impressions) on matched and unmatched events.
    fn matched_rates(data: &SyntheticData) -> ((u32, u32), (u32, u32)) {
        let mut m = (0, 0);
        let mut u = (0, 0);
        for e in data.train.iter().chain(&data.test) {
            let slot = if data.truth.is_interest(&e.user_id, &e.ad_category) { &mut m } else { &mut u };
            slot.0 += u32::from(e.clicked);
            slot.1 += 1;
        }
        (m, u)
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(generate(&spec(3.0, 7)).unwrap(), generate(&spec(3.0, 7)).unwrap());
        assert_ne!(generate(&spec(3.0, 7)).unwrap().train, generate(&spec(3.0, 8)).unwrap().train);
    }

    #[test]
    fn lift_three_triples_matched_ctr() {
        let s = SyntheticSpec { users: 1000, ..spec(3.0, 1) };
        let ((mc, mn), _) = matched_rates(&generate(&s).unwrap());
        let p = f64::from(mc) / f64::from(mn);
        let sigma = (0.15 * 0.85 / f64::from(mn)).sqrt();
        assert!((p - 0.15).abs() < 3.0 * sigma, "matched CTR {p}, n {mn}");
    }

    #[test]
    fn lift_one_has_no_planted_structure() {
        let s = SyntheticSpec { users: 1000, ..spec(1.0, 2) };
        let ((mc, mn), (uc, un)) = matched_rates(&generate(&s).unwrap());
        let (pm, pu) = (f64::from(mc) / f64::from(mn), f64::from(uc) / f64::from(un));
        let pooled = f64::from(mc + uc) / f64::from(mn + un);
        let sigma = (pooled * (1.0 - pooled) * (1.0 / f64::from(mn) + 1.0 / f64::from(un))).sqrt();
        assert!((pm - pu).abs() < 2.0 * sigma, "matched {pm} vs unmatched {pu}");
    }

    #[test]
    fn conversions_imply_clicks_and_split_is_stratified() {
        let data = generate(&spec(3.0, 3)).unwrap();
        assert!(data.train.iter().chain(&data.test).all(|e| !e.converted || e.clicked));
        let clicks = |v: &[ImpressionEvent]| v.iter().filter(|e| e.clicked).count() as f64;
        let total = (data.train.len() + data.test.len()) as f64;
        assert!((data.test.len() as f64 / total - 0.2).abs() < 0.01);
        let test_click_share = clicks(&data.test) / (clicks(&data.test) + clicks(&data.train));
        assert!((test_click_share - 0.2).abs() < 0.01);
    }

    #[test]
    fn ad_copy_mentions_category() {
        let data = generate(&spec(3.0, 4)).unwrap();
        for ad in &data.catalog {
            assert!(ad.copy.starts_with(&ad.category), "{ad:?}");
        }
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        assert!(generate(&SyntheticSpec { users: 0, ..SyntheticSpec::default() }).is_err());
        assert!(generate(&SyntheticSpec { ads: 0, ..SyntheticSpec::default() }).is_err());
        assert!(generate(&SyntheticSpec { affinity_lift: 0.5, ..SyntheticSpec::default() }).is_err());
        assert!(generate(&SyntheticSpec { base_click_rate: 1.5, ..SyntheticSpec::default() }).is_err());
    }
}
