use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::EvalError;
use crate::numerics::{solve_spd, Matrix, Scalar};
use crate::recommender::{sort_scored, Ad, CatalogIndex, ImpressionEvent, Scored, UserProfile};

/// Stable 64-bit seed from a base seed and string parts.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Uniform seeded shuffle of the catalog; the user id is folded into the
/// seed. Scores are `1 / rank`.
pub fn recommend_random(profile: &UserProfile, catalog: &[Ad], k: usize, seed: u64) -> Result<Vec<Scored>, EvalError> {
    if catalog.is_empty() {
        return Err(EvalError::EmptyCatalog);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["random", &profile.user_id]));
    let mut order: Vec<&Ad> = catalog.iter().collect();
    order.shuffle(&mut rng);
    Ok(order
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, ad)| Scored { ad_id: ad.ad_id.clone(), score: 1.0 / (i + 1) as f64 })
        .collect())
}

/// Mean embedding of the ads the user clicked, or `None` without clicks on
/// catalog ads.
pub fn user_content_vector<T: Scalar>(profile: &UserProfile, catalog: &CatalogIndex<T>) -> Option<Vec<f64>> {
    let mut sum: Option<Vec<f64>> = None;
    let mut n = 0usize;
    for e in profile.events().iter().filter(|e| e.clicked) {
        if let Some((_, emb)) = catalog.get(&e.ad_id) {
            let v = emb.vector().data();
            let acc = sum.get_or_insert_with(|| vec![0.0; v.len()]);
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x.as_f64();
            }
            n += 1;
        }
    }
    sum.map(|s| s.into_iter().map(|x| x / n as f64).collect())
}

/// Ranks the catalog by cosine similarity between each ad embedding and the
/// mean embedding of the user's clicked ads. Users without clicks (or whose
/// mean vector vanishes) get [`recommend_random`] with `seed`.
pub fn recommend_content<T: Scalar>(
    profile: &UserProfile,
    catalog: &CatalogIndex<T>,
    k: usize,
    seed: u64,
) -> Result<Vec<Scored>, EvalError> {
    if catalog.is_empty() {
        return Err(EvalError::EmptyCatalog);
    }
    let user = user_content_vector(profile, catalog);
    let norm = user.as_ref().map_or(0.0, |u| u.iter().map(|x| x * x).sum::<f64>().sqrt());
    let Some(user) = user.filter(|_| norm > 1e-12) else {
        let ads: Vec<Ad> = catalog.entries().iter().map(|(a, _)| a.clone()).collect();
        return recommend_random(profile, &ads, k, seed);
    };
    let mut scored: Vec<Scored> = catalog
        .entries()
        .iter()
        .map(|(ad, emb)| {
            let dot: f64 = user.iter().zip(emb.vector().data()).map(|(u, x)| u * x.as_f64()).sum();
            Scored { ad_id: ad.ad_id.clone(), score: dot / norm }
        })
        .collect();
    sort_scored(&mut scored);
    scored.truncate(k);
    Ok(scored)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlsConfig {
    pub factors: usize,
    pub lambda: f64,
    pub sweeps: usize,
    pub seed: u64,
}

impl Default for AlsConfig {
    fn default() -> Self {
        Self { factors: 8, lambda: 0.1, sweeps: 15, seed: 0 }
    }
}

/// Observed entries of a user × item matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionMatrix {
    pub users: Vec<String>,
    pub items: Vec<String>,
    /// `(user index, item index, value)`, each pair at most once.
    pub entries: Vec<(usize, usize, f64)>,
}

impl InteractionMatrix {
    /// Click rate of each observed (user, ad) pair in the log.
    pub fn from_log(log: &[ImpressionEvent]) -> Self {
        let mut cells: BTreeMap<(&str, &str), (f64, f64)> = BTreeMap::new();
        for e in log {
            let c = cells.entry((&e.user_id, &e.ad_id)).or_default();
            c.0 += if e.clicked { 1.0 } else { 0.0 };
            c.1 += 1.0;
        }
        let mut users: Vec<String> = cells.keys().map(|(u, _)| u.to_string()).collect();
        users.dedup();
        let mut items: Vec<String> = cells.keys().map(|(_, i)| i.to_string()).collect();
        items.sort();
        items.dedup();
        let ui: HashMap<&str, usize> = users.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
        let ii: HashMap<&str, usize> = items.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
        let entries = cells.iter().map(|((u, i), (c, n))| (ui[u], ii[i], c / n)).collect();
        Self { users, items, entries }
    }
}

/// Explicit-feedback matrix factorization fit by alternating least squares
/// on the observed entries only.
#[derive(Clone, Debug, PartialEq)]
pub struct AlsModel {
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
    pub user_factors: Matrix<f64>,
    pub item_factors: Matrix<f64>,
    /// Objective after initialization, then after each sweep.
    pub objective: Vec<f64>,
    /// Observed click sum per item, used for users without factors.
    popularity: HashMap<String, f64>,
}

fn objective(m: &InteractionMatrix, u: &Matrix<f64>, v: &Matrix<f64>, lambda: f64) -> f64 {
    let fit: f64 = m
        .entries
        .iter()
        .map(|&(i, j, r)| {
            let pred: f64 = u.row(i).iter().zip(v.row(j)).map(|(a, b)| a * b).sum();
            (r - pred).powi(2)
        })
        .sum();
    let reg: f64 = u.data().iter().chain(v.data()).map(|x| x * x).sum();
    fit + lambda * reg
}

/// Solves every row of `target` given the fixed `other` factors:
/// `(Σ o oᵀ + λI) t = Σ r o` over that row's observed entries.
fn solve_side(rows: &[Vec<(usize, f64)>], other: &Matrix<f64>, lambda: f64, target: &mut Matrix<f64>) -> Result<(), EvalError> {
    let f = other.cols();
    for (i, obs) in rows.iter().enumerate() {
        let mut a = Matrix::identity(f).scale(lambda);
        let mut b = Matrix::zeros(f, 1);
        for &(j, r) in obs {
            let o = other.row(j);
            for p in 0..f {
                b.set(p, 0, b.get(p, 0) + r * o[p]);
                for q in 0..f {
                    a.set(p, q, a.get(p, q) + o[p] * o[q]);
                }
            }
        }
        let x = solve_spd(&a, &b)?;
        target.row_mut(i).copy_from_slice(x.data());
    }
    Ok(())
}

impl AlsModel {
    pub fn fit(m: &InteractionMatrix, config: &AlsConfig) -> Result<Self, EvalError> {
        if m.entries.is_empty() {
            return Err(EvalError::EmptyInteractions);
        }
        if config.factors == 0 || !(config.lambda > 0.0) {
            return Err(EvalError::InvalidSpec("ALS needs factors > 0 and lambda > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let mut init = |r: usize| {
            let data = (0..r * config.factors).map(|_| normal.sample(&mut rng)).collect();
            Matrix::from_vec(r, config.factors, data).expect("finite init")
        };
        let mut u = init(m.users.len());
        let mut v = init(m.items.len());
        let mut by_user = vec![Vec::new(); m.users.len()];
        let mut by_item = vec![Vec::new(); m.items.len()];
        for &(i, j, r) in &m.entries {
            by_user[i].push((j, r));
            by_item[j].push((i, r));
        }
        let mut history = vec![objective(m, &u, &v, config.lambda)];
        for _ in 0..config.sweeps {
            solve_side(&by_user, &v, config.lambda, &mut u)?;
            solve_side(&by_item, &u, config.lambda, &mut v)?;
            history.push(objective(m, &u, &v, config.lambda));
        }
        let mut popularity = HashMap::new();
        for &(_, j, r) in &m.entries {
            *popularity.entry(m.items[j].clone()).or_insert(0.0) += r;
        }
        Ok(Self {
            user_index: m.users.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect(),
            item_index: m.items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect(),
            user_factors: u,
            item_factors: v,
            objective: history,
            popularity,
        })
    }

    /// `u · v` for a known user and item.
    pub fn predict(&self, user_id: &str, item_id: &str) -> Option<f64> {
        let i = *self.user_index.get(user_id)?;
        let j = *self.item_index.get(item_id)?;
        Some(self.user_factors.row(i).iter().zip(self.item_factors.row(j)).map(|(a, b)| a * b).sum())
    }

    pub fn knows_user(&self, user_id: &str) -> bool {
        self.user_index.contains_key(user_id)
    }

    /// Ranks the catalog by factor score. Unknown users, and items never
    /// observed, fall back to popularity (observed click mass).
    pub fn recommend(&self, profile: &UserProfile, catalog: &[Ad], k: usize) -> Result<Vec<Scored>, EvalError> {
        if catalog.is_empty() {
            return Err(EvalError::EmptyCatalog);
        }
        let known = self.knows_user(&profile.user_id);
        let mut scored: Vec<Scored> = catalog
            .iter()
            .map(|ad| {
                let score = if known {
                    self.predict(&profile.user_id, &ad.ad_id).unwrap_or(0.0)
                } else {
                    self.popularity.get(&ad.ad_id).copied().unwrap_or(0.0)
                };
                Scored { ad_id: ad.ad_id.clone(), score }
            })
            .collect();
        sort_scored(&mut scored);
        scored.truncate(k);
        Ok(scored)
    }
}
