use std::collections::HashMap;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Ad, Device, RecommenderError, TimeOfDay};
use crate::encoder::{
    self, embed_text, AdEmbedding, CatalogError, CheckpointHeader, EncoderConfig, EncoderError, EncoderStack, LayerVars,
};
use crate::numerics::{sigmoid, Matrix, Scalar, Tape, Var};
use crate::tokenizer::{EmbeddingTable, TokenSequence, Vocabulary};

/// Layout of the user/context block appended to the ad embedding:
/// one-hot device, one-hot time-of-day bucket, then one slot per category
/// holding the user's tag weight for the scored ad's category (all other
/// slots zero). `ad_only` drops the block entirely.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub categories: Vec<String>,
    pub ad_only: bool,
}

impl FeatureSchema {
    /// Categories are sorted and deduplicated.
    pub fn new<S: AsRef<str>>(categories: &[S], ad_only: bool) -> Self {
        let mut categories: Vec<String> = categories.iter().map(|c| c.as_ref().to_string()).collect();
        categories.sort();
        categories.dedup();
        Self { categories, ad_only }
    }

    pub fn d_user(&self) -> usize {
        if self.ad_only {
            0
        } else {
            Device::ALL.len() + TimeOfDay::ALL.len() + self.categories.len()
        }
    }

    pub fn category_index(&self, category: &str) -> Option<usize> {
        self.categories.binary_search_by(|c| c.as_str().cmp(category)).ok()
    }

    /// `affinity` is the user's tag weight for `ad_category` (0 when unknown).
    pub fn features<T: Scalar>(&self, device: Device, time: TimeOfDay, ad_category: &str, affinity: f64) -> Vec<T> {
        let mut f = vec![T::zero(); self.d_user()];
        if self.ad_only {
            return f;
        }
        f[device.index()] = T::one();
        f[Device::ALL.len() + time.index()] = T::one();
        if let Some(c) = self.category_index(ad_category) {
            f[Device::ALL.len() + TimeOfDay::ALL.len() + c] = T::lit(affinity);
        }
        f
    }
}

/// Logistic click head over `[ad embedding ‖ user features]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CtrHead<T> {
    /// (d_model + d_user) × 1
    pub w: Matrix<T>,
    /// 1 × 1
    pub b: Matrix<T>,
}

impl<T: Scalar> CtrHead<T> {
    pub fn zeros(d_model: usize, d_user: usize) -> Self {
        Self { w: Matrix::zeros(d_model + d_user, 1), b: Matrix::zeros(1, 1) }
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn bias(&self) -> T {
        self.b.get(0, 0)
    }
}

/// `σ(w · [h_ad ‖ features] + b)`.
pub fn predict_ctr<T: Scalar>(ad: &AdEmbedding<T>, features: &[T], head: &CtrHead<T>) -> Result<T, RecommenderError> {
    let dim = ad.dim() + features.len();
    if dim != head.input_dim() {
        return Err(RecommenderError::DimensionMismatch { expected: head.input_dim(), got: dim });
    }
    let x = ad.vector().data().iter().chain(features);
    let z = x.zip(head.w.data()).map(|(&a, &b)| a * b).sum::<T>() + head.bias();
    Ok(sigmoid(z))
}

/// Token tables, encoder and head trained together, plus the vocabulary and
/// feature layout needed to use them.
#[derive(Clone, Debug, PartialEq)]
pub struct AdModel<T> {
    pub vocab: Vocabulary,
    pub schema: FeatureSchema,
    pub embedding: EmbeddingTable<T>,
    pub stack: EncoderStack<T>,
    pub head: CtrHead<T>,
}

/// Tape handles for every model parameter, in [`AdModel::params`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub tokens: Var,
    pub positions: Var,
    pub layers: Vec<LayerVars>,
    pub head_w: Var,
    pub head_b: Var,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.tokens, self.positions];
        v.extend(self.layers.iter().flat_map(LayerVars::all));
        v.extend([self.head_w, self.head_b]);
        v
    }
}

impl<T: Scalar> AdModel<T> {
    /// Encoder weights from N(0, 0.02²) seeded by `seed`; head starts at zero.
    pub fn init(vocab: Vocabulary, schema: FeatureSchema, config: EncoderConfig, seed: u64) -> Result<Self, RecommenderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = EmbeddingTable::init(vocab.len(), config.max_len, config.d_model, &mut rng);
        let stack = EncoderStack::init(config, &mut rng)?;
        let head = CtrHead::zeros(config.d_model, schema.d_user());
        Ok(Self { vocab, schema, embedding, stack, head })
    }

    /// Vocabulary from the catalog's copy (every word kept) and a schema over
    /// its categories.
    pub fn for_catalog(catalog: &[Ad], config: EncoderConfig, ad_only: bool, seed: u64) -> Result<Self, RecommenderError> {
        if catalog.is_empty() {
            return Err(RecommenderError::EmptyCatalog);
        }
        let copy: Vec<&str> = catalog.iter().map(|a| a.copy.as_str()).collect();
        let vocab = Vocabulary::build(&copy, 1).map_err(EncoderError::from)?;
        let categories: Vec<&str> = catalog.iter().map(|a| a.category.as_str()).collect();
        Self::init(vocab, FeatureSchema::new(&categories, ad_only), config, seed)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.stack.config
    }

    /// Fixed order: token table, position table, per-layer params, head w, head b.
    pub fn params(&self) -> Vec<&Matrix<T>> {
        let mut p = vec![&self.embedding.token_matrix, &self.embedding.position_matrix];
        p.extend(self.stack.params());
        p.extend([&self.head.w, &self.head.b]);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut p = vec![&mut self.embedding.token_matrix, &mut self.embedding.position_matrix];
        p.extend(self.stack.params_mut());
        p.extend([&mut self.head.w, &mut self.head.b]);
        p
    }

    pub fn register(&self, tape: &mut Tape<T>, track: bool) -> ModelVars {
        let mut add = |m: &Matrix<T>| if track { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        let tokens = add(&self.embedding.token_matrix);
        let positions = add(&self.embedding.position_matrix);
        let layers = self.stack.register(tape, track);
        let mut add = |m: &Matrix<T>| if track { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        let head_w = add(&self.head.w);
        let head_b = add(&self.head.b);
        ModelVars { tokens, positions, layers, head_w, head_b }
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        self.vocab.tokenize(text, self.config().max_len)
    }

    /// Records embed → encode for one token sequence; returns the unit [CLS] row.
    pub fn encode_on_tape(&self, tape: &mut Tape<T>, vars: &ModelVars, seq: &TokenSequence) -> Result<Var, RecommenderError> {
        let x = self.embedding.embed_on_tape(tape, vars.tokens, vars.positions, seq).map_err(encoder::EncoderError::from)?;
        Ok(self.stack.forward_on_tape(tape, &vars.layers, x)?.embedding)
    }

    /// Logits (n × 1) for a batch of `(sequence index, features)` rows, where
    /// `encoded` holds one [CLS] row var per distinct sequence.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        encoded: &[Var],
        rows: &[(usize, &[T])],
    ) -> Result<Var, RecommenderError> {
        let stacked = tape.concat_rows(encoded)?;
        let picks: Vec<usize> = rows.iter().map(|(i, _)| *i).collect();
        let mut x = tape.gather_rows(stacked, &picks)?;
        let d_user = self.schema.d_user();
        if d_user > 0 {
            let mut data = Vec::with_capacity(rows.len() * d_user);
            for (_, f) in rows {
                if f.len() != d_user {
                    return Err(RecommenderError::DimensionMismatch { expected: d_user, got: f.len() });
                }
                data.extend_from_slice(f);
            }
            let feats = tape.constant(Matrix::from_vec(rows.len(), d_user, data)?);
            x = tape.concat_cols(x, feats)?;
        }
        let z = tape.matmul(x, vars.head_w)?;
        Ok(tape.add_scalar(z, vars.head_b)?)
    }

    pub fn embed_ad(&self, ad_id: &str, text: &str) -> Result<AdEmbedding<T>, RecommenderError> {
        Ok(embed_text(ad_id, text, &self.vocab, &self.embedding, &self.stack)?)
    }

    pub fn embed_catalog(&self, ads: &[Ad]) -> Vec<Result<AdEmbedding<T>, CatalogError>> {
        encoder::embed_catalog(ads, &self.vocab, &self.embedding, &self.stack)
    }

    pub fn features(&self, device: Device, time: TimeOfDay, ad_category: &str, affinity: f64) -> Vec<T> {
        self.schema.features(device, time, ad_category, affinity)
    }

    pub fn predict(&self, ad: &AdEmbedding<T>, features: &[T]) -> Result<T, RecommenderError> {
        predict_ctr(ad, features, &self.head)
    }

    pub fn checkpoint_header(&self) -> CheckpointHeader {
        CheckpointHeader {
            encoder: *self.config(),
            vocab_size: self.vocab.len(),
            d_user: self.schema.d_user(),
            ad_only: self.schema.ad_only,
        }
    }

    pub fn write_checkpoint<W: Write>(&self, out: W) -> Result<(), RecommenderError> {
        Ok(encoder::write_checkpoint(out, &self.checkpoint_header(), &self.params())?)
    }

    /// Reads parameters; `vocab` and `schema` must match the stored sizes.
    pub fn read_checkpoint<R: Read>(input: R, vocab: Vocabulary, schema: FeatureSchema) -> Result<Self, RecommenderError> {
        let (header, mats) = encoder::read_checkpoint::<T, _>(input)?;
        if header.vocab_size != vocab.len() {
            return Err(RecommenderError::DimensionMismatch { expected: header.vocab_size, got: vocab.len() });
        }
        if header.d_user != schema.d_user() || header.ad_only != schema.ad_only {
            return Err(RecommenderError::DimensionMismatch { expected: header.d_user, got: schema.d_user() });
        }
        let mut model = Self::init(vocab, schema, header.encoder, 0)?;
        for (slot, m) in model.params_mut().into_iter().zip(mats) {
            *slot = m;
        }
        Ok(model)
    }

    /// Element-wise difference `self - base`, in parameter order.
    pub fn delta_from(&self, base: &Self) -> Result<Vec<Matrix<T>>, RecommenderError> {
        self.params().iter().zip(base.params()).map(|(a, b)| Ok(a.sub(b)?)).collect()
    }

    /// Adds `delta` (parameter order) to the parameters.
    pub fn apply_delta(&mut self, delta: &[Matrix<T>]) -> Result<(), RecommenderError> {
        let params = self.params_mut();
        if params.len() != delta.len() {
            return Err(RecommenderError::DimensionMismatch { expected: params.len(), got: delta.len() });
        }
        for (p, d) in params.into_iter().zip(delta) {
            p.add_assign(d)?;
        }
        Ok(())
    }
}

/// Catalog ads with their embeddings, addressable by ad id.
#[derive(Clone, Debug)]
pub struct CatalogIndex<T> {
    entries: Vec<(Ad, AdEmbedding<T>)>,
    by_id: HashMap<String, usize>,
}

impl<T: Scalar> CatalogIndex<T> {
    /// Embeds `ads`; ads that fail are left out and returned alongside.
    pub fn build(model: &AdModel<T>, ads: &[Ad]) -> (Self, Vec<CatalogError>) {
        let mut entries = Vec::with_capacity(ads.len());
        let mut failures = Vec::new();
        for (ad, result) in ads.iter().zip(model.embed_catalog(ads)) {
            match result {
                Ok(e) => entries.push((ad.clone(), e)),
                Err(e) => failures.push(e),
            }
        }
        (Self::from_entries(entries), failures)
    }

    pub fn from_entries(entries: Vec<(Ad, AdEmbedding<T>)>) -> Self {
        let by_id = entries.iter().enumerate().map(|(i, (ad, _))| (ad.ad_id.clone(), i)).collect();
        Self { entries, by_id }
    }

    pub fn entries(&self) -> &[(Ad, AdEmbedding<T>)] {
        &self.entries
    }

    pub fn get(&self, ad_id: &str) -> Option<&(Ad, AdEmbedding<T>)> {
        self.by_id.get(ad_id).map(|&i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64]) -> AdEmbedding<f64> {
        AdEmbedding::new("a", &Matrix::row_vector(v.to_vec())).unwrap()
    }

    #[test]
    fn zero_head_predicts_one_half() {
        let head = CtrHead::<f64>::zeros(3, 2);
        assert_eq!(predict_ctr(&emb(&[1.0, 2.0, 3.0]), &[0.3, -4.0], &head).unwrap(), 0.5);
    }

    #[test]
    fn saturated_bias_predicts_near_one() {
        let mut head = CtrHead::<f64>::zeros(2, 0);
        head.b = Matrix::scalar(50.0);
        let p = predict_ctr(&emb(&[1.0, 0.0]), &[], &head).unwrap();
        assert!((1.0 - 1e-9..=1.0).contains(&p));
    }

    #[test]
    fn matches_straight_line_oracle() {
        let h = [0.6, 0.8];
        let f = [1.0, 0.0, 0.25];
        let w = [0.3, -1.2, 0.7, 2.0, -0.4];
        let b = 0.15;
        let head = CtrHead { w: Matrix::from_vec(5, 1, w.to_vec()).unwrap(), b: Matrix::scalar(b) };
        let z: f64 = h.iter().chain(&f).zip(&w).map(|(x, w)| x * w).sum::<f64>() + b;
        let oracle = 1.0 / (1.0 + (-z).exp());
        let got = predict_ctr(&emb(&h), &f, &head).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let head = CtrHead::<f64>::zeros(2, 3);
        assert!(matches!(
            predict_ctr(&emb(&[1.0, 0.0]), &[1.0], &head),
            Err(RecommenderError::DimensionMismatch { expected: 5, got: 3 })
        ));
    }

    #[test]
    fn feature_layout() {
        let schema = FeatureSchema::new(&["Travel", "Electronics", "Travel"], false);
        assert_eq!(schema.categories, vec!["Electronics", "Travel"]);
        assert_eq!(schema.d_user(), 10);
        let f: Vec<f64> = schema.features(Device::Laptop, TimeOfDay::Night, "Travel", 0.7);
        assert_eq!(f, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.7]);
        let unknown: Vec<f64> = schema.features(Device::Mobile, TimeOfDay::Morning, "Other", 0.7);
        assert_eq!(&unknown[8..], &[0.0, 0.0]);
        assert_eq!(FeatureSchema::new(&["x"], true).d_user(), 0);
    }
}
