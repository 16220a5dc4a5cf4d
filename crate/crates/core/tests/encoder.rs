use adseal::encoder::{attention, embed_catalog, embed_text, AttentionParams, EncoderConfig, EncoderStack};
use adseal::numerics::Matrix;
use adseal::recommender::{Ad, AdModel, FeatureSchema};
use adseal::tokenizer::{EmbeddingTable, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(d: usize, rng: &mut ChaCha8Rng) -> AttentionParams<f64> {
    AttentionParams {
        w_q: Matrix::random_normal(d, d, 1.0, rng),
        w_k: Matrix::random_normal(d, d, 1.0, rng),
        w_v: Matrix::random_normal(d, d, 1.0, rng),
    }
}

fn sample_ads() -> Vec<Ad> {
    include_str!("../../cli/fixtures/sample_catalog.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn parts(ads: &[Ad], d: usize, seed: u64) -> (Vocabulary, EmbeddingTable<f64>, EncoderStack<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let copy: Vec<&str> = ads.iter().map(|a| a.copy.as_str()).collect();
    let vocab = Vocabulary::build(&copy, 1).unwrap();
    let config = EncoderConfig { d_model: d, d_k: d, layers: 2, max_len: 8, ..EncoderConfig::default() };
    let table = EmbeddingTable::init(vocab.len(), config.max_len, d, &mut rng);
    let stack = EncoderStack::init(config, &mut rng).unwrap();
    (vocab, table, stack)
}

#[test]
fn single_token_attends_to_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = params(5, &mut rng);
    let x = Matrix::random_normal(1, 5, 1.0, &mut rng);
    let (h, alpha) = attention(&x, &p, true).unwrap();
    assert_eq!(alpha.data(), &[1.0]);
    assert!(h.max_abs_diff(&x.matmul(&p.w_v).unwrap()) < 1e-12);
}

#[test]
fn identical_rows_get_uniform_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = params(4, &mut rng);
    let row = Matrix::random_normal(1, 4, 1.0, &mut rng);
    let x = Matrix::from_rows(&[row.row(0).to_vec(), row.row(0).to_vec()]).unwrap();
    let (_, alpha) = attention(&x, &p, true).unwrap();
    for a in alpha.data() {
        assert!((a - 0.5).abs() < 1e-12);
    }
}

#[test]
fn scaling_keeps_each_rows_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.random_range(2..6);
        let d = rng.random_range(1..6);
        let p = params(d, &mut rng);
        let x = Matrix::random_normal(n, d, 1.0, &mut rng);
        let (_, scaled) = attention(&x, &p, true).unwrap();
        let (_, raw) = attention(&x, &p, false).unwrap();
        let argmax = |m: &Matrix<f64>, r: usize| {
            m.row(r).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap()
        };
        for r in 0..n {
            assert_eq!(argmax(&scaled, r), argmax(&raw, r));
        }
    }
}

#[test]
fn empty_input_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert!(attention(&Matrix::<f64>::zeros(0, 3), &params(3, &mut rng), true).is_err());
}

#[test]
fn output_is_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let config = EncoderConfig { d_model: 6, d_k: 6, layers: 3, max_len: 8, ..EncoderConfig::default() };
    let stack: EncoderStack<f64> = EncoderStack::init(config, &mut rng).unwrap();
    for n in 1..=8 {
        let v = stack.encode(&Matrix::random_normal(n, 6, 2.0, &mut rng)).unwrap();
        assert_eq!(v.shape(), (1, 6));
        assert!((v.norm() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn empty_stack_normalizes_the_first_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let config = EncoderConfig { d_model: 4, d_k: 4, layers: 0, max_len: 8, ..EncoderConfig::default() };
    let stack: EncoderStack<f64> = EncoderStack::init(config, &mut rng).unwrap();
    let x = Matrix::random_normal(3, 4, 1.0, &mut rng);
    let expected = x.row_matrix(0).l2_normalize(1e-12).unwrap();
    assert!(stack.encode(&x).unwrap().max_abs_diff(&expected) < 1e-15);
}

#[test]
fn mismatched_key_width_is_a_config_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let config = EncoderConfig { d_model: 4, d_k: 2, ..EncoderConfig::default() };
    assert!(EncoderStack::<f64>::init(config, &mut rng).is_err());
}

#[test]
fn identical_copy_gives_identical_embeddings() {
    let ads = sample_ads();
    let (vocab, table, stack) = parts(&ads, 8, 8);
    let a = embed_text("A", "Laptop Discount", &vocab, &table, &stack).unwrap();
    let b = embed_text("B", "Laptop Discount", &vocab, &table, &stack).unwrap();
    assert_eq!(a.vector(), b.vector());
}

#[test]
fn catalog_embedding() {
    let ads = sample_ads();
    let (vocab, table, stack) = parts(&ads, 8, 9);
    assert!(embed_catalog(&[], &vocab, &table, &stack).is_empty());

    let embs: Vec<_> = embed_catalog(&ads, &vocab, &table, &stack).into_iter().map(Result::unwrap).collect();
    assert_eq!(embs.len(), 8);
    for (e, ad) in embs.iter().zip(&ads) {
        assert_eq!(e.ad_id, ad.ad_id);
        assert_eq!(e.dim(), 8);
        assert!((e.vector().norm() - 1.0).abs() < 1e-9);
    }

    let mut dup = ads.clone();
    dup[3].copy = dup[0].copy.clone();
    let embs: Vec<_> = embed_catalog(&dup, &vocab, &table, &stack).into_iter().map(Result::unwrap).collect();
    assert_eq!(embs[0].vector(), embs[3].vector());
    assert_ne!(embs[0].vector(), embs[1].vector());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let ads = sample_ads();
    let config = EncoderConfig { d_model: 8, d_k: 8, layers: 2, max_len: 8, ..EncoderConfig::default() };
    let mut model: AdModel<f64> = AdModel::for_catalog(&ads, config, false, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for p in model.params_mut() {
        *p = Matrix::random_normal(p.rows(), p.cols(), 1.0, &mut rng);
    }
    let mut bytes = Vec::new();
    model.write_checkpoint(&mut bytes).unwrap();
    let back = AdModel::read_checkpoint(bytes.as_slice(), model.vocab.clone(), model.schema.clone()).unwrap();
    assert_eq!(back, model);

    let wrong = FeatureSchema::new(&["Electronics"], false);
    assert!(AdModel::<f64>::read_checkpoint(bytes.as_slice(), model.vocab.clone(), wrong).is_err());
    let mut corrupt = bytes.clone();
    corrupt[0] ^= 0xff;
    assert!(AdModel::<f64>::read_checkpoint(corrupt.as_slice(), model.vocab.clone(), model.schema.clone()).is_err());
    assert!(AdModel::<f64>::read_checkpoint(&bytes[..bytes.len() - 3], model.vocab.clone(), model.schema.clone()).is_err());
}

#[test]
fn single_precision_encoder() {
    let ads = sample_ads();
    let config = EncoderConfig { d_model: 8, d_k: 8, layers: 1, max_len: 8, ..EncoderConfig::default() };
    let model: AdModel<f32> = AdModel::for_catalog(&ads, config, false, 11).unwrap();
    let e = model.embed_ad("A001", &ads[0].copy).unwrap();
    assert!((e.vector().norm() - 1.0).abs() < 1e-5);
}
