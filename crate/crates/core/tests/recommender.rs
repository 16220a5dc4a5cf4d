use adseal::encoder::EncoderConfig;
use adseal::evaluation::{auc, evaluate, generate, train_central, ModelSystem, SyntheticSpec};
use adseal::numerics::Matrix;
use adseal::recommender::{
    build_user_tags, dataset_loss, loss_and_gradients, recommend, train, Ad, AdModel, CatalogIndex, Device,
    ImpressionEvent, TagConfig, TimeOfDay, TrainConfig, TrainingSet, UserProfile,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample_ads() -> Vec<Ad> {
    include_str!("../../cli/fixtures/sample_catalog.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn event(user: &str, ad: &Ad, ts: i64, clicked: bool) -> ImpressionEvent {
    ImpressionEvent {
        user_id: user.into(),
        ad_id: ad.ad_id.clone(),
        ts,
        clicked,
        converted: false,
        ad_category: ad.category.clone(),
        device: Device::Mobile,
        time_of_day: TimeOfDay::from_timestamp(ts),
    }
}

fn small() -> EncoderConfig {
    EncoderConfig { d_model: 8, d_k: 8, layers: 1, max_len: 8, ..EncoderConfig::default() }
}

#[test]
fn single_event_is_memorized() {
    let ads = sample_ads();
    let mut model: AdModel<f64> = AdModel::for_catalog(&ads, small(), false, 1).unwrap();
    let set = TrainingSet::from_log(&model, &[event("U1", &ads[0], 0, true)], &ads).unwrap();
    let config = TrainConfig { epochs: 300, lr: 0.05, batch_size: 1, seed: 1 };
    let report = train(&mut model, &set, &config).unwrap();
    assert!(report.degenerate_labels);
    let mut prev = report.initial_loss;
    for &l in &report.epoch_losses {
        assert!(l <= prev + 1e-12, "loss rose from {prev} to {l}");
        prev = l;
    }
    assert!(report.final_loss() < 0.01, "{}", report.final_loss());
}

#[test]
fn gradients_match_finite_differences() {
    let ads = sample_ads();
    let mut model: AdModel<f64> = AdModel::for_catalog(&ads, small(), false, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for p in model.params_mut() {
        *p = Matrix::random_normal(p.rows(), p.cols(), 0.5, &mut rng);
    }
    let log: Vec<_> = ads.iter().enumerate().map(|(i, a)| event("U1", a, 3_600 * i as i64, i % 3 == 0)).collect();
    let set = TrainingSet::from_log(&model, &log, &ads).unwrap();
    let all: Vec<usize> = (0..set.len()).collect();
    let (_, grads) = loss_and_gradients(&model, &set, &all).unwrap();
    let h = 1e-5;
    let head = model.params().len() - 2;
    for pi in [0, 2, head, head + 1] {
        for k in (0..grads[pi].len()).step_by(7) {
            let mut plus = model.clone();
            plus.params_mut()[pi].data_mut()[k] += h;
            let mut minus = model.clone();
            minus.params_mut()[pi].data_mut()[k] -= h;
            let numeric = (dataset_loss(&plus, &set).unwrap() - dataset_loss(&minus, &set).unwrap()) / (2.0 * h);
            let a = grads[pi].data()[k];
            assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6) <= 1e-4, "param {pi}[{k}]: {a} vs {numeric}");
        }
    }
}

#[test]
fn training_lowers_loss_and_flipped_labels_mirror_auc() {
    let spec = SyntheticSpec { users: 60, ads: 24, seed: 3, ..SyntheticSpec::default() };
    let data = generate(&spec).unwrap();
    let config = TrainConfig { epochs: 10, seed: 3, ..TrainConfig::default() };
    let (model, report) = train_central::<f64>(&data, small(), &config, 3).unwrap();
    assert!(report.final_loss() < report.initial_loss);

    let (index, _) = CatalogIndex::build(&model, &data.catalog);
    let system = ModelSystem { model: &model, index: &index, tags: TagConfig::default() };
    let profiles = data.profiles().unwrap();
    let run = |log: &[ImpressionEvent]| {
        evaluate(&[&system], &profiles, &data.catalog, &data.truth, log, 1, 3, "").unwrap().systems[0].auc.unwrap()
    };
    let original = run(&data.test);
    let flipped: Vec<_> = data.test.iter().map(|e| ImpressionEvent { clicked: !e.clicked, converted: false, ..e.clone() }).collect();
    let mirrored = run(&flipped);
    assert!(original > 0.6, "{original}");
    assert!(mirrored <= 0.5, "{mirrored}");
    assert!((original + mirrored - 1.0).abs() < 1e-12);
}

#[test]
fn electronics_clicker_gets_electronics_tag() {
    let ads = sample_ads();
    let model: AdModel<f64> = AdModel::for_catalog(&ads, small(), false, 4).unwrap();
    let (index, _) = CatalogIndex::build(&model, &ads);
    let log: Vec<_> = ads.iter().enumerate().map(|(i, a)| event("U001", a, 3_600 * i as i64, a.category == "Electronics")).collect();
    let profile = UserProfile::new("U001", log).unwrap();
    let tags = build_user_tags(&profile, &model, &index, &TagConfig::default()).unwrap();
    assert_eq!(tags.tags()[0].category, "Electronics");
    assert!(tags.tags().iter().all(|t| (0.0..=1.0).contains(&t.weight)));
}

#[test]
fn uniform_clicker_gets_flat_tags() {
    let ads = sample_ads();
    let model: AdModel<f64> = AdModel::for_catalog(&ads, small(), false, 5).unwrap();
    let (index, _) = CatalogIndex::build(&model, &ads);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let log: Vec<_> = (0..800).map(|i| event("U9", &ads[i % ads.len()], 600 * i as i64, rng.random_bool(0.5))).collect();
    let profile = UserProfile::new("U9", log).unwrap();
    let tags = build_user_tags(&profile, &model, &index, &TagConfig { k: 8, ..TagConfig::default() }).unwrap();
    let weights: Vec<f64> = tags.tags().iter().map(|t| t.weight).collect();
    let spread = weights.iter().cloned().fold(f64::MIN, f64::max) - weights.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 0.1, "{weights:?}");
}

#[test]
fn one_clicked_event_gives_one_tag() {
    let ads = sample_ads();
    let model: AdModel<f64> = AdModel::for_catalog(&ads, small(), false, 6).unwrap();
    let (index, _) = CatalogIndex::build(&model, &ads);
    let profile = UserProfile::new("U3", vec![event("U3", &ads[2], 0, true)]).unwrap();
    let tags = build_user_tags(&profile, &model, &index, &TagConfig::default()).unwrap();
    assert_eq!(tags.tags().len(), 1);
    assert_eq!(tags.tags()[0].category, "Travel");
    let cold = UserProfile::cold("U4", Device::Laptop, TimeOfDay::Morning);
    assert!(build_user_tags(&cold, &model, &index, &TagConfig::default()).is_err());
}

#[test]
fn single_ad_catalog_is_always_returned() {
    let ads = sample_ads();
    let model: AdModel<f64> = AdModel::for_catalog(&ads, small(), false, 7).unwrap();
    let (index, _) = CatalogIndex::build(&model, &ads[5..6]);
    let profile = UserProfile::new("U1", vec![event("U1", &ads[0], 0, true)]).unwrap();
    let ranked = recommend(&profile, &index, &model, &TagConfig::default(), 3).unwrap();
    assert_eq!(ranked.len(), 1);
    assert_eq!(ranked[0].ad_id, ads[5].ad_id);
}

#[test]
fn ties_are_broken_by_ad_id() {
    let ads = vec![
        Ad { ad_id: "B".into(), copy: "same words".into(), category: "X".into() },
        Ad { ad_id: "A".into(), copy: "same words".into(), category: "X".into() },
    ];
    let model: AdModel<f64> = AdModel::for_catalog(&ads, small(), false, 8).unwrap();
    let (index, _) = CatalogIndex::build(&model, &ads);
    let profile = UserProfile::cold("U1", Device::Tablet, TimeOfDay::Evening);
    let ranked = recommend(&profile, &index, &model, &TagConfig::default(), 2).unwrap();
    assert_eq!(ranked[0].score, ranked[1].score);
    assert_eq!([ranked[0].ad_id.as_str(), ranked[1].ad_id.as_str()], ["A", "B"]);
}

#[test]
fn tech_profile_ranks_electronics_first_on_sample_catalog() {
    let ads = sample_ads();
    let categories: Vec<String> = ads.iter().map(|a| a.category.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut log = Vec::new();
    for u in 0..200 {
        let user = format!("T{u:02}");
        let interest = &categories[rng.random_range(0..categories.len())];
        for j in 0..24 {
            let ad = &ads[rng.random_range(0..ads.len())];
            let p = if &ad.category == interest { 0.9 } else { 0.1 };
            log.push(event(&user, ad, 3_600 * j, rng.random_bool(p)));
        }
    }
    let mut model: AdModel<f64> = AdModel::for_catalog(&ads, small(), false, 9).unwrap();
    let set = TrainingSet::from_log(&model, &log, &ads).unwrap();
    train(&mut model, &set, &TrainConfig { epochs: 40, lr: 3e-3, seed: 9, ..TrainConfig::default() }).unwrap();
    let (index, _) = CatalogIndex::build(&model, &ads);

    let history: Vec<_> = ads
        .iter()
        .cycle()
        .take(3 * ads.len())
        .enumerate()
        .map(|(i, a)| event("U001", a, 3_600 * i as i64, a.category == "Electronics"))
        .collect();
    let profile = UserProfile::new("U001", history).unwrap();
    let ranked = recommend(&profile, &index, &model, &TagConfig::default(), ads.len()).unwrap();
    let top: Vec<&str> = ranked[..2].iter().map(|s| s.ad_id.as_str()).collect();
    assert!(top.contains(&"A001") && top.contains(&"A004"), "{ranked:?}");

    let scores: Vec<f64> = data_scores(&ranked);
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    let labels: Vec<bool> = ranked.iter().map(|s| s.ad_id == "A001" || s.ad_id == "A004").collect();
    assert_eq!(auc(&scores, &labels), Some(1.0));
}

fn data_scores(ranked: &[adseal::recommender::Scored]) -> Vec<f64> {
    ranked.iter().map(|s| s.score).collect()
}
