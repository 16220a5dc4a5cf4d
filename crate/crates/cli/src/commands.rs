use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use adseal::evaluation::{compare, generate, replay as replay_log, Comparison, GroundTruth, SyntheticData, SyntheticSpec, SyntheticUser};
use adseal::privacy::{audit_report, leakage_metrics, run_round, AuditLedger, RoundOptions, Verdict};
use adseal::recommender::{
    profiles_from_log, read_catalog_jsonl, read_events_jsonl, recommend, write_catalog_jsonl, write_events_jsonl,
    write_rankings_csv, Ad, FeatureSchema, ImpressionEvent, UserProfile,
};
use adseal::tokenizer::Vocabulary;
use adseal::{AdModel, CatalogIndex};
use anyhow::{anyhow, Context};
use serde::Serialize;

use crate::artifacts::{sha256_hex, Artifacts};
use crate::config::RunConfig;

pub const SAMPLE_LOG: &str = include_str!("../fixtures/sample_log.jsonl");

/// Process exit status of a failed command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Usage = 1,
    Data = 2,
    Privacy = 3,
}

#[derive(Debug)]
pub struct Failure {
    pub exit: Exit,
    pub error: anyhow::Error,
}

pub type Outcome = Result<(), Failure>;

pub trait OrExit<T> {
    fn or_exit(self, exit: Exit) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, exit: Exit) -> Result<T, Failure> {
        self.map_err(|e| Failure { exit, error: e.into() })
    }
}

fn data<T, E: Into<anyhow::Error>>(r: Result<T, E>) -> Result<T, Failure> {
    r.or_exit(Exit::Data)
}

struct Inputs {
    dir: PathBuf,
    digests: BTreeMap<String, String>,
}

impl Inputs {
    fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf(), digests: BTreeMap::new() }
    }

    fn read(&mut self, name: &str) -> Result<Vec<u8>, Failure> {
        let path = self.dir.join(name);
        let bytes = data(fs::read(&path).with_context(|| format!("reading {}", path.display())))?;
        self.digests.insert(name.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn events(&mut self, name: &str) -> Result<Vec<ImpressionEvent>, Failure> {
        let bytes = self.read(name)?;
        data(read_events_jsonl(bytes.as_slice()).with_context(|| format!("in {name}")))
    }

    fn catalog(&mut self) -> Result<Vec<Ad>, Failure> {
        let bytes = self.read("catalog.jsonl")?;
        data(read_catalog_jsonl(bytes.as_slice()).context("in catalog.jsonl"))
    }

    fn json<D: for<'de> serde::Deserialize<'de>>(&mut self, name: &str) -> Result<D, Failure> {
        let bytes = self.read(name)?;
        data(serde_json::from_slice(&bytes).with_context(|| format!("in {name}")))
    }

    fn synthetic(&mut self) -> Result<(SyntheticData, SyntheticSpec), Failure> {
        let spec: SyntheticSpec = self.json("spec.json")?;
        let truth: GroundTruth = self.json("truth.json")?;
        let users_bytes = self.read("users.jsonl")?;
        let mut users = Vec::new();
        for (i, line) in users_bytes.lines().enumerate() {
            let line = data(line)?;
            if !line.trim().is_empty() {
                let u: SyntheticUser = data(serde_json::from_str(&line).with_context(|| format!("users.jsonl line {}", i + 1)))?;
                users.push(u);
            }
        }
        let catalog = self.catalog()?;
        let train = self.events("train.jsonl")?;
        let test = self.events("test.jsonl")?;
        Ok((SyntheticData { users, catalog, train, test, truth }, spec))
    }

    fn model(&mut self) -> Result<AdModel, Failure> {
        let vocab = data(Vocabulary::read_from(BufReader::new(self.read("vocab.txt")?.as_slice())))?;
        let schema: FeatureSchema = self.json("schema.json")?;
        let ckpt = self.read("model.ckpt")?;
        data(AdModel::read_checkpoint(ckpt.as_slice(), vocab, schema))
    }
}

fn jsonl<S: Serialize>(items: &[S]) -> anyhow::Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn gen(config: &RunConfig) -> Outcome {
    let data_set = data(generate(&config.synthetic))?;
    let mut out = data(Artifacts::new(&config.out))?;
    let mut buf = Vec::new();
    data(write_events_jsonl(&mut buf, &data_set.train))?;
    data(out.write("train.jsonl", &buf))?;
    buf.clear();
    data(write_events_jsonl(&mut buf, &data_set.test))?;
    data(out.write("test.jsonl", &buf))?;
    buf.clear();
    data(write_catalog_jsonl(&mut buf, &data_set.catalog))?;
    data(out.write("catalog.jsonl", &buf))?;
    data(out.write("users.jsonl", &data(jsonl(&data_set.users))?))?;
    data(out.write_json("truth.json", &data_set.truth))?;
    data(out.write_json("spec.json", &config.synthetic))?;
    data(out.finish("gen", config, &BTreeMap::new()))?;
    println!(
        "generated {} users, {} ads, {} train / {} test events in {}",
        data_set.users.len(),
        data_set.catalog.len(),
        data_set.train.len(),
        data_set.test.len(),
        config.out.display()
    );
    Ok(())
}

pub fn train(config: &RunConfig) -> Outcome {
    let mut inputs = Inputs::new(&config.out);
    let catalog = inputs.catalog()?;
    let log = inputs.events("train.jsonl")?;
    let clients: Vec<UserProfile> = data(profiles_from_log(&log))?.into_values().collect();
    let mut model = data(AdModel::for_catalog(&catalog, config.encoder, false, config.seed))?;
    let mode = config.privacy_mode();
    let options = RoundOptions { weighted: config.privacy.weighted, misbehaving: config.privacy.misbehaving.iter().cloned().collect() };
    let mut ledger = AuditLedger::new();
    let mut reports = Vec::new();
    let train_config = config.round_training();
    for round in 0..config.privacy.rounds {
        let report = data(run_round(
            &clients,
            &mode,
            &mut model,
            &catalog,
            &train_config,
            &config.tags,
            &options,
            &mut ledger,
            round,
        ))?;
        log::info!("round {round}: {} contributors, {} aborted", report.contributors.len(), report.aborted.len());
        reports.push(report);
    }

    let mut out = data(Artifacts::new(&config.out))?;
    let mut ckpt = Vec::new();
    data(model.write_checkpoint(&mut ckpt))?;
    data(out.write("model.ckpt", &ckpt))?;
    let mut vocab = Vec::new();
    data(model.vocab.write_to(&mut vocab))?;
    data(out.write("vocab.txt", &vocab))?;
    data(out.write_json("schema.json", &model.schema))?;
    let mut ledger_bytes = Vec::new();
    data(ledger.write_jsonl(&mut ledger_bytes))?;
    data(out.write("ledger.jsonl", &ledger_bytes))?;
    data(out.write_json("rounds.json", &reports))?;
    data(out.finish("train", config, &inputs.digests))?;

    let blocked: Vec<_> = ledger.entries().iter().filter(|e| e.verdict == Verdict::Blocked).collect();
    println!(
        "trained {} rounds over {} clients ({} mode): {} ledger entries, {} blocked",
        config.privacy.rounds,
        clients.len(),
        mode.topology,
        ledger.len(),
        blocked.len()
    );
    if let Some(first) = blocked.first() {
        return Err(Failure {
            exit: Exit::Privacy,
            error: anyhow!("{} blocked upload(s), first: {} from client {}", blocked.len(), first.kind, first.client),
        });
    }
    Ok(())
}

pub fn evaluate(config: &RunConfig) -> Outcome {
    let mut inputs = Inputs::new(&config.out);
    let (data_set, spec) = inputs.synthetic()?;
    let model = inputs.model()?;
    let cmp = Comparison { k: config.k, seed: config.seed, tags: config.tags, als: config.als, oracle: true };
    let report = data(compare(&data_set, &model, &cmp, &spec.digest()))?;

    let (index, _) = CatalogIndex::build(&model, &data_set.catalog);
    let profiles = data(data_set.profiles())?;
    let mut rankings = Vec::with_capacity(profiles.len());
    for p in &profiles {
        if let Ok(r) = recommend(p, &index, &model, &config.tags, config.k) {
            rankings.push((p.user_id.clone(), r));
        }
    }
    let mut rank_csv = Vec::new();
    data(write_rankings_csv(&mut rank_csv, &rankings))?;

    let mut out = data(Artifacts::new(&config.out))?;
    data(out.write("eval.csv", data(report.to_csv())?.as_bytes()))?;
    let md = report.to_markdown();
    data(out.write("eval.md", md.as_bytes()))?;
    data(out.write_json("eval.json", &report))?;
    data(out.write("rankings.csv", &rank_csv))?;
    data(out.finish("evaluate", config, &inputs.digests))?;
    print!("{md}");
    Ok(())
}

#[derive(Serialize)]
struct AuditSummary<'a> {
    system: &'a str,
    mode: adseal::privacy::PrivacyMode,
    replays: usize,
    entries: usize,
    blocked: usize,
    metrics: adseal::privacy::LeakageMetrics,
}

pub fn audit(config: &RunConfig) -> Outcome {
    let mut inputs = Inputs::new(&config.out);
    let bytes = inputs.read("ledger.jsonl")?;
    let ledger = data(AuditLedger::read_jsonl(bytes.as_slice()))?;
    let mode = config.privacy_mode();
    let metrics = leakage_metrics(&ledger, &mode, config.privacy.replays, config.seed);
    let system = format!("Model ({})", mode.topology);
    let md = audit_report(&[(system.clone(), metrics)]);
    let summary = AuditSummary {
        system: &system,
        mode,
        replays: config.privacy.replays,
        entries: ledger.len(),
        blocked: ledger.entries().iter().filter(|e| e.verdict == Verdict::Blocked).count(),
        metrics,
    };
    let mut out = data(Artifacts::new(&config.out))?;
    data(out.write("audit.md", md.as_bytes()))?;
    data(out.write_json("audit.json", &summary))?;
    data(out.finish("audit", config, &inputs.digests))?;
    print!("{md}");
    Ok(())
}

pub fn replay(config: &RunConfig, log: Option<&Path>) -> Outcome {
    let (source, bytes) = match log {
        Some(p) => (p.display().to_string(), data(fs::read(p).with_context(|| format!("reading {}", p.display())))?),
        None => ("bundled:sample_log.jsonl".to_string(), SAMPLE_LOG.as_bytes().to_vec()),
    };
    let events = data(read_events_jsonl(bytes.as_slice()).with_context(|| format!("in {source}")))?;
    let m = replay_log(&events);
    let mut out = data(Artifacts::new(&config.out))?;
    data(out.write_json("replay.json", &m))?;
    let inputs = BTreeMap::from([(source, sha256_hex(&bytes))]);
    data(out.finish("replay", config, &inputs))?;
    println!("Impressions {}", m.impressions);
    println!("CTR {:.2}%", 100.0 * m.ctr);
    println!("CR {:.2}%", 100.0 * m.cr);
    Ok(())
}
