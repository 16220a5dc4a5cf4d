use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::RecommenderError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    #[serde(alias = "Mobile")]
    Mobile,
    #[serde(alias = "Desktop")]
    Desktop,
    #[serde(alias = "Laptop")]
    Laptop,
    #[serde(alias = "Tablet")]
    Tablet,
}

impl Device {
    pub const ALL: [Device; 4] = [Device::Mobile, Device::Desktop, Device::Laptop, Device::Tablet];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeOfDay {
    #[serde(alias = "Morning")]
    Morning,
    #[serde(alias = "Afternoon")]
    Afternoon,
    #[serde(alias = "Evening")]
    Evening,
    #[serde(alias = "Night")]
    Night,
}

const SECONDS_PER_DAY: i64 = 86_400;

impl TimeOfDay {
    pub const ALL: [TimeOfDay; 4] = [TimeOfDay::Morning, TimeOfDay::Afternoon, TimeOfDay::Evening, TimeOfDay::Night];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Bucket of a UTC epoch-seconds timestamp: morning 05–12, afternoon
    /// 12–17, evening 17–21, night otherwise.
    pub fn from_timestamp(ts: i64) -> Self {
        match ts.rem_euclid(SECONDS_PER_DAY) / 3600 {
            5..=11 => TimeOfDay::Morning,
            12..=16 => TimeOfDay::Afternoon,
            17..=20 => TimeOfDay::Evening,
            _ => TimeOfDay::Night,
        }
    }

    /// Seconds after midnight at which the bucket starts.
    pub fn start_seconds(self) -> i64 {
        3600 * match self {
            TimeOfDay::Morning => 5,
            TimeOfDay::Afternoon => 12,
            TimeOfDay::Evening => 17,
            TimeOfDay::Night => 21,
        }
    }
}

/// One logged impression of an ad to a user.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpressionEvent {
    pub user_id: String,
    pub ad_id: String,
    pub ts: i64,
    pub clicked: bool,
    pub converted: bool,
    pub ad_category: String,
    pub device: Device,
    pub time_of_day: TimeOfDay,
}

impl ImpressionEvent {
    pub fn validate(&self) -> Result<(), RecommenderError> {
        if self.converted && !self.clicked {
            return Err(RecommenderError::ConversionWithoutClick { user_id: self.user_id.clone(), ad_id: self.ad_id.clone() });
        }
        Ok(())
    }
}

/// An ad in the catalog.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ad {
    pub ad_id: String,
    pub copy: String,
    pub category: String,
}

/// A user's interaction history plus the context of their latest impression.
#[derive(Clone, Debug, PartialEq)]
pub struct UserProfile {
    pub user_id: String,
    events: Vec<ImpressionEvent>,
    pub device: Device,
    pub time_of_day: TimeOfDay,
}

impl UserProfile {
    /// Sorts `events` by (timestamp, ad id). All events must belong to `user_id`.
    pub fn new(user_id: impl Into<String>, mut events: Vec<ImpressionEvent>) -> Result<Self, RecommenderError> {
        let user_id = user_id.into();
        for e in &events {
            e.validate()?;
            if e.user_id != user_id {
                return Err(RecommenderError::ForeignEvent { profile: user_id, event_user: e.user_id.clone() });
            }
        }
        events.sort_by(|a, b| a.ts.cmp(&b.ts).then_with(|| a.ad_id.cmp(&b.ad_id)));
        let (device, time_of_day) = events.last().map_or((Device::Mobile, TimeOfDay::Morning), |e| (e.device, e.time_of_day));
        Ok(Self { user_id, events, device, time_of_day })
    }

    /// A profile without history, with the given context.
    pub fn cold(user_id: impl Into<String>, device: Device, time_of_day: TimeOfDay) -> Self {
        Self { user_id: user_id.into(), events: Vec::new(), device, time_of_day }
    }

    pub fn events(&self) -> &[ImpressionEvent] {
        &self.events
    }

    pub fn is_cold(&self) -> bool {
        self.events.is_empty()
    }
}

/// Groups a log into per-user profiles, keyed and ordered by user id.
pub fn profiles_from_log(events: &[ImpressionEvent]) -> Result<BTreeMap<String, UserProfile>, RecommenderError> {
    let mut grouped: BTreeMap<String, Vec<ImpressionEvent>> = BTreeMap::new();
    for e in events {
        grouped.entry(e.user_id.clone()).or_default().push(e.clone());
    }
    grouped.into_iter().map(|(user, evs)| Ok((user.clone(), UserProfile::new(user, evs)?))).collect()
}

/// Parses one JSON object per line; blank lines are skipped. Rejects unknown
/// fields and conversions without a click.
pub fn read_events_jsonl<R: BufRead>(input: R) -> Result<Vec<ImpressionEvent>, RecommenderError> {
    read_jsonl(input, |e: &ImpressionEvent| e.validate())
}

pub fn write_events_jsonl<W: Write>(out: W, events: &[ImpressionEvent]) -> Result<(), RecommenderError> {
    write_jsonl(out, events)
}

pub fn read_catalog_jsonl<R: BufRead>(input: R) -> Result<Vec<Ad>, RecommenderError> {
    read_jsonl(input, |_: &Ad| Ok(()))
}

pub fn write_catalog_jsonl<W: Write>(out: W, ads: &[Ad]) -> Result<(), RecommenderError> {
    write_jsonl(out, ads)
}

fn read_jsonl<R: BufRead, D: for<'de> Deserialize<'de>>(
    input: R,
    check: impl Fn(&D) -> Result<(), RecommenderError>,
) -> Result<Vec<D>, RecommenderError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: D = serde_json::from_str(&line)
            .map_err(|e| RecommenderError::Parse { line: i + 1, message: e.to_string() })?;
        check(&item).map_err(|e| RecommenderError::Parse { line: i + 1, message: e.to_string() })?;
        out.push(item);
    }
    Ok(out)
}

fn write_jsonl<W: Write, S: Serialize>(mut out: W, items: &[S]) -> Result<(), RecommenderError> {
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| RecommenderError::Parse { line: 0, message: e.to_string() })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
