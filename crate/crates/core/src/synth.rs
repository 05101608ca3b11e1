//! Seeded synthetic data generation for self-contained runs.
//!
//! Two dataset shapes are supported. The appointment shape mimics a public
//! scheduling dataset translated into the FHIR-style layout: patients with
//! demographic flags, addresses, observations, and appointments whose no-show
//! status is generated first and then reflected into correlated covariates
//! (SMS reminders, weekend starts, participant counts, and a latent
//! per-patient risk visible through observation values). Generating
//! label-first keeps every configured rate exact in expectation while still
//! giving models a relational signal to find. The hospital shape produces
//! patients with repeat encounters, diagnoses, and in-stay observations for
//! the length-of-stay, readmission, mortality, and diagnosis problems.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Weekday};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least one patient")]
    NoPatients,
    #[error("writing synthetic data: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing synthetic data: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthShape {
    /// Scheduling/no-show layout: 9 resources around `appointment`.
    Appointment,
    /// Admission layout: encounters with stays, diagnoses, observations.
    Hospital,
}

impl std::str::FromStr for SynthShape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "appointment" => Ok(SynthShape::Appointment),
            "hospital" => Ok(SynthShape::Hospital),
            other => Err(format!("unknown shape {other:?} (expected appointment or hospital)")),
        }
    }
}

/// Cohort and label rates; percentages of the generated population.
pub fn default_rates() -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("scholarship".to_owned(), 0.0929),
        ("hypertension".to_owned(), 0.1965),
        ("diabetes".to_owned(), 0.0709),
        ("alcoholism".to_owned(), 0.0242),
        ("noshow".to_owned(), 0.2019),
        ("mortality".to_owned(), 0.10),
    ])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub shape: SynthShape,
    pub patients: usize,
    /// Appointments or encounters, depending on shape.
    pub events: usize,
    pub seed: u64,
    /// Overrides merge over [`default_rates`].
    pub rates: BTreeMap<String, f64>,
}

impl SynthConfig {
    pub fn new(shape: SynthShape, patients: usize, events: usize, seed: u64) -> Self {
        SynthConfig { shape, patients, events, seed, rates: default_rates() }
    }

    fn rate(&self, key: &str) -> f64 {
        self.rates
            .get(key)
            .copied()
            .or_else(|| default_rates().get(key).copied())
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSummary {
    pub schema_path: PathBuf,
    pub row_counts: BTreeMap<String, usize>,
}

pub const APPOINTMENT_SCHEMA: &str = "\
# Scheduling no-show layout: 9 resources around the appointment table.
resources:
  address:
    primary_key: id
    variables:
      id: id
      city: categorical
  patient:
    primary_key: id
    variables:
      id: id
      gender: categorical
      address: foreign_key
      scholarship: boolean
      hypertension: boolean
      diabetes: boolean
      alcoholism: boolean
  appointment:
    primary_key: id
    time_index: created
    variables:
      id: id
      patient: foreign_key
      created: datetime
      start: datetime
      status: categorical
      sms_received: boolean
  participant:
    primary_key: id
    variables:
      id: id
      appointment: foreign_key
  condition:
    primary_key: id
    variables:
      id: id
      patient: foreign_key
      code: categorical
  observation:
    primary_key: id
    variables:
      id: id
      patient: foreign_key
      value: numeric
  practitioner:
    primary_key: id
    variables:
      id: id
  coding:
    primary_key: id
    variables:
      id: id
  identifier:
    primary_key: id
    variables:
      id: id
relations:
  - patient.address -> address.id
  - appointment.patient -> patient.id
  - participant.appointment -> appointment.id
  - condition.patient -> patient.id
  - observation.patient -> patient.id
";

pub const HOSPITAL_SCHEMA: &str = "\
# Admission layout for encounter-anchored problems.
resources:
  patient:
    primary_key: id
    variables:
      id: id
      gender: categorical
      birth_date: datetime
  encounter:
    primary_key: id
    time_index: start
    variables:
      id: id
      patient: foreign_key
      start: datetime
      end: datetime
      status: categorical
      mortality: boolean
  diagnosis:
    primary_key: id
    variables:
      id: id
      encounter: foreign_key
      code: categorical
  observation:
    primary_key: id
    time_index: effective
    variables:
      id: id
      encounter: foreign_key
      effective: datetime
      value: numeric
relations:
  - encounter.patient -> patient.id
  - diagnosis.encounter -> encounter.id
  - observation.encounter -> encounter.id
";

fn fmt_dt(t: NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M:%S").to_string()
}

fn write_csv(
    dir: &Path,
    name: &str,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<usize, SynthError> {
    let mut writer = csv::Writer::from_path(dir.join(format!("{name}.csv")))?;
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(row)?;
    }
    writer.flush()?;
    Ok(rows.len())
}

const CITIES: [&str; 5] = ["center", "east", "north", "south", "west"];
const CONDITION_CODES: [&str; 5] = ["E11", "I10", "J18", "N39", "Z00"];
/// Hospital codes include external-cause prefixes so the code-based
/// mortality labeler has positives to find.
const HOSPITAL_CODES: [&str; 6] = ["E11", "I10", "J18", "N39", "V43", "X61"];

/// Writes one synthetic dataset (schema plus CSVs) into `out_dir`.
pub fn generate(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthSummary, SynthError> {
    if config.patients == 0 {
        return Err(SynthError::NoPatients);
    }
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    match config.shape {
        SynthShape::Appointment => generate_appointments(config, dir),
        SynthShape::Hospital => generate_hospital(config, dir),
    }
}

/// Moves `t` forward by 0..=6 days until its weekend-ness matches `weekend`.
fn align_weekend(mut t: NaiveDateTime, weekend: bool) -> NaiveDateTime {
    for _ in 0..7 {
        let is_weekend = matches!(t.weekday(), Weekday::Sat | Weekday::Sun);
        if is_weekend == weekend {
            return t;
        }
        t += Duration::days(1);
    }
    t
}

fn generate_appointments(config: &SynthConfig, dir: &Path) -> Result<SynthSummary, SynthError> {
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let n = config.patients;

    let n_addresses = (n / 3).max(1);
    let addresses: Vec<Vec<String>> = (0..n_addresses)
        .map(|i| vec![format!("addr{i}"), CITIES[i % CITIES.len()].to_owned()])
        .collect();

    // Latent per-patient risk drives observation values and no-show odds.
    let mut risks: Vec<f64> = Vec::with_capacity(n);
    let mut patients: Vec<Vec<String>> = Vec::with_capacity(n);
    for i in 0..n {
        let risk: f64 = rng.sample(StandardNormal);
        risks.push(risk);
        patients.push(vec![
            format!("p{i}"),
            if rng.gen_bool(0.5) { "F" } else { "M" }.to_owned(),
            format!("addr{}", rng.gen_range(0..n_addresses)),
            rng.gen_bool(config.rate("scholarship")).to_string(),
            rng.gen_bool(config.rate("hypertension")).to_string(),
            rng.gen_bool(config.rate("diabetes")).to_string(),
            rng.gen_bool(config.rate("alcoholism")).to_string(),
        ]);
    }
    let mut by_risk: Vec<usize> = (0..n).collect();
    by_risk.sort_by(|&a, &b| risks[a].total_cmp(&risks[b]).then(a.cmp(&b)));
    let (low_half, high_half) = by_risk.split_at(n / 2);

    let mut observations: Vec<Vec<String>> = Vec::new();
    for (i, &risk) in risks.iter().enumerate() {
        for _ in 0..rng.gen_range(1..=3) {
            let noise: f64 = rng.sample(StandardNormal);
            let value = 50.0 + 20.0 * risk + 5.0 * noise;
            observations.push(vec![
                format!("o{}", observations.len()),
                format!("p{i}"),
                format!("{value:.2}"),
            ]);
        }
    }

    let mut conditions: Vec<Vec<String>> = Vec::new();
    for i in 0..n {
        for _ in 0..rng.gen_range(0..=2) {
            conditions.push(vec![
                format!("c{}", conditions.len()),
                format!("p{i}"),
                CONDITION_CODES[rng.gen_range(0..CONDITION_CODES.len())].to_owned(),
            ]);
        }
    }

    let base = NaiveDate::from_ymd_opt(2016, 1, 4)
        .expect("valid date")
        .and_hms_opt(0, 0, 0)
        .expect("valid time");
    let noshow_rate = config.rate("noshow");
    let mut appointments: Vec<Vec<String>> = Vec::with_capacity(config.events);
    let mut participants: Vec<Vec<String>> = Vec::new();
    for i in 0..config.events {
        let noshow = rng.gen_bool(noshow_rate);
        // No-shows skew toward high-risk patients (and vice versa), so
        // aggregates over the patient's observations carry signal.
        let pick_high = if noshow { rng.gen_bool(0.75) } else { rng.gen_bool(0.25) };
        let half = if pick_high && !high_half.is_empty() { high_half } else { low_half };
        let half = if half.is_empty() { &by_risk[..] } else { half };
        let patient = half[rng.gen_range(0..half.len())];

        let created = base
            + Duration::days(rng.gen_range(0..330))
            + Duration::hours(rng.gen_range(7..18));
        let lead = Duration::days(rng.gen_range(1..=30));
        let weekend = rng.gen_bool(if noshow { 0.45 } else { 0.18 });
        let start = align_weekend(created + lead, weekend);
        let sms = rng.gen_bool(if noshow { 0.20 } else { 0.65 });

        appointments.push(vec![
            format!("a{i}"),
            format!("p{patient}"),
            fmt_dt(created),
            fmt_dt(start),
            if noshow { "noshow" } else { "fulfilled" }.to_owned(),
            sms.to_string(),
        ]);
        let n_participants = if !noshow && rng.gen_bool(0.6) { 2 } else { 1 };
        for _ in 0..n_participants {
            participants.push(vec![format!("pt{}", participants.len()), format!("a{i}")]);
        }
    }

    let five_ids = |prefix: &str| -> Vec<Vec<String>> {
        (0..5).map(|i| vec![format!("{prefix}{i}")]).collect()
    };

    let schema_path = dir.join("schema.yaml");
    std::fs::write(&schema_path, APPOINTMENT_SCHEMA)?;
    let mut row_counts = BTreeMap::new();
    row_counts.insert("address".to_owned(), write_csv(dir, "address", &["id", "city"], &addresses)?);
    row_counts.insert(
        "patient".to_owned(),
        write_csv(
            dir,
            "patient",
            &["id", "gender", "address", "scholarship", "hypertension", "diabetes", "alcoholism"],
            &patients,
        )?,
    );
    row_counts.insert(
        "appointment".to_owned(),
        write_csv(
            dir,
            "appointment",
            &["id", "patient", "created", "start", "status", "sms_received"],
            &appointments,
        )?,
    );
    row_counts.insert(
        "participant".to_owned(),
        write_csv(dir, "participant", &["id", "appointment"], &participants)?,
    );
    row_counts.insert(
        "condition".to_owned(),
        write_csv(dir, "condition", &["id", "patient", "code"], &conditions)?,
    );
    row_counts.insert(
        "observation".to_owned(),
        write_csv(dir, "observation", &["id", "patient", "value"], &observations)?,
    );
    row_counts.insert(
        "practitioner".to_owned(),
        write_csv(dir, "practitioner", &["id"], &five_ids("pr"))?,
    );
    row_counts.insert("coding".to_owned(), write_csv(dir, "coding", &["id"], &five_ids("cd"))?);
    row_counts.insert(
        "identifier".to_owned(),
        write_csv(dir, "identifier", &["id"], &five_ids("idn"))?,
    );
    Ok(SynthSummary { schema_path, row_counts })
}

fn generate_hospital(config: &SynthConfig, dir: &Path) -> Result<SynthSummary, SynthError> {
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let n = config.patients;
    let mortality_rate = config.rate("mortality");

    let mut patients: Vec<Vec<String>> = Vec::with_capacity(n);
    for i in 0..n {
        let birth = NaiveDate::from_ymd_opt(1940 + rng.gen_range(0..65), 1, 1)
            .expect("valid date")
            .and_hms_opt(0, 0, 0)
            .expect("valid time")
            + Duration::days(rng.gen_range(0..365));
        patients.push(vec![
            format!("p{i}"),
            if rng.gen_bool(0.5) { "F" } else { "M" }.to_owned(),
            fmt_dt(birth),
        ]);
    }

    let base = NaiveDate::from_ymd_opt(2019, 1, 1)
        .expect("valid date")
        .and_hms_opt(8, 0, 0)
        .expect("valid time");
    let mut encounters: Vec<Vec<String>> = Vec::with_capacity(config.events);
    let mut diagnoses: Vec<Vec<String>> = Vec::new();
    let mut observations: Vec<Vec<String>> = Vec::new();
    let mut patient_cursor = 0usize;
    let mut last_end: Vec<Option<NaiveDateTime>> = vec![None; n];
    while encounters.len() < config.events {
        let patient = patient_cursor % n;
        patient_cursor += 1;
        for _ in 0..rng.gen_range(1..=3) {
            if encounters.len() >= config.events {
                break;
            }
            let start = match last_end[patient] {
                // Roughly a third of repeat stays begin inside the 30-day
                // readmission window.
                Some(end) => {
                    let gap = if rng.gen_bool(0.35) {
                        rng.gen_range(2..=28)
                    } else {
                        rng.gen_range(35..=150)
                    };
                    end + Duration::days(gap) + Duration::hours(rng.gen_range(0..12))
                }
                None => base + Duration::days(rng.gen_range(0..200)),
            };
            // Quarter of stays run past the 7-day classification threshold.
            let stay_days = if rng.gen_bool(0.25) {
                rng.gen_range(8..=14)
            } else {
                rng.gen_range(1..=7)
            };
            let stay = Duration::days(stay_days) + Duration::hours(rng.gen_range(1..=12));
            let end = start + stay;
            last_end[patient] = Some(end);
            let eid = format!("e{}", encounters.len());
            encounters.push(vec![
                eid.clone(),
                format!("p{patient}"),
                fmt_dt(start),
                fmt_dt(end),
                "finished".to_owned(),
                rng.gen_bool(mortality_rate).to_string(),
            ]);
            for _ in 0..rng.gen_range(1..=2) {
                diagnoses.push(vec![
                    format!("d{}", diagnoses.len()),
                    eid.clone(),
                    HOSPITAL_CODES[rng.gen_range(0..HOSPITAL_CODES.len())].to_owned(),
                ]);
            }
            for _ in 0..rng.gen_range(1..=3) {
                let offset_hours = rng.gen_range(1..=(stay_days * 24).max(2));
                let noise: f64 = rng.sample(StandardNormal);
                let value = 10.0 * stay_days as f64 + 3.0 * noise;
                observations.push(vec![
                    format!("o{}", observations.len()),
                    eid.clone(),
                    fmt_dt(start + Duration::hours(offset_hours)),
                    format!("{value:.2}"),
                ]);
            }
        }
    }

    let schema_path = dir.join("schema.yaml");
    std::fs::write(&schema_path, HOSPITAL_SCHEMA)?;
    let mut row_counts = BTreeMap::new();
    row_counts.insert(
        "patient".to_owned(),
        write_csv(dir, "patient", &["id", "gender", "birth_date"], &patients)?,
    );
    row_counts.insert(
        "encounter".to_owned(),
        write_csv(
            dir,
            "encounter",
            &["id", "patient", "start", "end", "status", "mortality"],
            &encounters,
        )?,
    );
    row_counts.insert(
        "diagnosis".to_owned(),
        write_csv(dir, "diagnosis", &["id", "encounter", "code"], &diagnoses)?,
    );
    row_counts.insert(
        "observation".to_owned(),
        write_csv(dir, "observation", &["id", "encounter", "effective", "value"], &observations)?,
    );
    Ok(SynthSummary { schema_path, row_counts })
}
