//! Feature-space size checks for the appointment-style schemas.
//!
//! The depth-2 enumeration over the bundled nine-resource appointment schema
//! is small enough to count by hand, so we pin the exact number here to catch
//! accidental changes to the primitive pools or the traversal rules.  The
//! synthetic-data schema is a superset of the bundled one (it carries the
//! comorbidity flags and the SMS column), so its count is pinned separately.

use std::fs;
use std::path::Path;

use ehrml::assemble::assemble;
use ehrml::featurize::{enumerate_features, AggPrimitive, TransformPrimitive};
use ehrml::problems::{ProblemName, ProblemSpec};
use ehrml::schema::{bundled_appointment_schema, load_schema};
use ehrml::synth::{generate, SynthConfig, SynthShape};

fn write(dir: &Path, name: &str, content: &str) {
    fs::write(dir.join(name), content).unwrap();
}

/// Minimal one-row-per-resource dataset matching the bundled appointment
/// schema.  The enumeration only needs the schema structure, but we go
/// through `assemble` so the test exercises the same path the CLI does.
fn tiny_appointment_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "address.csv", "id,city\na1,Centro\n");
    write(dir.path(), "patient.csv", "id,gender,address\np1,F,a1\n");
    write(
        dir.path(),
        "appointment.csv",
        "id,patient,created,start,status\nv1,p1,2016-01-04T08:00:00,2016-01-06T09:00:00,fulfilled\n",
    );
    write(dir.path(), "participant.csv", "id,appointment\nq1,v1\n");
    write(dir.path(), "condition.csv", "id,patient,code\nc1,p1,I10\n");
    write(dir.path(), "observation.csv", "id,patient,value\no1,p1,98.6\n");
    write(dir.path(), "practitioner.csv", "id\nd1\n");
    write(dir.path(), "coding.csv", "id\nk1\n");
    write(dir.path(), "identifier.csv", "id\nn1\n");
    dir
}

#[test]
fn bundled_appointment_schema_enumerates_57_noshow_features() {
    let dir = tiny_appointment_dir();
    let registry = bundled_appointment_schema();
    let es = assemble(dir.path(), &registry).unwrap();
    let spec = ProblemSpec::predefined(ProblemName::Noshow);
    let defs = enumerate_features(
        &es,
        "appointment",
        &AggPrimitive::ALL,
        &TransformPrimitive::ALL,
        2,
        &spec.excluded_variables(),
    )
    .unwrap();
    assert_eq!(defs.len(), 57, "depth-2 no-show feature space changed size");

    // Spot-check the families we expect: direct transforms on the target's
    // own datetimes, parent lifts through patient, and depth-2 aggregates of
    // sibling appointments.
    let names: Vec<&str> = defs.iter().map(|d| d.name.as_str()).collect();
    assert!(names.contains(&"IS_WEEKEND(start)"));
    assert!(names.contains(&"patient.gender"));
    assert!(names.contains(&"patient.address.city"));
    assert!(names.contains(&"COUNT(participant)"));
    assert!(names.contains(&"patient.MEAN(observation.value)"));
    assert!(names.contains(&"patient.SKEW(appointment.DAY(created))"));
    // The label column and anything derived from it must stay out.
    assert!(names.iter().all(|n| !n.contains("status")));
}

#[test]
fn synthetic_appointment_schema_count_is_stable_and_in_range() {
    let dir = tempfile::tempdir().unwrap();
    let config = SynthConfig::new(SynthShape::Appointment, 30, 60, 1);
    generate(&config, dir.path()).unwrap();
    let registry = load_schema(dir.path().join("schema.yaml")).unwrap();
    let es = assemble(dir.path(), &registry).unwrap();
    let spec = ProblemSpec::predefined(ProblemName::Noshow);
    let defs = enumerate_features(
        &es,
        "appointment",
        &AggPrimitive::ALL,
        &TransformPrimitive::ALL,
        2,
        &spec.excluded_variables(),
    )
    .unwrap();
    // The bundled count plus the four comorbidity flags lifted from patient
    // and the direct sms_received column.
    assert_eq!(defs.len(), 62);
    // A Kaggle-shaped appointment schema is documented to land near 95
    // generated features; stay within a factor of two of that.
    assert!(defs.len() >= 48 && defs.len() <= 190);
}
