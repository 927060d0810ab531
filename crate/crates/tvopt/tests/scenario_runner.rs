//! End-to-end tests of the scenario runner: parsing, validation messages,
//! artifact files, and determinism of reruns.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use tvopt::scenario::{
    load_scenario, run_scenario, run_scenario_with, ExperimentArtifact, ProblemRegistry,
    RunOptions, RunResult, Scenario,
};
use tvopt::TvError;

fn write_scenario(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("scenario.toml");
    fs::write(&path, text).unwrap();
    path
}

fn run_in(dir: &Path, text: &str) -> RunResult {
    let path = write_scenario(dir, text);
    let opts = RunOptions { out_dir: Some(dir.join("out")), ..RunOptions::default() };
    run_scenario(&path, &opts).unwrap()
}

const QUARTIC_HEAD: &str = r#"
seed = 7
[problem]
builtin = "quartic"
params = { b = 5.0 }

[flow]
alpha = 0.3
dt = 1e-3

[[trajectory]]
label = "global"
x_seed = [1.0]
grid = { start = 0.0, stop = 6.3, nodes = 256 }

[[trajectory]]
label = "spurious"
x_seed = [-2.0]
grid = { start = 0.0, stop = 6.3, nodes = 256 }
"#;

#[test]
fn validation_names_the_offending_field() {
    let registry = ProblemRegistry::new();
    let check = |text: &str, needle: &str| {
        let s = Scenario::from_toml_str(text).unwrap();
        let err = s.validate(&registry).unwrap_err();
        match err {
            TvError::ScenarioValidation { field, reason } => assert!(
                field.contains(needle),
                "expected field containing `{needle}`, got `{field}` ({reason})"
            ),
            other => panic!("expected a validation error, got {other}"),
        }
    };

    // Unknown experiment kind.
    check(
        &format!("{QUARTIC_HEAD}\n[[experiment]]\nkind = \"warp\"\nlabel = \"x\"\n"),
        "experiment[0]",
    );
    // Bad inner field type is reported against the experiment entry.
    check(
        &format!(
            "{QUARTIC_HEAD}\n[[experiment]]\nkind = \"simulate\"\nlabel = \"s\"\nx0 = [0.0]\nt1 = \"soon\"\n"
        ),
        "experiment[0]",
    );
    // Wrong dimension.
    check(
        &format!(
            "{QUARTIC_HEAD}\n[[experiment]]\nkind = \"simulate\"\nlabel = \"s\"\nx0 = [0.0, 1.0]\nt1 = 1.0\n"
        ),
        "x0",
    );
    // Undefined trajectory reference.
    check(
        &format!(
            "{QUARTIC_HEAD}\n[[experiment]]\nkind = \"landscape\"\nlabel = \"l\"\nreference = \"ghost\"\nt_list = [0.0]\n[experiment.e_grid]\nlower = [-1.0]\nupper = [1.0]\nnodes = [5]\n"
        ),
        "reference",
    );
    // Experiment window escapes the traced grid.
    check(
        &format!(
            "{QUARTIC_HEAD}\n[[experiment]]\nkind = \"certify\"\nlabel = \"c\"\nh1 = \"spurious\"\nh2 = \"global\"\nt1 = 0.0\nt2 = 9.0\nr = 0.5\nv = 0.04\ntheta = 0.2\n[experiment.region]\nshape = \"box\"\nlower = [-0.1]\nupper = [2.0]\n"
        ),
        "h1",
    );
}

#[test]
fn unknown_toml_keys_are_rejected() {
    let err = Scenario::from_toml_str(&format!("{QUARTIC_HEAD}\nwhatever = 3\n")).unwrap_err();
    assert!(matches!(err, TvError::ScenarioParse(_)));
}

#[test]
fn stochastic_experiments_need_some_seed() {
    let registry = ProblemRegistry::new();
    let text = QUARTIC_HEAD.replace("seed = 7", "");
    let scen = format!(
        "{text}\n[[experiment]]\nkind = \"basin\"\nlabel = \"b\"\nn_inits = 2\nt1 = 1.0\ncenter = \"global\"\noffset_ranges = [[-1.0, 1.0]]\nsuccess_time = 0.5\nsuccess_radius = 0.5\n"
    );
    let s = Scenario::from_toml_str(&scen).unwrap();
    let err = s.validate(&registry).unwrap_err();
    assert!(err.to_string().contains("seed"), "got: {err}");
}

#[test]
fn empty_experiment_list_still_writes_a_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let result = run_in(tmp.path(), QUARTIC_HEAD);
    assert_eq!(result.summary.n_experiments, 0);
    assert_eq!(result.summary.n_failed, 0);
    assert_eq!(result.trajectories.len(), 2);
    assert!(result.out_dir.join("summary.json").is_file());
    assert!(result.out_dir.join("timing.json").is_file());
}

#[test]
fn simulate_writes_samples_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let scen = format!(
        "{QUARTIC_HEAD}\n[[experiment]]\nkind = \"simulate\"\nlabel = \"run1\"\nx0 = [1.0]\nt1 = 2.0\ncontainment = {{ trajectory = \"global\", radius = 2.0 }}\n"
    );
    let result = run_in(tmp.path(), &scen);
    assert_eq!(result.summary.n_failed, 0);
    let exp = &result.summary.experiments[0];
    assert_eq!(exp.status, "ok");
    assert!(exp.verdicts["completed"]);
    assert!(exp.files.contains(&"run1.csv".to_string()));
    assert!(exp.files.contains(&"run1.json".to_string()));

    let csv = fs::read_to_string(result.out_dir.join("run1.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,x1,feas,obj");
    assert!(csv.ends_with('\n'));
    // One header plus one row per recorded sample.
    let ExperimentArtifact::Simulate { record, .. } = &result.artifacts[0] else {
        panic!("expected a simulate artifact");
    };
    assert_eq!(csv.lines().count(), 1 + record.samples.len());
    // CRLF terminators per RFC 4180.
    assert!(csv.contains("\r\n"));
}

#[test]
fn single_cell_sweep_matches_a_plain_simulation() {
    let tmp = tempfile::tempdir().unwrap();
    let scen = format!(
        "{QUARTIC_HEAD}\n\
         [[experiment]]\nkind = \"simulate\"\nlabel = \"ref\"\nx0 = [1.0]\nt1 = 3.0\n\n\
         [[experiment]]\nkind = \"sweep\"\nlabel = \"grid\"\nalphas = [0.3]\nparam = \"b\"\nparam_values = [5.0]\nx0 = [1.0]\nt1 = 3.0\nno_track_radius = 0.6\n"
    );
    let result = run_in(tmp.path(), &scen);
    assert_eq!(result.summary.n_failed, 0, "summary: {:?}", result.summary.experiments);

    let ExperimentArtifact::Simulate { record, .. } = &result.artifacts[0] else {
        panic!("expected simulate artifact");
    };
    let ExperimentArtifact::Sweep { cells, .. } = &result.artifacts[1] else {
        panic!("expected sweep artifact");
    };
    assert_eq!(cells.len(), 1);
    let cell = &cells[0];
    assert!(cell.error.is_none(), "{:?}", cell.error);
    // The sweep rebuilt the same problem (b = 5), so its final distance to
    // the global branch equals the plain simulation's.
    let x_end = record.final_state().unwrap();
    let d_ref = (x_end - result.trajectories["global"].h(3.0)).norm();
    let d_cell = cell.final_distances["global"];
    assert!((d_ref - d_cell).abs() < 1e-9, "{d_ref} vs {d_cell}");
    assert_eq!(cell.outcome, "tracks-global");
}

#[test]
fn basin_rows_are_deterministic_and_labeled() {
    let tmp = tempfile::tempdir().unwrap();
    let scen = format!(
        "{QUARTIC_HEAD}\n[[experiment]]\nkind = \"basin\"\nlabel = \"pull\"\nn_inits = 6\nt1 = 2.0\ncenter = \"global\"\noffset_ranges = [[-0.3, 0.3]]\nsuccess_time = 1.0\nsuccess_radius = 0.5\n"
    );
    let result = run_in(tmp.path(), &scen);
    assert_eq!(result.summary.n_failed, 0);
    let ExperimentArtifact::Basin { rows, .. } = &result.artifacts[0] else {
        panic!("expected basin artifact");
    };
    assert_eq!(rows.len(), 6);
    // Starts near the global branch stay on it.
    for row in rows {
        assert_eq!(row.outcome, "global", "row {row:?}");
    }
    let exp = &result.summary.experiments[0];
    assert!((exp.key_numbers["fraction_global"] - 1.0).abs() < 1e-12);
    assert_eq!(exp.key_numbers["n_aborted"], 0.0);

    // Same seed, same rows.
    let tmp2 = tempfile::tempdir().unwrap();
    let again = run_in(tmp2.path(), &scen);
    let ExperimentArtifact::Basin { rows: rows2, .. } = &again.artifacts[0] else {
        panic!("expected basin artifact");
    };
    for (a, b) in rows.iter().zip(rows2.iter()) {
        assert_eq!(a.x0, b.x0);
        assert_eq!(a.outcome, b.outcome);
    }
}

#[test]
fn zero_init_basin_is_empty_but_valid() {
    let tmp = tempfile::tempdir().unwrap();
    let scen = format!(
        "{QUARTIC_HEAD}\n[[experiment]]\nkind = \"basin\"\nlabel = \"none\"\nn_inits = 0\nt1 = 1.0\ncenter = \"global\"\noffset_ranges = [[-0.1, 0.1]]\nsuccess_time = 0.5\nsuccess_radius = 0.5\n"
    );
    let result = run_in(tmp.path(), &scen);
    assert_eq!(result.summary.n_failed, 0);
    let exp = &result.summary.experiments[0];
    assert_eq!(exp.key_numbers["n_inits"], 0.0);
}

#[test]
fn landscape_rows_cover_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let scen = format!(
        "{QUARTIC_HEAD}\n[[experiment]]\nkind = \"landscape\"\nlabel = \"slice\"\nreference = \"global\"\nalpha = 0.0\nt_list = [0.0, 1.5]\n[experiment.e_grid]\nlower = [-4.0]\nupper = [1.0]\nnodes = [21]\n"
    );
    let result = run_in(tmp.path(), &scen);
    assert_eq!(result.summary.n_failed, 0, "{:?}", result.summary.experiments);
    let csv = fs::read_to_string(result.out_dir.join("slice.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 21);
    assert_eq!(csv.lines().next().unwrap(), "t,e1,value");
}

#[test]
fn kind_filter_limits_execution() {
    let tmp = tempfile::tempdir().unwrap();
    let scen = format!(
        "{QUARTIC_HEAD}\n\
         [[experiment]]\nkind = \"simulate\"\nlabel = \"a\"\nx0 = [1.0]\nt1 = 1.0\n\n\
         [[experiment]]\nkind = \"landscape\"\nlabel = \"b\"\nreference = \"global\"\nt_list = [0.0]\n[experiment.e_grid]\nlower = [-1.0]\nupper = [1.0]\nnodes = [3]\n"
    );
    let path = write_scenario(tmp.path(), &scen);
    let opts = RunOptions {
        out_dir: Some(tmp.path().join("out")),
        kind_filter: Some("landscape".into()),
        ..RunOptions::default()
    };
    let result = run_scenario(&path, &opts).unwrap();
    assert_eq!(result.summary.n_experiments, 1);
    assert_eq!(result.summary.experiments[0].kind, "landscape");
}

#[test]
fn reruns_are_byte_identical_apart_from_timing() {
    let scen = format!(
        "{QUARTIC_HEAD}\n\
         [[experiment]]\nkind = \"simulate\"\nlabel = \"run\"\nx0 = [1.0]\nt1 = 1.5\n\n\
         [[experiment]]\nkind = \"basin\"\nlabel = \"pull\"\nn_inits = 4\nt1 = 1.5\ncenter = \"global\"\noffset_ranges = [[-0.2, 0.2]]\nsuccess_time = 1.0\nsuccess_radius = 0.5\n\n\
         [[experiment]]\nkind = \"convergence\"\nlabel = \"rate\"\nx0 = [1.0]\nt_end = 0.5\ndtau = [0.02, 0.01]\n"
    );
    let tmp1 = tempfile::tempdir().unwrap();
    let tmp2 = tempfile::tempdir().unwrap();
    let r1 = run_in(tmp1.path(), &scen);
    let r2 = run_in(tmp2.path(), &scen);

    let mut checked = 0;
    for entry in fs::read_dir(&r1.out_dir).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name == "timing.json" {
            continue;
        }
        let a = fs::read(r1.out_dir.join(&name)).unwrap();
        let b = fs::read(r2.out_dir.join(&name)).unwrap();
        assert_eq!(a, b, "file {name} differs between reruns");
        checked += 1;
    }
    assert!(checked >= 7, "expected several artifacts, saw {checked}");
}

#[test]
fn failed_experiments_are_recorded_not_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    // The feasibility check rejects an infeasible start for the constrained
    // problem; the run itself must still succeed and record the failure.
    let scen = r#"
seed = 3
[problem]
builtin = "ackley-constrained"

[flow]
alpha = 0.2
dt = 1e-3

[[trajectory]]
label = "global"
x_seed = [0.0, 1.0]
grid = { start = 0.0, stop = 1.0, nodes = 5001 }

[[experiment]]
kind = "simulate"
label = "bad-start"
x0 = [50.0, 1.0]
t1 = 0.5
"#;
    let path = write_scenario(tmp.path(), scen);
    let opts = RunOptions { out_dir: Some(tmp.path().join("out")), ..RunOptions::default() };
    let result = run_scenario(&path, &opts).unwrap();
    assert_eq!(result.summary.n_failed, 1);
    let exp = &result.summary.experiments[0];
    assert_eq!(exp.status, "failed");
    assert!(exp.error.as_deref().unwrap().contains("infeasible"));
    assert!(matches!(&result.artifacts[0], ExperimentArtifact::Failed { .. }));
    // The summary is still written.
    assert!(result.out_dir.join("summary.json").is_file());
}

#[test]
fn custom_registry_problems_are_usable() {
    let tmp = tempfile::tempdir().unwrap();
    let mut registry = ProblemRegistry::new();
    registry.register("shifted-parabola", |params: &BTreeMap<String, f64>| {
        let speed = params.get("speed").copied().unwrap_or(1.0);
        Ok(tvopt::problem::ProblemDefinition::unconstrained(
            1,
            move |x: &nalgebra::DVector<f64>, t: f64| (x[0] - speed * t).powi(2),
            move |x: &nalgebra::DVector<f64>, t: f64| {
                nalgebra::DVector::from_vec(vec![2.0 * (x[0] - speed * t)])
            },
        )
        .name("shifted-parabola")
        .build()
        .unwrap())
    });
    let scen = r#"
[problem]
builtin = "shifted-parabola"
params = { speed = 0.5 }

[flow]
alpha = 0.1
dt = 1e-3

[[trajectory]]
label = "min"
x_seed = [0.0]
grid = { start = 0.0, stop = 2.0, nodes = 33 }

[[experiment]]
kind = "simulate"
label = "follow"
x0 = [0.0]
t1 = 2.0
"#;
    let path = write_scenario(tmp.path(), scen);
    let opts = RunOptions { out_dir: Some(tmp.path().join("out")), ..RunOptions::default() };
    let result = run_scenario_with(&path, &opts, &registry).unwrap();
    assert_eq!(result.summary.n_failed, 0);
    // The flow lags the moving minimum by roughly alpha * speed.
    let ExperimentArtifact::Simulate { record, .. } = &result.artifacts[0] else {
        panic!("expected simulate artifact");
    };
    let x_end = record.final_state().unwrap()[0];
    let lag = 0.5 * 2.0 - x_end;
    assert!(lag > 0.0 && lag < 0.2, "lag = {lag}");
}

#[test]
fn seed_override_changes_stochastic_results() {
    let scen = format!(
        "{QUARTIC_HEAD}\n[[experiment]]\nkind = \"basin\"\nlabel = \"pull\"\nn_inits = 3\nt1 = 1.0\ncenter = \"global\"\noffset_ranges = [[-0.3, 0.3]]\nsuccess_time = 0.5\nsuccess_radius = 0.5\n"
    );
    let tmp = tempfile::tempdir().unwrap();
    let path = write_scenario(tmp.path(), &scen);
    let run = |seed: Option<u64>, sub: &str| {
        let opts = RunOptions {
            out_dir: Some(tmp.path().join(sub)),
            seed,
            ..RunOptions::default()
        };
        run_scenario(&path, &opts).unwrap()
    };
    let base = run(None, "o1");
    let same = run(Some(7), "o2");
    let diff = run(Some(8), "o3");
    let x0s = |r: &RunResult| match &r.artifacts[0] {
        ExperimentArtifact::Basin { rows, .. } => {
            rows.iter().map(|row| row.x0.clone()).collect::<Vec<_>>()
        }
        _ => panic!("expected basin artifact"),
    };
    // The scenario's own seed is 7, so overriding with 7 is a no-op.
    assert_eq!(x0s(&base), x0s(&same));
    assert_ne!(x0s(&base), x0s(&diff));
}

#[test]
fn summary_matches_the_loaded_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let result = run_in(tmp.path(), QUARTIC_HEAD);
    let text = fs::read_to_string(result.out_dir.join("summary.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed["problem"], "quartic");
    assert_eq!(parsed["grade"], "sampled-evidence");
    assert_eq!(parsed["n_experiments"], 0);

    // load_scenario sees the same document the runner used.
    let path = tmp.path().join("scenario.toml");
    let scen = load_scenario(&path).unwrap();
    assert_eq!(scen.problem.builtin, "quartic");
    assert_eq!(scen.trajectories.len(), 2);
}

#[test]
fn summaries_validate_against_the_published_schema() {
    let tmp = tempfile::tempdir().unwrap();
    // One healthy experiment and one whose flow blows up at run time, so the
    // schema is exercised on both status values.
    let scen = format!(
        "{QUARTIC_HEAD}
[[experiment]]
kind = \"simulate\"
label = \"healthy\"
x0 = [1.0]
t1 = 0.5

[[experiment]]
kind = \"simulate\"
label = \"stiff\"
x0 = [0.0]
alpha = 1e-9
t1 = 0.5
"
    );
    let result = run_in(tmp.path(), &scen);
    assert_eq!(result.summary.n_failed, 1);

    let schema: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/summary.schema.json"))
            .unwrap(),
    )
    .unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(result.out_dir.join("summary.json")).unwrap())
            .unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(&summary).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "summary violates the schema: {errors:#?}");

    // The schema allows `error` only as a string; check the pairing too.
    for exp in &result.summary.experiments {
        assert_eq!(exp.status == "failed", exp.error.is_some(), "{}", exp.label);
    }
}

#[test]
fn tiny_inertia_pins_runs_to_their_nearest_branch() {
    let tmp = tempfile::tempdir().unwrap();
    // With almost no inertia the flow descends the frozen landscape almost
    // instantly, so every run locks onto the branch nearest its start: far
    // starts never reach the moving global minimum, near starts always do.
    // The wider tip (d = 0.1) keeps the near-branch curvature integrable at
    // this step size.
    let scen = r#"
seed = 11
[problem]
builtin = "ackley-constrained"
params = { d = 0.1 }

[flow]
alpha = 0.01
dt = 1e-4

[[trajectory]]
label = "global"
x_seed = [0.0, 1.0]
grid = { start = 0.0, stop = 0.5, nodes = 501 }

[[experiment]]
kind = "basin"
label = "far"
n_inits = 4
t1 = 0.5
center = "global"
offset_ranges = [[0.0, 0.0], [3.0, 5.0]]
success_time = 0.3
success_radius = 0.5

[[experiment]]
kind = "basin"
label = "near"
n_inits = 2
t1 = 0.5
center = "global"
offset_ranges = [[0.0, 0.0], [-0.2, 0.2]]
success_time = 0.3
success_radius = 0.5
"#;
    let result = run_in(tmp.path(), scen);
    assert_eq!(result.summary.n_failed, 0);
    let far = &result.summary.experiments[0];
    assert_eq!(far.key_numbers["fraction_global"], 0.0);
    assert_eq!(far.key_numbers["fraction_none"], 1.0);
    let near = &result.summary.experiments[1];
    assert_eq!(near.key_numbers["fraction_global"], 1.0);
}
