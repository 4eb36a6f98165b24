//! End-to-end tests of the `pvd` binary: each test writes a config into a
//! temporary directory, runs a subcommand as a subprocess, and inspects the
//! exit code and the files it wrote.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pvd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvd"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Data rows of a CSV (skips the header line).
fn rows(path: &Path) -> Vec<Vec<String>> {
    read(path)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn column(path: &Path, index: usize) -> Vec<f64> {
    rows(path)
        .iter()
        .map(|r| r[index].parse().unwrap())
        .collect()
}

const TWO_SPECIES: &str = r#"
[model]
n = 1
K = [[0.0, 0.1], [0.1, 0.0]]

[grid]
Q = 10
M = 5
T = 5.0
e0 = 1.0

[fluxes]
kind = "constant"
levels = [0.6, 0.4]

[[initial]]
kind = "abs-sine"

[[initial]]
kind = "constant"
value = 1.0
"#;

#[test]
fn simulate_writes_the_expected_shapes() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.cfg", TWO_SPECIES);
    let out = pvd(&["simulate", "--config", "run.cfg", "--out", "o"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let traj = rows(&dir.path().join("o/trajectory.csv"));
    assert_eq!(traj.len(), (5 + 1) * 10, "one row per (time, cell) pair");
    assert!(traj.iter().all(|r| r.len() == 4), "t, y, two species");

    let thickness = rows(&dir.path().join("o/thickness.csv"));
    assert_eq!(thickness.len(), 6);
    let newton = rows(&dir.path().join("o/newton.csv"));
    assert_eq!(newton.len(), 5);
    assert_eq!(newton[0][0], "0");
}

#[test]
fn zero_fluxes_keep_the_thickness_constant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TWO_SPECIES
        .replace("levels = [0.6, 0.4]", "levels = [0.0, 0.0]")
        .replace("e0 = 1.0", "e0 = 2.5");
    write(dir.path(), "run.cfg", &cfg);
    let out = pvd(&["simulate", "--config", "run.cfg", "--out", "o"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for e in column(&dir.path().join("o/thickness.csv"), 1) {
        assert_eq!(e, 2.5);
    }
    for rate in column(&dir.path().join("o/thickness.csv"), 2) {
        assert_eq!(rate, 0.0);
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.cfg", TWO_SPECIES);
    for out_dir in ["a", "b"] {
        let out = pvd(
            &["simulate", "--config", "run.cfg", "--out", out_dir],
            dir.path(),
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for name in ["trajectory.csv", "thickness.csv", "newton.csv"] {
        assert_eq!(
            read(&dir.path().join("a").join(name)),
            read(&dir.path().join("b").join(name)),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn asymmetric_coefficients_are_rejected_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TWO_SPECIES.replace("[[0.0, 0.1], [0.1, 0.0]]", "[[0.0, 0.1], [0.2, 0.0]]");
    write(dir.path(), "run.cfg", &cfg);
    let out = pvd(&["simulate", "--config", "run.cfg"], dir.path());
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("K must be symmetric"), "{}", stderr(&out));
}

#[test]
fn missing_config_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = pvd(&["simulate", "--config", "absent.cfg"], dir.path());
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn longtime_fits_the_decay_window() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TWO_SPECIES
        .replace("Q = 10", "Q = 12")
        .replace("M = 5", "M = 40")
        .replace("T = 5.0", "T = 40.0");
    write(dir.path(), "run.cfg", &cfg);
    let out = pvd(&["longtime", "--config", "run.cfg", "--out", "o"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let decay = rows(&dir.path().join("o/decay.csv"));
    assert_eq!(decay.len(), 41);
    let weighted = column(&dir.path().join("o/decay.csv"), 2);
    for pair in weighted.windows(2) {
        assert!(
            pair[1] <= pair[0] + 1e-8 * (1.0 + pair[0].abs()),
            "weighted relative entropy increased: {} -> {}",
            pair[0],
            pair[1]
        );
    }

    let fits = rows(&dir.path().join("o/decayfit.csv"));
    let names: Vec<&str> = fits.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["gamma", "eta", "eta_0", "eta_1"]);
    for fit in &fits {
        let slope: f64 = fit[1].parse().unwrap();
        assert!(slope > 0.0, "{} slope {slope} should be positive", fit[0]);
    }
}

#[test]
fn stationary_longtime_reports_a_degenerate_fit() {
    let dir = tempfile::tempdir().unwrap();
    // Initial fractions equal to the normalized rates: the run never leaves
    // the equilibrium, every reciprocal observable is masked, and only the
    // series file can be produced.
    let cfg = TWO_SPECIES
        .replace("M = 5", "M = 40")
        .replace("T = 5.0", "T = 40.0")
        .replace("kind = \"abs-sine\"", "kind = \"constant\"\nvalue = 0.6")
        .replace("value = 1.0", "value = 0.4");
    write(dir.path(), "run.cfg", &cfg);
    let out = pvd(&["longtime", "--config", "run.cfg", "--out", "o"], dir.path());
    assert_eq!(code(&out), 6, "{}", stderr(&out));
    assert!(dir.path().join("o/decay.csv").exists());
    assert!(!dir.path().join("o/decayfit.csv").exists());
}

#[test]
fn longtime_rejects_nonconstant_schedules() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TWO_SPECIES.replace(
        "kind = \"constant\"\nlevels = [0.6, 0.4]",
        "kind = \"piecewise\"\nbreakpoints = [1.0, 2.0]\nlevels = [[0.6, 0.1, 0.6], [0.4, 0.9, 0.4]]",
    );
    write(dir.path(), "run.cfg", &cfg);
    let out = pvd(&["longtime", "--config", "run.cfg", "--out", "o"], dir.path());
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

const OPTIMIZE: &str = r#"
[model]
n = 1
K = [[0.0, 0.1], [0.1, 0.0]]

[grid]
Q = 10
M = 8
T = 4.0
e0 = 1.0

[fluxes]
kind = "constant"
levels = [0.8, 1.2]

[[initial]]
kind = "abs-sine"

[[initial]]
kind = "constant"
value = 1.0

[optimize]
guess = 1.0

[optimize.targets]
kind = "generate"
"#;

#[test]
fn optimize_with_a_perfect_guess_stops_immediately() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = OPTIMIZE.replace("levels = [0.8, 1.2]", "levels = [1.0, 1.0]");
    write(dir.path(), "run.cfg", &cfg);
    let out = pvd(&["optimize", "--config", "run.cfg", "--out", "o"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let history = rows(&dir.path().join("o/opt_history.csv"));
    assert_eq!(history.len(), 1, "the initial guess already hits the target");
    let jj: f64 = history[0][1].parse().unwrap();
    assert_eq!(jj, 0.0);
    let summary = read(&dir.path().join("o/summary.txt"));
    assert!(summary.contains("stop_reason: cost-tolerance"), "{summary}");
    assert!(summary.contains("iterations: 0"), "{summary}");
}

#[test]
fn optimize_recovers_generated_targets() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.cfg", OPTIMIZE);
    let out = pvd(&["optimize", "--config", "run.cfg", "--out", "o"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let cost = column(&dir.path().join("o/opt_history.csv"), 1);
    assert!(cost.len() > 1, "a wrong guess needs at least one iteration");
    for pair in cost.windows(2) {
        assert!(pair[1] <= pair[0], "cost increased: {} -> {}", pair[0], pair[1]);
    }
    assert!(*cost.last().unwrap() <= 1e-5, "stopped above eps_J");

    let control = rows(&dir.path().join("o/opt_control.csv"));
    assert_eq!(control.len(), 8);
    assert_eq!(control[0].len(), 1 + 2 + 2, "t, recovered pair, generator pair");

    let compare = rows(&dir.path().join("o/final_compare.csv"));
    assert_eq!(compare.len(), 10);
    for row in &compare {
        let target: f64 = row[1].parse().unwrap();
        let achieved: f64 = row[3].parse().unwrap();
        assert!((target - achieved).abs() < 0.05);
    }
}

#[test]
fn optimize_reads_file_targets() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "gen.cfg", OPTIMIZE);
    let out = pvd(&["simulate", "--config", "gen.cfg", "--out", "gen"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    // Final time block of the trajectory, re-written as a target profile.
    let traj = rows(&dir.path().join("gen/trajectory.csv"));
    let final_block = &traj[traj.len() - 10..];
    let mut target = String::from("y,species_0,species_1\n");
    for row in final_block {
        target.push_str(&format!("{},{},{}\n", row[1], row[2], row[3]));
    }
    write(dir.path(), "target.csv", &target);
    let thickness = rows(&dir.path().join("gen/thickness.csv"))
        .last()
        .unwrap()[1]
        .clone();

    let cfg = OPTIMIZE.replace(
        "[optimize.targets]\nkind = \"generate\"",
        &format!(
            "[optimize.targets]\nkind = \"file\"\nprofile = \"target.csv\"\nthickness = {thickness}"
        ),
    );
    write(dir.path(), "run.cfg", &cfg);
    let out = pvd(&["optimize", "--config", "run.cfg", "--out", "o"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let cost = column(&dir.path().join("o/opt_history.csv"), 1);
    assert!(*cost.last().unwrap() <= 1e-5, "stopped above eps_J");
    let control = rows(&dir.path().join("o/opt_control.csv"));
    assert_eq!(control[0].len(), 1 + 2, "no generator columns in file mode");
}

const LATTICE: &str = r#"
[model]
n = 1

[grid]
Q = 100
M = 50
T = 0.5
e0 = 1.0

[fluxes]
kind = "constant"
levels = [0.0, 0.0]

[[initial]]
kind = "abs-sine"

[[initial]]
kind = "abs-sine"
scale = -1.0
offset = 1.0

[lattice]
sites = 500
capacity = 50
ensemble = 30
diffusion = 0.4
probability = 0.25
seed = 11
"#;

#[test]
fn lattice_compare_tracks_the_continuum_run() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.cfg", LATTICE);
    let out = pvd(
        &["lattice-compare", "--config", "run.cfg", "--out", "o"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let distances = rows(&dir.path().join("o/l1_distance.csv"));
    assert_eq!(distances.len(), 2);
    for row in &distances {
        let d: f64 = row[1].parse().unwrap();
        assert!(d <= 0.05, "species {} drifted by {d}", row[0]);
        assert_eq!(row[2], "11", "seed column records the run seed");
    }
    assert_eq!(rows(&dir.path().join("o/lattice_density.csv")).len(), 10);
    assert_eq!(rows(&dir.path().join("o/pde_density.csv")).len(), 10);
}

#[test]
fn lattice_compare_is_reproducible_and_seedable() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.cfg", LATTICE);
    for out_dir in ["a", "b"] {
        let out = pvd(
            &["lattice-compare", "--config", "run.cfg", "--out", out_dir],
            dir.path(),
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    assert_eq!(
        read(&dir.path().join("a/lattice_density.csv")),
        read(&dir.path().join("b/lattice_density.csv"))
    );

    let out = pvd(
        &[
            "lattice-compare",
            "--config",
            "run.cfg",
            "--out",
            "c",
            "--seed",
            "12",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let distances = rows(&dir.path().join("c/l1_distance.csv"));
    assert_eq!(distances[0][2], "12");
    assert_ne!(
        read(&dir.path().join("a/lattice_density.csv")),
        read(&dir.path().join("c/lattice_density.csv")),
        "a different seed draws a different ensemble"
    );
}

#[test]
fn lattice_compare_requires_zero_fluxes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = LATTICE.replace("levels = [0.0, 0.0]", "levels = [0.5, 0.5]");
    write(dir.path(), "run.cfg", &cfg);
    let out = pvd(
        &["lattice-compare", "--config", "run.cfg", "--out", "o"],
        dir.path(),
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("zero flux"), "{}", stderr(&out));
}

#[test]
fn plot_renders_decay_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TWO_SPECIES
        .replace("Q = 10", "Q = 12")
        .replace("M = 5", "M = 40")
        .replace("T = 5.0", "T = 40.0");
    write(dir.path(), "run.cfg", &cfg);
    let out = pvd(&["longtime", "--config", "run.cfg", "--out", "o"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = pvd(
        &["plot", "--input", "o/decay.csv", "--kind", "decay"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let svg = read(&dir.path().join("o/decay.svg"));
    assert!(svg.starts_with("<svg"), "not an SVG document");
    assert!(svg.contains("gamma"), "legend names the series");
}

#[test]
fn plot_rejects_an_empty_file_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "empty.csv", "");
    let out = pvd(
        &["plot", "--input", "empty.csv", "--kind", "profiles"],
        dir.path(),
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn quiet_suppresses_progress_lines() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.cfg", TWO_SPECIES);
    let out = pvd(
        &["simulate", "--config", "run.cfg", "--out", "o", "--quiet"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(out.stdout.is_empty(), "quiet run printed to stdout");
}
