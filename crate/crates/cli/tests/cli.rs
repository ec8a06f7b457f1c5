use std::process::Command;

use proptest::prelude::*;
use sdre_eso_cli::scenario::{
    ControllerSection, ExtInit, ExtKeyword, FallbackName, GHatArg, ModeName, ObserverSection, OutputSection,
    PlantKind, PlantSection, Scenario, ScenarioError, SdcName, SignName, SimulationSection, SweepSection,
};
use sdre_eso_cli::{compare, run_scenario, CliError};

const CHAIN: &str = r#"
name = "chain"

[plant]
kind = "chain_integrator"
k = 2
n = 1

[simulation]
t_final = 0.5
dt = 1e-3
x0 = [1.0, 0.0]

[observer]
epsilon = 0.01

[controller]
mode = "adrc"
q = [[1.0, 0.0], [0.0, 1.0]]
r = [[1.0]]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sdre-eso"))
}

#[test]
fn bundled_scenario_values() {
    let s = Scenario::bundled("pendulum_sec4").unwrap();
    assert_eq!(s.plant.kind, PlantKind::Pendulum);
    assert_eq!((s.plant.g, s.plant.l, s.plant.b), (Some(9.81), Some(2.5), Some(10.0)));
    assert_eq!(s.controller.q, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(s.controller.r, vec![vec![1.0]]);
    assert!((s.simulation.x0[0] - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    assert!((s.simulation.x0[1] - 0.0872665).abs() < 1e-7);
    assert_eq!(s.dims(), (2, 1));
}

#[test]
fn missing_key_is_reported() {
    let text = CHAIN.replace("dt = 1e-3\n", "");
    let err = Scenario::from_toml(&text).unwrap_err();
    assert!(matches!(err, ScenarioError::Parse(_)));
    assert!(err.to_string().contains("dt"), "{err}");
}

#[test]
fn unknown_key_is_reported() {
    let text = CHAIN.replace("epsilon = 0.01", "epsilon = 0.01\ngain = 3");
    let err = Scenario::from_toml(&text).unwrap_err();
    assert!(err.to_string().contains("gain"), "{err}");
}

#[test]
fn step_too_large_for_observer_names_key_and_line() {
    let text = CHAIN.replace("dt = 1e-3", "dt = 2e-3");
    match Scenario::from_toml(&text).unwrap_err() {
        ScenarioError::Invalid { key, line, .. } => {
            assert_eq!(key, "simulation.dt");
            assert_eq!(line, Some(11));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn shape_mismatch_names_key() {
    let text = CHAIN.replace("r = [[1.0]]", "r = [[1.0, 0.0]]");
    let err = Scenario::from_toml(&text).unwrap_err();
    assert!(err.to_string().contains("controller.r"), "{err}");
    let text = CHAIN.replace("x0 = [1.0, 0.0]", "x0 = [1.0]");
    assert!(Scenario::from_toml(&text).unwrap_err().to_string().contains("simulation.x0"));
}

#[test]
fn empty_sweep_is_rejected() {
    let text = format!("{CHAIN}\n[sweep]\nq_scales = []\n");
    let err = Scenario::from_toml(&text).unwrap_err();
    assert!(err.to_string().contains("sweep"), "{err}");
}

#[test]
fn csv_schema_and_monotone_cost() {
    let dir = tempfile::tempdir().unwrap();
    let s = Scenario::from_toml(CHAIN).unwrap();
    let summary = run_scenario(&s, dir.path(), None).unwrap();
    assert_eq!(summary.mode, ModeName::Adrc);
    let text = std::fs::read_to_string(dir.path().join("chain_adrc.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,x_1,x_2,xhat_1,xhat_2,xhat_ext_1,u_1,mode,J");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 501);
    assert!(rows.iter().all(|r| r.len() == 9 && r[7] == 2.0));
    assert!(rows.windows(2).all(|w| w[1][0] > w[0][0] && w[1][8] >= w[0][8]));
    assert_eq!(rows.last().unwrap()[8], summary.final_cost);
}

#[test]
fn sweep_writes_one_csv_per_gain_and_envelope() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{CHAIN}\n[sweep]\nq_scales = [0.1, 0.2, 0.5, 1, 2, 5, 10, 20, 50, 100]\nworkers = 2\n");
    let s = Scenario::from_toml(&text).unwrap();
    let report = compare(&s, dir.path()).unwrap();
    let adrc: Vec<_> = report.runs.iter().filter(|r| r.mode == ModeName::Adrc).collect();
    assert_eq!(adrc.len(), 10);
    for i in 0..10 {
        assert!(dir.path().join(format!("chain_adrc_{i}.csv")).exists());
    }
    let env = std::fs::read_to_string(dir.path().join("chain_envelope.csv")).unwrap();
    let last: Vec<f64> = env.lines().last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(last[1], report.adrc_min);
    assert_eq!(last[2], report.adrc_max);
}

#[test]
fn single_gain_sweep_degenerates() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{CHAIN}\n[sweep]\ngains = [[[1.0, 1.7320508075688772]]]\n");
    let s = Scenario::from_toml(&text).unwrap();
    let report = compare(&s, dir.path()).unwrap();
    assert_eq!(report.adrc_min, report.adrc_max);
    let env = std::fs::read_to_string(dir.path().join("chain_envelope.csv")).unwrap();
    for line in env.lines().skip(1) {
        let v: Vec<&str> = line.split(',').collect();
        assert_eq!(v[1], v[2]);
    }
}

#[test]
fn compare_without_sweep_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let s = Scenario::from_toml(CHAIN).unwrap();
    let err = compare(&s, dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(matches!(err, CliError::Config { .. }));
}

#[test]
fn sdre_only_converges_on_bundled_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let s = Scenario::bundled("pendulum_sec4").unwrap();
    let summary = run_scenario(&s, dir.path(), Some(ModeName::Sdre)).unwrap();
    assert!(summary.final_norm < 0.01, "{summary}");
    assert!(summary.final_cost.is_finite());
}

#[test]
fn binary_subcommands_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chain.toml");
    std::fs::write(&path, CHAIN).unwrap();

    let out = bin().args(["validate", "--scenario"]).arg(&path).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("chain: ok"));

    let out = bin().arg("list-plants").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("pendulum") && text.contains("chain_integrator"));

    let out = bin()
        .args(["run", "--mode", "sdre", "--scenario"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("sdre.final_cost="));
    assert!(dir.path().join("chain_sdre.csv").exists());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, CHAIN.replace("dt = 1e-3", "dt = 0.1")).unwrap();
    let out = bin().args(["run", "--scenario"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("simulation.dt"));

    // open-loop blow-up: a huge start-up input for the whole run
    let diverging = dir.path().join("div.toml");
    std::fs::write(
        &diverging,
        CHAIN.replace("r = [[1.0]]", "r = [[1.0]]\ntau = 10.0\nu0 = [1e9]"),
    )
    .unwrap();
    let out = bin()
        .args(["run", "--scenario"])
        .arg(&diverging)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn seed_sweep_runs_requested_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chain.toml");
    std::fs::write(&path, CHAIN).unwrap();
    let out = bin()
        .args(["run", "--seed-sweep", "3", "--scenario"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("sweep.runs=3"));
    for i in 0..3 {
        assert!(dir.path().join(format!("chain_seed_{i}.csv")).exists());
    }
}

fn scenario_strategy() -> impl Strategy<Value = Scenario> {
    (
        any::<bool>(),
        1e-4..1e-2f64,
        1.0..50.0f64,
        prop::collection::vec(-2.0..2.0f64, 2),
        prop::sample::select(vec![ModeName::Switching, ModeName::Sdre, ModeName::Adrc]),
        0.1..5.0f64,
        prop::option::of(prop::collection::vec(0.1..100.0f64, 1..5)),
        any::<bool>(),
    )
        .prop_map(|(pendulum, dt, ratio, x0, mode, r, scales, drift)| Scenario {
            name: "generated".into(),
            plant: if pendulum {
                PlantSection {
                    kind: PlantKind::Pendulum,
                    g: Some(9.81),
                    l: Some(2.5),
                    b: Some(r),
                    k: None,
                    n: None,
                }
            } else {
                PlantSection {
                    kind: PlantKind::ChainIntegrator,
                    g: None,
                    l: None,
                    b: None,
                    k: Some(2),
                    n: Some(1),
                }
            },
            simulation: SimulationSection {
                t_final: 100.0 * dt,
                dt,
                x0,
            },
            observer: ObserverSection {
                epsilon: 10.0 * dt * ratio,
                coefficients: None,
                g_hat_argument: if drift { GHatArg::Measurement } else { GHatArg::Estimate },
                xhat0: None,
                xhat0_offset: Some(vec![1e-6, -1e-6]),
                ext0: if drift {
                    ExtInit::Keyword(ExtKeyword::Drift)
                } else {
                    ExtInit::Values(vec![r])
                },
            },
            controller: ControllerSection {
                mode,
                q: vec![vec![r, 0.0], vec![0.0, 1.0]],
                r: vec![vec![r]],
                sdc: SdcName::Discontinuous,
                rho: Some(vec![r]),
                varpi: None,
                varrho: None,
                tau: 0.0,
                u0: None,
                closed_loop_sign: SignName::Corrected,
                singular_fallback: FallbackName::Adrc,
                dwell_steps: 0,
                max_switches: 100,
            },
            sweep: scales.map(|q_scales| SweepSection {
                q_scales,
                gains: vec![],
                workers: 1,
            }),
            output: OutputSection { dir: None },
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scenario_round_trips(s in scenario_strategy()) {
        let text = s.to_toml();
        let parsed = Scenario::from_toml(&text).unwrap();
        prop_assert_eq!(parsed, s);
    }
}

#[test]
fn bundled_round_trip() {
    let s = Scenario::bundled("pendulum_sec4").unwrap();
    assert_eq!(Scenario::from_toml(&s.to_toml()).unwrap(), s);
}
