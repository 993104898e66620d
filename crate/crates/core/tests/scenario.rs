//! Runner-level contracts that span modules: no-op continual periods,
//! buffer sub-reports, and CLI error behavior.

use evoforecast::cli::{run_scenario_continual, GraphConfig, RunConfig};
use evoforecast::data::{generate_scenario, EvolutionScenario};
use evoforecast::model::CastConfig;
use evoforecast::training::{ContinualConfig, TrainConfig};

fn small_model() -> CastConfig {
    CastConfig {
        stacks: 1,
        blocks: 2,
        heads: 2,
        cheb_order: 2,
        f_in: 2,
        f1: 4,
        f2: 4,
        f3: 4,
        f4: 2,
        taps: 2,
        dilations: vec![],
        input_steps: 8,
        horizon: 4,
        output_features: 1,
    }
}

fn quick_train(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.005,
        batch_size: 16,
        max_epochs: 3,
        patience: 3,
        lambda: 0.0001,
        delta: 1.0,
        seed,
    }
}

#[test]
fn null_evolution_with_empty_buffers_carries_metrics_over() {
    let scenario = EvolutionScenario {
        periods: 3,
        nodes: 14,
        steps: 100,
        features: 2,
        add_node_fraction: 0.0,
        remove_node_fraction: 0.0,
        add_edge_fraction: 0.0,
        remove_edge_fraction: 0.0,
        daily_amplitude: 10.0,
        trend: 0.0,
        noise: 0.0,
        shift_fraction: 0.0,
        shift_magnitude: 0.0,
        steps_per_day: 20,
        coupling: 0.2,
        seed: 12,
    };
    let rc = RunConfig {
        model: small_model(),
        train: quick_train(4),
        continual: ContinualConfig {
            buffer_fraction_c: 0.0,
            buffer_fraction_u: 0.0,
            tau: 40,
            bins: 10,
        },
        graph: GraphConfig { epsilon: 0.05 },
    };
    let dataset = generate_scenario(&scenario).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = run_scenario_continual(&dataset.periods, &rc, dir.path()).unwrap();

    // Nothing evolves and the buffers are empty, so later periods reuse the
    // period-1 model on identical data: their metric rows must match.
    assert_eq!(report.periods.len(), 3);
    let first = &report.periods[0].horizons;
    for later in &report.periods[1..] {
        assert_eq!(&later.horizons, first, "period {}", later.period);
    }
    // No buffers mean no stable/unstable sub-report.
    assert!(!dir.path().join("stable_unstable.csv").exists());
}

#[test]
fn evolving_run_emits_buffer_subset_report() {
    let scenario = EvolutionScenario {
        periods: 2,
        nodes: 20,
        steps: 100,
        features: 2,
        add_node_fraction: 0.1,
        remove_node_fraction: 0.05,
        add_edge_fraction: 0.05,
        remove_edge_fraction: 0.05,
        daily_amplitude: 10.0,
        trend: 0.0,
        noise: 0.5,
        shift_fraction: 0.15,
        shift_magnitude: 40.0,
        steps_per_day: 20,
        coupling: 0.2,
        seed: 13,
    };
    let rc = RunConfig {
        model: small_model(),
        train: quick_train(5),
        continual: ContinualConfig {
            buffer_fraction_c: 0.2,
            buffer_fraction_u: 0.2,
            tau: 40,
            bins: 10,
        },
        graph: GraphConfig { epsilon: 0.05 },
    };
    let dataset = generate_scenario(&scenario).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run_scenario_continual(&dataset.periods, &rc, dir.path()).unwrap();

    let text = std::fs::read_to_string(dir.path().join("stable_unstable.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("period,subset,mae,rmse,mape"));
    let rows: Vec<&str> = lines.collect();
    assert!(rows.iter().any(|r| r.contains(",stable,")));
    assert!(rows.iter().any(|r| r.contains(",unstable,")));
    // Buffer manifests exist for the continual period.
    assert!(dir.path().join("buffers_period_2.csv").exists());
}

#[test]
fn cli_fails_with_a_tagged_message_on_missing_data() {
    let bin = env!("CARGO_BIN_EXE_evoforecast");
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "").unwrap();
    let output = std::process::Command::new(bin)
        .args([
            "train",
            "--data",
            &dir.path().join("nope").display().to_string(),
            "--config",
            &config.display().to_string(),
            "--scenario",
            "full",
            "--out",
            &dir.path().join("out").display().to_string(),
        ])
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("error: data:"),
        "stderr should carry the module tag, got: {stderr}"
    );
}
