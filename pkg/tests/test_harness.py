import csv
import json
import statistics
from pathlib import Path

import numpy as np
import pytest

from vsrl.cli import main as cli_main
from vsrl.harness import (
    ConfigError,
    config_hash,
    load_config_file,
    parse_experiment_config,
    project_to_observations,
    run_experiment,
    scheme_from_config,
)

CONFIG_DIR = Path(__file__).parent.parent / "configs"


def small_config(tmp_path, **overrides) -> dict:
    doc = {
        "env": {"env": "three_state", "overrides": {}},
        "algorithm": "q_learning",
        "strategy": {"kind": "rrr", "t_inf": [0.9, 0.1]},
        "scheme": None,
        "learning_rate": {"exponent": 0.8},
        "horizon": 2000,
        "checkpoint_every": 1000,
        "seeds": [1, 2, 3],
        "out": str(tmp_path / "run"),
    }
    doc.update(overrides)
    return doc


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

def test_missing_fields_report_their_path():
    with pytest.raises(ConfigError, match="horizon"):
        parse_experiment_config({"env": {"env": "cliff"}, "algorithm": "q_learning",
                                 "strategy": {"kind": "rrr", "t_inf": [1.0]},
                                 "seeds": [1]})
    with pytest.raises(ConfigError, match="algorithm"):
        parse_experiment_config({"env": {"env": "cliff"}, "algorithm": "dqn",
                                 "strategy": {}, "horizon": 10, "seeds": [1]})
    with pytest.raises(ConfigError, match="seeds"):
        parse_experiment_config({"env": {"env": "cliff"}, "algorithm": "q_learning",
                                 "strategy": {"kind": "rrr", "t_inf": [1.0]},
                                 "horizon": 10, "seeds": []})


def test_learning_rate_errors_carry_the_field_path():
    with pytest.raises(ConfigError, match="learning_rate"):
        parse_experiment_config({"env": {"env": "cliff"}, "algorithm": "q_learning",
                                 "strategy": {"kind": "rrr", "t_inf": [1.0]},
                                 "horizon": 10, "seeds": [1],
                                 "learning_rate": {"exponent": 0.2}})


def test_scheme_from_config_variants():
    scheme = scheme_from_config(
        {"initiation": {"observations": [1]}, "theta": {"family": "sqrt", "c_prime": 0.5},
         "pi_int": {"action": 0}},
        num_observations=3, num_actions=2,
    )
    assert scheme.initiation.tolist() == [0.0, 1.0, 0.0]
    assert scheme.theta_at(4) == 0.75
    with pytest.raises(ConfigError, match="pi_int"):
        scheme_from_config({"initiation": {"observations": [0]}, "pi_int": {}}, 2, 2)
    with pytest.raises(ConfigError, match="initiation"):
        scheme_from_config({"initiation": {"observations": [9]},
                            "pi_int": {"action": 0}}, 2, 2)


def test_toml_and_json_configs_load_identically(tmp_path):
    doc = {"env": {"env": "cliff"}, "horizon": 10}
    json_path = tmp_path / "c.json"
    json_path.write_text(json.dumps(doc))
    toml_path = tmp_path / "c.toml"
    toml_path.write_text('horizon = 10\n[env]\nenv = "cliff"\n')
    assert load_config_file(json_path) == load_config_file(toml_path)


def test_config_hash_is_order_insensitive():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


# ---------------------------------------------------------------------------
# Observation projection
# ---------------------------------------------------------------------------

def test_projection_collapses_twin_states():
    from vsrl.environments import ThreeStateParams, make_three_state
    from vsrl.operators import BackupOperatorSpec, solve_fixed_point

    mdp, channel, meta, _ = make_three_state(ThreeStateParams())
    result = solve_fixed_point(mdp, BackupOperatorSpec(kind="max"))
    obs_q = project_to_observations(result.q.values, channel)
    assert obs_q.shape == (3, 2)
    np.testing.assert_allclose(obs_q[meta.obs_y], result.q.values[meta.state_y_informed])


def test_projection_rejects_disagreeing_states():
    from vsrl.environments import ThreeStateParams, make_three_state

    mdp, channel, meta, _ = make_three_state(ThreeStateParams())
    values = np.zeros((4, 2))
    values[meta.state_y_informed] = 5.0
    with pytest.raises(ValueError, match="disagree"):
        project_to_observations(values, channel)


# ---------------------------------------------------------------------------
# Experiment runs
# ---------------------------------------------------------------------------

def test_run_experiment_shapes_and_aggregate(tmp_path):
    config = parse_experiment_config(small_config(tmp_path))
    out = run_experiment(config)
    # 3 seeds, 2 checkpoints: the aggregate has 2 rows with means over 3 values
    with open(out.aggregate_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert all(row["num_seeds"] == "3" for row in rows)
    # aggregate recomputation from the per-seed files matches exactly
    per_seed = {}
    for seed_out in out.seed_outputs:
        with open(seed_out.metrics_path, newline="") as fh:
            for row in csv.DictReader(fh):
                per_seed.setdefault(row["step"], []).append(float(row["sup_norm_distance"]))
    for row in rows:
        values = per_seed[row["step"]]
        assert float(row["sup_norm_distance_mean"]) == sum(values) / len(values)
        assert float(row["sup_norm_distance_std"]) == statistics.pstdev(values)


def test_rerunning_is_byte_identical(tmp_path):
    doc = small_config(tmp_path, trace="full", horizon=500, seeds=[7],
                       checkpoint_every=250)
    out1 = run_experiment(parse_experiment_config(doc), out_dir=tmp_path / "a")
    out2 = run_experiment(parse_experiment_config(doc), out_dir=tmp_path / "b")
    for name in ("seed_7/metrics.csv", "seed_7/trace.jsonl", "seed_7/qtable.csv",
                 "aggregate.csv", "oracle_q.csv"):
        a = (Path(out1.run_dir) / name).read_bytes()
        b = (Path(out2.run_dir) / name).read_bytes()
        assert a == b, name


def test_outputs_embed_config_hash_and_version(tmp_path):
    doc = small_config(tmp_path, trace="full", horizon=300, seeds=[5],
                       checkpoint_every=150)
    config = parse_experiment_config(doc)
    out = run_experiment(config)
    seed_dir = Path(out.run_dir) / "seed_5"
    with open(seed_dir / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert all(row["config_hash"] == config.hash for row in rows)
    header = json.loads((seed_dir / "trace.jsonl").read_text().splitlines()[0])
    assert header["config_hash"] == config.hash
    meta = json.loads((Path(out.run_dir) / "run_meta.json").read_text())
    assert meta["config_hash"] == config.hash
    assert meta["version"]


def test_trace_replays_the_training_run(tmp_path):
    doc = small_config(tmp_path, trace="full", horizon=200, seeds=[3],
                       checkpoint_every=100)
    out = run_experiment(parse_experiment_config(doc))
    lines = (Path(out.run_dir) / "seed_3" / "trace.jsonl").read_text().splitlines()
    assert len(lines) == 201  # header plus one line per step
    first = json.loads(lines[1])
    assert set(first) == {"t", "s", "o", "a", "r", "s2", "o2", "int"}


def test_distance_metric_decreases_on_this_run(tmp_path):
    doc = small_config(tmp_path, horizon=40_000, checkpoint_every=10_000, seeds=[1])
    out = run_experiment(parse_experiment_config(doc))
    rows = out.seed_outputs[0].metrics_rows
    distances = [row["sup_norm_distance"] for row in rows]
    assert distances[-1] < distances[0]
    assert distances[-1] < 0.5


def test_parallel_runs_match_sequential(tmp_path):
    doc = small_config(tmp_path, horizon=500, checkpoint_every=250)
    seq = run_experiment(parse_experiment_config(doc), parallelism=1,
                         out_dir=tmp_path / "seq")
    par = run_experiment(parse_experiment_config(doc), parallelism=2,
                         out_dir=tmp_path / "par")
    a = (Path(seq.run_dir) / "aggregate.csv").read_bytes()
    b = (Path(par.run_dir) / "aggregate.csv").read_bytes()
    assert a == b


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def test_cli_fixed_point_prints_the_bandit_solution(capsys):
    code = cli_main(["fixed-point", str(CONFIG_DIR / "one_state_bandit.mdp.json"),
                     "--operator", "max"])
    out = capsys.readouterr().out
    assert code == 0
    assert "Q*(0, .) = (2, 1)" in out


def test_cli_check_non_expansion_violation_exits_one(capsys):
    code = cli_main(["check", "non-expansion", "--operator", "boltzmann",
                     "--beta", "5", "--actions", "2"])
    out = capsys.readouterr().out
    assert code == 1
    assert "violated" in out


def test_cli_check_non_expansion_holds_exits_zero(capsys):
    code = cli_main(["check", "non-expansion", "--operator", "max", "--actions", "3",
                     "--trials", "2000", "--search", "200"])
    assert code == 0


def test_cli_crossover(capsys):
    code = cli_main(["crossover", str(CONFIG_DIR / "three_state.env.json"),
                     "--resolution", "0.01"])
    out = capsys.readouterr().out.strip()
    assert code == 0
    assert 0.25 < float(out) < 0.32


def test_cli_usage_error_exits_two():
    with pytest.raises(SystemExit) as err:
        cli_main(["frobnicate"])
    assert err.value.code == 2


def test_cli_config_error_exits_two(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"env": {"env": "cliff"}}))
    code = cli_main(["run", str(bad)])
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_cli_run_and_report_round_trip(tmp_path, capsys):
    doc = load_config_file(CONFIG_DIR / "cliff_rrr_qlearning.json")
    doc = {**doc, "horizon": 20_000, "checkpoint_every": 10_000,
           "out": str(tmp_path / "run")}
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(doc))
    assert cli_main(["run", str(cfg_path)]) == 0
    capsys.readouterr()
    code = cli_main(["report", str(tmp_path / "run"), "--trials", "2000",
                     "--contexts", "6", "--train-steps", "6000"])
    out = capsys.readouterr().out
    assert code == 0
    assert "overall: PASS" in out


def test_cli_nglie_failure_exits_one(tmp_path, capsys):
    path = tmp_path / "strategy.json"
    path.write_text(json.dumps(
        {"strategy": {"kind": "boltzmann", "beta": {"family": "constant", "value": 2.0}}}
    ))
    code = cli_main(["check", "nglie", str(path), "--actions", "4",
                     "--horizon", "5000", "--psi-inf", "0.288765"])
    out = capsys.readouterr().out
    assert code == 1
    assert "non-expansion" in out


def test_cli_resilience(capsys):
    code = cli_main(["check", "resilience", "--family", "rrr_mellowmax",
                     "--mu", "0.05", "--actions", "5"])
    assert code == 0
    assert "strong" in capsys.readouterr().out
