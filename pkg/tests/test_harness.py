import json

import pytest
import yaml

from fedlm import cli
from fedlm.checkpoint import read_checkpoint
from fedlm.errors import ConfigError, ParseError
from fedlm.harness import (
    PRESETS,
    ExperimentSpec,
    apply_overrides,
    derive_seed,
    load_spec,
    parse_override,
    read_rounds_csv,
    run_experiment,
    run_from_resolved,
    spec_from_dict,
    spec_to_dict,
    sweep,
    time_to_target,
)

TINY = {
    "model.n_blocks": 1,
    "model.d_model": 16,
    "model.n_heads": 2,
    "model.expansion_ratio": 2,
    "model.seq_len": 8,
    "data.tokens_per_source": 8000,
    "data.heldout_sequences": 8,
    "federation.rounds": 3,
    "federation.local_steps": 2,
    "client.batch_size": 4,
    "client.lr_max": 1e-2,
}
TINY_ARGS = [f"{k}={v}" for k, v in TINY.items()]

HEADER = "round,sampled_ids,mean_client_loss,eval_ppl,t_local_s,t_comm_s,t_agg_s,t_cum_s,bytes_round\n"


def tiny_spec(**extra):
    return load_spec(None, {**TINY, **extra})


def csv_file(tmp_path, ppls):
    rows = [f"{r},0;1,1.0,{p!r},32.0,1.0,0.0,{33.0 * (r + 1)!r},0.0\n" for r, p in enumerate(ppls)]
    path = tmp_path / "rounds.csv"
    path.write_text(HEADER + "".join(rows))
    return path


# time to target

def test_time_to_target_first_crossing(tmp_path):
    path = csv_file(tmp_path, [60, 50, 45, 40, 38, 36, 35, 29.5, 28.0, 31.0])
    assert time_to_target(path, 30.0) == 33.0 * 8


def test_time_to_target_never_reached(tmp_path):
    assert time_to_target(csv_file(tmp_path, [60, 50, 40]), 10.0) is None


def test_time_to_target_above_start(tmp_path):
    assert time_to_target(csv_file(tmp_path, [60, 50, 40]), 100.0) == 33.0


def test_time_to_target_skips_missing_eval(tmp_path):
    assert time_to_target(csv_file(tmp_path, [float("nan"), 5.0]), 100.0) == 66.0


@pytest.mark.parametrize(
    "text",
    ["", "round,eval_ppl\n1,2\n", HEADER + "0,1,x,2.0,1,1,1,1,1\n", HEADER + "0,1,2.0\n"],
    ids=["empty", "missing-columns", "bad-float", "short-row"],
)
def test_malformed_csv(tmp_path, text):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(ParseError):
        time_to_target(path, 10.0)


def test_missing_csv_is_parse_error(tmp_path):
    with pytest.raises(ParseError):
        read_rounds_csv(tmp_path / "nope.csv")


# spec handling

def test_override_parsing():
    assert parse_override("client.lr_max=0.001") == ("client.lr_max", 1e-3)
    assert load_spec(None, ["client.lr_max=6e-4"]).client.lr_max == 6e-4
    assert parse_override("data.sources=[web, wiki]") == ("data.sources", ["web", "wiki"])
    with pytest.raises(ConfigError):
        parse_override("client.lr_max")
    with pytest.raises(ConfigError):
        apply_overrides({}, {"lr_max": 1})


def test_spec_roundtrip_and_coercion():
    spec = spec_from_dict({"client": {"lr_max": "6e-4"}, "seed": 3})
    assert spec.client.lr_max == 6e-4 and spec.seed == 3
    assert spec_from_dict(spec_to_dict(spec)) == spec
    with pytest.raises(ConfigError):
        spec_from_dict({"client": {"nonsense": 1}})
    with pytest.raises(ConfigError):
        spec_from_dict({"federation": {"rounds": True}})


def test_yaml_and_presets(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump({"seed": 4, "federation": {"rounds": 2}}))
    spec = load_spec(path, ["federation.rounds=5"], ["diloco"])
    assert spec.seed == 4 and spec.federation.rounds == 5
    assert (spec.federation.server_lr, spec.federation.nesterov) == (0.1, True)
    assert load_spec(None, {}, ["hetero8"]).federation.population == 8
    with pytest.raises(ConfigError):
        load_spec(None, {}, ["nope"])
    assert set(PRESETS) >= {"iid", "hetero4", "hetero8", "hetero16", "diloco", "centralized"}


def test_invalid_specs_rejected(tmp_path):
    for bad in ({"data.sources": ["klingon"]}, {"federation.topology": "mesh"},
                {"federation.clients_per_round": 9}, {"model.n_heads": 3},
                {"client.interconnect": "carrier-pigeon"}, {"federation.server_opt": "adam"}):
        with pytest.raises(ConfigError):
            run_experiment(tiny_spec(**bad), tmp_path / "x")


def test_seed_derivation_is_stable():
    assert derive_seed(0, "init") == derive_seed(0, "init")
    assert len({derive_seed(0, "init"), derive_seed(1, "init"), derive_seed(0, "sample")}) == 3


# runs

def test_run_writes_artifacts(tmp_path):
    res = run_experiment(tiny_spec(), tmp_path / "run")
    names = {p.name for p in (tmp_path / "run").iterdir()}
    assert {"config.resolved", "rounds.csv", "summary.json", "timing.json", "checkpoints"} <= names
    rows = read_rounds_csv(tmp_path / "run" / "rounds.csv")
    assert [r["round"] for r in rows] == [0, 1, 2]
    assert res.summary["sync_events"] == 3 and res.summary["total_sequential_steps"] == 6
    assert res.summary["final_ppl"] < res.summary["initial_ppl"]
    assert read_checkpoint(tmp_path / "run" / "checkpoints" / "final.phck").round == 3


def test_rerun_from_resolved_is_bit_identical(tmp_path):
    run_experiment(tiny_spec(), tmp_path / "a")
    run_from_resolved(tmp_path / "a", tmp_path / "b")
    for name in ("rounds.csv", "summary.json", "checkpoints/final.phck"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_centralized_mode(tmp_path):
    res = run_experiment(tiny_spec(**{"run.mode": "centralized"}), tmp_path / "c")
    assert res.summary["sync_events"] == 6
    assert len(read_rounds_csv(tmp_path / "c" / "rounds.csv")) == 3


def test_heterogeneous_by_source(tmp_path):
    spec = tiny_spec(**{"data.policy": "by_source", "data.sources": ["arxiv", "wiki"]})
    res = run_experiment(spec, tmp_path / "h")
    assert res.summary["final_ppl"] < res.summary["initial_ppl"]


def test_sweep_over_k(tmp_path):
    rows = sweep(tiny_spec(), "federation.clients_per_round", [1, 2, 4], tmp_path, target_ppl=1e9)
    assert [r["point"] for r in rows] == [f"clients_per_round={k}" for k in (1, 2, 4)]
    assert all(r["time_to_target_s"] is not None for r in rows)
    assert json.loads((tmp_path / "sweep.json").read_text()) == rows


# command line

def test_cli_run_and_resume(tmp_path, capsys):
    full, part = tmp_path / "full", tmp_path / "part"
    assert cli.main(["run", *sum((["--set", a] for a in TINY_ARGS), []), "--out", str(full)]) == 0
    args = ["run", *sum((["--set", a] for a in TINY_ARGS), []), "--out", str(part)]
    assert cli.main([*args, "--stop-after", "1"]) == 0
    assert not (part / "summary.json").exists()
    assert cli.main([*args, "--resume"]) == 0
    for name in ("rounds.csv", "checkpoints/final.phck"):
        assert (full / name).read_bytes() == (part / name).read_bytes()
    capsys.readouterr()
    assert cli.main(["time-to-target", str(full / "rounds.csv"), "1e9"]) == 0
    assert float(capsys.readouterr().out) > 0
    assert cli.main(["inspect-checkpoint", str(full / "checkpoints" / "final.phck")]) == 0
    assert json.loads(capsys.readouterr().out)


def test_cli_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("FEDLM_OUTPUT_ROOT", str(tmp_path))
    args = sum((["--set", a] for a in TINY_ARGS), [])
    assert cli.main(["run", *args, "--set", "run.name=envrun", "--set", "federation.rounds=1"]) == 0
    assert (tmp_path / "envrun" / "rounds.csv").exists()


def test_cli_sweep(tmp_path, capsys):
    args = sum((["--set", a] for a in TINY_ARGS), [])
    assert cli.main(["sweep", *args, "--set", "federation.rounds=1",
                     "--grid", "federation.topology=ps,rar", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [json.loads(l)["point"] for l in lines] == ["topology=ps", "topology=rar"]


def test_cli_errors_exit_2(tmp_path, capsys):
    assert cli.main(["time-to-target", str(tmp_path / "missing.csv"), "3"]) == 2
    assert "error" in capsys.readouterr().err
    assert cli.main(["run", "--set", "federation.rounds=0", "--out", str(tmp_path)]) == 2


def test_default_grids():
    assert cli._parse_grid("federation.local_steps") == ("federation.local_steps", [64, 128, 512])
    assert cli._parse_grid("federation.clients_per_round")[1] == [1, 2, 4, 8, 16]
    assert cli._parse_grid("client.lr_max=1e-3,0.01") == ("client.lr_max", ["1e-3", 0.01])
    with pytest.raises(Exception, match="default grid"):
        cli._parse_grid("client.lr_max")
