from dataclasses import replace

import numpy as np
import pytest

from lighttune.data_io import TELEMETRY_SCHEMA, RunConfig, dump_model, load_packaged_model
from lighttune.env_sim import LinkEnvironment
from lighttune.experiments import (
    SimulationError,
    build_packaged_model,
    dithered_stream,
    link_run_config,
    run_link,
    run_prediction,
    scenario_for_run,
    summarize,
)
from lighttune.ff_core import BLER_CLASSES, MlpModel, init_model


@pytest.fixture(scope="module")
def packaged():
    return load_packaged_model()


def _stream(name, periods=2000, seed=0):
    env = LinkEnvironment(replace(scenario_for_run(name, RunConfig(), seed=seed), duration=periods))
    return dithered_stream(env)


def test_packaged_model_is_reproducible(packaged):
    model, norm = build_packaged_model()
    assert dump_model(model, norm) == dump_model(*packaged)


def test_frozen_model_degrades_under_shift(packaged):
    mae = {s: run_prediction(*packaged, _stream(s)).mae_from(200) for s in ("S0", "S1", "S2")}
    assert mae["S0"] < mae["S1"] and mae["S0"] < mae["S2"]


def test_training_beats_initialisation(packaged):
    stream = _stream("S0")
    init = init_model([13, 32, 32], seed=0, label_scale=30.0)
    assert run_prediction(*packaged, stream).mae < 0.5 * run_prediction(init, packaged[1], stream).mae


def test_finetuning_recovers_after_shift(packaged):
    model, norm = packaged
    stream = _stream("S1")
    frozen = run_prediction(model, norm, stream).mae_from(200)
    tuned = run_prediction(model, norm, stream, RunConfig().finetune).mae_from(200)
    assert tuned < 0.6 * frozen


def test_run_link_rows_follow_schema(packaged):
    cfg = RunConfig()
    env = LinkEnvironment(replace(scenario_for_run("S1", cfg), duration=60))
    for alg in ("olla", "cqi-tune", "ri-cqi-tune", "frozen"):
        rows = run_link(env, *packaged, link_run_config(cfg, alg))
        assert len(rows) == 60 and [r["period"] for r in rows] == list(range(60))
        for r in rows:
            assert set(r) == set(TELEMETRY_SCHEMA)
            assert 1 <= r["cqi"] <= 15 and 1 <= r["rank"] <= 4
            assert r["p_hat"] in BLER_CLASSES.values
            assert 0.0 <= r["p_true_empirical"] <= 1.0
        if alg in ("olla", "frozen"):
            assert not any(r["triggered"] for r in rows)
        s = summarize(rows)
        assert s["periods"] == 60 and s["max_mac_count"] > 0


def test_run_link_is_deterministic(packaged):
    cfg = RunConfig()
    spec = replace(scenario_for_run("S2", cfg), duration=80)
    a = run_link(LinkEnvironment(spec), *packaged, link_run_config(cfg, "cqi-tune"))
    b = run_link(LinkEnvironment(spec), *packaged, link_run_config(cfg, "cqi-tune"))
    assert a == b


def test_simulation_error_names_period(packaged):
    model, norm = packaged
    cfg = RunConfig()
    env = LinkEnvironment(replace(scenario_for_run("S1", cfg), duration=50))
    huge = MlpModel([t * 1e60 for t in model.thetas])
    with np.errstate(all="ignore"), pytest.raises(SimulationError) as info:
        run_link(env, huge, norm, link_run_config(cfg, "cqi-tune"))
    assert 0 <= info.value.period < 50
    assert f"period {info.value.period}" in str(info.value)


def test_unknown_algorithm():
    with pytest.raises(ValueError):
        link_run_config(RunConfig(), "magic")
