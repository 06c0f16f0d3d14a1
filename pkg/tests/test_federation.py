from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import fedseg.federation as fed
from fedseg.data import generate_dataset, iid_partition, split_test, to_arrays
from fedseg.errors import AggregationError, ConfigError, TrainingError
from fedseg.federation import (
    ClientData,
    RoundPlan,
    TrainerConfig,
    TrainLog,
    configure_experiment,
    fedavg,
    run_cl,
    run_fl,
    run_ll,
    scoped_samples,
)
from fedseg.model import UNetConfig, build_model

CFG = UNetConfig(levels=2, base_channels=8)


def make_client(cid, n_train, n_val, seed, h=8, w=16):
    samples = generate_dataset(n_train + n_val, seed=seed)
    x, y = to_arrays(samples, h, w)
    return ClientData(cid, x[:n_train], y[:n_train], x[n_train:], y[n_train:])


def pooled(*clients):
    cat = np.concatenate
    return ClientData(-1, cat([c.train_x for c in clients]), cat([c.train_y for c in clients]),
                      cat([c.val_x for c in clients]), cat([c.val_y for c in clients]))


def assert_states_equal(a, b):
    assert list(a) == list(b)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k], err_msg=k)


class TestFedAvg:
    def test_scalar_example(self):
        out = fedavg([{"w": np.array(1.0)}, {"w": np.array(3.0)}], [1, 3])
        assert out["w"] == pytest.approx(2.5, abs=1e-15)

    def test_uniform_counts_give_plain_mean(self, rng):
        sets = [{"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)} for _ in range(5)]
        out = fedavg(sets, [331] * 5)
        for k in ("a", "b"):
            np.testing.assert_allclose(out[k], np.mean([s[k] for s in sets], axis=0), rtol=1e-13, atol=1e-15)

    def test_identical_sets_fixed_point(self, rng):
        s = {"a": rng.normal(size=(4, 4))}
        out = fedavg([s, dict(s), dict(s)], [5, 1, 9])
        np.testing.assert_array_equal(out["a"], s["a"])

    def test_buffers_averaged_like_weights(self):
        a = build_model(CFG, seed=0).state_dict()
        b = build_model(CFG, seed=1).state_dict()
        b["enc0.bn1.running_mean"][:] = 2.0
        out = fedavg([a, b], [1, 1])
        np.testing.assert_allclose(out["enc0.bn1.running_mean"], 1.0)

    @given(
        vals=st.lists(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), min_size=1, max_size=6),
        weights=st.lists(st.integers(0, 1000), min_size=6, max_size=6),
    )
    def test_convexity(self, vals, weights):
        w = weights[: len(vals)]
        if sum(w) == 0:
            return
        out = fedavg([{"p": np.array(v)} for v in vals], w)["p"]
        arr = np.array(vals)
        tol = 1e-12 * (1 + np.abs(arr).max())
        assert np.all(out >= arr.min(axis=0) - tol) and np.all(out <= arr.max(axis=0) + tol)

    @given(weights=st.lists(st.integers(1, 500), min_size=2, max_size=5), scale=st.sampled_from([2.0, 0.25, 1024.0]))
    def test_scale_invariance(self, weights, scale):
        rng = np.random.default_rng(len(weights))
        sets = [{"p": rng.normal(size=5)} for _ in weights]
        a = fedavg(sets, weights)["p"]
        b = fedavg(sets, [w * scale for w in weights])["p"]
        np.testing.assert_array_equal(a, b)

    def test_errors(self):
        with pytest.raises(AggregationError):
            fedavg([{"a": np.zeros(2)}, {"b": np.zeros(2)}], [1, 1])
        with pytest.raises(AggregationError):
            fedavg([{"a": np.zeros(2)}, {"a": np.zeros(3)}], [1, 1])
        with pytest.raises(ConfigError):
            fedavg([{"a": np.zeros(2)}, {"a": np.zeros(2)}], [0, 0])
        with pytest.raises(ConfigError):
            fedavg([{"a": np.zeros(2)}], [-1])
        with pytest.raises(AggregationError):
            fedavg([], [])


class TestRoundPlan:
    def test_epochs_per_round(self):
        assert RoundPlan().epochs_per_round == 10
        assert RoundPlan(20, 4).epochs_per_round == 5

    def test_invalid(self):
        with pytest.raises(ConfigError):
            RoundPlan(20, 3)
        with pytest.raises(ConfigError):
            RoundPlan(participants=())
        with pytest.raises(ConfigError):
            RoundPlan(participants=(1, 1))


class TestEquivalences:
    def test_one_client_fl_is_ll(self):
        data = make_client(0, 6, 2, seed=1)
        plan = RoundPlan(3, 1, (0,), 4)
        tcfg = TrainerConfig(lr=1e-2)
        glob, fl_log = run_fl(plan, {0: data}, CFG, tcfg, seed=5, workers=1)
        model, ll_log = run_ll(plan, data, CFG, tcfg, seed=5)
        assert_states_equal(glob.state, model.state_dict())
        assert [r["train_loss"] for r in fl_log] == [r["train_loss"] for r in ll_log]

    def test_cl_on_one_client_is_ll(self):
        data = make_client(0, 5, 2, seed=2)
        plan = RoundPlan(2, 1, (0,), 2)
        a, _ = run_cl(plan, data, CFG, seed=3)
        b, _ = run_ll(plan, data, CFG, seed=3)
        assert_states_equal(a.state_dict(), b.state_dict())

    def test_single_step_sgd_matches_pooled(self):
        c0, c1 = make_client(0, 3, 0, seed=3), make_client(1, 5, 0, seed=4)
        tcfg = TrainerConfig(optimizer="sgd", lr=0.5, loss_reduction="per_sample", norm_mode="eval", full_batch=True)
        plan = RoundPlan(1, 1, (0, 1), 4)
        glob, _ = run_fl(plan, {0: c0, 1: c1}, CFG, tcfg, seed=0, workers=1)
        central, _ = run_cl(plan, pooled(c0, c1), CFG, tcfg, seed=0)
        init = build_model(CFG, seed=0).state_dict()
        diffs = [np.abs(glob.state[k] - central.state_dict()[k]).max() for k in init]
        moved = max(np.abs(glob.state[k] - init[k]).max() for k in init)
        assert max(diffs) <= 1e-10 and moved > 1e-3

    def test_parallel_matches_sequential(self):
        clients = {c: make_client(c, 4, 1, seed=10 + c) for c in range(3)}
        plan = RoundPlan(2, 2, (0, 1, 2), 2)
        a, la = run_fl(plan, clients, CFG, TrainerConfig(lr=1e-2), seed=1, workers=1)
        b, lb = run_fl(plan, clients, CFG, TrainerConfig(lr=1e-2), seed=1, workers=2)
        assert_states_equal(a.state, b.state)
        assert la.records == lb.records

    def test_same_seed_same_val_loss(self):
        data = make_client(0, 4, 2, seed=6)
        plan = RoundPlan(2, 1, (0,), 2)
        _, a = run_ll(plan, data, CFG, seed=9)
        _, b = run_ll(plan, data, CFG, seed=9)
        assert a.records[-1]["val_loss"] == b.records[-1]["val_loss"]


class TestRounds:
    def test_broadcast_identical_at_round_start(self, monkeypatch):
        seen = []
        original = fed._client_round

        def spy(args):
            seen.append((args[4].start, args[1]))
            return original(args)

        monkeypatch.setattr(fed, "_client_round", spy)
        clients = {c: make_client(c, 3, 1, seed=20 + c) for c in range(3)}
        run_fl(RoundPlan(4, 2, (0, 1, 2), 2), clients, CFG, TrainerConfig(lr=1e-2), seed=0, workers=1)
        for start in (0, 2):
            states = [s for e, s in seen if e == start]
            assert len(states) == 3
            for s in states[1:]:
                assert_states_equal(states[0], s)

    def test_log_records(self):
        clients = {c: make_client(c, 3, 1, seed=30 + c) for c in range(2)}
        glob, logbook = run_fl(RoundPlan(4, 2, (0, 1), 2), clients, CFG, TrainerConfig(lr=1e-2),
                               seed=0, run_id="r", config="baseline", workers=1)
        assert glob.round == 2
        assert len(logbook) == 8
        r = logbook.records[-1]
        assert (r["paradigm"], r["config"], r["client"], r["round"], r["epoch"]) == ("FL", "baseline", 1, 1, 3)
        assert r["val_loss"] is not None and r["train_loss"] >= 0

    def test_jsonl_round_trip(self, tmp_path):
        logbook = TrainLog([{"run_id": "x", "paradigm": "LL", "config": "baseline", "client": 2, "round": None,
                             "epoch": 0, "train_loss": 0.5, "val_loss": 0.25}])
        logbook.write_jsonl(tmp_path / "log.jsonl")
        assert TrainLog.read_jsonl(tmp_path / "log.jsonl").records == logbook.records

    def test_non_finite_loss_names_client_and_epoch(self):
        bad = make_client(3, 4, 0, seed=1)
        bad.train_x[2, 0, 0, 0] = np.nan
        with pytest.raises(TrainingError) as info:
            run_fl(RoundPlan(2, 1, (3,), 4), {3: bad}, CFG, seed=0, workers=1)
        assert info.value.client == 3 and info.value.epoch == 0
        assert "client 3" in str(info.value)

    def test_missing_participant(self):
        with pytest.raises(ConfigError):
            run_fl(RoundPlan(1, 1, (0, 1)), {0: make_client(0, 2, 0, seed=0)}, CFG, workers=1)


class TestConfigurations:
    def test_baseline_trains_seven_models(self):
        rs = configure_experiment("baseline")
        assert [m.name for m in rs.models] == ["CL", "FL", "LL0", "LL1", "LL2", "LL3", "LL4"]
        assert rs.corruption.kind == "none"

    def test_exclusion(self):
        rs = configure_experiment("exclusion")
        assert rs.fl_participants == (1, 2, 3, 4) and rs.cl_pool == (1, 2, 3, 4)
        assert "LL0" not in [m.name for m in rs.models] and len(rs.models) == 6
        _, rest = split_test(list(range(2066)), 0.1, 0)
        plan = iid_partition(rest, 5, 0)
        assert sum(len(plan.members(c)) for c in rs.cl_pool) == 1860 - 372

    def test_corruption_kinds(self):
        assert configure_experiment("label_manip").corruption.kind == "label"
        assert configure_experiment("image_manip").corruption.kind == "image"

    def test_unknown_id(self):
        with pytest.raises(ConfigError):
            configure_experiment("mixed")

    @pytest.mark.parametrize("config_id,field", [("label_manip", "mask"), ("image_manip", "image")])
    def test_only_faulty_client_changes(self, config_id, field):
        samples = {s.id: s for s in generate_dataset(30, seed=0)}
        _, rest = split_test(list(samples), 0.1, 0)
        plan = iid_partition(rest, 5, 0)
        versions = scoped_samples(configure_experiment(config_id), samples, plan)
        changed = set()
        for i, s in samples.items():
            v = versions[i]
            if v.image.tobytes() != s.image.tobytes():
                changed.add(("image", i))
            if v.union_mask.tobytes() != s.union_mask.tobytes():
                changed.add(("mask", i))
        assert {i for _, i in changed} == set(plan.members(0))
        assert {f for f, _ in changed} == {field}

    def test_baseline_versions_untouched(self):
        samples = {s.id: s for s in generate_dataset(10, seed=0)}
        plan = iid_partition(list(samples), 5, 0)
        versions = scoped_samples(configure_experiment("baseline"), samples, plan)
        assert all(versions[i] is samples[i] for i in samples)
