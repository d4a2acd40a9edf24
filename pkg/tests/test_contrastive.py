import importlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlct.contrastive import (
    AdamW,
    Batch,
    EarlyStopping,
    Frozen,
    ModelSpec,
    PositiveSets,
    StudyItem,
    TrainConfig,
    build_positive_sets,
    init_params,
    load_checkpoint,
    loss_and_grads,
    multipositive_loss,
    multipositive_loss_and_grad,
    save_checkpoint,
    train,
)
from vlct.contrastive.checkpoint import read_header
from vlct.contrastive.model import batch_loss, flatten, unflatten
from vlct.contrastive.train import clip_global_norm
from vlct.errors import EmptySplit, InvalidTemperature, ShapeMismatch

# the package re-exports the function ``train``, which shadows the submodule attribute
train_mod = importlib.import_module("vlct.contrastive.train")


def infonce_oracle(s, tau):
    """Plain symmetric InfoNCE, one loop per direction, no shifting."""
    n = len(s)
    total = 0.0
    for i in range(n):
        row = sum(math.exp(s[i][k] / tau) for k in range(n))
        col = sum(math.exp(s[k][i] / tau) for k in range(n))
        total -= math.log(math.exp(s[i][i] / tau) / row)
        total -= math.log(math.exp(s[i][i] / tau) / col)
    return total / (2 * n)


def random_sim(rng, n, d):
    V = rng.normal(size=(n, d))
    T = rng.normal(size=(n, d))
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    T /= np.linalg.norm(T, axis=1, keepdims=True)
    return V @ T.T


groups = st.lists(st.integers(0, 3), min_size=1, max_size=7)


class TestPositiveSets:
    def test_examples(self):
        P = build_positive_sets(["a", "a", "b"])
        assert [P.members(i) for i in range(3)] == [{0, 1}, {0, 1}, {2}]
        assert all(build_positive_sets(["x", "y", "z"]).members(i) == {i} for i in range(3))
        P = build_positive_sets(["No acute findings.", "no acute findings"])
        assert P.members(0) == {0, 1}

    def test_empty(self):
        with pytest.raises(ValueError):
            build_positive_sets([])

    @given(st.lists(st.sampled_from(["a", "b", "A.", "c "]), min_size=1, max_size=8))
    def test_equivalence_relation(self, texts):
        m = build_positive_sets(texts).mask
        assert m.diagonal().all()
        np.testing.assert_array_equal(m, m.T)
        assert np.array_equal((m.astype(int) @ m.astype(int)) > 0, m)


class TestLoss:
    def test_matches_infonce_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n, d = rng.integers(1, 9), rng.integers(1, 17)
            s = random_sim(rng, n, d)
            tau = float(rng.uniform(0.03, 1.0))
            got = multipositive_loss(s, np.eye(n, dtype=bool), tau)
            assert abs(got - infonce_oracle(s.tolist(), tau)) <= 1e-9

    def test_identity_example(self):
        got = multipositive_loss(np.eye(2), np.eye(2, dtype=bool), 1.0)
        assert abs(got - math.log(1 + math.exp(-1))) <= 1e-12
        assert abs(got - 0.313262) <= 1e-6

    def test_all_positive_is_zero(self):
        s = random_sim(np.random.default_rng(1), 5, 4)
        assert multipositive_loss(s, np.ones((5, 5), dtype=bool), 0.07) <= 1e-12

    def test_errors(self):
        with pytest.raises(InvalidTemperature):
            multipositive_loss(np.eye(2), np.eye(2, dtype=bool), 0.0)
        with pytest.raises(InvalidTemperature):
            multipositive_loss(np.eye(2), np.eye(2, dtype=bool), float("nan"))
        with pytest.raises(ShapeMismatch):
            multipositive_loss(np.eye(2), np.eye(3, dtype=bool), 1.0)

    def test_stable_at_small_tau(self):
        s = random_sim(np.random.default_rng(2), 6, 3)
        assert math.isfinite(multipositive_loss(s, np.eye(6, dtype=bool), 1e-4))

    @settings(max_examples=60)
    @given(groups, st.integers(0, 10_000), st.floats(0.01, 2.0), st.floats(0.1, 10.0))
    def test_scale_invariance(self, g, seed, tau, c):
        s = random_sim(np.random.default_rng(seed), len(g), 3)
        P = PositiveSets.from_groups(g)
        assert multipositive_loss(c * s, P, c * tau) == pytest.approx(multipositive_loss(s, P, tau), abs=1e-9)

    @settings(max_examples=60)
    @given(groups, st.integers(0, 10_000), st.randoms())
    def test_relabel_invariance_and_nonnegative(self, g, seed, rnd):
        s = random_sim(np.random.default_rng(seed), len(g), 3)
        P = PositiveSets.from_groups(g)
        perm = list(range(len(g)))
        rnd.shuffle(perm)
        base = multipositive_loss(s, P, 0.1)
        assert base >= 0
        permuted = multipositive_loss(s[np.ix_(perm, perm)], P.mask[np.ix_(perm, perm)], 0.1)
        assert permuted == pytest.approx(base, abs=1e-9)

    @settings(max_examples=60)
    @given(groups, st.integers(0, 10_000), st.integers(0, 3), st.integers(0, 3))
    def test_merging_classes_never_increases(self, g, seed, a, b):
        s = random_sim(np.random.default_rng(seed), len(g), 3)
        merged = [a if x == b else x for x in g]
        before = multipositive_loss(s, PositiveSets.from_groups(g), 0.2)
        after = multipositive_loss(s, PositiveSets.from_groups(merged), 0.2)
        assert after <= before + 1e-12

    def test_analytic_grad_of_s_and_tau(self):
        rng = np.random.default_rng(3)
        s = random_sim(rng, 5, 4)
        P = PositiveSets.from_groups([0, 0, 1, 2, 1])
        _, ds, dlt = multipositive_loss_and_grad(s, P, math.log(0.3))
        h = 1e-6
        for i, j in [(0, 0), (0, 1), (2, 4), (4, 3)]:
            e = np.zeros_like(s)
            e[i, j] = h
            num = (multipositive_loss(s + e, P, 0.3) - multipositive_loss(s - e, P, 0.3)) / (2 * h)
            assert ds[i, j] == pytest.approx(num, rel=1e-6, abs=1e-9)
        num = (multipositive_loss(s, P, math.exp(math.log(0.3) + h))
               - multipositive_loss(s, P, math.exp(math.log(0.3) - h))) / (2 * h)
        assert dlt == pytest.approx(num, rel=1e-6)


D, KV, KT = 8, 6, 10


def tiny_model(aggregator, project_text=False, seed=0):
    rng = np.random.default_rng(seed)
    frozen = Frozen(rng.normal(size=(D, KV)) / 3, rng.normal(size=(D, KT)) / 3)
    spec = ModelSpec(d=D, aggregator=aggregator, vision_rank=2, text_rank=2, max_slices=6,
                     heads=4, project_text=project_text, tau_init=0.5)
    params = init_params(spec, frozen, seed)
    # move off the zero-B initialisation so every parameter carries gradient
    flat = {k: v + 0.2 * rng.normal(size=np.shape(v)) if k != "log_tau" else v
            for k, v in flatten(params).items()}
    params = unflatten(flat, params)
    batch = Batch([rng.normal(size=(s, KV)) for s in (2, 5, 3, 4)], rng.normal(size=(4, KT)),
                  PositiveSets.from_groups([0, 1, 0, 2]))
    return params, frozen, spec, batch


class TestGradients:
    @pytest.mark.parametrize("aggregator, project_text", [
        ("mean", False), ("attention", False), ("lite_transformer", False), ("mean", True)])
    def test_finite_differences(self, aggregator, project_text):
        params, frozen, spec, batch = tiny_model(aggregator, project_text)
        _, grads = loss_and_grads(params, frozen, spec, batch)
        flat = flatten(params)
        assert set(grads) == set(flat)
        h = 1e-4
        for key, value in flat.items():
            value = np.asarray(value, dtype=np.float64)
            for idx in np.ndindex(value.shape):
                plus, minus = value.copy(), value.copy()
                plus[idx] += h
                minus[idx] -= h
                fp = batch_loss(unflatten({**flat, key: plus}, params), frozen, spec, batch)
                fm = batch_loss(unflatten({**flat, key: minus}, params), frozen, spec, batch)
                num = (fp - fm) / (2 * h)
                ana = float(np.asarray(grads[key])[idx])
                assert abs(ana - num) <= 1e-4 * max(abs(ana), abs(num)) + 1e-9, (key, idx, ana, num)

    def test_log_tau_flat_at_zero_loss(self):
        s = np.full((4, 4), 0.3)
        loss, _, dlt = multipositive_loss_and_grad(s, np.ones((4, 4), dtype=bool), math.log(0.07))
        assert loss <= 1e-12 and dlt == 0.0

    def test_dropout_rng_matches_loss(self):
        params, frozen, spec, batch = tiny_model("attention")
        loss, _ = loss_and_grads(params, frozen, spec, batch, np.random.default_rng(5))
        assert loss == batch_loss(params, frozen, spec, batch, np.random.default_rng(5))


class TestOptimizer:
    def test_log_tau_not_decayed(self):
        cfg = TrainConfig(lr=0.1, weight_decay=0.5)
        flat = {"w": np.ones(3), "log_tau": np.array(1.0)}
        out = AdamW(cfg).step(flat, {"w": np.zeros(3), "log_tau": np.array(0.0)})
        np.testing.assert_allclose(out["w"], 0.95)
        assert float(out["log_tau"]) == 1.0

    def test_first_step_magnitude(self):
        # bias-corrected Adam moves each coordinate by lr on the first step
        out = AdamW(TrainConfig(lr=0.01, weight_decay=1e-9)).step({"w": np.zeros(2)},
                                                                   {"w": np.array([3.0, -0.5])})
        np.testing.assert_allclose(out["w"], [-0.01, 0.01], rtol=1e-6)

    def test_clip(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        clipped, norm = clip_global_norm(grads, 1.0)
        assert norm == 5.0
        np.testing.assert_allclose([clipped["a"][0], clipped["b"][0]], [0.6, 0.8])
        same, _ = clip_global_norm(grads, 10.0)
        assert same is grads

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)


class TestEarlyStopping:
    def test_trace(self):
        es = EarlyStopping(3)
        stops = [es.update(e, v) for e, v in enumerate([1.0, 1.1, 1.2, 1.3], start=1)]
        assert stops == [False, False, False, True]
        assert es.best_epoch == 1

    def test_ties_keep_earlier(self):
        es = EarlyStopping(5)
        for e, v in enumerate([2.0, 1.0, 1.0], start=1):
            es.update(e, v)
        assert es.best_epoch == 2

    def test_train_returns_best_epoch(self, monkeypatch):
        items = separable_items(12, seed=0)
        train_items, val_items = items[:8], items[8:]
        # epoch 0 (untrained) first, then the hand trace for epochs 1-4
        vals = iter([2.0, 1.0, 1.1, 1.2, 1.3])
        real = train_mod.evaluate_loss

        def fake(params, frozen, spec, its, bs):
            return next(vals) if its is val_items else real(params, frozen, spec, its, bs)

        snapshots = []
        real_unflatten = train_mod.unflatten

        def recording_unflatten(flat, template):
            snapshots.append(real_unflatten(flat, template))
            return snapshots[-1]

        monkeypatch.setattr(train_mod, "evaluate_loss", fake)
        monkeypatch.setattr(train_mod, "unflatten", recording_unflatten)
        spec, frozen = small_spec()
        res = train(train_items, val_items, spec, frozen, TrainConfig(lr=1e-2, batch_size=8))
        assert res.stopped_early and res.best_epoch == 1
        assert [h["epoch"] for h in res.history] == [0, 1, 2, 3, 4]
        # one optimiser step per epoch here, so the epoch-1 parameters are the first snapshot
        assert len(snapshots) == 4 and res.params is snapshots[0]


def small_spec(aggregator="mean", d=16):
    rng = np.random.default_rng(99)
    return (ModelSpec(d=d, aggregator=aggregator, vision_rank=4, text_rank=4, max_slices=8, heads=4),
            Frozen(rng.normal(size=(d, 12)) / 3, rng.normal(size=(d, 12)) / 3))


def separable_items(n, seed=0, classes=3):
    rng = np.random.default_rng(seed)
    vproto, tproto = rng.normal(size=(classes, 12)), rng.normal(size=(classes, 12))
    items = []
    for i in range(n):
        c = i % classes
        feats = vproto[c] + 0.3 * rng.normal(size=(int(rng.integers(3, 7)), 12))
        items.append(StudyItem(f"S{i}", feats, tproto[c] + 0.1 * rng.normal(size=12), f"class {c}"))
    return items


class TestTrain:
    def test_loss_decreases(self):
        items = separable_items(30)
        spec, frozen = small_spec("attention")
        res = train(items[:24], items[24:], spec, frozen, TrainConfig(lr=5e-3, max_epochs=5))
        assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]

    def test_deterministic(self, tmp_path):
        items = separable_items(20, seed=3)
        spec, frozen = small_spec("lite_transformer")
        cfg = TrainConfig(lr=1e-3, max_epochs=2, seed=4)
        a = train(items[:16], items[16:], spec, frozen, cfg, metrics_path=tmp_path / "m.jsonl")
        b = train(items[:16], items[16:], spec, frozen, cfg)
        fa, fb = flatten(a.params), flatten(b.params)
        assert all(np.array_equal(fa[k], fb[k]) for k in fa)
        lines = (tmp_path / "m.jsonl").read_text().splitlines()
        assert len(lines) == len(a.history) == 3

    def test_split_errors(self):
        items = separable_items(4)
        spec, frozen = small_spec()
        with pytest.raises(EmptySplit):
            train(items, [], spec, frozen)
        with pytest.raises(EmptySplit):
            train(items, items[:1], spec, frozen)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params, frozen, spec, batch = tiny_model("lite_transformer", project_text=True)
        path = save_checkpoint(tmp_path / "c.npz", params, spec, {"seed": 7})
        loaded, spec2, header = load_checkpoint(path, frozen)
        assert spec2 == spec and header["seed"] == 7
        assert read_header(path)["spec"]["aggregator"] == "lite_transformer"
        fa, fb = flatten(params), flatten(loaded)
        assert fa.keys() == fb.keys()
        assert all(np.array_equal(fa[k], fb[k]) for k in fa)
        assert batch_loss(loaded, frozen, spec2, batch) == batch_loss(params, frozen, spec, batch)
