import math

import numpy as np
import pytest

from hypball import data as dt
from hypball import layers as ly
from hypball import training as tr
from hypball.errors import TrainingError, UsageError
from hypball.losses import LossWeights


def small_setup(seed=0):
    ds = dt.generate_synthetic(dt.HierarchySpec(n_per_leaf=20, n_bonafide=40, modality_widths=(6, 5),
                                                latent_dim=6, seed=seed))
    return ds, dt.split(ds, "seen", seed=seed)


def small_config(**kw):
    base = dict(dim=4, epochs=3, backbone_hidden=(8,), backbone_out=6, batch_size=16, lr=1e-3)
    base.update(kw)
    return tr.TrainConfig(**base)


def test_lr_schedule():
    cfg = tr.TrainConfig()
    assert [tr.lr_at_epoch(cfg, e) for e in (0, 9)] == [1e-4, 1e-4]
    assert tr.lr_at_epoch(cfg, 10) == pytest.approx(8e-5, rel=1e-15)
    assert tr.lr_at_epoch(cfg, 25) == pytest.approx(6.4e-5, rel=1e-15)
    with pytest.raises(UsageError):
        tr.lr_at_epoch(cfg, -1)


def test_adam_zero_grad_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    new, _ = tr.adam_step(p, {"w": np.zeros(2)}, tr.AdamState(), 1e-3)
    np.testing.assert_array_equal(new["w"], p["w"])


def test_adam_first_step_is_sign():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([3.0, -0.01, 100.0])}
    new, state = tr.adam_step(p, g, tr.AdamState(), 1e-3)
    np.testing.assert_allclose(new["w"] - p["w"], -1e-3 * np.sign(g["w"]), rtol=1e-5)
    assert state.step == 1


def test_adam_weight_decay_coupled():
    p = {"w": np.array([2.0])}
    new, _ = tr.adam_step(p, {"w": np.zeros(1)}, tr.AdamState(), 1e-3, weight_decay=0.1)
    assert new["w"][0] == pytest.approx(2.0 - 1e-3, rel=1e-6)


def test_adam_rejects_non_finite():
    with pytest.raises(TrainingError):
        tr.adam_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, tr.AdamState(), 1e-3)


def test_batches_cover_and_pair():
    labels = np.array([1] * 7 + [0] * 40)
    batches = tr.make_batches(labels, 8, np.random.default_rng(0))
    assert sorted(np.concatenate(batches).tolist()) == list(range(47))
    assert all(np.sum(labels[b] == 1) >= 2 for b in batches)


def test_config_validation():
    with pytest.raises(UsageError):
        tr.TrainConfig(mode="spherical")
    with pytest.raises(UsageError):
        tr.TrainConfig(alpha=1.0)
    with pytest.raises(UsageError):
        tr.TrainConfig.from_dict({"dim": 4, "bogus": 1})
    cfg = small_config(weights=LossWeights(tau=0.5))
    assert tr.TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_train_deterministic():
    ds, split = small_setup()
    a = tr.train_run(small_config(), ds, split)
    b = tr.train_run(small_config(), ds, split)
    assert a.log == b.log
    for k, v in a.state().items():
        np.testing.assert_allclose(b.state()[k], v, rtol=0, atol=1e-12)


def test_loss_decreases_default_data():
    ds = dt.generate_synthetic(dt.HierarchySpec(seed=0))
    split = dt.split(ds, "seen", seed=0)
    cfg = tr.TrainConfig(dim=16, epochs=5, seed=0)
    hist = tr.train_run(cfg, ds, split).history
    assert hist[4]["train_loss"] < hist[0]["train_loss"]


def test_zero_contrastive_weight_matches_pure_bce():
    # 40 bonafide, batch 16: pair cap never binds so both runs batch identically
    ds, split = small_setup()
    a = tr.train_run(small_config(contrastive="none"), ds, split)
    b = tr.train_run(small_config(weights=LossWeights(lambda2=0.0)), ds, split)
    for k, v in a.state().items():
        np.testing.assert_allclose(b.state()[k], v, rtol=1e-12, atol=1e-15)


def test_euclidean_shares_data_order(monkeypatch):
    ds, split = small_setup()
    seen = []
    orig = tr.make_batches

    def spy(*args, **kw):
        out = orig(*args, **kw)
        seen.append([b.tolist() for b in out])
        return out

    monkeypatch.setattr(tr, "make_batches", spy)
    cfg = small_config(epochs=2)
    tr.train_run(cfg, ds, split)
    hyp = list(seen)
    seen.clear()
    tr.train_run(tr.euclidean_baseline(cfg), ds, split)
    assert seen == hyp


def test_embeddings_respect_clip():
    ds, split = small_setup()
    res = tr.train_run(small_config(lr=1e-2), ds, split)
    bound = (1 - 0.1) / math.sqrt(0.1)
    assert all(row["max_emb_norm"] <= bound + 1e-12 for row in res.history)
    emb = tr.embeddings(res.model, "unimodal", [ds.features("rgb")])
    assert np.max(np.linalg.norm(emb, axis=1)) <= bound + 1e-12


def test_multimodal_run_logs_dis():
    ds, split = small_setup()
    res = tr.train_run(small_config(epochs=2), ds, split, pipeline="multimodal")
    assert all("dis_loss" in row for row in res.history)
    p = tr.predict(res.model, "multimodal", [ds.features("rgb"), ds.features("depth")])
    assert p.shape == (len(ds),) and np.all((p >= 0) & (p <= 1))


def test_unknown_modality():
    ds, split = small_setup()
    with pytest.raises(UsageError):
        tr.train_run(small_config(modality="ir"), ds, split)


def test_save_and_load_run(tmp_path):
    ds, split = small_setup()
    res = tr.train_run(small_config(epochs=2), ds, split)
    out = tr.save_run(res, tmp_path / "run")
    header = (out / "log.csv").read_text().splitlines()[0]
    assert header == ",".join(tr.LOG_COLUMNS)
    model, meta = tr.load_model(out / "checkpoint.json")
    assert meta["pipeline"] == "unimodal"
    x = [ds.features("rgb")]
    np.testing.assert_array_equal(tr.predict(model, "unimodal", x), tr.predict(res.model, "unimodal", x))
    for k, v in ly.state_dict(model).items():
        np.testing.assert_array_equal(v, res.state()[k])
