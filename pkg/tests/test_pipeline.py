import hashlib

import numpy as np
import pytest
from conftest import small_config
from sklearn.base import clone

from kmorph import regressor
from kmorph.kinematics import Affine3, apply, compose, extract_params, inverse, to_affine
from kmorph.pipeline import (
    GENERATED,
    TEST,
    TRAIN,
    Dataset,
    KinematicMorphingNetwork,
    PipelineConfig,
    augment,
    compact,
    early_stop_check,
    generate_dataset,
    predict_iterative,
    run_iterative_batch,
    train_loop,
    validation_split,
)
from kmorph.regressor import NetworkWeights


@pytest.fixture(scope="module")
def ds_a():
    return generate_dataset(small_config("box_a", n_data=40))


@pytest.fixture(scope="module")
def ds_c():
    return generate_dataset(small_config("box_c", n_data=30))


def constant_net(spec, output):
    """A network whose output ignores the image."""
    w = NetworkWeights.zeros(spec)
    w.params["fc.bias"] = np.asarray(output, dtype=float)
    return w


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(n_data=10, n_aug=20)
    with pytest.raises(ValueError):
        small_config(net_factor=5)
    with pytest.raises(ValueError):
        small_config(split_fraction=0.0)


def test_network_spec_from_config():
    cfg = PipelineConfig.for_task("door")
    assert cfg.network_size == (64, 48)
    assert cfg.network_spec.channels == (2, 4, 8, 16, 32) and cfg.network_spec.output_dim == 7


def test_generated_dataset_structure(ds_a):
    assert len(ds_a) == 40
    assert ds_a.depth.shape == (40, 48, 64) and ds_a.cloud_depth.shape == (40, 96, 128)
    assert len(ds_a.indices(split=TEST)) == 8
    assert np.all(ds_a.provenance == GENERATED)
    assert np.all((ds_a.depth > 0).sum(axis=(1, 2)) > 0)
    lo, hi = ds_a.schema.lower, ds_a.schema.upper
    assert np.all(ds_a.labels >= lo) and np.all(ds_a.labels <= hi)
    for i in range(len(ds_a)):
        T = Affine3.from_matrix(ds_a.transforms[i].reshape(3, 4))
        assert np.allclose(extract_params(T, ds_a.schema)[0], ds_a.labels[i], atol=1e-12)


def test_generation_is_deterministic_and_worker_independent():
    cfg = small_config("box_b", n_data=70)
    a = generate_dataset(cfg)
    b = generate_dataset(cfg, workers=2)
    assert a.digest() == b.digest()
    assert generate_dataset(cfg, seed=1).digest() != a.digest()


def test_records_depend_only_on_seed_and_index():
    cfg = small_config("box_a", n_data=70)
    a = generate_dataset(cfg)
    b = generate_dataset(cfg, n=40)
    assert np.array_equal(a.labels[:40], b.labels)


def test_dataset_file_round_trip(ds_c, tmp_path):
    path = tmp_path / "d.kmd"
    digest = ds_c.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"KMND"
    assert digest == hashlib.sha256(raw).hexdigest() == ds_c.digest()
    back = Dataset.load(path)
    assert back.digest() == digest
    assert back.camera == ds_c.camera and back.schema == ds_c.schema
    for name in ("depth", "cloud_depth", "labels", "transforms", "provenance", "split"):
        assert np.array_equal(getattr(back, name), getattr(ds_c, name))
    path.write_bytes(raw[:-100])
    with pytest.raises(ValueError):
        Dataset.load(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError):
        Dataset.load(path)


def test_early_stop_check():
    assert early_stop_check([0.0, 5e-4])
    assert not early_stop_check([0.0, 2e-3])
    assert early_stop_check([])


def test_predict_iterative_cloud_matches_composed_transform(ds_c):
    """Incremental cloud updates equal one application of the accumulated transform."""
    cfg = small_config("box_c")
    rng = np.random.default_rng(0)
    schema = ds_c.schema
    for case in range(100):
        i = case % len(ds_c)
        w = NetworkWeights.initialize(cfg.network_spec, case)
        for k in w.params:
            w.params[k] = w.params[k] * 0.05
        w.params["fc.bias"] = rng.uniform(-0.15, 0.15, schema.dim)
        cloud = compact(ds_c.cloud(i))
        res = predict_iterative(ds_c.depth[i], cloud, None, w, 3, schema, ds_c.camera, ds_c.net_factor)
        once = apply(res.transform, cloud)
        assert np.max(np.abs(once.points - res.cloud.points)) < 1e-9
        manual = Affine3.identity()
        for out in res.steps:
            manual = compose(inverse(to_affine(out[: schema.n], schema)), manual)
        assert np.allclose(manual.matrix, res.transform.matrix, atol=1e-12)


def test_predict_iterative_keeps_last_gamma():
    cfg = small_config("door", n_data=3)
    ds = generate_dataset(cfg)
    w = NetworkWeights.initialize(cfg.network_spec, 0)
    res = predict_iterative(ds.depth[0], compact(ds.cloud(0)), None, w, 3, ds.schema, ds.camera, ds.net_factor)
    assert np.array_equal(res.gamma, res.steps[-1][ds.schema.n :])
    none = predict_iterative(ds.depth[0], compact(ds.cloud(0)), None, w, 0, ds.schema, ds.camera, ds.net_factor)
    assert none.gamma is None and np.array_equal(none.transform.matrix, Affine3.identity().matrix)


def test_predict_iterative_early_stop(ds_a):
    cfg = small_config()
    w = constant_net(cfg.network_spec, [0.0, 0.0])
    res = predict_iterative(ds_a.depth[0], ds_a.cloud(0), None, w, 5, ds_a.schema, ds_a.camera, 2, early_stop_tol=1e-3)
    assert len(res.steps) == 1


def test_batch_matches_single(ds_c):
    cfg = small_config("box_c")
    w = NetworkWeights.initialize(cfg.network_spec, 3)
    for k in w.params:
        w.params[k] = w.params[k] * 0.05
    idx = [0, 1, 2]
    clouds = [compact(ds_c.cloud(i)) for i in idx]
    d, p, totals, outs = run_iterative_batch(
        ds_c.depth[idx], clouds, [Affine3.identity()] * 3, w, 2, ds_c.schema, ds_c.camera, ds_c.net_factor
    )
    for j, i in enumerate(idx):
        one = predict_iterative(ds_c.depth[i], clouds[j], None, w, 2, ds_c.schema, ds_c.camera, ds_c.net_factor)
        assert np.allclose(one.transform.matrix, totals[j].matrix, atol=1e-12)
        assert np.allclose(one.depth, d[j])


def test_augment_with_zero_network_keeps_labels(ds_a):
    cfg = small_config()
    w = constant_net(cfg.network_spec, [0.0, 0.0])
    new = augment(ds_a, w, 8, 2, np.random.default_rng(0))
    src = new["source_index"]
    assert np.allclose(new["labels"], ds_a.labels[src], atol=1e-12)
    assert np.all(new["split"] == TRAIN) and np.all(new["provenance"] == 1)
    assert np.all(ds_a.split[src] == TRAIN)


def test_augment_with_oracle_network_gives_identity(ds_c, monkeypatch):
    """An oracle predicts the true parameters first and the identity afterwards."""
    calls = []

    def oracle(images, w, batch_size=256):
        out = np.zeros((len(images), ds_c.schema.dim))
        if not calls:
            out[:] = ds_c.labels[oracle.source]
        calls.append(1)
        return out

    rng_probe = np.random.default_rng(5)
    pool = ds_c.indices(split=TRAIN, provenance=GENERATED)
    oracle.source = np.sort(rng_probe.choice(pool, size=6, replace=False))
    monkeypatch.setattr(regressor, "predict", oracle)
    new = augment(ds_c, None, 6, 3, np.random.default_rng(5))
    assert np.array_equal(new["source_index"], oracle.source)
    assert np.max(np.abs(new["labels"])) < 1e-3
    assert np.max(new["residual"]) < 1e-3
    # the moved clouds render where the prototype renders
    assert np.all((new["depth"] > 0).sum(axis=(1, 2)) > 0)


def test_augment_excludes_and_validates(ds_a):
    cfg = small_config()
    w = constant_net(cfg.network_spec, [0.0, 0.0])
    pool = ds_a.indices(split=TRAIN)
    new = augment(ds_a, w, 4, 1, np.random.default_rng(0), exclude=pool[:-4])
    assert set(new["source_index"]) == set(pool[-4:])
    with pytest.raises(ValueError):
        augment(ds_a, w, 5, 1, np.random.default_rng(0), exclude=pool[:-4])


def test_append_rejects_test_records(ds_a):
    ds = generate_dataset(small_config(n_data=10))
    bad = {k: v[:1] for k, v in ds.arrays.items()}
    bad["split"] = np.array([TEST], np.uint8)
    with pytest.raises(ValueError):
        ds.append(bad)


def test_validation_split_uses_generated_train_records(ds_a):
    val = validation_split(ds_a, 0.25, 0)
    assert len(val) == 8 and np.all(ds_a.split[val] == TRAIN)
    assert np.array_equal(val, validation_split(ds_a, 0.25, 0))


def test_train_loop_rounds_and_split_integrity():
    cfg = small_config(n_data=40, outer_rounds_max=3, stop_epsilon=0.0, retrain_epochs=1)
    ds = generate_dataset(cfg)
    test_before = ds.depth[ds.split == TEST].copy()
    loop = train_loop(cfg, ds)
    assert loop.n_pred_sequence == [1, 2, 3]
    assert len(loop.dataset) == 40 + 3 * cfg.n_aug
    assert np.all(loop.dataset.split[40:] == TRAIN)
    assert np.array_equal(loop.dataset.provenance[40:], np.repeat([1, 2, 3], cfg.n_aug))
    assert np.array_equal(loop.dataset.depth[loop.dataset.split == TEST], test_before)
    assert len(set(loop.val_index) & set(loop.dataset.indices(split=TEST))) == 0


def test_zero_rounds_reduce_to_plain_training():
    cfg = small_config(n_data=40, outer_rounds_max=0)
    ds = generate_dataset(cfg)
    loop = train_loop(cfg, ds)
    val = loop.val_index
    idx = np.setdiff1d(ds.indices(split=TRAIN), val)
    direct = regressor.train(
        ds.depth[idx], ds.labels[idx], cfg.network_spec, cfg.train, ds.depth[val], ds.labels[val],
        rng=np.random.default_rng([cfg.train.seed, 0]),
    )
    assert loop.weights.flat().tobytes() == direct.weights.flat().tobytes()
    assert len(loop.dataset) == 40 and loop.n_pred_sequence == []


def test_plateau_stops_rounds():
    cfg = small_config(n_data=40, outer_rounds_max=4, stop_epsilon=10.0, retrain_epochs=1)
    loop = train_loop(cfg)
    assert loop.n_pred_sequence == [1]


def test_estimator_api():
    est = KinematicMorphingNetwork(
        task="box_a", n_data=30, n_aug=6, n_pred=2, outer_rounds_max=1, epochs=1, retrain_epochs=1,
        batch_size=16, cloud_size=(128, 96), net_factor=2,
    )
    assert clone(est).get_params() == est.get_params()
    est.fit()
    ds = generate_dataset(est.config_, seed=99, n=5)
    out = est.predict(ds)
    assert out.shape == (5, 2) and np.all(np.isfinite(out))
    zero = est.predict(ds, n_pred=0)
    assert np.array_equal(zero, np.zeros((5, 2)))
    with pytest.raises(ValueError):
        est.predict(ds.depth)
