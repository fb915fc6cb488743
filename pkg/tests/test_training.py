import numpy as np
import pytest

from bimanual_iace import harness
from bimanual_iace.estimator import IACEPolicy, TrainingDiverged, target_chunks

from conftest import TINY


def test_target_chunks_pad_with_last_action():
    actions = np.arange(10, dtype=float).reshape(5, 2)
    chunks = target_chunks(actions, 3)
    assert chunks.shape == (5, 3, 2)
    assert np.array_equal(chunks[0], actions[:3])
    assert np.array_equal(chunks[4], np.repeat(actions[4:], 3, axis=0))
    assert np.array_equal(chunks[3], actions[[3, 4, 4]])


def test_desk_defaults():
    cfg = harness.TrainConfig()
    assert (cfg.d_model, cfg.n_heads, cfg.local_layers, cfg.iace_layers, cfg.decoder_layers) == (64, 4, 2, 2, 3)
    assert (cfg.chunk_size, cfg.epochs, cfg.batch_size) == (20, 300, 8)
    est = cfg.estimator()
    assert est.get_params()["batch_size"] == 8 and est.variant.name == "split+iace"


def test_small_learning_rate_loss_falls_every_epoch(desk_datasets):
    # at lr 1e-5 the first 20 epoch means fall strictly; the faster default can wobble
    _, episodes = harness.load_dataset(desk_datasets["handover"])
    policy = harness.TrainConfig(lr=1e-5, epochs=20).estimator().fit(episodes)
    h = policy.loss_history_
    assert len(h) == 20
    assert all(b < a for a, b in zip(h, h[1:])), h


def test_fit_is_deterministic(tiny_manifest):
    _, episodes = harness.load_dataset(tiny_manifest)
    a = IACEPolicy(**TINY).fit(episodes)
    b = IACEPolicy(**TINY).fit(episodes)
    assert a.loss_history_ == b.loss_history_


def test_divergence_aborts(tiny_manifest):
    _, episodes = harness.load_dataset(tiny_manifest)
    with pytest.raises(TrainingDiverged):
        IACEPolicy(**{**TINY, "lr": 1e300, "kl_weight": 1e308}).fit(episodes)


@pytest.mark.parametrize("bad", [dict(lr=0), dict(epochs=-1), dict(variant="triple"), dict(batch_size=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        harness.TrainConfig(**bad)
