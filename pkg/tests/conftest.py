import pytest

from bimanual_iace import harness

# small enough to train in seconds; used wherever only plumbing is under test
TINY = dict(d_model=8, n_heads=2, d_ff=8, local_layers=1, iace_layers=1, decoder_layers=1, cvae_layers=1,
            chunk_size=3, z_dim=2, epochs=2, lr=1e-3)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_data")
    harness.gen_data("handover", 2, seed=0, out_dir=out)
    return out / harness.MANIFEST_NAME


@pytest.fixture
def tiny_config():
    return harness.TrainConfig(**TINY)


@pytest.fixture(scope="session")
def desk_datasets(tmp_path_factory):
    """50 demonstrations per task at the training rate."""
    root = tmp_path_factory.mktemp("desk_data")
    out = {}
    for task in ("handover", "bar_lift"):
        harness.gen_data(task, 50, seed=0, out_dir=root / task)
        out[task] = root / task / harness.MANIFEST_NAME
    return out
