import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bimanual_iace.data import (
    STD_FLOOR, DatasetManifest, EpisodeFormatError, EpisodeRecord, IntegrityError, ManifestEntry,
    compute_norm_stats, denormalize, downsample, episode_nbytes, normalize, read_episode, read_manifest,
    write_episode, write_manifest,
)


def random_episode(T, J=4, size=48, rate=50, seed=0):
    rng = np.random.default_rng(seed)
    return EpisodeRecord(
        rate,
        rng.normal(size=(T, 2 * J)),
        rng.normal(size=(T, 2 * J)),
        rng.random((T, 4, size, size, 3)),
        task="handover", seed=seed, success={"pick": True, "handover": True, "place": False},
    )


def same(a, b):
    return (
        a.rate_hz == b.rate_hz and a.task == b.task and a.seed == b.seed and a.success == b.success
        and a.joints.tobytes() == b.joints.tobytes()
        and a.actions.tobytes() == b.actions.tobytes()
        and a.images.tobytes() == b.images.tobytes()
    )


def test_round_trip_is_bitwise(tmp_path):
    ep = random_episode(30)
    write_episode(ep, tmp_path / "a.ep")
    assert same(read_episode(tmp_path / "a.ep"), ep)


def test_round_trip_keeps_special_floats(tmp_path):
    ep = random_episode(3, size=4)
    ep.joints[0, :4] = [-0.0, np.float32(1e-45), np.float32(3.4e38), -np.float32(1.17e-38)]
    write_episode(ep, tmp_path / "a.ep")
    assert read_episode(tmp_path / "a.ep").joints.tobytes() == ep.joints.tobytes()


def test_file_length_matches_layout(tmp_path):
    T, J = 12, 4
    path = tmp_path / "a.ep"
    write_episode(random_episode(T, J), path)
    blob = path.read_bytes()
    header_len = blob.index(b"end_header\n") + len(b"end_header\n")
    assert len(blob) == header_len + 4 * T * (2 * 2 * J + 4 * 48 * 48 * 3)
    assert episode_nbytes(T, J) == 4 * T * (2 * 2 * J + 4 * 48 * 48 * 3)


def test_payload_is_little_endian_float32_in_order(tmp_path):
    ep = random_episode(2, size=2)
    path = tmp_path / "a.ep"
    write_episode(ep, path)
    blob = path.read_bytes()
    payload = blob[blob.index(b"end_header\n") + 11:]
    arr = np.frombuffer(payload, dtype="<f4")
    n = ep.joints.size
    assert np.array_equal(arr[:n], ep.joints.ravel())
    assert np.array_equal(arr[n:2 * n], ep.actions.ravel())
    assert np.array_equal(arr[2 * n:], ep.images.ravel())


def test_header_frame_count_disagrees_with_payload(tmp_path):
    path = tmp_path / "a.ep"
    write_episode(random_episode(99), path)
    blob = path.read_bytes()
    assert b"\nT: 99\n" in blob
    path.write_bytes(blob.replace(b"\nT: 99\n", b"\nT: 100\n", 1))
    with pytest.raises(EpisodeFormatError, match="size disagreement"):
        read_episode(path)


def test_truncated_file(tmp_path):
    path = tmp_path / "a.ep"
    write_episode(random_episode(5, size=8), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(EpisodeFormatError):
        read_episode(path)
    path.write_bytes(blob[:40])
    with pytest.raises(EpisodeFormatError, match="truncated"):
        read_episode(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "a.ep"
    write_episode(random_episode(2, size=4), path)
    path.write_bytes(path.read_bytes().replace(b"version: 1\n", b"version: 2\n", 1))
    with pytest.raises(EpisodeFormatError, match="version"):
        read_episode(path)


def test_flipped_payload_byte_detected(tmp_path):
    path = tmp_path / "a.ep"
    write_episode(random_episode(4, size=4), path)
    blob = bytearray(path.read_bytes())
    blob[-7] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError):
        read_episode(path)


def test_mismatched_arrays_rejected():
    with pytest.raises(EpisodeFormatError):
        EpisodeRecord(50, np.zeros((3, 8)), np.zeros((2, 8)), np.zeros((3, 4, 4, 4, 3)))


# -- downsampling -------------------------------------------------------------

def indexed_episode(T):
    ep = random_episode(T, size=2)
    ep.joints[:, 0] = np.arange(T)
    return ep


def test_downsample_hundred_frames():
    out = downsample(indexed_episode(100), 2)
    assert out.T == 50 and out.rate_hz == 25
    assert np.array_equal(out.joints[:, 0], np.arange(0, 100, 2))


def test_downsample_factor_one_is_identity():
    ep = indexed_episode(9)
    assert same(downsample(ep, 1), ep)


def test_downsample_seven_frames():
    out = downsample(indexed_episode(7), 2)
    assert out.T == 4
    assert list(out.joints[:, 0]) == [0, 2, 4, 6]


@given(T=st.integers(1, 60), factor=st.sampled_from([1, 2, 5, 10, 25, 50]))
@settings(max_examples=60, deadline=None)
def test_downsample_ceil_and_first_frame(T, factor):
    ep = indexed_episode(T)
    out = downsample(ep, factor)
    assert out.T == math.ceil(T / factor)
    assert out.joints[0, 0] == 0
    assert set(out.joints[:, 0].tolist()) <= set(ep.joints[:, 0].tolist())
    assert out.images.tobytes() == ep.images[::factor].tobytes()


def test_downsample_rejects_bad_factor():
    with pytest.raises(ValueError):
        downsample(indexed_episode(4), 0)


# -- statistics ---------------------------------------------------------------

def test_constant_dimension_is_floored():
    eps = [random_episode(5, size=2, seed=s) for s in range(2)]
    for ep in eps:
        ep.joints[:, 3] = 0.7
    stats = compute_norm_stats(eps)
    assert stats.joints_std[3] == STD_FLOOR
    z = normalize(eps[0].joints, stats.joints_mean, stats.joints_std)
    assert np.all(np.abs(z[:, 3]) < 1e-6)


@given(st.lists(st.floats(-1e3, 1e3), min_size=8, max_size=8))
def test_normalize_round_trip(row):
    eps = [random_episode(6, size=2, seed=s) for s in range(3)]
    stats = compute_norm_stats(eps)
    x = np.array(row)
    back = denormalize(normalize(x, stats.actions_mean, stats.actions_std), stats.actions_mean, stats.actions_std)
    assert np.allclose(back, x, atol=1e-6, rtol=0)


def test_stats_match_streaming_oracle():
    eps = [random_episode(T, size=2, seed=s) for s, T in enumerate((7, 11, 4))]
    # Welford over every frame, one value at a time
    n, mean, m2 = 0, np.zeros(8), np.zeros(8)
    for ep in eps:
        for row in ep.actions.astype(np.float64):
            n += 1
            delta = row - mean
            mean += delta / n
            m2 += delta * (row - mean)
    stats = compute_norm_stats(eps)
    assert np.allclose(stats.actions_mean, mean, atol=1e-9, rtol=0)
    assert np.allclose(stats.actions_std, np.sqrt(m2 / n), atol=1e-9, rtol=0)


def test_stats_of_nothing():
    with pytest.raises(ValueError):
        compute_norm_stats([])


# -- manifest -----------------------------------------------------------------

def make_dataset(root, n=3):
    entries = []
    eps = []
    for i in range(n):
        ep = random_episode(4 + i, size=4, seed=i)
        name = f"ep_{i}.ep"
        digest = write_episode(ep, root / name)
        entries.append(ManifestEntry(name, ep.T, ep.task, ep.overall_success, digest))
        eps.append(ep)
    manifest = DatasetManifest(root, entries, compute_norm_stats(eps))
    write_manifest(manifest, root / "manifest.txt")
    return manifest, eps


def test_manifest_round_trip(tmp_path):
    manifest, eps = make_dataset(tmp_path)
    back = read_manifest(tmp_path / "manifest.txt")
    assert back.episodes == manifest.episodes
    for name in ("joints_mean", "joints_std", "actions_mean", "actions_std"):
        assert np.array_equal(getattr(back.stats, name), getattr(manifest.stats, name))
    back.verify()
    for rec, ep in zip(back.iter_records(), eps):
        assert same(rec, ep)
    stats = compute_norm_stats(back)
    assert np.array_equal(stats.actions_mean, manifest.stats.actions_mean)


def test_manifest_detects_tamper_and_missing(tmp_path):
    manifest, _ = make_dataset(tmp_path)
    path = tmp_path / "ep_1.ep"
    blob = bytearray(path.read_bytes())
    blob[20] ^= 0x20
    path.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError, match="checksum"):
        manifest.verify()
    path.unlink()
    with pytest.raises(IntegrityError, match="missing"):
        manifest.verify()


def test_manifest_sha_is_whole_file(tmp_path):
    manifest, _ = make_dataset(tmp_path, n=1)
    entry = manifest.episodes[0]
    assert hashlib.sha256((tmp_path / entry.path).read_bytes()).hexdigest() == entry.sha256


def test_manifest_version_mismatch(tmp_path):
    make_dataset(tmp_path, n=1)
    path = tmp_path / "manifest.txt"
    path.write_text(path.read_text().replace("format_version=1", "format_version=7"))
    with pytest.raises(EpisodeFormatError, match="version"):
        read_manifest(path)
