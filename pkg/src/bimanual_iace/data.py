"""Episode files, manifests, rate decimation and normalization statistics.

Episode file layout::

    key: value            one per line (format, version, rate_hz, T, J, cameras,
    ...                   image_h, image_w, image_c, task, seed, success,
    end_header            payload_sha256)
    <payload>             little-endian float32: joints (T, 2J), actions (T, 2J),
                          images (T, 4, H, W, C), all row-major

so the file is exactly ``len(header) + 4*T*(2*2J + 4*H*W*C)`` bytes.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

FORMAT_NAME = "bimanual-episode"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1
CAMERA_ORDER = ("wrist_left", "wrist_right", "top", "front")
STD_FLOOR = 1e-6
_F32 = np.dtype("<f4")


class EpisodeFormatError(ValueError):
    """Malformed, truncated or mismatched episode or manifest file."""


class IntegrityError(EpisodeFormatError):
    """File content does not match its recorded checksum."""


@dataclass
class EpisodeRecord:
    rate_hz: int
    joints: np.ndarray  # (T, 2J) float32
    actions: np.ndarray  # (T, 2J) float32
    images: np.ndarray  # (T, 4, H, W, C) float32, CAMERA_ORDER
    task: str = ""
    seed: int = 0
    success: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        self.joints = np.ascontiguousarray(self.joints, dtype=np.float32)
        self.actions = np.ascontiguousarray(self.actions, dtype=np.float32)
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        T = len(self.joints)
        if len(self.actions) != T or len(self.images) != T:
            raise EpisodeFormatError("joints, actions and images must share the frame count")
        if self.joints.ndim != 2 or self.joints.shape != self.actions.shape:
            raise EpisodeFormatError("joints and actions must both be (T, 2J)")
        if self.images.ndim != 5 or self.images.shape[1] != len(CAMERA_ORDER):
            raise EpisodeFormatError("images must be (T, 4, H, W, C)")

    @property
    def T(self) -> int:
        return len(self.joints)

    @property
    def J(self) -> int:
        return self.joints.shape[1] // 2

    @property
    def overall_success(self) -> bool:
        return bool(self.success) and all(self.success.values())


def episode_nbytes(T: int, J: int, h: int = 48, w: int = 48, c: int = 3) -> int:
    """Payload size in bytes for the given dimensions."""
    return 4 * T * (2 * 2 * J + len(CAMERA_ORDER) * h * w * c)


def _payload(record: EpisodeRecord) -> bytes:
    return b"".join(a.astype(_F32, copy=False).tobytes(order="C") for a in (record.joints, record.actions, record.images))


def _header(record: EpisodeRecord, digest: str) -> bytes:
    _, _, h, w, c = record.images.shape
    success = ",".join(f"{k}={int(v)}" for k, v in record.success.items())
    lines = [
        f"format: {FORMAT_NAME}",
        f"version: {FORMAT_VERSION}",
        f"rate_hz: {record.rate_hz}",
        f"T: {record.T}",
        f"J: {record.J}",
        f"cameras: {','.join(CAMERA_ORDER)}",
        f"image_h: {h}",
        f"image_w: {w}",
        f"image_c: {c}",
        f"task: {record.task}",
        f"seed: {record.seed}",
        f"success: {success}",
        f"payload_sha256: {digest}",
        "end_header",
    ]
    return ("\n".join(lines) + "\n").encode("ascii")


def write_episode(record: EpisodeRecord, path) -> str:
    """Write ``record``; returns the sha256 of the whole file."""
    payload = _payload(record)
    blob = _header(record, hashlib.sha256(payload).hexdigest()) + payload
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def _parse_header(blob: bytes) -> tuple[dict[str, str], int]:
    marker = b"end_header\n"
    end = blob.find(marker)
    if end < 0:
        raise EpisodeFormatError("truncated file: header terminator missing")
    meta = {}
    for line in blob[:end].decode("ascii", errors="replace").splitlines():
        key, sep, value = line.partition(":")
        if not sep:
            raise EpisodeFormatError(f"malformed header line {line!r}")
        meta[key.strip()] = value.strip()
    return meta, end + len(marker)


def read_episode(path) -> EpisodeRecord:
    blob = Path(path).read_bytes()
    meta, offset = _parse_header(blob)
    if meta.get("format") != FORMAT_NAME:
        raise EpisodeFormatError(f"not an episode file: format={meta.get('format')!r}")
    if meta.get("version") != str(FORMAT_VERSION):
        raise EpisodeFormatError(f"version mismatch: file {meta.get('version')!r}, reader {FORMAT_VERSION}")
    try:
        T, J = int(meta["T"]), int(meta["J"])
        h, w, c = int(meta["image_h"]), int(meta["image_w"]), int(meta["image_c"])
        rate = int(meta["rate_hz"])
    except (KeyError, ValueError) as exc:
        raise EpisodeFormatError(f"bad header field: {exc}") from exc
    if tuple(meta.get("cameras", "").split(",")) != CAMERA_ORDER:
        raise EpisodeFormatError(f"unexpected camera list {meta.get('cameras')!r}")
    payload = blob[offset:]
    expected = episode_nbytes(T, J, h, w, c)
    if len(payload) != expected:
        raise EpisodeFormatError(f"header/payload size disagreement: header implies {expected} bytes, found {len(payload)}")
    if hashlib.sha256(payload).hexdigest() != meta.get("payload_sha256"):
        raise IntegrityError(f"payload checksum mismatch in {path}")

    arr = np.frombuffer(payload, dtype=_F32)
    n = T * 2 * J
    joints = arr[:n].reshape(T, 2 * J)
    actions = arr[n:2 * n].reshape(T, 2 * J)
    images = arr[2 * n:].reshape(T, len(CAMERA_ORDER), h, w, c)
    success = {}
    if meta.get("success"):
        for item in meta["success"].split(","):
            k, _, v = item.partition("=")
            success[k] = v == "1"
    return EpisodeRecord(
        rate, joints.astype(np.float32), actions.astype(np.float32), images.astype(np.float32),
        task=meta.get("task", ""), seed=int(meta.get("seed", 0)), success=success,
    )


def downsample(record: EpisodeRecord, factor: int) -> EpisodeRecord:
    """Keep frames ``0, factor, 2*factor, ...`` and divide the rate by ``factor``."""
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    if record.rate_hz % factor:
        raise ValueError(f"factor {factor} does not divide rate {record.rate_hz} Hz")
    return EpisodeRecord(
        record.rate_hz // factor,
        record.joints[::factor].copy(),
        record.actions[::factor].copy(),
        record.images[::factor].copy(),
        task=record.task, seed=record.seed, success=dict(record.success),
    )


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass
class NormStats:
    joints_mean: np.ndarray
    joints_std: np.ndarray
    actions_mean: np.ndarray
    actions_std: np.ndarray

    def __post_init__(self):
        for name in ("joints_mean", "joints_std", "actions_mean", "actions_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.joints_std = np.maximum(self.joints_std, STD_FLOOR)
        self.actions_std = np.maximum(self.actions_std, STD_FLOOR)


def normalize(x, mean, std):
    return (np.asarray(x, dtype=np.float64) - mean) / std


def denormalize(x, mean, std):
    return np.asarray(x, dtype=np.float64) * std + mean


def compute_norm_stats(source) -> NormStats:
    """Per-dimension mean/std over every frame of every episode.

    ``source`` is a ``DatasetManifest`` (episodes are read from disk) or an
    iterable of ``EpisodeRecord``.
    """
    records: Iterable[EpisodeRecord] = source.iter_records() if isinstance(source, DatasetManifest) else source
    joints, actions = [], []
    for rec in records:
        joints.append(rec.joints.astype(np.float64))
        actions.append(rec.actions.astype(np.float64))
    if not joints:
        raise ValueError("cannot compute statistics of an empty dataset")
    j = np.concatenate(joints)
    a = np.concatenate(actions)
    return NormStats(j.mean(0), j.std(0), a.mean(0), a.std(0))


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    path: str  # relative to the manifest directory
    T: int
    task: str
    success: bool
    sha256: str


@dataclass
class DatasetManifest:
    root: Path
    episodes: list[ManifestEntry]
    stats: NormStats | None = None
    version: int = MANIFEST_VERSION

    def episode_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def iter_records(self):
        for entry in self.episodes:
            yield read_episode(self.episode_path(entry))

    def verify(self) -> None:
        """Raise ``IntegrityError`` unless every listed file exists and hashes as recorded."""
        for entry in self.episodes:
            path = self.episode_path(entry)
            if not path.exists():
                raise IntegrityError(f"manifest lists missing file {path}")
            if hashlib.sha256(path.read_bytes()).hexdigest() != entry.sha256:
                raise IntegrityError(f"checksum mismatch for {path}")


def _fmt_vec(v) -> str:
    return ",".join(repr(float(x)) for x in v)


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = ["# bimanual-iace dataset manifest", f"format_version={manifest.version}"]
    if manifest.stats is not None:
        s = manifest.stats
        lines += [
            f"joints_mean={_fmt_vec(s.joints_mean)}",
            f"joints_std={_fmt_vec(s.joints_std)}",
            f"actions_mean={_fmt_vec(s.actions_mean)}",
            f"actions_std={_fmt_vec(s.actions_std)}",
        ]
    for e in manifest.episodes:
        lines.append(f"episode={e.path}\t{e.T}\t{e.task}\t{int(e.success)}\t{e.sha256}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    fields: dict[str, str] = {}
    episodes = []
    for line in path.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise EpisodeFormatError(f"malformed manifest line {line!r}")
        if key == "episode":
            parts = value.split("\t")
            if len(parts) != 5:
                raise EpisodeFormatError(f"malformed episode entry {value!r}")
            episodes.append(ManifestEntry(parts[0], int(parts[1]), parts[2], parts[3] == "1", parts[4]))
        else:
            fields[key] = value
    if fields.get("format_version") != str(MANIFEST_VERSION):
        raise EpisodeFormatError(f"manifest version mismatch: {fields.get('format_version')!r}")
    stats = None
    if "joints_mean" in fields:
        vec = lambda k: np.array([float(x) for x in fields[k].split(",")])  # noqa: E731
        stats = NormStats(vec("joints_mean"), vec("joints_std"), vec("actions_mean"), vec("actions_std"))
    return DatasetManifest(path.parent, episodes, stats)
