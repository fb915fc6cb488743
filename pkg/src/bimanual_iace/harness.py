"""Pipeline steps behind the command line: data generation, training, evaluation,
the four-variant ablation grid, gradient checking and report files."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .data import (
    DatasetManifest,
    IntegrityError,
    ManifestEntry,
    compute_norm_stats,
    downsample,
    read_episode,
    read_manifest,
    write_episode,
    write_manifest,
)
from .estimator import IACEPolicy
from .nn import GradCheckReport, grad_check
from .policy import VARIANTS, ContractViolation, IACEPolicyNetwork, PolicyConfig, PolicyVariant, loss
from .rollout import rollout_policy
from .sim.render import render_all
from .sim.tasks import TASKS, generate_demos, get_task
from .sim.world import SimConfig

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "BIMANUAL_IACE_OUT"
MANIFEST_NAME = "manifest.txt"
TRAIN_RATE_HZ = 25
REFERENCE_LATENCY_S = 0.02  # GPU figure, reported next to ours for context only


def output_path(path) -> Path:
    """Relative paths are resolved under ``$BIMANUAL_IACE_OUT`` when it is set."""
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return path if path.is_absolute() or not root else Path(root) / path


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 300
    batch_size: int = 8
    samples_per_episode: int = 1
    kl_weight: float = 10.0
    chunk_size: int = 20
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    local_layers: int = 2
    iace_layers: int = 2
    decoder_layers: int = 3
    cvae_layers: int = 1
    z_dim: int = 32
    seed: int = 0
    variant: str = "split+iace"
    checkpoint_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.type in ("int", "float") and not isinstance(value, (int, float)):
                raise ValueError(f"{f.name} must be numeric, got {value!r}")
        positive = ("lr", "epochs", "batch_size", "samples_per_episode", "chunk_size", "d_model", "n_heads",
                    "d_ff", "local_layers", "decoder_layers", "cvae_layers", "z_dim")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("weight_decay", "kl_weight", "iace_layers", "checkpoint_every", "seed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)!r}")
        self.policy_variant  # validates the name

    @property
    def policy_variant(self) -> PolicyVariant:
        name = self.variant
        if name not in {v.name for v in VARIANTS}:
            raise ValueError(f"unknown variant {name!r}; choose from {[v.name for v in VARIANTS]}")
        return PolicyVariant.parse(name)

    @classmethod
    def coerce(cls, values: dict[str, str]) -> dict:
        """Convert string values (from a file or flags) to the field types."""
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kind = types[key]
            try:
                out[key] = int(raw) if kind == "int" else float(raw) if kind == "float" else str(raw)
            except ValueError:
                raise ValueError(f"config key {key!r} expects {kind}, got {raw!r}") from None
        return out

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            values[key.strip()] = value.strip()
        values = cls.coerce(values)
        values.update(overrides)
        return cls(**values)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    def estimator(self) -> IACEPolicy:
        v = self.policy_variant
        params = {k: v_ for k, v_ in asdict(self).items() if k not in ("variant", "checkpoint_every")}
        return IACEPolicy(decoder_mode=v.decoder_mode, iace_enabled=v.iace_enabled, **params)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def gen_data(task: str, count: int, seed: int, out_dir, noise_scale: float = 0.01) -> DatasetManifest:
    """Generate ``count`` demonstrations at the simulation rate, store them at the training rate."""
    spec = get_task(task)
    out_dir = output_path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    factor = SimConfig().rate_hz // TRAIN_RATE_HZ
    entries, records = [], []
    for i, episode in enumerate(generate_demos(spec, count, noise_scale=noise_scale, seed=seed)):
        rec = downsample(episode, factor)
        name = f"{task}_{i:03d}.ep"
        digest = write_episode(rec, out_dir / name)
        entries.append(ManifestEntry(name, rec.T, task, rec.overall_success, digest))
        records.append(rec)
    stats = compute_norm_stats(records) if records else None
    manifest = DatasetManifest(out_dir, entries, stats)
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    verify_dataset(out_dir / MANIFEST_NAME)
    return manifest


def verify_dataset(manifest_path) -> DatasetManifest:
    """Re-read every episode listed in the manifest; raise on any mismatch."""
    manifest = read_manifest(manifest_path)
    manifest.verify()
    for entry in manifest.episodes:
        rec = read_episode(manifest.episode_path(entry))
        if rec.T != entry.T or rec.task != entry.task:
            raise IntegrityError(f"{entry.path}: manifest says T={entry.T} task={entry.task}, file disagrees")
    return manifest


def load_dataset(manifest_path):
    manifest = read_manifest(output_path(manifest_path))
    manifest.verify()
    return manifest, list(manifest.iter_records())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train(config: TrainConfig, manifest_path, out_checkpoint) -> IACEPolicy:
    """Fit one policy; checkpoints every ``checkpoint_every`` epochs and at the end."""
    manifest, episodes = load_dataset(manifest_path)
    out_checkpoint = output_path(out_checkpoint)
    out_checkpoint.parent.mkdir(parents=True, exist_ok=True)
    policy = config.estimator()

    def on_epoch(est, epoch, mean_loss):
        log.info("epoch %d loss %.6f", epoch + 1, mean_loss)
        if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            est.network_.eval()
            est.save(out_checkpoint.with_name(f"{out_checkpoint.stem}.epoch{epoch + 1}{out_checkpoint.suffix}"))
            est.network_.train()

    policy.fit(episodes, stats=manifest.stats, callback=on_epoch)
    policy.save(out_checkpoint)
    return policy


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    task: str
    variant: str
    seed: int
    outcomes: list[bool] = field(default_factory=list)
    subscores: dict[str, list[bool]] = field(default_factory=dict)
    latencies: list[float] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)
    wall_clock_s: float = 0.0  # train + eval, when known

    @property
    def n_episodes(self) -> int:
        return len(self.outcomes)

    @property
    def success_pct(self) -> float:
        return 100.0 * sum(self.outcomes) / self.n_episodes if self.outcomes else 0.0

    def subscore_pct(self, name: str) -> float:
        hits = self.subscores[name]
        return 100.0 * sum(hits) / len(hits) if hits else 0.0

    @property
    def mean_latency(self) -> float:
        return float(np.mean(self.latencies)) if self.latencies else float("nan")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def check_compatible(policy: IACEPolicy, task: str) -> None:
    """The checkpoint must match the simulator's joint count and camera image size."""
    world = get_task(task).sample_initial(np.random.default_rng(0), SimConfig())
    J = len(world.left.joint_vector())
    image_shape = render_all(world).shape[1:]
    cfg = policy.config_
    if cfg.joint_dim != J or tuple(cfg.image_shape) != tuple(image_shape):
        raise ContractViolation(
            f"checkpoint expects J={cfg.joint_dim}, images {tuple(cfg.image_shape)}; "
            f"task {task!r} provides J={J}, images {tuple(image_shape)}"
        )


def evaluate(policy: IACEPolicy, task: str, episodes: int = 25, seed: int = 0, decay: float = 0.01) -> EvalReport:
    check_compatible(policy, task)
    spec = get_task(task)
    report = EvalReport(task, policy.variant.name, int(policy.seed), subscores={k: [] for k in spec.subscores},
                        loss_history=list(getattr(policy, "loss_history_", [])))
    for i in range(episodes):
        result = rollout_policy(policy, spec, seed * episodes + i, decay=decay)
        report.outcomes.append(bool(result.success))
        for name, hit in result.subscores.items():
            report.subscores[name].append(bool(hit))
        report.latencies.extend(result.latencies)
    return report


def ablate(manifests: dict[str, str], seeds, config: TrainConfig, out_dir, episodes: int = 25,
           variants=VARIANTS) -> list[EvalReport]:
    """Train and evaluate every variant on every task for every seed."""
    out_dir = output_path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for task, manifest_path in manifests.items():
        for variant in variants:
            for seed in seeds:
                cfg = config.replace(variant=variant.name, seed=int(seed))
                start = time.perf_counter()
                policy = train(cfg, manifest_path, out_dir / f"{task}_{variant.name}_s{seed}.ckpt")
                report = evaluate(policy, task, episodes=episodes)
                report.wall_clock_s = time.perf_counter() - start
                log.info("%s %s seed %d: %.0f%% in %.0fs", task, variant.name, seed, report.success_pct,
                         report.wall_clock_s)
                reports.append(report)
                (out_dir / f"{task}_{variant.name}_s{seed}.json").write_text(report.to_json())
    write_report(reports, out_dir)
    return reports


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

SMALLEST = dict(joint_dim=4, d_model=8, n_heads=2, d_ff=8, local_layers=1, iace_layers=1, decoder_layers=1,
                cvae_layers=1, chunk_size=3, z_dim=2, image_shape=(16, 16, 3), conv_channels=(2, 2, 2))


def policy_loss_fn(network: IACEPolicyNetwork, batch: int = 2, seed: int = 0, kl_weight: float = 10.0):
    """A fixed random batch and noise draw, so the loss is a pure function of the parameters."""
    cfg = network.cfg
    gen = torch.Generator().manual_seed(seed)
    J, k = cfg.joint_dim, cfg.chunk_size
    joints = torch.randn(batch, 2 * J, generator=gen, dtype=torch.float64)
    images = torch.rand(batch, 4, *cfg.image_shape, generator=gen, dtype=torch.float64)
    target = torch.randn(batch, k, 2 * J, generator=gen, dtype=torch.float64)
    noise = torch.randn(batch, cfg.z_dim, generator=gen, dtype=torch.float64)

    def fn(model):
        style = model.cvae_encode(target, joints)
        z = style.mu + torch.exp(style.logvar / 2) * noise
        return loss(model(joints, images, z), target, style, kl_weight)

    return fn


def gradcheck_all(epsilon: float = 1e-4, tolerance: float = 1e-4, corrupt: bool = False, seed: int = 0,
                  coords_per_tensor: int = 32) -> dict[str, GradCheckReport]:
    """Check every variant at the smallest config. ``corrupt`` perturbs one analytic gradient per model."""
    reports = {}
    for variant in VARIANTS:
        net = IACEPolicyNetwork(PolicyConfig(variant=variant, **SMALLEST), seed=seed).double()
        target = next(iter(dict(net.named_parameters()))) if corrupt else None
        reports[variant.name] = grad_check(net, policy_loss_fn(net, seed=seed), epsilon, tolerance,
                                           coords_per_tensor=coords_per_tensor, seed=seed, corrupt=target)
    return reports


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def subscore_columns(reports=None) -> list[str]:
    names = [n for spec in TASKS.values() for n in spec.subscores]
    for r in reports or []:
        names += list(r.subscores)
    return list(dict.fromkeys(names))


def report_rows(reports: list[EvalReport]) -> tuple[list[str], list[dict]]:
    subs = subscore_columns(reports)
    header = ["task", "variant", "seed", *subs, "overall", "latency"]
    rows = []
    for r in reports:
        row = {"task": r.task, "variant": r.variant, "seed": r.seed,
               "overall": f"{r.success_pct:.1f}", "latency": f"{r.mean_latency:.6f}"}
        for name in subs:
            row[name] = f"{r.subscore_pct(name):.1f}" if name in r.subscores else ""
        rows.append(row)
    return header, rows


def _text_table(reports: list[EvalReport]) -> str:
    lines = []
    for task in dict.fromkeys(r.task for r in reports):
        group = [r for r in reports if r.task == task]
        subs = list(group[0].subscores)
        lines.append(f"{task} (success %, N = {group[0].n_episodes} episodes per run)")
        head = ["variant", *subs, "overall", "latency ms"]
        lines.append(" | ".join(f"{h:>12}" for h in head))
        for variant in dict.fromkeys(r.variant for r in group):
            runs = [r for r in group if r.variant == variant]
            cells = [variant] + [f"{np.mean([r.subscore_pct(s) for r in runs]):.1f}" for s in subs]
            cells += [f"{np.mean([r.success_pct for r in runs]):.1f}",
                      f"{1000 * np.mean([r.mean_latency for r in runs]):.2f}"]
            lines.append(" | ".join(f"{c:>12}" for c in cells))
        lines.append("")
    lines.append(f"reference latency on GPU hardware: {REFERENCE_LATENCY_S * 1000:.0f} ms per action")
    return "\n".join(lines) + "\n"


def _svg_lines(series: dict[str, list[float]], title: str, width: int = 480, height: int = 300) -> str:
    pad = 40
    values = [v for ys in series.values() for v in ys if np.isfinite(v)]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{pad}" y="20" font-size="14">{title}</text>']
    if values:
        lo, hi = min(values), max(values)
        hi = hi if hi > lo else lo + 1.0
        longest = max(len(ys) for ys in series.values())
        palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
        for i, (name, ys) in enumerate(series.items()):
            if not ys:
                continue
            xs = np.linspace(pad, width - pad, max(longest, 2))[:len(ys)]
            pts = " ".join(f"{x:.1f},{height - pad - (y - lo) / (hi - lo) * (height - 2 * pad):.1f}" for x, y in zip(xs, ys))
            color = palette[i % len(palette)]
            parts.append(f'<polyline fill="none" stroke="{color}" points="{pts}"/>')
            parts.append(f'<text x="{width - pad}" y="{40 + 14 * i}" font-size="10" fill="{color}" text-anchor="end">{name}</text>')
        parts.append(f'<text x="4" y="{pad}" font-size="10">{hi:.3g}</text>')
        parts.append(f'<text x="4" y="{height - pad}" font-size="10">{lo:.3g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(reports: list[EvalReport], out_dir) -> dict[str, Path]:
    """Write ``results.csv``, ``results.txt``, ``loss.svg`` and ``success.svg`` into ``out_dir``."""
    out_dir = output_path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header, rows = report_rows(reports)
    paths = {"csv": out_dir / "results.csv", "text": out_dir / "results.txt",
             "loss": out_dir / "loss.svg", "success": out_dir / "success.svg"}
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        writer.writerows(rows)
    paths["text"].write_text(_text_table(reports) if reports else " | ".join(header) + "\n")
    losses = {f"{r.task} {r.variant} s{r.seed}": r.loss_history for r in reports if r.loss_history}
    paths["loss"].write_text(_svg_lines(losses, "training loss per epoch"))
    success = {}
    for r in reports:
        success.setdefault(f"{r.task} {r.variant}", []).append(r.success_pct)
    paths["success"].write_text(_svg_lines(success, "overall success % by seed"))
    return paths
