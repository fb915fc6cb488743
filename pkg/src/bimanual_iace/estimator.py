"""scikit-learn style front end: ``IACEPolicy().fit(episodes).predict(observations)``."""

from __future__ import annotations

import logging

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import EpisodeRecord, NormStats, compute_norm_stats
from .policy import IACEPolicyNetwork, ObservationFrame, PolicyConfig, PolicyVariant, loss, sample_latent
from .validation import check_episodes, check_observations

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def target_chunks(actions: np.ndarray, k: int) -> np.ndarray:
    """``(T, k, D)``: the next ``k`` actions from every frame, padded with the final action."""
    T = len(actions)
    idx = np.minimum(np.arange(T)[:, None] + np.arange(k)[None, :], T - 1)
    return actions[idx]


class IACEPolicy(BaseEstimator):
    """Bimanual action-chunking policy with optional inter-arm coordination encoder.

    Parameters
    ----------
    decoder_mode : {"single", "split"}
        One decoder emitting both arms' chunk, or one unshared decoder per arm.
    iace_enabled : bool
        Feed the inter-arm coordination encoder's tokens to the decoder(s).
    lr, weight_decay : float
        AdamW step size and decoupled weight decay.
    epochs : int
        Passes over the episode list; each pass draws ``samples_per_episode``
        random timesteps from every episode.
    kl_weight : float
        Weight of the style-latent KL term.
    """

    def __init__(
        self,
        decoder_mode: str = "split",
        iace_enabled: bool = True,
        d_model: int = 64,
        n_heads: int = 4,
        d_ff: int = 128,
        local_layers: int = 2,
        iace_layers: int = 2,
        decoder_layers: int = 3,
        cvae_layers: int = 1,
        chunk_size: int = 20,
        z_dim: int = 32,
        kl_weight: float = 10.0,
        lr: float = 1e-4,
        weight_decay: float = 1e-4,
        epochs: int = 300,
        batch_size: int = 8,
        samples_per_episode: int = 1,
        seed: int = 0,
        dtype: str = "float32",
        log_every: int = 0,
    ):
        self.decoder_mode = decoder_mode
        self.iace_enabled = iace_enabled
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.local_layers = local_layers
        self.iace_layers = iace_layers
        self.decoder_layers = decoder_layers
        self.cvae_layers = cvae_layers
        self.chunk_size = chunk_size
        self.z_dim = z_dim
        self.kl_weight = kl_weight
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.samples_per_episode = samples_per_episode
        self.seed = seed
        self.dtype = dtype
        self.log_every = log_every

    # -- construction -------------------------------------------------------

    @property
    def variant(self) -> PolicyVariant:
        return PolicyVariant(self.decoder_mode, bool(self.iace_enabled))

    def _torch_dtype(self) -> torch.dtype:
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be 'float32' or 'float64', got {self.dtype!r}")
        return getattr(torch, self.dtype)

    def policy_config(self, joint_dim: int, image_shape) -> PolicyConfig:
        return PolicyConfig(
            joint_dim=joint_dim, d_model=self.d_model, n_heads=self.n_heads, d_ff=self.d_ff,
            local_layers=self.local_layers, iace_layers=self.iace_layers,
            decoder_layers=self.decoder_layers, cvae_layers=self.cvae_layers,
            chunk_size=self.chunk_size, z_dim=self.z_dim, image_shape=tuple(image_shape),
            variant=self.variant,
        )

    def _build(self, joint_dim: int, image_shape, stats: NormStats) -> None:
        self.config_ = self.policy_config(joint_dim, image_shape)
        self.network_ = IACEPolicyNetwork(self.config_, seed=self.seed).to(self._torch_dtype())
        self.set_stats(stats)

    def set_stats(self, stats: NormStats) -> None:
        J = len(stats.joints_mean) // 2
        a_mean = stats.actions_mean.copy()
        a_std = stats.actions_std.copy()
        # gripper targets stay in [0, 1]; only joint-angle columns are z-scored
        a_mean[J - 1::J] = 0.0
        a_std[J - 1::J] = 1.0
        self.norm_stats_ = NormStats(stats.joints_mean, stats.joints_std, a_mean, a_std)

    # -- training -------------------------------------------------------------

    def fit(self, episodes: list[EpisodeRecord], y=None, stats: NormStats | None = None, callback=None) -> "IACEPolicy":
        """Train on demonstration episodes (already at the control rate).

        ``callback(self, epoch, mean_loss)`` runs after every epoch.
        """
        episodes = check_episodes(episodes)
        dtype = self._torch_dtype()
        stats = stats if stats is not None else compute_norm_stats(episodes)
        J = episodes[0].J
        self._build(J, episodes[0].images.shape[2:], stats)
        net = self.network_
        ns = self.norm_stats_
        k = self.chunk_size

        joints = np.concatenate([(e.joints - ns.joints_mean) / ns.joints_std for e in episodes])
        targets = np.concatenate([(target_chunks(e.actions, k) - ns.actions_mean) / ns.actions_std for e in episodes])
        images = torch.from_numpy(np.concatenate([e.images for e in episodes])).to(dtype)
        joints = torch.from_numpy(joints).to(dtype)
        targets = torch.from_numpy(targets).to(dtype)
        starts = np.cumsum([0] + [e.T for e in episodes])

        opt = torch.optim.AdamW(net.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        gen = torch.Generator().manual_seed(self.seed)
        rng = np.random.default_rng(self.seed)
        self.loss_history_ = []
        net.train()
        for epoch in range(self.epochs):
            # every episode contributes samples_per_episode random timesteps
            picks = np.concatenate([
                starts[i] + rng.integers(0, e.T, self.samples_per_episode) for i, e in enumerate(episodes)
            ])
            rng.shuffle(picks)
            epoch_loss = 0.0
            for b in range(0, len(picks), self.batch_size):
                idx = torch.from_numpy(picks[b:b + self.batch_size])
                q, img, tgt = joints[idx], images[idx], targets[idx]
                style = net.cvae_encode(tgt, q)
                z = sample_latent(style, "train", gen)
                pred = net(q, img, z)
                value = loss(pred, tgt, style, self.kl_weight)
                if not torch.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {b}")
                opt.zero_grad(set_to_none=True)
                value.backward()
                opt.step()
                epoch_loss += value.item() * len(idx)
            self.loss_history_.append(epoch_loss / len(picks))
            if self.log_every and (epoch + 1) % self.log_every == 0:
                log.info("epoch %d loss %.5f", epoch + 1, self.loss_history_[-1])
            if callback is not None:
                callback(self, epoch, self.loss_history_[-1])
        net.eval()
        return self

    # -- inference -------------------------------------------------------------

    def _inputs(self, observations) -> tuple[torch.Tensor, torch.Tensor]:
        joints, images = check_observations(observations, self.config_.joint_dim, self.config_.image_shape)
        ns = self.norm_stats_
        dtype = self._torch_dtype()
        j = torch.from_numpy((joints - ns.joints_mean) / ns.joints_std).to(dtype)
        return j, torch.from_numpy(images).to(dtype)

    def predict_normalized(self, observations) -> torch.Tensor:
        check_is_fitted(self, "network_")
        joints, images = self._inputs(observations)
        with torch.no_grad():
            z = torch.zeros(len(joints), self.z_dim, dtype=joints.dtype)
            return self.network_(joints, images, z)

    def predict(self, observations) -> np.ndarray:
        """Action chunks ``(N, k, 2J)`` in joint units for ``N`` observations.

        Accepts an ``ObservationFrame``, a list of them, or a ``(joints, images)``
        pair of arrays shaped ``(N, 2J)`` and ``(N, 4, H, W, C)``.
        """
        out = self.predict_normalized(observations).double().numpy()
        ns = self.norm_stats_
        return out * ns.actions_std + ns.actions_mean

    def predict_one(self, obs: ObservationFrame) -> np.ndarray:
        return self.predict([obs])[0]

    # -- persistence --------------------------------------------------------------

    def save(self, path) -> None:
        from .checkpoint import save_checkpoint

        check_is_fitted(self, "network_")
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "IACEPolicy":
        from .checkpoint import load_checkpoint

        return load_checkpoint(path)
