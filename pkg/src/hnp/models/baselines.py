"""Conditional NP and vanilla (latent) NP baselines.

Both encode each task's context pairs with an MLP and mean-pool them per
task; the CNP decodes from the pooled representation directly, the NP
places a Gaussian latent on it.
"""
from __future__ import annotations

import numpy as np

from ..diffcore import (
    MLP,
    GaussianDiag,
    Module,
    Tensor,
    kl_diag_gaussian,
    positive_scale,
    reparam_sample,
)
from .common import (
    Batch,
    ModelConfig,
    concat_broadcast,
    head_log_lik,
    masked_mean,
    pair_features,
    set_scale_bias,
    spread_raw_inputs,
)
from .hnp import NonFiniteLoss, _prediction


def _pair_dim(cfg: ModelConfig) -> int:
    return cfg.x_dim + (1 if cfg.mode == "regression" else cfg.n_way)


def _raw_x_mlps(model, rng):
    """Encoder reads [x, y]: x first. Decoder reads [r or z, x]: x last."""
    dx = model.cfg.x_dim
    spread_raw_inputs(model.encoder.fc1, list(range(dx)), model.cfg, rng)
    d_in = model.decoder.fc1.weight.data.shape[1]
    spread_raw_inputs(model.decoder.fc1, list(range(d_in - dx, d_in)), model.cfg, rng)


class CNP(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        dt = cfg.np_dtype
        self.encoder = MLP(_pair_dim(cfg), cfg.d, cfg.d, rng, dt, cfg.mlp_depth)
        self.decoder = MLP(cfg.d + cfg.x_dim, cfg.d, cfg.n_slots, rng, dt, cfg.mlp_depth)
        _raw_x_mlps(self, rng)

    def represent(self, batch: Batch) -> Tensor:
        pairs = pair_features(batch.cx, batch.cy, self.cfg.mode, self.cfg.n_way)
        return masked_mean(self.encoder(Tensor(pairs)), batch.cmask)  # [M, d]

    def forward(self, batch: Batch) -> Tensor:
        r = self.represent(batch)
        return self.decoder(concat_broadcast(r.unsqueeze(-2), Tensor(batch.tx)))  # [M, Nt, K]

    def loss(self, batch: Batch, rng=None, n_z=None, n_w=None, kl_weight: float = 1.0):
        nll = -head_log_lik(self.forward(batch), batch, self.cfg.mode).sum(axis=-1)
        total = nll.sum()
        parts = {"nll": float(total.data), "kl_z": 0.0, "kl_w": 0.0}
        if not np.isfinite(total.data):
            raise NonFiniteLoss(parts)
        return total, parts

    def predict(self, batch: Batch, rng=None, n_z=None, n_w=None):
        return _prediction(self.cfg.mode, self.forward(batch).unsqueeze(1), batch)


class NP(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        dt = cfg.np_dtype
        self.encoder = MLP(_pair_dim(cfg), cfg.d, cfg.d, rng, dt, cfg.mlp_depth)
        self.z_mu = MLP(cfg.d, cfg.d, cfg.d_z, rng, dt)
        self.z_sigma = MLP(cfg.d, cfg.d, cfg.d_z, rng, dt)
        self.decoder = MLP(cfg.d_z + cfg.x_dim, cfg.d, cfg.n_slots, rng, dt, cfg.mlp_depth)
        set_scale_bias(self.z_sigma, cfg)
        _raw_x_mlps(self, rng)

    def latent(self, x: np.ndarray, y: np.ndarray, mask: np.ndarray) -> GaussianDiag:
        pairs = pair_features(x, y, self.cfg.mode, self.cfg.n_way)
        r = masked_mean(self.encoder(Tensor(pairs)), mask)
        return GaussianDiag(self.z_mu(r), positive_scale(self.z_sigma(r)))

    def _decode(self, z: Tensor, batch: Batch) -> Tensor:
        # z [M, S, d_z] -> outputs [M, S, Nt, K]
        return self.decoder(concat_broadcast(z.unsqueeze(-2), Tensor(batch.tx[:, None])))

    def loss(self, batch: Batch, rng: np.random.Generator, n_z: int | None = None, n_w=None,
             kl_weight: float = 1.0):
        n_z = n_z or self.cfg.n_z
        pz = self.latent(batch.cx, batch.cy, batch.cmask)
        qz = self.latent(batch.tx, batch.ty, batch.tmask)
        z = reparam_sample(qz, rng, n_z)
        ll = head_log_lik(self._decode(z, batch), batch, self.cfg.mode)
        nll = -ll.sum(axis=-1).mean(axis=1)
        kl = kl_diag_gaussian(qz, pz)
        total = (nll + kl * kl_weight).sum()
        parts = {"nll": float(nll.data.sum()), "kl_z": float(kl.data.sum()), "kl_w": 0.0}
        if not np.isfinite(total.data):
            raise NonFiniteLoss(parts)
        return total, parts

    def predict(self, batch: Batch, rng: np.random.Generator, n_z: int | None = None, n_w=None):
        n_z = n_z or self.cfg.n_z
        z = reparam_sample(self.latent(batch.cx, batch.cy, batch.cmask), rng, n_z)
        return _prediction(self.cfg.mode, self._decode(z, batch), batch)
