"""HNP and the CNP / NP baselines behind one ``loss`` / ``predict`` interface."""
from __future__ import annotations

import numpy as np

from ..episodes import Episode
from .baselines import CNP, NP
from .common import (
    Batch,
    InputEncoder,
    ModelConfig,
    PredictiveOutput,
    TaskPrediction,
    batch_from_episode,
    decode_classification,
    decode_regression,
    make_batch,
)
from .hnp import HNP, NonFiniteLoss

MODELS = {"hnp": HNP, "cnp": CNP, "np": NP}


def build_model(cfg: ModelConfig, seed: int = 0):
    """Fresh model with parameters drawn from ``default_rng(seed)``."""
    return MODELS[cfg.model](cfg, np.random.default_rng(seed))


def hnp_elbo_loss(episode: Episode, model: HNP, rng, n_z: int | None = None, n_w: int | None = None):
    """Negative Monte Carlo ELBO of one episode; returns (loss Tensor, parts)."""
    return model.loss(batch_from_episode(episode, model.cfg.np_dtype), rng, n_z, n_w)


def hnp_predict(context_sets, target_inputs, model, rng, n_z: int | None = None, n_w: int | None = None) -> PredictiveOutput:
    """Meta-test prediction from context sets only; target labels are never seen."""
    batch = make_batch(context_sets, target_inputs, None, model.cfg.mode, model.cfg.np_dtype)
    return model.predict(batch, rng, n_z, n_w)


def cnp_forward(episode: Episode, model: CNP) -> PredictiveOutput:
    return model.predict(batch_from_episode(episode, model.cfg.np_dtype, with_labels=False))


def np_forward(episode: Episode, model: NP, mode: str, rng):
    """``mode='test'``: prior-path PredictiveOutput. ``mode='train'``: the same
    plus the ELBO loss and its parts."""
    if mode == "test":
        return model.predict(batch_from_episode(episode, model.cfg.np_dtype, with_labels=False), rng)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    batch = batch_from_episode(episode, model.cfg.np_dtype)
    loss, parts = model.loss(batch, rng)
    return model.predict(batch, rng), loss, parts


__all__ = [
    "Batch", "CNP", "HNP", "InputEncoder", "MODELS", "ModelConfig", "NP", "NonFiniteLoss",
    "PredictiveOutput", "TaskPrediction", "batch_from_episode", "build_model", "cnp_forward",
    "decode_classification", "decode_regression", "hnp_elbo_loss", "hnp_predict", "make_batch",
    "np_forward",
]
