"""Heterogeneous neural process.

Each task gets a global latent z inferred from that task's embeddings plus
its own learnable task token, and a set of local decoder rows w, one per
output slot, inferred from per-slot cross-task aggregates plus a shared slot
token and conditioned on a z sample. The same modules give
priors (fed context sets) and variational posteriors (fed target sets).
"""
from __future__ import annotations

import numpy as np

from ..diffcore import (
    MLP,
    DimensionError,
    GaussianDiag,
    Linear,
    Module,
    Tensor,
    TransformerBlock,
    concat,
    kl_diag_gaussian,
    positive_scale,
    reparam_sample,
)
from ..episodes import CLASSIFICATION, REGRESSION
from .common import (
    Batch,
    InputEncoder,
    ModelConfig,
    build_prediction,
    class_means,
    concat_broadcast,
    decode_classification,
    head_log_lik,
    masked_mean,
    set_scale_bias,
)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, parts: dict):
        self.parts = parts
        super().__init__("non-finite loss: " + ", ".join(f"{k}={v}" for k, v in parts.items()))


def _token(shape, rng, dtype) -> Tensor:
    return Tensor((0.02 * rng.standard_normal(shape)).astype(dtype), requires_grad=True)


class HNP(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, dz, dw, dt = cfg.d, cfg.d_z, cfg.d_w, cfg.np_dtype
        self.encoder = InputEncoder(cfg, rng)
        if dw != d:
            self.target_proj = Linear(d, dw, rng, dt)
        if cfg.use_z:
            self.task_tokens = _token((cfg.n_tasks, d), rng, dt)
            self.z_block = TransformerBlock(d, cfg.heads, rng, dt)
            self.z_mean = MLP(d, d, dz, rng, dt)
            self.z_scale = MLP(d, d, dz, rng, dt)
            set_scale_bias(self.z_scale, cfg)
        if cfg.use_w:
            self.slot_tokens = _token((cfg.n_slots, d), rng, dt)
            self.w_block = TransformerBlock(d, cfg.heads, rng, dt)
            if cfg.conditioning == "concat":
                self.w_cond_in = Linear(d + dz, d, rng, dt)
            elif cfg.conditioning == "add":
                self.w_cond_in = Linear(dz, d, rng, dt)
            head_in = d + dz if cfg.conditioning == "ours" else d
            self.w_mean = MLP(head_in, d, dw, rng, dt)
            self.w_scale = MLP(head_in, d, dw, rng, dt)
            set_scale_bias(self.w_scale, cfg)
        else:
            # Ablation: a deterministic head replaces the local latent decoder.
            self.head = MLP(d + dz, d, cfg.n_slots, rng, dt)

    # -- inference modules -------------------------------------------------
    def infer_z(self, emb: Tensor, task_token: Tensor, mask=None) -> GaussianDiag:
        """[token; emb] -> pre-norm MSA and MLP residuals -> Gaussian read from the
        refined token. ``emb`` is [..., L, d], ``task_token`` [..., d]."""
        if emb.shape[-2] < 1:
            raise DimensionError("infer_z needs at least one embedding")
        seq = concat([task_token.unsqueeze(-2).broadcast_to(emb.shape[:-2] + (1, emb.shape[-1])), emb], axis=-2)
        key_mask = None
        if mask is not None:
            key_mask = np.concatenate([np.ones(mask.shape[:-1] + (1,), bool), mask], axis=-1)
        tok = self.z_block(seq, key_mask)[..., 0, :]
        return GaussianDiag(self.z_mean(tok), positive_scale(self.z_scale(tok)))

    def refine_slot_token(self, agg: Tensor, slot_token: Tensor) -> Tensor:
        seq = concat([slot_token.unsqueeze(-2), agg], axis=-2)
        return self.w_block(seq)[..., 0, :]

    def infer_w(self, agg: Tensor, slot_token: Tensor, z: Tensor) -> GaussianDiag:
        """Gaussian over the decoder row of one slot.

        ``agg`` [..., M, d] holds one aggregated embedding per task, ``slot_token``
        [..., d] the slot token and ``z`` [..., d_z] the conditioning sample.
        Leading axes broadcast, so a batch of z samples can share one ``agg``.
        """
        if agg.shape[-2] != self.cfg.n_tasks:
            raise DimensionError(f"row inference expects {self.cfg.n_tasks} task rows, got {agg.shape[-2]}")
        variant = self.cfg.conditioning
        if variant == "ours":
            refined = self.refine_slot_token(agg, slot_token)
            inp = concat_broadcast(refined, z)
        else:
            zz = z.unsqueeze(-2)
            if variant == "concat":
                feats = self.w_cond_in(concat_broadcast(agg, zz))
            else:
                feats = agg + self.w_cond_in(zz)
            lead = feats.shape[:-2]
            inp = self.refine_slot_token(feats, slot_token.broadcast_to(lead + slot_token.shape[-1:]))
        return GaussianDiag(self.w_mean(inp), positive_scale(self.w_scale(inp)))

    # -- shared pieces -------------------------------------------------------
    def slot_inputs(self, emb: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
        """Per-slot cross-task aggregates, [O_w, M, d]."""
        if self.cfg.mode == CLASSIFICATION:
            return class_means(emb, labels, mask, self.cfg.n_way).swapaxes(0, 1)
        pooled = masked_mean(emb, mask)
        return pooled.unsqueeze(0).broadcast_to((self.cfg.n_slots,) + pooled.shape)

    def target_embedding(self, tx: np.ndarray) -> Tensor:
        emb = self.encoder.target(tx)
        return self.target_proj(emb) if "target_proj" in self.__dict__ else emb

    def _decode(self, temb: Tensor, z: Tensor, w: Tensor | None) -> Tensor:
        """Raw outputs [M, S(, Nw), Nt, K] from either local rows or the ablation head."""
        if w is not None:
            return decode_classification(temb.unsqueeze(1).unsqueeze(1), w)
        return self.head(concat_broadcast(temb.unsqueeze(1), z.unsqueeze(-2)))

    def _z_samples(self, q: GaussianDiag | None, n: int, rng, M: int) -> Tensor:
        if q is None:
            return Tensor(np.zeros((M, 1, self.cfg.d_z), dtype=self.cfg.np_dtype))
        return reparam_sample(q, rng, n)

    def _check_tasks(self, batch: Batch):
        if batch.n_tasks != self.cfg.n_tasks:
            raise DimensionError(f"episode has {batch.n_tasks} tasks, model expects {self.cfg.n_tasks}")

    # -- objective and prediction -------------------------------------------
    def loss(self, batch: Batch, rng: np.random.Generator, n_z: int | None = None, n_w: int | None = None,
             kl_weight: float = 1.0):
        """Negative ELBO summed over tasks; ``kl_weight`` scales both KL terms.

        The returned parts carry the unweighted KLs.
        """
        self._check_tasks(batch)
        cfg = self.cfg
        n_z = n_z or cfg.n_z
        n_w = n_w or cfg.n_w
        M = batch.n_tasks
        cemb = self.encoder.context(batch.cx, batch.cy)
        temb_pairs = self.encoder.context(batch.tx, batch.ty)
        temb = self.target_embedding(batch.tx)
        zero = Tensor(np.zeros(M, dtype=cfg.np_dtype))
        if cfg.use_z:
            pz = self.infer_z(cemb, self.task_tokens, batch.cmask)
            qz = self.infer_z(temb_pairs, self.task_tokens, batch.tmask)
            kl_z = kl_diag_gaussian(qz, pz)
            z = self._z_samples(qz, n_z, rng, M)
        else:
            kl_z = zero
            z = self._z_samples(None, n_z, rng, M)
        if cfg.use_w:
            zc = z.unsqueeze(-2)  # [M, S, 1, d_z]
            pw = self.infer_w(self.slot_inputs(cemb, batch.cy, batch.cmask), self.slot_tokens, zc)
            qw = self.infer_w(self.slot_inputs(temb_pairs, batch.ty, batch.tmask), self.slot_tokens, zc)
            kl_w = kl_diag_gaussian(qw, pw).sum(axis=-1).mean(axis=1)
            w = reparam_sample(qw, rng, n_w).swapaxes(-2, -3)  # [M, S, Nw, O_w, d_w]
            ll = head_log_lik(self._decode(temb, z, w), batch, cfg.mode)  # [M, S, Nw, Nt]
            nll = -ll.sum(axis=-1).mean(axis=(1, 2))
        else:
            kl_w = zero
            ll = head_log_lik(self._decode(temb, z, None), batch, cfg.mode)  # [M, S, Nt]
            nll = -ll.sum(axis=-1).mean(axis=1)
        total = (nll + (kl_w + kl_z) * kl_weight).sum()
        parts = {
            "nll": float(nll.data.sum()),
            "kl_z": float(kl_z.data.sum()),
            "kl_w": float(kl_w.data.sum()),
        }
        if not np.isfinite(total.data):
            raise NonFiniteLoss(parts)
        return total, parts

    def predict(self, batch: Batch, rng: np.random.Generator, n_z: int | None = None, n_w: int | None = None):
        """Prior-path predictive distribution with latents drawn from context-conditioned priors."""
        self._check_tasks(batch)
        cfg = self.cfg
        n_z = n_z or cfg.n_z
        n_w = n_w or cfg.n_w
        M = batch.n_tasks
        cemb = self.encoder.context(batch.cx, batch.cy)
        temb = self.target_embedding(batch.tx)
        pz = self.infer_z(cemb, self.task_tokens, batch.cmask) if cfg.use_z else None
        z = self._z_samples(pz, n_z, rng, M)
        if cfg.use_w:
            pw = self.infer_w(self.slot_inputs(cemb, batch.cy, batch.cmask), self.slot_tokens, z.unsqueeze(-2))
            w = reparam_sample(pw, rng, n_w).swapaxes(-2, -3)
            out = self._decode(temb, z, w)
            out = out.reshape((M, -1) + out.shape[-2:])
        else:
            out = self._decode(temb, z, None)
        return _prediction(cfg.mode, out, batch)


def _prediction(mode: str, out: Tensor, batch: Batch):
    if mode == CLASSIFICATION:
        return build_prediction(mode, out, batch)
    assert mode == REGRESSION
    mean = out[..., 0]
    scale = positive_scale(out[..., 1])
    return build_prediction(mode, mean, batch, scale=scale)
