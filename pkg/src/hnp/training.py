"""Meta-training and meta-test loops."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .diffcore import Adam, NonFiniteGradient
from .episodes import REGRESSION, Episode
from .eval import MetricRow, accuracy_with_ci, avg_nll
from .models import ModelConfig, NonFiniteLoss, batch_from_episode, build_model

log = logging.getLogger(__name__)

RUNLOG_COLUMNS = ("iter", "loss", "nll", "kl_z", "kl_w", "lr", "seconds")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, records: list):
        self.records = records
        super().__init__(message + "\n" + "\n".join(str(r) for r in records))


@dataclass
class TrainConfig:
    iterations: int = 20000
    base_lr: float = 1e-4
    decay_factor: float = 0.5
    decay_every: int = 3000
    n_z: int = 5
    n_w: int = 10
    seed: int = 0
    eval_every: int = 0  # 0: checkpoint only at the end
    grad_clip: float = 10.0
    model: str = "hnp"
    use_z: bool = True
    use_w: bool = True
    conditioning: str = "ours"
    # Off by default: the seconds column is then 0 and run logs are byte-reproducible.
    log_wall_time: bool = False
    # KL weight ramps linearly from 0 to 1 over this many iterations (0: always 1).
    kl_warmup: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.decay_every < 1 or self.n_z < 1 or self.n_w < 1 or self.kl_warmup < 0:
            raise ValueError("iteration and sample counts must be positive")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in names})


@dataclass
class RunLog:
    records: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def append(self, iteration: int, loss: float, parts: dict, lr: float, seconds: float):
        if self.records and iteration <= self.records[-1]["iter"]:
            raise ValueError("run log iterations must increase")
        self.records.append({
            "iter": iteration, "loss": loss, "nll": parts["nll"], "kl_z": parts["kl_z"],
            "kl_w": parts["kl_w"], "lr": lr, "seconds": seconds,
        })

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUNLOG_COLUMNS)
        for r in self.records:
            w.writerow([r["iter"]] + [repr(float(r[k])) for k in RUNLOG_COLUMNS[1:]])
        return buf.getvalue()

    def write_csv(self, path):
        Path(path).write_text(self.to_csv())

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.records])


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Step decay: base_lr * decay_factor ** (iteration // decay_every)."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return cfg.base_lr * cfg.decay_factor ** (iteration // cfg.decay_every)


def kl_weight_at(iteration: int, cfg: TrainConfig) -> float:
    if cfg.kl_warmup == 0:
        return 1.0
    return min(1.0, iteration / cfg.kl_warmup)


def rng_streams(seed: int) -> dict:
    """Independent generators for parameter init, episode sampling and MC draws."""
    init, data, mc = np.random.SeedSequence(seed).spawn(3)
    return {
        "init": np.random.default_rng(init),
        "data": np.random.default_rng(data),
        "mc": np.random.default_rng(mc),
    }


def model_config_for(base: ModelConfig, cfg: TrainConfig) -> ModelConfig:
    doc = base.to_dict()
    doc.update(model=cfg.model, n_z=cfg.n_z, n_w=cfg.n_w, use_z=cfg.use_z, use_w=cfg.use_w,
               conditioning=cfg.conditioning)
    return ModelConfig.from_dict(doc)


def init_model(base: ModelConfig, cfg: TrainConfig):
    mcfg = model_config_for(base, cfg)
    return build_model(mcfg, int(rng_streams(cfg.seed)["init"].integers(2**31)))


def meta_train(generator, model, cfg: TrainConfig, sink: RunLog | None = None,
               checkpoint_path=None, evaluator=None, clock=time.perf_counter, meta: dict | None = None):
    """Episodic training: one episode per iteration, Adam with step-decayed lr.

    ``generator(rng) -> Episode`` must produce episodes matching the model's
    mode. ``evaluator(model, iteration) -> dict`` runs every ``eval_every``
    iterations. ``meta`` is stored in every checkpoint written. Returns the
    trained model (updated in place).
    """
    sink = sink if sink is not None else RunLog()
    streams = rng_streams(cfg.seed)
    data_rng, mc_rng = streams["data"], streams["mc"]
    opt = Adam(model.named_parameters())
    dtype = model.cfg.np_dtype
    start = clock()
    meta = {**(meta or {}), "train": cfg.to_dict()}
    for it in range(cfg.iterations):
        ep = generator(data_rng)
        if ep.mode != model.cfg.mode:
            raise ValueError(f"generator yields {ep.mode} episodes for a {model.cfg.mode} model")
        lr = lr_at(it, cfg)
        try:
            loss, parts = model.loss(batch_from_episode(ep, dtype), mc_rng, cfg.n_z, cfg.n_w,
                                     kl_weight=kl_weight_at(it, cfg))
            opt.zero_grad()
            loss.backward()
            opt.step(lr, clip=cfg.grad_clip)
        except (NonFiniteLoss, NonFiniteGradient) as exc:
            if checkpoint_path is not None:
                emergency = Path(str(checkpoint_path) + ".emergency")
                save_checkpoint(emergency, model, {**meta, "iteration": it})
            raise TrainingDiverged(f"iteration {it}: {exc}", sink.records[-10:]) from exc
        seconds = clock() - start if cfg.log_wall_time else 0.0
        sink.append(it, float(loss.data), parts, lr, seconds)
        if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            if evaluator is not None:
                sink.evals.append({"iter": it, **evaluator(model, it)})
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, {**meta, "iteration": it + 1})
            log.info("iter %d loss %.4f lr %.2e", it, float(loss.data), lr)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, {**meta, "iteration": cfg.iterations})
    return model


def strip_target_labels(ep: Episode) -> tuple:
    """(context sets, target inputs): everything a meta-test prediction may read."""
    return [(t.context_x, t.context_y) for t in ep.tasks], [t.target_x for t in ep.tasks]


def predict_episode(model, ep: Episode, rng, n_z=None, n_w=None):
    from .models import make_batch

    contexts, inputs = strip_target_labels(ep)
    batch = make_batch(contexts, inputs, None, ep.mode, model.cfg.np_dtype)
    return model.predict(batch, rng, n_z, n_w)


@dataclass
class MetricTable:
    mode: str
    rows: dict  # name -> MetricRow

    def to_dict(self) -> dict:
        return {"mode": self.mode, "rows": {k: asdict(v) for k, v in self.rows.items()}}

    def to_csv(self) -> str:
        lines = ["name,mean,ci95,n"]
        for k, r in self.rows.items():
            lines.append(f"{k},{r.mean!r},{r.ci95!r},{r.n}")
        return "\n".join(lines) + "\n"

    @property
    def average(self) -> MetricRow:
        return self.rows["average"]


def meta_test(episodes, model, seed: int = 0, n_z=None, n_w=None) -> MetricTable:
    """Prior-path evaluation. Target labels are read only for scoring.

    Regression reports the average NLL over target points that are not also
    context points ("average") and, for reference, over the whole target set
    ("all_targets"); classification reports per-domain and average accuracy.
    """
    rng = np.random.default_rng(seed)
    mode = model.cfg.mode
    preds = []
    for ep in episodes:
        if ep.mode != mode:
            raise ValueError(f"{ep.mode} episode given to a {mode} model")
        preds.append(predict_episode(model, ep, rng, n_z, n_w))
    if mode == REGRESSION:
        truths = [[t.target_y for t in ep.tasks] for ep in episodes]
        held_out = [[~t.target_in_context for t in ep.tasks] for ep in episodes]
        rows = {"average": avg_nll(preds, truths, held_out),
                "all_targets": avg_nll(preds, truths, name="all_targets")}
        return MetricTable(mode, rows)
    labels, truths, ep_ids, doms = [], [], [], []
    for i, (ep, pred) in enumerate(zip(episodes, preds)):
        for t, tp in zip(ep.tasks, pred.tasks):
            guess = tp.predict_labels()
            labels.append(guess)
            truths.append(t.target_y)
            ep_ids.append(np.full(len(guess), i))
            doms.append(np.full(len(guess), t.task_index))
    rows = accuracy_with_ci(np.concatenate(labels), np.concatenate(truths), np.concatenate(ep_ids),
                            np.concatenate(doms))
    return MetricTable(mode, rows)
