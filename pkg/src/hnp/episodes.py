"""Episodic multi-task data.

Three sources are supported:

* joint GP draws where every task sees the same latent function on its own
  input interval (multi-task 1D regression),
* a synthetic heterogeneous-domain classification generator, where each
  domain applies its own affine distortion to shared category prototypes,
* feature banks loaded from a plain-text file, for users with real features.

All generators are pure functions of their config and the ``rng`` passed in.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

REGRESSION = "regression"
CLASSIFICATION = "classification"


class EpisodeError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class FeatureBankError(ValueError):
    pass


class LabeledPoint(NamedTuple):
    x: np.ndarray
    y: float | int


@dataclass
class TaskData:
    task_index: int
    context_x: np.ndarray  # [N_C, d_x]
    context_y: np.ndarray  # [N_C] float (regression) or int (classification)
    target_x: np.ndarray  # [N_T, d_x]
    target_y: np.ndarray  # [N_T]
    # True where a target point duplicates a context point (regression training).
    target_in_context: np.ndarray = None

    def __post_init__(self):
        self.context_x = np.atleast_2d(np.asarray(self.context_x, dtype=np.float64))
        self.target_x = np.atleast_2d(np.asarray(self.target_x, dtype=np.float64))
        self.context_y = np.asarray(self.context_y)
        self.target_y = np.asarray(self.target_y)
        if self.target_in_context is None:
            self.target_in_context = np.zeros(len(self.target_y), dtype=bool)
        self.target_in_context = np.asarray(self.target_in_context, dtype=bool)

    @property
    def n_context(self) -> int:
        return len(self.context_y)

    @property
    def n_target(self) -> int:
        return len(self.target_y)

    def context_points(self) -> list[LabeledPoint]:
        return [LabeledPoint(x, y) for x, y in zip(self.context_x, self.context_y.tolist())]

    def target_points(self) -> list[LabeledPoint]:
        return [LabeledPoint(x, y) for x, y in zip(self.target_x, self.target_y.tolist())]

    def subset_targets(self, keep) -> "TaskData":
        keep = np.asarray(keep)
        return TaskData(
            self.task_index, self.context_x, self.context_y,
            self.target_x[keep], self.target_y[keep], self.target_in_context[keep],
        )


@dataclass
class Episode:
    tasks: list[TaskData]
    mode: str
    # classification: label_map[local_label] == raw category id
    label_map: list[int] = field(default_factory=list)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def n_way(self) -> int:
        return len(self.label_map)

    def to_dict(self) -> dict:
        def pts(xs, ys):
            return [{"x": x.tolist(), "y": y} for x, y in zip(xs, ys.tolist())]

        return {
            "mode": self.mode,
            "label_map": [int(v) for v in self.label_map],
            "tasks": [
                {
                    "task_index": t.task_index,
                    "context": pts(t.context_x, t.context_y),
                    "target": pts(t.target_x, t.target_y),
                    "target_in_context": t.target_in_context.tolist(),
                }
                for t in self.tasks
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "Episode":
        ydtype = np.int64 if doc["mode"] == CLASSIFICATION else np.float64
        tasks = []
        for t in doc["tasks"]:
            tasks.append(TaskData(
                t["task_index"],
                np.array([p["x"] for p in t["context"]], dtype=np.float64),
                np.array([p["y"] for p in t["context"]], dtype=ydtype),
                np.array([p["x"] for p in t["target"]], dtype=np.float64),
                np.array([p["y"] for p in t["target"]], dtype=ydtype),
                np.array(t.get("target_in_context", [False] * len(t["target"])), dtype=bool),
            ))
        return cls(tasks, doc["mode"], list(doc.get("label_map", [])))

    @classmethod
    def from_json(cls, text: str) -> "Episode":
        return cls.from_dict(json.loads(text))


def validate_episode(ep: Episode, n_way: int | None = None, shots: int | None = None) -> None:
    """Raise :class:`EpisodeError` if ``ep`` breaks an Episode/TaskData invariant."""
    if ep.mode not in (REGRESSION, CLASSIFICATION):
        raise EpisodeError(f"unknown mode {ep.mode!r}")
    idx = sorted(t.task_index for t in ep.tasks)
    if idx != list(range(len(ep.tasks))):
        raise EpisodeError(f"task indices {idx} are not 0..{len(ep.tasks) - 1}")
    dims = {t.context_x.shape[1] for t in ep.tasks} | {t.target_x.shape[1] for t in ep.tasks}
    if len(dims) != 1:
        raise EpisodeError(f"tasks disagree on input dimension: {sorted(dims)}")
    for t in ep.tasks:
        if len(t.context_x) != len(t.context_y) or len(t.target_x) != len(t.target_y):
            raise EpisodeError(f"task {t.task_index}: inputs and labels have different lengths")
        if len(t.target_in_context) != len(t.target_y):
            raise EpisodeError(f"task {t.task_index}: target_in_context length mismatch")
    if ep.mode == REGRESSION:
        return
    O = ep.n_way if n_way is None else n_way
    if len(set(ep.label_map)) != len(ep.label_map) or (n_way is not None and ep.n_way != n_way):
        raise EpisodeError("label_map must be a bijection onto 0..O-1")
    for t in ep.tasks:
        for ys in (t.context_y, t.target_y):
            if ys.size and (ys.min() < 0 or ys.max() >= O):
                raise EpisodeError(f"task {t.task_index}: category index outside [0, {O})")
        counts = np.bincount(t.context_y.astype(int), minlength=O)
        if shots is not None and not np.all(counts == shots):
            raise EpisodeError(f"task {t.task_index}: context counts {counts.tolist()} != {shots} per category")


# -- GP regression episodes -------------------------------------------------

@dataclass(frozen=True)
class GpConfig:
    length_scale: float = 0.4
    signal_sigma: float = 1.0
    intervals: tuple = ((-4.0, -2.0), (-2.0, 0.0), (0.0, 2.0), (2.0, 4.0))
    n_context_per_task: int = 5
    n_target_per_task: int = 10
    jitter: float = 1e-6
    # Training episodes: the target set is context + extra points.
    include_context_in_target: bool = True

    def __post_init__(self):
        if self.length_scale <= 0 or self.signal_sigma <= 0 or self.jitter <= 0:
            raise ValueError("length_scale, signal_sigma and jitter must be positive")
        if self.n_context_per_task < 1 or self.n_target_per_task < 1:
            raise ValueError("per-task point counts must be positive")
        iv = sorted(tuple(map(float, i)) for i in self.intervals)
        for lo, hi in iv:
            if not lo < hi:
                raise ValueError(f"empty interval [{lo}, {hi})")
        for (_, hi), (lo, _) in zip(iv, iv[1:]):
            if lo < hi:
                raise ValueError("task intervals overlap")

    @property
    def n_tasks(self) -> int:
        return len(self.intervals)


def rbf_kernel(x, x2, cfg: GpConfig) -> float:
    """sigma^2 exp(-(x - x')^2 / (2 l^2))."""
    return float(cfg.signal_sigma**2 * np.exp(-((x - x2) ** 2) / (2.0 * cfg.length_scale**2)))


def rbf_matrix(xs: np.ndarray, ys: np.ndarray, cfg: GpConfig) -> np.ndarray:
    d = np.subtract.outer(np.ravel(xs), np.ravel(ys))
    return cfg.signal_sigma**2 * np.exp(-(d * d) / (2.0 * cfg.length_scale**2))


def sample_gp_values(xs: np.ndarray, cfg: GpConfig, rng: np.random.Generator) -> np.ndarray:
    """One zero-mean GP draw at the stacked inputs ``xs``.

    The jitter grows tenfold on each Cholesky failure, at most three times.
    """
    K = rbf_matrix(xs, xs, cfg)
    n = len(K)
    jitter = cfg.jitter
    for _ in range(4):
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(n))
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
    else:
        raise GenerationError(f"Cholesky failed for {n} points even with jitter {jitter / 10:g}")
    return L @ rng.standard_normal(n)


def sample_gp_episode(cfg: GpConfig, rng: np.random.Generator) -> Episode:
    n_c, n_t = cfg.n_context_per_task, cfg.n_target_per_task
    per = n_c + n_t
    xs = np.concatenate([rng.uniform(lo, hi, size=per) for lo, hi in cfg.intervals])
    ys = sample_gp_values(xs, cfg, rng)
    tasks = []
    for m in range(cfg.n_tasks):
        x = xs[m * per:(m + 1) * per, None]
        y = ys[m * per:(m + 1) * per]
        if cfg.include_context_in_target:
            tx, ty = x.copy(), y.copy()
            mask = np.arange(per) < n_c
        else:
            tx, ty = x[n_c:], y[n_c:]
            mask = np.zeros(n_t, dtype=bool)
        tasks.append(TaskData(m, x[:n_c], y[:n_c], tx, ty, mask))
    return Episode(tasks, REGRESSION)


# -- classification episodes ------------------------------------------------

@dataclass(frozen=True)
class EpisodeSpec:
    n_tasks: int = 4
    n_way: int = 5
    shots: int = 1
    n_target: int = 15  # per task, split evenly across categories

    def __post_init__(self):
        if min(self.n_tasks, self.n_way, self.shots, self.n_target) < 1:
            raise ValueError("episode spec counts must be positive")
        if self.n_target % self.n_way:
            raise ValueError(f"n_target={self.n_target} is not a multiple of n_way={self.n_way}")

    @property
    def queries_per_category(self) -> int:
        return self.n_target // self.n_way


@dataclass(frozen=True)
class SyntheticDomainsConfig:
    n_domains: int = 4
    feature_dim: int = 16
    n_train_categories: int = 40
    n_test_categories: int = 25
    noise: float = 0.3
    prototype_scale: float = 1.0
    # A_m = I + distortion * G_m / sqrt(d), G_m standard normal
    distortion: float = 1.5
    offset_scale: float = 0.5


@dataclass
class SyntheticDomains:
    """Frozen generator state: per-domain affine maps and category prototypes."""

    A: np.ndarray  # [n_domains, d, d]
    b: np.ndarray  # [n_domains, d]
    noise: np.ndarray  # [n_domains]
    prototypes: np.ndarray  # [n_categories, d]
    train_categories: np.ndarray
    test_categories: np.ndarray

    def __post_init__(self):
        if set(self.train_categories.tolist()) & set(self.test_categories.tolist()):
            raise EpisodeError("meta-train and meta-test categories overlap")

    @property
    def n_domains(self) -> int:
        return len(self.A)

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]

    def categories(self, split: str) -> np.ndarray:
        if split == "train":
            return self.train_categories
        if split == "test":
            return self.test_categories
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")


def make_synthetic_domains(cfg: SyntheticDomainsConfig, seed: int) -> SyntheticDomains:
    rng = np.random.default_rng(seed)
    d = cfg.feature_dim
    n_cat = cfg.n_train_categories + cfg.n_test_categories
    A = np.eye(d) + cfg.distortion * rng.standard_normal((cfg.n_domains, d, d)) / np.sqrt(d)
    b = cfg.offset_scale * rng.standard_normal((cfg.n_domains, d))
    protos = cfg.prototype_scale * rng.standard_normal((n_cat, d))
    order = rng.permutation(n_cat)
    return SyntheticDomains(
        A=A, b=b, noise=np.full(cfg.n_domains, cfg.noise), prototypes=protos,
        train_categories=np.sort(order[:cfg.n_train_categories]),
        test_categories=np.sort(order[cfg.n_train_categories:]),
    )


def _assemble(tasks_ctx, tasks_tgt, n_way: int, label_map: list) -> Episode:
    tasks = []
    for m, ((cx, cy), (tx, ty)) in enumerate(zip(tasks_ctx, tasks_tgt)):
        tasks.append(TaskData(m, cx, cy.astype(np.int64), tx, ty.astype(np.int64)))
    return Episode(tasks, CLASSIFICATION, label_map)


def sample_synthetic_classification_episode(
    spec: EpisodeSpec, gen: SyntheticDomains, rng: np.random.Generator, split: str = "train"
) -> Episode:
    pool = gen.categories(split)
    if spec.n_way > len(pool):
        raise EpisodeError(f"{spec.n_way}-way episode requested but the {split} split has {len(pool)} categories")
    if spec.n_tasks > gen.n_domains:
        raise EpisodeError(f"{spec.n_tasks} tasks requested but the generator has {gen.n_domains} domains")
    chosen = rng.choice(pool, size=spec.n_way, replace=False)
    K, Q = spec.shots, spec.queries_per_category
    labels_c = np.repeat(np.arange(spec.n_way), K)
    labels_t = np.repeat(np.arange(spec.n_way), Q)
    ctx, tgt = [], []
    for m in range(spec.n_tasks):
        protos = gen.prototypes[chosen]  # [O, d]
        eps = rng.standard_normal((spec.n_way, K + Q, gen.feature_dim)) * gen.noise[m]
        pts = (protos[:, None, :] + eps) @ gen.A[m].T + gen.b[m]
        cx = pts[:, :K].reshape(-1, gen.feature_dim)
        tx = pts[:, K:].reshape(-1, gen.feature_dim)
        perm = rng.permutation(len(tx))
        ctx.append((cx, labels_c))
        tgt.append((tx[perm], labels_t[perm]))
    return _assemble(ctx, tgt, spec.n_way, [int(c) for c in chosen])


# -- feature banks ----------------------------------------------------------

@dataclass
class FeatureBank:
    feature_dim: int
    n_domains: int
    features: np.ndarray  # [N, d]
    categories: np.ndarray  # [N] raw ids
    domains: np.ndarray  # [N]
    train_categories: tuple
    test_categories: tuple

    def __post_init__(self):
        overlap = set(self.train_categories) & set(self.test_categories)
        if overlap:
            raise FeatureBankError(f"categories in both splits: {sorted(overlap)}")

    @property
    def n_entries(self) -> int:
        return len(self.categories)

    def categories_for(self, split: str) -> tuple:
        if split == "train":
            return self.train_categories
        if split == "test":
            return self.test_categories
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")


def _parse_kv(line: str, lineno: int, keys: tuple) -> dict:
    out = {}
    for tok in line.split():
        if "=" not in tok:
            raise FeatureBankError(f"line {lineno}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    if tuple(sorted(out)) != tuple(sorted(keys)):
        raise FeatureBankError(f"line {lineno}: expected keys {keys}, got {tuple(out)}")
    return out


def _parse_ids(text: str, lineno: int) -> tuple:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise FeatureBankError(f"line {lineno}: bad category list {text!r}") from exc


def load_feature_bank(path) -> FeatureBank:
    """Parse a feature-bank file.

    Format::

        dim=<d> domains=<M>
        train_categories=<comma list>
        test_categories=<comma list>
        <domain_id>,<category_id>,<f1>,...,<fd>
        ...
    """
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].strip():
        raise FeatureBankError(f"line 1: empty feature bank file {path}")
    if len(lines) < 3:
        raise FeatureBankError(f"line {len(lines) + 1}: missing split header")
    head = _parse_kv(lines[0], 1, ("dim", "domains"))
    try:
        dim, n_dom = int(head["dim"]), int(head["domains"])
    except ValueError as exc:
        raise FeatureBankError(f"line 1: malformed header {lines[0]!r}") from exc
    splits = {}
    for lineno, key in ((2, "train_categories"), (3, "test_categories")):
        line = lines[lineno - 1]
        if not line.startswith(key + "="):
            raise FeatureBankError(f"line {lineno}: expected '{key}=...'")
        splits[key] = _parse_ids(line.split("=", 1)[1], lineno)
    train, test = splits["train_categories"], splits["test_categories"]
    overlap = set(train) & set(test)
    if overlap:
        raise FeatureBankError(f"line 3: categories {sorted(overlap)} appear in both splits")
    known = set(train) | set(test)
    feats, cats, doms = [], [], []
    for lineno, line in enumerate(lines[3:], start=4):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != dim + 2:
            raise FeatureBankError(f"line {lineno}: expected {dim + 2} fields, got {len(parts)}")
        try:
            dom, cat = int(parts[0]), int(parts[1])
            vec = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise FeatureBankError(f"line {lineno}: {exc}") from exc
        if not 0 <= dom < n_dom:
            raise FeatureBankError(f"line {lineno}: domain {dom} outside [0, {n_dom})")
        if cat not in known:
            raise FeatureBankError(f"line {lineno}: category {cat} is in neither split")
        feats.append(vec)
        cats.append(cat)
        doms.append(dom)
    if not feats:
        raise FeatureBankError(f"line {len(lines) + 1}: feature bank has no entries")
    return FeatureBank(
        dim, n_dom, np.array(feats, dtype=np.float64), np.array(cats), np.array(doms), train, test
    )


def write_feature_bank(path, bank: FeatureBank) -> None:
    rows = [
        f"dim={bank.feature_dim} domains={bank.n_domains}",
        "train_categories=" + ",".join(map(str, bank.train_categories)),
        "test_categories=" + ",".join(map(str, bank.test_categories)),
    ]
    for f, c, d in zip(bank.features, bank.categories, bank.domains):
        rows.append(",".join([str(int(d)), str(int(c))] + [repr(float(v)) for v in f]))
    Path(path).write_text("\n".join(rows) + "\n")


def sample_feature_episode(bank: FeatureBank, spec: EpisodeSpec, split: str, rng: np.random.Generator) -> Episode:
    pool = np.array(bank.categories_for(split))
    if spec.n_way > len(pool):
        raise EpisodeError(f"{spec.n_way}-way episode requested but the {split} split has {len(pool)} categories")
    if spec.n_tasks > bank.n_domains:
        raise EpisodeError(f"{spec.n_tasks} tasks requested but the bank has {bank.n_domains} domains")
    chosen = rng.choice(pool, size=spec.n_way, replace=False)
    K, Q = spec.shots, spec.queries_per_category
    ctx, tgt = [], []
    for m in range(spec.n_tasks):
        cx, cy, tx, ty = [], [], [], []
        for o, cat in enumerate(chosen):
            rows = np.flatnonzero((bank.domains == m) & (bank.categories == cat))
            if len(rows) < K + Q:
                raise EpisodeError(
                    f"(domain {m}, category {int(cat)}) has {len(rows)} entries, needs {K + Q}"
                )
            pick = rng.choice(rows, size=K + Q, replace=False)
            cx.append(bank.features[pick[:K]])
            tx.append(bank.features[pick[K:]])
            cy += [o] * K
            ty += [o] * Q
        tx = np.concatenate(tx)
        ty = np.array(ty)
        perm = rng.permutation(len(ty))
        ctx.append((np.concatenate(cx), np.array(cy)))
        tgt.append((tx[perm], ty[perm]))
    return _assemble(ctx, tgt, spec.n_way, [int(c) for c in chosen])
