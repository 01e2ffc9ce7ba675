"""Metrics and consistency / gradient verifiers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Z95 = 1.96


@dataclass
class MetricRow:
    name: str
    mean: float
    ci95: float  # half-width
    n: int

    def __post_init__(self):
        if self.n < 1 or not self.ci95 >= 0:
            raise ValueError(f"invalid metric row {self}")


def _ci95(values: np.ndarray) -> float:
    if len(values) < 2:
        return 0.0
    return float(Z95 * values.std(ddof=1) / np.sqrt(len(values)))


def avg_nll(outputs, truths, masks=None, name: str = "average") -> MetricRow:
    """Mean negative log predictive density over all scored target points.

    ``outputs[i]`` is episode i's PredictiveOutput (or a ``(output, masks)``
    pair), ``truths[i]`` its per-task target values and ``masks[i]`` optional
    per-task boolean arrays selecting which points are scored. The CI is over
    per-episode mean NLLs.
    """
    if len(outputs) != len(truths):
        raise ValueError(f"{len(outputs)} outputs for {len(truths)} ground truths")
    total, count, per_episode = 0.0, 0, []
    for i, (out, ys) in enumerate(zip(outputs, truths)):
        keep = None if masks is None else masks[i]
        if isinstance(out, tuple):
            out, keep = out
        if not hasattr(out, "log_density"):
            raise TypeError(f"episode {i}: output has no density evaluator")
        lds = out.log_density(ys)
        if keep is not None:
            lds = [ld[np.asarray(k, bool)] for ld, k in zip(lds, keep)]
        flat = np.concatenate(lds) if lds else np.zeros(0)
        if flat.size == 0:
            continue
        total -= float(flat.sum())
        count += flat.size
        per_episode.append(-float(flat.mean()))
    if count == 0:
        raise ValueError("no target points to score")
    return MetricRow(name, total / count, _ci95(np.array(per_episode)), count)


def accuracy_with_ci(predictions, truths, episode_ids, domains=None) -> dict:
    """Per-domain and average accuracy; CI is 1.96 * stderr over per-episode accuracies.

    ``episode_ids`` labels each prediction with its episode, ``domains`` with
    its task distribution. Returns {name: MetricRow}, domains first.
    """
    predictions = np.asarray(predictions)
    truths = np.asarray(truths)
    episode_ids = np.asarray(episode_ids)
    if not len(predictions) == len(truths) == len(episode_ids):
        raise ValueError(f"length mismatch: {len(predictions)} predictions, {len(truths)} truths, "
                         f"{len(episode_ids)} episode ids")
    if domains is not None and len(domains) != len(predictions):
        raise ValueError(f"length mismatch: {len(domains)} domain labels for {len(predictions)} predictions")
    if len(predictions) == 0:
        raise ValueError("no predictions to score")
    correct = (predictions == truths).astype(np.float64)

    def row(name, sel):
        ids = episode_ids[sel]
        uniq, inv = np.unique(ids, return_inverse=True)
        per_ep = np.bincount(inv, weights=correct[sel]) / np.bincount(inv)
        return MetricRow(name, float(per_ep.mean()), _ci95(per_ep), len(uniq))

    rows = {}
    if domains is not None:
        domains = np.asarray(domains)
        for d in np.unique(domains):
            rows[f"domain_{int(d)}"] = row(f"domain_{int(d)}", domains == d)
    rows["average"] = row("average", np.ones(len(correct), bool))
    return rows


# -- consistency checks ---------------------------------------------------------

EXCHANGEABILITY_TOL = 1e-6
MARGINALIZATION_TOL = 1e-9


def as_float64(model):
    """Copy of ``model`` with float64 parameters; consistency checks run at this precision."""
    from .models import ModelConfig, build_model

    if model.cfg.dtype == "float64":
        return model
    doc = model.cfg.to_dict()
    doc["dtype"] = "float64"
    twin = build_model(ModelConfig.from_dict(doc), 0)
    twin.load_state_dict(model.state_dict())
    return twin


def _rel_err(a, b) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
    diff = np.abs(a - b)
    return float(np.max(np.where(diff == 0, 0.0, diff / scale), initial=0.0))


def _pinned_prediction(model, contexts, inputs, mode, seed):
    from .models import make_batch

    batch = make_batch(contexts, inputs, None, mode, model.cfg.np_dtype)
    # A fresh generator per call: every evaluation sees the same latent draws.
    return model.predict(batch, np.random.default_rng(seed))


def _report(check, episode_id, trials, errs, tol) -> dict:
    worst = max(errs, default=0.0)
    return {"check": check, "episode_id": episode_id, "trials": trials,
            "max_rel_err": worst, "pass": bool(worst <= tol)}


def exchangeability_check(model, episode, seed: int = 0, trials: int = 20, episode_id: int = 0,
                          perm_rng=None, break_alignment: bool = False, tol: float = EXCHANGEABILITY_TOL) -> dict:
    """Joint target log-density under random within-task permutations of the targets.

    Each trial draws one permutation per task (the block structure of the
    consistency condition) and re-runs the model on the permuted inputs with
    the same pinned latents. ``break_alignment`` permutes the labels but not
    the inputs, a negative control that must fail.
    """
    model = as_float64(model)
    perm_rng = perm_rng if perm_rng is not None else np.random.default_rng(seed + 1)
    contexts = [(t.context_x, t.context_y) for t in episode.tasks]
    xs = [t.target_x for t in episode.tasks]
    ys = [t.target_y for t in episode.tasks]
    ref = _pinned_prediction(model, contexts, xs, episode.mode, seed).joint_log_density(ys)
    errs = []
    for _ in range(trials):
        perms = [perm_rng.permutation(len(y)) for y in ys]
        px = xs if break_alignment else [x[p] for x, p in zip(xs, perms)]
        py = [y[p] for y, p in zip(ys, perms)]
        got = _pinned_prediction(model, contexts, px, episode.mode, seed).joint_log_density(py)
        errs.append(_rel_err(ref, got))
    return _report("exchangeability", episode_id, trials, errs, tol)


def marginalization_check(model, episode, seed: int = 0, trials: int = 20, episode_id: int = 0,
                          subset_rng=None, keep_one: bool = False, tol: float = MARGINALIZATION_TOL) -> dict:
    """Per-point predictive densities of retained targets after deleting other targets.

    Each trial deletes a random subset of every task's targets (or all but
    one point per task with ``keep_one``) and compares the densities of the
    points that remain, with latents pinned by ``seed``.
    """
    model = as_float64(model)
    subset_rng = subset_rng if subset_rng is not None else np.random.default_rng(seed + 1)
    contexts = [(t.context_x, t.context_y) for t in episode.tasks]
    xs = [t.target_x for t in episode.tasks]
    ys = [t.target_y for t in episode.tasks]
    ref = _pinned_prediction(model, contexts, xs, episode.mode, seed).log_density(ys)
    errs = []
    for _ in range(trials):
        keeps = []
        for y in ys:
            n = len(y)
            if keep_one:
                k = 1
            else:
                k = int(subset_rng.integers(1, n + 1))
            keeps.append(np.sort(subset_rng.choice(n, size=k, replace=False)))
        got = _pinned_prediction(model, contexts, [x[k] for x, k in zip(xs, keeps)], episode.mode, seed)
        dens = got.log_density([y[k] for y, k in zip(ys, keeps)])
        errs.append(max(_rel_err(r[k], g) for r, k, g in zip(ref, keeps, dens)))
    return _report("marginalization", episode_id, trials, errs, tol)


# -- gradient verification ------------------------------------------------------

GRADCHECK_TOL = 1e-4
GRADCHECK_COMPONENTS = ("encoder", "z_inference", "w_inference", "decoder", "elbo", "cnp", "np")


def _toy_setup(mode: str, seed: int):
    from .episodes import GpConfig, sample_gp_episode
    from .models import ModelConfig, build_model, batch_from_episode

    rng = np.random.default_rng(seed)
    if mode == "regression":
        gp = GpConfig(intervals=((-2.0, 0.0), (0.0, 2.0)), n_context_per_task=3, n_target_per_task=2)
        ep = sample_gp_episode(gp, rng)
        cfg = ModelConfig(mode="regression", n_tasks=2, d=8, d_z=4, d_w=8, heads=2, n_z=2, n_w=2, dtype="float64")
    else:
        from .episodes import EpisodeSpec, SyntheticDomainsConfig, make_synthetic_domains, \
            sample_synthetic_classification_episode
        spec = EpisodeSpec(n_tasks=2, n_way=3, shots=1, n_target=3)
        gen = make_synthetic_domains(SyntheticDomainsConfig(n_domains=2, feature_dim=4, n_train_categories=6,
                                                            n_test_categories=3), seed)
        ep = sample_synthetic_classification_episode(spec, gen, rng)
        cfg = ModelConfig(mode="classification", x_dim=4, n_tasks=2, n_way=3, d=8, d_z=4, d_w=6, heads=2,
                          n_z=2, n_w=2, dtype="float64")
    return cfg, ep, build_model, batch_from_episode


def _projection(shape, rng):
    from .diffcore import Tensor

    return Tensor(rng.standard_normal(shape))


def gradcheck_problem(component: str, mode: str = "classification", seed: int = 0):
    """(scalar loss closure, {name: parameter}) exercising one component in float64."""
    from dataclasses import replace

    from .diffcore import Tensor
    from .models import ModelConfig

    if component not in GRADCHECK_COMPONENTS:
        raise ValueError(f"unknown component {component!r}; choose from {GRADCHECK_COMPONENTS}")
    cfg, ep, build_model, batch_from_episode = _toy_setup(mode, seed)
    rng = np.random.default_rng(seed + 7)
    if component in ("cnp", "np"):
        cfg = replace(cfg, model=component)
    model = build_model(cfg, seed)
    batch = batch_from_episode(ep, np.float64)
    named = dict(model.named_parameters())

    def sub(prefixes):
        return {k: v for k, v in named.items() if k.split(".")[0] in prefixes}

    if component == "encoder":
        r1 = _projection(model.encoder.context(batch.cx, batch.cy).shape, rng)
        r2 = _projection(model.encoder.target(batch.tx).shape, rng)
        fn = lambda: (model.encoder.context(batch.cx, batch.cy) * r1).sum() + (model.encoder.target(batch.tx) * r2).sum()
        return fn, sub({"encoder"})
    if component == "z_inference":
        emb = Tensor(rng.standard_normal((cfg.n_tasks, 3, cfg.d)), requires_grad=True)
        mask = np.array([[True, True, True], [True, True, False]])
        r1, r2 = _projection((cfg.n_tasks, cfg.d_z), rng), _projection((cfg.n_tasks, cfg.d_z), rng)

        def fn():
            q = model.infer_z(emb, model.task_tokens, mask)
            return (q.mu * r1).sum() + (q.sigma * r2).sum()
        return fn, {**sub({"task_tokens", "z_block", "z_mean", "z_scale"}), "input.emb": emb}
    if component == "w_inference":
        o = cfg.n_slots
        agg = Tensor(rng.standard_normal((o, cfg.n_tasks, cfg.d)), requires_grad=True)
        z = Tensor(rng.standard_normal((cfg.n_tasks, 2, 1, cfg.d_z)), requires_grad=True)
        shape = (cfg.n_tasks, 2, o, cfg.d_w)
        r1, r2 = _projection(shape, rng), _projection(shape, rng)

        def fn():
            q = model.infer_w(agg, model.slot_tokens, z)
            return (q.mu * r1).sum() + (q.sigma * r2).sum()
        params = sub({"slot_tokens", "w_block", "w_cond_in", "w_mean", "w_scale"})
        return fn, {**params, "input.agg": agg, "input.z": z}
    if component == "decoder":
        w = Tensor(rng.standard_normal((cfg.n_tasks, 2, 2, cfg.n_slots, cfg.d_w)), requires_grad=True)
        batch_z = None

        def fn():
            temb = model.target_embedding(batch.tx)
            from .models.common import head_log_lik
            return head_log_lik(model._decode(temb, batch_z, w), batch, cfg.mode).sum()
        return fn, {**sub({"target_proj"}), "input.w": w}
    seed_loss = seed + 11

    def fn():
        return model.loss(batch, np.random.default_rng(seed_loss))[0]
    return fn, named


def finite_diff_gradcheck(component: str, tolerance: float = GRADCHECK_TOL, mode: str = "classification",
                          seed: int = 0, step: float = 1e-5) -> dict:
    """Central-difference check of every parameter (and probed input) of one component."""
    from .diffcore import check_gradients

    fn, params = gradcheck_problem(component, mode, seed)
    errs = check_gradients(fn, params, step=step)
    worst = max(errs.values(), default=0.0)
    return {"check": "gradcheck", "component": component, "mode": mode, "per_parameter": errs,
            "max_rel_err": worst, "pass": bool(worst < tolerance)}
