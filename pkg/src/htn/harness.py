"""Training, evaluation, model selection and the generative baseline."""

from __future__ import annotations

import concurrent.futures
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from .htmm import HtmmParameters, fit_em, upward_log_likelihood
from .metrics import Metrics, compute_metrics
from .network import HtnModel, forward, forward_backward, loss, one_hot
from .optim import OptimizerState, sgd_update
from .trees import Dataset, LabeledTree, SkeletonSpec, SyntheticSpec, generate_synthetic, stratified_folds

logger = logging.getLogger(__name__)

# independent streams drawn from the master seed
_STREAM_SHUFFLE = 0
_STREAM_INIT = 1
_STREAM_FOLDS = 2


@dataclass(frozen=True)
class TrainConfig:
    C: int = 2
    M: int = 4
    K: int | None = None
    L: int | None = None
    V: int | None = None
    epochs: int = 100
    lr0: float = 0.01
    decay: float = 0.97
    alpha0: float = 0.5
    alphaT: float = 0.9
    seed: int = 0
    normalization_mode: str = "raw"
    pretrain_em_iters: int = 0
    minibatch: int = 1
    init_std: float = 0.1
    w_init_std: float = 0.1

    def __post_init__(self):
        for name in ("C", "M", "epochs", "minibatch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.M < 2:
            raise ValueError("M must be >= 2")
        if self.pretrain_em_iters < 0:
            raise ValueError("pretrain_em_iters must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def as_dict(self) -> dict:
        return asdict(self)

    def resolve(self, data: Dataset) -> "TrainConfig":
        """Fill K, L, V from ``data`` and check explicit values against it."""
        K, L, V = data.K, data.L, data.alphabet_size
        if self.K is not None and self.K < K:
            raise ValueError(f"config K={self.K} smaller than data K={K}")
        if self.L is not None and self.L < L:
            raise ValueError(f"config L={self.L} smaller than data L={L}")
        if self.V is not None and self.V != V:
            raise ValueError(f"config V={self.V} differs from data alphabet {V}")
        return replace(self, K=self.K or K, L=self.L or L, V=V)


def _stream(seed: int, which: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, which])


def init_model(config: TrainConfig) -> HtnModel:
    return HtnModel.init(
        config.C, config.L, config.V, config.M, config.K,
        seed=_stream(config.seed, _STREAM_INIT),
        normalization_mode=config.normalization_mode,
        std=config.init_std, w_std=config.w_init_std,
    )


def train(
    config: TrainConfig,
    train_set: Dataset,
    val_set: Dataset | None = None,
    callback: Callable[[dict], None] | None = None,
    model: HtnModel | None = None,
) -> tuple[HtnModel, list[dict]]:
    """SGD training; returns the model and one record per epoch."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    config = config.resolve(train_set)
    if model is None:
        model = init_model(config)
    if (model.C, model.L, model.V, model.M, model.K) != (config.C, config.L, config.V, config.M, config.K):
        raise ValueError("model dimensions do not match config")

    trees = train_set.trees
    targets = [one_hot(t.label_class, config.K) for t in trees]

    if config.pretrain_em_iters:
        mods = []
        for m in model.modules:
            fitted, _ = fit_em(m, trees, config.pretrain_em_iters)
            mods.append(fitted)
        model = replace(model, modules=tuple(mods))

    state = OptimizerState.for_model(
        model, lr0=config.lr0, decay=config.decay, alpha0=config.alpha0, alphaT=config.alphaT, T=config.epochs
    )
    shuffle_rng = np.random.default_rng(_stream(config.seed, _STREAM_SHUFFLE))
    history: list[dict] = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(trees))
        total = 0.0
        for start in range(0, len(order), config.minibatch):
            batch = order[start : start + config.minibatch]
            g_sum = None
            for n in batch:
                trace, grads = forward_backward(model, trees[n], targets[n])
                total += loss(trace, targets[n])
                g = grads.flat()
                g_sum = g if g_sum is None else g_sum + g
            model, state = sgd_update(model, g_sum, state)
        record = {
            "epoch": epoch,
            "loss": total / len(trees),
            "lr": state.lr,
            "momentum": state.momentum,
        }
        if val_set is not None:
            record["val"] = evaluate(model, val_set).as_dict()
        history.append(record)
        logger.debug("epoch %d loss %.6f", epoch, record["loss"])
        if callback is not None:
            callback(record)
        state = state.next_epoch()
    return model, history


def predict_all(model: HtnModel, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Argmax classes and probability rows for every tree."""
    nets = np.array([forward(model, t).net for t in data.trees])
    z = np.exp(nets - nets.max(axis=1, keepdims=True))
    return nets.argmax(axis=1), z / z.sum(axis=1, keepdims=True)


def evaluate(model: HtnModel, data: Dataset) -> Metrics:
    y_pred, probs = predict_all(model, data)
    pos = probs[:, 1] if model.K == 2 else None
    return compute_metrics(data.classes, y_pred, pos, K=max(model.K, data.K))


# -- model selection ---------------------------------------------------------


def _score(metrics: Metrics, criterion: str) -> float:
    if criterion == "accuracy":
        return metrics.accuracy
    if criterion == "f1":
        if metrics.f1 is None:
            raise ValueError("f1 criterion needs a binary task")
        return metrics.f1
    if criterion == "auc":
        if metrics.auc is None:
            raise ValueError("auc criterion needs a binary task with both classes present")
        return metrics.auc
    raise ValueError(f"unknown criterion {criterion!r}")


def _fit_and_score(job):
    config, tr, va, criterion = job
    model, _ = train(config, tr)
    return _score(evaluate(model, va), criterion)


def grid_search(
    C_grid: Sequence[int],
    M_grid: Sequence[int],
    data: Dataset,
    base: TrainConfig | None = None,
    scheme: str = "kfold",
    folds: int = 3,
    val_set: Dataset | None = None,
    seed: int = 0,
    criterion: str = "auto",
    n_jobs: int = 1,
) -> tuple[TrainConfig, list[dict]]:
    """Train one model per (C, M, fold) and pick the best mean score.

    ``criterion="auto"`` scores binary tasks by F1 and the rest by
    accuracy. Ties prefer smaller C, then smaller M.
    """
    if not C_grid or not M_grid:
        raise ValueError("empty grid")
    base = base or TrainConfig()
    if criterion == "auto":
        criterion = "f1" if data.K == 2 else "accuracy"
    if scheme == "kfold":
        splits = [
            (data.subset(tr), data.subset(te))
            for tr, te in stratified_folds(data, folds, int(_stream(seed, _STREAM_FOLDS).generate_state(1)[0]))
        ]
    elif scheme == "split":
        if val_set is None:
            raise ValueError("fixed-split scheme needs a validation set")
        splits = [(data, val_set)]
    else:
        raise ValueError(f"unknown scheme {scheme!r}")

    jobs, keys = [], []
    for C in C_grid:
        for M in M_grid:
            for f, (tr, va) in enumerate(splits):
                cfg = replace(base, C=C, M=M, seed=seed + f, K=None, L=None, V=None)
                cfg = replace(cfg, K=data.K, L=max(data.L, base.L or 0))
                jobs.append((cfg, tr, va, criterion))
                keys.append((C, M, f))
    if n_jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(n_jobs) as ex:
            scores = list(ex.map(_fit_and_score, jobs))
    else:
        scores = [_fit_and_score(j) for j in jobs]

    cells = [{"C": C, "M": M, "fold": f, "score": s, "criterion": criterion} for (C, M, f), s in zip(keys, scores)]
    means: dict[tuple[int, int], list[float]] = {}
    for c in cells:
        means.setdefault((c["C"], c["M"]), []).append(c["score"])
    best = min(means, key=lambda cm: (-np.mean(means[cm]), cm[0], cm[1]))
    return replace(base, C=best[0], M=best[1]), cells


# -- generative baseline -----------------------------------------------------


@dataclass
class GenerativeClassifier:
    """One HTMM per class; predicts the class with the largest
    log-likelihood plus log prior."""

    models: list[HtmmParameters]
    log_prior: np.ndarray
    history: list[list[float]] = field(default_factory=list)

    def scores(self, tree: LabeledTree) -> np.ndarray:
        return np.array([upward_log_likelihood(m, tree) for m in self.models]) + self.log_prior

    def predict_proba(self, tree: LabeledTree) -> np.ndarray:
        s = self.scores(tree)
        z = np.exp(s - s.max())
        return z / z.sum()

    def evaluate(self, data: Dataset) -> Metrics:
        probs = np.array([self.predict_proba(t) for t in data.trees])
        K = len(self.models)
        return compute_metrics(data.classes, probs.argmax(axis=1), probs[:, 1] if K == 2 else None, K=K)


def fit_generative(data: Dataset, C: int, em_iters: int, seed: int, L: int | None = None) -> GenerativeClassifier:
    y = data.classes
    counts = np.bincount(y, minlength=data.K)
    if (counts == 0).any():
        raise ValueError(f"classes {np.flatnonzero(counts == 0).tolist()} have no training trees")
    L = max(L or 0, data.L)
    streams = _stream(seed, _STREAM_INIT).spawn(data.K)
    models, hist = [], []
    for k in range(data.K):
        init = HtmmParameters.random(C, L, data.alphabet_size, np.random.default_rng(streams[k]))
        fitted, h = fit_em(init, [t for t in data.trees if t.label_class == k], em_iters)
        models.append(fitted)
        hist.append(h)
    return GenerativeClassifier(models, np.log(counts / counts.sum()), hist)


def generative_baseline(
    data: Dataset, C: int, em_iters: int, seed: int, test_set: Dataset | None = None
) -> Metrics:
    """Fit per-class HTMMs on ``data``; score ``test_set`` (or ``data``)."""
    clf = fit_generative(data, C, em_iters, seed)
    return clf.evaluate(test_set if test_set is not None else data)


# -- gradient checking -------------------------------------------------------

FD_REL_TOL = 1e-4
FD_ABS_TOL = 1e-7
FD_SMALL = 1e-3


@dataclass
class GradCheckReport:
    groups: dict[str, dict]
    rel_tol: float = FD_REL_TOL
    abs_tol: float = FD_ABS_TOL

    @property
    def passed(self) -> bool:
        return all(g["ok"] for g in self.groups.values())

    def as_dict(self) -> dict:
        return {"passed": self.passed, "rel_tol": self.rel_tol, "abs_tol": self.abs_tol, "groups": self.groups}


def _group_slices(model: HtnModel) -> list[tuple[str, slice]]:
    out = [("W_o", slice(0, model.W_o.size))]
    k = model.W_o.size
    for m_idx, m in enumerate(model.modules):
        for name, g in zip(("lambda_A", "lambda_pi", "lambda_b", "lambda_phi"), m.groups()):
            out.append((f"module{m_idx}.{name}", slice(k, k + g.size)))
            k += g.size
    return out


def finite_difference_report(
    model: HtnModel,
    sample: tuple[LabeledTree, int],
    step: float = 1e-5,
    grad_fn: Callable[[HtnModel, LabeledTree, int], np.ndarray] | None = None,
    rel_tol: float = FD_REL_TOL,
    abs_tol: float = FD_ABS_TOL,
) -> GradCheckReport:
    """Compare the analytic loss gradient with central differences, per
    parameter group. Entries whose magnitude is below 1e-3 on both sides are
    judged by absolute error instead of relative error."""
    tree, cls = sample
    if grad_fn is None:
        analytic = forward_backward(model, tree, cls)[1].flat()
    else:
        analytic = np.asarray(grad_fn(model, tree, cls))
    theta = model.flat()
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        e = theta.copy()
        e[i] += step
        up = loss(forward(model.unflat(e), tree), cls)
        e[i] -= 2 * step
        down = loss(forward(model.unflat(e), tree), cls)
        numeric[i] = (up - down) / (2 * step)
    groups = {}
    for name, sl in _group_slices(model):
        a, n = analytic[sl], numeric[sl]
        mag = np.maximum(np.abs(a), np.abs(n))
        err = np.abs(a - n)
        small = mag < FD_SMALL
        rel = float((err[~small] / mag[~small]).max()) if (~small).any() else 0.0
        ab = float(err[small].max()) if small.any() else 0.0
        groups[name] = {"max_rel_error": rel, "max_abs_error_small": ab, "ok": rel <= rel_tol and ab <= abs_tol}
    return GradCheckReport(groups, rel_tol, abs_tol)


# -- synthetic task ------------------------------------------------------------


def separated_generators(V: int = 4, L: int = 2) -> list[HtmmParameters]:
    """Two C=2 generators with distinct emission profiles and dynamics.

    Class 0 favours labels {0, 1} and sticky transitions; class 1 favours
    {2, 3} and alternating transitions.
    """
    if V != 4:
        raise ValueError("the reference task uses V=4")
    A0 = np.zeros((2, 2, L))
    A1 = np.zeros((2, 2, L))
    for l in range(L):
        A0[:, :, l] = [[0.8, 0.2], [0.2, 0.8]]
        A1[:, :, l] = [[0.3, 0.7], [0.7, 0.3]]
    phi = np.full(L, 1.0 / L)
    b0 = np.array([[0.7, 0.15, 0.075, 0.075], [0.15, 0.7, 0.075, 0.075]])
    b1 = np.array([[0.075, 0.075, 0.7, 0.15], [0.075, 0.075, 0.15, 0.7]])
    return [
        HtmmParameters.from_probs(A0, np.array([0.6, 0.4]), b0, phi),
        HtmmParameters.from_probs(A1, np.array([0.4, 0.6]), b1, phi),
    ]


def synthetic_task(
    seed: int = 0, n_train: int = 200, n_test: int = 100, min_nodes: int = 5, max_nodes: int = 15, L: int = 2
) -> tuple[Dataset, Dataset, list[HtmmParameters]]:
    """Balanced two-class train/test split sampled from :func:`separated_generators`."""
    gens = separated_generators(4, L)
    skel = SkeletonSpec(min_nodes, max_nodes, L)
    tr = generate_synthetic(SyntheticSpec(gens, skel, n_train // 2), seed)
    te = generate_synthetic(SyntheticSpec(gens, skel, n_test // 2), seed + 1_000_003)
    return tr, te, gens


def bayes_accuracy(generators: Sequence[HtmmParameters], data: Dataset) -> float:
    """Accuracy of the true-generator likelihood classifier (equal priors)."""
    pred = [int(np.argmax([upward_log_likelihood(g, t) for g in generators])) for t in data.trees]
    return float(np.mean(np.array(pred) == data.classes))

