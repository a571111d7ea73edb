"""Evaluation probes on frozen clip features and predictor outputs.

Representations are extracted with every clip of a video fed jointly and no
masking. Per-clip classifiers (linear, MLP, fine-tuned predictor) predict each
clip independently; a video's prediction is the argmax of the mean softmax
over its clips.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .featurestore import FeatureStore, StoreError
from .model import ModelConfig, ModelParams, encode_set, init_params, param_shapes, predictor_names
from .numerics import Tensor
from .sampler import normalize_coords, round_half_away
from .trainer import adam_step

FEATURES = ("cls", "mean-raw", "mean-refined")
KINDS = ("knn", "linear", "mlp", "ft")


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    kind: str = "knn"
    feature: str = "cls"
    k: int = 20
    knn_weighting: str = "weighted"
    knn_tau: float = 0.07
    linear_mode: str = "scale"
    lrs: tuple[float, ...] = (1e-3, 3e-3, 1e-2)
    wds: tuple[float, ...] = (0.0, 1e-4)
    batch_sizes: tuple[int, ...] = (64, 256)
    optimizers: tuple[str, ...] = ("adam", "sgd")
    epochs: int = 20
    bn_no_affine: bool = False
    mlp_hidden: int = 256
    ft_init: str = "checkpoint"
    lowshot: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ProbeError(f"unknown probe kind {self.kind!r}")
        if self.feature not in FEATURES:
            raise ProbeError(f"unknown feature selector {self.feature!r}")
        if self.k < 1:
            raise ProbeError("k must be >= 1")
        if self.knn_weighting not in ("weighted", "majority"):
            raise ProbeError("knn_weighting must be 'weighted' or 'majority'")
        if self.linear_mode not in ("scale", "baseline"):
            raise ProbeError("linear_mode must be 'scale' or 'baseline'")
        if not (self.lrs and self.wds and self.batch_sizes and self.optimizers):
            raise ProbeError("probe hyperparameter grid is empty")
        if any(o not in ("adam", "sgd") for o in self.optimizers):
            raise ProbeError("optimizers must be 'adam' or 'sgd'")
        if self.mlp_hidden < 1:
            raise ProbeError("mlp_hidden must be >= 1")
        if self.ft_init not in ("checkpoint", "random"):
            raise ProbeError("ft_init must be 'checkpoint' or 'random'")
        if not 0 < self.lowshot <= 1:
            raise ProbeError("lowshot fraction must lie in (0, 1]")
        if self.epochs < 0:
            raise ProbeError("epochs must be >= 0")

    def grid(self) -> list[tuple[float, float, int, str]]:
        return list(itertools.product(sorted(self.lrs), sorted(self.wds), self.batch_sizes, self.optimizers))


@dataclass
class ReprSet:
    """Per-video raw clip features, refined clip tokens and summary token."""

    ids: list[str]
    labels: np.ndarray | None
    raw: np.ndarray  # (V, n, D)
    refined: np.ndarray | None  # (V, n, d_h)
    cls: np.ndarray | None  # (V, d_h)

    def select(self, feature: str) -> np.ndarray:
        if feature == "mean-raw":
            return self.raw.mean(axis=1)
        if self.cls is None:
            raise ProbeError(f"feature {feature!r} needs predictor outputs")
        if feature == "cls":
            return self.cls
        if feature == "mean-refined":
            return self.refined.mean(axis=1)
        raise ProbeError(f"unknown feature selector {feature!r}")

    def per_clip(self, mode: str) -> np.ndarray:
        """(V, n, dim) per-clip vectors: raw features or refined token concatenated with CLS."""
        if mode == "baseline":
            return self.raw
        if self.cls is None:
            raise ProbeError("scale mode needs predictor outputs")
        n = self.refined.shape[1]
        return np.concatenate([self.refined, np.repeat(self.cls[:, None], n, axis=1)], axis=-1)


@dataclass
class GridRow:
    lr: float
    wd: float
    batch: int
    optimizer: str
    train_acc: float
    eval_acc: float


@dataclass
class ProbeResult:
    kind: str
    feature: str
    accuracy: float
    rows: list[GridRow] = field(default_factory=list)
    best: int = 0
    curve: list[float] = field(default_factory=list)


def _require_labels(store_or_reprs, what: str) -> np.ndarray:
    labels = store_or_reprs.labels() if isinstance(store_or_reprs, FeatureStore) else store_or_reprs.labels
    if labels is None:
        raise ProbeError(f"{what} is unlabeled")
    return np.asarray(labels)


def _uniform_clip_count(store: FeatureStore) -> int:
    counts = {v.clip_count for v in store.videos}
    if len(counts) != 1:
        raise ProbeError(f"non-uniform clip counts {sorted(counts)}")
    return counts.pop()


def store_arrays(store: FeatureStore) -> tuple[np.ndarray, np.ndarray]:
    _uniform_clip_count(store)
    feats = np.stack([v.features for v in store.videos])
    coords = np.stack([normalize_coords(v.boxes, v.dims) for v in store.videos])
    return feats, coords


def extract_representations(store: FeatureStore, params: ModelParams | None, model_config: ModelConfig | None,
                            mask=None, chunk: int = 128) -> ReprSet:
    """Feed each video's full clip set once with an empty mask.

    With ``params=None`` only raw features are returned (single-clip baselines).
    """
    if mask is not None and np.any(mask):
        raise ProbeError("representations are extracted without masking")
    if not store.videos:
        raise ProbeError("empty store")
    feats, coords = store_arrays(store)
    labels = store.labels() if store.labeled else None
    ids = [v.id for v in store.videos]
    if params is None:
        return ReprSet(ids, labels, feats, None, None)
    dtype = params["input.weight"].data.dtype
    refined, cls = [], []
    empty = np.zeros(feats.shape[:2], dtype=bool)
    with nx.precision("float64" if dtype == np.float64 else "float32"):
        for i in range(0, len(feats), chunk):
            enc = encode_set(feats[i:i + chunk], coords[i:i + chunk], empty[i:i + chunk], params, model_config)
            refined.append(enc.clip_tokens.data)
            cls.append(enc.summary.data)
    return ReprSet(ids, labels, feats, np.concatenate(refined), np.concatenate(cls))


# ------------------------------------------------------------------ k-NN


def knn_predict(train_x: np.ndarray, train_y: np.ndarray, eval_x: np.ndarray, k: int = 20,
                weighting: str = "weighted", tau: float = 0.07, num_classes: int | None = None,
                train_ids=None, eval_ids=None) -> np.ndarray:
    """Cosine k-NN over L2-normalized vectors.

    Weighted votes use ``exp(sim / tau)``; ties go to the smaller class index.
    When ids are given, a neighbor sharing the query's id is skipped.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    eval_x = np.asarray(eval_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    exclude = train_ids is not None and eval_ids is not None
    if k > len(train_x) - (1 if exclude else 0):
        raise ProbeError(f"k={k} exceeds the number of usable train points")
    C = int(num_classes if num_classes is not None else train_y.max() + 1)
    a = train_x / np.linalg.norm(train_x, axis=1, keepdims=True)
    b = eval_x / np.linalg.norm(eval_x, axis=1, keepdims=True)
    sims = b @ a.T
    if exclude:
        tid = np.asarray(train_ids, dtype=object)
        for i, e in enumerate(eval_ids):
            sims[i, tid == e] = -np.inf
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(sims, order, axis=1)
    # exp(sim / tau) rescaled by the constant exp(-1 / tau) to stay finite
    weights = np.exp((top - 1.0) / tau) if weighting == "weighted" else np.ones_like(top)
    votes = np.zeros((len(b), C))
    rows = np.repeat(np.arange(len(b)), k)
    np.add.at(votes, (rows, train_y[order].reshape(-1)), weights.reshape(-1))
    return votes.argmax(axis=1)


def knn_probe(train: ReprSet, evals: ReprSet, feature: str = "cls", k: int = 20,
              weighting: str = "weighted", tau: float = 0.07) -> ProbeResult:
    ty = _require_labels(train, "train set")
    ey = _require_labels(evals, "eval set")
    same = train.ids == evals.ids
    pred = knn_predict(train.select(feature), ty, evals.select(feature), k, weighting, tau,
                       num_classes=int(max(ty.max(), ey.max())) + 1,
                       train_ids=train.ids if same else None, eval_ids=evals.ids if same else None)
    return ProbeResult("knn", feature, float(np.mean(pred == ey)))


# ------------------------------------------------------------------ trained heads


class _RunningStandardizer:
    """Per-feature standardization with running statistics and no affine terms."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps

    def train_batch(self, x: np.ndarray) -> np.ndarray:
        mu, var = x.mean(axis=0), x.var(axis=0)
        n = x.shape[0]
        self.mean = (1 - self.momentum) * self.mean + self.momentum * mu
        self.var = (1 - self.momentum) * self.var + self.momentum * var * n / max(n - 1, 1)
        return ((x - mu) / np.sqrt(var + self.eps)).astype(x.dtype)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / np.sqrt(self.var + self.eps)).astype(x.dtype)


def _init_layers(dims: list[int], rng: np.random.Generator) -> list[Tensor]:
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        layers.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True))
        layers.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return layers


def _apply_layers(x, layers: list[Tensor]) -> Tensor:
    h = x if isinstance(x, Tensor) else Tensor(x)
    for i in range(0, len(layers), 2):
        h = nx.linear(h, layers[i], layers[i + 1])
        if i + 2 < len(layers):
            h = nx.gelu(h)
    return h


class _Optimizer:
    def __init__(self, tensors: list[Tensor], kind: str, lr: float, wd: float):
        self.tensors = tensors
        self.kind = kind
        self.lr = lr
        self.wd = wd
        self.m = [np.zeros_like(t.data) for t in tensors]
        self.v = [np.zeros_like(t.data) for t in tensors]
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        for t, m, v in zip(self.tensors, self.m, self.v):
            wd = self.wd if t.data.ndim >= 2 else 0.0
            if self.kind == "adam":
                adam_step(t.data, t.grad, m, v, self.step_count, self.lr, weight_decay=wd)
            else:
                g = t.grad + wd * t.data
                m *= 0.9
                m += g
                t.data -= self.lr * m
            t.zero_grad()


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ensemble_predict(clip_logits: np.ndarray) -> np.ndarray:
    """Video predictions from (V, n, C) per-clip logits: argmax of mean softmax."""
    return _softmax_np(clip_logits).mean(axis=1).argmax(axis=1)


def _fit_clip_head(train_x: np.ndarray, train_y: np.ndarray, eval_x: np.ndarray, eval_y: np.ndarray,
                   num_classes: int, hidden: int | None, lr: float, wd: float, batch: int, optimizer: str,
                   epochs: int, seed: int, standardize: bool) -> tuple[float, float]:
    """Train a per-clip head on (V, n, dim) inputs; returns (train_acc, eval_acc) at video level."""
    V, n, dim = train_x.shape
    flat_x = train_x.reshape(V * n, dim).astype(np.float32)
    flat_y = np.repeat(train_y, n)
    rng = np.random.Generator(np.random.PCG64(seed))
    with nx.precision("float32"):
        dims = [dim, num_classes] if hidden is None else [dim, hidden, hidden, num_classes]
        layers = _init_layers(dims, rng)
        opt = _Optimizer(layers, optimizer, lr, wd)
        norm = _RunningStandardizer(dim) if standardize else None
        for _ in range(epochs):
            order = rng.permutation(len(flat_x))
            for s in range(0, len(order), batch):
                idx = order[s:s + batch]
                xb = flat_x[idx]
                if norm is not None:
                    xb = norm.train_batch(xb)
                logits = _apply_layers(xb, layers)
                loss = nx.mean(nx.cross_entropy(logits, flat_y[idx]))
                loss.backward()
                opt.step()

        def predict(x: np.ndarray) -> np.ndarray:
            v, m, d = x.shape
            flat = x.reshape(v * m, d).astype(np.float32)
            if norm is not None:
                flat = norm(flat)
            return ensemble_predict(_apply_layers(flat, layers).data.reshape(v, m, -1))

        return (float(np.mean(predict(train_x) == train_y)),
                float(np.mean(predict(eval_x) == eval_y)))


def _grid_search(cfg: ProbeConfig, fit) -> tuple[list[GridRow], int]:
    rows = []
    for lr, wd, batch, opt in cfg.grid():
        train_acc, eval_acc = fit(lr, wd, batch, opt)
        rows.append(GridRow(lr, wd, batch, opt, train_acc, eval_acc))
    # grid is ordered by lr then wd, so the first maximum breaks ties toward smaller values
    best = max(range(len(rows)), key=lambda i: (rows[i].eval_acc, -i))
    return rows, best


def _head_probe(kind: str, train: ReprSet, evals: ReprSet, mode: str, cfg: ProbeConfig,
                hidden: int | None) -> ProbeResult:
    ty = _require_labels(train, "train set")
    ey = _require_labels(evals, "eval set")
    num_classes = int(max(ty.max(), ey.max())) + 1
    tx, ex = train.per_clip(mode), evals.per_clip(mode)

    def fit(lr, wd, batch, opt):
        return _fit_clip_head(tx, ty, ex, ey, num_classes, hidden, lr, wd, batch, opt,
                              cfg.epochs, cfg.seed, cfg.bn_no_affine)

    rows, best = _grid_search(cfg, fit)
    return ProbeResult(kind, mode, rows[best].eval_acc, rows, best)


def linear_probe(train: ReprSet, evals: ReprSet, mode: str = "scale", config: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Per-clip softmax head on refined-token+CLS ("scale") or raw features ("baseline")."""
    config.validate()
    if mode not in ("scale", "baseline"):
        raise ProbeError(f"unknown linear probe mode {mode!r}")
    return _head_probe("linear", train, evals, mode, config, hidden=None)


def mlp_probe(train: ReprSet, evals: ReprSet, config: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Three-layer MLP per clip on raw features, ensembled over clips."""
    config.validate()
    return _head_probe("mlp", train, evals, "baseline", config, hidden=config.mlp_hidden)


# ------------------------------------------------------------------ fine-tuning


def ft_probe(train_store: FeatureStore, eval_store: FeatureStore, model_config: ModelConfig,
             params: ModelParams | None, config: ProbeConfig = ProbeConfig(),
             curve: bool = False) -> ProbeResult:
    """Fine-tune the predictor with a linear head on refined-token+CLS per clip.

    ``config.ft_init`` picks the starting point: the given pretrained
    ``params`` or a fresh random initialization of the same architecture.
    With ``curve=True`` the eval accuracy after every epoch of the best grid
    point is recorded.
    """
    config.validate()
    model_config.validate()
    if model_config.d_in != train_store.feature_dim or model_config.d_in != eval_store.feature_dim:
        raise ProbeError(f"model d_in={model_config.d_in} does not match store feature dims")
    if config.ft_init == "checkpoint":
        if params is None:
            raise ProbeError("ft_init=checkpoint needs pretrained parameters")
        expected = dict(param_shapes(model_config))
        for name in predictor_names(model_config):
            if name not in params or params[name].shape != expected[name]:
                raise ProbeError(f"checkpoint parameter {name!r} does not match the model configuration")
    ty = _require_labels(train_store, "train store")
    ey = _require_labels(eval_store, "eval store")
    num_classes = int(max(ty.max(), ey.max())) + 1
    tf, tc = _stack_clips(train_store)
    ef, ec = store_arrays(eval_store)
    curves: list[list[float]] = []

    def fit(lr, wd, batch, opt):
        train_acc, eval_acc, trace = _fit_ft(model_config, params, config, num_classes, tf, tc, ty, ef, ec, ey,
                                             lr, wd, batch, opt, curve)
        curves.append(trace)
        return train_acc, eval_acc

    rows, best = _grid_search(config, fit)
    return ProbeResult("ft", config.ft_init, rows[best].eval_acc, rows, best, curves[best])


def _stack_clips(store: FeatureStore) -> tuple[np.ndarray, np.ndarray]:
    n = min(v.clip_count for v in store.videos)
    feats = np.stack([v.features[:n] for v in store.videos])
    coords = np.stack([normalize_coords(v.boxes[:n], v.dims) for v in store.videos])
    return feats, coords


def _fit_ft(model_config, pretrained, cfg, num_classes, tf, tc, ty, ef, ec, ey, lr, wd, batch, opt, want_curve):
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    with nx.precision("float32"):
        if cfg.ft_init == "checkpoint":
            source = pretrained.astype(np.float32)
        else:
            source = init_params(model_config, cfg.seed, dtype=np.float32)
        params = ModelParams((k, source[k]) for k in predictor_names(model_config))
        head = _init_layers([2 * model_config.d_h, num_classes], rng)
        optim = _Optimizer(list(params.values()) + head, opt, lr, wd)

        def logits_for(feats, coords):
            enc = encode_set(feats, coords, np.zeros(feats.shape[:2], dtype=bool), params, model_config)
            n = feats.shape[1]
            cls = nx.broadcast_to(enc.summary.reshape(-1, 1, model_config.d_h), (feats.shape[0], n, model_config.d_h))
            x = nx.concat([enc.clip_tokens, cls], axis=-1)
            return _apply_layers(x, head)

        def accuracy(feats, coords, labels):
            preds = []
            for s in range(0, len(feats), 128):
                preds.append(ensemble_predict(logits_for(feats[s:s + 128], coords[s:s + 128]).data))
            return float(np.mean(np.concatenate(preds) == labels))

        trace = []
        batch_videos = max(1, min(batch, len(tf)))
        for _ in range(cfg.epochs):
            order = rng.permutation(len(tf))
            for s in range(0, len(order), batch_videos):
                idx = order[s:s + batch_videos]
                logits = logits_for(tf[idx], tc[idx])
                n = tf.shape[1]
                loss = nx.mean(nx.cross_entropy(logits.reshape(len(idx) * n, num_classes), np.repeat(ty[idx], n)))
                loss.backward()
                optim.step()
            if want_curve:
                trace.append(accuracy(ef, ec, ey))
        return accuracy(tf, tc, ty), accuracy(ef, ec, ey), trace


# ------------------------------------------------------------------ low-shot


def lowshot_subsample(store: FeatureStore, fraction: float, seed: int = 0) -> FeatureStore:
    """Class-balanced subsample: per class round(fraction * count) videos, at least one."""
    if not 0 < fraction <= 1:
        raise ProbeError("fraction must lie in (0, 1]")
    if not store.labeled:
        raise ProbeError("low-shot subsampling needs a labeled store")
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = store.labels()
    keep = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        n = max(1, round_half_away(fraction * len(members)))
        keep.extend(rng.choice(members, size=n, replace=False).tolist())
    return store.subset(sorted(keep))


# ------------------------------------------------------------------ reports

REPORT_HEADER = "kind,feature,lr,wd,batch,optimizer,train_acc,eval_acc,best"


def report_lines(result: ProbeResult) -> list[str]:
    if not result.rows:
        return [f"{result.kind},{result.feature},,,,,,{result.accuracy!r},1"]
    return [f"{result.kind},{result.feature},{r.lr!r},{r.wd!r},{r.batch},{r.optimizer},"
            f"{r.train_acc!r},{r.eval_acc!r},{int(i == result.best)}"
            for i, r in enumerate(result.rows)]


def write_probe_report(results: list[ProbeResult], path) -> None:
    lines = [REPORT_HEADER]
    for r in results:
        lines += report_lines(r)
    Path(path).write_text("\n".join(lines) + "\n")


__all__ = [
    "ProbeConfig", "ProbeError", "ProbeResult", "ReprSet", "StoreError", "ensemble_predict",
    "extract_representations", "ft_probe", "knn_predict", "knn_probe", "linear_probe",
    "lowshot_subsample", "mlp_probe", "write_probe_report",
]
