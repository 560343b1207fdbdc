"""Test-time adaptation: losses, the two-learning-rate optimizer and the epoch loop.

Losses take probability matrices (B x C) and return their value with the
analytic gradient with respect to those matrices; models turn the
probability gradients into parameter gradients.

The generalized-entropy term uses the Tsallis form of order alpha. It is
a stand-in: the benchmark's own "modified generalized entropy" is defined
elsewhere and is not reproduced here.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from .audio import DEFAULT_MAX_SHIFT, Waveform, temporal_shift
from .metrics import PredictionSet, compute_metric

log = logging.getLogger(__name__)

ENTROPY_EPS = 1e-12
GROUPS = ("feature_extractor", "classifier")


class AdaptationError(RuntimeError):
    pass


class NonFiniteGradient(AdaptationError):
    pass


# -- views -------------------------------------------------------------------

def make_views(batch, rng: np.random.Generator, max_frac: float = DEFAULT_MAX_SHIFT):
    """Left- and right-shifted copies of every clip, shift fractions in (0, max_frac]."""
    if not batch:
        raise ValueError("cannot build views of an empty batch")
    left, right = [], []
    for w in batch:
        f_l = max_frac * (1.0 - rng.random())
        f_r = max_frac * (1.0 - rng.random())
        left.append(temporal_shift(w, "left", f_l, max_frac))
        right.append(temporal_shift(w, "right", f_r, max_frac))
    return left, right


# -- losses ------------------------------------------------------------------

def entropy_min_loss(probs: np.ndarray):
    """Mean Shannon entropy of the rows, -(1/B) sum p log p (log clamped at eps)."""
    p = np.asarray(probs, dtype=np.float64)
    b = p.shape[0]
    logp = np.log(np.maximum(p, ENTROPY_EPS))
    loss = -float(np.sum(p * logp)) / b
    grad = -(logp + (p >= ENTROPY_EPS)) / b
    return loss, grad


def generalized_entropy_loss(probs: np.ndarray, alpha: float = 2.0):
    """Mean Tsallis entropy of order alpha: (1 - sum p^alpha) / (alpha - 1)."""
    if not alpha > 0 or alpha == 1:
        raise ValueError(f"alpha must be positive and != 1, got {alpha}")
    p = np.asarray(probs, dtype=np.float64)
    b = p.shape[0]
    pa = np.power(np.maximum(p, 0.0), alpha)
    loss = float(np.sum(1.0 - pa.sum(axis=1))) / ((alpha - 1.0) * b)
    grad = -alpha * np.power(np.maximum(p, ENTROPY_EPS), alpha - 1.0) / ((alpha - 1.0) * b)
    return loss, grad


def nuclear_norm_loss(probs: np.ndarray):
    """Negative nuclear norm of the batch prediction matrix.

    Gradient is -U V^T from the thin SVD. At repeated or zero singular
    values this picks one element of the subdifferential (the one LAPACK's
    singular vectors give); it is exact wherever the spectrum is simple and
    non-zero.
    """
    p = np.asarray(probs, dtype=np.float64)
    try:
        u, s, vt = np.linalg.svd(p, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise AdaptationError(f"SVD did not converge: {exc}") from exc
    return -float(s.sum()), -(u @ vt)


def consistency_loss(probs_l: np.ndarray, probs_r: np.ndarray, mode: str = "literal"):
    """Divergence between the two views' predictions.

    ``literal``: (1/B) sum_i sum_j |p_l[i,j] - p_r[i,j]| (per-entry norms).
    ``per_sample_l2``: (1/B) sum_i ||p_l[i] - p_r[i]||_2.
    Returns (loss, grad_l, grad_r) with grad_r = -grad_l.
    """
    pl = np.asarray(probs_l, dtype=np.float64)
    pr = np.asarray(probs_r, dtype=np.float64)
    if pl.shape != pr.shape:
        raise ValueError(f"view shapes differ: {pl.shape} vs {pr.shape}")
    b = pl.shape[0]
    d = pl - pr
    if mode == "literal":
        loss = float(np.abs(d).sum()) / b
        g = np.sign(d) / b
    elif mode == "per_sample_l2":
        norms = np.linalg.norm(d, axis=1)
        loss = float(norms.sum()) / b
        safe = np.where(norms > 0, norms, 1.0)
        g = np.where(norms[:, None] > 0, d / safe[:, None], 0.0) / b
    else:
        raise ValueError(f"unknown consistency mode {mode!r}")
    return loss, g, -g


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    w_nnm: float = 1.0
    w_em: float = 1.0
    w_ge: float = 1.0
    alpha: float = 2.0
    consistency_norm: str = "literal"

    def __post_init__(self):
        if self.lam < 0 or min(self.w_nnm, self.w_em, self.w_ge) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.w_nnm == self.w_em == self.w_ge == 0 and self.lam == 0:
            raise ValueError("at least one loss weight must be non-zero")
        if not self.alpha > 0 or self.alpha == 1:
            raise ValueError(f"alpha must be positive and != 1, got {self.alpha}")
        if self.consistency_norm not in ("literal", "per_sample_l2"):
            raise ValueError(f"unknown consistency norm {self.consistency_norm!r}")


@dataclass
class LossOutput:
    value: float
    grad_l: np.ndarray
    grad_r: np.ndarray
    terms: dict


def _ensemble(p: np.ndarray, cfg: LossConfig):
    value, grad, terms = 0.0, np.zeros_like(p), {}
    for name, w, fn in (("nnm", cfg.w_nnm, nuclear_norm_loss),
                        ("em", cfg.w_em, entropy_min_loss),
                        ("ge", cfg.w_ge, lambda q: generalized_entropy_loss(q, cfg.alpha))):
        if w == 0:
            continue
        v, g = fn(p)
        terms[name] = v
        value += w * v
        grad += w * g
    return value, grad, terms


def combined_loss(probs_l: np.ndarray, probs_r: np.ndarray, cfg: LossConfig = LossConfig()) -> LossOutput:
    """Entropy ensemble averaged over both views plus lambda times consistency."""
    ens_l, g_l, t_l = _ensemble(probs_l, cfg)
    ens_r, g_r, t_r = _ensemble(probs_r, cfg)
    value = 0.5 * (ens_l + ens_r)
    grad_l, grad_r = 0.5 * g_l, 0.5 * g_r
    terms = {k: 0.5 * (t_l[k] + t_r[k]) for k in t_l}
    if cfg.lam != 0:
        con, c_l, c_r = consistency_loss(probs_l, probs_r, cfg.consistency_norm)
        terms["con"] = con
        value += cfg.lam * con
        grad_l = grad_l + cfg.lam * c_l
        grad_r = grad_r + cfg.lam * c_r
    return LossOutput(value, grad_l, grad_r, terms)


# -- optimizer ---------------------------------------------------------------

@dataclass
class OptimizerState:
    """SGD with momentum, with the feature extractor at ``lr_ratio`` times the classifier rate."""

    lr_c: float = 1e-3
    lr_ratio: float = 0.5
    momentum: float = 0.7
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr_c > 0:
            raise ValueError(f"lr_c must be positive, got {self.lr_c}")
        if not 0 < self.lr_ratio <= 1:
            raise ValueError(f"lr_ratio must be in (0, 1], got {self.lr_ratio}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")

    @property
    def lr_fe(self) -> float:
        return self.lr_ratio * self.lr_c

    def lr_for(self, group: str) -> float:
        if group == "feature_extractor":
            return self.lr_fe
        if group == "classifier":
            return self.lr_c
        raise KeyError(f"unknown parameter group {group!r}")


def blr_step(params: dict, grads: dict, st: OptimizerState) -> None:
    """v <- momentum * v + g; p <- p - lr_group * v, in place for every group."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in group {name!r}; step aborted")
    for name, g in grads.items():
        p = params[name]
        v = st.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ValueError(f"velocity for {name!r} has shape {v.shape}, params {p.shape}")
        v = st.momentum * v + g
        st.velocity[name] = v
        p -= st.lr_for(name) * v


# -- model contract ----------------------------------------------------------

class ForwardPass(Protocol):
    probs: np.ndarray
    embeddings: np.ndarray

    def backward(self, grad_probs: np.ndarray) -> dict: ...


class AdaptableModel(Protocol):
    """What the adaptation loop needs from a model.

    ``param_groups`` maps "feature_extractor" and "classifier" to flat
    float64 arrays that the optimizer updates in place. ``featurize`` is
    fixed preprocessing (not differentiated). ``forward`` in mode "adapt"
    uses batch statistics, in mode "eval" it must not mutate any state.
    """

    param_groups: dict

    def featurize(self, batch) -> np.ndarray: ...

    def forward(self, inputs: np.ndarray, mode: str = "eval") -> ForwardPass: ...


# -- loop --------------------------------------------------------------------

@dataclass
class AdaptConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    lr_c: float = 1e-3
    lr_ratio: float = 0.5
    momentum: float = 0.7
    batch_size: int = 32
    epochs: int = 10
    shuffle_seed: int = 123456
    max_shift: float = DEFAULT_MAX_SHIFT
    allow_small_batch: bool = False
    eval_batch_size: int = 256

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class CurvePoint:
    epoch: int
    metric: str
    value: float


@dataclass
class AdaptationCurve:
    points: list = field(default_factory=list)

    @property
    def values(self) -> list:
        return [p.value for p in self.points]

    def drawdown(self) -> float:
        """Peak minus final metric value."""
        return max(self.values) - self.values[-1]

    def to_text(self) -> str:
        metric = self.points[0].metric if self.points else "metric"
        rows = [f"epoch\t{metric}"] + [f"{p.epoch}\t{p.value:.6f}" for p in self.points]
        return "\n".join(rows) + "\n"


def predict(model: AdaptableModel, inputs: np.ndarray, batch_size: int = 256):
    """Eval-mode probabilities and embeddings for a featurized set."""
    probs, embs = [], []
    for s in range(0, len(inputs), batch_size):
        fp = model.forward(inputs[s:s + batch_size], mode="eval")
        probs.append(fp.probs)
        embs.append(fp.embeddings)
    return np.vstack(probs), np.vstack(embs)


def evaluate(model: AdaptableModel, inputs: np.ndarray, labels, metric: str,
             batch_size: int = 256) -> float:
    probs, _ = predict(model, inputs, batch_size)
    return compute_metric(metric, PredictionSet(probs, labels))


def adapt_waveforms(model: AdaptableModel, adapt_set: list, eval_set: list, eval_labels,
                    cfg: AdaptConfig = AdaptConfig(), metric: str = "accuracy_top1",
                    opt: OptimizerState | None = None) -> AdaptationCurve:
    """Unsupervised adaptation on ``adapt_set`` with per-epoch evaluation on ``eval_set``.

    Each epoch shuffles the adaptation clips, drops the final partial batch,
    and for each batch builds shifted views, runs both through the model in
    adapt mode and takes one optimizer step on the combined loss.
    """
    if cfg.batch_size < 32:
        if not cfg.allow_small_batch:
            raise ValueError(f"batch_size {cfg.batch_size} < 32; set allow_small_batch to proceed")
        warnings.warn(f"adapting with batch_size {cfg.batch_size} < 32", stacklevel=2)
    if len(adapt_set) < cfg.batch_size:
        raise ValueError(f"adaptation set ({len(adapt_set)}) smaller than one batch ({cfg.batch_size})")
    opt = opt or OptimizerState(cfg.lr_c, cfg.lr_ratio, cfg.momentum)
    eval_x = model.featurize(eval_set)
    eval_labels = np.asarray(eval_labels, dtype=int)
    rng = np.random.default_rng(cfg.shuffle_seed)

    curve = AdaptationCurve([CurvePoint(0, metric, evaluate(model, eval_x, eval_labels, metric,
                                                             cfg.eval_batch_size))])
    n_batches = len(adapt_set) // cfg.batch_size
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(adapt_set))
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            views_l, views_r = make_views([adapt_set[i] for i in idx], rng, cfg.max_shift)
            fp_l = model.forward(model.featurize(views_l), mode="adapt")
            fp_r = model.forward(model.featurize(views_r), mode="adapt")
            out = combined_loss(fp_l.probs, fp_r.probs, cfg.loss)
            if not math.isfinite(out.value):
                raise AdaptationError(f"non-finite loss at epoch {epoch}, batch {b}")
            g_l = fp_l.backward(out.grad_l)
            g_r = fp_r.backward(out.grad_r)
            grads = {k: g_l[k] + g_r[k] for k in g_l}
            try:
                blr_step(model.param_groups, grads, opt)
            except NonFiniteGradient as exc:
                raise NonFiniteGradient(f"epoch {epoch}, batch {b}: {exc}") from exc
        value = evaluate(model, eval_x, eval_labels, metric, cfg.eval_batch_size)
        curve.points.append(CurvePoint(epoch, metric, value))
        log.info("epoch %d %s=%.4f", epoch, metric, value)
    return curve


def adapt(model: AdaptableModel, benchmark, eval_set, cfg: AdaptConfig = AdaptConfig(),
          metric: str = "accuracy_top1", opt: OptimizerState | None = None) -> AdaptationCurve:
    """Adapt on one benchmark build and evaluate on another built with a different seed."""
    if benchmark.global_seed == eval_set.global_seed:
        raise ValueError("adaptation and evaluation sets must be built from different seeds")
    return adapt_waveforms(model, benchmark.load_audio(), eval_set.load_audio(), eval_set.labels,
                           cfg, metric, opt)
