"""A desk-scale task and classifier for running corrupt -> adapt -> evaluate on a CPU.

The task is a set of harmonic tone classes. The model is a log-mel front
end (fixed), a 1-D convolution over frames with batch normalisation, ReLU,
global average pooling and a linear projection to the embedding (the
feature extractor), followed by a two-layer classifier with softmax.
Gradients are written out by hand; :func:`grad_check` compares them with
central differences.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import MelConfig, Waveform, load_wav, log_mel_batch, save_wav
from .benchmark import DatasetManifest, ManifestEntry, write_manifest
from .corruption import derive_seed
from .tta import LossConfig, OptimizerState, blr_step, combined_loss, predict

CHECKPOINT_MAGIC = b"DHTOYCK1"
CHECKPOINT_VERSION = 1


# -- synthetic task ------------------------------------------------------------

@dataclass
class ToyClass:
    name: str
    fundamental: float
    harmonics: tuple[float, ...]
    am_rate: float


DEFAULT_CLASSES = (
    ToyClass("low_hum", 150.0, (1.0, 0.6, 0.3), 2.0),
    ToyClass("buzz", 260.0, (1.0, 0.2, 0.7, 0.2, 0.4), 3.0),
    ToyClass("chirp", 420.0, (1.0, 0.5), 5.0),
    ToyClass("whistle", 700.0, (1.0, 0.15, 0.05), 7.0),
)


@dataclass
class ToyTaskConfig:
    classes: tuple = DEFAULT_CLASSES
    clip_seconds: float = 1.0
    sample_rate: int = 16000
    train_per_class: int = 100
    test_per_class: int = 60
    jitter: float = 0.01
    seed: int = 7

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def synth_clip(cls: ToyClass, cfg: ToyTaskConfig, rng: np.random.Generator) -> Waveform:
    n = int(round(cfg.clip_seconds * cfg.sample_rate))
    t = np.arange(n) / cfg.sample_rate
    f0 = cls.fundamental * (1.0 + rng.uniform(-cfg.jitter, cfg.jitter))
    x = np.zeros(n)
    for h, a in enumerate(cls.harmonics, 1):
        if h * f0 < cfg.sample_rate / 2:
            x += a * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
    env = 1.0 + 0.5 * np.sin(2 * np.pi * cls.am_rate * t + rng.uniform(0, 2 * np.pi))
    x *= env * rng.uniform(0.7, 1.0)
    return Waveform(0.5 * x / np.max(np.abs(x)), cfg.sample_rate)


def gen_toy_dataset(cfg: ToyTaskConfig, out_dir):
    """Write balanced train/test WAVs plus ``train.jsonl``/``test.jsonl`` manifests."""
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    names = [c.name for c in cfg.classes]
    splits = {}
    index = 0
    for split, per_class in (("train", cfg.train_per_class), ("test", cfg.test_per_class)):
        entries = []
        for k, cls in enumerate(cfg.classes):
            for j in range(per_class):
                rng = np.random.default_rng(derive_seed(cfg.seed, "TOY", "gen", index))
                index += 1
                w = synth_clip(cls, cfg, rng)
                sid = f"{split}-{cls.name}-{j:04d}"
                rel = f"audio/{sid}.wav"
                save_wav(w, out_dir / rel, "float32")
                entries.append(ManifestEntry(sid, rel, k, None, w.duration_seconds, w.sample_rate))
        m = DatasetManifest("TOY", names, entries, out_dir)
        write_manifest(m, out_dir / f"{split}.jsonl")
        splits[split] = m
    return splits["train"], splits["test"]


def load_manifest_audio(m: DatasetManifest):
    return [load_wav(m.resolve(e)) for e in m.entries], m.labels


# -- model ---------------------------------------------------------------------

@dataclass
class ToyModelConfig:
    n_classes: int = 4
    n_mels: int = 64
    n_filters: int = 32
    kernel: int = 5
    embed_dim: int = 64
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    mel: MelConfig = field(default_factory=MelConfig)

    @property
    def hidden(self) -> int:
        return self.embed_dim // 2


def _layout(cfg: ToyModelConfig):
    m_in = cfg.n_mels * cfg.kernel
    return {
        "feature_extractor": [("conv_w", (cfg.n_filters, m_in)), ("conv_b", (cfg.n_filters,)),
                              ("bn_gamma", (cfg.n_filters,)), ("bn_beta", (cfg.n_filters,)),
                              ("proj_w", (cfg.n_filters, cfg.embed_dim)), ("proj_b", (cfg.embed_dim,))],
        "classifier": [("fc1_w", (cfg.embed_dim, cfg.hidden)), ("fc1_b", (cfg.hidden,)),
                       ("fc2_w", (cfg.hidden, cfg.n_classes)), ("fc2_b", (cfg.n_classes,))],
    }


class ToyForward:
    """Cached activations of one forward call; ``backward`` gives group gradients."""

    def __init__(self, model, cache, probs, embeddings):
        self._model = model
        self._c = cache
        self.probs = probs
        self.embeddings = embeddings

    def relu_masks(self) -> tuple:
        return self._c["zbn"] > 0, self._c["z1"] > 0

    def backward(self, grad_probs=None, grad_logits=None) -> dict:
        m, c = self._model, self._c
        P = m.params
        if grad_logits is None:
            g = np.asarray(grad_probs, dtype=np.float64)
            p = self.probs
            grad_logits = p * (g - np.sum(g * p, axis=1, keepdims=True))
        gl = grad_logits
        grads = {k: np.zeros_like(v) for k, v in m.param_groups.items()}
        G = m._views(grads)
        G["fc2_w"][...] = c["a1"].T @ gl
        G["fc2_b"][...] = gl.sum(0)
        ga = (gl @ P["fc2_w"].T) * (c["z1"] > 0)
        G["fc1_w"][...] = c["emb"].T @ ga
        G["fc1_b"][...] = ga.sum(0)
        ge = ga @ P["fc1_w"].T
        G["proj_w"][...] = c["pool"].T @ ge
        G["proj_b"][...] = ge.sum(0)
        gpool = ge @ P["proj_w"].T                       # B x K
        t = c["zbn"].shape[1]
        gz = (gpool[:, None, :] / t) * (c["zbn"] > 0)    # B x T x K
        G["bn_gamma"][...] = np.sum(gz * c["xhat"], axis=(0, 1))
        G["bn_beta"][...] = np.sum(gz, axis=(0, 1))
        gx = gz * P["bn_gamma"]
        if c["batch_stats"]:
            n = gx.shape[0] * gx.shape[1]
            gy = (c["inv_std"] / n) * (n * gx - gx.sum(axis=(0, 1))
                                       - c["xhat"] * np.sum(gx * c["xhat"], axis=(0, 1)))
        else:
            gy = gx * c["inv_std"]
        gy2 = gy.reshape(-1, gy.shape[-1])
        G["conv_w"][...] = gy2.T @ c["cols"].reshape(gy2.shape[0], -1)
        G["conv_b"][...] = gy2.sum(0)
        return grads


class ToyModel:
    """Conv-BN feature extractor plus two-layer classifier, all parameters in two flat groups."""

    def __init__(self, cfg: ToyModelConfig = ToyModelConfig(), seed: int = 0):
        self.cfg = cfg
        self.layout = _layout(cfg)
        self.param_groups = {g: np.zeros(sum(math.prod(s) for _, s in items))
                             for g, items in self.layout.items()}
        self.params = self._views(self.param_groups)
        self.buffers = {
            "running_mean": np.zeros(cfg.n_filters),
            "running_var": np.ones(cfg.n_filters),
            "input_mean": np.zeros(cfg.n_mels),
            "input_std": np.ones(cfg.n_mels),
        }
        self._init(np.random.default_rng(seed))

    def _views(self, groups) -> dict:
        out = {}
        for g, items in self.layout.items():
            off = 0
            for name, shape in items:
                size = math.prod(shape)
                out[name] = groups[g][off:off + size].reshape(shape)
                off += size
        return out

    def _init(self, rng):
        P = self.params
        for name in ("conv_w", "proj_w", "fc1_w", "fc2_w"):
            fan_in = P[name].shape[-1] if name == "conv_w" else P[name].shape[0]
            P[name][...] = rng.standard_normal(P[name].shape) * math.sqrt(2.0 / fan_in)
        P["bn_gamma"][...] = 1.0

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.param_groups.values())

    def copy(self) -> "ToyModel":
        other = ToyModel.__new__(ToyModel)
        other.cfg = self.cfg
        other.layout = self.layout
        other.param_groups = {k: v.copy() for k, v in self.param_groups.items()}
        other.params = other._views(other.param_groups)
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other

    def state_equal(self, other: "ToyModel") -> bool:
        return (all(np.array_equal(self.param_groups[k], other.param_groups[k]) for k in self.param_groups)
                and all(np.array_equal(self.buffers[k], other.buffers[k]) for k in self.buffers))

    # inputs

    def log_mel(self, batch) -> np.ndarray:
        rates = {w.sample_rate for w in batch}
        lengths = {len(w) for w in batch}
        if len(rates) != 1 or len(lengths) != 1:
            raise ValueError("a batch must share one sample rate and one length")
        x = np.stack([w.samples for w in batch])
        return log_mel_batch(x, rates.pop(), self.cfg.mel)

    def featurize(self, batch) -> np.ndarray:
        """Log-mel standardised per mel bin with the stored input statistics."""
        feats = self.log_mel(batch)
        return (feats - self.buffers["input_mean"][None, :, None]) / self.buffers["input_std"][None, :, None]

    def fit_input_stats(self, batch) -> None:
        feats = self.log_mel(batch)
        self.buffers["input_mean"][...] = feats.mean(axis=(0, 2))
        self.buffers["input_std"][...] = feats.std(axis=(0, 2)) + 1e-3

    # forward

    def forward(self, x: np.ndarray, mode: str = "eval") -> ToyForward:
        """Modes: "eval" uses running BN statistics and mutates nothing; "adapt"
        and "train" use batch statistics and update the running ones; "batch"
        uses batch statistics without touching running state (grad checks)."""
        if mode not in ("eval", "adapt", "train", "batch"):
            raise ValueError(f"unknown mode {mode!r}")
        cfg, P = self.cfg, self.params
        x = np.asarray(x, dtype=np.float64)
        b, m, t = x.shape
        k = cfg.kernel
        if t < k:
            raise ValueError(f"need at least {k} frames, got {t}")
        win = np.lib.stride_tricks.sliding_window_view(x, k, axis=2)   # B x M x T' x k
        cols = win.transpose(0, 2, 1, 3).reshape(b, t - k + 1, m * k)
        y = cols @ P["conv_w"].T + P["conv_b"]                          # B x T' x K
        batch_stats = mode != "eval"
        if batch_stats:
            mu = y.mean(axis=(0, 1))
            var = y.var(axis=(0, 1))
            if mode in ("adapt", "train"):
                mom = cfg.bn_momentum
                self.buffers["running_mean"] *= 1 - mom
                self.buffers["running_mean"] += mom * mu
                self.buffers["running_var"] *= 1 - mom
                self.buffers["running_var"] += mom * var
        else:
            mu, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + cfg.bn_eps)
        xhat = (y - mu) * inv_std
        zbn = P["bn_gamma"] * xhat + P["bn_beta"]
        pool = np.maximum(zbn, 0.0).mean(axis=1)                        # B x K
        emb = pool @ P["proj_w"] + P["proj_b"]                          # B x D
        z1 = emb @ P["fc1_w"] + P["fc1_b"]
        a1 = np.maximum(z1, 0.0)
        logits = a1 @ P["fc2_w"] + P["fc2_b"]
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        probs = e / e.sum(axis=1, keepdims=True)
        cache = {"cols": cols, "xhat": xhat, "inv_std": inv_std, "zbn": zbn, "pool": pool,
                 "emb": emb, "z1": z1, "a1": a1, "batch_stats": batch_stats}
        return ToyForward(self, cache, probs, emb)


def cross_entropy(probs: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits, (p - onehot) / B."""
    labels = np.asarray(labels, dtype=int)
    b = len(labels)
    loss = -float(np.mean(np.log(np.maximum(probs[np.arange(b), labels], 1e-300))))
    g = probs.copy()
    g[np.arange(b), labels] -= 1.0
    return loss, g / b


# -- training ----------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 15
    batch: int = 32
    seed: int = 0


class TrainingDiverged(RuntimeError):
    pass


def train_source(model: ToyModel, train, hp: TrainConfig = TrainConfig(), test=None):
    """Supervised cross-entropy training with one learning rate for both groups.

    ``train``/``test`` are DatasetManifests or (waveforms, labels) pairs.
    Returns (model, clean top-1 on ``test`` or None). Zero epochs leaves the
    model untouched.
    """
    waves, labels = load_manifest_audio(train) if isinstance(train, DatasetManifest) else train
    labels = np.asarray(labels, dtype=int)
    if hp.epochs > 0:
        model.fit_input_stats(waves)
        x = model.featurize(waves)
        opt = OptimizerState(lr_c=hp.lr, lr_ratio=1.0, momentum=hp.momentum)
        rng = np.random.default_rng(hp.seed)
        for epoch in range(hp.epochs):
            order = rng.permutation(len(labels))
            for s in range(0, len(order) - hp.batch + 1, hp.batch):
                idx = order[s:s + hp.batch]
                fp = model.forward(x[idx], mode="train")
                loss, gl = cross_entropy(fp.probs, labels[idx])
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
                blr_step(model.param_groups, fp.backward(grad_logits=gl), opt)
    acc = None
    if test is not None:
        tw, tl = load_manifest_audio(test) if isinstance(test, DatasetManifest) else test
        acc = top1(model, tw, tl)
    return model, acc


def top1(model: ToyModel, waves, labels, batch: int = 256) -> float:
    probs, _ = predict(model, model.featurize(waves), batch)
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


# -- gradient check ------------------------------------------------------------

def _objective(model: ToyModel, loss: str, x_l, x_r, labels, loss_cfg):
    """(value, lazy gradients, ReLU activation masks) of one objective evaluation."""
    fp_l = model.forward(x_l, mode="batch")
    if loss == "cross_entropy":
        value, gl = cross_entropy(fp_l.probs, labels)
        return value, (lambda: fp_l.backward(grad_logits=gl)), fp_l.relu_masks()
    fp_r = model.forward(x_r, mode="batch")
    out = combined_loss(fp_l.probs, fp_r.probs, loss_cfg)

    def grads():
        a, b = fp_l.backward(out.grad_l), fp_r.backward(out.grad_r)
        return {k: a[k] + b[k] for k in a}
    return out.value, grads, fp_l.relu_masks() + fp_r.relu_masks()


def grad_check(model: ToyModel, x_l, loss: str = "cross_entropy", labels=None, x_r=None,
               loss_cfg=None, n_coords: int = 200, step: float = 1e-5, seed: int = 0,
               return_details: bool = False):
    """Max relative error between analytic and central-difference parameter gradients.

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-7); checked
    on ``n_coords`` random coordinates across both groups. ``x_l``/``x_r``
    are featurized inputs; cross-entropy uses ``x_l`` and ``labels`` only.

    A coordinate whose +/- step flips any ReLU between active and inactive
    straddles a kink, where the central difference is not a derivative.
    Such coordinates are reported with relative error NaN and left out of
    the maximum. With ``return_details`` the result is (worst, rows) and
    each row is (group, index, analytic, numeric, rel_err).
    """
    if len(x_l) < 2:
        raise ValueError("grad_check needs a batch of at least 2")
    loss_cfg = loss_cfg or LossConfig()
    x_r = x_l if x_r is None else x_r
    _, grads_fn, _ = _objective(model, loss, x_l, x_r, labels, loss_cfg)
    analytic = grads_fn()
    rng = np.random.default_rng(seed)
    coords = [(g, i) for g in model.param_groups for i in range(model.param_groups[g].size)]
    pick = rng.choice(len(coords), size=min(n_coords, len(coords)), replace=False)
    worst, rows = 0.0, []
    for j in pick:
        g, i = coords[j]
        p = model.param_groups[g]
        old = p[i]
        p[i] = old + step
        f_plus, _, m_plus = _objective(model, loss, x_l, x_r, labels, loss_cfg)
        p[i] = old - step
        f_minus, _, m_minus = _objective(model, loss, x_l, x_r, labels, loss_cfg)
        p[i] = old
        num = (f_plus - f_minus) / (2 * step)
        a = analytic[g][i]
        if any(not np.array_equal(u, v) for u, v in zip(m_plus, m_minus)):
            rows.append((g, i, a, num, float("nan")))
            continue
        rel = abs(a - num) / max(abs(a), abs(num), 1e-7)
        rows.append((g, i, a, num, rel))
        worst = max(worst, rel)
    return (worst, rows) if return_details else worst


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(model: ToyModel, path) -> None:
    """Magic, version, JSON header (config + tensor table), little-endian float32 payload."""
    tensors = []
    for g, items in model.layout.items():
        for name, shape in items:
            tensors.append({"group": g, "name": name, "shape": list(shape)})
    for name, arr in model.buffers.items():
        tensors.append({"group": "buffers", "name": name, "shape": list(arr.shape)})
    cfg = asdict(model.cfg)
    header = json.dumps({"config": cfg, "tensors": tensors}, sort_keys=True).encode("utf-8")
    payload = np.concatenate([model.param_groups["feature_extractor"], model.param_groups["classifier"]]
                             + [model.buffers[t["name"]].ravel() for t in tensors if t["group"] == "buffers"])
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        f.write(payload.astype("<f4").tobytes())


def load_checkpoint(path) -> ToyModel:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a toy-model checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<HI", data, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += struct.calcsize("<HI")
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    payload = np.frombuffer(data, dtype="<f4", offset=off + hlen).astype(np.float64)
    cfg_d = dict(header["config"])
    cfg_d["mel"] = MelConfig(**cfg_d["mel"])
    model = ToyModel(ToyModelConfig(**cfg_d))
    pos = 0
    for t in header["tensors"]:
        size = math.prod(t["shape"])
        chunk = payload[pos:pos + size].reshape(t["shape"])
        pos += size
        if t["group"] == "buffers":
            model.buffers[t["name"]][...] = chunk
        else:
            model.params[t["name"]][...] = chunk
    if pos != payload.size:
        raise ValueError(f"{path}: payload size mismatch")
    return model
