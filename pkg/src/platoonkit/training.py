"""Training loop, losses, and float32 checkpoints.

The objective combines squared-error prediction losses on speed and gap with
a KL regularizer on the variational latent. The two prediction losses are
balanced by dynamic weight averaging: each epoch's weights follow the ratio
of the previous two epochs' losses through a temperature-2 softmax, so a task
that stopped improving receives more weight.

Weights are float64 in memory but snapped to float32-representable values
after every optimizer step; checkpoints store raw float32 and therefore
reproduce the in-memory forward pass bit for bit when reloaded.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import network as net

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DWA_TEMPERATURE = 2.0
DWA_FLOOR = 1e-12

CHECKPOINT_FORMAT = 1
MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"


class CheckpointError(Exception):
    pass


# -- losses ---------------------------------------------------------------------

def prediction_losses(result, targets: np.ndarray):
    """Mean squared error of predicted speed and gap over every future step.

    targets: (B, N, F, 2) ground-truth [speed, gap]. Returns (l_v, l_s).
    """
    targets = np.asarray(targets, dtype=float)
    ev = ad.sub(result.v, targets[..., 0])
    es = ad.sub(result.s, targets[..., 1])
    return ad.tmean(ad.mul(ev, ev)), ad.tmean(ad.mul(es, es))


def kl_loss(mu, logvar):
    """KL(q || N(0, I)) averaged over batch, vehicles, and latent channels."""
    inner = ad.sub(ad.add(ad.mul(mu, mu), ad.exp(logvar)),
                   ad.add(logvar, 1.0))
    return ad.mul(ad.tmean(inner), 0.5)


def dwa_weights(loss_history, temperature: float = DWA_TEMPERATURE) -> np.ndarray:
    """Per-task weights from the last two epochs of task losses.

    loss_history: sequence of (l_v, l_s) epoch means. Fewer than two entries,
    or a vanishing denominator, yields uniform weights (1, 1).
    """
    K = 2
    if len(loss_history) < 2:
        return np.ones(K)
    prev = np.asarray(loss_history[-1], dtype=float)
    prev2 = np.asarray(loss_history[-2], dtype=float)
    if (prev2 < DWA_FLOOR).any():
        return np.ones(K)
    ratio = prev / prev2
    e = np.exp(ratio / temperature)
    return K * e / e.sum()


# -- optimizer --------------------------------------------------------------------

class Adam:
    """Standard Adam with bias correction; updates snap to float32 values."""

    def __init__(self, weights: "OrderedDict[str, ad.Tensor]", lr: float):
        if lr <= 0.0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.weights = weights
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in weights.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in weights.items()}

    def step(self) -> None:
        """Apply one update from the gradients accumulated on the weights."""
        self.t += 1
        b1t = 1.0 - ADAM_BETA1 ** self.t
        b2t = 1.0 - ADAM_BETA2 ** self.t
        for k, tensor in self.weights.items():
            g = tensor.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            upd = self.lr * (m / b1t) / (np.sqrt(v / b2t) + ADAM_EPS)
            tensor.data = net._q32(tensor.data - upd)
            tensor.grad = None

    def snapshot(self) -> dict:
        return {"t": self.t,
                "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()},
                "w": {k: t.data.copy() for k, t in self.weights.items()}}

    def restore(self, snap: dict) -> None:
        self.t = snap["t"]
        for k in self.weights:
            self.m[k][...] = snap["m"][k]
            self.v[k][...] = snap["v"][k]
            self.weights[k].data = snap["w"][k].copy()
            self.weights[k].grad = None


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path: str, params: net.ModelParams,
                    config: net.ModelConfig) -> None:
    """Write manifest.json + weights.bin (little-endian float32) into ``path``."""
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name, tensor in params.weights.items():
        a32 = tensor.data.astype("<f4")
        entries.append({"name": name, "shape": list(tensor.data.shape),
                        "offset": offset, "size": int(a32.size)})
        blobs.append(a32.tobytes())
        offset += a32.size
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": dataclasses.asdict(config),
        "norm_mean": [float(x) for x in params.norm_mean],
        "norm_std": [float(x) for x in params.norm_std],
        "weights": entries,
        "total_values": offset,
    }
    with open(os.path.join(path, WEIGHTS_NAME), "wb") as f:
        f.write(b"".join(blobs))
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_checkpoint(path: str):
    """Read a checkpoint directory; returns (params, config)."""
    try:
        with open(os.path.join(path, MANIFEST_NAME), encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest in {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"unsupported checkpoint format {manifest.get('format')!r}")
    try:
        config = net.ModelConfig(**manifest["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad config in manifest: {exc}") from exc
    try:
        raw = np.fromfile(os.path.join(path, WEIGHTS_NAME), dtype="<f4")
    except OSError as exc:
        raise CheckpointError(f"unreadable weights in {path}: {exc}") from exc
    if raw.size != manifest["total_values"]:
        raise CheckpointError(
            f"weights.bin holds {raw.size} values, manifest says "
            f"{manifest['total_values']}")
    weights = OrderedDict()
    for entry in manifest["weights"]:
        lo = entry["offset"]
        hi = lo + entry["size"]
        block = raw[lo:hi].astype(np.float64).reshape(entry["shape"])
        if block.size != entry["size"]:
            raise CheckpointError(f"weight {entry['name']} is truncated")
        weights[entry["name"]] = ad.param(block)
    params = net.ModelParams(
        weights=weights,
        norm_mean=np.asarray(manifest["norm_mean"], dtype=float),
        norm_std=np.asarray(manifest["norm_std"], dtype=float))
    return params, config


# -- batching ---------------------------------------------------------------------

def assemble_batch(windows):
    """Stack same-vehicle-count windows into (hist, lead, targets) arrays."""
    hist = np.stack([w.history for w in windows])
    lead = np.stack([w.lead_future for w in windows])
    targets = np.stack([w.targets for w in windows])
    return hist, lead, targets


def make_batches(windows, batch_size: int, rng=None):
    """Group windows by vehicle count, optionally shuffle, emit batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    groups = {}
    for w in windows:
        groups.setdefault(w.history.shape[0], []).append(w)
    batches = []
    for n in sorted(groups):
        group = groups[n]
        order = rng.permutation(len(group)) if rng is not None else range(len(group))
        chunk = []
        for i in order:
            chunk.append(group[i])
            if len(chunk) == batch_size:
                batches.append(assemble_batch(chunk))
                chunk = []
        if chunk:
            batches.append(assemble_batch(chunk))
    return batches


# -- loop -------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-5
    alpha_kl: float = 0.0025
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.alpha_kl < 0:
            raise ValueError("lr must be > 0 and alpha_kl >= 0")


@dataclass
class TrainResult:
    history: list              # one dict per completed epoch
    best_val: float
    best_epoch: int
    status: str                # "completed" or "aborted_non_finite"


def _eval_windows(params, config, windows, batch_size):
    """Deterministic losses over a window list; means weighted by window count."""
    sums = np.zeros(3)
    count = 0
    with ad.no_grad():
        for hist, lead, targets in make_batches(windows, batch_size):
            out = net.model_forward(params, config, hist, lead)
            l_v, l_s = prediction_losses(out.result, targets)
            kl = kl_loss(out.mu, out.logvar)
            b = hist.shape[0]
            sums += b * np.array([l_v.data, l_s.data, kl.data])
            count += b
    return sums / count


def train(params: net.ModelParams, config: net.ModelConfig,
          train_windows, val_windows, tcfg: TrainConfig,
          checkpoint_dir: str = None, log_stream=None) -> TrainResult:
    """Optimize ``params`` in place; keep the best-validation checkpoint.

    Emits one JSON line per epoch to ``log_stream`` (no timestamps, so logs
    are byte-reproducible). A non-finite training loss aborts the run: the
    epoch-start state is restored and training stops with status
    "aborted_non_finite".
    """
    if not train_windows:
        raise ValueError("no training windows")
    if not val_windows:
        raise ValueError("no validation windows")
    opt = Adam(params.weights, tcfg.lr)
    epoch_seeds = np.random.SeedSequence(tcfg.seed).spawn(tcfg.epochs)
    task_history = []
    history = []
    best_val = math.inf
    best_epoch = -1
    status = "completed"

    for epoch in range(tcfg.epochs):
        rng = np.random.default_rng(epoch_seeds[epoch])
        weights_vs = dwa_weights(task_history)
        snap = opt.snapshot()
        sums = np.zeros(3)
        seen = 0
        aborted = False
        for hist, lead, targets in make_batches(train_windows, tcfg.batch_size, rng):
            b, n = hist.shape[0], hist.shape[1]
            noise = rng.standard_normal((b, n, config.d_model))
            try:
                out = net.model_forward(params, config, hist, lead, noise=noise)
                l_v, l_s = prediction_losses(out.result, targets)
                kl = kl_loss(out.mu, out.logvar)
                total = ad.add(ad.add(ad.mul(l_v, weights_vs[0]),
                                      ad.mul(l_s, weights_vs[1])),
                               ad.mul(kl, tcfg.alpha_kl))
                if not np.isfinite(total.data):
                    raise ad.NonFiniteValue("training loss is not finite")
                tape = ad.Tape.trace(total)
                tape.backward(np.ones_like(total.data))
                opt.step()
            except ad.NonFiniteValue:
                aborted = True
                break
            sums += b * np.array([l_v.data, l_s.data, kl.data])
            seen += b
        if aborted:
            opt.restore(snap)
            status = "aborted_non_finite"
            break
        train_means = sums / seen
        task_history.append((train_means[0], train_means[1]))
        val = _eval_windows(params, config, val_windows, tcfg.batch_size)
        val_loss = val[0] + val[1] + tcfg.alpha_kl * val[2]
        is_best = val_loss < best_val
        if is_best:
            best_val = float(val_loss)
            best_epoch = epoch
            if checkpoint_dir is not None:
                save_checkpoint(checkpoint_dir, params, config)
        entry = {
            "epoch": epoch,
            "w_v": float(weights_vs[0]), "w_s": float(weights_vs[1]),
            "train_v": float(train_means[0]), "train_s": float(train_means[1]),
            "train_kl": float(train_means[2]),
            "val_v": float(val[0]), "val_s": float(val[1]),
            "val_kl": float(val[2]), "val_loss": float(val_loss),
            "best": bool(is_best),
        }
        history.append(entry)
        if log_stream is not None:
            log_stream.write(json.dumps(entry, sort_keys=True) + "\n")
    return TrainResult(history=history, best_val=best_val,
                       best_epoch=best_epoch, status=status)
