"""Neural pipeline mapping platoon histories to dynamics parameters.

Per window the model sees follower features (speed, gap, relative speed) over
a fixed history, plus the scripted leader speeds over the horizon, and emits
one sign-constrained parameter triple per follower per parameter block. The
stages are:

  embed        affine lift of normalized features to the model width
  tfl_forward  temporal state-space block (gated selective scan) per vehicle
  ful_forward  variational head on the last temporal state: mu, logvar, sample
  pfl_forward  platoon self-attention across vehicles, leader-to-tail masked
  narp_decode  cross-attention of horizon queries over the temporal memory

All learnable state lives in a flat name -> Tensor mapping so optimizers and
checkpoints can treat it uniformly. Every stage runs on autodiff Tensors;
nothing here mutates its inputs. Initial draws are quantized to float32 so a
float32 checkpoint reproduces the exact float64 forward pass.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import dynamics as dyn

log = logging.getLogger(__name__)

NORM_STD_FLOOR = 1e-6
EMBED_MAGNITUDE_WARN = 100.0


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and window geometry. Defaults match the reference setup."""

    d_model: int = 64
    n_state: int = 8           # state-space order per channel
    conv_kernel: int = 4
    ve_hidden: int = 0         # 0 -> d_model
    attn_layers: int = 2
    attn_heads: int = 4
    history_len: int = 21
    horizon: int = 20
    param_window: int = 5      # steps steered by one parameter triple
    dt: float = 0.1
    disable_tfl: bool = False
    disable_pfl: bool = False

    def __post_init__(self):
        for name in ("d_model", "n_state", "conv_kernel", "attn_layers",
                     "attn_heads", "history_len", "horizon", "param_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.horizon % self.param_window != 0:
            raise ValueError(
                f"horizon {self.horizon} is not a multiple of "
                f"param_window {self.param_window}")
        if self.d_model % self.attn_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by {self.attn_heads} heads")
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def n_param_steps(self) -> int:
        return self.horizon // self.param_window

    @property
    def d_inner(self) -> int:
        return 2 * self.d_model

    @property
    def dt_rank(self) -> int:
        return max(1, self.d_model // 16)

    @property
    def hidden(self) -> int:
        return self.ve_hidden if self.ve_hidden else self.d_model


@dataclass
class ModelParams:
    """Learnable weights plus the frozen feature normalization."""

    weights: "OrderedDict[str, ad.Tensor]"
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    norm_std: np.ndarray = field(default_factory=lambda: np.ones(3))


def _q32(a: np.ndarray) -> np.ndarray:
    """Snap to float32-representable float64 values."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def count_parameters(params: ModelParams) -> int:
    return sum(t.data.size for t in params.weights.values())


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Deterministic initialization; draw order is the weight insertion order."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    d, di, n = config.d_model, config.d_inner, config.n_state
    r, K, h = config.dt_rank, config.conv_kernel, config.hidden
    w: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def glorot(fan_in, fan_out, shape=None):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))

    w["embed.w"] = glorot(3, d)
    w["embed.b"] = np.zeros(d)

    w["tfl.norm.g"] = np.ones(d)
    w["tfl.in_proj.w"] = glorot(d, 2 * di)
    w["tfl.conv.w"] = rng.uniform(-1.0, 1.0, size=(di, K)) / math.sqrt(K)
    w["tfl.conv.b"] = np.zeros(di)
    w["tfl.x_proj.w"] = glorot(di, r + 2 * n)
    w["tfl.dt_proj.w"] = rng.uniform(-1.0, 1.0, size=(r, di)) / math.sqrt(r)
    # bias chosen so initial step sizes softplus(b) land log-uniformly in
    # [1e-3, 1e-1], keeping early state updates small but nonzero
    dt0 = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=di))
    w["tfl.dt_proj.b"] = np.log(np.expm1(dt0))
    w["tfl.a_log"] = np.tile(np.log(np.arange(1.0, n + 1.0)), (di, 1))
    w["tfl.d"] = np.ones(di)
    w["tfl.out_proj.w"] = glorot(di, d)

    w["ful.fc1.w"] = glorot(d, h)
    w["ful.fc1.b"] = np.zeros(h)
    w["ful.fc2.w"] = glorot(h, h)
    w["ful.fc2.b"] = np.zeros(h)
    w["ful.mu.w"] = glorot(h, d)
    w["ful.mu.b"] = np.zeros(d)
    w["ful.logvar.w"] = glorot(h, d)
    w["ful.logvar.b"] = np.zeros(d)

    def attn_stack(prefix: str):
        for i in range(config.attn_layers):
            base = f"{prefix}.{i}"
            for name in ("q", "k", "v", "o"):
                w[f"{base}.attn.{name}.w"] = glorot(d, d)
            w[f"{base}.ln1.g"] = np.ones(d)
            w[f"{base}.ln1.b"] = np.zeros(d)
            w[f"{base}.ff.w1"] = glorot(d, 4 * d)
            w[f"{base}.ff.b1"] = np.zeros(4 * d)
            w[f"{base}.ff.w2"] = glorot(4 * d, d)
            w[f"{base}.ff.b2"] = np.zeros(d)
            w[f"{base}.ln2.g"] = np.ones(d)
            w[f"{base}.ln2.b"] = np.zeros(d)

    attn_stack("pfl")
    attn_stack("dec")
    w["dec.head.w"] = glorot(d, 3)
    w["dec.head.b"] = np.zeros(3)

    tensors = OrderedDict((k, ad.param(_q32(v))) for k, v in w.items())
    return ModelParams(weights=tensors)


def fit_normalization(windows) -> tuple:
    """Per-feature mean/std over all history entries of the given windows."""
    if not windows:
        raise ValueError("cannot fit normalization on an empty window list")
    flat = np.concatenate([w.history.reshape(-1, 3) for w in windows], axis=0)
    mean = _q32(flat.mean(axis=0))
    std = _q32(np.maximum(flat.std(axis=0), NORM_STD_FLOOR))
    return mean, std


@lru_cache(maxsize=64)
def _sinusoidal(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length, dtype=float)[:, None]
    i = np.arange(d_model, dtype=float)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / d_model)
    enc = np.where(i.astype(int) % 2 == 0, np.sin(angle), np.cos(angle))
    enc.flags.writeable = False
    return enc


def sinusoidal_encoding(length: int, d_model: int) -> np.ndarray:
    """Standard interleaved sin/cos position table, cached, read-only."""
    return _sinusoidal(length, d_model)


# -- stages -------------------------------------------------------------------

def selective_scan(u, delta, a_mat, b_seq, c_seq, d_gain):
    """Input-dependent diagonal state-space recurrence.

    u, delta: (..., T, C); a_mat: (C, S); b_seq, c_seq: (..., T, S);
    d_gain: (C,). Per step: h = exp(delta*A) h + delta*B_t u_t, and the output
    is y_t = sum_s C_t h + D u_t. Zero initial state.
    """
    u, delta = ad.as_tensor(u), ad.as_tensor(delta)
    a_mat, d_gain = ad.as_tensor(a_mat), ad.as_tensor(d_gain)
    b_seq, c_seq = ad.as_tensor(b_seq), ad.as_tensor(c_seq)
    T = u.shape[-2]
    ys = []
    h = None
    for t in range(T):
        dt_t = delta[..., t, :]                       # (..., C)
        u_t = u[..., t, :]
        b_t = b_seq[..., t, :]                        # (..., S)
        c_t = c_seq[..., t, :]
        dt_e = ad.reshape(dt_t, dt_t.shape + (1,))    # (..., C, 1)
        du = ad.mul(dt_e, ad.reshape(u_t, u_t.shape + (1,)))
        b_e = ad.reshape(b_t, b_t.shape[:-1] + (1, b_t.shape[-1]))
        inject = ad.mul(du, b_e)                      # (..., C, S)
        if h is None:
            h = inject
        else:
            decay = ad.exp(ad.mul(dt_e, a_mat))
            h = ad.add(ad.mul(decay, h), inject)
        c_e = ad.reshape(c_t, c_t.shape[:-1] + (1, c_t.shape[-1]))
        y_t = ad.add(ad.tsum(ad.mul(h, c_e), axis=-1), ad.mul(d_gain, u_t))
        ys.append(y_t)
    return ad.stack(ys, axis=-2)                      # (..., T, C)


def embed_inputs(w, x_norm: np.ndarray):
    if np.abs(x_norm).max(initial=0.0) > EMBED_MAGNITUDE_WARN:
        log.warning("embed_inputs: normalized feature magnitude exceeds %.0f; "
                    "normalization stats may not match this data",
                    EMBED_MAGNITUDE_WARN)
    return ad.add(ad.matmul(x_norm, w["embed.w"]), w["embed.b"])


def tfl_forward(w, config: ModelConfig, x):
    """Gated selective-scan block with residual; x: (..., T, d_model)."""
    di, r, n = config.d_inner, config.dt_rank, config.n_state
    u = ad.rms_norm(x, w["tfl.norm.g"])
    proj = ad.matmul(u, w["tfl.in_proj.w"])
    xs = proj[..., :di]
    gate = proj[..., di:]
    xs = ad.silu(ad.causal_conv1d(xs, w["tfl.conv.w"], w["tfl.conv.b"]))
    x_dbl = ad.matmul(xs, w["tfl.x_proj.w"])
    delta = ad.softplus(ad.add(ad.matmul(x_dbl[..., :r], w["tfl.dt_proj.w"]),
                               w["tfl.dt_proj.b"]))
    b_seq = x_dbl[..., r:r + n]
    c_seq = x_dbl[..., r + n:]
    a_mat = ad.neg(ad.exp(w["tfl.a_log"]))
    y = selective_scan(xs, delta, a_mat, b_seq, c_seq, w["tfl.d"])
    y = ad.mul(y, ad.silu(gate))
    return ad.add(x, ad.matmul(y, w["tfl.out_proj.w"]))


def ful_forward(w, x_last, noise=None):
    """Variational head: mu, logvar, and a latent sample (mu when noise is None)."""
    h1 = ad.relu(ad.add(ad.matmul(x_last, w["ful.fc1.w"]), w["ful.fc1.b"]))
    h2 = ad.relu(ad.add(ad.matmul(h1, w["ful.fc2.w"]), w["ful.fc2.b"]))
    mu = ad.add(ad.matmul(h2, w["ful.mu.w"]), w["ful.mu.b"])
    logvar = ad.add(ad.matmul(h2, w["ful.logvar.w"]), w["ful.logvar.b"])
    if noise is None:
        return mu, mu, logvar
    sigma = ad.exp(ad.mul(logvar, 0.5))
    z = ad.add(mu, ad.mul(sigma, np.asarray(noise, dtype=float)))
    return z, mu, logvar


def _mha(w, base: str, q_in, k_in, v_in, heads: int, mask=None):
    q = ad.matmul(q_in, w[f"{base}.attn.q.w"])
    k = ad.matmul(k_in, w[f"{base}.attn.k.w"])
    v = ad.matmul(v_in, w[f"{base}.attn.v.w"])
    d = q.shape[-1]
    dh = d // heads

    def split(t):
        t = ad.reshape(t, t.shape[:-1] + (heads, dh))
        return ad.swapaxes(t, -3, -2)                 # (..., H, T, dh)

    qh, kh, vh = split(q), split(k), split(v)
    scores = ad.mul(ad.matmul(qh, ad.swapaxes(kh, -1, -2)), 1.0 / math.sqrt(dh))
    attn = ad.softmax(scores) if mask is None else ad.masked_softmax(scores, mask)
    out = ad.swapaxes(ad.matmul(attn, vh), -3, -2)    # (..., Tq, H, dh)
    out = ad.reshape(out, out.shape[:-2] + (d,))
    return ad.matmul(out, w[f"{base}.attn.o.w"])


def _ff(w, base: str, x):
    h = ad.relu(ad.add(ad.matmul(x, w[f"{base}.ff.w1"]), w[f"{base}.ff.b1"]))
    return ad.add(ad.matmul(h, w[f"{base}.ff.w2"]), w[f"{base}.ff.b2"])


def _attn_layer(w, base: str, q_in, memory, heads: int, mask=None):
    """Post-norm residual attention + feedforward."""
    x = ad.layer_norm(ad.add(q_in, _mha(w, base, q_in, memory, memory, heads, mask)),
                      w[f"{base}.ln1.g"], w[f"{base}.ln1.b"])
    return ad.layer_norm(ad.add(x, _ff(w, base, x)),
                         w[f"{base}.ln2.g"], w[f"{base}.ln2.b"])


def pfl_forward(w, config: ModelConfig, z):
    """Cross-vehicle attention; vehicle i sees vehicles 1..i (upstream only)."""
    n_veh = z.shape[-2]
    x = ad.add(z, sinusoidal_encoding(n_veh, config.d_model))
    mask = np.tril(np.ones((n_veh, n_veh), dtype=bool))
    for i in range(config.attn_layers):
        x = _attn_layer(w, f"pfl.{i}", x, x, config.attn_heads, mask)
    return x


def narp_decode(w, config: ModelConfig, latent, memory):
    """All parameter blocks decoded at once from horizon-step queries."""
    S = config.n_param_steps
    q = ad.add(ad.reshape(latent, latent.shape[:-1] + (1, latent.shape[-1])),
               sinusoidal_encoding(S, config.d_model))
    for i in range(config.attn_layers):
        q = _attn_layer(w, f"dec.{i}", q, memory, config.attn_heads)
    return ad.add(ad.matmul(q, w["dec.head.w"]), w["dec.head.b"])


@dataclass
class ModelOutput:
    result: dyn.RolloutResult
    theta: ad.Tensor
    raw: ad.Tensor
    mu: ad.Tensor
    logvar: ad.Tensor
    xstar: dyn.ExpectedState


def _forward(w, norm_mean, norm_std, config: ModelConfig,
             history: np.ndarray, lead_future: np.ndarray,
             noise=None) -> ModelOutput:
    history = np.asarray(history, dtype=float)
    lead_future = np.asarray(lead_future, dtype=float)
    if history.ndim != 4 or history.shape[-1] != 3:
        raise ad.ShapeMismatch(
            f"model_forward: history must be (B, N, P, 3), got {history.shape}")
    if history.shape[2] != config.history_len:
        raise ad.ShapeMismatch(
            f"model_forward: history length {history.shape[2]} != "
            f"config history_len {config.history_len}")
    if lead_future.shape != (history.shape[0], config.horizon):
        raise ad.ShapeMismatch(
            f"model_forward: lead_future must be "
            f"({history.shape[0]}, {config.horizon}), got {lead_future.shape}")

    x_norm = (history - norm_mean) / norm_std
    e = embed_inputs(w, x_norm)
    memory = e if config.disable_tfl else tfl_forward(w, config, e)
    z, mu, logvar = ful_forward(w, memory[..., -1, :], noise)
    latent = z if config.disable_pfl else pfl_forward(w, config, z)
    raw = narp_decode(w, config, latent, memory)
    theta = dyn.encode_parameters(raw)
    xstar = dyn.expected_state(history)
    initial = history[..., -1, :]                     # raw units at the anchor
    result = dyn.rollout(initial, lead_future, theta, xstar, dt=config.dt)
    return ModelOutput(result=result, theta=theta, raw=raw,
                       mu=mu, logvar=logvar, xstar=xstar)


def model_forward(params: ModelParams, config: ModelConfig,
                  history: np.ndarray, lead_future: np.ndarray,
                  noise=None) -> ModelOutput:
    """Full pipeline on a window batch.

    history: (B, N, P, 3) raw follower features; lead_future: (B, F) leader
    speeds. noise: optional (B, N, d_model) standard-normal draws; None keeps
    the latent at its mean (deterministic evaluation).
    """
    return _forward(params.weights, params.norm_mean, params.norm_std,
                    config, history, lead_future, noise)


# -- gradient verification ------------------------------------------------------

def desk_config() -> ModelConfig:
    """Smallest configuration that exercises every code path."""
    return ModelConfig(d_model=8, n_state=2, conv_kernel=4, ve_hidden=8,
                       attn_layers=1, attn_heads=2, history_len=6, horizon=4,
                       param_window=2)


def gradcheck_model(config: ModelConfig = None, seed: int = 0,
                    batch: int = 1, n_vehicles: int = 2,
                    step: float = 1e-6) -> tuple:
    """Compare analytic gradients of the full training loss against central
    finite differences for every weight element. Returns (max_rel_err, count).
    """
    cfg = config or desk_config()
    params = init_params(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    hist = np.empty((batch, n_vehicles, cfg.history_len, 3))
    hist[..., 0] = rng.uniform(8.0, 15.0, hist.shape[:-1])
    hist[..., 1] = rng.uniform(10.0, 30.0, hist.shape[:-1])
    hist[..., 2] = rng.uniform(-1.0, 1.0, hist.shape[:-1])
    lead = rng.uniform(8.0, 15.0, (batch, cfg.horizon))
    tv = rng.uniform(8.0, 15.0, (batch, n_vehicles, cfg.horizon))
    ts = rng.uniform(10.0, 30.0, (batch, n_vehicles, cfg.horizon))
    mean, std = hist.reshape(-1, 3).mean(axis=0), hist.reshape(-1, 3).std(axis=0)
    mean, std = _q32(mean), _q32(np.maximum(std, NORM_STD_FLOOR))
    names = list(params.weights)
    arrays = [params.weights[k].data for k in names]

    def graph(*tensors):
        w = dict(zip(names, tensors))
        out = _forward(w, mean, std, cfg, hist, lead, None)
        ev = ad.sub(out.result.v, tv)
        es = ad.sub(out.result.s, ts)
        pred = ad.add(ad.tmean(ad.mul(ev, ev)), ad.tmean(ad.mul(es, es)))
        kl = ad.mul(ad.tmean(ad.sub(ad.add(ad.mul(out.mu, out.mu),
                                           ad.exp(out.logvar)),
                                    ad.add(out.logvar, 1.0))), 0.5)
        return ad.add(pred, ad.mul(kl, 0.0025))

    err = ad.finite_diff_check(graph, arrays, step=step)
    return err, sum(a.size for a in arrays)
