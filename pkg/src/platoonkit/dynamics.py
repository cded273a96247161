"""Sign-constrained linear car-following dynamics and horizon rollout.

Each follower's acceleration is a linear response around an expected state:

    a = f_v * (v - v*) + f_s * (s - s*) + f_dv * (dv - 0)

with the sign pattern f_v < 0, f_s > 0, f_dv > 0 enforced by construction
(softplus magnitudes times fixed signs), which guarantees local stability of
the single-vehicle closed loop. The rollout integrates all followers jointly
with explicit Euler steps; the gap update uses the kinematic identity
s(k+1) = s(k) + dt * dv(k), so gaps, speeds, and positions remain mutually
consistent to machine precision.

All graph functions accept autodiff Tensors (differentiable path) or plain
arrays (wrapped as constants).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

SIGN_PATTERN = np.array([-1.0, 1.0, 1.0])


def encode_parameters(raw):
    """Map raw decoder outputs (..., 3) to sign-constrained parameters.

    theta = [-softplus(r0), softplus(r1), softplus(r2)]; strictly signed for
    any finite input representable in float64 (|raw| < ~745).
    """
    t = ad.as_tensor(raw)
    if t.shape[-1] != 3:
        raise ad.ShapeMismatch(f"encode_parameters: last axis must be 3, got {t.shape}")
    return ad.mul(ad.softplus(t), SIGN_PATTERN)


def validate_theta(values: np.ndarray) -> None:
    """Assert the (..., 3) sign pattern; raises ValueError with the first bad index."""
    arr = np.asarray(values)
    if arr.shape[-1] != 3:
        raise ValueError(f"theta last axis must be 3, got {arr.shape}")
    bad = (arr * SIGN_PATTERN) <= 0.0
    if bad.any():
        idx = tuple(int(i) for i in np.unravel_index(int(np.argmax(bad)), bad.shape))
        raise ValueError(f"theta sign violation at index {idx}: {arr[idx]}")


@dataclass(frozen=True)
class ExpectedState:
    """Anchor state: per-follower means over the history window; dv* is 0."""

    v_star: object   # (..., N) Tensor or ndarray
    s_star: object
    dv_star: float = 0.0


def expected_state(history) -> ExpectedState:
    """Means of speed and gap over the history window (raw physical units)."""
    h = ad.as_tensor(history)
    if h.ndim < 3 or h.shape[-1] != 3:
        raise ad.ShapeMismatch(f"expected_state: need (..., N, P, 3), got {h.shape}")
    v_star = ad.tmean(h[..., 0], axis=-1)
    s_star = ad.tmean(h[..., 1], axis=-1)
    return ExpectedState(v_star, s_star)


@dataclass(frozen=True)
class RolloutResult:
    """Predicted series, one entry per future step.

    v[..., k], s[..., k], dv[..., k] are the states at t+k+1; a[..., k] is the
    acceleration applied at t+k. All fields are (..., N, F) Tensors.
    """

    v: object
    s: object
    a: object
    dv: object

    def arrays(self):
        return (self.v.data, self.s.data, self.a.data, self.dv.data)


def rollout(initial, lead_future, theta, xstar: ExpectedState,
            dt: float = 0.1) -> RolloutResult:
    """Integrate the platoon forward through the full horizon.

    initial: (..., N, 3) follower states [v, s, dv] at anchor time t.
    lead_future: (..., F) leader speeds at t+1..t+F.
    theta: (..., N, S, 3) parameter blocks; each block steers F/S consecutive
    steps (S must divide F).
    Follower 1 couples to the scripted leader; follower n couples to the
    just-updated speed of follower n-1.
    """
    init = ad.as_tensor(initial)
    lead = ad.as_tensor(lead_future)
    th = ad.as_tensor(theta)
    if init.shape[-1] != 3:
        raise ad.ShapeMismatch(f"rollout: initial must be (..., N, 3), got {init.shape}")
    if th.shape[-1] != 3 or th.ndim < 3:
        raise ad.ShapeMismatch(f"rollout: theta must be (..., N, S, 3), got {th.shape}")
    F = lead.shape[-1]
    S = th.shape[-2]
    if F % S != 0:
        raise ValueError(f"horizon {F} is not a multiple of the {S} parameter steps")
    m = F // S
    n_veh = init.shape[-2]
    if th.shape[-3] != n_veh:
        raise ad.ShapeMismatch(
            f"rollout: theta covers {th.shape[-3]} vehicles, state has {n_veh}")
    v_star = ad.as_tensor(xstar.v_star)
    s_star = ad.as_tensor(xstar.s_star)

    # Hoist per-block parameter slices: 3*S getitems instead of 3*F.
    f_v = [th[..., j, 0] for j in range(S)]
    f_s = [th[..., j, 1] for j in range(S)]
    f_dv = [th[..., j, 2] for j in range(S)]

    v = init[..., 0]
    s = init[..., 1]
    dv = init[..., 2]
    vs, ss, accs, dvs = [], [], [], []
    for k in range(F):
        j = k // m
        a = ad.add(
            ad.add(ad.mul(f_v[j], ad.sub(v, v_star)),
                   ad.mul(f_s[j], ad.sub(s, s_star))),
            ad.mul(f_dv[j], dv))
        v_next = ad.add(v, ad.mul(a, dt))
        s_next = ad.add(s, ad.mul(dv, dt))
        lead_k = lead[..., k:k + 1]
        v_ahead = ad.concat([lead_k, v_next[..., :-1]], axis=-1) if n_veh > 1 else lead_k
        dv_next = ad.sub(v_ahead, v_next)
        accs.append(a)
        vs.append(v_next)
        ss.append(s_next)
        dvs.append(dv_next)
        v, s, dv = v_next, s_next, dv_next
    return RolloutResult(
        v=ad.stack(vs, axis=-1), s=ad.stack(ss, axis=-1),
        a=ad.stack(accs, axis=-1), dv=ad.stack(dvs, axis=-1))
