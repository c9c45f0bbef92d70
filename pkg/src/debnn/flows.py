"""Radial normalizing flows over last-layer parameter space.

Each transform is f(z) = z + beta * h(alpha, r) * (z - z0) with r = ||z - z0||
and h = 1/(alpha + r). Invertibility is guaranteed by reparameterizing
beta = softplus(beta_raw) - alpha (so beta >= -alpha always), and the Jacobian
determinant has the closed form

    det J = (1 + beta*h)^(d-1) * (1 + alpha*beta*h^2).

Gradients through a flow chain are hand-derived; tests check them against
finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .util import inverse_softplus, sigmoid, softplus


@dataclass(frozen=True)
class RadialFlow:
    z0: np.ndarray
    log_alpha: float
    beta_raw: float

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    @property
    def beta(self) -> float:
        return float(softplus(self.beta_raw) - self.alpha)


def identity_flows(dim: int, n_flows: int, center: np.ndarray | None = None,
                   rng: np.random.Generator | None = None,
                   jitter: float = 0.01) -> tuple:
    """Flows initialized to the exact identity (beta = 0), reference points at
    `center` plus small noise."""
    center = np.zeros(dim) if center is None else np.asarray(center, dtype=np.float64)
    flows = []
    for _ in range(n_flows):
        noise = jitter * rng.standard_normal(dim) if rng is not None else np.zeros(dim)
        # softplus(beta_raw) = alpha = 1 makes beta exactly zero
        flows.append(RadialFlow(z0=center + noise, log_alpha=0.0,
                                beta_raw=float(inverse_softplus(1.0))))
    return tuple(flows)


def _step(flow: RadialFlow, z: np.ndarray):
    u = z - flow.z0
    r = np.linalg.norm(u, axis=-1)
    alpha, beta = flow.alpha, flow.beta
    h = 1.0 / (alpha + r)
    bh = beta * h
    d = z.shape[-1]
    ld = (d - 1) * np.log1p(bh) + np.log1p(alpha * beta * h ** 2)
    z_next = z + bh[..., None] * u
    return z_next, ld, (u, r, h)


def flow_forward(flows, z0):
    """Push a batch (S, d) or single vector through the chain.

    Returns (z_out, log_det) where log_det is the accumulated log |det J|.
    """
    z = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    single = np.asarray(z0).ndim == 1
    ld_total = np.zeros(z.shape[0])
    for flow in flows:
        z, ld, _ = _step(flow, z)
        ld_total += ld
    if single:
        return z[0], float(ld_total[0])
    return z, ld_total


def _invert_step(flow: RadialFlow, y: np.ndarray, tol: float = 1e-13, max_iter: int = 200):
    """Invert one radial transform by bisecting the scalar radius equation."""
    v = y - flow.z0
    big_r = np.linalg.norm(v, axis=-1)
    alpha, beta = flow.alpha, flow.beta
    # solve r + beta*r/(alpha+r) = R for r >= 0; LHS is increasing in r
    lo = np.zeros_like(big_r)
    hi = np.maximum(big_r, big_r - beta) + alpha + 1.0
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        g = mid + beta * mid / (alpha + mid)
        too_low = g < big_r
        lo = np.where(too_low, mid, lo)
        hi = np.where(too_low, hi, mid)
        if np.max(hi - lo) < tol:
            break
    r = 0.5 * (lo + hi)
    scale = np.where(big_r > 0, r / np.maximum(big_r, 1e-300), 0.0)
    return flow.z0 + scale[..., None] * v


def flow_inverse(flows, y):
    """Invert the full chain (apply inverse transforms in reverse order)."""
    z = np.atleast_2d(np.asarray(y, dtype=np.float64))
    single = np.asarray(y).ndim == 1
    for flow in reversed(flows):
        z = _invert_step(flow, z)
    return z[0] if single else z


def flow_log_density(flows, base_log_pdf, y):
    """log q(y) of the flowed distribution via inversion and change of variables."""
    z0 = flow_inverse(flows, y)
    _, ld = flow_forward(flows, z0)
    return base_log_pdf(np.atleast_2d(z0)) - np.atleast_1d(ld)


def forward_with_tape(flows, z0):
    """Forward pass keeping intermediates needed for the backward pass."""
    z = np.asarray(z0, dtype=np.float64)
    ld_total = np.zeros(z.shape[0])
    tape = []
    for flow in flows:
        z_next, ld, (u, r, h) = _step(flow, z)
        tape.append((u, r, h))
        ld_total += ld
        z = z_next
    return z, ld_total, tape


def backward(flows, tape, grad_out):
    """Backprop grad of sum_s [L_s] through the chain, where each sample's
    objective is L_s = <grad_out contribution at z_T> + sum_t logdet_t.

    grad_out: (S, d) gradient of the terminal term w.r.t. z_T.
    Returns (grad_z0_in, param_grads) with param_grads a list of
    (d z0, d log_alpha, d beta_raw) per flow, summed over samples.
    """
    g = np.asarray(grad_out, dtype=np.float64).copy()
    d = g.shape[1]
    param_grads = [None] * len(flows)
    for t in range(len(flows) - 1, -1, -1):
        flow = flows[t]
        u, r, h = tape[t]
        alpha, beta = flow.alpha, flow.beta
        bh = beta * h
        abh2 = alpha * beta * h ** 2
        safe_r = np.maximum(r, 1e-300)
        u_over_r = u / safe_r[:, None]

        gu = np.einsum("sd,sd->s", g, u)
        # transform VJPs
        vjp_z = (1.0 + bh)[:, None] * g + (beta * (-h ** 2) * gu / safe_r)[:, None] * u
        g_alpha_f = -beta * h ** 2 * gu
        g_beta_f = h * gu

        # log-det partials
        dld_dh = (d - 1) * beta / (1.0 + bh) + 2.0 * alpha * beta * h / (1.0 + abh2)
        dld_dr = -(h ** 2) * dld_dh
        dld_dalpha = beta * h ** 2 / (1.0 + abh2) - h ** 2 * dld_dh
        dld_dbeta = (d - 1) * h / (1.0 + bh) + alpha * h ** 2 / (1.0 + abh2)
        ld_z = dld_dr[:, None] * u_over_r

        g_alpha = float(np.sum(g_alpha_f + dld_dalpha))
        g_beta = float(np.sum(g_beta_f + dld_dbeta))
        g_prev = vjp_z + ld_z
        g_z0 = np.sum(g - g_prev, axis=0)   # translation equivariance: d/dz0 = -(d/dz) + passthrough

        # reparameterization: alpha = exp(log_alpha), beta = softplus(beta_raw) - alpha
        g_log_alpha = alpha * (g_alpha - g_beta)
        g_beta_raw = float(sigmoid(flow.beta_raw)) * g_beta
        param_grads[t] = (g_z0, g_log_alpha, g_beta_raw)
        g = g_prev
    return g, param_grads


def pack_params(flows) -> np.ndarray:
    return np.concatenate([np.concatenate([f.z0, [f.log_alpha, f.beta_raw]]) for f in flows])


def unpack_params(vec: np.ndarray, dim: int, n_flows: int) -> tuple:
    flows = []
    step = dim + 2
    for t in range(n_flows):
        chunk = vec[t * step:(t + 1) * step]
        flows.append(RadialFlow(z0=chunk[:dim].copy(), log_alpha=float(chunk[dim]),
                                beta_raw=float(chunk[dim + 1])))
    return tuple(flows)


def pack_grads(param_grads) -> np.ndarray:
    return np.concatenate([np.concatenate([gz, [ga, gb]]) for gz, ga, gb in param_grads])


class Adam:
    """Plain Adam over a flat parameter vector (ascent when fed gradients to maximize)."""

    def __init__(self, n_params: int, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float | None = None) -> np.ndarray:
        self.t += 1
        lr = self.lr if lr is None else lr
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad ** 2
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params + lr * m_hat / (np.sqrt(v_hat) + self.eps)
