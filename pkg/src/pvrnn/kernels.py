"""Batched rollout and reverse-mode (BPTT) kernels.

These are the hot paths behind training and online regression.  They share
the exact math of the step operations in :mod:`pvrnn.model` (a consistency
test pins the two together) but run as compiled loops over zero-padded
per-layer tensors, batched across sequences.

State arrays are time-major with index 0 holding the zero initial state:
h, d are (T+1, B, K, d_max); latent tensors are (T+1, B, K, z_max); outputs
(T+1, B, D).  Adaptive vectors are (B, T+1, 2, K, z_max).  `zmode[t]` selects
the posterior (0) or prior (1) head as the source of z_t.

The backward kernel produces exact gradients of the weighted lower bound

    L_w = sum_t [ -|x_t - xbar_t|^2 / (2 D) ]  -  w * sum_t KL_t / Z_total

with respect to every weight, bias, and adaptive-vector coordinate, by
walking the unrolled graph from t1 down to t0.  Gradients are ascent
gradients (the bound is maximized).  BPTT over a window [t0, t1] treats the
state at t0-1 as constant, which is exact for gradients with respect to
adaptive vectors inside the window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .model import (LOGSIG_MAX, LOGSIG_MIN, AdaptiveVectors, NetworkConfig,
                    Parameters)

__all__ = ["BatchTape", "alloc_tape", "forward_batch", "loss_batch",
           "backward_batch", "stack_adaptive", "stack_targets"]

Z_POSTERIOR = 0
Z_PRIOR = 1


@njit(cache=True)
def _forward(nd, nz, taus, use_d, use_oz, is_vrnn,
             W_dd, W_dz, W_up, W_dn, b_h,
             Wp_mu, bp_mu, Wp_sig, bp_sig,
             Wq_mu, bq_mu, Wq_sig, bq_sig,
             W_xd, W_xz, b_x, W_du, Wq_mux, Wq_sigx,
             A, u, xobs, eps, zmode, t0, t1,
             h, d, z, mu_q, lsig_q, mu_p, lsig_p, x):
    K = nd.shape[0]
    B = h.shape[1]
    D = x.shape[2]
    for t in range(t0, t1 + 1):
        post = zmode[t] == Z_POSTERIOR
        for b in range(B):
            for k in range(K):
                ndk = nd[k]
                nzk = nz[k]
                tau = taus[k]
                if post:
                    for i in range(nzk):
                        am = bq_mu[k, i] + A[b, t, 0, k, i]
                        asg = bq_sig[k, i] + A[b, t, 1, k, i]
                        if use_d:
                            for j in range(ndk):
                                am += Wq_mu[k, i, j] * d[t - 1, b, k, j]
                                asg += Wq_sig[k, i, j] * d[t - 1, b, k, j]
                        if is_vrnn:
                            for j in range(D):
                                am += Wq_mux[k, i, j] * xobs[t, b, j]
                                asg += Wq_sigx[k, i, j] * xobs[t, b, j]
                        mu_q[t, b, k, i] = math.tanh(am)
                        lsig_q[t, b, k, i] = min(max(asg, LOGSIG_MIN), LOGSIG_MAX)
                for i in range(nzk):
                    am = bp_mu[k, i]
                    asg = bp_sig[k, i]
                    for j in range(ndk):
                        am += Wp_mu[k, i, j] * d[t - 1, b, k, j]
                        asg += Wp_sig[k, i, j] * d[t - 1, b, k, j]
                    mu_p[t, b, k, i] = math.tanh(am)
                    lsig_p[t, b, k, i] = min(max(asg, LOGSIG_MIN), LOGSIG_MAX)
                for i in range(nzk):
                    if post:
                        z[t, b, k, i] = mu_q[t, b, k, i] + math.exp(lsig_q[t, b, k, i]) * eps[t, b, k, i]
                    else:
                        z[t, b, k, i] = mu_p[t, b, k, i] + math.exp(lsig_p[t, b, k, i]) * eps[t, b, k, i]
                for i in range(ndk):
                    acc = b_h[k, i]
                    for j in range(ndk):
                        acc += W_dd[k, i, j] * d[t - 1, b, k, j]
                    for j in range(nzk):
                        acc += W_dz[k, i, j] * z[t, b, k, j]
                    if k + 1 < K:
                        for j in range(nd[k + 1]):
                            acc += W_up[k, i, j] * d[t - 1, b, k + 1, j]
                    if k > 0:
                        for j in range(nd[k - 1]):
                            acc += W_dn[k, i, j] * d[t - 1, b, k - 1, j]
                    if is_vrnn and k == 0:
                        for j in range(D):
                            acc += W_du[i, j] * u[t, b, j]
                    hv = (1.0 - 1.0 / tau) * h[t - 1, b, k, i] + acc / tau
                    h[t, b, k, i] = hv
                    d[t, b, k, i] = math.tanh(hv)
            for m in range(D):
                acc = b_x[m]
                for j in range(nd[0]):
                    acc += W_xd[m, j] * d[t, b, 0, j]
                if use_oz:
                    for j in range(nz[0]):
                        acc += W_xz[m, j] * z[t, b, 0, j]
                x[t, b, m] = math.tanh(acc)


@njit(cache=True)
def _backward(nd, nz, taus, use_d, use_oz, is_vrnn,
              W_dd, W_dz, W_up, W_dn,
              Wp_mu, Wp_sig, Wq_mu, Wq_sig,
              W_xd, W_xz,
              u, xobs, eps, t0, t1,
              h, d, z, mu_q, lsig_q, mu_p, lsig_p, x,
              kl_scale, want_pgrads,
              gW_dd, gW_dz, gW_up, gW_dn, gb_h,
              gWp_mu, gbp_mu, gWp_sig, gbp_sig,
              gWq_mu, gbq_mu, gWq_sig, gbq_sig,
              gW_xd, gW_xz, gb_x, gW_du, gWq_mux, gWq_sigx,
              gA):
    K = nd.shape[0]
    B = h.shape[1]
    D = x.shape[2]
    Dm = d.shape[3]
    Zm = z.shape[3]
    inv_D = 1.0 / D

    gd_cur = np.zeros((B, K, Dm))
    gd_prev = np.zeros((B, K, Dm))
    gh_carry = np.zeros((B, K, Dm))
    gh_buf = np.zeros((B, K, Dm))
    gz = np.zeros((B, K, Zm))

    for t in range(t1, t0 - 1, -1):
        for b in range(B):
            # output head: residual gradient of the scaled squared error
            for m in range(D):
                gx = -(x[t, b, m] - xobs[t, b, m]) * inv_D
                go = gx * (1.0 - x[t, b, m] * x[t, b, m])
                if want_pgrads:
                    gb_x[m] += go
                    for j in range(nd[0]):
                        gW_xd[m, j] += go * d[t, b, 0, j]
                    if use_oz:
                        for j in range(nz[0]):
                            gW_xz[m, j] += go * z[t, b, 0, j]
                for j in range(nd[0]):
                    gd_cur[b, 0, j] += W_xd[m, j] * go
                if use_oz:
                    for j in range(nz[0]):
                        gz[b, 0, j] += W_xz[m, j] * go
            for k in range(K):
                ndk = nd[k]
                nzk = nz[k]
                tau = taus[k]
                for i in range(ndk):
                    gh_buf[b, k, i] = (gd_cur[b, k, i]
                                       * (1.0 - d[t, b, k, i] * d[t, b, k, i])
                                       + gh_carry[b, k, i])
                for i in range(ndk):
                    gu = gh_buf[b, k, i] / tau
                    if want_pgrads:
                        gb_h[k, i] += gu
                        for j in range(ndk):
                            gW_dd[k, i, j] += gu * d[t - 1, b, k, j]
                        for j in range(nzk):
                            gW_dz[k, i, j] += gu * z[t, b, k, j]
                        if k + 1 < K:
                            for j in range(nd[k + 1]):
                                gW_up[k, i, j] += gu * d[t - 1, b, k + 1, j]
                        if k > 0:
                            for j in range(nd[k - 1]):
                                gW_dn[k, i, j] += gu * d[t - 1, b, k - 1, j]
                        if is_vrnn and k == 0:
                            for j in range(D):
                                gW_du[i, j] += gu * u[t, b, j]
                    for j in range(ndk):
                        gd_prev[b, k, j] += W_dd[k, i, j] * gu
                    if k + 1 < K:
                        for j in range(nd[k + 1]):
                            gd_prev[b, k + 1, j] += W_up[k, i, j] * gu
                    if k > 0:
                        for j in range(nd[k - 1]):
                            gd_prev[b, k - 1, j] += W_dn[k, i, j] * gu
                    for j in range(nzk):
                        gz[b, k, j] += W_dz[k, i, j] * gu
                for i in range(nzk):
                    mq = mu_q[t, b, k, i]
                    lq = lsig_q[t, b, k, i]
                    mp = mu_p[t, b, k, i]
                    lp = lsig_p[t, b, k, i]
                    sq = math.exp(lq)
                    sp2 = math.exp(2.0 * lp)
                    dmu = mq - mp
                    gzv = gz[b, k, i]
                    # reparameterized z plus the analytic KL partials
                    gmu_q = gzv - kl_scale * dmu / sp2
                    glq = gzv * sq * eps[t, b, k, i] - kl_scale * (sq * sq / sp2 - 1.0)
                    gmu_p = kl_scale * dmu / sp2
                    glp = -kl_scale * (1.0 - (dmu * dmu + sq * sq) / sp2)
                    gpre_qmu = gmu_q * (1.0 - mq * mq)
                    gpre_qsig = glq if (LOGSIG_MIN < lq < LOGSIG_MAX) else 0.0
                    gA[b, t, 0, k, i] += gpre_qmu
                    gA[b, t, 1, k, i] += gpre_qsig
                    gpre_pmu = gmu_p * (1.0 - mp * mp)
                    gpre_psig = glp if (LOGSIG_MIN < lp < LOGSIG_MAX) else 0.0
                    if want_pgrads:
                        gbq_mu[k, i] += gpre_qmu
                        gbq_sig[k, i] += gpre_qsig
                        gbp_mu[k, i] += gpre_pmu
                        gbp_sig[k, i] += gpre_psig
                        if use_d:
                            for j in range(ndk):
                                gWq_mu[k, i, j] += gpre_qmu * d[t - 1, b, k, j]
                                gWq_sig[k, i, j] += gpre_qsig * d[t - 1, b, k, j]
                        if is_vrnn:
                            for j in range(D):
                                gWq_mux[k, i, j] += gpre_qmu * xobs[t, b, j]
                                gWq_sigx[k, i, j] += gpre_qsig * xobs[t, b, j]
                        for j in range(ndk):
                            gWp_mu[k, i, j] += gpre_pmu * d[t - 1, b, k, j]
                            gWp_sig[k, i, j] += gpre_psig * d[t - 1, b, k, j]
                    if use_d:
                        for j in range(ndk):
                            gd_prev[b, k, j] += (Wq_mu[k, i, j] * gpre_qmu
                                                 + Wq_sig[k, i, j] * gpre_qsig)
                    for j in range(ndk):
                        gd_prev[b, k, j] += (Wp_mu[k, i, j] * gpre_pmu
                                             + Wp_sig[k, i, j] * gpre_psig)
                    gz[b, k, i] = 0.0
                for i in range(ndk):
                    gh_carry[b, k, i] = (1.0 - 1.0 / tau) * gh_buf[b, k, i]
        tmp = gd_cur
        gd_cur = gd_prev
        gd_prev = tmp
        gd_prev[:, :, :] = 0.0


# ---------------------------------------------------------------------------
# Python-side wrappers
# ---------------------------------------------------------------------------

@dataclass
class BatchTape:
    """Batched rollout tape produced by :func:`forward_batch`."""

    T: int
    B: int
    h: np.ndarray
    d: np.ndarray
    z: np.ndarray
    eps: np.ndarray
    mu_q: np.ndarray
    lsig_q: np.ndarray
    mu_p: np.ndarray
    lsig_p: np.ndarray
    x: np.ndarray
    zmode: np.ndarray
    xobs: np.ndarray
    u: np.ndarray


def alloc_tape(config: NetworkConfig, B: int, T: int) -> BatchTape:
    K, Dm, Zm, D = config.n_layers, config.d_max, config.z_max, config.output_dim
    zs = (T + 1, B, K, Zm)
    return BatchTape(
        T=T, B=B,
        h=np.zeros((T + 1, B, K, Dm)), d=np.zeros((T + 1, B, K, Dm)),
        z=np.zeros(zs), eps=np.zeros(zs),
        mu_q=np.zeros(zs), lsig_q=np.zeros(zs),
        mu_p=np.zeros(zs), lsig_p=np.zeros(zs),
        x=np.zeros((T + 1, B, D)),
        zmode=np.zeros(T + 1, dtype=np.int8),
        xobs=np.zeros((T + 1, B, D)),
        u=np.zeros((T + 1, B, D)),
    )


def stack_targets(tape: BatchTape, targets: np.ndarray) -> None:
    """Load (B, T, D) targets into the tape's time-major buffers."""
    T = tape.T
    tape.xobs[1:T + 1] = np.transpose(targets, (1, 0, 2))
    tape.u[1] = 0.0
    tape.u[2:T + 1] = tape.xobs[1:T]


def stack_adaptive(adaptive: list[AdaptiveVectors]) -> np.ndarray:
    """Stack per-sequence adaptive vectors into one (B, T+1, 2, K, Zm) array."""
    return np.ascontiguousarray(np.stack([A.data for A in adaptive], axis=0))


def _kernel_params(p: Parameters):
    cfg = p.config
    if cfg.mode == "vrnn":
        W_du, Wq_mux, Wq_sigx = p.W_du, p.Wq_mux, p.Wq_sigx
    else:
        # placeholders with the right ranks; never read when is_vrnn is 0
        W_du = np.zeros((1, 1))
        Wq_mux = np.zeros((1, 1, 1))
        Wq_sigx = np.zeros((1, 1, 1))
    return (p.W_dd, p.W_dz, p.W_up, p.W_dn, p.b_h,
            p.Wp_mu, p.bp_mu, p.Wp_sig, p.bp_sig,
            p.Wq_mu, p.bq_mu, p.Wq_sig, p.bq_sig,
            p.W_xd, p.W_xz, p.b_x, W_du, Wq_mux, Wq_sigx)


def forward_batch(params: Parameters, A_stack: np.ndarray, eps: np.ndarray,
                  t0: int, t1: int, tape: BatchTape,
                  zmode_value: int = Z_POSTERIOR) -> BatchTape:
    """Run the compiled forward pass over timesteps [t0, t1] of `tape`.

    The caller owns the tape (state at t0-1 is taken as found, so regression
    windows can continue from a cached prefix).  `eps` must cover the tape's
    full time axis; `zmode_value` applies to every step in the range.
    """
    cfg = params.config
    tape.eps[t0:t1 + 1] = eps[t0:t1 + 1]
    tape.zmode[t0:t1 + 1] = zmode_value
    _forward(cfg.d_units, cfg.z_units, cfg.taus,
             cfg.posterior_uses_d, cfg.output_uses_z, cfg.mode == "vrnn",
             *_kernel_params(params),
             A_stack, tape.u, tape.xobs, tape.eps, tape.zmode,
             t0, t1,
             tape.h, tape.d, tape.z, tape.mu_q, tape.lsig_q,
             tape.mu_p, tape.lsig_p, tape.x)
    return tape


def loss_batch(tape: BatchTape, config: NetworkConfig, t0: int, t1: int
               ) -> tuple[np.ndarray, np.ndarray]:
    """Per-sequence (likelihood_term, kl_term) over [t0, t1].

    likelihood_term = -sum_t |x - xbar|^2 / (2 D); kl_term = sum KL / Z_total.
    The meta-prior enters only in the combined bound, total = lik - w * kl.
    Assumes all steps in range are posterior-driven.  Padded latent entries
    hold (mu=0, log sigma=0) on both heads and contribute exactly zero KL.
    """
    if np.any(tape.zmode[t0:t1 + 1] != Z_POSTERIOR):
        raise ValueError("loss is defined over posterior-driven steps only")
    D = tape.x.shape[2]
    r = tape.x[t0:t1 + 1] - tape.xobs[t0:t1 + 1]
    lik = -0.5 * np.sum(r * r, axis=(0, 2)) / D
    kl = kl_elements(tape.mu_q[t0:t1 + 1], tape.lsig_q[t0:t1 + 1],
                     tape.mu_p[t0:t1 + 1], tape.lsig_p[t0:t1 + 1])
    return lik, np.sum(kl, axis=(0, 2, 3)) / config.z_total


def kl_elements(mu_q, lsig_q, mu_p, lsig_p) -> np.ndarray:
    """Elementwise Gaussian KL(q || p) from means and log-stddevs."""
    sq2 = np.exp(2.0 * lsig_q)
    sp2 = np.exp(2.0 * lsig_p)
    return lsig_p - lsig_q + ((mu_p - mu_q) ** 2 + sq2) / (2.0 * sp2) - 0.5


def backward_batch(params: Parameters, tape: BatchTape, w: float,
                   t0: int, t1: int, want_pgrads: bool = True
                   ) -> tuple[Parameters, np.ndarray]:
    """Exact ascent gradients of L_w over [t0, t1].

    Returns (grads as a Parameters-shaped container, gA stack).  When
    `want_pgrads` is off only the adaptive-vector gradients are accumulated
    (the regression hot path).
    """
    cfg = params.config
    if np.any(tape.zmode[t0:t1 + 1] != Z_POSTERIOR):
        raise ValueError("BPTT range must be posterior-driven")
    grads = Parameters(cfg)
    g = grads.views
    if cfg.mode == "vrnn":
        gW_du, gWq_mux, gWq_sigx = g["W_du"], g["Wq_mux"], g["Wq_sigx"]
    else:
        gW_du = np.zeros((1, 1))
        gWq_mux = np.zeros((1, 1, 1))
        gWq_sigx = np.zeros((1, 1, 1))
    gA = np.zeros((tape.B, tape.T + 1, 2, cfg.n_layers, cfg.z_max))
    kl_scale = float(w) / cfg.z_total
    _backward(cfg.d_units, cfg.z_units, cfg.taus,
              cfg.posterior_uses_d, cfg.output_uses_z, cfg.mode == "vrnn",
              params.W_dd, params.W_dz, params.W_up, params.W_dn,
              params.Wp_mu, params.Wp_sig, params.Wq_mu, params.Wq_sig,
              params.W_xd, params.W_xz,
              tape.u, tape.xobs, tape.eps, t0, t1,
              tape.h, tape.d, tape.z, tape.mu_q, tape.lsig_q,
              tape.mu_p, tape.lsig_p, tape.x,
              kl_scale, want_pgrads,
              g["W_dd"], g["W_dz"], g["W_up"], g["W_dn"], g["b_h"],
              g["Wp_mu"], g["bp_mu"], g["Wp_sig"], g["bp_sig"],
              g["Wq_mu"], g["bq_mu"], g["Wq_sig"], g["bq_sig"],
              g["W_xd"], g["W_xz"], g["b_x"], gW_du, gWq_mux, gWq_sigx,
              gA)
    return grads, gA
