"""The training objective: a meta-prior-weighted evidence lower bound.

    L_w = sum_t [ E_q log p(x_t | d_t, z_t) ] - w * sum_t KL[q_t || p_t]

with a unit-variance Gaussian output convention (constants dropped), the
first term divided by dim(x) and the KL term divided by the total latent
dimension.  Expectations use one reparameterized sample per timestep unless
asked otherwise.  Gradients are exact reverse-mode derivatives of L_w with
respect to every weight, bias, and adaptive-vector coordinate, computed by
the compiled BPTT kernel; `finite_diff_check` verifies them against central
differences coordinate by coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import AdaptiveVectors, NetworkConfig, Parameters
from .numeric import NonFiniteError, RngStream, assert_all_finite

__all__ = ["kl_gaussians", "LossBreakdown", "elbo", "GradientSet",
           "bptt_gradients", "finite_diff_check"]


def kl_gaussians(mu_q, sig_q, mu_p, sig_p) -> np.ndarray:
    """Elementwise KL between diagonal Gaussians, q relative to p:

        log(sig_p / sig_q) + ((mu_p - mu_q)^2 + sig_q^2) / (2 sig_p^2) - 1/2
    """
    mu_q, sig_q = np.asarray(mu_q, dtype=np.float64), np.asarray(sig_q, dtype=np.float64)
    mu_p, sig_p = np.asarray(mu_p, dtype=np.float64), np.asarray(sig_p, dtype=np.float64)
    if np.any(sig_q <= 0) or np.any(sig_p <= 0):
        raise ValueError("standard deviations must be strictly positive")
    return (np.log(sig_p / sig_q)
            + ((mu_p - mu_q) ** 2 + sig_q ** 2) / (2.0 * sig_p ** 2) - 0.5)


@dataclass
class LossBreakdown:
    """The two terms of the bound and their weighted combination.

    kl_steps[t, k] is the KL mass of layer k at timestep t (summed over its
    latent dimensions, before the 1/z_total normalization); index 0 unused.
    """

    likelihood_term: float
    kl_term: float
    kl_steps: np.ndarray
    w: float

    @property
    def total(self) -> float:
        return self.likelihood_term - self.w * self.kl_term


def _single_sample_elbo(params: Parameters, A: AdaptiveVectors,
                        targets: np.ndarray, rng: RngStream | None,
                        eps: np.ndarray | None) -> tuple[np.ndarray, np.ndarray,
                                                         np.ndarray, kernels.BatchTape]:
    cfg = params.config
    T = len(targets)
    tape = kernels.alloc_tape(cfg, 1, T)
    kernels.stack_targets(tape, targets[None, :, :])
    if eps is None:
        eps = np.zeros((T + 1, 1, cfg.n_layers, cfg.z_max))
        if rng is not None:
            for k in range(cfg.n_layers):
                nzk = cfg.z_units[k]
                eps[1:, :, k, :nzk] = rng.normal((T, 1, nzk))
    A_stack = A.data[None, :, :, :, :]
    kernels.forward_batch(params, np.ascontiguousarray(A_stack), eps, 1, T, tape)
    lik, kl = kernels.loss_batch(tape, cfg, 1, T)
    kl_el = kernels.kl_elements(tape.mu_q, tape.lsig_q, tape.mu_p, tape.lsig_p)
    kl_steps = np.sum(kl_el[:, 0], axis=2)  # (T+1, K)
    return lik, kl, kl_steps, tape


def elbo(params: Parameters, A: AdaptiveVectors, targets: np.ndarray, w: float,
         rng: RngStream | None = None, samples_per_step: int = 1,
         eps: np.ndarray | None = None):
    """Evaluate the weighted bound on one sequence; returns (breakdown, tape).

    `targets` has shape (T, D) and must be covered by A.  `eps` pins the
    latent noise (used by replay and the finite-difference verifier);
    otherwise one sample per timestep is drawn from rng per requested sample,
    and the breakdown averages over samples (tape is then a list).
    """
    cfg = params.config
    targets = np.ascontiguousarray(targets, dtype=np.float64)
    if targets.ndim != 2 or targets.shape[1] != cfg.output_dim:
        raise ValueError(f"targets shape {targets.shape} does not match output dim")
    if A.T < len(targets):
        raise ValueError(f"adaptive vectors cover 1..{A.T}, target length {len(targets)}")
    if w < 0:
        raise ValueError("meta-prior w must be >= 0")
    if samples_per_step < 1:
        raise ValueError("samples_per_step must be >= 1")

    liks, kls, kl_step_list, tapes = [], [], [], []
    for _ in range(samples_per_step):
        lik, kl, kl_steps, tape = _single_sample_elbo(params, A, targets, rng, eps)
        liks.append(lik[0])
        kls.append(kl[0])
        kl_step_list.append(kl_steps)
        tapes.append(tape)
    breakdown = LossBreakdown(
        likelihood_term=float(np.mean(liks)),
        kl_term=float(np.mean(kls)),
        kl_steps=np.mean(kl_step_list, axis=0),
        w=float(w),
    )
    if not np.isfinite(breakdown.total):
        raise NonFiniteError("bound evaluated to a non-finite value")
    return breakdown, (tapes[0] if samples_per_step == 1 else tapes)


@dataclass
class GradientSet:
    """Ascent gradients matching Parameters plus the sequence's A slice."""

    params: Parameters      # gradient values in a Parameters-shaped container
    a: np.ndarray           # (T+1, 2, K, z_max)

    def flat(self) -> np.ndarray:
        return self.params.flat


def bptt_gradients(params: Parameters, A: AdaptiveVectors, targets: np.ndarray,
                   w: float, tape) -> GradientSet:
    """Exact gradients of L_w for one sequence from a recorded tape.

    The tape must come from `elbo` on the same inputs; its stored eps are
    reused, giving pathwise derivatives through the reparameterization.  A
    list of tapes (multi-sample elbo) is averaged.
    """
    tapes = tape if isinstance(tape, list) else [tape]
    T = len(targets)
    acc_p: Parameters | None = None
    acc_a: np.ndarray | None = None
    for tp in tapes:
        if tp.T != T or tp.B != 1:
            raise ValueError("tape does not match the target sequence")
        grads, gA = kernels.backward_batch(params, tp, w, 1, T, want_pgrads=True)
        if acc_p is None:
            acc_p, acc_a = grads, gA[0]
        else:
            acc_p.flat += grads.flat
            acc_a += gA[0]
    n = float(len(tapes))
    acc_p.flat /= n
    acc_a /= n
    assert_all_finite(acc_p.flat, "parameter gradients")
    return GradientSet(params=acc_p, a=acc_a)


def _loss_value(params: Parameters, A: AdaptiveVectors, targets: np.ndarray,
                w: float, eps: np.ndarray) -> float:
    breakdown, _ = elbo(params, A, targets, w, eps=eps)
    return breakdown.total


def finite_diff_check(params: Parameters, A: AdaptiveVectors,
                      targets: np.ndarray, w: float,
                      coords_per_block: int = 25,
                      step: float = 1e-5,
                      rng: RngStream | None = None,
                      eps: np.ndarray | None = None) -> dict:
    """Compare analytic BPTT gradients to central finite differences.

    The latent noise is frozen so the bound is a deterministic function of
    (parameters, A).  Samples up to `coords_per_block` valid coordinates per
    parameter block (all of them when the block is small or rng is None) and
    reports the worst relative error per block plus the overall maximum.
    """
    cfg = params.config
    T = len(targets)
    if eps is None:
        draw = rng if rng is not None else RngStream(0)
        eps = np.zeros((T + 1, 1, cfg.n_layers, cfg.z_max))
        for k in range(cfg.n_layers):
            nzk = cfg.z_units[k]
            eps[1:, :, k, :nzk] = draw.normal((T, 1, nzk))

    _, tape = elbo(params, A, targets, w, eps=eps)
    analytic = bptt_gradients(params, A, targets, w, tape)

    mask = params.valid_mask()
    report: dict[str, dict] = {}
    overall = 0.0

    def rel_err(a: float, n: float) -> float:
        scale = max(abs(a), abs(n), 1e-10)
        return abs(a - n) / scale if scale > 1e-10 else 0.0

    def central(fn_plus, fn_minus) -> float:
        return (fn_plus - fn_minus) / (2.0 * step)

    for name, sl in params.blocks.items():
        idx_valid = np.flatnonzero(mask[sl])
        if idx_valid.size == 0:
            continue
        if rng is not None and idx_valid.size > coords_per_block:
            pick = rng.integers(0, idx_valid.size, size=coords_per_block)
            idx_valid = idx_valid[np.asarray(pick)]
        worst = 0.0
        base = sl.start
        for ci in idx_valid:
            flat_i = base + int(ci)
            orig = params.flat[flat_i]
            params.flat[flat_i] = orig + step
            lp = _loss_value(params, A, targets, w, eps)
            params.flat[flat_i] = orig - step
            lm = _loss_value(params, A, targets, w, eps)
            params.flat[flat_i] = orig
            worst = max(worst, rel_err(analytic.params.flat[flat_i], central(lp, lm)))
        report[name] = {"max_rel_err": worst, "checked": int(idx_valid.size)}
        overall = max(overall, worst)

    # adaptive-vector coordinates (timesteps 1..T, valid latent dims)
    a_valid = np.zeros_like(A.data, dtype=bool)
    for k in range(cfg.n_layers):
        a_valid[1:T + 1, :, k, :cfg.z_units[k]] = True
    flat_idx = np.flatnonzero(a_valid.ravel())
    for part, part_name in ((0, "A_mu"), (1, "A_sig")):
        part_mask = np.zeros_like(A.data, dtype=bool)
        part_mask[1:T + 1, part] = a_valid[1:T + 1, part]
        idx = np.flatnonzero(part_mask.ravel())
        if rng is not None and idx.size > coords_per_block:
            pick = rng.integers(0, idx.size, size=coords_per_block)
            idx = idx[np.asarray(pick)]
        worst = 0.0
        flat_a = A.data.ravel()
        flat_g = analytic.a.ravel()
        for ci in idx:
            orig = flat_a[ci]
            flat_a[ci] = orig + step
            lp = _loss_value(params, A, targets, w, eps)
            flat_a[ci] = orig - step
            lm = _loss_value(params, A, targets, w, eps)
            flat_a[ci] = orig
            worst = max(worst, rel_err(flat_g[ci], central(lp, lm)))
        report[part_name] = {"max_rel_err": worst, "checked": int(idx.size)}
        overall = max(overall, worst)

    report["overall"] = {"max_rel_err": overall,
                         "checked": sum(v["checked"] for k, v in report.items()
                                        if k != "overall")}
    return report
