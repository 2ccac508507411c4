"""Evaluation metrics: divergence statistics of regenerated sequences,
n-gram distribution KL, the largest Lyapunov exponent of the learned
dynamics, and k-step prediction error.

All functions are pure over immutable inputs.  Discrete sequences are
compared after thresholding network outputs at 0, the image of the 0.5
symbol midpoint under the declared affine target map (0/1 -> -0.9/+0.9).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datagen import targets_to_symbols
from .model import (LOGSIG_MAX, LOGSIG_MIN, NetworkConfig, Parameters,
                    RolloutState, random_bootstrap, rollout_prior)
from .numeric import RngStream

__all__ = [
    "diverging_step",
    "average_diverging_step",
    "vd_from_outputs",
    "variance_of_divergence",
    "NgramDistribution",
    "ngram_kl",
    "one_step_map",
    "step_jacobian",
    "jacobian_chain",
    "le_from_jacobians",
    "lyapunov_largest",
    "prediction_mse",
    "mean_prior_sigma",
]

CONTINUOUS_DIVERGENCE_THRESHOLD = 0.01


def diverging_step(target: np.ndarray, generated: np.ndarray,
                   mode: str = "discrete",
                   threshold: float = CONTINUOUS_DIVERGENCE_THRESHOLD) -> int:
    """1-based index of the first divergence; the length if none.

    Discrete mode discretizes both arguments and reports the first symbol
    mismatch.  Continuous mode reports the first step whose per-step MSE
    over dimensions exceeds `threshold`.
    """
    target = np.asarray(target, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    if target.shape != generated.shape:
        raise ValueError(f"length mismatch: {target.shape} vs {generated.shape}")
    T = len(target)
    if mode == "discrete":
        a = targets_to_symbols(target)
        b = targets_to_symbols(generated)
        mism = np.nonzero(np.any(a != b, axis=-1) if a.ndim > 1 else a != b)[0]
        return int(mism[0]) + 1 if mism.size else T
    if mode == "continuous":
        mse = np.mean((target - generated) ** 2, axis=-1)
        over = np.nonzero(mse > threshold)[0]
        return int(over[0]) + 1 if over.size else T
    raise ValueError(f"unknown mode {mode!r}")


def average_diverging_step(targets: list[np.ndarray],
                           regenerations: list[list[np.ndarray]],
                           mode: str = "discrete",
                           threshold: float = CONTINUOUS_DIVERGENCE_THRESHOLD) -> float:
    """Mean diverging step over targets and their repeated regenerations."""
    if len(targets) != len(regenerations):
        raise ValueError("one regeneration list per target required")
    steps = []
    for tgt, regens in zip(targets, regenerations):
        for gen in regens:
            steps.append(diverging_step(tgt, gen, mode=mode, threshold=threshold))
    return float(np.mean(steps))


def vd_from_outputs(outputs: np.ndarray) -> float:
    """Across-run variance of generated outputs, averaged over time and dims.

    `outputs` has shape (runs, T, D); runs must be >= 2.  Uses the unbiased
    (ddof=1) variance across runs.
    """
    outputs = np.asarray(outputs, dtype=np.float64)
    if outputs.ndim != 3 or outputs.shape[0] < 2:
        raise ValueError("need (runs, T, D) outputs with at least 2 runs")
    return float(np.mean(np.var(outputs, axis=0, ddof=1)))


def variance_of_divergence(params: Parameters,
                           bootstrap: tuple[np.ndarray, np.ndarray],
                           T: int, runs: int = 50,
                           rng: RngStream | None = None) -> float:
    """Diversity of repeated prior-driven regenerations from one fixed
    first-step adaptive pair, measured on pre-discretization outputs."""
    if runs < 2:
        raise ValueError("need at least 2 runs")
    rng = rng if rng is not None else RngStream(0)
    outs = np.stack([
        rollout_prior(params, T, rng=rng, bootstrap=bootstrap).x[1:]
        for _ in range(runs)
    ])
    return vd_from_outputs(outs)


# ---------------------------------------------------------------------------
# n-gram distributions
# ---------------------------------------------------------------------------

@dataclass
class NgramDistribution:
    """Empirical distribution of length-n symbol windows."""

    n: int
    counts: dict
    total: int

    @classmethod
    def from_symbols(cls, symbols: np.ndarray, n: int) -> "NgramDistribution":
        symbols = np.asarray(symbols).ravel()
        if len(symbols) < n:
            raise ValueError(f"sequence of length {len(symbols)} has no {n}-grams")
        counts: dict = {}
        for i in range(len(symbols) - n + 1):
            key = tuple(int(v) for v in symbols[i:i + n])
            counts[key] = counts.get(key, 0) + 1
        return cls(n=n, counts=counts, total=len(symbols) - n + 1)

    def prob(self, gram: tuple) -> float:
        return self.counts.get(gram, 0) / self.total

    @property
    def support_size(self) -> int:
        return len(self.counts)

    def items(self):
        return self.counts.items()


def ngram_kl(reference, generated, n: int = 12) -> float:
    """KL(reference || generated) over length-n symbol windows.

    `reference` may be one symbol sequence or a list of sequences (which are
    concatenated).  Windows present in the reference but absent from the
    generated distribution receive the floor probability 1 / (2 N_gen),
    where N_gen is the generated window count; no renormalization is applied.
    """
    if isinstance(reference, (list, tuple)):
        reference = np.concatenate([np.asarray(r).ravel() for r in reference])
    ref = NgramDistribution.from_symbols(reference, n)
    gen = NgramDistribution.from_symbols(generated, n)
    floor = 1.0 / (2.0 * gen.total)
    kl = 0.0
    for gram, count in ref.items():
        p = count / ref.total
        q = gen.prob(gram)
        kl += p * math.log(p / (q if q > 0.0 else floor))
    return kl


# ---------------------------------------------------------------------------
# Largest Lyapunov exponent
# ---------------------------------------------------------------------------

def one_step_map(params: Parameters, z: np.ndarray, d_prev: np.ndarray,
                 eps_next: float | np.ndarray = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """The generative one-step map (z_t, d_{t-1}) -> (z_{t+1}, d_t) for a
    single-layer network; `eps_next` is the (frozen) noise entering z_{t+1}.

    Outputs are excluded from the state: they never feed back into the
    dynamics along the prior path.
    """
    cfg = params.config
    if cfg.n_layers != 1:
        raise ValueError("the dynamics map is defined for single-layer networks")
    nd, nz = cfg.d_units[0], cfg.z_units[0]
    tau = cfg.taus[0]
    W_dd = params.W_dd[0, :nd, :nd]
    W_dz = params.W_dz[0, :nd, :nz]
    b = params.b_h[0, :nd]
    h_prev = np.arctanh(np.clip(d_prev, -1 + 1e-15, 1 - 1e-15))
    h = (1.0 - 1.0 / tau) * h_prev + (W_dd @ d_prev + W_dz @ z + b) / tau
    d = np.tanh(h)
    mu = np.tanh(params.Wp_mu[0, :nz, :nd] @ d + params.bp_mu[0, :nz])
    lsig = np.clip(params.Wp_sig[0, :nz, :nd] @ d + params.bp_sig[0, :nz],
                   LOGSIG_MIN, LOGSIG_MAX)
    z_next = mu + np.exp(lsig) * eps_next
    return z_next, d


def step_jacobian(params: Parameters, z: np.ndarray, d_prev: np.ndarray,
                  eps_next: float | np.ndarray = 0.0) -> np.ndarray:
    """Analytic Jacobian of :func:`one_step_map`, state ordered [z; d]."""
    cfg = params.config
    if cfg.n_layers != 1:
        raise ValueError("the dynamics map is defined for single-layer networks")
    nd, nz = int(cfg.d_units[0]), int(cfg.z_units[0])
    tau = cfg.taus[0]
    W_dd = params.W_dd[0, :nd, :nd]
    W_dz = params.W_dz[0, :nd, :nz]

    h_prev = np.arctanh(np.clip(d_prev, -1 + 1e-15, 1 - 1e-15))
    h = (1.0 - 1.0 / tau) * h_prev + (W_dd @ d_prev + W_dz @ z + params.b_h[0, :nd]) / tau
    d = np.tanh(h)
    sech2 = 1.0 - d * d
    # d(h_prev)/d(d_prev) = 1 / (1 - d_prev^2): the leak term's derivative
    dd_dz = sech2[:, None] * (W_dz / tau)
    dd_dd = sech2[:, None] * ((1.0 - 1.0 / tau) * np.diag(1.0 / (1.0 - d_prev ** 2))
                              + W_dd / tau)

    pre_mu = params.Wp_mu[0, :nz, :nd] @ d + params.bp_mu[0, :nz]
    mu = np.tanh(pre_mu)
    pre_sig = params.Wp_sig[0, :nz, :nd] @ d + params.bp_sig[0, :nz]
    lsig = np.clip(pre_sig, LOGSIG_MIN, LOGSIG_MAX)
    sig = np.exp(lsig)
    clamp_open = (pre_sig > LOGSIG_MIN) & (pre_sig < LOGSIG_MAX)
    eps_arr = np.broadcast_to(np.asarray(eps_next, dtype=np.float64), (nz,))
    dz_dd = ((1.0 - mu * mu)[:, None] * params.Wp_mu[0, :nz, :nd]
             + (np.where(clamp_open, eps_arr * sig, 0.0))[:, None]
             * params.Wp_sig[0, :nz, :nd])

    J = np.zeros((nz + nd, nz + nd))
    J[:nz, :nz] = dz_dd @ dd_dz
    J[:nz, nz:] = dz_dd @ dd_dd
    J[nz:, :nz] = dd_dz
    J[nz:, nz:] = dd_dd
    return J


def jacobian_chain(params: Parameters, tape: RolloutState):
    """Yield per-timestep Jacobians along a generated orbit.

    At orbit step t the Jacobian linearizes (z_t, d_{t-1}) -> (z_{t+1}, d_t)
    with the orbit's frozen noise; t runs over 1..T-1.
    """
    cfg = params.config
    nd, nz = int(cfg.d_units[0]), int(cfg.z_units[0])
    for t in range(1, tape.T):
        yield step_jacobian(params,
                            tape.z[t, 0, :nz],
                            tape.d[t - 1, 0, :nd],
                            tape.eps[t + 1, 0, :nz])


def le_from_jacobians(chain, dim: int | None = None,
                      r0: np.ndarray | None = None,
                      transient: int = 0) -> float:
    """Largest Lyapunov exponent from a Jacobian chain.

    Follows one direction vector through the chain, renormalizing each step
    and averaging log growth after discarding `transient` steps.
    """
    le = 0.0
    count = 0
    r = None
    for t, J in enumerate(chain, start=1):
        if r is None:
            n = J.shape[0] if dim is None else dim
            r = np.zeros(n)
            if r0 is None:
                r[0] = 1.0
            else:
                r = np.asarray(r0, dtype=np.float64).copy()
                r /= np.linalg.norm(r)
        y = J @ r
        norm = float(np.linalg.norm(y))
        if norm == 0.0:
            raise ValueError(f"Jacobian chain collapsed the direction vector at step {t}")
        r = y / norm
        if t > transient:
            le += math.log(norm)
            count += 1
    if count == 0:
        raise ValueError("chain too short for the requested transient")
    return le / count


def lyapunov_largest(params: Parameters, T: int = 50_000,
                     noise: str = "sample", rng: RngStream | None = None,
                     transient: int = 1_000,
                     bootstrap: tuple[np.ndarray, np.ndarray] | None = None) -> float:
    """Largest Lyapunov exponent of the prior-path dynamics.

    Generates a free-run orbit of `T` steps (random first-step adaptive pair
    unless one is given), builds analytic Jacobians along it, and averages
    the log growth of a tracked direction after the transient.  noise
    "sample" draws the orbit's latent noise; "zero" pins eps = 0.
    """
    cfg = params.config
    if cfg.n_layers != 1:
        raise ValueError("Lyapunov analysis supports single-layer networks only")
    if noise not in ("sample", "zero"):
        raise ValueError(f"unknown noise mode {noise!r}")
    rng = rng if rng is not None else RngStream(0)
    boot = bootstrap if bootstrap is not None else random_bootstrap(cfg, rng)
    tape = rollout_prior(params, T, rng=rng, bootstrap=boot,
                         eps_mode="sample" if noise == "sample" else "zero")
    return le_from_jacobians(jacobian_chain(params, tape), transient=transient)


# ---------------------------------------------------------------------------
# Prediction error and latent statistics
# ---------------------------------------------------------------------------

def prediction_mse(forecasts: np.ndarray, targets: np.ndarray, k: int) -> float:
    """MSE of k-step-ahead forecasts against the aligned targets.

    `forecasts[t1, j]` predicts step t1 + j + 1 (1-based); rows with NaN
    (never emitted) are skipped.
    """
    if not 1 <= k <= forecasts.shape[1]:
        raise ValueError(f"no forecasts recorded for lookahead {k}")
    targets = np.asarray(targets, dtype=np.float64)
    errs = []
    for t1 in range(1, forecasts.shape[0]):
        s = t1 + k - 1  # 0-based target index of the predicted step
        if s >= len(targets) or np.any(np.isnan(forecasts[t1, k - 1])):
            continue
        errs.append((forecasts[t1, k - 1] - targets[s]) ** 2)
    if not errs:
        raise ValueError("forecasts and targets do not overlap")
    return float(np.mean(errs))


def mean_prior_sigma(tapes: list[RolloutState], config: NetworkConfig) -> float:
    """Mean prior standard deviation over tapes, valid latent entries only."""
    vals = []
    for tape in tapes:
        for k in range(config.n_layers):
            nzk = config.z_units[k]
            vals.append(np.exp(tape.lsig_p[1:, k, :nzk]).ravel())
    return float(np.mean(np.concatenate(vals)))
