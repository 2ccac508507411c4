"""The generative/inference network: a hierarchical leaky-integrator RNN
whose layers each carry Gaussian latent units.

Layers are ordered fast to slow.  Per layer k with time constant tau_k the
deterministic state follows

    h_t^k = (1 - 1/tau_k) h_{t-1}^k
            + (1/tau_k) (W_dd d_{t-1}^k + W_dz z_t^k
                         + W_up d_{t-1}^{k+1} + W_dn d_{t-1}^{k-1} + b)
    d_t^k = tanh(h_t^k)

with the neighbor terms dropped at the top/bottom of the stack.  The prior
over z_t conditions on d_{t-1}; the approximate posterior conditions on
d_{t-1} plus a trainable per-sequence, per-timestep adaptive vector pair
(a_mu, a_sig) which is the only route through which observations reach the
network.  The "vrnn" mode instead feeds the previous observation into the
bottom layer and conditions its posterior on the current observation; it is
the baseline the adaptive-vector model is compared against.

Parameters live in zero-padded per-layer tensors viewing one flat float64
buffer, so the optimizer and checkpointing treat the whole network as a
single vector.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .numeric import NonFiniteError, RngStream, assert_all_finite

__all__ = [
    "LOGSIG_MIN",
    "LOGSIG_MAX",
    "LayerSpec",
    "NetworkConfig",
    "Parameters",
    "init_parameters",
    "AdaptiveVectors",
    "random_bootstrap",
    "RolloutState",
    "mtrnn_step",
    "prior_params",
    "posterior_params",
    "reparameterize",
    "output_map",
    "rollout_posterior",
    "rollout_prior",
    "vrnn_rollout",
]

# log-sigma is clamped before exponentiation to keep sigma in a sane range
LOGSIG_MIN = -10.0
LOGSIG_MAX = 5.0


@dataclass(frozen=True)
class LayerSpec:
    d_units: int
    z_units: int
    tau: float

    def __post_init__(self):
        if self.d_units < 1 or self.z_units < 1:
            raise ValueError("layers need at least one d unit and one z unit")
        if self.tau < 1.0:
            raise ValueError("time constant must be >= 1 (1 disables the leak)")


@dataclass(frozen=True)
class NetworkConfig:
    """Topology and mode switches; fast layer first, slow layer last."""

    layers: tuple[LayerSpec, ...]
    output_dim: int
    mode: str = "pvrnn"
    posterior_uses_d: bool = True
    output_uses_z: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 1 <= len(self.layers) <= 3:
            raise ValueError("supported layer counts are 1 to 3")
        if self.output_dim < 1:
            raise ValueError("output_dim must be >= 1")
        if self.mode not in ("pvrnn", "vrnn"):
            raise ValueError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "layers",
                           tuple(l if isinstance(l, LayerSpec) else LayerSpec(*l)
                                 for l in self.layers))

    # derived geometry -----------------------------------------------------
    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def d_units(self) -> np.ndarray:
        return np.array([l.d_units for l in self.layers], dtype=np.int64)

    @property
    def z_units(self) -> np.ndarray:
        return np.array([l.z_units for l in self.layers], dtype=np.int64)

    @property
    def taus(self) -> np.ndarray:
        return np.array([l.tau for l in self.layers], dtype=np.float64)

    @property
    def d_max(self) -> int:
        return int(self.d_units.max())

    @property
    def z_max(self) -> int:
        return int(self.z_units.max())

    @property
    def z_total(self) -> int:
        return int(self.z_units.sum())

    def to_dict(self) -> dict:
        return {
            "layers": [[l.d_units, l.z_units, l.tau] for l in self.layers],
            "output_dim": self.output_dim,
            "mode": self.mode,
            "posterior_uses_d": self.posterior_uses_d,
            "output_uses_z": self.output_uses_z,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(layers=tuple(LayerSpec(int(a), int(b), float(c))
                                for a, b, c in d["layers"]),
                   output_dim=int(d["output_dim"]),
                   mode=d.get("mode", "pvrnn"),
                   posterior_uses_d=bool(d.get("posterior_uses_d", True)),
                   output_uses_z=bool(d.get("output_uses_z", True)),
                   seed=int(d.get("seed", 0)))


def _param_specs(cfg: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    K, Dm, Zm, D = cfg.n_layers, cfg.d_max, cfg.z_max, cfg.output_dim
    specs = [
        ("W_dd", (K, Dm, Dm)),
        ("W_dz", (K, Dm, Zm)),
        ("W_up", (K, Dm, Dm)),
        ("W_dn", (K, Dm, Dm)),
        ("b_h", (K, Dm)),
        ("Wp_mu", (K, Zm, Dm)),
        ("bp_mu", (K, Zm)),
        ("Wp_sig", (K, Zm, Dm)),
        ("bp_sig", (K, Zm)),
        ("Wq_mu", (K, Zm, Dm)),
        ("bq_mu", (K, Zm)),
        ("Wq_sig", (K, Zm, Dm)),
        ("bq_sig", (K, Zm)),
        ("W_xd", (D, Dm)),
        ("W_xz", (D, Zm)),
        ("b_x", (D,)),
    ]
    if cfg.mode == "vrnn":
        specs += [
            ("W_du", (Dm, D)),
            ("Wq_mux", (K, Zm, D)),
            ("Wq_sigx", (K, Zm, D)),
        ]
    return specs


class Parameters:
    """All weights and biases as named zero-padded views on one flat vector."""

    def __init__(self, config: NetworkConfig, flat: np.ndarray | None = None):
        self.config = config
        self._specs = _param_specs(config)
        sizes = [int(np.prod(shape)) for _, shape in self._specs]
        total = sum(sizes)
        if flat is None:
            flat = np.zeros(total, dtype=np.float64)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (total,):
            raise ValueError(f"flat parameter vector has size {flat.size}, expected {total}")
        self.flat = flat
        self.blocks: dict[str, slice] = {}
        self.views: dict[str, np.ndarray] = {}
        offset = 0
        for (name, shape), size in zip(self._specs, sizes):
            sl = slice(offset, offset + size)
            self.blocks[name] = sl
            self.views[name] = self.flat[sl].reshape(shape)
            offset += size

    def __getattr__(self, name: str):
        views = self.__dict__.get("views")
        if views is not None and name in views:
            return views[name]
        raise AttributeError(name)

    @property
    def size(self) -> int:
        return self.flat.size

    def copy(self) -> "Parameters":
        return Parameters(self.config, self.flat.copy())

    def hash(self) -> str:
        return hashlib.sha256(self.flat.tobytes()).hexdigest()

    def zeros_like_flat(self) -> np.ndarray:
        return np.zeros_like(self.flat)

    def valid_mask(self) -> np.ndarray:
        """Boolean flat mask of coordinates that exist in the real topology."""
        cfg = self.config
        nd, nz = cfg.d_units, cfg.z_units
        K, D = cfg.n_layers, cfg.output_dim
        mask = Parameters(cfg)
        use_d = cfg.posterior_uses_d
        for k in range(K):
            mask.W_dd[k, :nd[k], :nd[k]] = 1
            mask.W_dz[k, :nd[k], :nz[k]] = 1
            if k + 1 < K:
                mask.W_up[k, :nd[k], :nd[k + 1]] = 1
            if k > 0:
                mask.W_dn[k, :nd[k], :nd[k - 1]] = 1
            mask.b_h[k, :nd[k]] = 1
            mask.Wp_mu[k, :nz[k], :nd[k]] = 1
            mask.Wp_sig[k, :nz[k], :nd[k]] = 1
            mask.bp_mu[k, :nz[k]] = 1
            mask.bp_sig[k, :nz[k]] = 1
            if use_d:
                mask.Wq_mu[k, :nz[k], :nd[k]] = 1
                mask.Wq_sig[k, :nz[k], :nd[k]] = 1
            mask.bq_mu[k, :nz[k]] = 1
            mask.bq_sig[k, :nz[k]] = 1
            if cfg.mode == "vrnn":
                mask.Wq_mux[k, :nz[k], :] = 1
                mask.Wq_sigx[k, :nz[k], :] = 1
        mask.W_xd[:, :nd[0]] = 1
        if cfg.output_uses_z:
            mask.W_xz[:, :nz[0]] = 1
        mask.b_x[:] = 1
        if cfg.mode == "vrnn":
            mask.W_du[:nd[0], :] = 1
        return mask.flat.astype(bool)


def _glorot(view: np.ndarray, fan_in: int, fan_out: int, rng: RngStream) -> None:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    view[...] = (2.0 * rng.random(view.shape) - 1.0) * limit


def init_parameters(config: NetworkConfig, rng: RngStream | None = None) -> Parameters:
    """Glorot-uniform weights over the real (unpadded) fans; zero biases.

    Zero log-sigma biases start both heads at sigma = 1, and the random prior
    head makes the untrained generative model behave as a random process.
    """
    rng = rng if rng is not None else RngStream(config.seed)
    p = Parameters(config)
    nd, nz, K, D = config.d_units, config.z_units, config.n_layers, config.output_dim
    for k in range(K):
        _glorot(p.W_dd[k, :nd[k], :nd[k]], nd[k], nd[k], rng)
        _glorot(p.W_dz[k, :nd[k], :nz[k]], nz[k], nd[k], rng)
        if k + 1 < K:
            _glorot(p.W_up[k, :nd[k], :nd[k + 1]], nd[k + 1], nd[k], rng)
        if k > 0:
            _glorot(p.W_dn[k, :nd[k], :nd[k - 1]], nd[k - 1], nd[k], rng)
        _glorot(p.Wp_mu[k, :nz[k], :nd[k]], nd[k], nz[k], rng)
        _glorot(p.Wp_sig[k, :nz[k], :nd[k]], nd[k], nz[k], rng)
        if config.posterior_uses_d:
            _glorot(p.Wq_mu[k, :nz[k], :nd[k]], nd[k], nz[k], rng)
            _glorot(p.Wq_sig[k, :nz[k], :nd[k]], nd[k], nz[k], rng)
        if config.mode == "vrnn":
            _glorot(p.Wq_mux[k, :nz[k], :], D, nz[k], rng)
            _glorot(p.Wq_sigx[k, :nz[k], :], D, nz[k], rng)
    _glorot(p.W_xd[:, :nd[0]], nd[0], D, rng)
    if config.output_uses_z:
        _glorot(p.W_xz[:, :nz[0]], nz[0], D, rng)
    if config.mode == "vrnn":
        _glorot(p.W_du[:nd[0], :], D, nd[0], rng)
    return p


# ---------------------------------------------------------------------------
# Adaptive vectors
# ---------------------------------------------------------------------------

class AdaptiveVectors:
    """Per-sequence trainable posterior carriers (a_mu, a_sig), indexed 1..T.

    Stored as one array of shape (T+1, 2, K, z_max); index 0 is unused so
    timestep indices match rollout tapes.
    """

    def __init__(self, config: NetworkConfig, T: int, data: np.ndarray | None = None):
        self.config = config
        self.T = int(T)
        shape = (self.T + 1, 2, config.n_layers, config.z_max)
        if data is None:
            data = np.zeros(shape, dtype=np.float64)
        data = np.ascontiguousarray(data, dtype=np.float64)
        if data.shape != shape:
            raise ValueError(f"adaptive vector array has shape {data.shape}, expected {shape}")
        self.data = data

    @classmethod
    def zeros(cls, config: NetworkConfig, T: int) -> "AdaptiveVectors":
        return cls(config, T)

    def a_mu(self, t: int) -> np.ndarray:
        return self.data[t, 0]

    def a_sig(self, t: int) -> np.ndarray:
        return self.data[t, 1]

    def copy(self) -> "AdaptiveVectors":
        return AdaptiveVectors(self.config, self.T, self.data.copy())

    def first_step(self) -> tuple[np.ndarray, np.ndarray]:
        return self.data[1, 0].copy(), self.data[1, 1].copy()


def random_bootstrap(config: NetworkConfig, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Random first-step adaptive pair, used to seed free generation."""
    mu = np.zeros((config.n_layers, config.z_max))
    sig = np.zeros((config.n_layers, config.z_max))
    for k in range(config.n_layers):
        nzk = config.z_units[k]
        mu[k, :nzk] = rng.normal(nzk)
        sig[k, :nzk] = rng.normal(nzk)
    return mu, sig


# ---------------------------------------------------------------------------
# Single-step operations (per-layer padded (K, d_max)/(K, z_max) arrays)
# ---------------------------------------------------------------------------

def mtrnn_step(d_prev: np.ndarray, h_prev: np.ndarray, z_t: np.ndarray,
               params: Parameters, u_t: np.ndarray | None = None
               ) -> tuple[np.ndarray, np.ndarray]:
    """One leaky-integrator update for all layers; returns (h_t, d_t).

    Inputs are padded (K, d_max) / (K, z_max) arrays.  In vrnn mode the
    bottom layer additionally receives W_du @ u_t (zeros when u_t is None).
    """
    cfg = params.config
    nd, nz, taus, K = cfg.d_units, cfg.z_units, cfg.taus, cfg.n_layers
    h_t = np.zeros_like(h_prev)
    d_t = np.zeros_like(d_prev)
    for k in range(K):
        acc = params.W_dd[k, :nd[k], :nd[k]] @ d_prev[k, :nd[k]]
        acc += params.W_dz[k, :nd[k], :nz[k]] @ z_t[k, :nz[k]]
        if k + 1 < K:
            acc += params.W_up[k, :nd[k], :nd[k + 1]] @ d_prev[k + 1, :nd[k + 1]]
        if k > 0:
            acc += params.W_dn[k, :nd[k], :nd[k - 1]] @ d_prev[k - 1, :nd[k - 1]]
        acc += params.b_h[k, :nd[k]]
        if cfg.mode == "vrnn" and k == 0 and u_t is not None:
            acc += params.W_du[:nd[0], :] @ u_t
        h = (1.0 - 1.0 / taus[k]) * h_prev[k, :nd[k]] + acc / taus[k]
        h_t[k, :nd[k]] = h
        d_t[k, :nd[k]] = np.tanh(h)
    return h_t, d_t


def prior_params(d_prev: np.ndarray, params: Parameters
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer prior (mu, log sigma) conditioned on the previous d state."""
    cfg = params.config
    nd, nz = cfg.d_units, cfg.z_units
    mu = np.zeros((cfg.n_layers, cfg.z_max))
    lsig = np.zeros_like(mu)
    for k in range(cfg.n_layers):
        pre_mu = params.Wp_mu[k, :nz[k], :nd[k]] @ d_prev[k, :nd[k]] + params.bp_mu[k, :nz[k]]
        pre_sig = params.Wp_sig[k, :nz[k], :nd[k]] @ d_prev[k, :nd[k]] + params.bp_sig[k, :nz[k]]
        mu[k, :nz[k]] = np.tanh(pre_mu)
        lsig[k, :nz[k]] = np.clip(pre_sig, LOGSIG_MIN, LOGSIG_MAX)
    return mu, lsig


def posterior_params(d_prev: np.ndarray, a_mu: np.ndarray, a_sig: np.ndarray,
                     params: Parameters, x_t: np.ndarray | None = None
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer posterior (mu, log sigma).

    In pvrnn mode the heads read d_{t-1} plus the adaptive pair (the W @ d
    terms are dropped when config.posterior_uses_d is off).  In vrnn mode the
    adaptive pair is replaced by weighted current observations x_t.
    """
    cfg = params.config
    nd, nz = cfg.d_units, cfg.z_units
    mu = np.zeros((cfg.n_layers, cfg.z_max))
    lsig = np.zeros_like(mu)
    for k in range(cfg.n_layers):
        pre_mu = params.bq_mu[k, :nz[k]] + a_mu[k, :nz[k]]
        pre_sig = params.bq_sig[k, :nz[k]] + a_sig[k, :nz[k]]
        if cfg.posterior_uses_d:
            pre_mu = pre_mu + params.Wq_mu[k, :nz[k], :nd[k]] @ d_prev[k, :nd[k]]
            pre_sig = pre_sig + params.Wq_sig[k, :nz[k], :nd[k]] @ d_prev[k, :nd[k]]
        if cfg.mode == "vrnn":
            if x_t is None:
                raise ValueError("vrnn posterior needs the current observation")
            pre_mu = pre_mu + params.Wq_mux[k, :nz[k], :] @ x_t
            pre_sig = pre_sig + params.Wq_sigx[k, :nz[k], :] @ x_t
        mu[k, :nz[k]] = np.tanh(pre_mu)
        lsig[k, :nz[k]] = np.clip(pre_sig, LOGSIG_MIN, LOGSIG_MAX)
    return mu, lsig


def reparameterize(mu: np.ndarray, lsig: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """z = mu + exp(log sigma) * eps, elementwise."""
    return mu + np.exp(lsig) * eps


def output_map(d_bottom: np.ndarray, z_bottom: np.ndarray, params: Parameters) -> np.ndarray:
    """Prediction from the bottom layer: tanh(W_xd d + W_xz z + b)."""
    cfg = params.config
    nd0, nz0 = cfg.d_units[0], cfg.z_units[0]
    pre = params.W_xd[:, :nd0] @ d_bottom[:nd0] + params.b_x
    if cfg.output_uses_z:
        pre = pre + params.W_xz[:, :nz0] @ z_bottom[:nz0]
    return np.tanh(pre)


# ---------------------------------------------------------------------------
# Full-sequence rollouts
# ---------------------------------------------------------------------------

Z_POSTERIOR = 0
Z_PRIOR = 1


@dataclass
class RolloutState:
    """Full tape of one rollout; index 0 holds the zero initial state.

    zmode[t] records whether z_t came from the posterior (0) or prior (1)
    head, so stored (mu, lsig, eps) always reproduce z exactly.
    """

    T: int
    h: np.ndarray       # (T+1, K, d_max)
    d: np.ndarray       # (T+1, K, d_max)
    z: np.ndarray       # (T+1, K, z_max)
    eps: np.ndarray     # (T+1, K, z_max)
    mu_q: np.ndarray    # (T+1, K, z_max)
    lsig_q: np.ndarray
    mu_p: np.ndarray
    lsig_p: np.ndarray
    x: np.ndarray       # (T+1, D)
    zmode: np.ndarray   # (T+1,) int8

    @classmethod
    def empty(cls, config: NetworkConfig, T: int) -> "RolloutState":
        K, Dm, Zm = config.n_layers, config.d_max, config.z_max
        zshape = (T + 1, K, Zm)
        return cls(
            T=T,
            h=np.zeros((T + 1, K, Dm)),
            d=np.zeros((T + 1, K, Dm)),
            z=np.zeros(zshape),
            eps=np.zeros(zshape),
            mu_q=np.zeros(zshape),
            lsig_q=np.zeros(zshape),
            mu_p=np.zeros(zshape),
            lsig_p=np.zeros(zshape),
            x=np.zeros((T + 1, config.output_dim)),
            zmode=np.zeros(T + 1, dtype=np.int8),
        )

    def verify(self, config: NetworkConfig) -> None:
        """Raise unless the tape satisfies its structural invariants."""
        for name in ("h", "d", "z", "x"):
            assert_all_finite(getattr(self, name), f"rollout {name}")
        if not np.allclose(self.d, np.tanh(self.h), atol=1e-12):
            raise AssertionError("tape violates d = tanh(h)")
        for t in range(1, self.T + 1):
            mu = self.mu_q[t] if self.zmode[t] == Z_POSTERIOR else self.mu_p[t]
            lsig = self.lsig_q[t] if self.zmode[t] == Z_POSTERIOR else self.lsig_p[t]
            z = mu + np.exp(lsig) * self.eps[t]
            if not np.allclose(z, self.z[t], atol=1e-12):
                raise AssertionError(f"tape z at t={t} does not replay from mu + sigma*eps")


def _draw_eps(config: NetworkConfig, T: int, rng: RngStream | None) -> np.ndarray:
    eps = np.zeros((T + 1, config.n_layers, config.z_max))
    if rng is not None:
        for k in range(config.n_layers):
            nzk = config.z_units[k]
            eps[1:, k, :nzk] = rng.normal((T, nzk))
    return eps


def rollout_posterior(params: Parameters, A: AdaptiveVectors, T: int,
                      rng: RngStream | None = None,
                      eps: np.ndarray | None = None,
                      targets: np.ndarray | None = None) -> RolloutState:
    """Posterior-driven rollout over t = 1..T; retains eps for exact replay.

    `targets` is only consulted in vrnn mode (posterior input and shifted
    u input); pvrnn rollouts never see observations directly.
    """
    cfg = params.config
    if A.T < T:
        raise ValueError(f"adaptive vectors cover 1..{A.T}, need 1..{T}")
    tape = RolloutState.empty(cfg, T)
    tape.eps = eps.copy() if eps is not None else _draw_eps(cfg, T, rng)
    tape.zmode[1:] = Z_POSTERIOR
    if cfg.mode == "vrnn" and targets is None:
        raise ValueError("vrnn posterior rollout needs targets")
    for t in range(1, T + 1):
        d_prev, h_prev = tape.d[t - 1], tape.h[t - 1]
        x_t = targets[t - 1] if cfg.mode == "vrnn" else None
        mu_q, lsig_q = posterior_params(d_prev, A.a_mu(t), A.a_sig(t), params, x_t=x_t)
        mu_p, lsig_p = prior_params(d_prev, params)
        z_t = reparameterize(mu_q, lsig_q, tape.eps[t])
        u_t = None
        if cfg.mode == "vrnn":
            u_t = targets[t - 2] if t >= 2 else np.zeros(cfg.output_dim)
        h_t, d_t = mtrnn_step(d_prev, h_prev, z_t, params, u_t=u_t)
        tape.mu_q[t], tape.lsig_q[t] = mu_q, lsig_q
        tape.mu_p[t], tape.lsig_p[t] = mu_p, lsig_p
        tape.z[t], tape.h[t], tape.d[t] = z_t, h_t, d_t
        tape.x[t] = output_map(d_t[0], z_t[0], params)
    assert_all_finite(tape.h, "rollout h")
    return tape


def rollout_prior(params: Parameters, T: int, rng: RngStream | None = None,
                  bootstrap: tuple[np.ndarray, np.ndarray] | None = None,
                  eps_mode: str = "sample",
                  eps: np.ndarray | None = None) -> RolloutState:
    """Generative rollout: z from the prior, optionally seeded at t=1.

    When `bootstrap` (a_mu_1, a_sig_1) is given, z_1 is drawn through the
    posterior head with that pair (the regeneration / free-generation entry
    point); all later steps use the prior.  eps_mode "zero" forces eps = 0,
    making the orbit deterministic.
    """
    cfg = params.config
    if cfg.mode == "vrnn":
        raise ValueError("prior rollouts are a pvrnn-mode operation; use vrnn_rollout")
    if eps_mode not in ("sample", "zero"):
        raise ValueError(f"unknown eps_mode {eps_mode!r}")
    tape = RolloutState.empty(cfg, T)
    if eps is not None:
        tape.eps = eps.copy()
    elif eps_mode == "sample":
        tape.eps = _draw_eps(cfg, T, rng)
    tape.zmode[1:] = Z_PRIOR
    for t in range(1, T + 1):
        d_prev, h_prev = tape.d[t - 1], tape.h[t - 1]
        mu_p, lsig_p = prior_params(d_prev, params)
        tape.mu_p[t], tape.lsig_p[t] = mu_p, lsig_p
        if t == 1 and bootstrap is not None:
            a_mu1, a_sig1 = bootstrap
            mu_q, lsig_q = posterior_params(d_prev, a_mu1, a_sig1, params)
            tape.mu_q[t], tape.lsig_q[t] = mu_q, lsig_q
            tape.zmode[t] = Z_POSTERIOR
            z_t = reparameterize(mu_q, lsig_q, tape.eps[t])
        else:
            z_t = reparameterize(mu_p, lsig_p, tape.eps[t])
        h_t, d_t = mtrnn_step(d_prev, h_prev, z_t, params)
        tape.z[t], tape.h[t], tape.d[t] = z_t, h_t, d_t
        tape.x[t] = output_map(d_t[0], z_t[0], params)
    assert_all_finite(tape.h, "rollout h")
    return tape


def vrnn_rollout(params: Parameters, targets: np.ndarray,
                 rng: RngStream | None = None, mode: str = "posterior",
                 observed: int | None = None, T: int | None = None,
                 eps_mode: str = "sample") -> RolloutState:
    """Baseline-mode rollout with observation feeding.

    mode "posterior": teacher-forced training pass over len(targets) steps
    (u_t = target_{t-1}, posterior reads target_t).
    mode "closed_loop": the first `observed` steps are teacher-forced with
    the posterior; beyond them u_t is the model's own previous prediction and
    z_t comes from the prior, for T total steps.
    """
    cfg = params.config
    if cfg.mode != "vrnn":
        raise ValueError("vrnn_rollout requires a vrnn-mode network")
    if mode == "posterior":
        if T is not None and T != len(targets):
            raise ValueError("posterior mode runs over the full target length")
        return rollout_posterior(params, AdaptiveVectors.zeros(cfg, len(targets)),
                                 len(targets), rng=rng, targets=targets,
                                 eps=None if eps_mode == "sample" else
                                 np.zeros((len(targets) + 1, cfg.n_layers, cfg.z_max)))
    if mode != "closed_loop":
        raise ValueError(f"unknown mode {mode!r}")
    observed = len(targets) if observed is None else int(observed)
    if not 0 <= observed <= len(targets):
        raise ValueError("observed steps outside target range")
    T = observed if T is None else int(T)
    if T < observed:
        raise ValueError("total steps must cover the observed prefix")
    tape = RolloutState.empty(cfg, T)
    if eps_mode == "sample":
        tape.eps = _draw_eps(cfg, T, rng)
    A0 = AdaptiveVectors.zeros(cfg, 0)  # vrnn has no adaptive vectors
    zeros_u = np.zeros(cfg.output_dim)
    for t in range(1, T + 1):
        d_prev, h_prev = tape.d[t - 1], tape.h[t - 1]
        mu_p, lsig_p = prior_params(d_prev, params)
        tape.mu_p[t], tape.lsig_p[t] = mu_p, lsig_p
        if t <= observed:
            mu_q, lsig_q = posterior_params(d_prev, A0.data[0, 0], A0.data[0, 1],
                                            params, x_t=targets[t - 1])
            tape.mu_q[t], tape.lsig_q[t] = mu_q, lsig_q
            tape.zmode[t] = Z_POSTERIOR
            z_t = reparameterize(mu_q, lsig_q, tape.eps[t])
        else:
            tape.zmode[t] = Z_PRIOR
            z_t = reparameterize(mu_p, lsig_p, tape.eps[t])
        if t == 1:
            u_t = zeros_u
        elif t - 2 < observed:
            u_t = targets[t - 2]
        else:
            u_t = tape.x[t - 1]  # closed loop: feed back own prediction
        h_t, d_t = mtrnn_step(d_prev, h_prev, z_t, params, u_t=u_t)
        tape.z[t], tape.h[t], tape.d[t] = z_t, h_t, d_t
        tape.x[t] = output_map(d_t[0], z_t[0], params)
    assert_all_finite(tape.h, "rollout h")
    return tape
