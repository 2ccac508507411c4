"""Shared float64 numerics: seeded RNG streams and the ADAM optimizer.

Everything downstream is deterministic given the seeds handed out here.
The RNG identity is pinned: numpy's PCG64 bit generator driving
``Generator.standard_normal`` / ``Generator.random``; the byte stream for a
fixed seed is stable for the numpy version recorded in pyproject.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NonFiniteError",
    "RngStream",
    "gaussian_sample",
    "AdamState",
    "adam_step",
    "assert_all_finite",
]


class NonFiniteError(ValueError):
    """Raised when a public operation would produce or consume NaN/Inf."""


def assert_all_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains non-finite values")


class RngStream:
    """A seeded, replayable stream of random numbers.

    Same seed, same call sequence -> bit-identical samples.  Streams are not
    shared across workers; derive one per worker with :meth:`child`.
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be a non-negative integer")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, index: int) -> "RngStream":
        """Independent stream for worker/role `index` (seed + index)."""
        return RngStream(self.seed + int(index))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64)

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape, dtype=np.float64)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def get_state(self) -> dict:
        """Serializable snapshot of the stream position (for resume)."""
        return {"seed": self.seed, "state": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, snapshot: dict) -> "RngStream":
        stream = cls(snapshot["seed"])
        stream._gen.bit_generator.state = snapshot["state"]
        return stream


def gaussian_sample(rng: RngStream, n: int) -> np.ndarray:
    """n i.i.d. standard-normal draws from `rng`."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.normal(n)


@dataclass
class AdamState:
    """First/second moment state for ADAM over one flat parameter vector.

    The optimizer here performs gradient ASCENT: `adam_step` adds the update,
    matching the convention that all gradients in this package are gradients
    of the lower bound being maximized.
    """

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: np.ndarray, alpha: float = 0.001,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros_like(params), v=np.zeros_like(params),
                   t=0, alpha=alpha, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              blocks: dict[str, slice] | None = None) -> np.ndarray:
    """One bias-corrected ADAM ascent step, in place on `params`.

    `blocks` optionally maps names to slices of the flat vector, used only to
    name the offending block when a non-finite gradient is rejected.
    """
    if params.shape != grads.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape} vs grads {grads.shape}")
    if params.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape} vs state {state.m.shape}")
    if not np.all(np.isfinite(grads)):
        name = "gradient"
        if blocks:
            for block_name, sl in blocks.items():
                if not np.all(np.isfinite(grads[sl])):
                    name = f"gradient block '{block_name}'"
                    break
        raise NonFiniteError(f"{name} contains non-finite values")

    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grads * grads)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params += state.alpha * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
