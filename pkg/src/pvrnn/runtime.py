"""Training and test-time inference drivers.

Training jointly ascends the weighted bound in the shared weights and in the
per-sequence adaptive vectors: each epoch rolls the whole corpus, reduces the
shared-parameter gradients over sequences in a fixed order, then applies one
ADAM step to the weights and one to every sequence's adaptive stack.

Test-time error regression freezes the weights and optimizes a fresh
adaptive-vector sequence inside a sliding window: grow [1,1]..[1,m], then
slide by `stride`; after each window's optimization cycles, predictions
beyond the window are generated through the prior path (adaptive entries
outside the window are zero, entries left of it stay frozen).  The baseline
mode has no adaptive vectors; its multi-step predictions come from
closed-loop generation, feeding its own outputs back as inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .checkpoint import Checkpoint
from .model import (AdaptiveVectors, NetworkConfig, init_parameters,
                    mtrnn_step, output_map, posterior_params, prior_params,
                    reparameterize)
from .numeric import AdamState, NonFiniteError, RngStream, adam_step

__all__ = ["TrainConfig", "TrainingDivergedError", "TrainResult", "train",
           "regenerate_target", "RegressionConfig", "RegressionResult",
           "error_regression", "fixed_window_regression", "vrnn_predict",
           "write_training_log", "write_traces"]


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite bound) at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    """Full-corpus-per-epoch training settings."""

    epochs: int
    w: float
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 0   # 0: only the final checkpoint is written
    log_every: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.w < 0:
            raise ValueError("meta-prior w must be >= 0")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "w": self.w, "alpha": self.alpha,
                "beta1": self.beta1, "beta2": self.beta2, "seed": self.seed,
                "checkpoint_every": self.checkpoint_every,
                "log_every": self.log_every}


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: np.ndarray  # rows: (epoch, likelihood_term, kl_term, total)


@dataclass
class _Group:
    """Sequences of equal length, trained through one batched tape."""

    T: int
    indices: list[int]
    targets: np.ndarray        # (B, T, D)
    tape: kernels.BatchTape
    A_stack: np.ndarray        # (B, T+1, 2, K, Zm)
    opt: AdamState
    eps: np.ndarray            # (T+1, B, K, Zm) scratch


def _make_groups(dataset_seqs, config, tcfg, adaptive=None, opt_adaptive=None):
    by_len: dict[int, list[int]] = {}
    for i, seq in enumerate(dataset_seqs):
        by_len.setdefault(len(seq), []).append(i)
    groups = []
    for T in sorted(by_len):
        idx = by_len[T]
        B = len(idx)
        targets = np.ascontiguousarray(
            np.stack([dataset_seqs[i] for i in idx]), dtype=np.float64)
        tape = kernels.alloc_tape(config, B, T)
        kernels.stack_targets(tape, targets)
        if adaptive is None:
            A_stack = np.zeros((B, T + 1, 2, config.n_layers, config.z_max))
        else:
            A_stack = kernels.stack_adaptive([adaptive[i] for i in idx])
        if opt_adaptive is None:
            opt = AdamState.for_params(A_stack, alpha=tcfg.alpha,
                                       beta1=tcfg.beta1, beta2=tcfg.beta2)
        else:
            states = [opt_adaptive[i] for i in idx]
            opt = AdamState(m=np.stack([s.m for s in states]),
                            v=np.stack([s.v for s in states]),
                            t=states[0].t, alpha=states[0].alpha,
                            beta1=states[0].beta1, beta2=states[0].beta2,
                            eps=states[0].eps)
        eps = np.zeros((T + 1, B, config.n_layers, config.z_max))
        groups.append(_Group(T=T, indices=idx, targets=targets, tape=tape,
                             A_stack=A_stack, opt=opt, eps=eps))
    return groups


def _checkpoint_from_state(config, params, groups, n_seq, epoch, opt_shared,
                           stream, meta) -> Checkpoint:
    adaptive: list[AdaptiveVectors | None] = [None] * n_seq
    opt_adaptive: list[AdamState | None] = [None] * n_seq
    for g in groups:
        for slot, i in enumerate(g.indices):
            adaptive[i] = AdaptiveVectors(config, g.T, g.A_stack[slot].copy())
            opt_adaptive[i] = AdamState(m=g.opt.m[slot].copy(), v=g.opt.v[slot].copy(),
                                        t=g.opt.t, alpha=g.opt.alpha,
                                        beta1=g.opt.beta1, beta2=g.opt.beta2,
                                        eps=g.opt.eps)
    return Checkpoint(config=config, params=params.copy(), adaptive=adaptive,
                      epoch=epoch,
                      opt_shared=AdamState(m=opt_shared.m.copy(), v=opt_shared.v.copy(),
                                           t=opt_shared.t, alpha=opt_shared.alpha,
                                           beta1=opt_shared.beta1, beta2=opt_shared.beta2,
                                           eps=opt_shared.eps),
                      opt_adaptive=opt_adaptive, rng_state=stream.get_state(),
                      meta=meta)


def train(dataset, config: NetworkConfig, tcfg: TrainConfig,
          resume_from: Checkpoint | None = None,
          checkpoint_path=None) -> TrainResult:
    """Joint ascent on weights and adaptive vectors over the full corpus.

    In "vrnn" mode the adaptive vectors do not exist; only the shared
    weights are trained.  Aborts with TrainingDivergedError (carrying the
    epoch index) if the bound leaves the finite range.
    """
    if len(dataset.sequences) == 0:
        raise ValueError("dataset is empty")
    if dataset.dim != config.output_dim:
        raise ValueError(f"dataset dim {dataset.dim} != network output dim "
                         f"{config.output_dim}")
    n_seq = len(dataset.sequences)
    is_vrnn = config.mode == "vrnn"
    meta = {"w": tcfg.w, "dataset_provenance": dataset.provenance,
            "train_config": tcfg.to_dict()}

    if resume_from is not None:
        params = resume_from.params.copy()
        opt_shared = resume_from.opt_shared
        stream = RngStream.from_state(resume_from.rng_state)
        start_epoch = resume_from.epoch
        groups = _make_groups(dataset.sequences, config, tcfg,
                              adaptive=resume_from.adaptive or None,
                              opt_adaptive=resume_from.opt_adaptive or None)
    else:
        params = init_parameters(config)
        opt_shared = AdamState.for_params(params.flat, alpha=tcfg.alpha,
                                          beta1=tcfg.beta1, beta2=tcfg.beta2)
        stream = RngStream(tcfg.seed)
        start_epoch = 0
        groups = _make_groups(dataset.sequences, config, tcfg)

    history = []
    shared_grad = np.zeros_like(params.flat)
    for epoch in range(start_epoch + 1, tcfg.epochs + 1):
        shared_grad[:] = 0.0
        lik_total = 0.0
        kl_total = 0.0
        for g in groups:
            for k in range(config.n_layers):
                nzk = config.z_units[k]
                g.eps[1:, :, k, :nzk] = stream.normal((g.T, len(g.indices), nzk))
            kernels.forward_batch(params, g.A_stack, g.eps, 1, g.T, g.tape)
            lik, kl = kernels.loss_batch(g.tape, config, 1, g.T)
            lik_total += float(np.sum(lik))
            kl_total += float(np.sum(kl))
            grads, gA = kernels.backward_batch(params, g.tape, tcfg.w, 1, g.T)
            shared_grad += grads.flat
            if not is_vrnn:
                adam_step(g.A_stack, gA, g.opt)
        total = lik_total - tcfg.w * kl_total
        if not math.isfinite(total):
            raise TrainingDivergedError(epoch)
        adam_step(params.flat, shared_grad, opt_shared, blocks=params.blocks)
        if tcfg.log_every and (epoch % tcfg.log_every == 0 or epoch == tcfg.epochs):
            history.append((epoch, lik_total, kl_total, total))
        if (checkpoint_path is not None and tcfg.checkpoint_every
                and epoch % tcfg.checkpoint_every == 0 and epoch < tcfg.epochs):
            from .checkpoint import save_checkpoint
            save_checkpoint(_checkpoint_from_state(
                config, params, [] if is_vrnn else groups,
                0 if is_vrnn else n_seq, epoch,
                opt_shared, stream, meta), checkpoint_path)

    ckpt = _checkpoint_from_state(config, params, [] if is_vrnn else groups,
                                  0 if is_vrnn else n_seq,
                                  tcfg.epochs, opt_shared, stream, meta)
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint
        save_checkpoint(ckpt, checkpoint_path)
    hist = np.array(history, dtype=np.float64) if history else np.zeros((0, 4))
    return TrainResult(checkpoint=ckpt, history=hist)


def regenerate_target(ckpt: Checkpoint, seq_index: int, repeats: int,
                      rng: RngStream, eps_mode: str = "sample") -> list[np.ndarray]:
    """Prior-driven rollouts seeded with the learned first-step adaptive pair.

    Returns `repeats` generated (T, D) sequences with fresh noise each run.
    """
    from .model import rollout_prior
    if not 0 <= seq_index < len(ckpt.adaptive):
        raise IndexError(f"no adaptive vectors for sequence {seq_index}")
    A = ckpt.adaptive[seq_index]
    boot = A.first_step()
    outs = []
    for _ in range(repeats):
        tape = rollout_prior(ckpt.params, A.T, rng=rng, bootstrap=boot,
                             eps_mode=eps_mode)
        outs.append(tape.x[1:].copy())
    return outs


# ---------------------------------------------------------------------------
# Error regression
# ---------------------------------------------------------------------------

@dataclass
class RegressionConfig:
    """Sliding-window online inference settings."""

    window: int
    iterations: int
    stride: int = 1
    lookahead: int = 5
    alpha: float = 0.001
    w: float | None = None      # defaults to the training meta-prior
    a_init: str = "zeros"

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.stride > self.window:
            raise ValueError("stride must not exceed the window (the filtered "
                             "prefix would have gaps)")
        if self.lookahead < 1:
            raise ValueError("lookahead must be >= 1")
        if self.a_init != "zeros":
            raise ValueError("only zero initialization of adaptive vectors is supported")


@dataclass
class RegressionResult:
    """Forecasts plus the optimized adaptive vectors.

    forecasts[t1, j] is the prediction of step t1 + j + 1 emitted after the
    window ending at t1 was optimized (NaN where never predicted).
    """

    forecasts: np.ndarray            # (T'+1, lookahead, D)
    adaptive: AdaptiveVectors
    window_losses: np.ndarray        # (n_positions, 3): t1, lik, kl

    def mse(self, targets: np.ndarray, k: int) -> float:
        from .analysis import prediction_mse
        return prediction_mse(self.forecasts, targets, k)


def _window_adam(A_stack: np.ndarray, gA: np.ndarray, opt: AdamState,
                 t0: int, t1: int) -> None:
    # freeze contract: ADAM touches only the window slice, so moments of
    # frozen coordinates cannot keep moving them
    sl = (slice(None), slice(t0, t1 + 1))
    view = AdamState(m=opt.m[sl], v=opt.v[sl], t=opt.t, alpha=opt.alpha,
                     beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps)
    adam_step(A_stack[sl], gA[sl], view)
    opt.t = view.t


def error_regression(ckpt: Checkpoint, test_seq: np.ndarray,
                     rcfg: RegressionConfig, seed: int = 0) -> RegressionResult:
    """Online prediction of an unseen sequence with frozen weights.

    Implements the grow-then-slide window schedule.  Each window position
    runs `iterations` cycles of (posterior rollout with sampled noise ->
    bound -> BPTT -> ADAM on the window's adaptive entries), then records a
    deterministic forecast: a mean (eps = 0) pass through the window followed
    by `lookahead` prior-mean steps.  The same mean pass refreshes the frozen
    prefix states that later windows start from.
    """
    config = ckpt.config
    if config.mode == "vrnn":
        raise ValueError("error regression applies to the adaptive-vector mode; "
                         "use vrnn_predict for the baseline")
    test_seq = np.ascontiguousarray(test_seq, dtype=np.float64)
    Tp = len(test_seq)
    if rcfg.window > Tp:
        raise ValueError(f"window {rcfg.window} exceeds sequence length {Tp}")
    params = ckpt.params
    w = ckpt.meta.get("w", 1.0) if rcfg.w is None else rcfg.w
    stream = RngStream(seed)

    K_look = rcfg.lookahead
    tape = kernels.alloc_tape(config, 1, Tp + K_look)
    padded = np.zeros((Tp + K_look, config.output_dim))
    padded[:Tp] = test_seq
    kernels.stack_targets(tape, padded[None])
    A = AdaptiveVectors.zeros(config, Tp + K_look)
    A_stack = A.data[None]
    opt = AdamState.for_params(A_stack, alpha=rcfg.alpha)
    eps = np.zeros((Tp + K_look + 1, 1, config.n_layers, config.z_max))
    eps_zero = np.zeros_like(eps)

    forecasts = np.full((Tp + 1, K_look, config.output_dim), np.nan)
    losses = []

    positions = list(range(1, Tp + 1, rcfg.stride))
    if positions[-1] != Tp:
        positions.append(Tp)
    for t1 in positions:
        t0 = max(1, t1 - rcfg.window + 1)
        for _ in range(rcfg.iterations):
            for k in range(config.n_layers):
                nzk = config.z_units[k]
                eps[t0:t1 + 1, :, k, :nzk] = stream.normal((t1 - t0 + 1, 1, nzk))
            kernels.forward_batch(params, A_stack, eps, t0, t1, tape)
            lik, kl = kernels.loss_batch(tape, config, t0, t1)
            if not np.isfinite(lik[0] - w * kl[0]):
                raise NonFiniteError(f"regression bound non-finite in window [{t0},{t1}]")
            _, gA = kernels.backward_batch(params, tape, w, t0, t1,
                                           want_pgrads=False)
            _window_adam(A_stack, gA, opt, t0, t1)
        # deterministic forecast + prefix refresh
        kernels.forward_batch(params, A_stack, eps_zero, t0, t1, tape)
        lik, kl = kernels.loss_batch(tape, config, t0, t1)
        losses.append((t1, float(lik[0]), float(kl[0])))
        kernels.forward_batch(params, A_stack, eps_zero, t1 + 1, t1 + K_look,
                              tape, zmode_value=kernels.Z_PRIOR)
        forecasts[t1] = tape.x[t1 + 1:t1 + 1 + K_look, 0]

    return RegressionResult(forecasts=forecasts,
                            adaptive=AdaptiveVectors(config, Tp + K_look,
                                                     A_stack[0].copy()),
                            window_losses=np.array(losses))


def fixed_window_regression(ckpt: Checkpoint, test_seq: np.ndarray,
                            window_end: int, iterations: int, horizon: int,
                            w: float | None = None, alpha: float = 0.001,
                            seed: int = 0):
    """One fixed window [1, N] optimized `iterations` times, then a free-run
    continuation of `horizon` steps through the prior path.

    Returns (window fit X_{1:N}, continuation X_{N+1:N+H}, adaptive vectors).
    """
    config = ckpt.config
    if config.mode == "vrnn":
        raise ValueError("fixed-window regression applies to the adaptive-vector mode")
    test_seq = np.ascontiguousarray(test_seq, dtype=np.float64)
    N = int(window_end)
    if not 1 <= N <= len(test_seq):
        raise ValueError(f"window end {N} outside sequence of length {len(test_seq)}")
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    params = ckpt.params
    w = ckpt.meta.get("w", 1.0) if w is None else w
    stream = RngStream(seed)

    tape = kernels.alloc_tape(config, 1, N + horizon)
    padded = np.zeros((N + horizon, config.output_dim))
    padded[:N] = test_seq[:N]
    kernels.stack_targets(tape, padded[None])
    A_stack = np.zeros((1, N + horizon + 1, 2, config.n_layers, config.z_max))
    opt = AdamState.for_params(A_stack, alpha=alpha)
    eps = np.zeros((N + horizon + 1, 1, config.n_layers, config.z_max))
    eps_zero = np.zeros_like(eps)

    for _ in range(iterations):
        for k in range(config.n_layers):
            nzk = config.z_units[k]
            eps[1:N + 1, :, k, :nzk] = stream.normal((N, 1, nzk))
        kernels.forward_batch(params, A_stack, eps, 1, N, tape)
        lik, kl = kernels.loss_batch(tape, config, 1, N)
        if not np.isfinite(lik[0] - w * kl[0]):
            raise NonFiniteError("fixed-window bound non-finite")
        _, gA = kernels.backward_batch(params, tape, w, 1, N, want_pgrads=False)
        _window_adam(A_stack, gA, opt, 1, N)

    kernels.forward_batch(params, A_stack, eps_zero, 1, N, tape)
    fit = tape.x[1:N + 1, 0].copy()
    continuation = np.zeros((0, config.output_dim))
    if horizon > 0:
        kernels.forward_batch(params, A_stack, eps_zero, N + 1, N + horizon,
                              tape, zmode_value=kernels.Z_PRIOR)
        continuation = tape.x[N + 1:N + 1 + horizon, 0].copy()
    return fit, continuation, AdaptiveVectors(config, N + horizon, A_stack[0].copy())


# ---------------------------------------------------------------------------
# Baseline closed-loop prediction
# ---------------------------------------------------------------------------

def vrnn_predict(ckpt: Checkpoint, test_seq: np.ndarray,
                 lookahead: int = 5) -> np.ndarray:
    """k-step predictions from the baseline by closed-loop generation.

    The state is filtered through the observed prefix with the posterior
    head (teacher-forced inputs, mean latents); from each step t the model
    rolls `lookahead` steps feeding its own predictions back as inputs with
    prior-mean latents.  Returns forecasts shaped like error_regression's.
    """
    config = ckpt.config
    if config.mode != "vrnn":
        raise ValueError("vrnn_predict needs a vrnn-mode checkpoint")
    test_seq = np.ascontiguousarray(test_seq, dtype=np.float64)
    Tp = len(test_seq)
    params = ckpt.params
    K, Dm, Zm, D = config.n_layers, config.d_max, config.z_max, config.output_dim
    forecasts = np.full((Tp + 1, lookahead, D), np.nan)
    zeros_a = np.zeros((K, Zm))
    eps0 = np.zeros((K, Zm))

    h = np.zeros((K, Dm))
    d = np.zeros((K, Dm))
    for t in range(1, Tp + 1):
        # filter one step: posterior mean conditioned on the observation x_t
        mu_q, lsig_q = posterior_params(d, zeros_a, zeros_a, params,
                                        x_t=test_seq[t - 1])
        z = reparameterize(mu_q, lsig_q, eps0)
        u = test_seq[t - 2] if t >= 2 else np.zeros(D)
        h, d = mtrnn_step(d, h, z, params, u_t=u)
        # closed-loop lookahead from the filtered state
        hc, dc = h.copy(), d.copy()
        u_next = test_seq[t - 1]  # the last observation feeds the first step
        for j in range(lookahead):
            if t + j + 1 > Tp:
                break
            mu_p, lsig_p = prior_params(dc, params)
            zc = reparameterize(mu_p, lsig_p, eps0)
            hc, dc = mtrnn_step(dc, hc, zc, params, u_t=u_next)
            xc = output_map(dc[0], zc[0], params)
            forecasts[t, j] = xc
            u_next = xc
    return forecasts


# ---------------------------------------------------------------------------
# CSV writers (training log and prediction traces)
# ---------------------------------------------------------------------------

def write_training_log(path, history: np.ndarray) -> None:
    path = Path(path)
    lines = ["epoch,likelihood_term,kl_term,total"]
    for row in history:
        lines.append("%d,%.10g,%.10g,%.10g" % (int(row[0]), row[1], row[2], row[3]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_traces(path, forecasts: np.ndarray, targets: np.ndarray) -> None:
    """Prediction traces: one row per (emission step, lookahead)."""
    path = Path(path)
    Tp, K_look, D = forecasts.shape[0] - 1, forecasts.shape[1], forecasts.shape[2]
    cols = ",".join(f"pred_{m}" for m in range(D))
    tcols = ",".join(f"target_{m}" for m in range(D))
    lines = [f"t,k,{cols},{tcols}"]
    for t1 in range(1, Tp + 1):
        for j in range(K_look):
            if np.any(np.isnan(forecasts[t1, j])):
                continue
            s = t1 + j  # 0-based index of the predicted step in targets
            tgt = targets[s] if s < len(targets) else np.full(D, np.nan)
            vals = ",".join("%.17g" % v for v in forecasts[t1, j])
            tvals = ",".join("%.17g" % v for v in tgt)
            lines.append(f"{t1},{j + 1},{vals},{tvals}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
