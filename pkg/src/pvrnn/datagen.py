"""Training/testing corpora: probabilistic finite-state machine sequences.

Two generators are provided.  The discrete one emits binary symbol streams
from a three-state machine whose third transition is stochastic (0 with
probability 0.3, 1 with probability 0.7).  The continuous one walks a
four-state machine over three 2-D movement primitives (circle, rotated
figure-eight, triangle), each drawn as a two-cycle pattern with per-instance
amplitude/speed jitter and per-step additive noise.

Discrete symbols {0,1} are stored raw in datasets; training maps them onto
the tanh output range via ``symbols_to_targets`` (0/1 -> -0.9/+0.9) and
analysis inverts with a threshold at 0, the image of the 0.5 midpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .numeric import RngStream

__all__ = [
    "PfsmSpec",
    "machine_a",
    "machine_b",
    "pfsm_generate_discrete",
    "PrimitiveTemplate",
    "default_templates",
    "pfsm_generate_primitives",
    "SequenceDataset",
    "dataset_save",
    "dataset_load",
    "DatasetFormatError",
    "symbols_to_targets",
    "targets_to_symbols",
    "exp1_corpus",
    "Exp2Corpus",
    "exp2_corpus",
]

PROB_TOL = 1e-12


@dataclass(frozen=True)
class PfsmSpec:
    """A probabilistic finite-state machine with emissions on transitions.

    transitions: (from_state, to_state, emission, probability) tuples.
    Emissions are ints in discrete mode or primitive ids (strings) in
    continuous mode.
    """

    states: tuple[str, ...]
    transitions: tuple[tuple[str, str, object, float], ...]
    start_state: str

    def __post_init__(self):
        if self.start_state not in self.states:
            raise ValueError(f"start state {self.start_state!r} not in states")
        for frm, to, _, p in self.transitions:
            if frm not in self.states or to not in self.states:
                raise ValueError(f"transition {frm}->{to} references unknown state")
            if not (0.0 < p <= 1.0):
                raise ValueError(f"transition {frm}->{to} has probability {p}")
        for state in self.states:
            out = [p for frm, _, _, p in self.transitions if frm == state]
            if out and abs(sum(out) - 1.0) > PROB_TOL:
                raise ValueError(
                    f"outgoing probabilities from {state!r} sum to {sum(out)!r}, not 1")

    def outgoing(self, state: str):
        return [t for t in self.transitions if t[0] == state]


def machine_a() -> PfsmSpec:
    """Three-state binary machine: 1, 0, then 0 w.p. 0.3 / 1 w.p. 0.7."""
    return PfsmSpec(
        states=("s1", "s2", "s3"),
        transitions=(
            ("s1", "s2", 1, 1.0),
            ("s2", "s3", 0, 1.0),
            ("s3", "s1", 0, 0.3),
            ("s3", "s1", 1, 0.7),
        ),
        start_state="s1",
    )


def machine_b() -> PfsmSpec:
    """Four-state primitive machine: A, B, A, then B w.p. 0.275 / C w.p. 0.725."""
    return PfsmSpec(
        states=("s1", "s2", "s3", "s4"),
        transitions=(
            ("s1", "s2", "A", 1.0),
            ("s2", "s3", "B", 1.0),
            ("s3", "s4", "A", 1.0),
            ("s4", "s1", "B", 0.275),
            ("s4", "s1", "C", 0.725),
        ),
        start_state="s1",
    )


def _walk(spec: PfsmSpec, n_emissions: int, rng: RngStream):
    """Emit `n_emissions` symbols by walking the machine from its start state."""
    state = spec.start_state
    out = []
    for _ in range(n_emissions):
        options = spec.outgoing(state)
        if not options:
            raise ValueError(f"state {state!r} has no outgoing transitions")
        if len(options) == 1:
            _, state, emission, _ = options[0]
        else:
            u = float(rng.random())
            acc = 0.0
            emission = options[-1][2]
            for _, to, em, p in options:
                acc += p
                if u < acc:
                    state, emission = to, em
                    break
            else:
                state = options[-1][1]
        out.append(emission)
    return out


def pfsm_generate_discrete(spec: PfsmSpec, length: int, rng: RngStream) -> np.ndarray:
    """Emission sequence of exactly `length` binary symbols."""
    if length < 0:
        raise ValueError("length must be >= 0")
    symbols = _walk(spec, length, rng)
    return np.asarray(symbols, dtype=np.int64)


# ---------------------------------------------------------------------------
# Continuous primitives
# ---------------------------------------------------------------------------

BASE_AMPLITUDE = 0.8  # leaves headroom for jitter/noise inside [-1, 1]


def _circle(phase: np.ndarray) -> np.ndarray:
    return np.stack([np.sin(2 * np.pi * phase), np.cos(2 * np.pi * phase)], axis=1)


def _figure_eight_rot90(phase: np.ndarray) -> np.ndarray:
    # (sin 2pi u, sin 4pi u) rotated by 90 degrees: (x, y) -> (-y, x)
    return np.stack([-np.sin(4 * np.pi * phase), np.sin(2 * np.pi * phase)], axis=1)


def _triangle(phase: np.ndarray) -> np.ndarray:
    verts = np.array([
        [0.0, 1.0],
        [-math.sqrt(3.0) / 2.0, -0.5],
        [math.sqrt(3.0) / 2.0, -0.5],
    ])
    seg = np.minimum((phase * 3).astype(np.int64), 2)
    frac = phase * 3 - seg
    a = verts[seg]
    b = verts[(seg + 1) % 3]
    return a + frac[:, None] * (b - a)


@dataclass(frozen=True)
class PrimitiveTemplate:
    """One cyclic 2-D movement primitive, drawn `cycles` times per instance."""

    id: str
    curve: Callable[[np.ndarray], np.ndarray]
    samples_per_cycle: int
    cycles: int = 2
    amplitude_jitter: float = 0.05
    speed_jitter: float = 0.05

    def instance(self, rng: RngStream | None = None) -> np.ndarray:
        """One jittered instance, shape (length, 2).  No additive noise here."""
        amp, speed = 1.0, 1.0
        if rng is not None:
            if self.amplitude_jitter > 0:
                amp = 1.0 + self.amplitude_jitter * float(rng.normal(1)[0])
            if self.speed_jitter > 0:
                speed = 1.0 + self.speed_jitter * float(rng.normal(1)[0])
        length = max(2 * self.cycles, int(round(self.cycles * self.samples_per_cycle / speed)))
        # integer phase arithmetic keeps the zero-jitter case exactly periodic
        k = (np.arange(length, dtype=np.int64) * self.cycles) % length
        phase = k / length
        return BASE_AMPLITUDE * amp * self.curve(phase)


def default_templates(samples_per_cycle: int = 14,
                      amplitude_jitter: float = 0.05,
                      speed_jitter: float = 0.05) -> dict[str, PrimitiveTemplate]:
    kw = dict(samples_per_cycle=samples_per_cycle, cycles=2,
              amplitude_jitter=amplitude_jitter, speed_jitter=speed_jitter)
    return {
        "A": PrimitiveTemplate("A", _circle, **kw),
        "B": PrimitiveTemplate("B", _figure_eight_rot90, **kw),
        "C": PrimitiveTemplate("C", _triangle, **kw),
    }


def pfsm_generate_primitives(spec: PfsmSpec, n_primitives: int,
                             templates: dict[str, PrimitiveTemplate],
                             rng: RngStream,
                             noise_std: float = 0.05):
    """Concatenated jittered primitive instances with per-step labels.

    Returns (trajectory (T, 2), labels (T,) of primitive ids).  Per-step
    Gaussian observation noise of std `noise_std` is added and the result is
    clipped into [-1, 1]^2.
    """
    if n_primitives < 1:
        raise ValueError("n_primitives must be >= 1")
    emissions = _walk(spec, n_primitives, rng)
    chunks, labels = [], []
    for em in emissions:
        if em not in templates:
            raise KeyError(f"no template for emitted primitive {em!r}")
        chunk = templates[em].instance(rng)
        chunks.append(chunk)
        labels.extend([em] * len(chunk))
    traj = np.concatenate(chunks, axis=0)
    if noise_std > 0:
        traj = traj + noise_std * rng.normal(traj.shape)
    np.clip(traj, -1.0, 1.0, out=traj)
    return traj, np.asarray(labels)


# ---------------------------------------------------------------------------
# Datasets and file I/O
# ---------------------------------------------------------------------------

class DatasetFormatError(ValueError):
    """Malformed dataset file; message carries the offending line number."""


@dataclass
class SequenceDataset:
    """A list of (T x D) float64 sequences sharing dimensionality D."""

    sequences: list[np.ndarray]
    dim: int
    provenance: str = "unknown"
    seed: int = 0

    def __post_init__(self):
        cleaned = []
        for i, seq in enumerate(self.sequences):
            arr = np.asarray(seq, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != self.dim:
                raise ValueError(
                    f"sequence {i} has shape {arr.shape}, expected (T, {self.dim})")
            cleaned.append(arr)
        self.sequences = cleaned

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def lengths(self) -> list[int]:
        return [len(s) for s in self.sequences]


def dataset_save(dataset: SequenceDataset, path) -> None:
    """Write a dataset as CSV: one `dim,length` header per sequence block."""
    path = Path(path)
    provenance = dataset.provenance.replace(" ", "_")
    lines = [
        f"# pvrnn-dataset v1 dim={dataset.dim} count={len(dataset)} "
        f"provenance={provenance} seed={dataset.seed}"
    ]
    for seq in dataset.sequences:
        lines.append(f"{dataset.dim},{len(seq)}")
        for row in seq:
            lines.append(",".join("%.17g" % v for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str, path: Path) -> dict:
    if not line.startswith("# pvrnn-dataset v1 "):
        raise DatasetFormatError(f"{path}:1: missing dataset header")
    fields = {}
    for token in line[len("# pvrnn-dataset v1 "):].split():
        key, _, value = token.partition("=")
        fields[key] = value
    for key in ("dim", "count", "provenance", "seed"):
        if key not in fields:
            raise DatasetFormatError(f"{path}:1: header missing '{key}'")
    return fields


def dataset_load(path) -> SequenceDataset:
    """Inverse of :func:`dataset_save`; lossless to full float precision."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}:1: empty file")
    header = _parse_header(lines[0], path)
    dim, count = int(header["dim"]), int(header["count"])
    sequences = []
    lineno = 1
    for _ in range(count):
        if lineno >= len(lines):
            raise DatasetFormatError(f"{path}:{lineno + 1}: truncated file "
                                     f"(expected {count} sequences, got {len(sequences)})")
        try:
            block_dim, block_len = (int(v) for v in lines[lineno].split(","))
        except ValueError as exc:
            raise DatasetFormatError(
                f"{path}:{lineno + 1}: bad block header {lines[lineno]!r}") from exc
        if block_dim != dim:
            raise DatasetFormatError(
                f"{path}:{lineno + 1}: block dim {block_dim} != dataset dim {dim}")
        lineno += 1
        rows = np.empty((block_len, dim), dtype=np.float64)
        for r in range(block_len):
            if lineno >= len(lines):
                raise DatasetFormatError(f"{path}:{lineno + 1}: truncated sequence block")
            parts = lines[lineno].split(",")
            if len(parts) != dim:
                raise DatasetFormatError(
                    f"{path}:{lineno + 1}: expected {dim} values, got {len(parts)}")
            try:
                rows[r] = [float(p) for p in parts]
            except ValueError as exc:
                raise DatasetFormatError(
                    f"{path}:{lineno + 1}: bad float in {lines[lineno]!r}") from exc
            lineno += 1
        sequences.append(rows)
    return SequenceDataset(sequences=sequences, dim=dim,
                           provenance=header["provenance"],
                           seed=int(header["seed"]))


# ---------------------------------------------------------------------------
# Symbol scaling and corpus builders
# ---------------------------------------------------------------------------

def symbols_to_targets(symbols: np.ndarray) -> np.ndarray:
    """Map binary symbols 0/1 onto the tanh output range as -0.9/+0.9."""
    return np.asarray(symbols, dtype=np.float64) * 1.8 - 0.9


def targets_to_symbols(outputs: np.ndarray) -> np.ndarray:
    """Invert the affine symbol map; the threshold 0 is the image of 0.5."""
    return (np.asarray(outputs) > 0.0).astype(np.int64)


def exp1_corpus(seed: int, n_sequences: int = 10, length: int = 24) -> SequenceDataset:
    """Discrete training corpus: `n_sequences` binary walks of machine A."""
    spec = machine_a()
    rng = RngStream(seed)
    sequences = [
        pfsm_generate_discrete(spec, length, rng).astype(np.float64)[:, None]
        for _ in range(n_sequences)
    ]
    return SequenceDataset(sequences, dim=1, provenance="exp1-pfsm-discrete", seed=seed)


@dataclass
class Exp2Corpus:
    """Continuous substitute corpus: train split plus two test splits."""

    train: SequenceDataset
    test_long: SequenceDataset
    test_short: SequenceDataset
    train_labels: list[np.ndarray] = field(default_factory=list)
    test_long_labels: list[np.ndarray] = field(default_factory=list)
    test_short_labels: list[np.ndarray] = field(default_factory=list)


def _primitive_sequences(spec, templates, rng, count, length, noise_std):
    seqs, labels = [], []
    approx = templates["A"].cycles * templates["A"].samples_per_cycle
    for _ in range(count):
        need = max(1, math.ceil(length / approx) + 2)
        traj, lab = pfsm_generate_primitives(spec, need, templates, rng, noise_std)
        while len(traj) < length:
            extra, lab_extra = pfsm_generate_primitives(spec, 2, templates, rng, noise_std)
            traj = np.concatenate([traj, extra])
            lab = np.concatenate([lab, lab_extra])
        seqs.append(traj[:length])
        labels.append(lab[:length])
    return seqs, labels


def exp2_corpus(seed: int, n_train: int = 16, train_len: int = 400,
                n_test: int = 32, test_len: int = 400,
                long_test_len: int = 6400, samples_per_cycle: int = 14,
                noise_std: float = 0.05) -> Exp2Corpus:
    """Continuous substitute corpus from machine B over the default templates."""
    spec = machine_b()
    templates = default_templates(samples_per_cycle)
    rng = RngStream(seed)
    train_seqs, train_lab = _primitive_sequences(
        spec, templates, rng, n_train, train_len, noise_std)
    long_seqs, long_lab = _primitive_sequences(
        spec, templates, rng, 1, long_test_len, noise_std)
    short_seqs, short_lab = _primitive_sequences(
        spec, templates, rng, n_test, test_len, noise_std)
    return Exp2Corpus(
        train=SequenceDataset(train_seqs, dim=2, provenance="exp2-primitives-train", seed=seed),
        test_long=SequenceDataset(long_seqs, dim=2, provenance="exp2-primitives-test-long", seed=seed),
        test_short=SequenceDataset(short_seqs, dim=2, provenance="exp2-primitives-test-short", seed=seed),
        train_labels=train_lab,
        test_long_labels=long_lab,
        test_short_labels=short_lab,
    )
