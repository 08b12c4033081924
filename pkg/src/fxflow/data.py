"""Dataset container, CSV I/O and the seeded synthetic generator.

CSV layout: a header row naming one column per (time step, feature) as
``t{T}_f{F}`` in row-major order, then a trailing integer ``label``
column.  Every sample must match the model's sequence length and input
dimension exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Dense, ModelGraph


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    samples: np.ndarray  # [n, seq_len, input_dim]
    labels: np.ndarray   # [n] integers

    def __len__(self) -> int:
        return self.samples.shape[0]


def expected_header(seq_len: int, input_dim: int) -> list[str]:
    cols = [f"t{t}_f{f}" for t in range(seq_len) for f in range(input_dim)]
    return cols + ["label"]


def load_csv(path: str | Path, seq_len: int, input_dim: int,
             n_classes: int) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        want = expected_header(seq_len, input_dim)
        if header != want:
            raise DataError(
                f"{path}: header mismatch, expected {len(want)} columns "
                f"t0_f0..t{seq_len-1}_f{input_dim-1},label")
        rows = []
        for ln, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(want):
                raise DataError(f"{path}:{ln}: expected {len(want)} fields, got {len(parts)}")
            rows.append([float(v) for v in parts])
    if not rows:
        raise DataError(f"{path}: empty dataset")
    arr = np.asarray(rows)
    samples = arr[:, :-1].reshape(-1, seq_len, input_dim)
    labels = arr[:, -1].astype(np.int64)
    if ((labels < 0) | (labels >= n_classes)).any():
        raise DataError(f"{path}: labels must lie in [0, {n_classes})")
    return Dataset(samples=samples, labels=labels)


def save_csv(ds: Dataset, path: str | Path) -> None:
    seq_len, input_dim = ds.samples.shape[1:]
    lines = [",".join(expected_header(seq_len, input_dim))]
    for x, y in zip(ds.samples, ds.labels):
        vals = [format(v, ".10g") for v in x.reshape(-1)]
        lines.append(",".join(vals + [str(int(y))]))
    Path(path).write_text("\n".join(lines) + "\n")


def n_classes_of(g: ModelGraph) -> int:
    out_dim = None
    for layer in g.layers:
        if isinstance(layer, Dense):
            out_dim = layer.units
    if out_dim is None:
        out_dim = g.input_dim
    return 2 if out_dim == 1 else out_dim


def synthetic_dataset(g: ModelGraph, n: int, seed: int = 0) -> Dataset:
    """Seeded sequences of tone mixtures: every sample draws its own
    frequencies, phases and amplitudes, with the frequency band shifted
    per class.  The per-sample diversity keeps model responses spread
    over both sides of any decision boundary while the class-banded
    frequencies keep labels correlated with the signal."""
    classes = n_classes_of(g)
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, g.seq_len)[:, None]
    samples = np.empty((n, g.seq_len, g.input_dim))
    labels = rng.integers(0, classes, size=n)
    for i in range(n):
        c = labels[i]
        freq = rng.uniform(1.0 + 1.5 * c, 4.0 + 1.5 * c, size=g.input_dim)
        phase = rng.uniform(0, 2 * np.pi, size=g.input_dim)
        amp = rng.uniform(0.8, 2.0, size=g.input_dim)
        off = rng.uniform(-0.5, 0.5, size=g.input_dim) + 0.1 * c
        clean = amp * np.sin(2 * np.pi * freq * t + phase) + off
        samples[i] = clean + rng.normal(0.0, 0.15, size=(g.seq_len, g.input_dim))
    return Dataset(samples=samples, labels=labels)


def resolve_dataset(spec: str, g: ModelGraph, seed: int) -> Dataset:
    """A dataset argument is either a CSV path or ``synthetic[:N]``."""
    if spec.startswith("synthetic"):
        n = 100
        if ":" in spec:
            n = int(spec.split(":", 1)[1])
        return synthetic_dataset(g, n, seed)
    return load_csv(spec, g.seq_len, g.input_dim, n_classes_of(g))
