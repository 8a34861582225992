"""Average-softmax similarity between categories and GV-thresholded grouping.

Two categories ``i`` and ``j`` of a node with ``K`` outputs are linked when
their symmetrised confusion ``(S[i, j] + S[j, i]) / 2`` is strictly greater
than ``gv / K``; groups are the connected components of that link graph.
``1 / K`` is the confusion of a uniform classifier, so ``gv`` says how far above
chance two categories must be confused before they share a supergroup.  Raising
``gv`` removes links, so the grouping can only get finer.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
import torch

ROW_TOL = 1e-6


class SimilarityError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityMatrix:
    entries: np.ndarray
    labels: tuple

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise SimilarityError(f"similarity matrix must be square, got shape {m.shape}")
        if len(self.labels) != m.shape[0]:
            raise SimilarityError("one label per matrix row is required")
        object.__setattr__(self, "entries", m)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def k(self) -> int:
        return self.entries.shape[0]

    def check_stochastic(self, tol: float = ROW_TOL) -> None:
        m = self.entries
        if np.any(m < -tol) or np.any(m > 1 + tol):
            raise SimilarityError("similarity entries must lie in [0, 1]")
        sums = m.sum(axis=1)
        bad = np.nonzero(np.abs(sums - 1.0) > tol)[0]
        if bad.size:
            raise SimilarityError(f"rows {bad.tolist()} do not sum to 1 (sums {sums[bad].tolist()})")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.labels)
        for row in self.entries:
            writer.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SimilarityMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        labels = [_parse_label(x) for x in rows[0]]
        return cls(np.array([[float(v) for v in r] for r in rows[1:]]), tuple(labels))


def _parse_label(text):
    try:
        return int(text)
    except ValueError:
        return text


@dataclass(frozen=True)
class Grouping:
    partition: tuple  # tuple of sorted tuples of labels
    gv_used: float

    @property
    def count(self) -> int:
        return len(self.partition)


@torch.no_grad()
def compute_similarity(node_model, val_data, labels, batch_size: int = 256) -> SimilarityMatrix:
    """Row ``i`` is the mean softmax vector over validation images of group ``i``.

    ``val_data`` is an iterable of ``(images, targets)`` batches whose targets
    index ``labels``; ``node_model(images)`` returns softmax probabilities.
    """
    k = len(labels)
    sums = torch.zeros(k, k, dtype=torch.float64)
    counts = torch.zeros(k, dtype=torch.float64)
    was_training = getattr(node_model, "training", False)
    if hasattr(node_model, "eval"):
        node_model.eval()
    try:
        for images, targets in val_data:
            probs = node_model(images).to(torch.float64)
            if probs.shape[1] != k:
                raise SimilarityError(f"model emits {probs.shape[1]} outputs but {k} labels were given")
            targets = torch.as_tensor(targets, dtype=torch.long)
            sums.index_add_(0, targets, probs)
            counts += torch.bincount(targets, minlength=k).to(torch.float64)
    finally:
        if was_training:
            node_model.train()
    empty = torch.nonzero(counts == 0).flatten().tolist()
    if empty:
        raise SimilarityError(f"no validation images for labels {[labels[i] for i in empty]}")
    return SimilarityMatrix((sums / counts[:, None]).numpy(), tuple(labels))


def link_matrix(sim: SimilarityMatrix, gv: float) -> np.ndarray:
    m = sim.entries
    score = (m + m.T) / 2.0
    linked = score > gv / sim.k
    np.fill_diagonal(linked, False)
    return linked


def _canonical(components, labels):
    parts = [tuple(sorted(labels[i] for i in comp)) for comp in components]
    return tuple(sorted(parts, key=lambda p: p[0]))


def group_categories(sim: SimilarityMatrix, gv: float) -> Grouping:
    if not gv > 0:
        raise SimilarityError(f"grouping volatility must be > 0, got {gv}")
    sim.check_stochastic()
    linked = link_matrix(sim, gv)
    k = sim.k
    parent = list(range(k))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in zip(*np.nonzero(np.triu(linked, 1))):
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    comps: dict[int, list[int]] = {}
    for i in range(k):
        comps.setdefault(find(i), []).append(i)
    return Grouping(_canonical(comps.values(), sim.labels), float(gv))


def grouping_profile(sim: SimilarityMatrix, gv_values) -> list[tuple[float, int]]:
    gv_values = list(gv_values)
    if any(b < a for a, b in zip(gv_values, gv_values[1:])):
        raise SimilarityError("gv_values must be sorted ascending")
    return [(gv, group_categories(sim, gv).count) for gv in gv_values]


def refines(fine: Grouping, coarse: Grouping) -> bool:
    """True when every set of ``fine`` lies inside one set of ``coarse``."""
    owner = {label: i for i, part in enumerate(coarse.partition) for label in part}
    return all(len({owner[label] for label in part}) == 1 for part in fine.partition)
