"""Step 2: recover the symmetry-group decomposition by clustering actions.

Two actions land in the same cluster when one can be written as a short
power-composition of the other through some available action; the residual
of the best such composition, measured through the learned encoder, is the
pseudo-distance d_G.  Complete-linkage agglomeration with a threshold then
yields the partition.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ClusterError(Exception):
    pass


class PowerIterationError(ClusterError):
    """Power iteration failed to converge; carries the last estimate."""

    def __init__(self, message: str, estimate: float):
        super().__init__(message)
        self.estimate = estimate


def spectral_norm(a: np.ndarray, tol: float = 1e-8, max_iter: int = 10**4) -> float:
    """Largest singular value via power iteration on A^T A (all-ones start)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ClusterError("spectral_norm expects a square matrix")
    d = a.shape[0]
    ata = a.T @ a
    v = np.ones(d) / np.sqrt(d)
    est = float(np.linalg.norm(a @ v))
    for _ in range(max_iter):
        w = ata @ v
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
        new_est = float(np.linalg.norm(a @ v))
        if abs(new_est - est) <= tol:
            return new_est
        est = new_est
    raise PowerIterationError(f"no convergence after {max_iter} iterations", est)


def seminorm_h(a: np.ndarray, encodings: np.ndarray) -> float:
    """Mean over encodings z of ||A z||."""
    encodings = np.atleast_2d(np.asarray(encodings))
    if encodings.shape[0] == 0:
        raise ClusterError("empty encodings")
    return float(np.mean(np.linalg.norm(encodings @ np.asarray(a).T, axis=1)))


def dg(g: int, gp: int, matrices: dict[int, np.ndarray], encodings: np.ndarray,
       M: int) -> float:
    """Minimum residual over u, m <= M of the four composition forms."""
    if g == gp:
        raise ClusterError("dg is defined for distinct actions")
    if M < 1:
        raise ClusterError("M must be >= 1")
    ag, agp = matrices[g], matrices[gp]
    best = None
    for u in sorted(matrices):
        um = matrices[u]
        for _ in range(M):
            for cand in (
                seminorm_h(ag - um @ agp, encodings),
                seminorm_h(ag - agp @ um, encodings),
                seminorm_h(agp - um @ ag, encodings),
                seminorm_h(agp - ag @ um, encodings),
            ):
                if best is None or cand < best:
                    best = cand
            um = um @ matrices[u]
    return best


def distance_matrix(matrices: dict[int, np.ndarray], encodings: np.ndarray,
                    M: int) -> np.ndarray:
    ids = sorted(matrices)
    n = len(ids)
    out = np.zeros((n, n), dtype=np.float32)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = dg(ids[i], ids[j], matrices, encodings, M)
    return out


def threshold_theoretical(model, ds, M: int) -> dict:
    """epsilon = worst action residual, r = max spectral norm, eta = eps*(1+sum r^i)."""
    enc = model.encodings(ds)
    matrices = model.matrices()
    eps = 0.0
    for g in sorted(matrices):
        rows = ds.transitions[ds.transitions[:, 1] == g]
        if rows.shape[0] == 0:
            continue
        resid = enc[rows[:, 0]] @ matrices[g].T - enc[rows[:, 2]]
        eps = max(eps, float(np.max(np.linalg.norm(resid, axis=1))))
    r = max(spectral_norm(a) for a in matrices.values())
    eta = eps * (1.0 + sum(r**i for i in range(M + 1)))
    return {"epsilon": eps, "r": r, "eta": eta}


@dataclass
class ActionPartition:
    """A clustering of action ids plus the evidence it was built from."""

    clusters: list[set[int]]
    threshold_used: float
    distance_matrix: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for c in self.clusters:
            if seen & c:
                raise ClusterError("clusters overlap")
            seen |= c

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    def cluster_of(self) -> dict[int, int]:
        out = {}
        for k, c in enumerate(self.clusters):
            for g in c:
                out[g] = k
        return out

    def to_json(self) -> dict:
        return {
            "clusters": [sorted(c) for c in self.clusters],
            "threshold_used": self.threshold_used,
            "diagnostics": self.diagnostics,
        }

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "partition.json", "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
        with open(out / "distance_matrix.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in self.distance_matrix.tolist():
                writer.writerow([f"{v:.8g}" for v in row])

    @staticmethod
    def load(in_dir) -> "ActionPartition":
        src = Path(in_dir)
        with open(src / "partition.json") as fh:
            obj = json.load(fh)
        with open(src / "distance_matrix.csv", newline="") as fh:
            rows = [[float(v) for v in row] for row in csv.reader(fh)]
        return ActionPartition(
            [set(c) for c in obj["clusters"]],
            obj["threshold_used"],
            np.array(rows, dtype=np.float32),
            obj["diagnostics"],
        )


def merge_clusters(dist: np.ndarray, eta: float) -> list[set[int]]:
    """Complete-linkage agglomeration; stop when the best linkage exceeds eta."""
    clusters = [{i} for i in range(dist.shape[0])]
    while len(clusters) > 1:
        best, pair = None, None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                link = max(dist[a, b] for a in clusters[i] for b in clusters[j])
                if best is None or link < best:
                    best, pair = link, (i, j)
        if best is None or best > eta:
            break
        i, j = pair
        clusters[i] = clusters[i] | clusters[j]
        del clusters[j]
    return clusters


def cluster_actions(model, ds, M: int, threshold_mode: str = "practical_sigma",
                    manual_threshold: float | None = None) -> ActionPartition:
    """Recover the action partition from a trained model and its dataset."""
    enc = model.encodings(ds)
    matrices = model.matrices()
    diag = threshold_theoretical(model, ds, M)
    diag["M"] = M
    diag["eta_theoretical"] = diag.pop("eta")
    if threshold_mode == "practical_sigma":
        eta = float(model.sigma)
    elif threshold_mode == "theoretical":
        eta = diag["eta_theoretical"]
    elif threshold_mode == "manual":
        if manual_threshold is None:
            raise ClusterError("manual mode needs a threshold value")
        eta = float(manual_threshold)
    else:
        raise ClusterError(f"unknown threshold mode {threshold_mode!r}")

    dist = distance_matrix(matrices, enc, M)
    clusters = merge_clusters(dist, eta)
    return ActionPartition(clusters, eta, dist, diag)
