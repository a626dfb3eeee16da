"""Procedural fully-observable environments and transition datasets.

Renderers map factored world states to float32 images (or one-hot codes)
deterministically, using integer-only rasterization so output bytes are
identical across platforms.  Injectivity over the whole state space is
verified exhaustively at construction, which is what makes the observation
function a faithful window onto the world.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .group_core import (
    ActionCatalog,
    Action,
    GroupElement,
    GroupSpec,
    ORDER_LIMIT,
    WorldState,
    apply,
)
from .nn import Rng


class RenderError(Exception):
    """Renderer/spec mismatch or an injectivity failure."""


class DatasetError(Exception):
    """Bad dataset construction arguments."""


class TensorFileError(Exception):
    """Malformed tensor file."""


@dataclass(frozen=True)
class Observation:
    data: np.ndarray  # flat float32
    shape: tuple[int, ...]


# ---------------------------------------------------------------------------
# tensor file format: magic "GMAT", u32 version=1, u32 ndim, ndim * u32 dims,
# payload of prod(dims) little-endian float32, row-major

_MAGIC = b"GMAT"
_VERSION = 1


def write_tensor(path, data, dims) -> None:
    dims = [int(d) for d in dims]
    n = 1
    for d in dims:
        if d < 0 or d > 0xFFFFFFFF:
            raise TensorFileError(f"dimension {d} out of u32 range")
        n *= d
    if n > 2**31:
        raise TensorFileError("dims product overflows the format limit")
    arr = np.ascontiguousarray(np.asarray(data, dtype="<f4").reshape(-1))
    if arr.size != n:
        raise TensorFileError(f"payload length {arr.size} != dims product {n}")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(arr.tobytes())


def read_tensor(path) -> tuple[np.ndarray, list[int]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise TensorFileError(f"bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise TensorFileError("truncated header")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise TensorFileError(f"unsupported version {version}")
    off = 12
    if len(raw) < off + 4 * ndim:
        raise TensorFileError("truncated dims")
    dims = list(struct.unpack_from(f"<{ndim}I", raw, off))
    off += 4 * ndim
    n = 1
    for d in dims:
        n *= d
    if n > 2**31:
        raise TensorFileError("dims product overflows the format limit")
    if len(raw) != off + 4 * n:
        raise TensorFileError(f"payload size mismatch: got {len(raw) - off} bytes, want {4 * n}")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=off).copy()
    return data, dims


# ---------------------------------------------------------------------------
# renderers


class Renderer:
    """Common surface: deterministic render of any world state of the spec."""

    kind: str
    spec: GroupSpec
    obs_shape: tuple[int, ...]

    @property
    def obs_dim(self) -> int:
        n = 1
        for s in self.obs_shape:
            n *= s
        return n

    def render_index(self, state_index: int) -> np.ndarray:
        raise NotImplementedError

    def render(self, w: WorldState) -> Observation:
        if w.spec != self.spec:
            raise RenderError("state belongs to a different spec")
        return Observation(self.render_index(self.spec.state_index(w)), self.obs_shape)

    def to_json(self) -> dict:
        raise NotImplementedError


def _check_injective(table: np.ndarray, kind: str):
    digests = {row.tobytes() for row in table}
    if len(digests) != table.shape[0]:
        raise RenderError(f"{kind} renderer is not injective over the state space")


class OneHotRenderer(Renderer):
    """Basis vector of dimension |W| at the state's enumeration index."""

    kind = "onehot"

    def __init__(self, spec: GroupSpec):
        if spec.order > ORDER_LIMIT:
            raise RenderError("state space too large for one-hot observations")
        self.spec = spec
        self.obs_shape = (spec.order,)

    def render_index(self, state_index: int) -> np.ndarray:
        out = np.zeros(self.spec.order, dtype=np.float32)
        out[state_index] = 1.0
        return out

    def to_json(self) -> dict:
        return {"kind": "onehot"}


class FlatlandRenderer(Renderer):
    """A filled disk on a dark square image: x/y grid position plus a color.

    Expects factors [cyclic(n_x), cyclic(n_y), color] where the color factor
    is cyclic (indexing into `colors`) or symmetric(3) (channel-permuting
    `base_color`).  Disk membership uses integer distance tests only.
    """

    kind = "flatland"

    def __init__(self, spec: GroupSpec, image_px: int = 16,
                 colors=None, base_color=None, disk_radius_px: int | None = None,
                 threads: int = 1):
        if len(spec.factors) != 3:
            raise RenderError("flatland expects exactly three factors (x, y, color)")
        fx, fy, fc = spec.factors
        if fx.kind != "cyclic" or fy.kind != "cyclic":
            raise RenderError("flatland position factors must be cyclic")
        self.spec = spec
        self.image_px = int(image_px)
        self.nx, self.ny = fx.n, fy.n
        if fc.kind == "cyclic":
            if colors is None:
                raise RenderError("cyclic color factor needs an explicit color list")
            if len(colors) != fc.n:
                raise RenderError(f"need {fc.n} colors, got {len(colors)}")
            self.colors = [tuple(float(v) for v in c) for c in colors]
            self.base_color = None
        elif fc.n == 3:
            base = base_color if base_color is not None else (1 / 3, 2 / 3, 1.0)
            self.base_color = tuple(float(v) for v in base)
            self.colors = None
        else:
            raise RenderError("symmetric color factor is only supported on 3 channels")

        max_r = self.image_px // (2 * max(self.nx, self.ny))
        self.disk_radius_px = max_r if disk_radius_px is None else int(disk_radius_px)
        if self.disk_radius_px < 1:
            raise RenderError("image too small for a visible disk")
        if 2 * self.disk_radius_px * max(self.nx, self.ny) > self.image_px:
            raise RenderError("disks would overlap; shrink disk_radius_px")

        self.obs_shape = (self.image_px, self.image_px, 3)
        self._table = _render_table(self, threads)
        _check_injective(self._table, self.kind)

    def _color_of(self, coord) -> tuple[float, float, float]:
        if self.colors is not None:
            return self.colors[coord]
        return tuple(self.base_color[coord[i]] for i in range(3))

    def _cell_center(self, i: int, n: int) -> int:
        return ((2 * i + 1) * self.image_px) // (2 * n)

    def _draw(self, state_index: int) -> np.ndarray:
        w = self.spec.state_from_index(state_index)
        xi, yi, ci = w.coords
        img = np.zeros(self.obs_shape, dtype=np.float32)
        cx = self._cell_center(xi, self.nx)
        cy = self._cell_center(yi, self.ny)
        r = self.disk_radius_px
        color = self._color_of(ci)
        for y in range(max(0, cy - r), min(self.image_px, cy + r + 1)):
            for x in range(max(0, cx - r), min(self.image_px, cx + r + 1)):
                if (x - cx) ** 2 + (y - cy) ** 2 <= r * r:
                    img[y, x, :] = color
        return img.reshape(-1)

    def render_index(self, state_index: int) -> np.ndarray:
        return self._table[state_index].copy()

    def to_json(self) -> dict:
        out = {"kind": "flatland", "image_px": self.image_px,
               "disk_radius_px": self.disk_radius_px}
        if self.colors is not None:
            out["colors"] = [list(c) for c in self.colors]
        else:
            out["base_color"] = list(self.base_color)
        return out


class DialsRenderer(Renderer):
    """A row of rotating dials, one tile per object slot.

    Expects factors [symmetric(n), cyclic(k_1), ..., cyclic(k_n)].  Object i
    carries i+2 wedges of strictly decreasing radius (so no rotation maps the
    pattern onto itself, and wedge count identifies the object); the dial
    angle rotates the whole pattern by one sector per unit.  Sector membership
    is decided with integer cross products against precomputed boundary rays.
    """

    kind = "dials"

    _RAY_SCALE = 1 << 16

    def __init__(self, spec: GroupSpec, image_px: int = 12, threads: int = 1):
        if spec.factors[0].kind != "symmetric":
            raise RenderError("dials expects a leading symmetric factor")
        n = spec.factors[0].n
        if len(spec.factors) != n + 1:
            raise RenderError(f"dials expects one cyclic factor per object ({n})")
        for f in spec.factors[1:]:
            if f.kind != "cyclic":
                raise RenderError("dials object factors must be cyclic")
        self.spec = spec
        self.n_objects = n
        self.image_px = int(image_px)
        self.angle_counts = [f.n for f in spec.factors[1:]]
        self.obs_shape = (self.image_px, self.image_px * n)
        self._tiles = [
            [self._draw_tile(obj, a) for a in range(self.angle_counts[obj])]
            for obj in range(n)
        ]
        self._table = _render_table(self, threads)
        _check_injective(self._table, self.kind)

    def _rays(self, sectors: int) -> list[tuple[int, int]]:
        q = self._RAY_SCALE
        return [
            (round(q * math.cos(2 * math.pi * s / sectors)),
             round(q * math.sin(2 * math.pi * s / sectors)))
            for s in range(sectors)
        ]

    def _draw_tile(self, obj: int, angle: int) -> np.ndarray:
        px = self.image_px
        k = self.angle_counts[obj]
        wedges = obj + 2
        sectors = wedges * k
        rays = self._rays(sectors)
        half_width = max(1, k // 2)  # sectors per wedge
        radius = px // 2 - 1
        step = max(1, radius // (2 * wedges))
        spans = []
        for j in range(wedges):
            start = (j * k + angle * wedges) % sectors
            spans.append((start, (start + half_width) % sectors, radius - j * step))

        cx = cy = px // 2
        tile = np.zeros((px, px), dtype=np.float32)
        for y in range(px):
            for x in range(px):
                dx, dy = x - cx, y - cy
                rr = dx * dx + dy * dy
                if rr == 0 or rr > radius * radius:
                    continue
                for start, end, r in spans:
                    if rr > r * r:
                        continue
                    sx, sy = rays[start]
                    ex, ey = rays[end]
                    if sx * dy - sy * dx >= 0 and ex * dy - ey * dx < 0:
                        tile[y, x] = 1.0
                        break
        return tile

    def _draw(self, state_index: int) -> np.ndarray:
        w = self.spec.state_from_index(state_index)
        slots = w.coords[0]  # slots[t] = object shown in tile t
        img = np.zeros(self.obs_shape, dtype=np.float32)
        px = self.image_px
        for t in range(self.n_objects):
            obj = slots[t]
            angle = w.coords[1 + obj]
            img[:, t * px:(t + 1) * px] = self._tiles[obj][angle]
        return img.reshape(-1)

    def render_index(self, state_index: int) -> np.ndarray:
        return self._table[state_index].copy()

    def to_json(self) -> dict:
        return {"kind": "dials", "image_px": self.image_px}


def _render_table(renderer, threads: int = 1) -> np.ndarray:
    n = renderer.spec.order
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(renderer._draw, range(n)))
    else:
        rows = [renderer._draw(i) for i in range(n)]
    return np.stack(rows)


def renderer_from_json(spec: GroupSpec, obj: dict, threads: int = 1) -> Renderer:
    kind = obj.get("kind")
    if kind == "onehot":
        return OneHotRenderer(spec)
    if kind == "flatland":
        return FlatlandRenderer(
            spec,
            image_px=obj.get("image_px", 16),
            colors=obj.get("colors"),
            base_color=obj.get("base_color"),
            disk_radius_px=obj.get("disk_radius_px"),
            threads=threads,
        )
    if kind == "dials":
        return DialsRenderer(spec, image_px=obj.get("image_px", 12), threads=threads)
    raise RenderError(f"unknown renderer kind {kind!r}")


# ---------------------------------------------------------------------------
# transition datasets


@dataclass
class TransitionDataset:
    """Observations (one row per state) and (src, action, dst) transitions."""

    spec: GroupSpec
    catalog: ActionCatalog
    renderer: Renderer
    observations: np.ndarray          # (n_states, obs_dim) float32
    transitions: np.ndarray           # (n_transitions, 3) int64

    @property
    def n_states(self) -> int:
        return self.observations.shape[0]

    def obs(self, state_index: int) -> np.ndarray:
        return self.observations[state_index]


def gen_full_transitions(spec: GroupSpec, catalog: ActionCatalog,
                         renderer: Renderer) -> TransitionDataset:
    """Exactly one transition per (state, action) pair."""
    if spec.order * len(catalog) > ORDER_LIMIT:
        raise DatasetError("state-action space exceeds the enumeration limit")
    if renderer.spec != spec:
        raise RenderError("renderer built for a different spec")
    n = spec.order
    observations = np.stack([renderer.render_index(i) for i in range(n)])
    dst_of = np.empty((n, len(catalog)), dtype=np.int64)
    for i in range(n):
        w = spec.state_from_index(i)
        for a in catalog.actions:
            dst_of[i, a.id] = spec.state_index(apply(a.element, w))
    transitions = np.array(
        [(s, a, dst_of[s, a]) for s in range(n) for a in range(len(catalog))],
        dtype=np.int64,
    )
    return TransitionDataset(spec, catalog, renderer, observations, transitions)


def subsample_iid(ds: TransitionDataset, n_a: int, seed: int) -> TransitionDataset:
    """Keep exactly n_a uniformly chosen distinct actions per source state."""
    n_actions = len(ds.catalog)
    if not 1 <= n_a <= n_actions:
        raise DatasetError(f"n_a must be in [1, {n_actions}], got {n_a}")
    rng = Rng(seed)
    by_src: dict[int, dict[int, int]] = {}
    for s, a, d in ds.transitions:
        by_src.setdefault(int(s), {})[int(a)] = int(d)
    rows = []
    for s in sorted(by_src):
        chosen = sorted(rng.sample_indices(n_actions, n_a))
        for a in chosen:
            if a not in by_src[s]:
                raise DatasetError("subsample_iid needs a full transition set")
            rows.append((s, a, by_src[s][a]))
    return TransitionDataset(ds.spec, ds.catalog, ds.renderer,
                             ds.observations, np.array(rows, dtype=np.int64))


def ood_split(ds: TransitionDataset, allowed_action_ids) -> tuple[TransitionDataset, TransitionDataset]:
    """Partition transitions by action id: train = allowed, held out = rest."""
    allowed = set(int(a) for a in allowed_action_ids)
    if not allowed:
        raise DatasetError("allowed action set is empty")
    valid = {a.id for a in ds.catalog.actions}
    if not allowed <= valid:
        raise DatasetError(f"unknown action ids {sorted(allowed - valid)}")
    mask = np.isin(ds.transitions[:, 1], sorted(allowed))
    train = TransitionDataset(ds.spec, ds.catalog, ds.renderer,
                              ds.observations, ds.transitions[mask])
    held = TransitionDataset(ds.spec, ds.catalog, ds.renderer,
                             ds.observations, ds.transitions[~mask])
    return train, held


def ood_rightmost_split(ds: TransitionDataset) -> tuple[TransitionDataset, TransitionDataset]:
    """Keep rotations only when the rotated object sits in the right-most tile.

    Dials-style specs only (leading symmetric factor).  Permutations and
    identity actions stay in the train split, so every action id keeps
    training coverage; held-out transitions are rotations applied from states
    where the object is elsewhere.
    """
    if ds.spec.factors[0].kind != "symmetric":
        raise DatasetError("rightmost split needs a leading symmetric factor")
    n = ds.spec.factors[0].n
    rotated_obj = {}
    for a in ds.catalog.actions:
        nz = a.element.nontrivial_factors()
        rotated_obj[a.id] = nz[0] - 1 if len(nz) == 1 and nz[0] >= 1 else None
    keep = []
    for row, (s, a, _) in enumerate(ds.transitions):
        obj = rotated_obj[int(a)]
        if obj is None:
            keep.append(True)
        else:
            slots = ds.spec.state_from_index(int(s)).coords[0]
            keep.append(slots[n - 1] == obj)
    keep = np.array(keep)
    train = TransitionDataset(ds.spec, ds.catalog, ds.renderer,
                              ds.observations, ds.transitions[keep])
    held = TransitionDataset(ds.spec, ds.catalog, ds.renderer,
                             ds.observations, ds.transitions[~keep])
    return train, held


# ---------------------------------------------------------------------------
# dataset directory layout: observations.gmat + transitions.csv + catalog.json


def _element_to_json(el: GroupElement) -> list:
    return [list(p) if isinstance(p, tuple) else p for p in el.parts]


def _element_from_json(spec: GroupSpec, parts: list) -> GroupElement:
    return spec.element(parts)


def save_dataset(ds: TransitionDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "observations.gmat", ds.observations,
                 [ds.n_states, *ds.renderer.obs_shape])
    with open(out / "transitions.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["src", "action", "dst"])
        writer.writerows(ds.transitions.tolist())
    meta = {
        "group": ds.spec.to_json(),
        "renderer": ds.renderer.to_json(),
        "M": ds.catalog.M,
        "actions": [
            {"id": a.id, "element": _element_to_json(a.element), "true_factor": a.true_factor}
            for a in ds.catalog.actions
        ],
    }
    with open(out / "catalog.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_dataset(in_dir, threads: int = 1) -> TransitionDataset:
    src = Path(in_dir)
    with open(src / "catalog.json") as fh:
        meta = json.load(fh)
    spec = GroupSpec.from_json(meta["group"])
    renderer = renderer_from_json(spec, meta["renderer"], threads=threads)
    actions = tuple(
        Action(a["id"], _element_from_json(spec, a["element"]), a["true_factor"])
        for a in meta["actions"]
    )
    catalog = ActionCatalog(actions, meta["M"])
    data, dims = read_tensor(src / "observations.gmat")
    observations = data.reshape(dims[0], -1)
    rows = []
    with open(src / "transitions.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["src", "action", "dst"]:
            raise DatasetError(f"bad transitions header {header}")
        for row in reader:
            rows.append(tuple(int(v) for v in row))
    return TransitionDataset(spec, catalog, renderer, observations,
                             np.array(rows, dtype=np.int64))
