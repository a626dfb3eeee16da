"""Exact algebra for direct products of cyclic and symmetric groups.

Elements, world states and actions are small immutable values; every
operation here is a pure function, so they can be shared freely between
threads.  Permutations are stored in image form (``p[i]`` is the image of
``i``) and composed right-to-left: ``(a * b)[i] == a[b[i]]``, i.e. ``b``
acts first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations as _permutations
from typing import Iterator, Sequence

ORDER_LIMIT = 10**6


class GroupError(Exception):
    """Base class for structural group errors."""


class SpecMismatchError(GroupError):
    """Operands belong to different group specs."""


class OrderLimitError(GroupError):
    """Enumeration would exceed the hard order limit."""


class AmbiguousDimensionError(GroupError):
    """The minimal-dimension table leaves two candidate values.

    Carries ``bounds`` with both candidates (lower, upper).
    """

    def __init__(self, message: str, bounds: tuple[int, int]):
        super().__init__(message)
        self.bounds = bounds


@dataclass(frozen=True)
class FactorSpec:
    """One direct factor: a cyclic group Z/nZ or a symmetric group on n points."""

    kind: str  # "cyclic" | "symmetric"
    n: int

    def __post_init__(self):
        if self.kind not in ("cyclic", "symmetric"):
            raise GroupError(f"unknown factor kind {self.kind!r}")
        if self.n < 2:
            raise GroupError(f"factor size must be >= 2, got {self.n}")

    @property
    def order(self) -> int:
        return self.n if self.kind == "cyclic" else math.factorial(self.n)

    def identity_part(self):
        return 0 if self.kind == "cyclic" else tuple(range(self.n))

    def parts(self) -> Iterator:
        """All parts of this factor in canonical (enumeration) order."""
        if self.kind == "cyclic":
            yield from range(self.n)
        else:
            yield from _permutations(range(self.n))

    def part_index(self, part) -> int:
        """Canonical index of a part (cyclic value, or lexicographic perm rank)."""
        if self.kind == "cyclic":
            return int(part)
        return _perm_rank(part)

    def part_from_index(self, idx: int):
        if self.kind == "cyclic":
            return idx
        return _perm_unrank(idx, self.n)

    def validate_part(self, part):
        if self.kind == "cyclic":
            if not isinstance(part, int) or not 0 <= part < self.n:
                raise GroupError(f"cyclic part must be an int in [0, {self.n}), got {part!r}")
        else:
            if tuple(sorted(part)) != tuple(range(self.n)):
                raise GroupError(f"not a permutation of 0..{self.n - 1}: {part!r}")


def cyclic(n: int) -> FactorSpec:
    return FactorSpec("cyclic", n)


def symmetric(n: int) -> FactorSpec:
    return FactorSpec("symmetric", n)


def _perm_rank(perm: Sequence[int]) -> int:
    perm = list(perm)
    n = len(perm)
    pool = list(range(n))
    rank = 0
    for v in perm:
        k = pool.index(v)
        rank = rank * len(pool) + k
        pool.pop(k)
    return rank


def _perm_unrank(rank: int, n: int) -> tuple[int, ...]:
    pool = list(range(n))
    out = []
    for i in range(n, 0, -1):
        stride = math.factorial(i - 1)
        k, rank = divmod(rank, stride)
        out.append(pool.pop(k))
    return tuple(out)


def _perm_compose(a: Sequence[int], b: Sequence[int]) -> tuple[int, ...]:
    # (a o b)[i] = a[b[i]]; b acts first.
    return tuple(a[b[i]] for i in range(len(a)))


def _perm_inverse(p: Sequence[int]) -> tuple[int, ...]:
    out = [0] * len(p)
    for i, v in enumerate(p):
        out[v] = i
    return tuple(out)


@dataclass(frozen=True)
class GroupSpec:
    """A direct product of cyclic and symmetric factors."""

    factors: tuple[FactorSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if not self.factors:
            raise GroupError("a group spec needs at least one factor")

    @property
    def order(self) -> int:
        n = 1
        for f in self.factors:
            n *= f.order
        return n

    def identity(self) -> "GroupElement":
        return GroupElement(self, tuple(f.identity_part() for f in self.factors))

    def element(self, parts: Sequence) -> "GroupElement":
        parts = tuple(tuple(p) if isinstance(p, (list, tuple)) else p for p in parts)
        if len(parts) != len(self.factors):
            raise GroupError(f"expected {len(self.factors)} parts, got {len(parts)}")
        for f, p in zip(self.factors, parts):
            f.validate_part(p)
        return GroupElement(self, parts)

    def embed(self, factor: int, part) -> "GroupElement":
        """Element that is `part` in one factor and identity elsewhere."""
        parts = [f.identity_part() for f in self.factors]
        parts[factor] = tuple(part) if isinstance(part, (list, tuple)) else part
        return self.element(parts)

    def shift(self, factor: int, amount: int) -> "GroupElement":
        f = self.factors[factor]
        if f.kind != "cyclic":
            raise GroupError(f"factor {factor} is not cyclic")
        return self.embed(factor, amount % f.n)

    def elements(self) -> Iterator["GroupElement"]:
        if self.order > ORDER_LIMIT:
            raise OrderLimitError(f"group order {self.order} exceeds limit {ORDER_LIMIT}")

        def rec(i, acc):
            if i == len(self.factors):
                yield GroupElement(self, tuple(acc))
                return
            for p in self.factors[i].parts():
                acc.append(p)
                yield from rec(i + 1, acc)
                acc.pop()

        yield from rec(0, [])

    def states(self) -> Iterator["WorldState"]:
        if self.order > ORDER_LIMIT:
            raise OrderLimitError(f"state space {self.order} exceeds limit {ORDER_LIMIT}")
        for g in self.elements():
            yield WorldState(self, g.parts)

    def state_index(self, w: "WorldState") -> int:
        idx = 0
        for f, c in zip(self.factors, w.coords):
            idx = idx * f.order + f.part_index(c)
        return idx

    def state_from_index(self, idx: int) -> "WorldState":
        coords = []
        for f in reversed(self.factors):
            idx, k = divmod(idx, f.order)
            coords.append(f.part_from_index(k))
        return WorldState(self, tuple(reversed(coords)))

    def to_json(self) -> dict:
        return {"factors": [{f.kind: f.n} for f in self.factors]}

    @staticmethod
    def from_json(obj: dict) -> "GroupSpec":
        factors = []
        for item in obj["factors"]:
            if len(item) != 1:
                raise GroupError(f"bad factor entry {item!r}")
            (kind, n), = item.items()
            factors.append(FactorSpec(kind, int(n)))
        return GroupSpec(tuple(factors))


@dataclass(frozen=True)
class GroupElement:
    spec: GroupSpec
    parts: tuple

    def is_identity(self) -> bool:
        return all(p == f.identity_part() for f, p in zip(self.spec.factors, self.parts))

    def nontrivial_factors(self) -> tuple[int, ...]:
        """Indices of factors where this element differs from the identity."""
        return tuple(
            i for i, (f, p) in enumerate(zip(self.spec.factors, self.parts))
            if p != f.identity_part()
        )


@dataclass(frozen=True)
class WorldState:
    spec: GroupSpec
    coords: tuple


def _check_same_spec(a, b):
    if a.spec != b.spec:
        raise SpecMismatchError("operands belong to different group specs")


def compose(a: GroupElement, b: GroupElement) -> GroupElement:
    """Componentwise product a*b, with b acting first on permutation factors."""
    _check_same_spec(a, b)
    parts = []
    for f, pa, pb in zip(a.spec.factors, a.parts, b.parts):
        if f.kind == "cyclic":
            parts.append((pa + pb) % f.n)
        else:
            parts.append(_perm_compose(pa, pb))
    return GroupElement(a.spec, tuple(parts))


def inverse(g: GroupElement) -> GroupElement:
    parts = []
    for f, p in zip(g.spec.factors, g.parts):
        if f.kind == "cyclic":
            parts.append((-p) % f.n)
        else:
            parts.append(_perm_inverse(p))
    return GroupElement(g.spec, tuple(parts))


def power(g: GroupElement, m: int) -> GroupElement:
    if m < 0:
        return power(inverse(g), -m)
    out = g.spec.identity()
    for _ in range(m):
        out = compose(out, g)
    return out


def apply(g: GroupElement, w: WorldState) -> WorldState:
    """Act on a world state: cyclic coords shift, slot permutations compose."""
    _check_same_spec(g, w)
    coords = []
    for f, pg, c in zip(g.spec.factors, g.parts, w.coords):
        if f.kind == "cyclic":
            coords.append((c + pg) % f.n)
        else:
            coords.append(_perm_compose(pg, c))
    return WorldState(w.spec, tuple(coords))


def generated_subgroup(spec: GroupSpec, gens: Sequence[GroupElement]) -> set[GroupElement]:
    """Closure of `gens` under composition (= generated subgroup; G is finite)."""
    if spec.order > ORDER_LIMIT:
        raise OrderLimitError(f"group order {spec.order} exceeds limit {ORDER_LIMIT}")
    for g in gens:
        if g.spec != spec:
            raise SpecMismatchError("generator from a different spec")
    seen = {spec.identity()}
    frontier = list(seen)
    gens = list(gens)
    while frontier:
        nxt = []
        for a in frontier:
            for s in gens:
                b = compose(a, s)
                if b not in seen:
                    seen.add(b)
                    nxt.append(b)
                    if len(seen) > ORDER_LIMIT:
                        raise OrderLimitError("closure exceeded order limit")
        frontier = nxt
    return seen


@dataclass(frozen=True)
class Action:
    """A catalog entry: the element plus its ground-truth factor (evaluation only)."""

    id: int
    element: GroupElement
    true_factor: int


@dataclass(frozen=True)
class ActionCatalog:
    actions: tuple[Action, ...]
    M: int = 2

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        if self.M < 1:
            raise GroupError("composition depth M must be >= 1")
        ids = [a.id for a in self.actions]
        if ids != list(range(len(ids))):
            raise GroupError("action ids must be dense 0..n-1")

    def __len__(self) -> int:
        return len(self.actions)

    def element(self, action_id: int) -> GroupElement:
        return self.actions[action_id].element

    def true_partition(self) -> list[set[int]]:
        """Ground-truth clustering of action ids by factor (evaluation only)."""
        by_factor: dict[int, set[int]] = {}
        for a in self.actions:
            by_factor.setdefault(a.true_factor, set()).add(a.id)
        return [by_factor[k] for k in sorted(by_factor)]


def catalog_from_factor_actions(
    spec: GroupSpec, factor_actions: Sequence[Sequence], M: int = 2
) -> ActionCatalog:
    """Build a catalog from per-factor part lists (ids assigned in order)."""
    actions = []
    for k, parts in enumerate(factor_actions):
        for p in parts:
            el = spec.embed(k, p)
            actions.append(Action(len(actions), el, k))
    return ActionCatalog(tuple(actions), M)


def check_assumption_disentangled(catalog: ActionCatalog, spec: GroupSpec) -> bool:
    """Every non-identity action touches exactly one factor."""
    for a in catalog.actions:
        if a.element.spec != spec:
            raise SpecMismatchError("catalog element from a different spec")
        if a.element.is_identity():
            continue
        if len(a.element.nontrivial_factors()) != 1:
            return False
    return True


def check_assumption_compo(catalog: ActionCatalog, spec: GroupSpec) -> bool:
    """Same-factor pairs are related by g = u^m g' (or a mirrored form), m <= M.

    Brute force over u in the catalog and m in [1, M].  Pairs involving the
    identity action are vacuously fine (the identity sits in every subgroup).
    """
    powers = []
    for u in catalog.actions:
        acc, ps = u.element, []
        for _ in range(catalog.M):
            ps.append(acc)
            acc = compose(acc, u.element)
        powers.append(ps)

    def related(g: GroupElement, gp: GroupElement) -> bool:
        for ps in powers:
            for um in ps:
                if (
                    g == compose(um, gp)
                    or g == compose(gp, um)
                    or gp == compose(g, um)
                    or gp == compose(um, g)
                ):
                    return True
        return False

    acts = [a for a in catalog.actions if not a.element.is_identity()]
    for i, a in enumerate(acts):
        for b in acts[i + 1:]:
            fa = a.element.nontrivial_factors()
            fb = b.element.nontrivial_factors()
            if fa != fb or a.element == b.element:
                continue
            if not related(a.element, b.element):
                return False
    return True


def minimal_dim(factor: FactorSpec, orthogonal: bool) -> int:
    """Minimal dimension of a faithful linear (or special-orthogonal) representation."""
    n = factor.n
    if factor.kind == "cyclic":
        if not orthogonal:
            return 1 if n == 2 else 2
        return 2
    # symmetric
    if n == 2:
        return 2 if orthogonal else 1
    if n == 3:
        return 3 if orthogonal else 2
    if n == 4:
        return 3
    # n >= 5: linear case is n-1; the special-orthogonal value is only
    # bounded to {n-1, n}.
    if not orthogonal:
        return n - 1
    raise AmbiguousDimensionError(
        f"minimal SO dimension for a symmetric group on {n} points is n-1 or n",
        bounds=(n - 1, n),
    )
