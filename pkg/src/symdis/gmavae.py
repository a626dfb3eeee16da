"""Step 3: group-masked autoencoder with block-structured action matrices.

Each latent dimension is softly assigned to one recovered subgroup through a
column-wise softmax over mask logits.  The mask turns every action matrix
into `pi pi^T (.) A + (1 - pi pi^T) (.) I`, so an action can only move the
dimensions of its own subgroup.  A target-entropy loss, annealed from ln K
down to zero, drives the soft assignment to a (near-)binary one without
collapsing it before the rest of the model has settled.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .avae import (
    AvaeConfig,
    AvaeModel,
    TrainingDiverged,
    _action_term,
    _sample_batch,
    act_scale_at,
    lr_at,
    save_bundle,
    _load_tensors,
)
from .env import TransitionDataset
from .nn import AdamState, Rng, Tensor, adam_step, backward


class MaskError(Exception):
    pass


@dataclass
class GmavaeConfig(AvaeConfig):
    lam_dis: float = 1.0
    mask_lr: float = 1e-2
    steps: int = 25000
    anneal_end: float = 0.6  # fraction of training at which the target entropy hits 0


def masked_matrix(a: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """pi pi^T (.) A + (1 - pi pi^T) (.) I, elementwise."""
    a = np.asarray(a)
    pi = np.asarray(pi)
    if pi.ndim != 1 or a.shape != (pi.size, pi.size):
        raise MaskError(f"mask of size {pi.shape} does not fit matrix {a.shape}")
    if np.any(pi < 0) or np.any(pi > 1):
        raise MaskError("mask entries must lie in [0, 1]")
    m = np.outer(pi, pi)
    eye = np.eye(pi.size, dtype=a.dtype)
    return m * a + (1.0 - m) * eye


def _masked_matrix_t(a: Tensor, pi: Tensor, eye: Tensor) -> Tensor:
    m = nn.outer(pi, pi)
    return nn.add(nn.mul(m, a), nn.mul(nn.sub(Tensor(np.float32(1.0)), m), eye))


def column_entropies(pi: np.ndarray) -> np.ndarray:
    """Natural-log entropy of each softmax column (0*log 0 = 0)."""
    pi = np.asarray(pi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pi > 0, pi * np.log(pi), 0.0)
    return -terms.sum(axis=0)


def dis_loss(pi: np.ndarray, c: float) -> float:
    """Sum over dimensions of |H(column) - C|."""
    return float(np.sum(np.abs(column_entropies(pi) - c)))


def anneal_c(step: int, total_steps: int, k: int, end: float = 0.8) -> float:
    """Linear target-entropy schedule: ln K at step 0, zero from `end` onward."""
    if not 0 <= step <= max(total_steps, 1):
        raise ValueError("step outside [0, total_steps]")
    if total_steps <= 0:
        return 0.0
    return math.log(k) * max(0.0, 1.0 - step / (end * total_steps))


def harden_masks(pi: np.ndarray) -> np.ndarray:
    """Binary masks by per-dimension argmax, then fix empty clusters greedily.

    Every cluster must end up with at least one dimension: each empty cluster
    (in index order) claims the dimension where its probability is highest,
    among dimensions whose current owner would keep at least one dimension.
    """
    pi = np.asarray(pi)
    k, d = pi.shape
    if k > d:
        raise MaskError(f"cannot give {k} clusters at least one of {d} dimensions")
    owner = pi.argmax(axis=0)
    counts = np.bincount(owner, minlength=k)
    for cluster in range(k):
        if counts[cluster] > 0:
            continue
        best_dim = -1
        best_p = -1.0
        for dim in range(d):
            if counts[owner[dim]] <= 1:
                continue
            if pi[cluster, dim] > best_p:
                best_p, best_dim = pi[cluster, dim], dim
        if best_dim < 0:
            raise MaskError("no reassignable dimension found")
        counts[owner[best_dim]] -= 1
        owner[best_dim] = cluster
        counts[cluster] += 1
    hard = np.zeros((k, d), dtype=np.float32)
    hard[owner, np.arange(d)] = 1.0
    return hard


class GmavaeModel(AvaeModel):
    """A-VAE plus mask logits and the action -> cluster assignment."""

    def __init__(self, obs_dim: int, n_actions: int, cfg: GmavaeConfig,
                 cluster_of: dict[int, int], rng: Rng):
        super().__init__(obs_dim, n_actions, cfg, rng)
        if set(cluster_of) != set(range(n_actions)):
            raise MaskError("partition must cover every action id")
        self.cluster_of = {int(g): int(k) for g, k in cluster_of.items()}
        self.k = max(self.cluster_of.values()) + 1
        if self.k > cfg.d:
            raise MaskError(f"{self.k} clusters exceed latent dimension {cfg.d}")
        self.lam_dis = cfg.lam_dis
        self.mask_logits = Tensor(rng.uniform((self.k, cfg.d), -0.01, 0.01))
        self.hard_masks: np.ndarray | None = None

    def soft_masks(self) -> np.ndarray:
        logits = self.mask_logits.data
        e = np.exp(logits - logits.max(axis=0, keepdims=True))
        return e / e.sum(axis=0, keepdims=True)

    def finalize_masks(self) -> np.ndarray:
        self.hard_masks = harden_masks(self.soft_masks())
        return self.hard_masks

    def masks(self, hard: bool = True) -> np.ndarray:
        if not hard:
            return self.soft_masks()
        if self.hard_masks is None:
            self.finalize_masks()
        return self.hard_masks

    def matrices(self, hard: bool = True) -> dict[int, np.ndarray]:
        """Masked action matrices (hard masks by default, for evaluation)."""
        masks = self.masks(hard)
        return {
            g: masked_matrix(np.tanh(p.data), masks[self.cluster_of[g]])
            for g, p in enumerate(self.action_p)
        }

    def dims_of_cluster(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.masks(True)[k] > 0.5)

    def params(self) -> list[Tensor]:
        return super().params() + [self.mask_logits]

    def named_tensors(self) -> dict[str, Tensor]:
        out = super().named_tensors()
        out["mask_logits"] = self.mask_logits
        return out

    def manifest(self) -> dict:
        man = super().manifest()
        man["kind"] = "gmavae"
        man["lam_dis"] = self.lam_dis
        man["cluster_of"] = {str(g): k for g, k in sorted(self.cluster_of.items())}
        man["hard_masks"] = None if self.hard_masks is None else self.hard_masks.tolist()
        return man

    @staticmethod
    def load(in_dir) -> "GmavaeModel":
        src = Path(in_dir)
        with open(src / "manifest.json") as fh:
            man = json.load(fh)
        cfg = GmavaeConfig(d=man["d"], sigma=man["sigma"], lam_act=man["lam_act"],
                           lam_dis=man["lam_dis"], hidden=tuple(man["hidden"]))
        cluster_of = {int(g): k for g, k in man["cluster_of"].items()}
        model = GmavaeModel(man["obs_dim"], man["n_actions"], cfg, cluster_of, Rng(0))
        _load_tensors(model.named_tensors(), src)
        if man["hard_masks"] is not None:
            model.hard_masks = np.array(man["hard_masks"], dtype=np.float32)
        return model


def gmavae_loss(model: GmavaeModel, x: np.ndarray, gids: np.ndarray, xp: np.ndarray,
                rng: Rng, c: float, eps: np.ndarray | None = None,
                lam_scale: float = 1.0):
    """Return (total Tensor, l_act, l_rec, l_dis) for one batch at target entropy c."""
    if len(x) == 0:
        raise ValueError("empty batch")
    b = x.shape[0]
    z = model.enc(Tensor(x))
    zp = model.enc(Tensor(xp))

    pi_cols = nn.softmax(model.mask_logits, axis=0)
    eye = Tensor(np.eye(model.d, dtype=np.float32))

    def matrix_of(g: int) -> Tensor:
        pi = nn.reshape(nn.take_rows(pi_cols, [model.cluster_of[g]]), (model.d,))
        return _masked_matrix_t(nn.tanh(model.action_p[g]), pi, eye)

    act_sum = _action_term(z, zp, np.asarray(gids), matrix_of)
    l_act = nn.mul(act_sum, 1.0 / b)

    if eps is None:
        eps = rng.normal((b, model.d))
    z_noisy = nn.add(zp, Tensor(model.sigma * eps))
    recon = model.dec(z_noisy)
    diff = nn.sub(Tensor(xp), recon)
    l_rec = nn.mul(nn.tsum(nn.mul(diff, diff)), 1.0 / b)

    ent = nn.mul(nn.tsum(nn.xlogx(pi_cols), axis=0), -1.0)
    l_dis = nn.tsum(nn.absolute(nn.sub(ent, Tensor(np.float32(c)))))

    total = nn.add(nn.add(l_rec, nn.mul(l_act, model.lam_act * lam_scale)),
                   nn.mul(l_dis, model.lam_dis))
    return total, float(l_act.data), float(l_rec.data), float(l_dis.data)


def train_gmavae(cfg: GmavaeConfig, ds: TransitionDataset, cluster_of: dict[int, int],
                 seed: int, warm_start: AvaeModel | None = None):
    """Deterministic training; returns (model, curves[steps, 3]) of (l_act, l_rec, l_dis).

    The mask logits train under their own (larger) learning rate so the
    entropy target can be tracked all the way to near-binary masks within the
    step budget.  Hard masks are finalized on the returned model.
    """
    if ds.transitions.shape[0] == 0:
        raise ValueError("dataset has no transitions")
    rng = Rng(seed)
    model = GmavaeModel(ds.observations.shape[1], len(ds.catalog), cfg, cluster_of, rng)
    if warm_start is not None:
        for mine, theirs in zip(model.enc.params() + model.dec.params(),
                                warm_start.enc.params() + warm_start.dec.params()):
            mine.data = theirs.data.copy()
    main = AdamState(model.enc.params() + model.dec.params() + model.action_p, lr=cfg.lr)
    masks = AdamState([model.mask_logits], lr=cfg.mask_lr)
    curves = np.zeros((cfg.steps, 3), dtype=np.float64)
    for step in range(cfg.steps):
        x, gids, xp = _sample_batch(ds, cfg.batch, rng)
        c = anneal_c(step, cfg.steps, model.k, cfg.anneal_end)
        try:
            loss, l_act, l_rec, l_dis = gmavae_loss(
                model, x, gids, xp, rng, c,
                lam_scale=act_scale_at(step, cfg.act_warmup),
            )
        except nn.NumericOverflowError as exc:
            raise TrainingDiverged(step, curves[:step]) from exc
        if not np.isfinite(loss.data):
            raise TrainingDiverged(step, curves[:step])
        backward(loss)
        scale = lr_at(step, cfg.steps, 1.0, cfg.lr_tail)
        adam_step(main, lr=cfg.lr * scale)
        # masks track the annealed target at the base rate (racing ahead locks
        # in a bad dimension allocation); once the target entropy reaches zero
        # the winners are settled and the faster rate just sharpens them
        mask_lr = cfg.lr if c > 0 else cfg.mask_lr
        adam_step(masks, lr=mask_lr * scale)
        curves[step] = (l_act, l_rec, l_dis)
    model.finalize_masks()
    return model, curves
