"""Step 1: entangled action-equivariant autoencoder.

Encoder and decoder are dense MLPs; each action gets a freely parameterized
latent matrix A_g = tanh(P_g) applied to the encoding of the source
observation.  The loss couples a latent action-consistency term with a
reparameterized reconstruction of the next observation (fixed noise scales,
so the constant ELBO terms drop out):

    L = mean ||x' - dec(enc(x') + sigma * eps)||^2
        + lam_act * mean ||A_g enc(x) - enc(x')||^2
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .env import TransitionDataset, read_tensor, write_tensor
from .nn import AdamState, Mlp, Rng, Tensor, adam_step, backward


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the step and last finite losses."""

    def __init__(self, step: int, history):
        super().__init__(f"training diverged at step {step}")
        self.step = step
        self.history = history


@dataclass
class AvaeConfig:
    d: int = 13
    lam_act: float = 1.0
    lr: float = 1e-3
    batch: int = 16
    steps: int = 20000
    sigma: float = 0.1
    hidden: tuple[int, ...] = (128, 64)
    lr_tail: float = 0.3  # fraction of steps with lr annealed linearly to 0
    act_warmup: int = 4000  # steps over which lam_act ramps 0 -> full


def act_scale_at(step: int, warmup: int) -> float:
    """Ramp for the action-loss weight.

    With the full weight from step one, the action term drags every encoding
    onto a common fixed point of the near-identity matrices faster than the
    noise-blinded decoder can pull them apart, and training sits on a
    predict-the-mean plateau for a long time.  Letting reconstruction win the
    opening avoids the collapse entirely.
    """
    if warmup <= 0:
        return 1.0
    return min(1.0, step / warmup)


def lr_at(step: int, steps: int, lr: float, tail: float) -> float:
    """Constant lr, then a linear ramp to zero over the final `tail` fraction.

    The ramp quenches the optimizer jitter caused by the reparameterization
    noise, which otherwise leaves the action residual on a plateau well above
    the evaluation tolerances at this problem scale.
    """
    if tail <= 0 or steps <= 0:
        return lr
    start = int(steps * (1.0 - tail))
    if step < start:
        return lr
    return lr * (steps - step) / max(1, steps - start)


class AvaeModel:
    """Encoder, decoder and one tanh-parameterized latent matrix per action."""

    def __init__(self, obs_dim: int, n_actions: int, cfg: AvaeConfig, rng: Rng):
        self.obs_dim = obs_dim
        self.d = cfg.d
        self.sigma = cfg.sigma
        self.lam_act = cfg.lam_act
        enc_sizes = [obs_dim, *cfg.hidden, cfg.d]
        dec_sizes = [cfg.d, *reversed(cfg.hidden), obs_dim]
        self.enc = Mlp(enc_sizes, ["relu"] * len(cfg.hidden) + ["linear"], rng)
        self.dec = Mlp(dec_sizes, ["relu"] * len(cfg.hidden) + ["sigmoid"], rng)
        # start matrices near the identity: a near-zero init drags all
        # encodings to the origin through the action term before the
        # reconstruction can separate them
        a = 0.1 / cfg.d
        eye = np.eye(cfg.d, dtype=np.float32)
        self.action_p = [
            Tensor(rng.uniform((cfg.d, cfg.d), -a, a) + eye) for _ in range(n_actions)
        ]

    # forward surfaces ------------------------------------------------------

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.enc.apply_np(np.atleast_2d(np.asarray(x, dtype=np.float32)))

    def decode(self, z: np.ndarray) -> np.ndarray:
        return self.dec.apply_np(np.atleast_2d(np.asarray(z, dtype=np.float32)))

    def action_matrix(self, action_id: int) -> np.ndarray:
        if not 0 <= action_id < len(self.action_p):
            raise KeyError(f"unknown action id {action_id}")
        return np.tanh(self.action_p[action_id].data)

    def matrices(self) -> dict[int, np.ndarray]:
        return {g: self.action_matrix(g) for g in range(len(self.action_p))}

    def encodings(self, ds: TransitionDataset) -> np.ndarray:
        """Latent codes for every state observation of the dataset."""
        return self.enc.apply_np(ds.observations)

    def params(self) -> list[Tensor]:
        return self.enc.params() + self.dec.params() + self.action_p

    # persistence ------------------------------------------------------------

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.enc.weights, self.enc.biases)):
            out[f"enc_w{i}"], out[f"enc_b{i}"] = w, b
        for i, (w, b) in enumerate(zip(self.dec.weights, self.dec.biases)):
            out[f"dec_w{i}"], out[f"dec_b{i}"] = w, b
        for g, p in enumerate(self.action_p):
            out[f"action_p{g}"] = p
        return out

    def manifest(self) -> dict:
        return {
            "kind": "avae",
            "obs_dim": self.obs_dim,
            "n_actions": len(self.action_p),
            "d": self.d,
            "sigma": self.sigma,
            "lam_act": self.lam_act,
            "hidden": list(self.enc.sizes[1:-1]),
        }

    def save(self, out_dir) -> None:
        save_bundle(self, out_dir)

    @staticmethod
    def load(in_dir) -> "AvaeModel":
        src = Path(in_dir)
        with open(src / "manifest.json") as fh:
            man = json.load(fh)
        cfg = AvaeConfig(d=man["d"], sigma=man["sigma"], lam_act=man["lam_act"],
                         hidden=tuple(man["hidden"]))
        model = AvaeModel(man["obs_dim"], man["n_actions"], cfg, Rng(0))
        _load_tensors(model.named_tensors(), src)
        return model


def save_bundle(model, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    named = model.named_tensors()
    for name, t in named.items():
        write_tensor(out / f"{name}.gmat", t.data, list(t.data.shape))
    man = model.manifest()
    man["tensors"] = sorted(named)
    with open(out / "manifest.json", "w") as fh:
        json.dump(man, fh, indent=1, sort_keys=True)


def _load_tensors(named: dict[str, Tensor], src: Path) -> None:
    for name, t in named.items():
        data, dims = read_tensor(src / f"{name}.gmat")
        t.data = data.reshape(dims).astype(np.float32)


# ---------------------------------------------------------------------------
# loss and training


def _action_term(z: Tensor, zp: Tensor, gids: np.ndarray, matrix_of) -> Tensor:
    """sum over the batch of ||A_g z - z'||^2, grouped by action id."""
    total = None
    for g in sorted(set(int(v) for v in gids)):
        rows = np.flatnonzero(gids == g)
        a_t = matrix_of(g)
        zg = nn.take_rows(z, rows)
        zpg = nn.take_rows(zp, rows)
        diff = nn.sub(nn.matmul(zg, nn.transpose(a_t)), zpg)
        sq = nn.tsum(nn.mul(diff, diff))
        total = sq if total is None else nn.add(total, sq)
    return total


def avae_loss(model: AvaeModel, x: np.ndarray, gids: np.ndarray, xp: np.ndarray,
              rng: Rng, eps: np.ndarray | None = None, lam_scale: float = 1.0):
    """Return (total loss Tensor, l_act float, l_rec float) for one batch."""
    if len(x) == 0:
        raise ValueError("empty batch")
    b = x.shape[0]
    z = model.enc(Tensor(x))
    zp = model.enc(Tensor(xp))

    act_sum = _action_term(z, zp, np.asarray(gids), lambda g: nn.tanh(model.action_p[g]))
    l_act = nn.mul(act_sum, 1.0 / b)

    if eps is None:
        eps = rng.normal((b, model.d))
    z_noisy = nn.add(zp, Tensor(model.sigma * eps))
    recon = model.dec(z_noisy)
    diff = nn.sub(Tensor(xp), recon)
    l_rec = nn.mul(nn.tsum(nn.mul(diff, diff)), 1.0 / b)

    total = nn.add(l_rec, nn.mul(l_act, model.lam_act * lam_scale))
    return total, float(l_act.data), float(l_rec.data)


def _sample_batch(ds: TransitionDataset, batch: int, rng: Rng):
    rows = [rng.randint(ds.transitions.shape[0]) for _ in range(batch)]
    tr = ds.transitions[rows]
    x = ds.observations[tr[:, 0]]
    xp = ds.observations[tr[:, 2]]
    return x, tr[:, 1], xp


def train_avae(cfg: AvaeConfig, ds: TransitionDataset, seed: int):
    """Deterministic training; returns (model, curves[steps, 2]) of (l_act, l_rec)."""
    if ds.transitions.shape[0] == 0:
        raise ValueError("dataset has no transitions")
    rng = Rng(seed)
    model = AvaeModel(ds.observations.shape[1], len(ds.catalog), cfg, rng)
    opt = AdamState(model.params(), lr=cfg.lr)
    curves = np.zeros((cfg.steps, 2), dtype=np.float64)
    for step in range(cfg.steps):
        x, gids, xp = _sample_batch(ds, cfg.batch, rng)
        try:
            loss, l_act, l_rec = avae_loss(
                model, x, gids, xp, rng,
                lam_scale=act_scale_at(step, cfg.act_warmup),
            )
        except nn.NumericOverflowError as exc:
            raise TrainingDiverged(step, curves[:step]) from exc
        if not np.isfinite(loss.data):
            raise TrainingDiverged(step, curves[:step])
        backward(loss)
        adam_step(opt, lr=lr_at(step, cfg.steps, cfg.lr, cfg.lr_tail))
        curves[step] = (l_act, l_rec)
    return model, curves


def prediction_error(model, ds: TransitionDataset,
                     action_map: dict[int, np.ndarray] | None = None,
                     transitions: np.ndarray | None = None) -> float:
    """Mean per-pixel squared error of dec(A_g enc(x)) against x'."""
    matrices = model.matrices() if action_map is None else action_map
    tr = ds.transitions if transitions is None else transitions
    if tr.shape[0] == 0:
        return float("nan")
    z = model.encode(ds.observations)
    total = 0.0
    dim = ds.observations.shape[1]
    for g in sorted(set(tr[:, 1].tolist())):
        rows = tr[tr[:, 1] == g]
        pred = model.decode(z[rows[:, 0]] @ matrices[int(g)].T)
        diff = ds.observations[rows[:, 2]] - pred
        total += float(np.sum(diff * diff))
    return total / (tr.shape[0] * dim)
