"""Linear autoencoder that shrinks violation vectors before MMD evaluation.

The encoder/decoder pair is bias-free by construction: zero must map to zero
so the image of the safe Dirac is known without computation.  The latent MMD
treats the p latent coordinates as p RKHS sample points, which makes the
identity encoder (p = m) agree with the full-sample MMD exactly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError, InvalidSpecError, TrainingDivergedError
from .rkhs import KernelSpec, WeightVectors, clamp_mmd, kernel_eval
from .rng import stream

_AE_MAGIC = b"MMDPAE1\x00"

_MIN_STEP = 1e-15


@dataclass(frozen=True)
class Autoencoder:
    """Encoder W1 (m x p) and decoder W2 (p x m); latent = v @ W1."""

    w1: np.ndarray
    w2: np.ndarray

    def __post_init__(self):
        w1 = np.asarray(self.w1, dtype=float)
        w2 = np.asarray(self.w2, dtype=float)
        if w1.ndim != 2 or w2.ndim != 2 or w1.shape != w2.shape[::-1]:
            raise ContractViolationError("W1 must be m x p and W2 its transpose shape")
        m, p = w1.shape
        if not (1 <= p <= m):
            raise ContractViolationError(f"need 1 <= p <= m, got p={p}, m={m}")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)

    @property
    def m(self) -> int:
        return self.w1.shape[0]

    @property
    def p(self) -> int:
        return self.w1.shape[1]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    step_size: float = 1e-3
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise InvalidSpecError("step size must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidSpecError("epochs must be >= 0 and batch size >= 1")


def identity_autoencoder(m: int) -> Autoencoder:
    eye = np.eye(m)
    return Autoencoder(w1=eye, w2=eye.copy())


def reconstruction_loss(data: np.ndarray, ae: Autoencoder) -> float:
    """Squared Frobenius reconstruction error over all rows."""
    err = data @ ae.w1 @ ae.w2 - data
    return float(np.sum(err * err))


def train(
    data: np.ndarray,
    p: int,
    cfg: TrainConfig,
    init: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[Autoencoder, list[float]]:
    """Minibatch SGD on the reconstruction objective with halving backtracking.

    Any epoch whose full-data loss increases (or goes non-finite) is reverted
    and the step size halved, so the returned loss history is non-increasing
    by construction.  history[0] is the pre-training loss.  Deterministic in
    cfg.seed.
    """
    d = np.asarray(data, dtype=float)
    if d.ndim != 2 or d.shape[0] < 1:
        raise ContractViolationError("data must be a non-empty 2-D matrix")
    rows, m = d.shape
    if not (1 <= p <= m):
        raise ContractViolationError(f"need 1 <= p <= m, got p={p}, m={m}")
    rng = stream(cfg.seed, "autoencoder-train")
    if init is not None:
        w1 = np.array(init[0], dtype=float)
        w2 = np.array(init[1], dtype=float)
        if w1.shape != (m, p) or w2.shape != (p, m):
            raise ContractViolationError("init shapes must be (m, p) and (p, m)")
    else:
        w1 = rng.normal(0.0, 1.0 / np.sqrt(m), (m, p))
        w2 = rng.normal(0.0, 1.0 / np.sqrt(p), (p, m))

    def full_loss() -> float:
        err = d @ w1 @ w2 - d
        return float(np.sum(err * err))

    step = cfg.step_size
    history = [full_loss()]
    if not np.isfinite(history[0]):
        raise TrainingDivergedError("non-finite loss before training", epoch=0)
    batch = min(cfg.batch_size, rows)
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            snap_w1, snap_w2 = w1.copy(), w2.copy()
            order = rng.permutation(rows)
            ok = True
            for s in range(0, rows, batch):
                db = d[order[s : s + batch]]
                z = db @ w1
                err = z @ w2 - db
                w1 -= step * (2.0 * db.T @ (err @ w2.T))
                w2 -= step * (2.0 * z.T @ err)
                if not (np.all(np.isfinite(w1)) and np.all(np.isfinite(w2))):
                    ok = False
                    break
            loss = full_loss() if ok else np.inf
            if not np.isfinite(loss) or loss > history[-1]:
                w1, w2 = snap_w1, snap_w2
                step *= 0.5
                history.append(history[-1])
                if step < _MIN_STEP:
                    raise TrainingDivergedError(
                        f"step size underflowed at epoch {epoch}", epoch=epoch
                    )
            else:
                history.append(loss)
    return Autoencoder(w1=w1, w2=w2), history


def encode(ae: Autoencoder, v: np.ndarray) -> np.ndarray:
    """Project violation vectors (length m, or rows of them) to latent space."""
    x = np.asarray(v, dtype=float)
    if x.shape[-1] != ae.m:
        raise ContractViolationError(f"expected last dim {ae.m}, got {x.shape[-1]}")
    return x @ ae.w1


def decode(ae: Autoencoder, z: np.ndarray) -> np.ndarray:
    x = np.asarray(z, dtype=float)
    if x.shape[-1] != ae.p:
        raise ContractViolationError(f"expected last dim {ae.p}, got {x.shape[-1]}")
    return x @ ae.w2


def mmd_latent(
    latent: np.ndarray,
    latent_dirac: np.ndarray,
    w: WeightVectors,
    spec: KernelSpec,
) -> float:
    """Squared MMD with the p latent coordinates as RKHS sample points.

    latent_dirac is the encoded safe Dirac; for any linear bias-free encoder
    it is the zero vector, which this function requires.
    """
    z = np.asarray(latent, dtype=float).reshape(-1)
    zd = np.asarray(latent_dirac, dtype=float).reshape(-1)
    if z.shape != zd.shape:
        raise ContractViolationError("latent and latent_dirac must match in length")
    if z.shape[0] != w.alpha.shape[0]:
        raise ContractViolationError("weights must match latent dimension")
    if np.any(zd != 0.0):
        raise ContractViolationError("latent_dirac must be the zero vector")
    a, b = w.alpha, w.beta
    kzz = kernel_eval(spec, z[:, None], z[None, :])
    kz0 = kernel_eval(spec, z, np.zeros_like(z))
    k00 = kernel_eval(spec, 0.0, 0.0)
    total = float(a @ kzz @ a) - 2.0 * float(a @ kz0) * float(b.sum()) + float(
        k00
    ) * float(b.sum()) ** 2
    return clamp_mmd(total)


# ---------------------------------------------------------------------------
# persistence


def save_autoencoder(ae: Autoencoder, path: str) -> None:
    """Versioned binary: magic, (m, p) header, then W1 and W2 row-major float64."""
    with open(path, "wb") as fh:
        fh.write(_AE_MAGIC)
        fh.write(struct.pack("<2I", ae.m, ae.p))
        fh.write(np.ascontiguousarray(ae.w1).tobytes())
        fh.write(np.ascontiguousarray(ae.w2).tobytes())


def load_autoencoder(path: str) -> Autoencoder:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_AE_MAGIC)] != _AE_MAGIC:
        raise InvalidSpecError(f"{path}: not an autoencoder file (bad magic)")
    off = len(_AE_MAGIC)
    m, p = struct.unpack_from("<2I", blob, off)
    off += struct.calcsize("<2I")
    need = off + 2 * m * p * 8
    if len(blob) < need:
        raise InvalidSpecError(f"{path}: truncated weight payload")
    w1 = np.frombuffer(blob, dtype=np.float64, count=m * p, offset=off).reshape(m, p)
    off += m * p * 8
    w2 = np.frombuffer(blob, dtype=np.float64, count=m * p, offset=off).reshape(p, m)
    return Autoencoder(w1=w1.copy(), w2=w2.copy())
