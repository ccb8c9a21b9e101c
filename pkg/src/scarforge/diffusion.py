"""DDPM schedule, lesion-masked loss, histogram conditioning and masked synthesis.

The reverse loop keeps generated content only inside the lesion mask; outside
it the real image, forward-noised to the current step, is pasted back. At the
final step the noise level is zero, so the background comes out untouched.
"""
from __future__ import annotations

import json
import math
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .volume import GeometryError, Mask3, Volume3


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """``betas[t - 1]`` is beta_t for t in 1..T; ``alpha_bars[t]`` with ``alpha_bars[0] == 1``."""

    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if not (np.all(b > 0) and np.all(b < 1) and np.all(np.diff(b) >= 0)):
            raise ValueError("betas must be non-decreasing and lie in (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def to_json(self) -> str:
        return json.dumps({"T": self.T, "betas": self.betas.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "NoiseSchedule":
        return cls(np.array(json.loads(text)["betas"]))


def make_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02,
                  kind: str = "linear") -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_1 <= beta_T < 1:
        raise ValueError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    if kind == "linear":
        betas = np.linspace(beta_1, beta_T, T) if T > 1 else np.array([beta_1])
    elif kind == "scaled_linear":
        betas = np.linspace(math.sqrt(beta_1), math.sqrt(beta_T), T) ** 2 if T > 1 else np.array([beta_1])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(betas)


def _check_t(t: int, sched: NoiseSchedule) -> None:
    if not 0 <= t <= sched.T:
        raise ValueError(f"t must lie in [0, {sched.T}], got {t}")


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, (Volume3, Mask3)) else np.asarray(x)


def forward_diffuse(x0: Volume3, t: int, eps, sched: NoiseSchedule) -> Volume3:
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``."""
    _check_t(t, sched)
    e = _arr(eps)
    if e.shape != x0.dims:
        raise GeometryError(f"noise shape {e.shape} does not match volume {x0.dims}")
    if t == 0:
        return x0.with_data(x0.data.copy())
    ab = sched.alpha_bars[t]
    return x0.with_data(math.sqrt(ab) * x0.data + math.sqrt(1.0 - ab) * e)


def scar_focused_loss(eps, eps_hat, mask, reduction: str = "sum") -> float:
    """Squared L2 norm of the noise residual restricted to the lesion mask."""
    e, eh, m = _arr(eps), _arr(eps_hat), _arr(mask).astype(bool)
    if not (e.shape == eh.shape == m.shape):
        raise GeometryError(f"shape mismatch: {e.shape}, {eh.shape}, {m.shape}")
    r = np.where(m, e - eh, 0.0)
    total = float(np.sum(r * r))
    if reduction == "sum":
        return total
    if reduction == "mean":
        n = int(np.count_nonzero(m))
        return total / n if n else 0.0
    raise ValueError(f"unknown reduction {reduction!r}")


def reverse_blend(o: Volume3, x_noised: Volume3, mask: Mask3) -> Volume3:
    """Generated values inside the mask, forward-noised real values outside."""
    if not (o.dims == x_noised.dims == mask.dims):
        raise GeometryError(f"shape mismatch: {o.dims}, {x_noised.dims}, {mask.dims}")
    return x_noised.with_data(np.where(mask.data, o.data, x_noised.data))


@dataclass(frozen=True, eq=False)
class LesionHistogram:
    edges: np.ndarray
    masses: np.ndarray

    def to_json(self) -> str:
        return json.dumps({"edges": np.asarray(self.edges).tolist(),
                           "masses": np.asarray(self.masses).tolist()})

    @classmethod
    def from_json(cls, text: str) -> "LesionHistogram":
        d = json.loads(text)
        return cls(np.array(d["edges"], dtype=float), np.array(d["masses"], dtype=float))


def lesion_histogram(v: Volume3, m: Mask3, bins: int = 16, value_range=None) -> LesionHistogram:
    """Normalised intensity histogram of ``v`` inside ``m``."""
    if v.dims != m.dims:
        raise GeometryError(f"shape mismatch: {v.dims} vs {m.dims}")
    vals = v.data[m.data]
    if vals.size == 0:
        raise ValueError("lesion mask is empty")
    counts, edges = np.histogram(vals, bins=bins, range=value_range)
    return LesionHistogram(edges, counts / counts.sum())


# --------------------------------------------------------------------------- predictors

class NoisePredictor(Protocol):
    def __call__(self, x_t: np.ndarray, t: int, cond) -> np.ndarray: ...


def zero_predictor(x_t, t, cond):
    return np.zeros_like(x_t)


class RandomPredictor:
    """Stub returning seeded Gaussian noise; stands in for an untrained network."""

    def __init__(self, seed: int = 0, scale: float = 1.0):
        self.rng = np.random.default_rng(seed)
        self.scale = scale

    def __call__(self, x_t, t, cond):
        return self.scale * self.rng.standard_normal(x_t.shape)


class OraclePredictor:
    """Returns the exact noise that would make ``target`` the clean image at step t."""

    def __init__(self, target, sched: NoiseSchedule):
        self.target = _arr(target).astype(np.float64)
        self.ab = sched.alpha_bars

    def __call__(self, x_t, t, cond):
        ab = self.ab[t]
        return (x_t - math.sqrt(ab) * self.target) / math.sqrt(1.0 - ab)


class FileExchangePredictor:
    """Delegate prediction to an external program through NRRD files.

    For each step ``x_t`` is written to ``<workdir>/x_t.nrrd`` (the step index in
    the ``scarforge_t`` header key) and ``command`` is run with ``{x}``, ``{t}``
    and ``{out}`` substituted; it must write the predicted noise to ``{out}``.
    """

    def __init__(self, command: str, workdir=None, spacing=(1.0, 1.0, 1.0)):
        self.command = command
        self.workdir = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix="scarforge-"))
        self.spacing = spacing

    def __call__(self, x_t, t, cond):
        from . import nrrd

        self.workdir.mkdir(parents=True, exist_ok=True)
        xp, op = self.workdir / "x_t.nrrd", self.workdir / "eps_hat.nrrd"
        nrrd._write(xp, np.asarray(x_t, dtype=np.float64), self.spacing,
                    {"scarforge_kind": "volume", "scarforge_t": str(int(t))})
        if cond is not None and hasattr(cond, "to_json"):
            (self.workdir / "histogram.json").write_text(cond.to_json())
        if op.exists():
            op.unlink()
        cmd = self.command.format(x=shlex.quote(str(xp)), t=int(t), out=shlex.quote(str(op)))
        proc = subprocess.run(cmd, shell=True, capture_output=True, text=True)
        if proc.returncode != 0:
            raise SynthesisError(f"external predictor failed at t={t}: {proc.stderr.strip()}")
        return nrrd.load_nrrd(op).data


# --------------------------------------------------------------------------- synthesis

def ddpm_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule,
              z: np.ndarray | None) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1} with posterior variance; ``z=None`` is deterministic."""
    beta = sched.beta(t)
    ab = sched.alpha_bars
    mean = (x_t - beta / math.sqrt(1.0 - ab[t]) * eps_hat) / math.sqrt(1.0 - beta)
    if z is None or t == 1:
        return mean
    var = beta * (1.0 - ab[t - 1]) / (1.0 - ab[t])
    return mean + math.sqrt(var) * z


def synthesize(x_n0: Volume3, mask: Mask3, predictor: Callable, sched: NoiseSchedule,
               h=None, rng: np.random.Generator | None = None,
               deterministic: bool = False) -> Volume3:
    """Fill the lesion mask of ``x_n0`` by masked reverse diffusion.

    Starts from pure noise; at every step the predictor's denoised estimate is
    kept inside ``mask`` and ``x_n0`` forward-noised to step t-1 with fresh noise
    is used outside it.
    """
    if x_n0.dims != mask.dims:
        raise GeometryError(f"image {x_n0.dims} and mask {mask.dims} differ in shape")
    rng = rng if rng is not None else np.random.default_rng()
    shape = x_n0.dims
    if not mask.data.any():
        return x_n0.with_data(x_n0.data.copy())
    x = rng.standard_normal(shape)
    for t in range(sched.T, 0, -1):
        eps_hat = np.asarray(predictor(x, t, h))
        if eps_hat.shape != shape:
            raise SynthesisError(f"predictor returned shape {eps_hat.shape} at t={t}, expected {shape}")
        if not np.all(np.isfinite(eps_hat)):
            bad = int(np.count_nonzero(~np.isfinite(eps_hat)))
            raise SynthesisError(f"predictor produced {bad} non-finite values at t={t}")
        z = None if deterministic else rng.standard_normal(shape)
        o = ddpm_step(x, eps_hat, t, sched, z)
        if not np.all(np.isfinite(o)):
            raise SynthesisError(f"reverse step produced non-finite values at t={t} "
                                 f"(|x| max {np.nanmax(np.abs(x)):.3g})")
        x_bg = forward_diffuse(x_n0, t - 1, rng.standard_normal(shape), sched).data
        x = np.where(mask.data, o, x_bg)
    return x_n0.with_data(x)


def background_preserved(out: Volume3, x_n0: Volume3, mask: Mask3) -> bool:
    """Bit-exact equality outside the mask."""
    bg = ~mask.data
    return bool(np.array_equal(out.data[bg], x_n0.data[bg]))


def poly_lr(epoch: int, epoch_max: int, base_lr: float, exponent: float = 0.9) -> float:
    """``base_lr * (1 - epoch / epoch_max) ** exponent``."""
    if not 0 <= epoch <= epoch_max:
        raise ValueError(f"epoch must lie in [0, {epoch_max}], got {epoch}")
    return base_lr * (1.0 - epoch / epoch_max) ** exponent
