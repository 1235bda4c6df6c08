"""The non-convex two-layer soft-thresholding network.

Prediction for a patch matrix ``Y`` is ``sum_k tau(Y u_k) v_k`` and training
minimises

    ||sum_k tau(Y u_k) v_k - x||^2 + beta * sum_k (||u_k||^2 + v_k^2)

over the filters ``U = [u_1 .. u_K]`` and weights ``v``; the threshold
``lam`` is a fixed hyperparameter.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, NamedTuple

import numpy as np

from .dataio import PatchMatrix

_PARAMS_MAGIC = b"STCNNPRM"


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"objective became non-finite ({value}) at step {step}")
        self.step = step


@dataclass(frozen=True)
class PrimalParams:
    U: np.ndarray  # (patch_dim, K)
    v: np.ndarray  # (K,)
    lam: float
    beta: float

    def __post_init__(self):
        U = np.array(self.U, dtype=float, copy=True)
        v = np.array(self.v, dtype=float, copy=True).reshape(-1)
        if U.ndim != 2 or U.shape[1] != v.shape[0]:
            raise ValueError(f"U {U.shape} and v {v.shape} disagree on K")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if not (np.all(np.isfinite(U)) and np.all(np.isfinite(v))):
            raise ValueError("parameters must be finite")
        U.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "v", v)

    @property
    def K(self) -> int:
        return self.v.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.U.shape[0]

    def energy(self) -> float:
        return float(np.sum(self.U**2) + np.sum(self.v**2))

    def with_arrays(self, U, v) -> "PrimalParams":
        return replace(self, U=U, v=v)


class PrimalGradient(NamedTuple):
    U: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class OptimizerConfig:
    kind: Literal["sgd", "asgd", "adam"] = "adam"
    learning_rate: float | None = None
    steps: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    asgd_average_start: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "asgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1) or self.adam_eps <= 0:
            raise ValueError("invalid adam moments")
        if self.steps > 0 and self.average_start >= self.steps:
            raise ValueError("asgd_average_start must be < steps")

    @property
    def lr(self) -> float:
        """Learning rate, defaulting to 1e-3 for adam and 1e-2 otherwise."""
        if self.learning_rate is not None:
            return self.learning_rate
        return 1e-3 if self.kind == "adam" else 1e-2

    @property
    def average_start(self) -> int:
        return self.steps // 2 if self.asgd_average_start is None else self.asgd_average_start


@dataclass(frozen=True)
class InitConfig:
    kind: Literal["kaiming_uniform", "normal"] = "kaiming_uniform"
    normal_std: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("kaiming_uniform", "normal"):
            raise ValueError(f"unknown initialisation {self.kind!r}")
        if self.normal_std <= 0:
            raise ValueError("normal_std must be > 0")


@dataclass
class TrainResult:
    params: PrimalParams
    trajectory: np.ndarray = field(repr=False)
    final_objective: float = float("nan")


def soft_threshold(a, lam: float):
    """``(|a| - lam)_+ * sign(a)``, elementwise."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    a = np.asarray(a, dtype=float)
    out = np.sign(a) * np.maximum(np.abs(a) - lam, 0.0)
    return out if out.ndim else float(out)


def _check(Y: PatchMatrix, params: PrimalParams, x=None):
    if Y.patch_dim != params.patch_dim:
        raise ValueError(f"patch_dim {Y.patch_dim} != filter length {params.patch_dim}")
    if x is not None:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != Y.rows:
            raise ValueError(f"label length {x.shape[0]} != rows {Y.rows}")
    return x


def forward(Y: PatchMatrix, params: PrimalParams) -> np.ndarray:
    _check(Y, params)
    return soft_threshold(Y.data @ params.U, params.lam) @ params.v


def primal_objective(Y: PatchMatrix, x, params: PrimalParams) -> float:
    x = _check(Y, params, x)
    r = forward(Y, params) - x
    return float(r @ r + params.beta * params.energy())


def _value_and_grad(Yd, x, U, v, lam, beta, want_grad=True):
    A = Yd @ U
    T = np.sign(A) * np.maximum(np.abs(A) - lam, 0.0)
    r = T @ v - x
    val = float(r @ r + beta * (np.sum(U * U) + v @ v))
    if not want_grad:
        return val, None, None
    # subgradient 0 on the closed dead zone |a| <= lam; at lam = 0 tau is the identity
    active = np.abs(A) > lam if lam > 0 else np.ones(A.shape, dtype=bool)
    gv = 2.0 * (T.T @ r) + 2.0 * beta * v
    gU = 2.0 * (Yd.T @ (active * r[:, None])) * v[None, :] + 2.0 * beta * U
    return val, gU, gv


def primal_gradient(Y: PatchMatrix, x, params: PrimalParams) -> PrimalGradient:
    x = _check(Y, params, x)
    _, gU, gv = _value_and_grad(Y.data, x, params.U, params.v, params.lam, params.beta)
    return PrimalGradient(gU, gv)


def init_params(patch_dim: int, K: int, init: InitConfig, lam: float, beta: float) -> PrimalParams:
    """Draw filters and weights.

    Kaiming uniform uses bound sqrt(6 / fan_in), with fan_in = patch_dim for
    the filters and K for the 1x1 combination weights.
    """
    rng = np.random.default_rng(init.seed)
    if init.kind == "kaiming_uniform":
        bu = np.sqrt(6.0 / patch_dim)
        bv = np.sqrt(6.0 / K)
        U = rng.uniform(-bu, bu, size=(patch_dim, K))
        v = rng.uniform(-bv, bv, size=K)
    else:
        U = rng.normal(0.0, init.normal_std, size=(patch_dim, K))
        v = rng.normal(0.0, init.normal_std, size=K)
    return PrimalParams(U, v, lam, beta)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g

    def report(self, params):
        return params


class ASGD(SGD):
    """Plain SGD whose reported iterate is the tail average from step ``start`` on."""

    def __init__(self, lr: float, start: int):
        super().__init__(lr)
        self.start = start
        self.t = 0
        self.avg = None
        self.n_avg = 0

    def step(self, params, grads):
        super().step(params, grads)
        self.t += 1
        if self.t > self.start:
            self.n_avg += 1
            if self.avg is None:
                self.avg = [p.copy() for p in params]
            else:
                for a, p in zip(self.avg, params):
                    a += (p - a) / self.n_avg

    def report(self, params):
        return params if self.avg is None else self.avg


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = None
        self.s = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.s = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, s in zip(params, grads, self.m, self.s):
            m *= self.b1
            m += (1.0 - self.b1) * g
            s *= self.b2
            s += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(s / c2) + self.eps)

    def report(self, params):
        return params


def make_optimizer(cfg: OptimizerConfig):
    if cfg.kind == "sgd":
        return SGD(cfg.lr)
    if cfg.kind == "asgd":
        return ASGD(cfg.lr, cfg.average_start)
    return Adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def train_primal(
    Y: PatchMatrix,
    x,
    init: InitConfig,
    opt: OptimizerConfig,
    *,
    K: int | None = None,
    lam: float = 0.1,
    beta: float = 0.1,
    params0: PrimalParams | None = None,
    freeze_v: bool = False,
) -> TrainResult:
    """Full-batch training.

    ``trajectory[t]`` is the objective of the reported iterate before update
    ``t + 1``; with ``steps == 0`` it holds the single initial value.  ``K``
    defaults to ``I + 1``.
    """
    if params0 is None:
        K = Y.rows + 1 if K is None else K
        params0 = init_params(Y.patch_dim, K, init, lam, beta)
    x = _check(Y, params0, x)
    Yd = Y.data
    lam, beta = params0.lam, params0.beta
    U = params0.U.copy()
    v = params0.v.copy()
    optimizer = make_optimizer(opt)
    traj = np.empty(max(opt.steps, 1))

    for t in range(opt.steps):
        with np.errstate(over="ignore", invalid="ignore"):
            val, gU, gv = _value_and_grad(Yd, x, U, v, lam, beta)
        rU, rv = optimizer.report([U, v])
        if rU is not U:
            val = _value_and_grad(Yd, x, rU, rv, lam, beta, want_grad=False)[0]
        if not np.isfinite(val):
            raise TrainingDivergedError(t, val)
        traj[t] = val
        if freeze_v:
            gv = np.zeros_like(gv)
        optimizer.step([U, v], [gU, gv])

    rU, rv = optimizer.report([U, v])
    with np.errstate(over="ignore", invalid="ignore"):
        final = _value_and_grad(Yd, x, rU, rv, lam, beta, want_grad=False)[0]
    if not np.isfinite(final) or not (np.all(np.isfinite(rU)) and np.all(np.isfinite(rv))):
        raise TrainingDivergedError(opt.steps, final)
    if opt.steps == 0:
        traj[0] = final
    return TrainResult(params0.with_arrays(rU, rv), traj, final)


def rescale_unit(u, v: float, lam: float) -> tuple[np.ndarray, float, float]:
    """Balance one unit so that ``||u|| == |v|``.

    Returns ``(eps * u, v / eps, eps * lam)`` with ``eps = sqrt(|v| / ||u||)``.
    The threshold must move with the filter for the unit's output to stay
    unchanged: ``tau(eps*Y u)_{eps*lam} * v/eps == tau(Y u)_lam * v``.
    """
    u = np.asarray(u, dtype=float)
    nu = float(np.linalg.norm(u))
    if v == 0:
        return np.zeros_like(u), 0.0, 0.0
    if nu == 0:
        raise ValueError("cannot rescale a zero filter with non-zero weight")
    eps = np.sqrt(abs(v) / nu)
    return eps * u, v / eps, eps * lam


# --------------------------------------------------------------------------
# export

def write_trajectory_csv(path, trajectory) -> None:
    with open(path, "w") as fh:
        fh.write("step,objective\n")
        for t, val in enumerate(trajectory):
            fh.write(f"{t},{float(val):.17g}\n")


def save_params(path, params: PrimalParams) -> None:
    """Little-endian float64 snapshot: magic, K, patch_dim, lam, beta, U (row-major), v."""
    head = _PARAMS_MAGIC + struct.pack("<qqdd", params.K, params.patch_dim, params.lam, params.beta)
    body = params.U.astype("<f8").tobytes(order="C") + params.v.astype("<f8").tobytes()
    Path(path).write_bytes(head + body)


def load_params(path) -> PrimalParams:
    buf = Path(path).read_bytes()
    if buf[:8] != _PARAMS_MAGIC:
        raise ValueError("not a parameter snapshot")
    K, d, lam, beta = struct.unpack_from("<qqdd", buf, 8)
    off = 8 + 32
    expected = off + 8 * (d * K + K)
    if len(buf) != expected:
        raise ValueError(f"snapshot size {len(buf)} != expected {expected}")
    U = np.frombuffer(buf, dtype="<f8", count=d * K, offset=off).reshape(d, K)
    v = np.frombuffer(buf, dtype="<f8", count=K, offset=off + 8 * d * K)
    return PrimalParams(U, v, lam, beta)
