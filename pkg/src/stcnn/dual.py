"""The convex dual program over pattern-linearised units.

Each unit pairs a region pattern (its diagonal ``q``) with two vectors
``w, w'``.  The program is

    min ||sum_p q_p * (Y (w'_p - w_p)) - x||^2 + 2 beta sum_p (||w_p|| + ||w'_p||)

subject to cone constraints that keep ``Y w`` on the sign pattern of its
unit.  Constraints enter as a squared-hinge penalty with continuation, and
the group norms are handled by their proximal map.
"""
from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Literal, Sequence

import numpy as np

from .arrangements import PatternSet, RegionPattern, SetReading
from .dataio import PatchMatrix
from .primal import PrimalParams

_MACHINE_FLOOR = float(np.finfo(float).eps)


class ConeConvention(str, Enum):
    """Sign convention of the cone constraints.

    ``paper_literal``: ``y_i . w >= 0`` on S1 rows and ``<= 0`` on S3 rows.
    ``pattern_preserving``: the reverse, which the generating anchor itself
    satisfies.  Both use equality on rows that belong to S1 and S3 at once.
    """

    PAPER_LITERAL = "paper_literal"
    PATTERN_PRESERVING = "pattern_preserving"


class DualSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class DualUnit:
    pattern: RegionPattern
    w: np.ndarray
    w_prime: np.ndarray


@dataclass(frozen=True)
class DualParams:
    units: tuple[DualUnit, ...]
    reg_beta: float
    convention: ConeConvention = ConeConvention.PAPER_LITERAL
    reading: SetReading = SetReading.OVERLAP

    def __post_init__(self):
        if self.reg_beta <= 0:
            raise ValueError("reg_beta must be > 0")
        for u in self.units:
            if not (np.all(np.isfinite(u.w)) and np.all(np.isfinite(u.w_prime))):
                raise ValueError("dual vectors must be finite")

    @property
    def W(self) -> np.ndarray:
        return np.array([u.w for u in self.units]).reshape(len(self.units), -1)

    @property
    def W_prime(self) -> np.ndarray:
        return np.array([u.w_prime for u in self.units]).reshape(len(self.units), -1)

    def q_matrix(self) -> np.ndarray:
        return np.column_stack([u.pattern.q_diag for u in self.units])

    def unit_norms(self) -> list[tuple[float, float]]:
        return [(float(np.linalg.norm(u.w)), float(np.linalg.norm(u.w_prime))) for u in self.units]

    @classmethod
    def from_arrays(cls, patterns: Sequence[RegionPattern], W, Wp, beta, **kw) -> "DualParams":
        units = tuple(
            DualUnit(p, np.array(w, dtype=float), np.array(wp, dtype=float))
            for p, w, wp in zip(patterns, W, Wp)
        )
        return cls(units, beta, **kw)


@dataclass(frozen=True)
class DualSolveConfig:
    step_rule: Literal["fixed", "backtracking"] = "backtracking"
    accelerate: bool = True
    max_iters: int = 20000  # per penalty stage
    penalty_start: float = 1.0
    penalty_factor: float = 10.0
    penalty_cap: float = 1e6
    stop_tol: float = 1e-10
    viol_tol: float = 1e-8
    max_units: int | None = None  # default: number of rows I
    init_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.step_rule not in ("fixed", "backtracking"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")
        if min(self.penalty_start, self.stop_tol, self.viol_tol) <= 0 or self.penalty_factor <= 1:
            raise ValueError("tolerances and penalty weights must be positive, factor > 1")
        if self.penalty_cap < self.penalty_start or self.max_iters < 1:
            raise ValueError("invalid penalty schedule or iteration cap")

    def schedule(self) -> list[float]:
        out = []
        rho = self.penalty_start
        while rho < self.penalty_cap * (1 + 1e-12):
            out.append(rho)
            rho *= self.penalty_factor
        if out[-1] < self.penalty_cap * (1 - 1e-12):
            out.append(self.penalty_cap)
        return out


@dataclass
class DualCertificate:
    z: np.ndarray
    max_abs_correlation: float
    beta: float
    box_correlation: float = float("nan")
    tol: float = 1e-9

    @property
    def feasible(self) -> bool:
        """Feasible against the sampled patterns."""
        return self.max_abs_correlation <= 2 * self.beta + self.tol

    @property
    def certified(self) -> bool:
        """Feasible for every filter, via the worst diagonal in [0, 1]^I."""
        return self.box_correlation <= 2 * self.beta + self.tol

    def summary(self) -> dict:
        return {
            "max_abs_correlation": self.max_abs_correlation,
            "box_correlation": self.box_correlation,
            "two_beta": 2 * self.beta,
            "feasible": self.feasible,
            "certified": self.certified,
        }


@dataclass
class SolveReport:
    objective: list[float] = field(default_factory=list)  # penalized, per iteration
    dual_objective: list[float] = field(default_factory=list)
    violation: list[float] = field(default_factory=list)
    penalty_weight: list[float] = field(default_factory=list)
    final_objective: float = float("nan")
    final_penalized: float = float("nan")
    violation_norm: float = float("nan")
    unit_norms: list = field(default_factory=list)
    iterations: int = 0
    stage_converged: list = field(default_factory=list)
    converged: bool = False
    violation_ok: bool = False
    convention: str = ""
    reading: str = ""
    seconds: float = 0.0
    certificate: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("step,objective,dual_objective,violation,penalty_weight\n")
            for t, row in enumerate(
                zip(self.objective, self.dual_objective, self.violation, self.penalty_weight)
            ):
                fh.write(f"{t}," + ",".join(f"{v:.17g}" for v in row) + "\n")


# --------------------------------------------------------------------------
# objective and constraints

def dual_objective(Y: PatchMatrix, x, dual: DualParams) -> float:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != Y.rows:
        raise ValueError(f"label length {x.shape[0]} != rows {Y.rows}")
    if not dual.units:
        return float(x @ x)
    W, Wp = dual.W, dual.W_prime
    if W.shape[1] != Y.patch_dim:
        raise ValueError("dual vector length != patch_dim")
    Q = dual.q_matrix()
    if Q.shape[0] != Y.rows:
        raise ValueError("pattern length != rows")
    r = np.sum(Q * (Y.data @ (Wp - W).T), axis=1) - x
    reg = np.linalg.norm(W, axis=1).sum() + np.linalg.norm(Wp, axis=1).sum()
    return float(r @ r + 2.0 * dual.reg_beta * reg)


def cone_rows(
    pattern: RegionPattern,
    convention: ConeConvention = ConeConvention.PAPER_LITERAL,
    reading: SetReading = SetReading.OVERLAP,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row requirement on ``y_i . w``: ``sign`` (+1 means >= 0, -1 means <= 0) and an equality mask."""
    s1, _, s3 = pattern.constraint_sets(reading)
    eq = s1 & s3
    sign = np.zeros(pattern.labels.shape[0])
    flip = 1.0 if ConeConvention(convention) is ConeConvention.PAPER_LITERAL else -1.0
    sign[s1 & ~eq] = flip
    sign[s3 & ~eq] = -flip
    return sign, eq


def cone_violation(
    Y: PatchMatrix,
    w,
    pattern: RegionPattern,
    convention: ConeConvention = ConeConvention.PAPER_LITERAL,
    reading: SetReading = SetReading.OVERLAP,
) -> np.ndarray:
    sign, eq = cone_rows(pattern, convention, reading)
    a = Y.data @ np.asarray(w, dtype=float)
    return np.where(eq, np.abs(a), np.maximum(0.0, -sign * a))


def group_prox(V: np.ndarray, thresh: float, return_norms: bool = False):
    """Row-wise prox of ``thresh * ||.||_2``: shrink each row's norm by ``thresh``, snapping to 0.

    With ``return_norms`` the output row norms come back as well.
    """
    norms = np.linalg.norm(V, axis=-1, keepdims=True)
    scale = np.where(norms > thresh, 1.0 - thresh / np.where(norms > 0, norms, 1.0), 0.0)
    if return_norms:
        return V * scale, np.maximum(norms - thresh, 0.0)
    return V * scale


# --------------------------------------------------------------------------
# solver

class _Problem:
    """Vectorised penalized dual objective over stacked ``(2, P, d)`` variables."""

    def __init__(self, Y, x, Q, S, E, beta):
        self.Y = Y  # (I, d)
        self.x = x
        self.Q = Q  # (I, P)
        self.S = S  # (P, I) signs
        self.E = E  # (P, I) float equality mask
        self.beta = beta

    def fit_parts(self, X):
        B = X @ self.Y.T  # (2, P, I) responses
        r = np.einsum("ip,pi->i", self.Q, B[1] - B[0]) - self.x
        return r, B

    def violations(self, X, B=None):
        if B is None:
            B = X @ self.Y.T
        ineq = np.maximum(0.0, -self.S * B)
        eq = self.E * B
        return ineq, eq

    def smooth(self, X, rho, grad=True):
        """Fit plus penalty; also returns ``(fit, squared violation)`` for logging."""
        r, B = self.fit_parts(X)
        ineq, eq = self.violations(X, B)
        fit = float(r @ r)
        viol = float(np.sum(ineq * ineq) + np.sum(eq * eq))
        val = fit + rho * viol
        if not grad:
            return val, None, (fit, viol)
        GB = 2.0 * rho * (eq * self.E - self.S * ineq)  # (2, P, I)
        RQ = 2.0 * (self.Q * r[:, None]).T  # (P, I)
        GB[0] -= RQ
        GB[1] += RQ
        return val, GB @ self.Y, (fit, viol)

    def reg(self, X) -> float:
        return float(2.0 * self.beta * np.linalg.norm(X, axis=-1).sum())

    def bare(self, X) -> float:
        r, _ = self.fit_parts(X)
        return float(r @ r) + self.reg(X)

    def violation_norm(self, X) -> float:
        ineq, eq = self.violations(X)
        return float(np.sqrt(np.sum(ineq * ineq) + np.sum(eq * eq)))

    def lipschitz(self, rho) -> float:
        # fit: 2 * ||Phi||^2 where Phi maps (W, W') -> prediction; penalty: 2 rho ||Y||^2
        I, P = self.Q.shape
        d = self.Y.shape[1]
        Phi = (self.Q[:, :, None] * self.Y[:, None, :]).reshape(I, P * d)
        fit = 2.0 * 2.0 * np.linalg.norm(Phi, 2) ** 2
        return fit + 2.0 * rho * np.linalg.norm(self.Y, 2) ** 2


def select_units(patterns: PatternSet, max_units: int | None, rows: int) -> list[RegionPattern]:
    """First patterns (in sampling order) with a non-zero diagonal, at most ``max_units``."""
    limit = rows if max_units is None else max_units
    live = [p for p in patterns if not p.is_dead()]
    return live[:limit]


def solve_dual(
    Y: PatchMatrix,
    x,
    patterns: PatternSet | Sequence[RegionPattern],
    beta: float,
    convention: ConeConvention = ConeConvention.PAPER_LITERAL,
    cfg: DualSolveConfig | None = None,
    reading: SetReading = SetReading.OVERLAP,
) -> tuple[DualParams, SolveReport]:
    """Proximal gradient on the squared-hinge penalized program, one stage per penalty weight."""
    cfg = cfg or DualSolveConfig()
    convention = ConeConvention(convention)
    reading = SetReading(reading)
    if beta <= 0:
        raise ValueError("beta must be > 0")
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != Y.rows:
        raise ValueError(f"label length {x.shape[0]} != rows {Y.rows}")
    if not np.all(np.isfinite(x)):
        raise ValueError("labels must be finite")
    if isinstance(patterns, PatternSet):
        units = select_units(patterns, cfg.max_units, Y.rows)
    else:
        units = list(patterns)
    if len(patterns) == 0:
        raise ValueError("empty pattern set")

    t0 = time.perf_counter()
    report = SolveReport(convention=convention.value, reading=reading.value)
    P, d = len(units), Y.patch_dim
    if P == 0:
        # only dead patterns: the program reduces to the zero predictor
        dual = DualParams((), beta, convention, reading)
        report.final_objective = report.final_penalized = float(x @ x)
        report.violation_norm = 0.0
        report.converged = report.violation_ok = True
        report.objective = report.dual_objective = [report.final_objective]
        report.violation, report.penalty_weight = [0.0], [0.0]
        return dual, report

    Q = np.column_stack([p.q_diag for p in units])
    rows = [cone_rows(p, convention, reading) for p in units]
    S = np.array([s for s, _ in rows])
    E = np.array([e for _, e in rows], dtype=float)
    prob = _Problem(Y.data, x, Q, S, E, beta)

    rng = np.random.default_rng(cfg.seed)
    X = cfg.init_scale * rng.standard_normal((2, P, d))

    L = None
    for rho in cfg.schedule():
        L_fixed = prob.lipschitz(rho)
        if L is None or cfg.step_rule == "fixed":
            L = L_fixed if cfg.step_rule == "fixed" else max(1e-8, L_fixed * 1e-3)
        X, L, ok = _stage(prob, X, rho, L, cfg, report)
        report.stage_converged.append(ok)
        if not np.all(np.isfinite(X)):
            raise DualSolveError(f"non-finite iterate at penalty weight {rho:g}")

    W, Wp = X[0], X[1]
    dual = DualParams.from_arrays(units, W, Wp, beta, convention=convention, reading=reading)
    report.final_objective = prob.bare(X)
    report.final_penalized = prob.smooth(X, cfg.penalty_cap, grad=False)[0] + prob.reg(X)
    report.violation_norm = prob.violation_norm(X)
    report.unit_norms = dual.unit_norms()
    report.converged = bool(report.stage_converged[-1])
    report.violation_ok = report.violation_norm <= cfg.viol_tol
    report.seconds = time.perf_counter() - t0
    return dual, report


def _stage(prob: _Problem, X, rho, L, cfg: DualSolveConfig, report: SolveReport):
    beta2 = 2.0 * prob.beta

    def F(Z):
        val, _, parts = prob.smooth(Z, rho, grad=False)
        return val + prob.reg(Z), parts

    Fx, parts_x = F(X)
    reg_x = prob.reg(X)
    Yk = X.copy()
    t = 1.0
    converged = False
    for _ in range(cfg.max_iters):
        fy, gy, _ = prob.smooth(Yk, rho)
        while True:
            Z, norms = group_prox(Yk - gy / L, beta2 / L, return_norms=True)
            diff = Z - Yk
            fz, _, parts_z = prob.smooth(Z, rho, grad=False)
            if not math.isfinite(fz):
                raise DualSolveError(f"non-finite objective at penalty weight {rho:g}")
            if cfg.step_rule == "fixed" or fz <= fy + np.sum(gy * diff) + 0.5 * L * np.sum(diff * diff) + 1e-15 * abs(fy):
                break
            L *= 2.0
        reg_z = beta2 * float(norms.sum())
        Fz = fz + reg_z
        if not math.isfinite(Fz):
            raise DualSolveError(f"non-finite objective at penalty weight {rho:g}")
        prev = Fx
        take = not cfg.accelerate or Fz <= Fx
        if cfg.accelerate:
            # monotone FISTA with function-value restart
            if take:
                t_n = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
                Yk = Z + ((t - 1.0) / t_n) * (Z - X)
                t = t_n
            else:
                t = 1.0
                Yk = X.copy()
        else:
            Yk = Z
        if take:
            X, Fx, parts_x, reg_x = Z, Fz, parts_z, reg_z
        report.objective.append(Fx)
        report.dual_objective.append(parts_x[0] + reg_x)
        report.violation.append(math.sqrt(parts_x[1]))
        report.penalty_weight.append(rho)
        report.iterations += 1
        if cfg.step_rule == "backtracking":
            L *= 0.95
        if abs(prev - Fx) <= cfg.stop_tol * max(1.0, abs(Fx)) and Fz <= prev:
            converged = True
            break
    return X, L, converged


def recover_primal(dual: DualParams, lam: float, beta: float | None = None) -> PrimalParams:
    """One primal unit per non-zero dual vector.

    ``w`` gives ``(w / sqrt||w||, -sqrt||w||)`` and ``w'`` gives
    ``(w' / sqrt||w'||, +sqrt||w'||)``, so ``||u|| * |v| == ||w||``.
    """
    beta = dual.reg_beta if beta is None else beta
    cols, weights = [], []
    dim = None
    for unit in dual.units:
        dim = unit.w.shape[0]
        for vec, sgn in ((unit.w, -1.0), (unit.w_prime, 1.0)):
            n = float(np.linalg.norm(vec))
            if n > 0:
                cols.append(vec / math.sqrt(n))
                weights.append(sgn * math.sqrt(n))
    if dim is None:
        dim = 0
    U = np.column_stack(cols) if cols else np.zeros((dim, 0))
    return PrimalParams(U, np.array(weights), lam, beta)


# --------------------------------------------------------------------------
# certificates

def _box_correlation(Yd: np.ndarray, z: np.ndarray, exact_limit: int = 16) -> float:
    """``max_{q in [0,1]^I} ||Y^T diag(q) z||``.

    The maximum of a convex function over the box sits at a vertex; vertices
    are enumerated up to ``exact_limit`` non-zero rows, past that the
    triangle-inequality bound ``sum_i |z_i| ||y_i||`` is returned.
    """
    C = Yd * z[:, None]  # row i is z_i y_i
    nz = np.flatnonzero(np.any(C != 0, axis=1))
    if nz.size == 0:
        return 0.0
    if nz.size > exact_limit:
        return float(np.linalg.norm(C[nz], axis=1).sum())
    C = C[nz]
    best = 0.0
    masks = np.array(list(itertools.product((0.0, 1.0), repeat=nz.size)))
    sums = masks @ C
    best = float(np.sqrt(np.max(np.sum(sums * sums, axis=1))))
    return best


def eval_d1_candidate(
    Y: PatchMatrix, x, z, patterns: PatternSet | Sequence[RegionPattern], beta: float, tol: float = 1e-9
) -> tuple[DualCertificate, float]:
    """Lagrangian dual value ``-1/4 ||z - 2x||^2 + ||x||^2`` and the feasibility of ``z``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != Y.rows or x.shape[0] != Y.rows:
        raise ValueError("z and x must have one entry per row of Y")
    pats = list(patterns)
    if pats:
        Q = np.column_stack([p.q_diag for p in pats])
        corr = float(np.max(np.linalg.norm(Y.data.T @ (Q * z[:, None]), axis=0)))
    else:
        corr = 0.0
    cert = DualCertificate(z, corr, beta, _box_correlation(Y.data, z), tol)
    d1 = float(-0.25 * np.sum((z - 2 * x) ** 2) + x @ x)
    return cert, d1


def certificate_check(Y: PatchMatrix, z, patterns, beta: float, tol: float = 1e-9) -> DualCertificate:
    """Feasibility of ``z`` for the constraint ``|z^T tau(Y u)| <= 2 beta ||u||``."""
    return eval_d1_candidate(Y, np.zeros(Y.rows), z, patterns, beta, tol)[0]


def scale_into_feasibility(Y: PatchMatrix, z, beta: float) -> np.ndarray:
    """Shrink ``z`` until it is certified feasible for every filter."""
    z = np.asarray(z, dtype=float)
    c = _box_correlation(Y.data, z)
    if c <= 2 * beta:
        return z.copy()
    return z * (2 * beta / c) * (1 - 1e-12)


def gap_report(p_value: float, d_value: float) -> float:
    """Relative gap ``|p - d| / max(d, eps)``."""
    return abs(p_value - d_value) / max(d_value, _MACHINE_FLOOR)
