"""Region patterns of the soft-threshold hyperplane arrangement.

For a filter ``u`` each row ``y_i`` of the patch matrix falls into one of
three regions of its response ``a_i = y_i . u``::

    H1: a_i <= -lam     H2: |a_i| <= lam (dead zone)     H3: a_i >= lam

and the diagonal ``q`` with ``q_i = (a_i + lam)/a_i`` on H1, ``0`` on H2 and
``(a_i - lam)/a_i`` on H3 linearises the soft threshold at that filter:
``q * (Y u) == tau(Y u)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .dataio import PatchMatrix

H1, H2, H3 = 1, 2, 3
TIE_EPSILON = 1e-12


class SetReading(str, Enum):
    """How dead-zone rows enter the cone constraints.

    ``overlap`` puts H2 rows in both the ">= 0" and "<= 0" sets, which forces
    ``y_i . w == 0`` there.  ``disjoint`` keeps H1/H3 apart and leaves H2 rows
    unconstrained (their weight in ``q`` is zero).
    """

    OVERLAP = "overlap"
    DISJOINT = "disjoint"


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RegionPattern:
    labels: np.ndarray  # int8 in {1, 2, 3}
    anchor: np.ndarray
    anchor_response: np.ndarray
    q_diag: np.ndarray
    lam: float

    def __post_init__(self):
        object.__setattr__(self, "labels", _frozen(self.labels, np.int8))
        object.__setattr__(self, "anchor", _frozen(self.anchor))
        object.__setattr__(self, "anchor_response", _frozen(self.anchor_response))
        object.__setattr__(self, "q_diag", _frozen(self.q_diag))

    @property
    def key(self) -> bytes:
        return self.labels.tobytes()

    def label_string(self) -> str:
        return "".join(str(int(c)) for c in self.labels)

    def region_masks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.labels == H1, self.labels == H2, self.labels == H3

    def constraint_sets(self, reading: SetReading = SetReading.OVERLAP):
        """Row masks of S1, S2, S3."""
        h1, h2, h3 = self.region_masks()
        if SetReading(reading) is SetReading.OVERLAP:
            return h1 | h2, h2.copy(), h2 | h3
        return h1, h2, h3

    def is_dead(self) -> bool:
        """True when every row sits in the dead zone (the pattern maps everything to 0)."""
        return not np.any(self.q_diag)

    def to_dict(self) -> dict:
        return {
            "labels": [str(int(c)) for c in self.labels],
            "anchor": self.anchor.tolist(),
            "anchor_response": self.anchor_response.tolist(),
            "q_diag": self.q_diag.tolist(),
            "lam": self.lam,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegionPattern":
        return cls(
            np.array([int(c) for c in d["labels"]], dtype=np.int8),
            d["anchor"],
            d["anchor_response"],
            d["q_diag"],
            float(d["lam"]),
        )


@dataclass(frozen=True)
class PatternSet:
    patterns: tuple[RegionPattern, ...]
    source_seed: int | None = None
    samples_drawn: int = 0
    lam: float = 0.0
    rows: int = field(default=0)

    def __post_init__(self):
        keys = [p.key for p in self.patterns]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate label sequence in pattern set")

    def __len__(self) -> int:
        return len(self.patterns)

    def __iter__(self):
        return iter(self.patterns)

    def label_keys(self) -> set[bytes]:
        return {p.key for p in self.patterns}

    def q_matrix(self) -> np.ndarray:
        """``(I, P)`` matrix whose column p is pattern p's diagonal."""
        return np.column_stack([p.q_diag for p in self.patterns])

    def to_json(self, path=None) -> str:
        text = json.dumps(
            {
                "source_seed": self.source_seed,
                "samples_drawn": self.samples_drawn,
                "lam": self.lam,
                "rows": self.rows,
                "patterns": [p.to_dict() for p in self.patterns],
            },
            indent=1,
        )
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, text: str) -> "PatternSet":
        d = json.loads(text)
        pats = tuple(RegionPattern.from_dict(p) for p in d["patterns"])
        return cls(pats, d["source_seed"], d["samples_drawn"], d["lam"], d["rows"])


def _labels_and_q(A: np.ndarray, lam: float, tie_epsilon: float):
    cut = lam + tie_epsilon
    labels = np.full(A.shape, H2, dtype=np.int8)
    labels[A < -cut] = H1
    labels[A > cut] = H3
    q = np.zeros(A.shape)
    # denominators are bounded away from zero by the tie rule
    neg = labels == H1
    pos = labels == H3
    q[neg] = (A[neg] + lam) / A[neg]
    q[pos] = (A[pos] - lam) / A[pos]
    return labels, q


def classify_regions(
    Y: PatchMatrix, anchor, lam: float, tie_epsilon: float = TIE_EPSILON
) -> RegionPattern:
    if lam < 0:
        raise ValueError("lam must be >= 0")
    anchor = np.asarray(anchor, dtype=float).reshape(-1)
    if anchor.shape[0] != Y.patch_dim:
        raise ValueError(f"anchor length {anchor.shape[0]} != patch_dim {Y.patch_dim}")
    a = Y.data @ anchor
    labels, q = _labels_and_q(a, lam, tie_epsilon)
    return RegionPattern(labels, anchor, a, q, float(lam))


def build_q(Y: PatchMatrix, anchor, lam: float, tie_epsilon: float = TIE_EPSILON) -> np.ndarray:
    """Diagonal of Q^S for the pattern containing ``anchor``; ``q * (Y @ anchor)`` is the soft threshold."""
    return classify_regions(Y, anchor, lam, tie_epsilon).q_diag


def default_radii(Y: PatchMatrix, lam: float) -> np.ndarray:
    """Anchor radii spanning the dead zone up to deep saturation."""
    norms = np.linalg.norm(Y.data, axis=1)
    norms = norms[norms > 0]
    typical = float(np.median(norms)) if norms.size else 1.0
    base = (lam if lam > 0 else 1.0) / typical
    return base * 2.0 ** np.arange(-2, 7)


_CHUNK = 4096


def sample_patterns(
    Y: PatchMatrix,
    lam: float,
    num_draws: int,
    seed: int,
    radii=None,
    tie_epsilon: float = TIE_EPSILON,
) -> PatternSet:
    """Distinct patterns hit by random anchors, in order of first appearance.

    Anchors are standard-normal directions (normalised) scaled by a radius
    picked uniformly from ``radii``.  Draws come in fixed 4096-sized chunks,
    each from its own generator keyed on ``(seed, chunk)``, so a smaller
    ``num_draws`` sees a prefix of a larger one.
    """
    if num_draws < 1:
        raise ValueError("num_draws must be >= 1")
    radii = default_radii(Y, lam) if radii is None else np.asarray(radii, dtype=float)
    d = Y.patch_dim
    seen: dict[bytes, int] = {}
    anchors, responses, labels_out, q_out = [], [], [], []
    for c in range(-(-num_draws // _CHUNK)):
        rng = np.random.default_rng([seed, c])
        dirs = rng.standard_normal((_CHUNK, d))
        dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-300)
        r = rng.choice(radii, size=_CHUNK)
        n = min(_CHUNK, num_draws - c * _CHUNK)
        U = dirs[:n] * r[:n, None]
        A = U @ Y.data.T
        labels, q = _labels_and_q(A, lam, tie_epsilon)
        _, first = np.unique(labels, axis=0, return_index=True)
        for k in np.sort(first):
            key = labels[k].tobytes()
            if key in seen:
                continue
            seen[key] = len(anchors)
            anchors.append(U[k])
            responses.append(A[k])
            labels_out.append(labels[k])
            q_out.append(q[k])
    pats = tuple(
        RegionPattern(l, u, a, q, float(lam))
        for l, u, a, q in zip(labels_out, anchors, responses, q_out)
    )
    return PatternSet(pats, seed, num_draws, float(lam), Y.rows)


def enumerate_patterns_2d(Y: PatchMatrix, lam: float, tie_epsilon: float = TIE_EPSILON) -> set[bytes]:
    """Every full-dimensional cell of the arrangement, for two-column patch matrices.

    Each cell of a line arrangement that is not all-parallel has a vertex on
    its boundary, so probing a small circle around every vertex at the
    bisectors of consecutive line directions reaches all of them.
    """
    if Y.patch_dim != 2:
        raise ValueError("exhaustive enumeration is implemented for patch_dim == 2 only")
    rows = Y.data[np.linalg.norm(Y.data, axis=1) > 0]
    normals = np.vstack([rows, rows])
    offsets = np.concatenate([np.full(len(rows), lam), np.full(len(rows), -lam)])
    probes = []
    if len(rows):
        ang = np.sort(np.mod(np.arctan2(rows[:, 1], rows[:, 0]) + np.pi / 2, np.pi))
        ang = np.concatenate([ang, ang + np.pi])
        ang = np.sort(ang)
        gaps = np.diff(np.concatenate([ang, ang[:1] + 2 * np.pi]))
        mids = (ang + gaps / 2)[gaps > 1e-12]
        circle = np.column_stack([np.cos(mids), np.sin(mids)])

        verts = []
        for i in range(len(normals)):
            for j in range(i + 1, len(normals)):
                M = np.vstack([normals[i], normals[j]])
                det = np.linalg.det(M)
                if abs(det) < 1e-12 * np.linalg.norm(normals[i]) * np.linalg.norm(normals[j]):
                    continue
                verts.append(np.linalg.solve(M, [offsets[i], offsets[j]]))
        if verts:
            dist_scale = np.linalg.norm(normals, axis=1)
            for v in verts:
                dist = np.abs(normals @ v - offsets) / dist_scale
                off = dist[dist > 1e-9 * (1 + np.linalg.norm(v))]
                delta = 1e-3 * (off.min() if off.size else 1.0)
                probes.append(v + delta * circle)
        else:
            # all lines parallel: walk along the common normal
            n = rows[0] / np.linalg.norm(rows[0])
            t = np.sort(np.concatenate([offsets / (normals @ n)]))
            span = 1.0 + np.abs(t).max()
            mids_t = np.concatenate([[t[0] - span], (t[:-1] + t[1:]) / 2, [t[-1] + span]])
            probes.append(mids_t[:, None] * n[None, :])
    else:
        probes.append(np.zeros((1, 2)))
    P = np.vstack(probes)
    labels, _ = _labels_and_q(P @ Y.data.T, lam, tie_epsilon)
    return {row.tobytes() for row in labels}


def numerical_rank(Y: PatchMatrix, rel_tol: float = 1e-10) -> int:
    s = np.linalg.svd(Y.data, compute_uv=False)
    return int(np.sum(s > rel_tol * s[0])) if s.size and s[0] > 0 else 0


def _binomial_prefix(n: int, top: int) -> int:
    """``sum_{j=0}^{top} C(n, j)`` by the running ratio C(n, j+1) = C(n, j) (n - j) / (j + 1)."""
    total, term = 0, 1
    for j in range(min(top, n) + 1):
        total += term
        term = term * (n - j) // (j + 1)
    return total


def pattern_count_bound(I: int, rank_r: int) -> int:
    """``3 * sum_{j<r} C(I-1, j)``, exact."""
    if not (1 <= rank_r <= I):
        raise ValueError("need 1 <= rank_r <= I")
    return 3 * _binomial_prefix(I - 1, rank_r - 1)


def pattern_count_bound_closed_form(I: int, rank_r: int) -> float:
    """The looser ``3 r (e (I-1) / r)^r``; raises OverflowError past float range."""
    if not (1 <= rank_r <= I):
        raise ValueError("need 1 <= rank_r <= I")
    try:
        val = 3.0 * rank_r * (math.e * (I - 1) / rank_r) ** rank_r
    except OverflowError:
        raise OverflowError(f"closed-form bound overflows for I={I}, r={rank_r}") from None
    if math.isinf(val):
        raise OverflowError(f"closed-form bound overflows for I={I}, r={rank_r}")
    return val


def affine_cell_bound(I: int, rank_r: int) -> int:
    """Cells of ``2I`` affine hyperplanes (``y_i . u = +-lam``) in a rank-r space: ``sum_{j<=r} C(2I, j)``."""
    if not (0 <= rank_r <= I):
        raise ValueError("need 0 <= rank_r <= I")
    return _binomial_prefix(2 * I, rank_r)
