"""Convex-hull surrogate: LP clipping, error inflation, interval bounds.

The surrogate g replaces the network f by projecting reduced logits onto
the convex hull of reduced training logits; its deterministic reachset is
the hull itself. A conformal hyper-rectangle over the residual q = f - g
then inflates the hull (a Minkowski sum realized per component as interval
addition), giving intervals on every logit with the full guarantee.

The projection is a small-row linear program (the hull may have thousands
of generators but the reduced space has N dimensions), so the solver here
is a dense two-phase revised simplex: Dantzig pricing, switching to
Bland's anti-cycling rule under stalling. The clipping hot loop skips the
LP whenever a point certifies as interior via barycentric coordinates
against a greedily chosen inscribed simplex of hull points; the
certificate is exact containment in a sub-hull, so it never loosens
results, and the hull itself always keeps every training point.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .calibrate import CenterScale, build_calibration, center_and_scales
from .guarantees import GuaranteeSpec, guarantee_confidence
from .model import MlpNetwork, infer
from .pca import ProjectionBasis, deflate, load_basis, save_basis
from .perturb import PerturbationSpec, apply_batch, sample_lambdas
from ._seeds import stage_rng

__all__ = [
    "LpError",
    "LpInfeasibleError",
    "LpUnboundedError",
    "LpResult",
    "lp_solve",
    "HullModel",
    "SurrogateReachSet",
    "clip",
    "clip_batch",
    "surrogate_predict",
    "build_surrogate_reachset",
    "project_intervals",
    "save_surrogate",
    "load_surrogate",
    "PipelineStageError",
]

_RED_COST_TOL = 1e-10
_PIVOT_TOL = 1e-11
_FEAS_TOL = 1e-9
_STALL_LIMIT = 24
_INTERIOR_MARGIN = 1e-9

# Sampling happens in fixed-size blocks so that a run is reproducible from
# its seed regardless of sizes requested downstream.
PIPELINE_CHUNK = 8192


class LpError(RuntimeError):
    pass


class LpInfeasibleError(LpError):
    pass


class LpUnboundedError(LpError):
    pass


class PipelineStageError(RuntimeError):
    """A surrogate pipeline stage failed; the stage name leads the message."""


@dataclass(frozen=True)
class LpResult:
    x: np.ndarray
    fun: float
    iterations: int


def _iterate(A, b, c, basis, max_iters):
    """Primal revised simplex on min c'x s.t. Ax=b, x>=0 from a feasible
    basis. Dantzig pricing; Bland's rule takes over after a stall."""
    n = A.shape[1]
    stall = 0
    last_obj = np.inf
    for it in range(max_iters):
        B = A[:, basis]
        try:
            xB = np.linalg.solve(B, b)
            y = np.linalg.solve(B.T, c[basis])
        except np.linalg.LinAlgError as exc:
            raise LpError(f"singular basis at iteration {it}") from exc
        red = c - y @ A
        red[basis] = 0.0
        if stall >= _STALL_LIMIT:
            negatives = np.nonzero(red < -_RED_COST_TOL)[0]
            if negatives.size == 0:
                return basis, np.maximum(xB, 0.0), it
            q = int(negatives[0])
        else:
            q = int(np.argmin(red))
            if red[q] >= -_RED_COST_TOL:
                return basis, np.maximum(xB, 0.0), it
        d = np.linalg.solve(B, A[:, q])
        positive = d > _PIVOT_TOL
        if not positive.any():
            raise LpUnboundedError("objective unbounded below")
        ratios = np.full(d.shape, np.inf)
        ratios[positive] = np.maximum(xB[positive], 0.0) / d[positive]
        best = ratios.min()
        ties = np.nonzero(ratios <= best + 1e-15)[0]
        # leaving tie-break by lowest variable index (Bland-safe)
        p = int(ties[np.argmin(basis[ties])])
        obj = float(c[basis] @ xB)
        stall = stall + 1 if obj >= last_obj - 1e-12 * (1.0 + abs(obj)) else 0
        last_obj = min(last_obj, obj)
        basis[p] = q
    raise LpError(f"simplex did not terminate within {max_iters} iterations")


def _solve_standard(A, b, c, basis0=None, max_iters=None):
    """Two-phase solve of min c'x s.t. Ax = b, x >= 0.

    ``basis0`` skips phase 1 when the caller can construct a feasible
    basis directly (the clipping LPs always can).
    """
    M, n = A.shape
    if max_iters is None:
        max_iters = 50 * (n + M) + 200
    flip = b < 0
    if flip.any():
        A = A.copy()
        b = b.copy()
        A[flip] *= -1.0
        b[flip] *= -1.0
    if basis0 is not None:
        basis, xB, iters = _iterate(A, b, c, np.array(basis0, dtype=np.int64), max_iters)
        x = np.zeros(n)
        x[basis] = xB
        return x, float(c @ x), iters

    # phase 1: artificial variable j is the unit column for row j
    A1 = np.hstack([A, np.eye(M)])
    c1 = np.concatenate([np.zeros(n), np.ones(M)])
    basis = np.arange(n, n + M, dtype=np.int64)
    basis, xB, it1 = _iterate(A1, b, c1, basis, max_iters)
    if float(c1[basis] @ xB) > _FEAS_TOL:
        raise LpInfeasibleError("phase 1 ended with positive infeasibility")
    drop_rows = []
    for i in np.nonzero(basis >= n)[0]:
        # artificial basic at zero: pivot in any usable structural column,
        # otherwise its row is linearly dependent and can be dropped
        B = A1[:, basis]
        row_i = np.linalg.solve(B, A)[i]
        in_basis = set(basis.tolist())
        candidates = [
            q for q in np.nonzero(np.abs(row_i) > _PIVOT_TOL)[0] if q not in in_basis
        ]
        if candidates:
            basis[i] = candidates[0]
        else:
            drop_rows.append(int(basis[i]) - n)
    if drop_rows:
        keep = np.setdiff1d(np.arange(M), drop_rows)
        A, b = A[keep], b[keep]
        basis = basis[basis < n]
        if basis.size != keep.size:
            raise LpError("inconsistent basis after dropping redundant rows")
    basis, xB, it2 = _iterate(A, b, c, basis.astype(np.int64), max_iters)
    x = np.zeros(n)
    x[basis] = xB
    return x, float(c @ x), it1 + it2


def lp_solve(
    c,
    a_ub=None,
    b_ub=None,
    a_eq=None,
    b_eq=None,
    bounds=None,
    max_iters=None,
) -> LpResult:
    """Dense LP: minimize c'x subject to a_ub x <= b_ub, a_eq x = b_eq and
    per-variable (lo, hi) bounds (default (0, None)).

    Returns the primal optimum with constraint violation below 1e-9 and
    objective within 1e-9 of optimal.

    Raises
    ------
    LpInfeasibleError / LpUnboundedError
        For empty feasible sets and directions of unbounded descent.
    """
    c = np.asarray(c, dtype=np.float64)
    n = c.shape[0]
    a_ub = np.zeros((0, n)) if a_ub is None else np.asarray(a_ub, dtype=np.float64)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=np.float64)
    a_eq = np.zeros((0, n)) if a_eq is None else np.asarray(a_eq, dtype=np.float64)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=np.float64)
    if bounds is None:
        bounds = [(0.0, None)] * n
    if len(bounds) != n:
        raise ValueError("bounds length disagrees with objective")

    # canonicalize: shift finite lower bounds to zero, split free variables,
    # move finite upper bounds into inequality rows
    shift = np.zeros(n)
    split = []  # indices of free variables, each gains a negative part
    extra_ub = []
    for i, (lo, hi) in enumerate(bounds):
        if lo is None or np.isneginf(lo):
            split.append(i)
        else:
            shift[i] = lo
        if hi is not None and not np.isposinf(hi):
            row = np.zeros(n)
            row[i] = 1.0
            extra_ub.append((row, hi))
    if extra_ub:
        a_ub = np.vstack([a_ub] + [r for r, _ in extra_ub])
        b_ub = np.concatenate([b_ub, [h for _, h in extra_ub]])

    b_ub_s = b_ub - a_ub @ shift
    b_eq_s = b_eq - a_eq @ shift
    n_neg = len(split)
    mu, me = a_ub.shape[0], a_eq.shape[0]
    total = n + n_neg + mu
    A = np.zeros((mu + me, total))
    A[:mu, :n] = a_ub
    A[mu:, :n] = a_eq
    for k, i in enumerate(split):
        A[:mu, n + k] = -a_ub[:, i]
        A[mu:, n + k] = -a_eq[:, i]
    A[:mu, n + n_neg :] = np.eye(mu)
    bb = np.concatenate([b_ub_s, b_eq_s])
    cc = np.zeros(total)
    cc[:n] = c
    cc[n : n + n_neg] = -c[split]

    x_std, _, iters = _solve_standard(A, bb, cc, max_iters=max_iters)
    x = x_std[:n].copy()
    x[split] -= x_std[n : n + n_neg]
    x += shift
    return LpResult(x=x, fun=float(c @ x), iterations=iters)


# ---------------------------------------------------------------------------
# Hull model and the clipping block
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HullModel:
    """Convex hull of the t reduced training logits (rows of ``points``).

    Keeps every training point as a generator. ``simplex_idx`` names the
    vertices of a max-volume inscribed simplex used only to certify
    interior points cheaply; ``degenerate`` flags clouds too flat to build
    one (clipping still works, every query just takes the LP route).
    """

    points: np.ndarray  # (t, N)
    basis: Optional[ProjectionBasis] = None
    simplex_idx: Optional[np.ndarray] = None
    _bary_solver: Optional[tuple] = None
    degenerate: bool = False

    @classmethod
    def from_points(cls, points: np.ndarray, basis=None) -> "HullModel":
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] < 1:
            raise ValueError("hull needs a non-empty (t, N) point array")
        if not np.all(np.isfinite(points)):
            raise ValueError("hull points must be finite")
        idx, solver = _inscribed_simplex(points)
        return cls(
            points=points,
            basis=basis,
            simplex_idx=idx,
            _bary_solver=solver,
            degenerate=idx is None,
        )

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def interior_mask(self, V: np.ndarray) -> np.ndarray:
        """True where the inscribed simplex certifies containment."""
        if self._bary_solver is None:
            return np.zeros(V.shape[0], dtype=bool)
        origin, inv_T = self._bary_solver
        W = (V - origin) @ inv_T.T  # barycentric coordinates (minus first)
        w0 = 1.0 - W.sum(axis=1)
        return (
            np.all(W >= _INTERIOR_MARGIN, axis=1) & (w0 >= _INTERIOR_MARGIN)
        )


def _inscribed_simplex(points: np.ndarray):
    """Greedy max-volume simplex of hull points; None when degenerate."""
    t, N = points.shape
    if t < N + 1:
        return None, None
    centroid = points.mean(axis=0)
    first = int(np.argmax(np.linalg.norm(points - centroid, axis=1)))
    chosen = [first]
    # grow by farthest point from the current affine hull
    Q = np.zeros((N, 0))
    for _ in range(N):
        rel = points - points[chosen[0]]
        resid = rel - (rel @ Q) @ Q.T
        dist = np.linalg.norm(resid, axis=1)
        nxt = int(np.argmax(dist))
        scale = max(np.linalg.norm(points[chosen[0]]), 1.0)
        if dist[nxt] <= 1e-12 * scale:
            return None, None
        chosen.append(nxt)
        q = resid[nxt] / dist[nxt]
        Q = np.column_stack([Q, q])
    idx = np.array(chosen, dtype=np.int64)
    origin = points[idx[0]]
    T = (points[idx[1:]] - origin).T  # (N, N)
    try:
        inv_T = np.linalg.inv(T)
    except np.linalg.LinAlgError:
        return None, None
    return idx, (origin, inv_T)


class _ClipProblem:
    """Prebuilt standard-form arrays for projecting points onto one hull.

    Standard form for the l-inf variant (P is N x t, columns = hull points):

        [ P   -1  I  0 ] [alpha]   [ v]
        [-P   -1  0  I ] [  s  ] = [-v]
        [1^T   0  0  0 ] [slack]   [ 1]

    with everything nonnegative; minimize s. The l1 variant replaces the
    single epigraph variable by N of them. Only the right-hand side
    depends on the query point, and a feasible basis can be written down
    directly from the nearest hull point, so each solve starts in phase 2
    a few pivots from optimal.
    """

    def __init__(self, hull: HullModel, norm: str):
        P = hull.points.T.copy()
        N, t = P.shape
        self.P = P
        self.N, self.t = N, t
        self.norm = norm
        if norm == "l_inf":
            n_epi = 1
            epi_block = -np.ones((2 * N, 1))
        elif norm == "l_1":
            n_epi = N
            epi_block = -np.vstack([np.eye(N), np.eye(N)])
        else:
            raise ValueError(f"norm must be 'l_inf' or 'l_1', got {norm!r}")
        M = 2 * N + 1
        cols = t + n_epi + 2 * N
        A = np.zeros((M, cols))
        A[:N, :t] = P
        A[N : 2 * N, :t] = -P
        A[: 2 * N, t : t + n_epi] = epi_block
        A[: 2 * N, t + n_epi :] = np.eye(2 * N)
        A[2 * N, :t] = 1.0
        c = np.zeros(cols)
        c[t : t + n_epi] = 1.0
        self.A, self.c = A, c
        self.n_epi = n_epi
        self.max_iters = 50 * (cols + M) + 200

    def rhs(self, v: np.ndarray) -> np.ndarray:
        return np.concatenate([v, -v, [1.0]])

    def initial_basis(self, v: np.ndarray) -> np.ndarray:
        """Feasible basis at the hull vertex nearest to v."""
        P, t, N, n_epi = self.P, self.t, self.N, self.n_epi
        if self.norm == "l_inf":
            j0 = int(np.argmin(np.max(np.abs(v[:, None] - P), axis=0)))
            r = v - P[:, j0]
            i0 = int(np.argmax(np.abs(r)))
            # the inf-norm row that binds contributes no slack to the basis
            drop = t + n_epi + i0 if r[i0] <= 0 else t + n_epi + N + i0
            slack_cols = [t + n_epi + k for k in range(2 * N) if t + n_epi + k != drop]
            return np.array([j0, t] + slack_cols, dtype=np.int64)
        j0 = int(np.argmin(np.sum(np.abs(v[:, None] - P), axis=0)))
        r = v - P[:, j0]
        # all epigraph vars basic; per coordinate, the binding side's slack leaves
        slack_cols = [
            t + n_epi + i if r[i] <= 0 else t + n_epi + N + i for i in range(N)
        ]
        keep = [
            col
            for col in range(t + n_epi, t + n_epi + 2 * N)
            if col not in set(slack_cols)
        ]
        return np.array([j0] + list(range(t, t + n_epi)) + keep, dtype=np.int64)

    def solve(self, v: np.ndarray):
        basis = self.initial_basis(v)
        b = self.rhs(v)
        final_basis, xB, _ = _iterate(
            self.A, b, self.c, basis, self.max_iters
        )
        x = np.zeros(self.A.shape[1])
        x[final_basis] = xB
        alpha = x[: self.t]
        residual = float(self.c @ x)
        return alpha, residual


_CLIP_CACHE_ATTR = "_clip_problems"


def _clip_problem(hull: HullModel, norm: str) -> _ClipProblem:
    cache = getattr(hull, _CLIP_CACHE_ATTR, None)
    if cache is None:
        cache = {}
        object.__setattr__(hull, _CLIP_CACHE_ATTR, cache)
    if norm not in cache:
        cache[norm] = _ClipProblem(hull, norm)
    return cache[norm]


def clip(v: np.ndarray, hull: HullModel, norm: str = "l_inf"):
    """Project one reduced point onto the hull.

    Returns (v_hat, alpha, residual): the projection, its convex
    coefficients over the hull points, and the attained norm distance.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (hull.dim,):
        raise ValueError(f"point must have shape ({hull.dim},), got {v.shape}")
    problem = _clip_problem(hull, norm)
    alpha, residual = problem.solve(v)
    v_hat = hull.points.T @ alpha
    return v_hat, alpha, residual


_CLIP_BLOCK = 512


def clip_batch(V: np.ndarray, hull: HullModel, norm: str = "l_inf", threads: int = 1):
    """Project (k, N) points; returns (V_hat, residuals) without alphas.

    Interior points certified by the inscribed simplex keep their exact
    coordinates with residual zero; the remainder go through the LP in
    input order. ``threads`` caps a worker pool over fixed-size blocks of
    LP solves; per-sample results are written by index and do not depend
    on the worker count.
    """
    V = np.asarray(V, dtype=np.float64)
    out = V.copy()
    residuals = np.zeros(V.shape[0])
    inside = hull.interior_mask(V)
    todo = np.nonzero(~inside)[0]
    if todo.size:
        problem = _clip_problem(hull, norm)
        P = hull.points.T

        def run_block(indices):
            for i in indices:
                alpha, res = problem.solve(V[i])
                out[i] = P @ alpha
                residuals[i] = res

        blocks = [todo[s : s + _CLIP_BLOCK] for s in range(0, todo.size, _CLIP_BLOCK)]
        if threads > 1 and len(blocks) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(run_block, blocks))
        else:
            for block in blocks:
                run_block(block)
    return out, residuals


# ---------------------------------------------------------------------------
# Surrogate model and its inflated reachset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SurrogateReachSet:
    """Lifted hull inflated by the conformal error box.

    Component k of the reachset projects to the interval
    [error_center(k) + lift_lb(k) - sigma(k),
     error_center(k) + lift_ub(k) + sigma(k)].
    """

    hull: HullModel
    basis: ProjectionBasis
    error_center: np.ndarray
    error_sigma: np.ndarray
    lift_lb: np.ndarray
    lift_ub: np.ndarray
    guarantee: GuaranteeSpec

    def __post_init__(self):
        if np.any(self.lift_lb > self.lift_ub):
            raise ValueError("lift_lb must be <= lift_ub")
        if np.any(self.error_sigma < 0):
            raise ValueError("error_sigma must be non-negative")

    def project_intervals(self):
        return (
            self.error_center + self.lift_lb - self.error_sigma,
            self.error_center + self.lift_ub + self.error_sigma,
        )


def project_intervals(reachset):
    """Componentwise interval bounds of either reachset kind."""
    return reachset.project_intervals()


def surrogate_predict(
    model: MlpNetwork,
    basis: ProjectionBasis,
    hull: HullModel,
    x: np.ndarray,
    norm: str = "l_inf",
) -> np.ndarray:
    """g(x) = A clip(A^T f(x)): reduce the logits, project onto the hull,
    lift back. Accepts (n0,) or (k, n0)."""
    y = infer(model, x)
    single = y.ndim == 1
    Y = y[None, :] if single else y
    V = Y @ basis.matrix
    V_hat, _ = clip_batch(V, hull, norm)
    G = V_hat @ basis.matrix.T
    return G[0] if single else G


def build_surrogate_reachset(
    model: MlpNetwork,
    spec: PerturbationSpec,
    train_size: int,
    calib_size: int,
    aux_size: int,
    num_components: int,
    guarantee: GuaranteeSpec,
    seed: int = 0,
    norm: str = "l_inf",
    pca_opts: Optional[dict] = None,
) -> SurrogateReachSet:
    """End-to-end surrogate construction from disjoint seeded batches.

    Stage order: train the basis and hull on ``train_size`` samples,
    bound the lifted hull, fit error normalization on ``aux_size``
    separate samples, calibrate the error scores on ``calib_size`` more,
    then assemble the inflated set. Any failure is re-raised with the
    stage name attached.
    """
    if guarantee.calib_size_m != calib_size:
        raise ValueError("guarantee and calib_size disagree")

    def stage(name, fn):
        try:
            return fn()
        except Exception as exc:
            raise PipelineStageError(f"{name}: {exc}") from exc

    def collect_outputs(stage_name, count):
        rng = stage_rng(seed, stage_name)
        chunks = []
        remaining = count
        while remaining > 0:
            k = min(PIPELINE_CHUNK, remaining)
            lams = sample_lambdas(spec, k, rng)
            chunks.append(infer(model, apply_batch(spec, lams)))
            remaining -= k
        return np.vstack(chunks)

    def train():
        Y = collect_outputs("train", train_size)
        basis = deflate(Y, num_components, **(pca_opts or {}))
        V = Y @ basis.matrix
        hull = HullModel.from_points(V, basis=basis)
        lifted = V @ basis.matrix.T
        return basis, hull, lifted.min(axis=0), lifted.max(axis=0)

    basis, hull, lift_lb, lift_ub = stage("train", train)

    def residuals(stage_name, count):
        rng = stage_rng(seed, stage_name)
        rows = []
        remaining = count
        while remaining > 0:
            k = min(PIPELINE_CHUNK, remaining)
            lams = sample_lambdas(spec, k, rng)
            Y = infer(model, apply_batch(spec, lams))
            V_hat, _ = clip_batch(Y @ basis.matrix, hull, norm)
            rows.append(Y - V_hat @ basis.matrix.T)
            remaining -= k
        return np.vstack(rows)

    cs_q = stage("normalize", lambda: center_and_scales(residuals("aux", aux_size)))
    calib = stage(
        "calibrate",
        lambda: build_calibration(
            residuals("calib", calib_size), cs_q, source="surrogate-errors"
        ),
    )
    threshold = calib.rank_score(guarantee.rank_ell)
    return SurrogateReachSet(
        hull=hull,
        basis=basis,
        error_center=cs_q.center,
        error_sigma=cs_q.tau * threshold,
        lift_lb=lift_lb,
        lift_ub=lift_ub,
        guarantee=guarantee,
    )


# ---------------------------------------------------------------------------
# Persistence: basis container + raw hull points + JSON sidecar
# ---------------------------------------------------------------------------


def save_surrogate(sr: SurrogateReachSet, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    save_basis(sr.basis, os.path.join(directory, "basis.pca"))
    np.ascontiguousarray(sr.hull.points, dtype="<f8").tofile(
        os.path.join(directory, "hull_points.f64")
    )
    sidecar = {
        "hull_shape": list(sr.hull.points.shape),
        "error_center": sr.error_center.tolist(),
        "error_sigma": sr.error_sigma.tolist(),
        "lift_lb": sr.lift_lb.tolist(),
        "lift_ub": sr.lift_ub.tolist(),
        "guarantee": sr.guarantee.as_dict(),
    }
    with open(os.path.join(directory, "surrogate.json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_surrogate(directory) -> SurrogateReachSet:
    with open(os.path.join(directory, "surrogate.json")) as fh:
        sidecar = json.load(fh)
    basis = load_basis(os.path.join(directory, "basis.pca"))
    t, N = sidecar["hull_shape"]
    points = np.fromfile(
        os.path.join(directory, "hull_points.f64"), dtype="<f8"
    ).reshape(t, N)
    g = sidecar["guarantee"]
    guarantee = guarantee_confidence(g["epsilon"], g["rank_ell"], g["calib_size_m"])
    return SurrogateReachSet(
        hull=HullModel.from_points(points, basis=basis),
        basis=basis,
        error_center=np.array(sidecar["error_center"]),
        error_sigma=np.array(sidecar["error_sigma"]),
        lift_lb=np.array(sidecar["lift_lb"]),
        lift_ub=np.array(sidecar["lift_ub"]),
        guarantee=guarantee,
    )
