"""Natural nonholonomic systems and their volume invariants.

A system is a chart, a kinetic-energy metric, a potential, and an ordered
list of independent constraint 1-forms on a domain box.  From these we build
the dual constraint fields W^a (metric sharp of each constraint), the
constraint mass matrix, the density 1-form whose exactness governs the
existence of a configuration-dependent invariant density, the torsion trace,
and a pointwise divergence evaluator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import expr as ex
from . import forms as fm
from .backends import eval_point, eval_program
from .compile import compile_exprs

# Scale constant relating the divergence of the reduced flow to the density
# form: div = -DIVERGENCE_SCALE * theta(qdot).  Calibrated against the
# finite-difference trace oracle in dynamics.volume_rate_audit, which fits
# the constant per run; the calibration tests pin it at 1.
DIVERGENCE_SCALE = 1.0


class SystemError_(Exception):
    pass


class PositivityError(SystemError_):
    pass


class DegenerateRealizationError(SystemError_):
    pass


class ConstraintViolationError(SystemError_):
    pass


@dataclass
class NonholonomicSystem:
    name: str
    chart: tuple[str, ...]
    metric: tuple[tuple[ex.Expr, ...], ...]
    potential: ex.Expr
    constraints: list[fm.KForm]
    domain: ex.Domain
    params: dict[str, float]
    angles: tuple[str, ...] = ()
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return len(self.chart)

    @property
    def n_constraints(self) -> int:
        return len(self.constraints)

    def cached(self, key, builder):
        if key not in self._cache:
            self._cache[key] = builder()
        return self._cache[key]


@dataclass
class MassMatrix:
    entries: tuple[tuple[ex.Expr, ...], ...]
    inverse: tuple[tuple[ex.Expr, ...], ...]
    det: ex.Expr


@dataclass
class FrobeniusResult:
    holonomic: bool
    witness: tuple[int, int, int] | None  # (constraint, frame a, frame b)


def sym_det(mat: Sequence[Sequence[ex.Expr]]) -> ex.Expr:
    """Determinant by minor expansion with structural-zero pruning."""
    n = len(mat)
    memo: dict[tuple[tuple[int, ...], tuple[int, ...]], ex.Expr] = {}

    def minor(rows: tuple[int, ...], cols: tuple[int, ...]) -> ex.Expr:
        if len(rows) == 1:
            return mat[rows[0]][cols[0]]
        got = memo.get((rows, cols))
        if got is not None:
            return got
        # expand along the row with the most structural zeros
        best, zeros = rows[0], -1
        for r in rows:
            z = sum(1 for c in cols if ex.is_const(mat[r][c], 0.0))
            if z > zeros:
                best, zeros = r, z
        ri = rows.index(best)
        sub_rows = rows[:ri] + rows[ri + 1 :]
        acc = ex.ZERO
        for cj, c in enumerate(cols):
            entry = mat[best][c]
            if ex.is_const(entry, 0.0):
                continue
            sub = minor(sub_rows, cols[:cj] + cols[cj + 1 :])
            term = ex.mul(entry, sub)
            if (ri + cj) % 2:
                term = ex.neg(term)
            acc = ex.add(acc, term)
        memo[(rows, cols)] = acc
        return acc

    idx = tuple(range(n))
    return minor(idx, idx)


def sym_inverse(mat: Sequence[Sequence[ex.Expr]]) -> tuple[tuple[tuple[ex.Expr, ...], ...], ex.Expr]:
    """Adjugate-over-determinant inverse; exact as a rational expression."""
    n = len(mat)
    det = sym_det(mat)
    if n == 1:
        return ((ex.div(ex.ONE, mat[0][0]),),), mat[0][0]
    inv = []
    for i in range(n):
        row = []
        for j in range(n):
            rows = tuple(r for r in range(n) if r != j)
            cols = tuple(c for c in range(n) if c != i)
            sub = [[mat[r][c] for c in cols] for r in rows]
            cof = sym_det(sub)
            if (i + j) % 2:
                cof = ex.neg(cof)
            row.append(ex.div(cof, det))
        inv.append(tuple(row))
    return tuple(inv), det


def compile_on_chart(sys: NonholonomicSystem, exprs: Sequence[ex.Expr]):
    return compile_exprs(list(exprs), sys.chart, sys.params)


def constraint_matrix(sys: NonholonomicSystem) -> list[list[ex.Expr]]:
    """Constraint covector components as an m x n expression matrix."""
    return [list(fm.components(eta)) for eta in sys.constraints]


def validate_system(sys: NonholonomicSystem, n_samples: int = 64, seed: int = 0) -> None:
    """Check metric symmetry and positivity and constraint independence at
    seeded domain samples; raises a typed error on failure."""
    n, m = sys.dim, sys.n_constraints
    if m >= n:
        raise DegenerateRealizationError(
            f"need fewer constraints than coordinates (m={m}, n={n})"
        )
    for eta in sys.constraints:
        if eta.degree != 1 or eta.chart != sys.chart:
            raise SystemError_("constraints must be 1-forms on the system chart")
    flat_g = [sys.metric[i][j] for i in range(n) for j in range(n)]
    sym_resid = [
        ex.sub(sys.metric[i][j], sys.metric[j][i]) for i in range(n) for j in range(i)
    ]
    A = constraint_matrix(sys)
    flat_A = [A[a][i] for a in range(m) for i in range(n)]
    vals = ex.sample_values(
        flat_g + sym_resid + flat_A, sys.domain, sys.params, n_samples, seed
    )
    G = vals[: n * n].reshape(n, n, -1)
    S = vals[n * n : n * n + len(sym_resid)]
    Amat = vals[n * n + len(sym_resid) :].reshape(m, n, -1)
    if len(sym_resid) and np.abs(S).max() > 1e-9 * (1.0 + np.abs(G).max()):
        raise SystemError_("metric is not symmetric")
    for p in range(G.shape[2]):
        try:
            np.linalg.cholesky(G[:, :, p])
        except np.linalg.LinAlgError:
            raise PositivityError(
                f"metric not positive-definite at sample {p}"
            ) from None
        sv = np.linalg.svd(Amat[:, :, p], compute_uv=False)
        if sv[-1] <= 1e-10 * max(1.0, sv[0]):
            raise DegenerateRealizationError(
                f"constraints lose rank at sample {p}"
            )


def metric_inverse(sys: NonholonomicSystem):
    return sys.cached("ginv", lambda: sym_inverse([list(r) for r in sys.metric]))


def sharp(sys: NonholonomicSystem, a: fm.KForm) -> fm.VectorField:
    """Metric sharp: the vector field W with g(W, .) = a."""
    ginv, _ = metric_inverse(sys)
    comps = fm.components(a)
    out = []
    for i in range(sys.dim):
        acc = ex.ZERO
        for j in range(sys.dim):
            acc = ex.add(acc, ex.mul(ginv[i][j], comps[j]))
        out.append(acc)
    return fm.VectorField(sys.chart, tuple(out))


def dual_fields(sys: NonholonomicSystem) -> list[fm.VectorField]:
    return sys.cached("W", lambda: [sharp(sys, eta) for eta in sys.constraints])


def mass_matrix(sys: NonholonomicSystem, check: bool = True) -> MassMatrix:
    def build():
        W = dual_fields(sys)
        m = sys.n_constraints
        entries = tuple(
            tuple(fm.apply_one_form(sys.constraints[a], W[b]) for b in range(m))
            for a in range(m)
        )
        inv, det = sym_inverse([list(r) for r in entries])
        return MassMatrix(entries, inv, det)

    mm = sys.cached("mass", build)
    if check:
        _check_mass(sys, mm)
    return mm


def _check_mass(sys: NonholonomicSystem, mm: MassMatrix, n_samples: int = 64, seed: int = 0):
    if sys._cache.get("mass_checked"):
        return
    m = sys.n_constraints
    flat = [mm.entries[a][b] for a in range(m) for b in range(m)]
    prods = []
    for a in range(m):
        for b in range(m):
            acc = ex.ZERO
            for c in range(m):
                acc = ex.add(acc, ex.mul(mm.entries[a][c], mm.inverse[c][b]))
            target = ex.ONE if a == b else ex.ZERO
            prods.append(ex.sub(acc, target))
    vals = ex.sample_values(flat + prods, sys.domain, sys.params, n_samples, seed)
    M = vals[: m * m].reshape(m, m, -1)
    R = vals[m * m :].reshape(m, m, -1)
    scale = 1.0 + np.abs(M).max()
    for p in range(M.shape[2]):
        try:
            np.linalg.cholesky(0.5 * (M[:, :, p] + M[:, :, p].T))
        except np.linalg.LinAlgError:
            raise DegenerateRealizationError(
                f"constraint mass matrix not positive-definite at sample {p}"
            ) from None
    if np.abs(R).max() > 1e-9 * scale:
        raise DegenerateRealizationError("mass-matrix inverse check failed")
    sys._cache["mass_checked"] = True


def density_form(sys: NonholonomicSystem) -> fm.KForm:
    """The 1-form sum_ab minv_ab * L_{W^a} eta^b."""
    def build():
        W = dual_fields(sys)
        mm = mass_matrix(sys)
        acc = fm.zero_form(sys.chart, 1)
        for a in range(sys.n_constraints):
            for b in range(sys.n_constraints):
                lie = fm.lie_derivative(W[a], sys.constraints[b])
                acc = fm.add_forms(acc, fm.scale_form(mm.inverse[a][b], lie))
        return acc

    return sys.cached("theta", build)


def torsion_trace(sys: NonholonomicSystem) -> fm.KForm:
    """Trace of the constrained-connection torsion, minv_ab * i_{W^a} d eta^b."""
    def build():
        W = dual_fields(sys)
        mm = mass_matrix(sys)
        acc = fm.zero_form(sys.chart, 1)
        for a in range(sys.n_constraints):
            for b in range(sys.n_constraints):
                de = fm.d(sys.constraints[b])
                if de.is_structural_zero():
                    continue
                acc = fm.add_forms(acc, fm.scale_form(mm.inverse[a][b], fm.contract(W[a], de)))
        return acc

    return sys.cached("torsion_trace", build)


def log_det_mass_differential(sys: NonholonomicSystem) -> fm.KForm:
    mm = mass_matrix(sys)
    dd = fm.d(fm.scalar_form(sys.chart, mm.det))
    return fm.scale_form(ex.div(ex.ONE, mm.det), dd)


def adapted_frame(sys: NonholonomicSystem) -> list[fm.VectorField]:
    """A deterministic frame E_1..E_{n-m} spanning the constraint kernel.

    Coordinate fields are projected g-orthogonally off the W^a span (which
    kills every eta symbolically), then selected greedily by largest
    g-residual-norm at the domain center and orthonormalized there with
    constant coefficients, so the frame stays symbolic but is orthonormal at
    the center point.
    """
    def build():
        n, m = sys.dim, sys.n_constraints
        W = dual_fields(sys)
        mm = mass_matrix(sys)
        A = constraint_matrix(sys)
        candidates = []
        for i in range(n):
            comps = [ex.ONE if k == i else ex.ZERO for k in range(n)]
            for a in range(m):
                for b in range(m):
                    coef = ex.mul(mm.inverse[a][b], A[b][i])
                    for k in range(n):
                        comps[k] = ex.sub(comps[k], ex.mul(coef, W[a].comps[k]))
            candidates.append(comps)

        center = sys.domain.center()
        flat = [c for comps in candidates for c in comps]
        flat += [sys.metric[i][j] for i in range(n) for j in range(n)]
        prog = compile_on_chart(sys, flat)
        w = eval_point(prog, center)
        cand = w[: n * n].reshape(n, n)
        G = w[n * n :].reshape(n, n)

        chosen: list[int] = []
        coeffs_rows: list[np.ndarray] = []  # rows express E_a over candidates
        basis_num: list[np.ndarray] = []
        for _ in range(n - m):
            best, best_norm, best_vec, best_coef = -1, -1.0, None, None
            for i in range(n):
                if i in chosen:
                    continue
                vec = cand[i].copy()
                coef = np.zeros(n)
                coef[i] = 1.0
                for b, eb in enumerate(basis_num):
                    proj = float(eb @ G @ vec)
                    vec -= proj * eb
                    coef -= proj * coeffs_rows[b]
                norm = float(vec @ G @ vec)
                if norm > best_norm + 1e-12:
                    best, best_norm, best_vec, best_coef = i, norm, vec, coef
            if best_norm <= 1e-12:
                raise DegenerateRealizationError("frame construction lost rank at center")
            chosen.append(best)
            s = 1.0 / float(np.sqrt(best_norm))
            basis_num.append(best_vec * s)
            coeffs_rows.append(best_coef * s)

        frame = []
        for row in coeffs_rows:
            comps = [ex.ZERO] * n
            for i, c in enumerate(row):
                if abs(c) < 1e-15:
                    continue
                for k in range(n):
                    comps[k] = ex.add(comps[k], ex.mul(ex.const(c), candidates[i][k]))
            frame.append(fm.VectorField(sys.chart, tuple(comps)))
        return frame

    return sys.cached("frame", build)


def frobenius_test(sys: NonholonomicSystem, n_samples: int = 64, seed: int = 0) -> FrobeniusResult:
    """Holonomic iff eta([E_a, E_b]) samples to zero for every constraint and
    frame pair; the witness is the first violating triple."""
    frame = adapted_frame(sys)
    for a in range(len(frame)):
        for b in range(a + 1, len(frame)):
            br = fm.bracket(frame[a], frame[b])
            for al, eta in enumerate(sys.constraints):
                val = fm.apply_one_form(eta, br)
                scales = [
                    ex.mul(fm.components(eta)[i], br.comps[i]) for i in range(sys.dim)
                ]
                if not ex.is_zero(
                    val, sys.domain, sys.params, n_samples, 1e-9, seed, scales
                ):
                    return FrobeniusResult(False, (al, a, b))
    return FrobeniusResult(True, None)


def theta_program(sys: NonholonomicSystem):
    def build():
        theta = density_form(sys)
        return compile_on_chart(sys, list(fm.components(theta)))

    return sys.cached("theta_prog", build)


def constraint_program(sys: NonholonomicSystem):
    def build():
        A = constraint_matrix(sys)
        flat = [A[a][i] for a in range(sys.n_constraints) for i in range(sys.dim)]
        return compile_on_chart(sys, flat)

    return sys.cached("A_prog", build)


def constraint_values(sys: NonholonomicSystem, q: np.ndarray) -> np.ndarray:
    prog = constraint_program(sys)
    return eval_point(prog, q).reshape(sys.n_constraints, sys.dim)


def divergence(sys: NonholonomicSystem, q: np.ndarray, qdot: np.ndarray) -> float:
    """Pointwise divergence of the reduced flow, -DIVERGENCE_SCALE*theta(qdot).

    Requires qdot to satisfy the constraints at q to 1e-10.
    """
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    A = constraint_values(sys, q)
    resid = np.abs(A @ qdot).max() if len(A) else 0.0
    if resid > 1e-10 * max(1.0, float(np.abs(qdot).max())):
        raise ConstraintViolationError(
            f"velocity violates constraints (residual {resid:.3e})"
        )
    tv = eval_point(theta_program(sys), q)
    return float(-DIVERGENCE_SCALE * (tv @ qdot))


def rescale_constraint(sys: NonholonomicSystem, index: int, h: ex.Expr) -> NonholonomicSystem:
    """A new system realizing the same distribution with eta_index -> h*eta."""
    constraints = list(sys.constraints)
    constraints[index] = fm.scale_form(h, constraints[index])
    return NonholonomicSystem(
        name=f"{sys.name}_rescaled",
        chart=sys.chart,
        metric=sys.metric,
        potential=sys.potential,
        constraints=constraints,
        domain=sys.domain,
        params=dict(sys.params),
        angles=sys.angles,
    )
