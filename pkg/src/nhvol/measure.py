"""Deciding invariant densities that depend only on configuration.

The density 1-form of a system is exactifiable iff some combination
theta + sum_a k_a(q) * eta^a is exact.  This module decides closedness by
sampling, searches for the multipliers k_a in a finite function basis by
least squares, reconstructs the log-density potential by staircase line
integrals when a closed representative is found, and, for single-constraint
systems, can certify nonexistence by eliminating k pointwise:

    d(theta + k eta) = 0  implies  (d theta)^eta + k (d eta)^eta = 0,

a linear condition that pins k at every sample; an inconsistent sample, or a
pinned k that fails the full closedness equation, is a witness that no
smooth multiplier exists at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Mapping, Sequence

import numpy as np

from . import expr as ex
from . import forms as fm
from . import nonhol as nh
from .backends import eval_point, eval_program
from .compile import compile_exprs

STATUS_EXACT = "EXACT_NO_MULTIPLIER"
STATUS_EXACT_MULT = "EXACT_WITH_MULTIPLIER"
STATUS_INCONSISTENT = "INCONSISTENT_ON_ANSATZ"
STATUS_NOT_CLOSED = "NOT_CLOSED_NO_ANSATZ"

ANSATZ_RESIDUAL_TOL = 1e-8
PATH_INDEPENDENCE_TOL = 1e-6
DF_CHECK_TOL = 1e-6


class MeasureError(Exception):
    pass


class PathError(MeasureError):
    pass


@dataclass
class AnsatzBasis:
    functions: list[ex.Expr]

    @staticmethod
    def default(sys: nh.NonholonomicSystem) -> "AnsatzBasis":
        """Constant plus sin/cos per coordinate, plus a linear term for
        non-angle coordinates."""
        funcs: list[ex.Expr] = [ex.ONE]
        for q in sys.chart:
            funcs.append(ex.sin(ex.var(q)))
            funcs.append(ex.cos(ex.var(q)))
            if q not in sys.angles:
                funcs.append(ex.var(q))
        return AnsatzBasis(funcs)

    @staticmethod
    def empty() -> "AnsatzBasis":
        return AnsatzBasis([])


def closedness(
    a: fm.KForm,
    dom: ex.Domain,
    params: Mapping[str, float] | None = None,
    n_samples: int = 64,
    tol: float = 1e-9,
    seed: int = 0,
) -> bool:
    """Sampled d(a) == 0, magnitude-normalized by the one-sided partials so
    that large cancelling terms do not mask a genuine residual."""
    if a.degree != 1:
        raise fm.DegreeError("closedness expects a 1-form")
    da = fm.d(a)
    if da.is_structural_zero():
        return True
    comps = fm.components(a)
    scales = []
    for (i, j) in da.coeffs:
        scales.append(ex.diff(comps[j], a.chart[i]))
        scales.append(ex.diff(comps[i], a.chart[j]))
    return fm.form_is_zero(da, dom, params, n_samples, tol, seed, scale_terms=scales)


@dataclass
class PotentialField:
    """Scalar potential f with df = a, reconstructed by staircase line
    integrals from a base point; density(x) = exp(f(x))."""

    form: fm.KForm
    chart: tuple[str, ...]
    base: np.ndarray
    params: dict[str, float]
    guards: list[ex.Expr]
    nodes_per_panel: int = 32
    max_panel: float = 0.5
    path_discrepancy: float = 0.0
    grid: dict | None = None
    expr: ex.Expr | None = None
    _prog: object = None
    _gauss: tuple = field(default=None, repr=False)

    def __post_init__(self):
        if self._prog is None:
            self._prog = compile_exprs(
                list(fm.components(self.form)), self.chart, self.params
            )
        if self._gauss is None:
            x, w = np.polynomial.legendre.leggauss(self.nodes_per_panel)
            self._gauss = (x, w)
        if self.guards:
            self._guard_prog = compile_exprs(list(self.guards), self.chart, self.params)
        else:
            self._guard_prog = None

    def _segment(self, start: np.ndarray, axis: int, lo: float, hi: float) -> float:
        """Integrate the axis component along the straight segment."""
        if lo == hi:
            return 0.0
        total = 0.0
        npanels = max(1, int(math.ceil(abs(hi - lo) / self.max_panel)))
        xg, wg = self._gauss
        edges = np.linspace(lo, hi, npanels + 1)
        for p in range(npanels):
            aa, bb = edges[p], edges[p + 1]
            mid, half = 0.5 * (aa + bb), 0.5 * (bb - aa)
            ts = mid + half * xg
            X = np.repeat(start[:, None], ts.size, axis=1)
            X[axis] = ts
            if self._guard_prog is not None:
                gv = eval_program(self._guard_prog, X)
                if np.any(np.abs(gv) < 1e-9):
                    raise PathError(
                        f"integration path crosses an excluded hypersurface on axis {self.chart[axis]}"
                    )
            vals = eval_program(self._prog, X)[axis]
            if not np.all(np.isfinite(vals)):
                raise PathError(f"nonfinite integrand on axis {self.chart[axis]}")
            total += half * float(wg @ vals)
        return total

    def value(self, point, order: Sequence[int] | None = None) -> float:
        x = self._as_array(point)
        order = range(len(self.chart)) if order is None else order
        cur = self.base.copy()
        total = 0.0
        for axis in order:
            total += self._segment(cur, axis, cur[axis], x[axis])
            cur[axis] = x[axis]
        return total

    def _as_array(self, point) -> np.ndarray:
        if isinstance(point, Mapping):
            return np.array([float(point[q]) for q in self.chart])
        return np.asarray(point, dtype=float)

    def __call__(self, point) -> float:
        return self.value(point)

    def density(self, point) -> float:
        return math.exp(self.value(point))

    def audit_paths(self, dom: ex.Domain, n_points: int = 12, seed: int = 0) -> float:
        """Max |ascending - descending| staircase discrepancy at samples."""
        rng = np.random.default_rng(seed)
        X = dom.sample(n_points, rng, self.params, shrink=0.02)
        dim = len(self.chart)
        worst = 0.0
        for c in range(X.shape[1]):
            fa = self.value(X[:, c], order=range(dim))
            fd = self.value(X[:, c], order=range(dim - 1, -1, -1))
            worst = max(worst, abs(fa - fd))
        self.path_discrepancy = worst
        return worst

    def build_grid(self, dom: ex.Domain, res: int = 21, max_axes: int = 3) -> None:
        """Tabulate f over the axes the form actually involves."""
        active = sorted(
            {i for (i,) in self.form.coeffs}
            | {
                self.chart.index(v)
                for c in self.form.coeffs.values()
                for v in ex.free_names(c)[0]
            }
        )
        if not active or len(active) > max_axes:
            self.grid = None if not active else {"axes": [self.chart[i] for i in active]}
            return
        axes_pts = [
            np.linspace(dom.intervals[self.chart[i]][0], dom.intervals[self.chart[i]][1], res)
            for i in active
        ]
        mesh = np.meshgrid(*axes_pts, indexing="ij")
        vals = np.empty(mesh[0].shape)
        it = np.nditer(mesh[0], flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            pt = self.base.copy()
            for a, ax in enumerate(active):
                pt[ax] = mesh[a][idx]
            vals[idx] = self.value(pt)
        self.grid = {
            "axes": [self.chart[i] for i in active],
            "points": [p.tolist() for p in axes_pts],
            "log_density": vals.tolist(),
        }


def potential(
    a: fm.KForm,
    base: np.ndarray | Mapping[str, float],
    dom: ex.Domain,
    params: Mapping[str, float] | None = None,
    guards: Sequence[ex.Expr] = (),
    audit: bool = True,
    grid: bool = True,
) -> PotentialField:
    """Line-integral potential of a closed 1-form; audits path independence
    by comparing ascending and descending staircase orders."""
    params = dict(params or {})
    pf = PotentialField(
        form=a,
        chart=a.chart,
        base=np.array([float(base[q]) for q in a.chart])
        if isinstance(base, Mapping)
        else np.asarray(base, dtype=float),
        params=params,
        guards=list(guards),
    )
    if audit:
        worst = pf.audit_paths(dom)
        if worst > PATH_INDEPENDENCE_TOL:
            raise PathError(
                f"staircase orders disagree by {worst:.3e}; form is not exact on the box"
            )
    if grid:
        pf.build_grid(dom)
    return pf


@dataclass
class MeasureVerdict:
    status: str
    multipliers: list[ex.Expr] | None
    potential: PotentialField | None
    density_expr: ex.Expr | None
    density_pattern: str | None
    residuals: dict
    nullspace_dim: int
    certified_nonexistence: bool
    witness: dict | None
    seed: int
    n_samples: int

    @property
    def volume_exists(self) -> bool:
        return self.status in (STATUS_EXACT, STATUS_EXACT_MULT)


def _wedge3_certificate(
    sys: nh.NonholonomicSystem, theta: fm.KForm, n_samples: int, seed: int
):
    """Single-constraint nonexistence certificate via pointwise elimination.

    Returns (certified, witness, stats).  Never certifies existence.
    """
    n = sys.dim
    if sys.n_constraints != 1 or n < 3:
        return False, None, {}
    eta = sys.constraints[0]
    dtheta_eta = fm.wedge(fm.d(theta), eta)
    deta_eta = fm.wedge(fm.d(eta), eta)
    keys = sorted(set(dtheta_eta.coeffs) | set(deta_eta.coeffs))
    if not keys:
        return False, None, {}
    exprs = [dtheta_eta.coeff(k) for k in keys] + [deta_eta.coeff(k) for k in keys]
    rng = np.random.default_rng(seed)
    X = sys.domain.sample(n_samples, rng, sys.params, shrink=0.05)
    prog = compile_exprs(exprs, sys.chart, sys.params)
    vals = eval_program(prog, X)
    rhs = vals[: len(keys)]
    col = vals[len(keys) :]
    scale = 1.0 + np.abs(rhs).max() + np.abs(col).max()
    # pointwise 1-unknown least squares: col * k = -rhs
    denom = np.sum(col * col, axis=0)
    pinned = denom > (1e-12 * scale) ** 2
    kvals = np.zeros(X.shape[1])
    kvals[pinned] = -np.sum(col * rhs, axis=0)[pinned] / denom[pinned]
    resid = np.abs(col * kvals[None, :] + rhs).max(axis=0)
    stats = {"wedge_residual_max": float(resid.max()), "pinned_fraction": float(pinned.mean())}
    bad = np.argmax(resid)
    if resid[bad] > 1e-6 * scale:
        witness = {
            "point": {q: float(X[i, bad]) for i, q in enumerate(sys.chart)},
            "kind": "pointwise wedge elimination inconsistent",
            "residual": float(resid[bad]),
        }
        return True, witness, stats
    if not np.all(pinned):
        return False, None, stats

    # k is pinned everywhere; plug back with finite-difference dk
    eta_c = fm.components(eta)
    deta = fm.d(eta)
    dth = fm.d(theta)
    pair_keys = list(combinations(range(n), 2))
    plug_exprs = [dth.coeff(k) for k in pair_keys] + [deta.coeff(k) for k in pair_keys] + list(eta_c)
    plug_prog = compile_exprs(plug_exprs, sys.chart, sys.params)

    def k_at(pt):
        w = eval_point(prog, pt)
        r, c = w[: len(keys)], w[len(keys) :]
        dn = float(c @ c)
        return -float(c @ r) / dn if dn > 0 else 0.0

    h = 1e-4
    worst = 0.0
    worst_pt = None
    for c in range(min(16, X.shape[1])):
        pt = X[:, c]
        kv = k_at(pt)
        dk = np.empty(n)
        for i in range(n):
            pp, pm = pt.copy(), pt.copy()
            pp[i] += h
            pm[i] -= h
            dk[i] = (k_at(pp) - k_at(pm)) / (2 * h)
        w = eval_point(plug_prog, pt)
        dthv = w[: len(pair_keys)]
        detav = w[len(pair_keys) : 2 * len(pair_keys)]
        etav = w[2 * len(pair_keys) :]
        local = 0.0
        mag = 1.0
        for r, (i, j) in enumerate(pair_keys):
            val = dthv[r] + (dk[i] * etav[j] - dk[j] * etav[i]) + kv * detav[r]
            local = max(local, abs(val))
            mag = max(mag, abs(dthv[r]) + abs(kv * detav[r]) + abs(dk[i] * etav[j]) + abs(dk[j] * etav[i]))
        if local / mag > worst:
            worst = local / mag
            worst_pt = pt
    stats["plugback_residual"] = float(worst)
    if worst > 1e-4:
        witness = {
            "point": {q: float(worst_pt[i]) for i, q in enumerate(sys.chart)},
            "kind": "pinned multiplier fails closedness",
            "residual": float(worst),
        }
        return True, witness, stats
    return False, None, stats


def _recognize_expr(
    sys: nh.NonholonomicSystem, a: fm.KForm, n_samples: int, seed: int
) -> tuple[ex.Expr, str] | None:
    """Match df = a against a small pattern table of log-type potentials."""
    mm = nh.mass_matrix(sys)
    candidates = [(mm.det, "det(mass_matrix)")] + [
        (mm.entries[i][i], f"mass_matrix[{i}][{i}]") for i in range(sys.n_constraints)
    ]
    for cand, label in candidates:
        for c in (1.0, -1.0, 0.5, -0.5, 2.0, -2.0):
            f = ex.mul(ex.const(c), ex.ln(cand))
            df = fm.d(fm.scalar_form(sys.chart, f))
            try:
                if fm.forms_close(df, a, sys.domain, sys.params, n_samples, 1e-9, seed):
                    return f, f"{label}^{c:g}"
            except ex.ExprError:
                continue
    return None


def _df_check(
    sys: nh.NonholonomicSystem, pf: PotentialField, a: fm.KForm, seed: int
) -> float:
    """Max |df(E_b) - a(E_b)| over frame directions at samples (df by FD)."""
    from .dynamics import frame_at

    rng = np.random.default_rng(seed + 17)
    X = sys.domain.sample(8, rng, sys.params, shrink=0.05)
    prog = compile_exprs(list(fm.components(a)), sys.chart, sys.params)
    h = 1e-5
    worst = 0.0
    for c in range(X.shape[1]):
        pt = X[:, c]
        E, _ = frame_at(sys, pt)
        av = eval_point(prog, pt)
        for b in range(E.shape[1]):
            e = E[:, b]
            scale = h / max(1.0, float(np.abs(e).max()))
            df_dir = (pf.value(pt + scale * e) - pf.value(pt - scale * e)) / (2 * scale)
            worst = max(worst, abs(df_dir - float(av @ e)))
    return worst


def exactify(
    sys: nh.NonholonomicSystem,
    basis: AnsatzBasis | None = None,
    n_samples: int = 64,
    seed: int = 0,
    reconstruct: bool = True,
) -> MeasureVerdict:
    """Decide whether theta + sum k_a eta^a can be made exact.

    Searches multipliers in the basis by least squares over sampled
    closedness equations.  INCONSISTENT_ON_ANSATZ is an honest "not found in
    this basis"; it upgrades to a certified nonexistence only through the
    single-constraint pointwise elimination.
    """
    theta = nh.density_form(sys)
    basis = AnsatzBasis.default(sys) if basis is None else basis
    residuals: dict = {}

    if closedness(theta, sys.domain, sys.params, n_samples, seed=seed):
        pf = None
        dexpr = None
        if reconstruct:
            pf = potential(
                theta, sys.domain.center(), sys.domain, sys.params, sys.domain.guards
            )
            residuals["path_discrepancy"] = pf.path_discrepancy
            residuals["df_check"] = _df_check(sys, pf, theta, seed)
            dexpr = _recognize_expr(sys, theta, n_samples, seed)
        return MeasureVerdict(
            status=STATUS_EXACT,
            multipliers=[ex.ZERO] * sys.n_constraints,
            potential=pf,
            density_expr=None if dexpr is None else ex.exp(dexpr[0]),
            density_pattern=None if dexpr is None else dexpr[1],
            residuals=residuals,
            nullspace_dim=0,
            certified_nonexistence=False,
            witness=None,
            seed=seed,
            n_samples=n_samples,
        )

    m = sys.n_constraints
    dtheta = fm.d(theta)
    if basis.functions:
        unknown_forms = []
        for al in range(m):
            for b in basis.functions:
                unknown_forms.append(fm.d(fm.scale_form(b, sys.constraints[al])))
        U = len(unknown_forms)
        S = max(4 * U, n_samples)
        pair_keys = sorted(
            set(dtheta.coeffs).union(*[set(f.coeffs) for f in unknown_forms])
        )
        exprs = [dtheta.coeff(k) for k in pair_keys]
        for f in unknown_forms:
            exprs.extend(f.coeff(k) for k in pair_keys)
        rng = np.random.default_rng(seed)
        X = sys.domain.sample(S, rng, sys.params, shrink=0.02)
        vals = eval_program(compile_exprs(exprs, sys.chart, sys.params), X)
        P = len(pair_keys)
        rhs = vals[:P].reshape(-1)
        cols = np.stack(
            [vals[P * (1 + u) : P * (2 + u)].reshape(-1) for u in range(U)], axis=1
        )
        coef, _, rank, _ = np.linalg.lstsq(cols, -rhs, rcond=None)
        resid = float(np.linalg.norm(cols @ coef + rhs))
        rel = resid / max(float(np.linalg.norm(rhs)), 1e-30)
        residuals["ansatz_residual"] = rel
        nullspace = U - int(rank)
        if rel < ANSATZ_RESIDUAL_TOL:
            multipliers = []
            for al in range(m):
                acc = ex.ZERO
                for bi, b in enumerate(basis.functions):
                    c = coef[al * len(basis.functions) + bi]
                    if abs(c) > 1e-10:
                        acc = ex.add(acc, ex.mul(ex.const(float(c)), b))
                multipliers.append(acc)
            closed = theta
            for al in range(m):
                closed = fm.add_forms(
                    closed, fm.scale_form(multipliers[al], sys.constraints[al])
                )
            if closedness(closed, sys.domain, sys.params, n_samples, tol=1e-7, seed=seed):
                all_zero = all(ex.is_const(k, 0.0) for k in multipliers)
                pf = None
                dexpr = None
                if reconstruct:
                    pf = potential(
                        closed, sys.domain.center(), sys.domain, sys.params, sys.domain.guards
                    )
                    residuals["path_discrepancy"] = pf.path_discrepancy
                    residuals["df_check"] = _df_check(sys, pf, closed, seed)
                    dexpr = _recognize_expr(sys, closed, n_samples, seed)
                return MeasureVerdict(
                    status=STATUS_EXACT if all_zero else STATUS_EXACT_MULT,
                    multipliers=multipliers,
                    potential=pf,
                    density_expr=None if dexpr is None else ex.exp(dexpr[0]),
                    density_pattern=None if dexpr is None else dexpr[1],
                    residuals=residuals,
                    nullspace_dim=nullspace,
                    certified_nonexistence=False,
                    witness=None,
                    seed=seed,
                    n_samples=n_samples,
                )
        status = STATUS_INCONSISTENT
        nullspace_dim = nullspace
    else:
        status = STATUS_NOT_CLOSED
        nullspace_dim = 0

    certified, witness, stats = _wedge3_certificate(sys, theta, n_samples, seed)
    residuals.update(stats)
    return MeasureVerdict(
        status=status,
        multipliers=None,
        potential=None,
        density_expr=None,
        density_pattern=None,
        residuals=residuals,
        nullspace_dim=nullspace_dim,
        certified_nonexistence=certified,
        witness=witness,
        seed=seed,
        n_samples=n_samples,
    )


def holonomic_density(sys: nh.NonholonomicSystem, n_samples: int = 64, seed: int = 0) -> ex.Expr:
    """For holonomic systems realized by closed constraint forms, the
    invariant density is det(mass matrix) directly, no quadrature."""
    from .nonhol import frobenius_test

    for eta in sys.constraints:
        de = fm.d(eta)
        if not fm.form_is_zero(de, sys.domain, sys.params, n_samples, seed=seed):
            raise MeasureError(
                "holonomic_density needs closed constraint forms; d(eta) != 0"
            )
    fr = frobenius_test(sys, n_samples, seed)
    if not fr.holonomic:
        raise MeasureError(f"system is not holonomic (witness {fr.witness})")
    return nh.mass_matrix(sys).det
