"""Constrained dynamics and the numerical volume oracle.

Equations of motion come from the Euler-Lagrange system with multipliers,
M(q) qdd + Gamma(q)[v,v] + dV = A(q)^T lambda,  A(q) v = 0,
integrated by fixed-step RK4 with post-step velocity projection.  The
volume oracle reconstructs the phase-space volume density J on a frame
chart of the constraint momentum surface and compares the exact trace of
the reduced field's Jacobian (by central differences) against the symbolic
density-form prediction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import expr as ex
from . import forms as fm
from . import nonhol as nh
from .backends import eval_point, eval_program, rk4_constrained
from .compile import compile_exprs

adapted_frame = nh.adapted_frame


class DynamicsError(Exception):
    pass


@dataclass
class ReducedState:
    q: np.ndarray
    v: np.ndarray


@dataclass
class Trajectory:
    t: np.ndarray
    q: np.ndarray
    v: np.ndarray
    energy: np.ndarray
    constraint_residual: np.ndarray
    status: int = 0

    def to_csv(self, path, chart: Sequence[str]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["t"]
                + [f"q_{c}" for c in chart]
                + [f"v_{c}" for c in chart]
                + ["energy", "constraint_residual"]
            )
            for i in range(len(self.t)):
                w.writerow(
                    [f"{self.t[i]:.12g}"]
                    + [f"{x:.17g}" for x in self.q[i]]
                    + [f"{x:.17g}" for x in self.v[i]]
                    + [f"{self.energy[i]:.17g}", f"{self.constraint_residual[i]:.3e}"]
                )

    @property
    def energy_drift(self) -> float:
        scale = max(1e-30, abs(float(self.energy[0])))
        return float(np.abs(self.energy - self.energy[0]).max() / scale)


def _dyn_program(sys: nh.NonholonomicSystem):
    """Compile metric, metric gradients, potential gradient, constraint rows
    and their gradients into one program; returns (prog, layout)."""

    def build():
        n, m = sys.dim, sys.n_constraints
        exprs: list[ex.Expr] = []

        def push(e):
            exprs.append(e)
            return len(exprs) - 1

        ig = np.empty((n, n), dtype=np.int64)
        for i in range(n):
            for j in range(n):
                ig[i, j] = push(sys.metric[i][j])
        idg = np.empty((n, n, n), dtype=np.int64)
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    idg[i, j, k] = push(ex.diff(sys.metric[i][j], sys.chart[k]))
        idv = np.empty(n, dtype=np.int64)
        for i in range(n):
            idv[i] = push(ex.diff(sys.potential, sys.chart[i]))
        A = nh.constraint_matrix(sys)
        iA = np.empty((m, n), dtype=np.int64)
        for a in range(m):
            for i in range(n):
                iA[a, i] = push(A[a][i])
        idA = np.empty((m, n, n), dtype=np.int64)
        for a in range(m):
            for i in range(n):
                for k in range(n):
                    idA[a, i, k] = push(ex.diff(A[a][i], sys.chart[k]))
        iV = push(sys.potential)
        prog = nh.compile_on_chart(sys, exprs)
        return prog, (ig, idg, idv, iA, idA, iV)

    return sys.cached("dyn_prog", build)


def _frame_program(sys: nh.NonholonomicSystem):
    """Compile frame components and their gradients; returns
    (prog, iE[f, n], idE[f, n, n])."""

    def build():
        frame = adapted_frame(sys)
        n, f = sys.dim, len(frame)
        exprs: list[ex.Expr] = []

        def push(e):
            exprs.append(e)
            return len(exprs) - 1

        iE = np.empty((f, n), dtype=np.int64)
        for a in range(f):
            for i in range(n):
                iE[a, i] = push(frame[a].comps[i])
        idE = np.empty((f, n, n), dtype=np.int64)
        for a in range(f):
            for i in range(n):
                for k in range(n):
                    idE[a, i, k] = push(ex.diff(frame[a].comps[i], sys.chart[k]))
        return nh.compile_on_chart(sys, exprs), iE, idE

    return sys.cached("frame_prog", build)


def frame_at(sys: nh.NonholonomicSystem, q: np.ndarray):
    """Numeric frame matrix E (n x f) and gradient dE[a, i, k] at q."""
    prog, iE, idE = _frame_program(sys)
    w = eval_point(prog, q)
    E = w[iE].T.copy()  # columns are frame fields
    dE = w[idE]
    return E, dE


def project_velocity(sys: nh.NonholonomicSystem, q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Least-norm correction of v onto the constraint kernel at q."""
    A = nh.constraint_values(sys, q)
    return v - A.T @ np.linalg.solve(A @ A.T, A @ v)


def eom(sys: nh.NonholonomicSystem, state: ReducedState):
    """Accelerations and multipliers at a state on the constraint surface."""
    prog, layout = _dyn_program(sys)
    ig, idg, idv, iA, idA, iV = layout
    q = np.asarray(state.q, dtype=float)
    v = np.asarray(state.v, dtype=float)
    w = eval_point(prog, q)
    M = w[ig]
    dG = w[idg]
    # Gamma[i,j,k] = (dg_ij/dq_k + dg_ik/dq_j - dg_jk/dq_i) / 2
    Gam = 0.5 * (dG + dG.transpose(0, 2, 1) - dG.transpose(2, 0, 1))
    force = -np.einsum("ijk,j,k->i", Gam, v, v) - w[idv]
    A = w[iA]
    adotv = np.einsum("aik,k,i->a", w[idA], v, v)
    a0 = np.linalg.solve(M, force)
    MiAT = np.linalg.solve(M, A.T)
    lam = np.linalg.solve(A @ MiAT, -(A @ a0 + adotv))
    return a0 + MiAT @ lam, lam


def energy(sys: nh.NonholonomicSystem, state: ReducedState) -> float:
    prog, layout = _dyn_program(sys)
    ig, _, _, _, _, iV = layout
    w = eval_point(prog, np.asarray(state.q, dtype=float))
    v = np.asarray(state.v, dtype=float)
    return float(0.5 * v @ w[ig] @ v + w[iV])


def integrate(
    sys: nh.NonholonomicSystem,
    z0: ReducedState,
    T: float,
    h: float,
    rec_every: int = 1,
) -> Trajectory:
    """Classical RK4 at fixed step with velocity re-projection each step."""
    if h <= 0:
        raise ValueError("step size must be positive")
    prog, layout = _dyn_program(sys)
    q0 = np.asarray(z0.q, dtype=float)
    v0 = project_velocity(sys, q0, np.asarray(z0.v, dtype=float))
    nsteps = max(1, int(round(T / h)))
    t, Q, V, E, C, status = rk4_constrained(prog, layout, q0, v0, h, nsteps, rec_every)
    return Trajectory(t, Q, V, E, C, status)


def synthesize_state(sys: nh.NonholonomicSystem, seed: int = 0, speed: float = 1.0) -> ReducedState:
    """A deterministic admissible state: domain center, velocity mixed from
    the adapted frame and normalized to unit kinetic-metric norm."""
    q0 = sys.domain.center()
    E, _ = frame_at(sys, q0)
    rng = np.random.default_rng(seed)
    coef = rng.uniform(0.35, 1.0, size=E.shape[1])
    v = E @ coef
    prog, layout = _dyn_program(sys)
    w = eval_point(prog, q0)
    M = w[layout[0]]
    v *= speed / math.sqrt(float(v @ M @ v))
    return ReducedState(q0, project_velocity(sys, q0, v))


@dataclass
class MuDensity:
    """Volume density J on the (q, s) frame chart of the momentum surface.

    Built from the ambient volume by peeling off the constraint momenta:
    epsilon = i_{U_m} ... i_{U_1} omega^n with sigma(U_a) = delta, then
    pulled back along (q, s) -> (q, p = g(sum s_a E_a, .)).  The defining
    wedge identity sigma ^ epsilon = omega^n is re-verified at samples.
    """

    sys: nh.NonholonomicSystem
    J: ex.Expr
    s_names: tuple[str, ...]
    prog: object
    identity_residual: float

    def value(self, q: np.ndarray, s: np.ndarray) -> float:
        return float(eval_point(self.prog, np.concatenate([q, s]))[0])

    def log_abs(self, qs: np.ndarray) -> float:
        val = eval_point(self.prog, qs)[0]
        if val == 0.0 or not np.isfinite(val):
            raise DynamicsError("volume density vanished on the audit path")
        return math.log(abs(val))


def mu_density(sys: nh.NonholonomicSystem, verify_tol: float = 1e-9, seed: int = 0) -> MuDensity:
    def build():
        n, m = sys.dim, sys.n_constraints
        f = n - m
        q_names = sys.chart
        p_names = tuple(f"p_{q}" for q in q_names)
        s_names = tuple(f"s_{a+1}" for a in range(f))
        clash = (set(p_names) | set(s_names)) & set(q_names)
        if clash:
            raise DynamicsError(f"coordinate names collide with fiber names: {sorted(clash)}")
        ext = q_names + p_names

        omega = fm.zero_form(ext, 2)
        for i in range(n):
            omega = fm.add_forms(
                omega, fm.kform(ext, 2, {(i, n + i): ex.ONE})
            )
        omega_n = omega
        for _ in range(n - 1):
            omega_n = fm.wedge(omega_n, omega)

        W = nh.dual_fields(sys)
        mm = nh.mass_matrix(sys)
        A = nh.constraint_matrix(sys)

        # momentum functions and their differentials on the extended chart
        sigma = None
        for al in range(m):
            P = ex.ZERO
            for i in range(n):
                P = ex.add(P, ex.mul(ex.var(p_names[i]), W[al].comps[i]))
            dP = fm.d(fm.scalar_form(ext, P))
            sigma = dP if sigma is None else fm.wedge(sigma, dP)

        eps = omega_n
        for be in range(m):
            comps = [ex.ZERO] * (2 * n)
            for i in range(n):
                acc = ex.ZERO
                for ga in range(m):
                    acc = ex.add(acc, ex.mul(mm.inverse[be][ga], A[ga][i]))
                comps[n + i] = acc
            U = fm.VectorField(ext, tuple(comps))
            eps = fm.contract(U, eps)

        # verify sigma ^ eps == omega^n at samples of the extended domain
        check = fm.sub_forms(fm.wedge(sigma, eps), omega_n)
        ext_dom = sys.domain.extended({p: (-1.0, 1.0) for p in p_names})
        resid_expr = list(check.coeffs.values())
        if resid_expr:
            vals = ex.sample_values(resid_expr, ext_dom, sys.params, 64, seed)
            resid = float(np.abs(vals).max())
        else:
            resid = 0.0
        if resid > verify_tol * math.factorial(n):
            raise DynamicsError(
                f"volume construction identity failed (residual {resid:.3e})"
            )

        # pull back along (q, s) -> (q, p(q, s))
        frame = adapted_frame(sys)
        schart = q_names + s_names
        mapping: dict[str, ex.Expr] = {q: ex.var(q) for q in q_names}
        for i in range(n):
            acc = ex.ZERO
            for a in range(f):
                fa_i = ex.ZERO
                for j in range(n):
                    fa_i = ex.add(fa_i, ex.mul(sys.metric[i][j], frame[a].comps[j]))
                acc = ex.add(acc, ex.mul(ex.var(s_names[a]), fa_i))
            mapping[p_names[i]] = acc
        Jform = fm.pullback(mapping, schart, eps)
        key = tuple(range(n + f))
        J = Jform.coeff(key)
        prog = compile_exprs([J], schart, sys.params)
        return MuDensity(sys, J, s_names, prog, resid)

    return sys.cached("mu_density", build)


def velocity_to_frame(sys: nh.NonholonomicSystem, q: np.ndarray, v: np.ndarray):
    """Coordinates s of v in the adapted frame; residual is the part of v
    outside the frame span (nonzero means v violates the constraints)."""
    E, _ = frame_at(sys, q)
    s, *_ = np.linalg.lstsq(E, v, rcond=None)
    resid = float(np.abs(E @ s - v).max())
    return s, resid


def reduced_field(sys: nh.NonholonomicSystem, qs: np.ndarray) -> np.ndarray:
    """The flow field in (q, s) frame coordinates."""
    n = sys.dim
    q = qs[:n]
    s = qs[n:]
    E, dE = frame_at(sys, q)
    v = E @ s
    acc, _ = eom(sys, ReducedState(q, v))
    # d/dt (E s) = E sdot + (dE . qdot) s with qdot = v
    drift = np.einsum("aik,k,a->i", dE, v, s)
    sdot, *_ = np.linalg.lstsq(E, acc - drift, rcond=None)
    return np.concatenate([v, sdot])


@dataclass
class RateAudit:
    times: np.ndarray
    rates: np.ndarray
    theta_qdot: np.ndarray
    max_abs_rate: float
    field_scale: float
    certified: bool
    tol: float
    c_fit: float | None
    c_std: float | None
    skipped: int
    states_used: int


def _jacobian_trace(F: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float) -> float:
    dim = x.size
    total = 0.0
    for i in range(dim):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        total += (F(xp)[i] - F(xm)[i]) / (2.0 * h)
    return total


def _grad_log(F: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    grad = np.empty(x.size)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (F(xp) - F(xm)) / (2.0 * h)
    return grad


def volume_rate_audit(
    sys: nh.NonholonomicSystem,
    traj: Trajectory,
    density: Callable[[np.ndarray], float] | None = None,
    n_states: int = 10,
    fd_step: float = 1e-5,
    tol: float = 1e-4,
) -> RateAudit:
    """Measure d/dt log(volume) along the flow and fit the density-form law.

    At sampled trajectory states the audit computes the trace of the reduced
    field's Jacobian by central differences plus the advective term
    Z . grad log(rho * J); their sum is the divergence of rho * J * dq ds
    under the flow and vanishes exactly when rho is an invariant density.
    The proportionality constant c in  rate = -c * theta(qdot)  is fitted
    and reported.  Certified volume-preserving iff max |rate| is below
    tol * field_scale.
    """
    n = sys.dim
    mu = mu_density(sys)
    theta_prog = nh.theta_program(sys)
    idx = np.linspace(0, len(traj.t) - 1, min(n_states, len(traj.t))).astype(int)
    rates = []
    thetas = []
    times = []
    scale = 1.0
    skipped = 0
    for i in idx:
        q = traj.q[i]
        v = traj.v[i]
        s, resid = velocity_to_frame(sys, q, v)
        if resid > 1e-8 * max(1.0, float(np.abs(v).max())):
            skipped += 1
            continue
        qs = np.concatenate([q, s])
        try:
            tr1 = _jacobian_trace(lambda x: reduced_field(sys, x), qs, fd_step)
            tr2 = _jacobian_trace(lambda x: reduced_field(sys, x), qs, 2.0 * fd_step)
            trace = tr1
            if abs(tr1 - tr2) > 1e-6 * max(1.0, abs(tr1)):
                trace = (4.0 * tr1 - tr2) / 3.0  # Richardson fallback

            def log_rho_J(x):
                val = mu.log_abs(x)
                if density is not None:
                    val += math.log(density(x[:n]))
                return val

            grad = _grad_log(log_rho_J, qs, 1e-5)
            Z = reduced_field(sys, qs)
        except (ex.EvalDomainError, ex.UndecidableError, DynamicsError):
            skipped += 1
            continue
        rates.append(trace + Z @ grad)
        tv = eval_point(theta_prog, q)
        thetas.append(float(tv @ v))
        times.append(traj.t[i])
        scale = max(scale, float(np.abs(Z).max()))
    if not rates:
        raise DynamicsError("no usable audit states (all skipped)")
    rates_arr = np.array(rates)
    thetas_arr = np.array(thetas)
    max_rate = float(np.abs(rates_arr).max())
    mask = np.abs(thetas_arr) > 1e-6 * max(1.0, float(np.abs(thetas_arr).max()))
    if mask.sum() >= 1 and np.abs(thetas_arr[mask]).max() > 1e-10:
        c_fit = float(-(rates_arr[mask] @ thetas_arr[mask]) / (thetas_arr[mask] @ thetas_arr[mask]))
        per_state = -rates_arr[mask] / thetas_arr[mask]
        c_std = float(per_state.std()) if mask.sum() >= 2 else None
    else:
        c_fit = None
        c_std = None
    return RateAudit(
        times=np.array(times),
        rates=rates_arr,
        theta_qdot=thetas_arr,
        max_abs_rate=max_rate,
        field_scale=scale,
        certified=max_rate < tol * scale,
        tol=tol,
        c_fit=c_fit,
        c_std=c_std,
        skipped=skipped,
        states_used=len(rates),
    )
