"""Left-invariant constrained systems on a Lie algebra dual.

Data: structure constants c[k, i, j] (the e_k coefficient of [e_i, e_j]), a
positive-definite inertia tensor defining the natural Hamiltonian
h = p . Iinv p / 2, and constraint covectors eta^a.  Volume preservation of
the constrained Lie-Poisson flow is decided by whether the covector
theta = tr(ad) + minv_ab ad*_{W^a} eta^b lies in the span of the
constraints.  Conventions: <ad*_x p, y> = <p, [x, y]>; the flow is
pdot = ad*_{dh} p + multipliers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LieAlgebraError(Exception):
    pass


class KillingDegenerateError(LieAlgebraError):
    """Raised when the Kozlov eigenvector test needs a nondegenerate Killing
    form; use membership() instead."""


MEMBERSHIP_TOL = 1e-10
JACOBI_TOL = 1e-12


@dataclass
class LieAlgebraSystem:
    name: str
    dim: int
    structure: np.ndarray  # c[k, i, j]
    inertia: np.ndarray
    constraints: np.ndarray  # rows eta^a

    def __post_init__(self):
        self.structure = np.asarray(self.structure, dtype=float)
        self.inertia = np.asarray(self.inertia, dtype=float)
        self.constraints = np.asarray(self.constraints, dtype=float).reshape(-1, self.dim)


@dataclass
class EPSReport:
    trace_ad: np.ndarray
    theta: np.ndarray
    volume_preserved: bool
    membership_residual: float
    unimodular: bool
    bi_invariant: bool
    kozlov: dict | None


def validate(alg: LieAlgebraSystem) -> None:
    """Check antisymmetry and the Jacobi identity over all index triples;
    reports the first violating triple (1-based)."""
    c = alg.structure
    n = alg.dim
    if c.shape != (n, n, n):
        raise LieAlgebraError(f"structure constants must be {n}^3")
    scale = max(1.0, float(np.abs(c).max()))
    for i in range(n):
        for j in range(n):
            for k in range(n):
                if abs(c[k, i, j] + c[k, j, i]) > 1e-12 * scale:
                    raise LieAlgebraError(
                        f"antisymmetry violated at (i, j, k) = ({i+1}, {j+1}, {k+1})"
                    )
    # sum_m c[m, i, j] c[l, m, k] + cyclic(i, j, k) = 0
    for i in range(n):
        for j in range(n):
            for k in range(n):
                for l in range(n):
                    total = 0.0
                    for mm in range(n):
                        total += (
                            c[mm, i, j] * c[l, mm, k]
                            + c[mm, j, k] * c[l, mm, i]
                            + c[mm, k, i] * c[l, mm, j]
                        )
                    if abs(total) > JACOBI_TOL * scale**2:
                        raise LieAlgebraError(
                            f"Jacobi identity violated at (i, j, k, l) ="
                            f" ({i+1}, {j+1}, {k+1}, {l+1})"
                        )
    eig = np.linalg.eigvalsh(0.5 * (alg.inertia + alg.inertia.T))
    if eig.min() <= 0:
        raise LieAlgebraError("inertia tensor must be positive-definite")
    if alg.constraints.shape[0]:
        sv = np.linalg.svd(alg.constraints, compute_uv=False)
        if sv[-1] <= 1e-12 * max(1.0, sv[0]):
            raise LieAlgebraError("constraint covectors are linearly dependent")


def trace_ad(alg: LieAlgebraSystem) -> np.ndarray:
    """(tr ad)_j = sum_k c[k, j, k]; zero iff the algebra is unimodular."""
    return np.einsum("kjk->j", alg.structure)


def is_unimodular(alg: LieAlgebraSystem, tol: float = 1e-12) -> bool:
    t = trace_ad(alg)
    return bool(np.abs(t).max() <= tol * max(1.0, float(np.abs(alg.structure).max())))


def ad_star(alg: LieAlgebraSystem, xi: np.ndarray, p: np.ndarray) -> np.ndarray:
    """<ad*_xi p, e_j> = <p, [xi, e_j]> = p_k c[k, i, j] xi_i."""
    return np.einsum("k,kij,i->j", p, alg.structure, xi)


def dual_vectors(alg: LieAlgebraSystem) -> np.ndarray:
    """W^a = Iinv eta^a as rows."""
    return np.linalg.solve(alg.inertia, alg.constraints.T).T


def mass_matrix(alg: LieAlgebraSystem) -> np.ndarray:
    W = dual_vectors(alg)
    return alg.constraints @ W.T


def eps_theta(alg: LieAlgebraSystem) -> np.ndarray:
    """theta = tr ad + minv_ab ad*_{W^a} eta^b; volume is preserved exactly
    when this covector annihilates the constraint distribution."""
    theta = trace_ad(alg).astype(float)
    m = alg.constraints.shape[0]
    if m:
        W = dual_vectors(alg)
        minv = np.linalg.inv(mass_matrix(alg))
        for a in range(m):
            for b in range(m):
                theta = theta + minv[a, b] * ad_star(alg, W[a], alg.constraints[b])
    return theta


def membership(theta: np.ndarray, etas: np.ndarray, tol: float = MEMBERSHIP_TOL):
    """Least-squares distance from theta to span{eta^a} after normalizing;
    returns (in_span, residual)."""
    theta = np.asarray(theta, dtype=float)
    scale = float(np.linalg.norm(theta))
    if scale == 0.0:
        return True, 0.0
    t = theta / scale
    etas = np.asarray(etas, dtype=float).reshape(-1, theta.size)
    if etas.size == 0:
        resid = float(np.linalg.norm(t))
    else:
        rows = etas / np.linalg.norm(etas, axis=1, keepdims=True)
        coef, *_ = np.linalg.lstsq(rows.T, t, rcond=None)
        resid = float(np.linalg.norm(rows.T @ coef - t))
    return resid < tol, resid


def killing_form(alg: LieAlgebraSystem) -> np.ndarray:
    """kappa_ij = c[m, i, k] c[k, j, m]."""
    c = alg.structure
    return np.einsum("mik,kjm->ij", c, c)


def kozlov_test(alg: LieAlgebraSystem, tol: float = MEMBERSHIP_TOL) -> dict:
    """Eigenvector criterion for volume preservation on compact-type
    algebras: minv_ab [Iinv eta^a, kappa# eta^b] must lie in
    span{kappa# eta^a}; for one constraint the eigenvalue is reported."""
    kappa = killing_form(alg)
    if abs(np.linalg.det(kappa)) < 1e-10 * max(1.0, np.linalg.norm(kappa) ** alg.dim):
        raise KillingDegenerateError(
            "Killing form is degenerate; the eigenvector test does not apply"
            " (use membership on eps_theta instead)"
        )
    etas = alg.constraints
    m = etas.shape[0]
    if m == 0:
        raise LieAlgebraError("kozlov_test needs at least one constraint")
    W = dual_vectors(alg)
    ksharp = np.linalg.solve(kappa, etas.T).T
    minv = np.linalg.inv(mass_matrix(alg))
    vec = np.zeros(alg.dim)
    for a in range(m):
        for b in range(m):
            vec += minv[a, b] * np.einsum("kij,i,j->k", alg.structure, W[a], ksharp[b])
    scale = max(float(np.linalg.norm(vec)), 1.0)
    coef, *_ = np.linalg.lstsq(ksharp.T, vec, rcond=None)
    resid = float(np.linalg.norm(ksharp.T @ coef - vec)) / scale
    result = {"holds": resid < tol, "residual": resid}
    if m == 1:
        result["eigenvalue"] = float(coef[0])
    return result


def is_bi_invariant(alg: LieAlgebraSystem, tol: float = 1e-12) -> bool:
    """Associativity I([x,y])(z) = I(x)([y,z]), i.e. cyclic invariance of
    A_xyz = c[a, x, y] I[a, z]."""
    A = np.einsum("axy,az->xyz", alg.structure, alg.inertia)
    scale = max(1.0, float(np.abs(A).max()))
    return bool(np.abs(A - np.transpose(A, (1, 2, 0))).max() <= tol * scale)


def eps_field(alg: LieAlgebraSystem, p: np.ndarray, project: bool = False) -> np.ndarray:
    """Right-hand side of the constrained Lie-Poisson equations at p.

    Multipliers are eliminated exactly so that every constraint momentum
    P(W^a) = <p, W^a> is conserved; p must satisfy eta^a(Iinv p) = 0 to
    1e-10 unless projection is requested.
    """
    p = np.asarray(p, dtype=float)
    v = np.linalg.solve(alg.inertia, p)
    m = alg.constraints.shape[0]
    if m:
        resid = float(np.abs(alg.constraints @ v).max())
        if resid > 1e-10 * max(1.0, float(np.abs(v).max())):
            if not project:
                raise LieAlgebraError(
                    f"momentum violates constraints (residual {resid:.3e});"
                    " pass project=True to project"
                )
            W = dual_vectors(alg)
            lam = np.linalg.solve(mass_matrix(alg), -alg.constraints @ v)
            p = p + alg.constraints.T @ lam
            v = np.linalg.solve(alg.inertia, p)
    pdot = ad_star(alg, v, p)
    if m:
        W = dual_vectors(alg)
        rhs = np.array([-(pdot @ W[a]) for a in range(m)])
        lam = np.linalg.solve(mass_matrix(alg), rhs)
        pdot = pdot + alg.constraints.T @ lam
    return pdot


def project_momentum(alg: LieAlgebraSystem, p: np.ndarray) -> np.ndarray:
    if alg.constraints.shape[0] == 0:
        return np.asarray(p, dtype=float)
    v = np.linalg.solve(alg.inertia, p)
    lam = np.linalg.solve(mass_matrix(alg), -alg.constraints @ v)
    return p + alg.constraints.T @ lam


def integrate_eps(alg: LieAlgebraSystem, p0: np.ndarray, T: float, h: float):
    """Fixed-step RK4 on the algebra dual; returns (t, P) ."""
    p = project_momentum(alg, np.asarray(p0, dtype=float))
    steps = max(1, int(round(T / h)))
    P = np.empty((steps + 1, alg.dim))
    P[0] = p
    for k in range(steps):
        k1 = eps_field(alg, p, project=True)
        k2 = eps_field(alg, p + 0.5 * h * k1, project=True)
        k3 = eps_field(alg, p + 0.5 * h * k2, project=True)
        k4 = eps_field(alg, p + h * k3, project=True)
        p = p + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        P[k + 1] = p
    return np.linspace(0.0, steps * h, steps + 1), P


def fd_divergence(alg: LieAlgebraSystem, p: np.ndarray, step: float = 1e-6) -> float:
    """Central-difference trace of the field Jacobian on the algebra dual."""
    p = np.asarray(p, dtype=float)
    total = 0.0
    for i in range(alg.dim):
        pp, pm = p.copy(), p.copy()
        pp[i] += step
        pm[i] -= step
        total += (
            eps_field(alg, pp, project=True)[i] - eps_field(alg, pm, project=True)[i]
        ) / (2 * step)
    return total


def eps_report(alg: LieAlgebraSystem) -> EPSReport:
    validate(alg)
    tr = trace_ad(alg)
    theta = eps_theta(alg)
    ok, resid = membership(theta, alg.constraints)
    try:
        koz = kozlov_test(alg) if alg.constraints.shape[0] else None
    except KillingDegenerateError as err:
        koz = {"applicable": False, "reason": str(err)}
    else:
        if koz is not None:
            koz = {"applicable": True, **koz}
    return EPSReport(
        trace_ad=tr,
        theta=theta,
        volume_preserved=ok,
        membership_residual=resid,
        unimodular=is_unimodular(alg),
        bi_invariant=is_bi_invariant(alg),
        kozlov=koz,
    )
