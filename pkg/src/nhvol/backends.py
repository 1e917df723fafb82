"""Numeric kernels for compiled expression programs.

Two interchangeable backends evaluate programs and drive the constrained RK4
integrator: a numba-jitted one (default when numba imports) and a pure-numpy
one.  Selection: ``set_backend()`` wins, then the ``NHVOL_BACKEND``
environment variable ("numba" or "numpy"), then autodetection.  The kernels
are generic interpreters, so numba compiles them once per process and caches
the machine code on disk; per-system cost is only the program arrays.

``benchmarks/bench_backends.py`` times the two paths against each other.
"""

from __future__ import annotations

import math
import os

import numpy as np

from .compile import (
    OP_ADD,
    OP_ATAN,
    OP_ATANH,
    OP_CONST,
    OP_COS,
    OP_DIV,
    OP_EXP,
    OP_LN,
    OP_MUL,
    OP_NEG,
    OP_POW,
    OP_SIN,
    OP_SQRT,
    OP_SUB,
    OP_TAN,
    Program,
)

try:  # pragma: no cover - exercised through backend selection
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_forced: str | None = None


def set_backend(name: str | None) -> None:
    """Force "numba" or "numpy"; None restores env/auto selection."""
    global _forced
    if name not in (None, "numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _forced = name


def backend_name() -> str:
    if _forced is not None:
        return _forced
    env = os.environ.get("NHVOL_BACKEND", "").strip().lower()
    if env in ("numpy", "python"):
        return "numpy"
    if env == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("NHVOL_BACKEND=numba but numba is not importable")
        return "numba"
    return "numba" if HAVE_NUMBA else "numpy"


# Pure-numpy program interpreter: python loop over instructions, vectorized
# over sample points.


def _eval_batch_np(prog: Program, X: np.ndarray) -> np.ndarray:
    n_in = prog.n_inputs
    P = X.shape[1]
    regs = np.empty((prog.n_regs, P))
    regs[:n_in] = X
    ops, a1, a2, cv = prog.ops, prog.arg1, prog.arg2, prog.cval
    with np.errstate(all="ignore"):
        for k in range(len(ops)):
            o = ops[k]
            d = n_in + k
            if o == OP_MUL:
                np.multiply(regs[a1[k]], regs[a2[k]], out=regs[d])
            elif o == OP_ADD:
                np.add(regs[a1[k]], regs[a2[k]], out=regs[d])
            elif o == OP_SUB:
                np.subtract(regs[a1[k]], regs[a2[k]], out=regs[d])
            elif o == OP_DIV:
                np.divide(regs[a1[k]], regs[a2[k]], out=regs[d])
            elif o == OP_NEG:
                np.negative(regs[a1[k]], out=regs[d])
            elif o == OP_CONST:
                regs[d] = cv[k]
            elif o == OP_POW:
                np.power(regs[a1[k]], cv[k], out=regs[d])
            elif o == OP_SIN:
                np.sin(regs[a1[k]], out=regs[d])
            elif o == OP_COS:
                np.cos(regs[a1[k]], out=regs[d])
            elif o == OP_TAN:
                np.tan(regs[a1[k]], out=regs[d])
            elif o == OP_EXP:
                np.exp(regs[a1[k]], out=regs[d])
            elif o == OP_LN:
                np.log(regs[a1[k]], out=regs[d])
            elif o == OP_SQRT:
                np.sqrt(regs[a1[k]], out=regs[d])
            elif o == OP_ATAN:
                np.arctan(regs[a1[k]], out=regs[d])
            else:  # OP_ATANH
                np.log((1.0 + regs[a1[k]]) / (1.0 - regs[a1[k]]), out=regs[d])
                regs[d] *= 0.5
    return regs[prog.out].copy()


def _eval_point_py(prog: Program, x: np.ndarray) -> np.ndarray:
    """Scalar interpreter on python floats; the numpy fallback's RK4 core."""
    regs = [0.0] * prog.n_regs
    n_in = prog.n_inputs
    for i in range(n_in):
        regs[i] = float(x[i])
    ops = prog.ops.tolist()
    a1 = prog.arg1.tolist()
    a2 = prog.arg2.tolist()
    cv = prog.cval.tolist()
    for k in range(len(ops)):
        o = ops[k]
        d = n_in + k
        try:
            if o == OP_MUL:
                regs[d] = regs[a1[k]] * regs[a2[k]]
            elif o == OP_ADD:
                regs[d] = regs[a1[k]] + regs[a2[k]]
            elif o == OP_SUB:
                regs[d] = regs[a1[k]] - regs[a2[k]]
            elif o == OP_DIV:
                regs[d] = regs[a1[k]] / regs[a2[k]]
            elif o == OP_NEG:
                regs[d] = -regs[a1[k]]
            elif o == OP_CONST:
                regs[d] = cv[k]
            elif o == OP_POW:
                regs[d] = regs[a1[k]] ** cv[k]
            elif o == OP_SIN:
                regs[d] = math.sin(regs[a1[k]])
            elif o == OP_COS:
                regs[d] = math.cos(regs[a1[k]])
            elif o == OP_TAN:
                regs[d] = math.tan(regs[a1[k]])
            elif o == OP_EXP:
                regs[d] = math.exp(regs[a1[k]])
            elif o == OP_LN:
                regs[d] = math.log(regs[a1[k]])
            elif o == OP_SQRT:
                regs[d] = math.sqrt(regs[a1[k]])
            elif o == OP_ATAN:
                regs[d] = math.atan(regs[a1[k]])
            else:
                regs[d] = math.atanh(regs[a1[k]])
        except (ValueError, ZeroDivisionError, OverflowError):
            regs[d] = math.nan
    return np.array([regs[i] for i in prog.out])


if HAVE_NUMBA:

    @njit(cache=True, error_model="numpy")
    def _run_regs_nb(ops, a1, a2, cv, n_in, regs):
        for k in range(ops.shape[0]):
            o = ops[k]
            d = n_in + k
            if o == OP_MUL:
                regs[d] = regs[a1[k]] * regs[a2[k]]
            elif o == OP_ADD:
                regs[d] = regs[a1[k]] + regs[a2[k]]
            elif o == OP_SUB:
                regs[d] = regs[a1[k]] - regs[a2[k]]
            elif o == OP_DIV:
                regs[d] = regs[a1[k]] / regs[a2[k]]
            elif o == OP_NEG:
                regs[d] = -regs[a1[k]]
            elif o == OP_CONST:
                regs[d] = cv[k]
            elif o == OP_POW:
                regs[d] = regs[a1[k]] ** cv[k]
            elif o == OP_SIN:
                regs[d] = np.sin(regs[a1[k]])
            elif o == OP_COS:
                regs[d] = np.cos(regs[a1[k]])
            elif o == OP_TAN:
                regs[d] = np.tan(regs[a1[k]])
            elif o == OP_EXP:
                regs[d] = np.exp(regs[a1[k]])
            elif o == OP_LN:
                regs[d] = np.log(regs[a1[k]])
            elif o == OP_SQRT:
                regs[d] = np.sqrt(regs[a1[k]])
            elif o == OP_ATAN:
                regs[d] = np.arctan(regs[a1[k]])
            else:
                regs[d] = 0.5 * np.log((1.0 + regs[a1[k]]) / (1.0 - regs[a1[k]]))

    @njit(cache=True, error_model="numpy")
    def _eval_batch_nb(ops, a1, a2, cv, n_in, n_regs, out, X):
        P = X.shape[1]
        regs = np.empty((n_regs, P))
        for i in range(n_in):
            for p in range(P):
                regs[i, p] = X[i, p]
        for k in range(ops.shape[0]):
            o = ops[k]
            d = n_in + k
            i = a1[k]
            j = a2[k]
            if o == OP_MUL:
                for p in range(P):
                    regs[d, p] = regs[i, p] * regs[j, p]
            elif o == OP_ADD:
                for p in range(P):
                    regs[d, p] = regs[i, p] + regs[j, p]
            elif o == OP_SUB:
                for p in range(P):
                    regs[d, p] = regs[i, p] - regs[j, p]
            elif o == OP_DIV:
                for p in range(P):
                    regs[d, p] = regs[i, p] / regs[j, p]
            elif o == OP_NEG:
                for p in range(P):
                    regs[d, p] = -regs[i, p]
            elif o == OP_CONST:
                c = cv[k]
                for p in range(P):
                    regs[d, p] = c
            elif o == OP_POW:
                c = cv[k]
                for p in range(P):
                    regs[d, p] = regs[i, p] ** c
            elif o == OP_SIN:
                for p in range(P):
                    regs[d, p] = np.sin(regs[i, p])
            elif o == OP_COS:
                for p in range(P):
                    regs[d, p] = np.cos(regs[i, p])
            elif o == OP_TAN:
                for p in range(P):
                    regs[d, p] = np.tan(regs[i, p])
            elif o == OP_EXP:
                for p in range(P):
                    regs[d, p] = np.exp(regs[i, p])
            elif o == OP_LN:
                for p in range(P):
                    regs[d, p] = np.log(regs[i, p])
            elif o == OP_SQRT:
                for p in range(P):
                    regs[d, p] = np.sqrt(regs[i, p])
            elif o == OP_ATAN:
                for p in range(P):
                    regs[d, p] = np.arctan(regs[i, p])
            else:
                for p in range(P):
                    regs[d, p] = 0.5 * np.log((1.0 + regs[i, p]) / (1.0 - regs[i, p]))
        res = np.empty((out.shape[0], P))
        for r in range(out.shape[0]):
            src = out[r]
            for p in range(P):
                res[r, p] = regs[src, p]
        return res

    @njit(cache=True, error_model="numpy")
    def _rhs_nb(ops, a1, a2, cv, n_in, regs, out, ig, idg, idv, iA, idA, q, v):
        n = q.shape[0]
        m = iA.shape[0]
        for i in range(n):
            regs[i] = q[i]
        _run_regs_nb(ops, a1, a2, cv, n_in, regs)
        M = np.empty((n, n))
        for i in range(n):
            for j in range(n):
                M[i, j] = regs[out[ig[i, j]]]
        force = np.empty(n)
        for i in range(n):
            s = 0.0
            for j in range(n):
                for k in range(n):
                    s += (
                        0.5
                        * (
                            regs[out[idg[i, j, k]]]
                            + regs[out[idg[i, k, j]]]
                            - regs[out[idg[j, k, i]]]
                        )
                        * v[j]
                        * v[k]
                    )
            force[i] = -s - regs[out[idv[i]]]
        A = np.empty((m, n))
        for al in range(m):
            for i in range(n):
                A[al, i] = regs[out[iA[al, i]]]
        adotv = np.empty(m)
        for al in range(m):
            s = 0.0
            for i in range(n):
                for k in range(n):
                    s += regs[out[idA[al, i, k]]] * v[k] * v[i]
            adotv[al] = s
        a0 = np.linalg.solve(M, force)
        MiAT = np.linalg.solve(M, A.T.copy())
        S = A @ MiAT
        lam = np.linalg.solve(S, -(A @ a0 + adotv))
        return a0 + MiAT @ lam

    @njit(cache=True, error_model="numpy")
    def _project_monitor_nb(ops, a1, a2, cv, n_in, regs, out, ig, iA, iV, q, v):
        n = q.shape[0]
        m = iA.shape[0]
        for i in range(n):
            regs[i] = q[i]
        _run_regs_nb(ops, a1, a2, cv, n_in, regs)
        A = np.empty((m, n))
        for al in range(m):
            for i in range(n):
                A[al, i] = regs[out[iA[al, i]]]
        Av = A @ v
        G = A @ A.T.copy()
        corr = np.linalg.solve(G, Av)
        for i in range(n):
            s = 0.0
            for al in range(m):
                s += A[al, i] * corr[al]
            v[i] -= s
        M = np.empty((n, n))
        for i in range(n):
            for j in range(n):
                M[i, j] = regs[out[ig[i, j]]]
        energy = 0.5 * v @ (M @ v) + regs[out[iV]]
        cres = 0.0
        Av = A @ v
        for al in range(m):
            if abs(Av[al]) > cres:
                cres = abs(Av[al])
        return energy, cres

    @njit(cache=True, error_model="numpy")
    def _rk4_nb(
        ops, a1, a2, cv, n_in, n_regs, out,
        ig, idg, idv, iA, idA, iV,
        q0, v0, h, nsteps, rec_every,
    ):
        n = q0.shape[0]
        regs = np.empty(n_regs)
        nrec = nsteps // rec_every + 1
        T = np.zeros(nrec)
        Q = np.zeros((nrec, n))
        V = np.zeros((nrec, n))
        E = np.zeros(nrec)
        C = np.zeros(nrec)
        q = q0.copy()
        v = v0.copy()
        energy, cres = _project_monitor_nb(
            ops, a1, a2, cv, n_in, regs, out, ig, iA, iV, q, v
        )
        T[0] = 0.0
        Q[0] = q
        V[0] = v
        E[0] = energy
        C[0] = cres
        r = 1
        status = 0
        done = 0
        for step in range(nsteps):
            k1v = _rhs_nb(ops, a1, a2, cv, n_in, regs, out, ig, idg, idv, iA, idA, q, v)
            q2 = q + 0.5 * h * v
            v2 = v + 0.5 * h * k1v
            k2v = _rhs_nb(ops, a1, a2, cv, n_in, regs, out, ig, idg, idv, iA, idA, q2, v2)
            q3 = q + 0.5 * h * v2
            v3 = v + 0.5 * h * k2v
            k3v = _rhs_nb(ops, a1, a2, cv, n_in, regs, out, ig, idg, idv, iA, idA, q3, v3)
            q4 = q + h * v3
            v4 = v + h * k3v
            k4v = _rhs_nb(ops, a1, a2, cv, n_in, regs, out, ig, idg, idv, iA, idA, q4, v4)
            qn = q + (h / 6.0) * (v + 2.0 * v2 + 2.0 * v3 + v4)
            vn = v + (h / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
            ok = True
            for i in range(n):
                if not (np.isfinite(qn[i]) and np.isfinite(vn[i])):
                    ok = False
            if not ok:
                status = 1
                break
            energy, cres = _project_monitor_nb(
                ops, a1, a2, cv, n_in, regs, out, ig, iA, iV, qn, vn
            )
            q = qn
            v = vn
            done = step + 1
            if done % rec_every == 0:
                T[r] = done * h
                Q[r] = q
                V[r] = v
                E[r] = energy
                C[r] = cres
                r += 1
        return T, Q, V, E, C, r, status, done


def _rhs_np(prog, layout, q, v):
    w = _eval_point_py(prog, q)
    ig, idg, idv, iA, idA = layout[:5]
    M = w[ig]
    dG = w[idg]
    # Gamma[i,j,k] = (dg_ij/dq_k + dg_ik/dq_j - dg_jk/dq_i) / 2
    Gam = 0.5 * (dG + dG.transpose(0, 2, 1) - dG.transpose(2, 0, 1))
    force = -np.einsum("ijk,j,k->i", Gam, v, v) - w[idv]
    A = w[iA]
    adotv = np.einsum("aik,k,i->a", w[idA], v, v)
    a0 = np.linalg.solve(M, force)
    MiAT = np.linalg.solve(M, A.T)
    S = A @ MiAT
    lam = np.linalg.solve(S, -(A @ a0 + adotv))
    return a0 + MiAT @ lam


def _project_monitor_np(prog, layout, q, v):
    ig, idg, idv, iA, idA, iV = layout
    w = _eval_point_py(prog, q)
    A = w[iA]
    G = A @ A.T
    v = v - A.T @ np.linalg.solve(G, A @ v)
    M = w[ig]
    energy = 0.5 * v @ M @ v + w[iV]
    cres = float(np.abs(A @ v).max())
    return v, energy, cres


def _rk4_np(prog, layout, q0, v0, h, nsteps, rec_every):
    n = q0.shape[0]
    nrec = nsteps // rec_every + 1
    T = np.zeros(nrec)
    Q = np.zeros((nrec, n))
    V = np.zeros((nrec, n))
    E = np.zeros(nrec)
    C = np.zeros(nrec)
    q = q0.copy()
    v = v0.copy()
    v, energy, cres = _project_monitor_np(prog, layout, q, v)
    Q[0], V[0], E[0], C[0] = q, v, energy, cres
    r = 1
    status = 0
    done = 0
    for step in range(nsteps):
        k1v = _rhs_np(prog, layout, q, v)
        v2 = v + 0.5 * h * k1v
        k2v = _rhs_np(prog, layout, q + 0.5 * h * v, v2)
        v3 = v + 0.5 * h * k2v
        k3v = _rhs_np(prog, layout, q + 0.5 * h * v2, v3)
        v4 = v + h * k3v
        k4v = _rhs_np(prog, layout, q + h * v3, v4)
        qn = q + (h / 6.0) * (v + 2.0 * v2 + 2.0 * v3 + v4)
        vn = v + (h / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
        if not (np.all(np.isfinite(qn)) and np.all(np.isfinite(vn))):
            status = 1
            break
        vn, energy, cres = _project_monitor_np(prog, layout, qn, vn)
        q, v = qn, vn
        done = step + 1
        if done % rec_every == 0:
            T[r] = done * h
            Q[r], V[r], E[r], C[r] = q, v, energy, cres
            r += 1
    return T, Q, V, E, C, r, status, done


# Public dispatchers.

_CHUNK_FLOATS = 4_000_000  # cap on the register file size per batch chunk


def eval_program(prog: Program, X: np.ndarray) -> np.ndarray:
    """Evaluate a program at points X (n_inputs, P) -> (n_out, P)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != prog.n_inputs:
        raise ValueError(
            f"expected points of shape ({prog.n_inputs}, P), got {X.shape}"
        )
    P = X.shape[1]
    chunk = max(16, _CHUNK_FLOATS // max(1, prog.n_regs))
    use_numba = backend_name() == "numba"
    if P <= chunk:
        pieces = [X]
    else:
        pieces = [X[:, i : i + chunk] for i in range(0, P, chunk)]
    outs = []
    for piece in pieces:
        if use_numba:
            outs.append(
                _eval_batch_nb(
                    prog.ops, prog.arg1, prog.arg2, prog.cval,
                    prog.n_inputs, prog.n_regs, prog.out,
                    np.ascontiguousarray(piece),
                )
            )
        else:
            outs.append(_eval_batch_np(prog, piece))
    return outs[0] if len(outs) == 1 else np.concatenate(outs, axis=1)


def eval_point(prog: Program, x: np.ndarray) -> np.ndarray:
    """Evaluate a program at a single point -> (n_out,)."""
    x = np.asarray(x, dtype=np.float64)
    if backend_name() == "numba":
        return eval_program(prog, x[:, None])[:, 0]
    return _eval_point_py(prog, x)


def rk4_constrained(prog: Program, layout, q0, v0, h: float, nsteps: int, rec_every: int = 1):
    """Fixed-step RK4 for M(q)qdd + C(q,v)v + dV = A^T lam with A v = 0.

    ``layout`` is the (ig, idg, idv, iA, idA, iV) tuple of index arrays into
    the program outputs.  Velocities are re-projected onto ker A after every
    step (least-norm correction).  Returns (t, q, v, energy, cres, status)
    with per-record monitors; status 1 means a nonfinite state aborted the
    run at the last recorded time.
    """
    q0 = np.ascontiguousarray(q0, dtype=np.float64)
    v0 = np.ascontiguousarray(v0, dtype=np.float64)
    ig, idg, idv, iA, idA, iV = layout
    if backend_name() == "numba":
        T, Q, V, E, C, r, status, _done = _rk4_nb(
            prog.ops, prog.arg1, prog.arg2, prog.cval,
            prog.n_inputs, prog.n_regs, prog.out,
            ig, idg, idv, iA, idA, int(iV),
            q0, v0, float(h), int(nsteps), int(rec_every),
        )
    else:
        T, Q, V, E, C, r, status, _done = _rk4_np(
            prog, (ig, idg, idv, iA, idA, int(iV)),
            q0, v0, float(h), int(nsteps), int(rec_every),
        )
    return T[:r], Q[:r], V[:r], E[:r], C[:r], int(status)
