"""Exterior calculus on a single named chart.

K-forms store coefficients only on strictly increasing index tuples, which
pins every sign convention to the coordinate order dq^{i1} ^ ... ^ dq^{ik}
with i1 < ... < ik.  Coefficients are symbolic expressions; all identities
between forms are decided by sampling, never by string comparison.
"""

from __future__ import annotations

from bisect import insort
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import expr as ex


class FormError(Exception):
    pass


class DegreeError(FormError):
    pass


class ChartMismatchError(FormError):
    pass


@dataclass
class KForm:
    chart: tuple[str, ...]
    degree: int
    coeffs: dict[tuple[int, ...], ex.Expr]

    def __post_init__(self):
        dim = len(self.chart)
        if not (0 <= self.degree <= dim):
            raise DegreeError(f"degree {self.degree} out of range for dim {dim}")
        for idx in self.coeffs:
            if len(idx) != self.degree or list(idx) != sorted(set(idx)):
                raise FormError(f"non-canonical index tuple {idx}")
            if idx and (idx[0] < 0 or idx[-1] >= dim):
                raise FormError(f"index tuple {idx} out of range")

    def coeff(self, idx: tuple[int, ...]) -> ex.Expr:
        return self.coeffs.get(tuple(idx), ex.ZERO)

    def is_structural_zero(self) -> bool:
        return not self.coeffs

    def scalar(self) -> ex.Expr:
        if self.degree != 0:
            raise DegreeError("scalar() needs a degree-0 form")
        return self.coeffs.get((), ex.ZERO)


@dataclass
class VectorField:
    chart: tuple[str, ...]
    comps: tuple[ex.Expr, ...]

    def __post_init__(self):
        if len(self.comps) != len(self.chart):
            raise FormError("component count must equal chart dimension")


def _clean(coeffs: dict) -> dict:
    return {idx: c for idx, c in coeffs.items() if not ex.is_const(c, 0.0)}


def kform(chart: Sequence[str], degree: int, coeffs: Mapping[tuple[int, ...], ex.Expr]) -> KForm:
    return KForm(tuple(chart), degree, _clean(dict(coeffs)))


def zero_form(chart: Sequence[str], degree: int) -> KForm:
    return KForm(tuple(chart), degree, {})


def scalar_form(chart: Sequence[str], e: ex.Expr) -> KForm:
    return kform(chart, 0, {(): e})


def one_form(chart: Sequence[str], comps: Sequence[ex.Expr]) -> KForm:
    chart = tuple(chart)
    if len(comps) != len(chart):
        raise FormError("one_form needs one component per coordinate")
    return kform(chart, 1, {(i,): c for i, c in enumerate(comps)})


def components(a: KForm) -> tuple[ex.Expr, ...]:
    if a.degree != 1:
        raise DegreeError("components() needs a degree-1 form")
    return tuple(a.coeff((i,)) for i in range(len(a.chart)))


def vf(chart: Sequence[str], comps: Sequence[ex.Expr]) -> VectorField:
    return VectorField(tuple(chart), tuple(comps))


def _same_chart(a, b):
    if a.chart != b.chart:
        raise ChartMismatchError(f"charts differ: {a.chart} vs {b.chart}")


def add_forms(a: KForm, b: KForm) -> KForm:
    _same_chart(a, b)
    if a.degree != b.degree:
        raise DegreeError("cannot add forms of different degree")
    coeffs = dict(a.coeffs)
    for idx, c in b.coeffs.items():
        coeffs[idx] = ex.add(coeffs.get(idx, ex.ZERO), c)
    return kform(a.chart, a.degree, coeffs)


def sub_forms(a: KForm, b: KForm) -> KForm:
    return add_forms(a, scale_form(ex.const(-1.0), b))


def scale_form(s, a: KForm) -> KForm:
    s = s if isinstance(s, ex.Expr) else ex.const(s)
    return kform(a.chart, a.degree, {idx: ex.mul(s, c) for idx, c in a.coeffs.items()})


def _merge_sign(I: tuple[int, ...], J: tuple[int, ...]):
    """Sort the concatenation of two increasing tuples; None if duplicated."""
    merged: list[int] = []
    sign = 1
    i = j = 0
    while i < len(I) and j < len(J):
        if I[i] == J[j]:
            return None, 0
        if I[i] < J[j]:
            merged.append(I[i])
            i += 1
        else:
            # J[j] jumps over the remaining len(I) - i entries of I
            if (len(I) - i) % 2:
                sign = -sign
            merged.append(J[j])
            j += 1
    merged.extend(I[i:])
    merged.extend(J[j:])
    return tuple(merged), sign


def wedge(a: KForm, b: KForm) -> KForm:
    _same_chart(a, b)
    k = a.degree + b.degree
    if k > len(a.chart):
        raise DegreeError(
            f"wedge degree {a.degree}+{b.degree} exceeds chart dimension {len(a.chart)}"
        )
    coeffs: dict[tuple[int, ...], ex.Expr] = {}
    for I, ca in a.coeffs.items():
        for J, cb in b.coeffs.items():
            idx, sign = _merge_sign(I, J)
            if idx is None:
                continue
            term = ex.mul(ca, cb)
            if sign < 0:
                term = ex.neg(term)
            coeffs[idx] = ex.add(coeffs.get(idx, ex.ZERO), term)
    return kform(a.chart, k, coeffs)


def d(a: KForm) -> KForm:
    if a.degree >= len(a.chart):
        raise DegreeError("exterior derivative of a top-degree form")
    coeffs: dict[tuple[int, ...], ex.Expr] = {}
    for I, c in a.coeffs.items():
        for i, name in enumerate(a.chart):
            if i in I:
                continue
            dc = ex.diff(c, name)
            if ex.is_const(dc, 0.0):
                continue
            pos = sum(1 for t in I if t < i)
            idx = list(I)
            insort(idx, i)
            term = dc if pos % 2 == 0 else ex.neg(dc)
            key = tuple(idx)
            coeffs[key] = ex.add(coeffs.get(key, ex.ZERO), term)
    return kform(a.chart, a.degree + 1, coeffs)


def contract(X: VectorField, a: KForm) -> KForm:
    if X.chart != a.chart:
        raise ChartMismatchError(f"charts differ: {X.chart} vs {a.chart}")
    if a.degree < 1:
        raise DegreeError("interior product needs a form of degree >= 1")
    coeffs: dict[tuple[int, ...], ex.Expr] = {}
    for I, c in a.coeffs.items():
        for t, i in enumerate(I):
            comp = X.comps[i]
            if ex.is_const(comp, 0.0):
                continue
            term = ex.mul(comp, c)
            if t % 2:
                term = ex.neg(term)
            key = I[:t] + I[t + 1 :]
            coeffs[key] = ex.add(coeffs.get(key, ex.ZERO), term)
    return kform(a.chart, a.degree - 1, coeffs)


def lie_derivative(X: VectorField, a: KForm) -> KForm:
    """Cartan's formula L_X a = d(i_X a) + i_X(d a), degenerating properly
    at degree 0 and top degree."""
    if X.chart != a.chart:
        raise ChartMismatchError(f"charts differ: {X.chart} vs {a.chart}")
    if a.degree == 0:
        return contract(X, d(a))
    if a.degree == len(a.chart):
        return d(contract(X, a))
    return add_forms(d(contract(X, a)), contract(X, d(a)))


def bracket(X: VectorField, Y: VectorField) -> VectorField:
    if X.chart != Y.chart:
        raise ChartMismatchError(f"charts differ: {X.chart} vs {Y.chart}")
    comps = []
    for i in range(len(X.chart)):
        acc = ex.ZERO
        for j, name in enumerate(X.chart):
            acc = ex.add(acc, ex.mul(X.comps[j], ex.diff(Y.comps[i], name)))
            acc = ex.sub(acc, ex.mul(Y.comps[j], ex.diff(X.comps[i], name)))
        comps.append(acc)
    return VectorField(X.chart, tuple(comps))


def pullback(mapping: Mapping[str, ex.Expr], source_chart: Sequence[str], a: KForm) -> KForm:
    """Pull a form back along q -> phi(z); mapping gives phi per target name."""
    source_chart = tuple(source_chart)
    if set(mapping) != set(a.chart):
        raise ChartMismatchError(
            "mapping must provide exactly the target chart coordinates"
        )
    if a.degree > len(source_chart):
        raise DegreeError(
            f"cannot pull a degree-{a.degree} form onto a {len(source_chart)}-dim chart"
        )
    sub = {name: mapping[name] for name in a.chart}
    if a.degree == 0:
        return scalar_form(source_chart, ex.subs(a.scalar(), sub))
    dphi = [
        one_form(source_chart, [ex.diff(mapping[name], z) for z in source_chart])
        for name in a.chart
    ]
    acc = zero_form(source_chart, a.degree)
    for I, c in a.coeffs.items():
        term = scalar_form(source_chart, ex.subs(c, sub))
        for i in I:
            term = wedge(term, dphi[i])
        acc = add_forms(acc, term)
    return acc


def form_is_zero(
    a: KForm,
    dom: ex.Domain,
    params: Mapping[str, float] | None = None,
    n_samples: int = 64,
    tol: float = 1e-9,
    seed: int = 0,
    scale_terms: Sequence[ex.Expr] = (),
) -> bool:
    """Sampled zero test of every coefficient, optionally magnitude-scaled."""
    if a.is_structural_zero():
        return True
    exprs = list(a.coeffs.values())
    vals = ex.sample_values(list(exprs) + list(scale_terms), dom, params, n_samples, seed)
    main = vals[: len(exprs)]
    threshold = tol * (1.0 + np.abs(vals[len(exprs) :]).sum(axis=0)) if len(scale_terms) else tol
    return bool(np.all(np.abs(main) <= threshold))


def forms_close(
    a: KForm,
    b: KForm,
    dom: ex.Domain,
    params: Mapping[str, float] | None = None,
    n_samples: int = 64,
    tol: float = 1e-9,
    seed: int = 0,
) -> bool:
    """Sampled |a - b| <= tol * (1 + |a| + |b|) coefficient by coefficient."""
    _same_chart(a, b)
    if a.degree != b.degree:
        return False
    keys = sorted(set(a.coeffs) | set(b.coeffs))
    if not keys:
        return True
    exprs = []
    for key in keys:
        exprs.extend((ex.sub(a.coeff(key), b.coeff(key)), a.coeff(key), b.coeff(key)))
    vals = ex.sample_values(exprs, dom, params, n_samples, seed)
    for r in range(len(keys)):
        dv, av, bv = vals[3 * r], vals[3 * r + 1], vals[3 * r + 2]
        if np.any(np.abs(dv) > tol * (1.0 + np.abs(av) + np.abs(bv))):
            return False
    return True


def apply_one_form(a: KForm, X: VectorField) -> ex.Expr:
    if a.degree != 1:
        raise DegreeError("apply_one_form needs a degree-1 form")
    return contract(X, a).scalar()
