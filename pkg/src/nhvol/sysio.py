"""Loading of system description files.

Two JSON document kinds: a chart-based mechanical system (coordinates,
metric, potential, constraint covectors, domain box, guards) and a
Lie-algebra system (structure constants, inertia tensor, constraint rows).
Schemas ship in docs/.  Only velocity-linear homogeneous constraints are
expressible: constraint rows are covector components over the coordinates,
so affine, time-dependent or nonlinear constraints are rejected up front.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from . import expr as ex
from . import forms as fm
from .nonhol import NonholonomicSystem, validate_system

_SYSTEMS_DIR = Path(__file__).parent / "systems"


class FileFormatError(Exception):
    pass


def bundled_names() -> list[str]:
    return sorted(p.stem for p in _SYSTEMS_DIR.glob("*.json"))


def bundled_path(name: str) -> Path:
    p = _SYSTEMS_DIR / f"{name}.json"
    if not p.exists():
        raise FileNotFoundError(f"no bundled system {name!r}; have {bundled_names()}")
    return p


def _req(doc: Mapping, key: str, kind, where: str):
    if key not in doc:
        raise FileFormatError(f"{where}: missing required key {key!r}")
    val = doc[key]
    if not isinstance(val, kind):
        raise FileFormatError(f"{where}: key {key!r} must be {kind.__name__}")
    return val


def _parse(text, chart, params, where):
    if not isinstance(text, str):
        raise FileFormatError(f"{where}: expected an expression string, got {text!r}")
    try:
        return ex.parse(text, chart, params)
    except ex.ParseError as err:
        hint = ""
        if isinstance(err, ex.UndeclaredIdentifierError):
            hint = (
                " (only velocity-linear homogeneous constraints are supported:"
                " every symbol must be a declared coordinate or parameter)"
            )
        raise FileFormatError(f"{where}: {err}{hint}") from err


def load_system(path: str | Path, validate: bool = True) -> NonholonomicSystem:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise FileFormatError(f"{path}: not valid JSON: {err}") from err
    where = str(path)
    name = doc.get("name", path.stem)
    chart = tuple(_req(doc, "coordinates", list, where))
    if len(set(chart)) != len(chart):
        raise FileFormatError(f"{where}: duplicate coordinate names")
    params = {str(k): float(v) for k, v in doc.get("parameters", {}).items()}
    pnames = tuple(params)

    rows = _req(doc, "metric", list, where)
    n = len(chart)
    if len(rows) != n or any(not isinstance(r, list) or len(r) != n for r in rows):
        raise FileFormatError(f"{where}: metric must be a {n}x{n} matrix of expressions")
    metric = tuple(
        tuple(_parse(rows[i][j], chart, pnames, f"{where}: metric[{i}][{j}]") for j in range(n))
        for i in range(n)
    )

    potential = _parse(doc.get("potential", "0"), chart, pnames, f"{where}: potential")

    crows = _req(doc, "constraints", list, where)
    if not crows:
        raise FileFormatError(f"{where}: need at least one constraint row")
    constraints = []
    for a, row in enumerate(crows):
        if not isinstance(row, list) or len(row) != n:
            raise FileFormatError(
                f"{where}: constraints[{a}] must list {n} covector components"
            )
        comps = [
            _parse(c, chart, pnames, f"{where}: constraints[{a}][{i}]")
            for i, c in enumerate(row)
        ]
        constraints.append(fm.one_form(chart, comps))

    dom_doc = _req(doc, "domain", dict, where)
    intervals = {}
    for q in chart:
        if q not in dom_doc:
            raise FileFormatError(f"{where}: domain missing coordinate {q!r}")
        iv = dom_doc[q]
        if not isinstance(iv, list) or len(iv) != 2:
            raise FileFormatError(f"{where}: domain[{q!r}] must be [lo, hi]")
        intervals[q] = (float(iv[0]), float(iv[1]))
    extra = set(dom_doc) - set(chart)
    if extra:
        raise FileFormatError(f"{where}: domain names unknown coordinates {sorted(extra)}")
    guards = [
        _parse(g, chart, pnames, f"{where}: guards[{i}]")
        for i, g in enumerate(doc.get("guards", []))
    ]

    angles = tuple(doc.get("angles", []))
    unknown_angles = set(angles) - set(chart)
    if unknown_angles:
        raise FileFormatError(f"{where}: angles name unknown coordinates {sorted(unknown_angles)}")

    sys = NonholonomicSystem(
        name=str(name),
        chart=chart,
        metric=metric,
        potential=potential,
        constraints=constraints,
        domain=ex.Domain(intervals, guards),
        params=params,
        angles=angles,
    )
    if validate:
        validate_system(sys)
    return sys


def load_eps(path: str | Path):
    """Load a Lie-algebra system file; returns a liealg.LieAlgebraSystem."""
    from .liealg import LieAlgebraSystem

    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise FileFormatError(f"{path}: not valid JSON: {err}") from err
    where = str(path)
    dim = _req(doc, "dimension", int, where)
    if dim < 1:
        raise FileFormatError(f"{where}: dimension must be positive")
    c = np.zeros((dim, dim, dim))  # c[k, i, j] is the e_k coefficient of [e_i, e_j]
    seen = {}
    for t, triple in enumerate(_req(doc, "structure_constants", list, where)):
        if not isinstance(triple, list) or len(triple) != 4:
            raise FileFormatError(
                f"{where}: structure_constants[{t}] must be [i, j, k, value] (1-based)"
            )
        i, j, k = (int(x) for x in triple[:3])
        val = float(triple[3])
        for label, idx in (("i", i), ("j", j), ("k", k)):
            if not (1 <= idx <= dim):
                raise FileFormatError(
                    f"{where}: structure_constants[{t}]: index {label}={idx} out of range 1..{dim}"
                )
        i, j, k = i - 1, j - 1, k - 1
        if i == j:
            raise FileFormatError(f"{where}: structure_constants[{t}]: [e_i, e_i] must vanish")
        prev = seen.get((k, i, j))
        if prev is not None and prev != val:
            raise FileFormatError(
                f"{where}: structure_constants[{t}] conflicts with an earlier triple"
            )
        seen[(k, i, j)] = val
        seen[(k, j, i)] = -val
        c[k, i, j] = val
        c[k, j, i] = -val

    inertia = np.array(_req(doc, "inertia", list, where), dtype=float)
    if inertia.shape != (dim, dim):
        raise FileFormatError(f"{where}: inertia must be {dim}x{dim}")
    if np.abs(inertia - inertia.T).max() > 1e-12 * max(1.0, np.abs(inertia).max()):
        raise FileFormatError(f"{where}: inertia must be symmetric")

    rows = np.array(doc.get("constraints", []), dtype=float)
    if rows.size and rows.shape[1] != dim:
        raise FileFormatError(f"{where}: constraint rows must have length {dim}")
    if rows.size == 0:
        rows = rows.reshape(0, dim)

    return LieAlgebraSystem(
        name=str(doc.get("name", path.stem)),
        dim=dim,
        structure=c,
        inertia=inertia,
        constraints=rows,
    )
