"""JSON documents for target models, Q structures and the hybrid chain.

Model document::

    {"variables": [{"name": "a", "cardinality": 2}, ...],
     "factors": [{"scope": [0, 1], "logvalues": [...]}, ...],
     "log_z": 0.0,                 # optional
     "evidence": {"3": 1}}         # optional, keyed by id or name

``logvalues`` are flattened with the last scope variable fastest; scopes must
be ascending.  Q structure document::

    {"clusters": [[0, 1], [1, 2]], "copied_factors": [4], "ordering": [1, 0]}

Junction tree document: ``{"nodes": [[0, 1], [1, 2]], "edges": [[0, 1]]}``.
Hybrid document: ``{"p_t": [...], "gaussians": [{"mean": m, "var": v}, ...],
"sigmoid": {"w": w, "b": b}, "observed_r": r}``.
"""

from __future__ import annotations

import json
import math

from .hybrid import HybridChainModel
from .model import LogTable, TargetModel, Variable, absorb_evidence


class ModelFormatError(ValueError):
    """Parse or validation failure; ``code`` names the failure class."""

    SYNTAX = "E_SYNTAX"
    MISSING = "E_MISSING_FIELD"
    TYPE = "E_TYPE"
    RANGE = "E_RANGE"
    LENGTH = "E_LENGTH"
    SCOPE = "E_SCOPE"
    NONFINITE = "E_NONFINITE"
    EVIDENCE = "E_EVIDENCE"
    INVARIANT = "E_INVARIANT"

    def __init__(self, code: str, where: str, message: str):
        self.code = code
        self.where = where
        super().__init__(f"{code} at {where}: {message}")


def _load(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(ModelFormatError.SYNTAX, f"line {exc.lineno} column {exc.colno}",
                               exc.msg) from None


def _field(doc, key, where, kind=None, required=True):
    if not isinstance(doc, dict):
        raise ModelFormatError(ModelFormatError.TYPE, where, "expected an object")
    if key not in doc:
        if required:
            raise ModelFormatError(ModelFormatError.MISSING, f"{where}.{key}".lstrip("."),
                                   "required field is missing")
        return None
    value = doc[key]
    if kind is not None and not _is_kind(value, kind):
        raise ModelFormatError(ModelFormatError.TYPE, f"{where}.{key}".lstrip("."),
                               f"expected {kind}, got {type(value).__name__}")
    return value


def _is_kind(value, kind):
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == "list":
        return isinstance(value, list)
    if kind == "object":
        return isinstance(value, dict)
    if kind == "str":
        return isinstance(value, str)
    raise AssertionError(kind)


def _number(value, where):
    if not _is_kind(value, "number"):
        raise ModelFormatError(ModelFormatError.TYPE, where, "expected a number")
    value = float(value)
    if not math.isfinite(value):
        raise ModelFormatError(ModelFormatError.NONFINITE, where, "value is not finite")
    return value


def parse_model_document(text: str):
    """Parse a model document into ``(TargetModel, evidence)`` without conditioning."""
    doc = _load(text)
    raw_vars = _field(doc, "variables", "", "list")
    variables = []
    names = {}
    for i, rv in enumerate(raw_vars):
        where = f"variables[{i}]"
        name = _field(rv, "name", where, "str")
        card = _field(rv, "cardinality", where, "int")
        if card < 2:
            raise ModelFormatError(ModelFormatError.RANGE, f"{where}.cardinality",
                                   f"cardinality must be at least 2, got {card}")
        if name in names:
            raise ModelFormatError(ModelFormatError.INVARIANT, f"{where}.name",
                                   f"duplicate variable name {name!r}")
        names[name] = i
        variables.append(Variable(i, name, card))
    cards = [v.cardinality for v in variables]
    factors = []
    for a, rf in enumerate(_field(doc, "factors", "", "list")):
        where = f"factors[{a}]"
        scope = _field(rf, "scope", where, "list")
        for k, v in enumerate(scope):
            if not _is_kind(v, "int") or not 0 <= v < len(variables):
                raise ModelFormatError(ModelFormatError.SCOPE, f"{where}.scope[{k}]",
                                       f"unknown variable id {v!r}")
        if any(b <= a_ for a_, b in zip(scope, scope[1:])):
            raise ModelFormatError(ModelFormatError.SCOPE, f"{where}.scope",
                                   "scope must be strictly ascending")
        values = _field(rf, "logvalues", where, "list")
        expected = 1
        for v in scope:
            expected *= cards[v]
        if len(values) != expected:
            raise ModelFormatError(ModelFormatError.LENGTH, f"{where}.logvalues",
                                   f"factor {a} needs {expected} values, got {len(values)}")
        flat = [_number(x, f"{where}.logvalues[{k}]") for k, x in enumerate(values)]
        factors.append(LogTable.from_flat(tuple(scope), flat, cards))
    log_z = _field(doc, "log_z", "", required=False)
    if log_z is not None:
        log_z = _number(log_z, "log_z")
    try:
        model = TargetModel(tuple(variables), tuple(factors), log_z)
    except ValueError as exc:
        raise ModelFormatError(ModelFormatError.INVARIANT, "model", str(exc)) from None
    evidence = {}
    raw_ev = _field(doc, "evidence", "", "object", required=False) or {}
    for key, state in raw_ev.items():
        where = f"evidence.{key}"
        if key in names:
            vid = names[key]
        elif key.isdigit() and int(key) < len(variables):
            vid = int(key)
        else:
            raise ModelFormatError(ModelFormatError.EVIDENCE, where, "unknown variable")
        if not _is_kind(state, "int") or not 0 <= state < cards[vid]:
            raise ModelFormatError(ModelFormatError.EVIDENCE, where, f"state {state!r} out of range")
        evidence[vid] = state
    return model, evidence


def parse_model(text: str) -> TargetModel:
    """Parse a model document and absorb its evidence, if any."""
    model, evidence = parse_model_document(text)
    return absorb_evidence(model, evidence)


def serialize_model(model: TargetModel, evidence=None) -> str:
    doc = {
        "variables": [{"name": v.name, "cardinality": v.cardinality} for v in model.variables],
        "factors": [{"scope": list(f.scope), "logvalues": [float(x) for x in f.flat()]}
                    for f in model.factors],
    }
    if model.log_z is not None:
        doc["log_z"] = float(model.log_z)
    if evidence:
        doc["evidence"] = {str(k): int(s) for k, s in sorted(evidence.items())}
    return json.dumps(doc, indent=1) + "\n"


def parse_structure(text: str, n_vars: int | None = None) -> dict:
    """Q structure: ``clusters`` plus optional ``copied_factors`` and ``ordering``."""
    doc = _load(text)
    clusters = []
    for k, c in enumerate(_field(doc, "clusters", "", "list")):
        if not isinstance(c, list) or not c:
            raise ModelFormatError(ModelFormatError.TYPE, f"clusters[{k}]",
                                   "expected a non-empty list of variable ids")
        for m, v in enumerate(c):
            if not _is_kind(v, "int") or v < 0 or (n_vars is not None and v >= n_vars):
                raise ModelFormatError(ModelFormatError.SCOPE, f"clusters[{k}][{m}]",
                                       f"unknown variable id {v!r}")
        if len(set(c)) != len(c):
            raise ModelFormatError(ModelFormatError.SCOPE, f"clusters[{k}]", "duplicate ids")
        clusters.append(tuple(sorted(c)))
    copied = _field(doc, "copied_factors", "", "list", required=False) or []
    for k, a in enumerate(copied):
        if not _is_kind(a, "int") or a < 0:
            raise ModelFormatError(ModelFormatError.RANGE, f"copied_factors[{k}]",
                                   f"bad factor index {a!r}")
    ordering = _field(doc, "ordering", "", "list", required=False)
    if ordering is not None and sorted(ordering) != list(range(len(clusters))):
        raise ModelFormatError(ModelFormatError.INVARIANT, "ordering",
                               "ordering must be a permutation of the cluster indices")
    return {"clusters": clusters, "copied_factors": list(copied), "ordering": ordering}


def serialize_structure(clusters, copied_factors=(), ordering=None) -> str:
    doc = {"clusters": [list(c) for c in clusters]}
    if copied_factors:
        doc["copied_factors"] = list(copied_factors)
    if ordering is not None:
        doc["ordering"] = list(ordering)
    return json.dumps(doc) + "\n"


def parse_tree_structure(text: str):
    doc = _load(text)
    nodes = [tuple(sorted(c)) for c in _field(doc, "nodes", "", "list")]
    edges = []
    for k, e in enumerate(_field(doc, "edges", "", "list")):
        if (not isinstance(e, list) or len(e) != 2
                or not all(_is_kind(i, "int") and 0 <= i < len(nodes) for i in e)):
            raise ModelFormatError(ModelFormatError.SCOPE, f"edges[{k}]", "expected two node indices")
        edges.append(tuple(e))
    return nodes, edges


def parse_hybrid(text: str) -> HybridChainModel:
    doc = _load(text)
    p_t = [_number(v, f"p_t[{k}]") for k, v in enumerate(_field(doc, "p_t", "", "list"))]
    means, variances = [], []
    for k, g in enumerate(_field(doc, "gaussians", "", "list")):
        means.append(_number(_field(g, "mean", f"gaussians[{k}]"), f"gaussians[{k}].mean"))
        variances.append(_number(_field(g, "var", f"gaussians[{k}]"), f"gaussians[{k}].var"))
    sig = _field(doc, "sigmoid", "", "object")
    w = _number(_field(sig, "w", "sigmoid"), "sigmoid.w")
    b = _number(_field(sig, "b", "sigmoid"), "sigmoid.b")
    r = _field(doc, "observed_r", "", "int")
    try:
        return HybridChainModel.from_moments(p_t, means, variances, w, b, r)
    except ValueError as exc:
        raise ModelFormatError(ModelFormatError.INVARIANT, "model", str(exc)) from None


def serialize_hybrid(model: HybridChainModel) -> str:
    doc = {
        "p_t": list(model.p_t),
        "gaussians": [{"mean": float(m), "var": float(v)}
                      for m, v in zip(model.means, model.variances)],
        "sigmoid": {"w": model.w, "b": model.b},
        "observed_r": model.observed_r,
    }
    return json.dumps(doc, indent=1) + "\n"
