import io
import json
import math

import numpy as np
import pytest

from structmf.cli import EXIT_INTRACTABLE, EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_OK, main
from structmf.fileio import (
    ModelFormatError,
    parse_hybrid,
    parse_model,
    parse_model_document,
    parse_structure,
    parse_tree_structure,
    serialize_hybrid,
    serialize_model,
)
from structmf.hybrid import crop_model
from structmf.model import LogTable, absorb_evidence, make_variables, target_from_tables
from structmf.networks import asia, random_boltzmann

from conftest import enum_kl, enumerate_log_joint, normalize

ASIA_YES = [0.009999999999999995, 0.01039999999999999, 0.5, 0.05500000000000001,
            0.4500000000000001, 0.0648280000000001, 0.11029004000000005, 0.43597060000000004]


def run(argv):
    out = io.StringIO()
    code = main(argv, stdout=out)
    return code, out.getvalue()


def test_minimal_model_round_trip():
    text = json.dumps({"variables": [{"name": "a", "cardinality": 2}],
                       "factors": [{"scope": [0], "logvalues": [0.1, -0.7]}]})
    model = parse_model(text)
    assert parse_model(serialize_model(model)) == model
    assert serialize_model(parse_model(serialize_model(model))) == serialize_model(model)


def test_round_trip_random_and_asia(rng):
    for model in (asia(), random_boltzmann(5, rng), random_boltzmann(4, rng, encoding="pm1")):
        again = parse_model(serialize_model(model))
        assert again == model
        for a, b in zip(model.factors, again.factors):
            assert np.array_equal(a.values, b.values)


def test_evidence_round_trip_and_absorption():
    model = asia()
    text = serialize_model(model, evidence={6: 1})
    raw, ev = parse_model_document(text)
    assert raw == model and ev == {6: 1}
    assert parse_model(text) == absorb_evidence(model, {6: 1})
    by_name = json.loads(text)
    by_name["evidence"] = {"xray": 1}
    assert parse_model(json.dumps(by_name)) == absorb_evidence(model, {6: 1})


@pytest.mark.parametrize("mutate,code,fragment", [
    (lambda d: d["factors"][1].update(logvalues=[0.0] * 3), "E_LENGTH", "factor 1 needs 4"),
    (lambda d: d.pop("variables"), "E_MISSING_FIELD", "variables"),
    (lambda d: d["variables"][0].update(cardinality=1), "E_RANGE", "cardinality"),
    (lambda d: d["variables"][0].update(cardinality="2"), "E_TYPE", "cardinality"),
    (lambda d: d["factors"][0].update(scope=[5]), "E_SCOPE", "scope[0]"),
    (lambda d: d["factors"][1].update(scope=[1, 0]), "E_SCOPE", "ascending"),
    (lambda d: d.update(evidence={"zz": 0}), "E_EVIDENCE", "evidence.zz"),
    (lambda d: d.update(evidence={"0": 5}), "E_EVIDENCE", "out of range"),
    (lambda d: d["variables"].append({"name": "a", "cardinality": 2}), "E_INVARIANT", "duplicate"),
])
def test_model_errors(mutate, code, fragment):
    doc = {"variables": [{"name": "a", "cardinality": 2}, {"name": "b", "cardinality": 2}],
           "factors": [{"scope": [0], "logvalues": [0.0, 0.0]},
                       {"scope": [0, 1], "logvalues": [0.0, 1.0, 2.0, 3.0]}]}
    mutate(doc)
    with pytest.raises(ModelFormatError) as err:
        parse_model(json.dumps(doc))
    assert err.value.code == code
    assert fragment in str(err.value)


def test_syntax_error_reports_position():
    with pytest.raises(ModelFormatError) as err:
        parse_model('{"variables": [\n  {"name": }]}')
    assert err.value.code == "E_SYNTAX"
    assert "line 2" in str(err.value)


def test_non_finite_values_rejected():
    text = '{"variables": [{"name": "a", "cardinality": 2}], "factors": [{"scope": [0], "logvalues": [0, NaN]}]}'
    with pytest.raises(ModelFormatError) as err:
        parse_model(text)
    assert err.value.code == "E_NONFINITE"


def test_structure_parsing():
    st = parse_structure('{"clusters": [[1, 0], [2]], "copied_factors": [3], "ordering": [1, 0]}', 3)
    assert st == {"clusters": [(0, 1), (2,)], "copied_factors": [3], "ordering": [1, 0]}
    with pytest.raises(ModelFormatError):
        parse_structure('{"clusters": [[0, 7]]}', 3)
    with pytest.raises(ModelFormatError):
        parse_structure('{"clusters": [[0], [1]], "ordering": [0, 0]}', 3)
    nodes, edges = parse_tree_structure('{"nodes": [[0, 1], [1, 2]], "edges": [[0, 1]]}')
    assert nodes == [(0, 1), (1, 2)] and edges == [(0, 1)]
    with pytest.raises(ModelFormatError):
        parse_tree_structure('{"nodes": [[0, 1]], "edges": [[0, 3]]}')


def test_hybrid_round_trip_and_errors():
    model = crop_model()
    again = parse_hybrid(serialize_hybrid(model))
    np.testing.assert_allclose(again.means, model.means)
    assert again.p_t == model.p_t and again.observed_r == 0
    with pytest.raises(ModelFormatError):
        parse_hybrid('{"p_t": [0.5, 0.6], "gaussians": [{"mean": 0, "var": 1}, {"mean": 1, "var": 1}],'
                     ' "sigmoid": {"w": 1, "b": 0}, "observed_r": 1}')


def test_shipped_fixtures_parse(data_dir):
    model = parse_model((data_dir / "asia.json").read_text())
    assert model.n_vars == 8 and len(model.factors) == 8
    p, lz = normalize(enumerate_log_joint(model.cards, model.factors))
    np.testing.assert_allclose([p.sum(axis=tuple(a for a in range(8) if a != v))[1] for v in range(8)],
                               ASIA_YES, atol=1e-12)
    assert parse_model((data_dir / "fork.json").read_text()).n_vars == 3
    assert parse_model((data_dir / "triangle.json").read_text()).n_vars == 3
    assert parse_hybrid((data_dir / "crop_hybrid.json").read_text()).p_t == (0.7, 0.3)


def test_exact_command(data_dir):
    code, out = run(["exact", "--model", str(data_dir / "asia.json")])
    assert code == EXIT_OK
    rows = [line.split("\t") for line in out.splitlines() if line.count("\t") == 2][1:]
    yes = [float(r[2]) for r in rows if r[1] == "1"]
    np.testing.assert_allclose(yes, ASIA_YES, atol=1e-10)


def test_mf_command_is_byte_stable_and_kl_checks_out(data_dir):
    argv = ["mf", "--model", str(data_dir / "asia.json"),
            "--structure", str(data_dir / "asia_factorized.json"), "--seed", "3"]
    code, first = run(argv)
    _, second = run(argv)
    assert code == EXIT_OK and first == second
    kl = float(next(l.split()[2] for l in first.splitlines() if l.startswith("# kl ")))
    margin = float(next(l.split()[2] for l in first.splitlines() if l.startswith("# event_bound_margin")))
    rows = [l.split("\t") for l in first.splitlines() if l.count("\t") == 2][1:]
    q1 = [float(r[2]) for r in rows if r[1] == "1"]
    model = asia()
    pp, _ = normalize(enumerate_log_joint(model.cards, model.factors))
    qq = np.ones([2] * 8)
    for v, m in enumerate(q1):
        shape = [1] * 8
        shape[v] = 2
        qq = qq * np.array([1 - m, m]).reshape(shape)
    assert kl >= 0
    assert kl == pytest.approx(enum_kl(qq, pp), abs=1e-10)
    assert margin >= -1e-9


def test_structured_output_and_out_file(data_dir, tmp_path):
    out = tmp_path / "res.json"
    code, text = run(["--method", "mf", "--model", str(data_dir / "fork.json"),
                      "--structure", str(data_dir / "fork_structure.json"),
                      "--format", "structured", "--out", str(out)])
    assert code == EXIT_OK and text == ""
    doc = json.loads(out.read_text())
    assert doc["converged"] is True and doc["kl"] >= 0
    assert doc["marginals"]["columns"] == ["variable", "state", "probability"]


def test_dmf_and_jtmf_commands(data_dir, tmp_path):
    st = tmp_path / "tri.json"
    st.write_text('{"clusters": [[0, 1], [1, 2]], "ordering": [0, 1]}')
    code, out = run(["dmf", "--model", str(data_dir / "triangle.json"), "--structure", str(st)])
    assert code == EXIT_OK and "# kl " in out
    code, out = run(["dmf", "--model", str(data_dir / "triangle.json"),
                     "--structure", str(data_dir / "triangle_structure.json")])
    assert code == EXIT_INVALID
    code, out = run(["jtmf", "--model", str(data_dir / "asia.json")])
    kl = float(next(l.split()[2] for l in out.splitlines() if l.startswith("# kl ")))
    assert code == EXIT_OK and kl <= 1e-9
    tree = tmp_path / "tree.json"
    tree.write_text('{"nodes": [[0, 1], [1, 2]], "edges": [[0, 1]]}')
    code, out = run(["jtmf", "--model", str(data_dir / "triangle.json"), "--structure", str(tree)])
    assert code == EXIT_OK


def test_restarts_keep_the_best(data_dir):
    base = ["mf", "--model", str(data_dir / "triangle.json"),
            "--structure", str(data_dir / "triangle_structure.json")]
    _, one = run(base)
    code, three = run(base + ["--restarts", "3", "--seed", "11"])
    get = lambda s: float(next(l.split()[2] for l in s.splitlines() if l.startswith("# free_energy")))
    assert code == EXIT_OK and get(three) <= get(one) + 1e-12


def test_hybrid_command_series(data_dir):
    code, first = run(["hybrid", "--model", str(data_dir / "crop_hybrid.json")])
    _, second = run(["hybrid", "--model", str(data_dir / "crop_hybrid.json")])
    assert code == EXIT_OK and first == second
    lines = first.splitlines()
    header = lines.index("x\texact\tsingle_xi\tconditional_xi")
    data = np.array([[float(v) for v in l.split("\t")] for l in lines[header + 1:]])
    assert data.shape == (601, 4)
    assert data[0, 0] == 4.0 and data[-1, 0] == 26.0


def test_bench_command():
    code, out = run(["bench", "--n-models", "1", "--n-vars", "5", "--seed", "2"])
    assert code == EXIT_OK
    rows = [l.split("\t") for l in out.splitlines() if l.count("\t") == 4][1:]
    assert [r[1] for r in rows] == ["mf-factorized", "mf-chain", "jtmf-exact-structure"]
    assert float(rows[2][2]) <= 1e-9


def test_exit_codes(data_dir, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert run(["exact", "--model", str(bad)])[0] == EXIT_INVALID
    assert run(["exact", "--model", str(tmp_path / "missing.json")])[0] == EXIT_INVALID
    assert run(["mf", "--model", str(data_dir / "asia.json")])[0] == EXIT_INVALID
    assert run([])[0] == EXIT_INVALID
    assert run(["exact", "--model", str(data_dir / "asia.json"), "--tol", "-1"])[0] == EXIT_INVALID

    big = tmp_path / "big.json"
    big.write_text(serialize_model(random_boltzmann(16, np.random.default_rng(0))))
    out = tmp_path / "out.txt"
    code, text = run(["exact", "--model", str(big), "--out", str(out)])
    assert code == EXIT_INTRACTABLE and text == "" and not out.exists()

    out = tmp_path / "partial.txt"
    code, _ = run(["mf", "--model", str(data_dir / "asia.json"),
                   "--structure", str(data_dir / "asia_factorized.json"),
                   "--max-iters", "2", "--out", str(out)])
    assert code == EXIT_NOT_CONVERGED
    assert "# converged False" in out.read_text()
