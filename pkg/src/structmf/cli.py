"""Command line front end.

Exit codes: 0 success, 2 parse/validation error, 3 intractable (width limit),
4 no convergence (results are still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import hybrid as hy
from .directed import DirectedApprox, optimize_directed
from .fileio import ModelFormatError, parse_hybrid, parse_model, parse_structure, parse_tree_structure
from .inference import (
    DEFAULT_WIDTH_LIMIT,
    IntractableError,
    exact_tree,
    marginal,
    max_single_variable_discrepancy,
    rip_order,
)
from .jtree import JunctionTreeApprox, optimize_jt
from .meanfield import UndirectedApprox, attach_copied_potentials, free_energy, optimize
from .networks import random_boltzmann

EXIT_OK, EXIT_INVALID, EXIT_INTRACTABLE, EXIT_NOT_CONVERGED = 0, 2, 3, 4
COMMANDS = ("exact", "mf", "dmf", "jtmf", "hybrid", "bench")

log = logging.getLogger("structmf")


@dataclass
class RunConfig:
    command: str
    model_path: str | None = None
    structure_path: str | None = None
    tol: float = 1e-9
    max_iters: int = 1000
    schedule: str = "sequential"
    seed: int = 0
    restarts: int = 1
    output_path: str | None = None
    output_format: str = "tabular"
    width_limit: int = DEFAULT_WIDTH_LIMIT
    n_models: int = 5
    n_vars: int = 8

    def validate(self):
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}")
        if self.command != "bench":
            if not self.model_path:
                raise ValueError("--model is required")
            if not Path(self.model_path).is_file():
                raise ValueError(f"model file {self.model_path} does not exist")
        if self.command in ("mf", "dmf") and not self.structure_path:
            raise ValueError("--structure is required for mf and dmf")
        if self.structure_path and not Path(self.structure_path).is_file():
            raise ValueError(f"structure file {self.structure_path} does not exist")
        if not self.tol > 0:
            raise ValueError("--tol must be positive")
        if self.max_iters < 1 or self.restarts < 1:
            raise ValueError("--max-iters and --restarts must be at least 1")
        if self.schedule not in ("sequential", "reverse", "random"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.output_format not in ("tabular", "structured"):
            raise ValueError(f"unknown format {self.output_format!r}")


def _f(x) -> str:
    return repr(float(x))


def _marginal_rows(model, tables):
    rows = []
    for v, t in zip(model.variables, tables):
        for s, lp in enumerate(np.ravel(t)):
            rows.append((v.name, s, float(np.exp(lp))))
    return rows


def _render(result: dict, fmt: str) -> str:
    if fmt == "structured":
        return json.dumps(result, indent=1, sort_keys=True) + "\n"
    lines = []
    for key in sorted(k for k, v in result.items() if not isinstance(v, (list, dict))):
        val = result[key]
        lines.append(f"# {key} {_f(val) if isinstance(val, float) else val}")
    for name, table in sorted((k, v) for k, v in result.items() if isinstance(v, dict)):
        lines.append("")
        lines.append("\t".join(table["columns"]))
        for row in table["rows"]:
            lines.append("\t".join(_f(c) if isinstance(c, float) else str(c) for c in row))
    return "\n".join(lines).lstrip("\n") + "\n"


def _table(columns, rows):
    return {"columns": list(columns), "rows": [list(r) for r in rows]}


def _exact_reference(model, width_limit):
    """Exact tree of the target, or None when it exceeds the width limit."""
    try:
        return exact_tree(model, width_limit)
    except IntractableError:
        return None


def run_exact(cfg: RunConfig):
    model = parse_model(Path(cfg.model_path).read_text())
    tree = exact_tree(model, cfg.width_limit)
    margs = [marginal(tree, (v,)).values for v in range(model.n_vars)]
    log_z = tree.log_z if model.log_z is None else tree.log_z - model.log_z
    result = {
        "command": "exact",
        "log_z": float(tree.log_z),
        "log_evidence": float(log_z) if model.log_z is not None else None,
        "marginals": _table(("variable", "state", "probability"), _marginal_rows(model, margs)),
    }
    if result["log_evidence"] is None:
        del result["log_evidence"]
    return result, True


def _summarize(cfg, model, q, report, command):
    margs = [q.q_tree and marginal(q.q_tree, (v,)).values for v in range(model.n_vars)]
    result = {
        "command": command,
        "iterations": report.iterations,
        "converged": bool(report.converged),
        "free_energy": float(report.kl_trace[-1] if report.kl_trace else free_energy(q, model)),
        "marginals": _table(("variable", "state", "probability"), _marginal_rows(model, margs)),
        "trace": _table(("update", "free_energy"),
                        [(k + 1, float(v)) for k, v in enumerate(report.kl_trace)]),
    }
    ref = _exact_reference(model, cfg.width_limit)
    if ref is not None:
        kl = max(result["free_energy"] + ref.log_z, 0.0)
        p_margs = [marginal(ref, (v,)) for v in range(model.n_vars)]
        q_margs = [marginal(q.q_tree, (v,)) for v in range(model.n_vars)]
        result["kl"] = float(kl)
        result["event_bound_margin"] = float(math.sqrt(kl / 2)
                                           - max_single_variable_discrepancy(p_margs, q_margs))
    return result, report.converged


def _best_of(cfg, make, run):
    best = None
    for k in range(cfg.restarts):
        q0 = make(None if k == 0 else cfg.seed + k)
        q, rep = run(q0)
        fe = rep.kl_trace[-1] if rep.kl_trace else rep.start_free_energy
        if best is None or fe < best[2]:
            best = (q, rep, fe)
    return best[0], best[1]


def run_mf(cfg: RunConfig):
    model = parse_model(Path(cfg.model_path).read_text())
    st = parse_structure(Path(cfg.structure_path).read_text(), model.n_vars)

    def make(seed):
        if st["copied_factors"]:
            return attach_copied_potentials(model, st["copied_factors"], st["clusters"],
                                            cfg.width_limit, seed=seed)
        return UndirectedApprox.create(model.cards, st["clusters"], seed=seed,
                                       width_limit=cfg.width_limit)

    def run(q0):
        return optimize(q0, model, cfg.schedule, cfg.tol, cfg.max_iters, cfg.seed,
                        order=st["ordering"])

    q, rep = _best_of(cfg, make, run)
    return _summarize(cfg, model, q, rep, "mf")


def run_dmf(cfg: RunConfig):
    model = parse_model(Path(cfg.model_path).read_text())
    st = parse_structure(Path(cfg.structure_path).read_text(), model.n_vars)
    if st["ordering"] is None:
        raise ModelFormatError(ModelFormatError.MISSING, "ordering",
                               "directed approximations need a cluster ordering")
    ordered = [st["clusters"][k] for k in st["ordering"]]

    def make(seed):
        init = None
        if seed is not None:
            rng = np.random.default_rng(seed)
            init = [rng.uniform(-0.1, 0.1, size=[model.cards[v] for v in c]) for c in ordered]
        return DirectedApprox.create(model.cards, ordered, init=init, width_limit=cfg.width_limit)

    def run(q0):
        return optimize_directed(q0, model, cfg.schedule, cfg.tol, cfg.max_iters, cfg.seed)

    q, rep = _best_of(cfg, make, run)
    return _summarize(cfg, model, q, rep, "dmf")


def run_jtmf(cfg: RunConfig):
    model = parse_model(Path(cfg.model_path).read_text())
    if cfg.structure_path:
        nodes, edges = parse_tree_structure(Path(cfg.structure_path).read_text())
        q0 = JunctionTreeApprox.create(model.cards, nodes, edges, cfg.width_limit)
        order = None
    else:
        tree = exact_tree(model, cfg.width_limit)
        q0 = JunctionTreeApprox.create(model.cards, tree.cliques,
                                       [(i, j) for i, j, _ in tree.edges], cfg.width_limit)
        order = rip_order(tree)
    q, rep = optimize_jt(q0, model, cfg.schedule, cfg.tol, cfg.max_iters, cfg.seed, order=order)
    return _summarize(cfg, model, q, rep, "jtmf")


def run_hybrid(cfg: RunConfig):
    model = parse_hybrid(Path(cfg.model_path).read_text())
    sd = np.sqrt(model.variances)
    grid = np.linspace(float(np.min(model.means - 6 * sd)), float(np.max(model.means + 6 * sd)), 601)
    x, exact, single, cond, fit_s, fit_c = hy.crop_series(model, grid)
    result = {
        "command": "hybrid",
        "observed_r": model.observed_r,
        "single_xi": float(fit_s.q.xi[0]),
        "conditional_xi": " ".join(_f(v) for v in fit_c.q.xi),
        "converged": bool(fit_s.converged and fit_c.converged),
        "series": _table(("x", "exact", "single_xi", "conditional_xi"),
                         [(float(a), float(b), float(c), float(d))
                          for a, b, c, d in zip(x, exact, single, cond)]),
    }
    return result, result["converged"]


def run_bench(cfg: RunConfig):
    rows = []
    rng = np.random.default_rng(cfg.seed)
    chain = [(i, i + 1) for i in range(cfg.n_vars - 1)]
    for m in range(cfg.n_models):
        model = random_boltzmann(cfg.n_vars, rng)
        ref = exact_tree(model, cfg.width_limit)
        methods = {
            "mf-factorized": lambda: optimize(
                UndirectedApprox.create(model.cards, [(v,) for v in range(cfg.n_vars)]),
                model, cfg.schedule, cfg.tol, cfg.max_iters, cfg.seed),
            "mf-chain": lambda: optimize(UndirectedApprox.create(model.cards, chain),
                                         model, cfg.schedule, cfg.tol, cfg.max_iters, cfg.seed),
            "jtmf-exact-structure": lambda: optimize_jt(
                JunctionTreeApprox.create(model.cards, ref.cliques,
                                          [(i, j) for i, j, _ in ref.edges]),
                model, "reverse", cfg.tol, cfg.max_iters, order=rip_order(ref)),
        }
        for name, fn in methods.items():
            t0 = time.perf_counter()
            q, rep = fn()
            dt = time.perf_counter() - t0
            kl = max(rep.kl_trace[-1] + ref.log_z, 0.0) if rep.kl_trace else float("nan")
            rows.append((m, name, float(kl), rep.iterations, float(round(dt, 6))))
    return {"command": "bench", "seed": cfg.seed,
            "results": _table(("model", "method", "kl", "iterations", "seconds"), rows)}, True


RUNNERS = {"exact": run_exact, "mf": run_mf, "dmf": run_dmf, "jtmf": run_jtmf,
           "hybrid": run_hybrid, "bench": run_bench}


def run(cfg: RunConfig, stdout=None) -> int:
    stdout = stdout or sys.stdout
    try:
        cfg.validate()
        result, converged = RUNNERS[cfg.command](cfg)
    except IntractableError as exc:
        print(f"error: {exc}; exact computation is infeasible at this width limit",
              file=sys.stderr)
        return EXIT_INTRACTABLE
    except ModelFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    text = _render(result, cfg.output_format)
    if cfg.output_path:
        Path(cfg.output_path).write_text(text)
    else:
        stdout.write(text)
    if not converged:
        print("warning: iteration did not converge", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="structmf", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("command", nargs="?", choices=COMMANDS)
    ap.add_argument("--method", choices=COMMANDS, help="same as the positional command")
    ap.add_argument("--model")
    ap.add_argument("--structure")
    ap.add_argument("--tol", type=float, default=1e-9)
    ap.add_argument("--max-iters", type=int, default=1000)
    ap.add_argument("--schedule", choices=("sequential", "reverse", "random"), default="sequential")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--restarts", type=int, default=1)
    ap.add_argument("--out")
    ap.add_argument("--format", choices=("tabular", "structured"), default="tabular")
    ap.add_argument("--width-limit", type=int, default=DEFAULT_WIDTH_LIMIT)
    ap.add_argument("--n-models", type=int, default=5, help="bench: number of random models")
    ap.add_argument("--n-vars", type=int, default=8, help="bench: variables per model")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None, stdout=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    command = args.command or args.method
    if command is None:
        print("error: a command (or --method) is required", file=sys.stderr)
        return EXIT_INVALID
    cfg = RunConfig(command, args.model, args.structure, args.tol, args.max_iters, args.schedule,
                    args.seed, args.restarts, args.out, args.format, args.width_limit,
                    args.n_models, args.n_vars)
    return run(cfg, stdout)


if __name__ == "__main__":
    sys.exit(main())
