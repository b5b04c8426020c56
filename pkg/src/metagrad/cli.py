"""Command-line harness for experiments and audits.

Subcommands: run (one algorithm to CSV), compare (all algorithms from a
shared seed, one CSV each plus a summary JSON), audit (the bound-audit
battery to JSON), quadratic-oracle (closed-form fixed points), and
gen-family (write a task family JSON from knobs).

Every emitted file gets a sidecar JSON echoing the fully resolved
configuration, defaults included, so outputs are self-describing.
Identical config and seed produce byte-identical files: no timestamps,
no machine-specific paths, floats at 17 significant digits.

Exit codes: 0 success, 1 runtime failure (divergence, non-finite
iterates, I/O), 2 configuration error, with a message naming the
violated precondition.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

from .closed_form import analyze_quadratic
from .errors import (
    ConfigError,
    DivergenceDetected,
    IllConditioned,
    InvalidBatchConfig,
    NumericalFailure,
)
from .meta_gradient import ALGORITHMS, MAML
from .numerics import RngStream
from .optimizer import OptimizerConfig, RunRecord, run, run_comparison
from .stepsize import StepsizeRule
from .stochastic import BatchSpec
from .tasks import (
    QUADRATIC,
    RANK1MF,
    QuadraticTask,
    TaskFamily,
    ball_points,
    local_smoothness,
    random_quadratic_family,
    rank1_mf_family,
)
from .verification import (
    audit_bias,
    audit_grad_gap_F_hat,
    audit_hvp_probe_error,
    audit_kshot_floor,
    audit_second_moment,
    audit_smoothness_ratio,
    audit_stepsize_moments,
)

AUDIT_NAMES = (
    "bias",
    "second_moment",
    "grad_gap",
    "hvp_probe",
    "smoothness",
    "stepsize_moments",
    "kshot",
)

AUDIT_DEFAULTS = {
    "select": list(AUDIT_NAMES),
    "alpha_times_L": None,
    "n_mc": 20_000,
    "phi": 1.0,
    "D_in": [4, 25, 100],
    "D_o": 1_000_000,
    "D_test": [4, 16, 64],
    "n_probes": 200,
    "n_pairs": 500,
    "stepsize_points": 10,
    "stepsize_samples": 20_000,
    "K_list": [4, 64],
    "w_scale": 0.3,
}

CONFIG_DEFAULTS = {
    "family": None,
    "algorithms": list(ALGORITHMS),
    "alpha": 0.1,
    "stepsize": {"kind": "adaptive", "beta": None, "fraction": None},
    "batches": {"B": 20, "D_in": 1, "D_o": 1, "D_h": 1, "B_prime": 1, "D_beta": 1},
    "noise": {"sigma_tilde": 0.0, "sigma_H": 0.0},
    "max_iters": 1000,
    "target_grad_norm": 0.0,
    "w0": None,
    "trust_radius": 10.0,
    "full_task_batch": False,
    "seeds": [0],
    "audit": AUDIT_DEFAULTS,
}

EXAMPLE_1D_FAMILY = (
    (np.array([[1.0]]), np.array([1.0])),
    (np.array([[2.0]]), np.array([-1.0])),
)


def _merge(defaults: dict, given: dict, path: str = "") -> dict:
    """Defaults overlaid with given values; unknown keys are errors."""
    out = {}
    for key, base in defaults.items():
        if key in given and isinstance(base, dict) and base is not None:
            value = given[key]
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{key} must be an object")
            out[key] = _merge(base, value, f"{path}{key}.")
        elif key in given:
            out[key] = given[key]
        else:
            out[key] = json.loads(json.dumps(base))  # deep copy of the default
    for key in given:
        if key not in defaults:
            raise ConfigError(f"{path}{key} is not a recognized option")
    return out


def load_config(path: str | None, args) -> tuple[dict, Path]:
    """Resolve the experiment config: file, defaults, CLI overrides."""
    if path is None:
        given, config_dir = {}, Path.cwd()
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            given = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(given, dict):
            raise ConfigError("config root must be a JSON object")
        config_dir = p.parent
    resolved = _merge(CONFIG_DEFAULTS, given)
    if getattr(args, "seed", None) is not None:
        resolved["seeds"] = [args.seed]
    if getattr(args, "algorithms", None):
        resolved["algorithms"] = args.algorithms.split(",")
    if getattr(args, "max_iters", None) is not None:
        resolved["max_iters"] = args.max_iters
    validate_resolved(resolved)
    return resolved, config_dir


def validate_resolved(resolved: dict) -> None:
    if resolved["family"] is None:
        raise ConfigError("family is required (inline, {\"path\": ...}, or {\"generate\": ...})")
    algos = resolved["algorithms"]
    if not algos or not isinstance(algos, list):
        raise ConfigError("algorithms must be a nonempty list")
    for a in algos:
        if a not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {a!r}; choose from {', '.join(ALGORITHMS)}")
    seeds = resolved["seeds"]
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds must be a nonempty list")
    if any(not isinstance(s, int) or s < 0 for s in seeds):
        raise ConfigError("seeds must be nonnegative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct across replicates")
    bad = [k for k in resolved["audit"]["select"] if k not in AUDIT_NAMES]
    if bad:
        raise ConfigError(f"unknown audit selection {bad}; choose from {', '.join(AUDIT_NAMES)}")


def build_family(spec, config_dir: Path) -> TaskFamily:
    """Family from an inline dict, a file reference, or generator knobs."""
    if not isinstance(spec, dict):
        raise ConfigError("family must be an object")
    try:
        if "path" in spec:
            fp = Path(spec["path"])
            if not fp.is_absolute():
                fp = config_dir / fp
            if not fp.is_file():
                raise ConfigError(f"family file not found: {fp}")
            return TaskFamily.from_json(fp.read_text())
        if "generate" in spec:
            return generate_family(spec["generate"])
        return TaskFamily.from_dict(spec)
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"bad family spec: {e}") from e


def generate_family(knobs: dict) -> TaskFamily:
    merged = _merge(
        {"kind": RANK1MF, "n": 10, "dim": 5, "similarity": 1.0, "seed": 0},
        knobs,
        "family.generate.",
    )
    rng = RngStream(int(merged["seed"]), ("gen_family",))
    n, dim, s = int(merged["n"]), int(merged["dim"]), float(merged["similarity"])
    if merged["kind"] == RANK1MF:
        return rank1_mf_family(n, dim, rng, scale=s)
    if merged["kind"] == QUADRATIC:
        return random_quadratic_family(n, dim, rng, b_scale=s)
    raise ConfigError(f"unknown family kind {merged['kind']!r}")


def build_optimizer_config(resolved: dict, algorithm: str, seed: int) -> OptimizerConfig:
    st = resolved["stepsize"]
    try:
        rule = StepsizeRule(
            kind=st["kind"],
            beta=st["beta"],
            fraction=st["fraction"],
        )
        batches = BatchSpec(**{k: int(v) for k, v in resolved["batches"].items()})
        return OptimizerConfig(
            algorithm=algorithm,
            alpha=float(resolved["alpha"]),
            stepsize=rule,
            batches=batches,
            max_iters=int(resolved["max_iters"]),
            target_grad_norm=float(resolved["target_grad_norm"]),
            seed=seed,
            w0=None if resolved["w0"] is None else np.asarray(resolved["w0"], dtype=float),
            trust_radius=float(resolved["trust_radius"]),
            full_task_batch=bool(resolved["full_task_batch"]),
            sigma_tilde=float(resolved["noise"]["sigma_tilde"]),
            sigma_H=float(resolved["noise"]["sigma_H"]),
        )
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _emit_with_sidecar(path: Path, text: str, command: str, resolved: dict, seed: int,
                       algorithm: str | None = None) -> None:
    _write(path, text)
    sidecar = {"command": command, "seed": seed, "algorithm": algorithm, "config": resolved}
    _write(path.with_suffix(path.suffix + ".config.json"), _json_text(sidecar))


def _worker_count(n_jobs: int) -> int:
    raw = os.environ.get("METAGRAD_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"METAGRAD_THREADS must be an integer, got {raw!r}") from None
    if cap < 0:
        raise ConfigError("METAGRAD_THREADS must be >= 0")
    if cap == 0:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_jobs))


def _map_seeds(fn, seeds: list[int]):
    """Apply fn to each seed, concurrently when more than one worker helps."""
    workers = _worker_count(len(seeds))
    if workers == 1 or len(seeds) == 1:
        return [fn(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, seeds))


def _say(args, line: str) -> None:
    if not args.quiet:
        print(line)


def _record_line(label: str, rec: RunRecord, path: Path) -> str:
    return (
        f"{label} seed={rec.seed}: steps={rec.steps_taken} stop={rec.stop_reason} "
        f"floor={rec.floor:.6g} final={rec.final_grad_norm:.6g} -> {path}"
    )


def cmd_run(args) -> int:
    resolved, config_dir = load_config(args.config, args)
    if len(resolved["algorithms"]) != 1:
        raise ConfigError(
            "run expects exactly one algorithm "
            f"(got {resolved['algorithms']}); use compare or --algorithms"
        )
    algorithm = resolved["algorithms"][0]
    family = build_family(resolved["family"], config_dir)
    out = Path(args.out)

    def one(seed: int):
        rec = run(family, build_optimizer_config(resolved, algorithm, seed))
        path = out / f"run_{algorithm}_seed{seed}.csv"
        _emit_with_sidecar(path, rec.to_csv(), "run", resolved, seed, algorithm)
        return _record_line(f"run {algorithm}", rec, path)

    for line in _map_seeds(one, resolved["seeds"]):
        _say(args, line)
    return 0


def _floor_ratios(records: dict[str, RunRecord]) -> dict:
    floors = {a: r.floor for a, r in records.items()}
    ratios = {}
    others = [f for a, f in floors.items() if a != "fomaml"]
    if "fomaml" in floors and others:
        worst = max(others)
        ratios["fomaml_over_worst_other"] = (
            None if worst == 0.0 else floors["fomaml"] / worst
        )
    low = min(floors.values())
    ratios["max_over_min"] = None if low == 0.0 else max(floors.values()) / low
    return ratios


def cmd_compare(args) -> int:
    resolved, config_dir = load_config(args.config, args)
    family = build_family(resolved["family"], config_dir)
    out = Path(args.out)
    algorithms = tuple(resolved["algorithms"])

    def one(seed: int):
        base = build_optimizer_config(resolved, algorithms[0], seed)
        records = run_comparison(family, base, algorithms=algorithms)
        lines = []
        for algo in algorithms:
            path = out / f"compare_{algo}_seed{seed}.csv"
            _emit_with_sidecar(path, records[algo].to_csv(), "compare", resolved, seed, algo)
            lines.append(_record_line(f"compare {algo}", records[algo], path))
        summary = {
            "seed": seed,
            "alpha": float(resolved["alpha"]),
            "records": {a: records[a].summary() for a in algorithms},
            "floor_ratios": _floor_ratios(records),
        }
        spath = out / f"compare_summary_seed{seed}.json"
        _emit_with_sidecar(spath, _json_text(summary), "compare", resolved, seed)
        lines.append(f"compare summary seed={seed} -> {spath}")
        if args.gnuplot:
            gpath = out / f"compare_seed{seed}.gp"
            _emit_with_sidecar(gpath, _gnuplot_script(algorithms, seed), "compare", resolved, seed)
            lines.append(f"compare plot script seed={seed} -> {gpath}")
        return lines

    for lines in _map_seeds(one, resolved["seeds"]):
        for line in lines:
            _say(args, line)
    return 0


def _gnuplot_script(algorithms: tuple[str, ...], seed: int) -> str:
    plots = ", \\\n     ".join(
        f"'compare_{a}_seed{seed}.csv' using 1:2 skip 1 with lines title '{a}'"
        for a in algorithms
    )
    return (
        "set datafile separator ','\n"
        "set logscale y\n"
        "set xlabel 'iteration'\n"
        "set ylabel 'exact meta-gradient norm'\n"
        f"plot {plots}\n"
    )


def run_audit_battery(family: TaskFamily, resolved: dict, seed: int) -> dict:
    """Execute the selected audits and return a JSON-ready report."""
    a = resolved["audit"]
    select = a["select"]
    d = family.dim
    w0 = (
        np.zeros(d)
        if resolved["w0"] is None
        else np.asarray(resolved["w0"], dtype=float)
    )
    trust = float(resolved["trust_radius"])
    profile = local_smoothness(family, w0, trust).with_noise(
        float(resolved["noise"]["sigma_tilde"]), float(resolved["noise"]["sigma_H"])
    )
    alpha = float(resolved["alpha"])
    if a["alpha_times_L"] is not None:
        alpha = float(a["alpha_times_L"]) / profile.L
    root = RngStream(seed, ("audit",))
    points = ball_points(w0, a["w_scale"] * trust, max(1, int(a["stepsize_points"])),
                         root.child("points"))
    w = points[0]
    entries = []

    def add(audit, suffix=""):
        entry = audit.to_dict()
        entry["name"] = audit.name + suffix
        entries.append(entry)

    if "bias" in select:
        for d_in in a["D_in"]:
            add(
                audit_bias(family, w, alpha, int(d_in), int(a["D_o"]), int(a["n_mc"]),
                           profile, root.child("bias", int(d_in))),
                f"[D_in={int(d_in)}]",
            )
    if "second_moment" in select:
        for d_in in a["D_in"]:
            add(
                audit_second_moment(family, w, alpha, int(d_in), int(a["D_o"]),
                                    float(a["phi"]), int(a["n_mc"]), profile,
                                    root.child("second_moment", int(d_in))),
                f"[D_in={int(d_in)}]",
            )
    if "grad_gap" in select:
        for d_test in a["D_test"]:
            add(
                audit_grad_gap_F_hat(family, w, alpha, int(d_test), int(a["n_mc"]),
                                     profile, root.child("grad_gap", int(d_test))),
                f"[D_test={int(d_test)}]",
            )
    if "hvp_probe" in select:
        add(
            audit_hvp_probe_error(family, profile, alpha, w0, trust * a["w_scale"],
                                  int(a["n_probes"]), root.child("hvp_probe"))
        )
    if "smoothness" in select:
        add(
            audit_smoothness_ratio(family, profile, alpha, w0, trust * a["w_scale"],
                                   int(a["n_pairs"]), root.child("smoothness"))
        )
    if "stepsize_moments" in select:
        for b in audit_stepsize_moments(
            family, profile, alpha, points,
            int(resolved["batches"]["B_prime"]), int(resolved["batches"]["D_beta"]),
            int(a["stepsize_samples"]), root.child("stepsize_moments"),
        ):
            add(b)
    kshot = None
    if "kshot" in select:
        cfg = build_optimizer_config(resolved, MAML, seed)
        if resolved["w0"] is None:
            # the all-zeros default is a stationary point of the
            # factorization families; start at the battery's probe point
            cfg = dc_replace(cfg, w0=w)
        kshot = [
            [k, f]
            for k, f in audit_kshot_floor(
                family, alpha, [int(k) for k in a["K_list"]], cfg, profile=profile
            )
        ]
    return {
        "seed": seed,
        "alpha": alpha,
        "audits": entries,
        "kshot_floors": kshot,
        "all_passed": all(e["passed"] for e in entries),
    }


def cmd_audit(args) -> int:
    resolved, config_dir = load_config(args.config, args)
    family = build_family(resolved["family"], config_dir)
    out = Path(args.out)

    def one(seed: int):
        report = run_audit_battery(family, resolved, seed)
        path = out / f"audit_seed{seed}.json"
        _emit_with_sidecar(path, _json_text(report), "audit", resolved, seed)
        verdict = "all passed" if report["all_passed"] else "FAILURES"
        return f"audit seed={seed}: {len(report['audits'])} checks, {verdict} -> {path}"

    for line in _map_seeds(one, resolved["seeds"]):
        _say(args, line)
    return 0


def _format_vec(v: np.ndarray) -> str:
    return "[" + ", ".join("%.17g" % x for x in v) + "]"


def cmd_quadratic_oracle(args) -> int:
    if args.config is not None:
        resolved, config_dir = load_config(args.config, args)
        family = build_family(resolved["family"], config_dir)
        if family.kind != QUADRATIC:
            raise ConfigError("quadratic-oracle needs a quadratic family")
        alpha = float(resolved["alpha"]) if args.alpha is None else args.alpha
    else:
        tasks = [QuadraticTask(A, b) for A, b in EXAMPLE_1D_FAMILY]
        family = TaskFamily(QUADRATIC, tasks)
        alpha = 0.1 if args.alpha is None else args.alpha
    try:
        analysis = analyze_quadratic(family, alpha)
    except IllConditioned as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 1
    print(f"alpha: {alpha:.17g}")
    print(f"w_star: {_format_vec(analysis.w_star)}")
    print(f"w_fo: {_format_vec(analysis.w_fo)}")
    print(f"fo_gap: {analysis.fo_gap:.17g}")
    return 0


def cmd_gen_family(args) -> int:
    knobs = {
        "kind": args.kind,
        "n": args.n,
        "dim": args.dim,
        "similarity": args.similarity,
        "seed": args.seed if args.seed is not None else 0,
    }
    family = generate_family(knobs)
    name = args.name or f"family_{args.kind}_n{args.n}_d{args.dim}.json"
    path = Path(args.out) / name
    _write(path, family.to_json())
    _write(
        path.with_suffix(path.suffix + ".config.json"),
        _json_text({"command": "gen-family", "knobs": knobs}),
    )
    if not args.quiet:
        print(f"gen-family {args.kind}: {args.n} tasks, dim {args.dim} -> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metagrad",
        description="Meta-learning optimization experiments with exact analysis oracles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None,
                       help="replace the config's replicate seeds with this one seed")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--algorithms", default=None,
                       help="comma-separated subset, e.g. maml,fomaml,hfmaml")
        p.add_argument("--max-iters", type=int, default=None, help="override max iterations")
        p.add_argument("--quiet", action="store_true", help="suppress progress lines")

    p_run = sub.add_parser("run", help="one algorithm, one CSV per replicate seed")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="all algorithms from a shared seed")
    common(p_cmp)
    p_cmp.add_argument("--gnuplot", action="store_true",
                       help="also emit a gnuplot script referencing the CSVs")
    p_cmp.set_defaults(func=cmd_compare)

    p_audit = sub.add_parser("audit", help="run the bound-audit battery to JSON")
    common(p_audit)
    p_audit.set_defaults(func=cmd_audit)

    p_q = sub.add_parser("quadratic-oracle",
                         help="print closed-form fixed points of a quadratic family")
    common(p_q, config_required=False)
    p_q.add_argument("--alpha", type=float, default=None, help="inner stepsize override")
    p_q.set_defaults(func=cmd_quadratic_oracle)

    p_gen = sub.add_parser("gen-family", help="write a task family JSON from knobs")
    p_gen.add_argument("--kind", required=True, choices=[QUADRATIC, RANK1MF])
    p_gen.add_argument("--n", type=int, required=True, help="number of tasks")
    p_gen.add_argument("--dim", type=int, required=True, help="parameter dimension")
    p_gen.add_argument("--similarity", type=float, default=1.0,
                       help="task spread: target scale for rank1mf, offset scale for quadratic")
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--out", default="out", help="output directory (default: out)")
    p_gen.add_argument("--name", default=None, help="output filename (default: derived)")
    p_gen.add_argument("--quiet", action="store_true")
    p_gen.set_defaults(func=cmd_gen_family)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidBatchConfig) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DivergenceDetected, NumericalFailure, IllConditioned) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"i/o failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
