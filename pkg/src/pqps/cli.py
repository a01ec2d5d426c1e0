"""Command-line interface: ``pqps {fit,simulate,study,vertices}``.

Exit codes: 0 success, 2 input error (bad CSV, bad configuration, bad
knots), 3 numerical failure during fitting. Progress goes to stderr as
``key=value`` lines; every file written is a deterministic function of the
inputs, configuration and seed.
"""

import argparse
import csv
import dataclasses
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from .model import RE_FAMILIES, Dataset, ModelConfig, build_geometry
from .polytope import closed_form_vertices
from .sampler import MCMCConfig, fit, stderr_progress
from .simharness import DEFAULT_LEVELS, DESIGN_IDS, DesignSpec, generate, run_study
from .spline_basis import KnotVector, make_knots

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3


class InputError(Exception):
    """Problem with user-supplied files, flags or configuration."""


@dataclasses.dataclass(frozen=True)
class FitConfig:
    """Everything a fit depends on; mirrored by the JSON config file."""

    levels: tuple = DEFAULT_LEVELS
    K: int = 20
    R: int = 3
    re_family: str = "normal"
    iters1: int = 10_000
    iters2: int = 30_000
    thin: int = 10
    burnin: int = 10_000
    seed: int = 0
    grid: int = 200
    chains: int = 1

    def __post_init__(self):
        try:
            levels = tuple(float(v) for v in self.levels)
        except (TypeError, ValueError):
            raise InputError("levels must be a list of numbers") from None
        object.__setattr__(self, "levels", levels)
        for name in ("K", "R", "iters1", "iters2", "thin", "burnin", "seed", "grid", "chains"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise InputError(f"{name} must be an integer, got {value!r}")
        if self.K < 0 or self.R < 0:
            raise InputError("knot counts must be non-negative")
        if min(self.iters1, self.iters2, self.thin, self.grid, self.chains) < 1:
            raise InputError("iteration counts, thin, grid and chains must be positive")
        if self.seed < 0:
            raise InputError("seed must be non-negative")
        if self.re_family not in RE_FAMILIES:
            raise InputError(f"re_family must be one of {RE_FAMILIES}")
        try:
            self.model_config()
            self.mcmc_config()
        except ValueError as exc:
            raise InputError(str(exc)) from None
        if self.mcmc_config().n_draws < 1:
            raise InputError("no draws are kept: increase iters2 or lower burnin/thin")

    def model_config(self):
        return ModelConfig(self.levels, K=self.K, R=self.R, re_family=self.re_family)

    def mcmc_config(self):
        return MCMCConfig(iters1=self.iters1, iters2=self.iters2, thin=self.thin, burnin=self.burnin)

    def to_json(self):
        d = dataclasses.asdict(self)
        d["levels"] = list(self.levels)
        return d


CONFIG_FIELDS = tuple(f.name for f in dataclasses.fields(FitConfig))
# command-line flag -> FitConfig field
FLAG_FIELDS = {"levels": "levels", "knots": "K", "sd_knots": "R", "re_family": "re_family",
               "iters1": "iters1", "iters2": "iters2", "thin": "thin", "burnin": "burnin",
               "seed": "seed", "grid": "grid", "chains": "chains"}


# ---------------------------------------------------------------------------
# input helpers


def parse_levels(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated numbers: {text!r}")


def load_config_file(path):
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise InputError(f"config {path}: expected a JSON object")
    unknown = sorted(set(raw) - set(CONFIG_FIELDS))
    if unknown:
        raise InputError(f"config {path}: unknown keys {', '.join(unknown)}")
    return raw


def resolve_config(args, defaults=None):
    """Defaults < config file < command-line flags."""
    values = dict(defaults or {})
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for flag, name in FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    return FitConfig(**values)


def read_xy_csv(path):
    """Read a two-column ``x,y`` CSV with header; errors name the offending line."""
    try:
        with open(path, newline="") as fh:
            lines = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except (csv.Error, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: unreadable CSV ({exc})") from None
    rows = [(i + 1, r) for i, r in enumerate(lines) if any(c.strip() for c in r)]
    if not rows:
        raise InputError(f"{path}: file is empty")
    line, header = rows[0]
    names = [c.strip().lower() for c in header]
    if "x" not in names or "y" not in names:
        raise InputError(f"{path}:{line}: header must name columns x and y, got {header}")
    ix, iy = names.index("x"), names.index("y")
    xs, ys = [], []
    for line, r in rows[1:]:
        if len(r) != len(header):
            raise InputError(f"{path}:{line}: expected {len(header)} fields, found {len(r)}")
        try:
            x, y = float(r[ix]), float(r[iy])
        except ValueError:
            raise InputError(f"{path}:{line}: non-numeric value in {r}") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise InputError(f"{path}:{line}: non-finite value in {r}")
        xs.append(x)
        ys.append(y)
    if len(xs) < 2:
        raise InputError(f"{path}: need at least two data rows, found {len(xs)}")
    if min(xs) == max(xs):
        raise InputError(f"{path}: all x values are equal, the covariate range is degenerate")
    return np.array(xs), np.array(ys)


def parse_knots(text):
    """``"5"`` -> five evenly spaced knots; ``"0.2,0.7"`` -> those interior knots."""
    text = text.strip()
    try:
        if "," not in text and "." not in text:
            return make_knots(int(text))
        return KnotVector(np.array([float(v) for v in text.split(",") if v.strip()]))
    except ValueError as exc:
        raise InputError(f"bad knots {text!r}: {exc}") from None


def _fmt(v):
    return repr(float(v))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def _write_json(path, obj):
    path.write_text(json.dumps(_jsonable(obj), indent=2) + "\n")


def _out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _rate_summary(rates):
    r = np.asarray(rates, dtype=float)
    r = r[np.isfinite(r)]
    if r.size == 0:
        return {"mean": None, "min": None, "max": None}
    return {"mean": float(r.mean()), "min": float(r.min()), "max": float(r.max())}


# ---------------------------------------------------------------------------
# subcommands


def _progress(args):
    return None if args.quiet else stderr_progress


def cmd_fit(args):
    cfg = resolve_config(args)
    x_raw, y_raw = read_xy_csv(args.data)
    data = Dataset.from_raw(x_raw, y_raw)
    geom = build_geometry(cfg.model_config())
    mcmc = cfg.mcmc_config()
    progress = _progress(args)
    start = time.perf_counter()
    grid = np.linspace(0.0, 1.0, cfg.grid)
    results = []
    for k, seq in enumerate(np.random.SeedSequence(cfg.seed).spawn(cfg.chains)):
        if progress is not None:
            progress(f"chain={k}")
        results.append(fit(data, geom, mcmc, np.random.default_rng(seq), progress=progress))
    # pool draws across chains
    pooled = results[0]
    if len(results) > 1:
        pooled = dataclasses.replace(pooled, draws=np.vstack([r.draws for r in results]))
    s = pooled.summarize(grid)
    runtime = time.perf_counter() - start

    out = _out_dir(args.out)
    x_orig = data.to_original(grid)
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "tau", "posterior_mean", "lower95", "upper95"])
        for t, tau in enumerate(cfg.levels):
            for g in range(grid.size):
                w.writerow([_fmt(x_orig[g]), _fmt(tau), _fmt(s.mean[g, t]), _fmt(s.lower[g, t]),
                            _fmt(s.upper[g, t])])
    names = pooled.param_names
    summary = {
        "config": cfg.to_json(),
        "n": data.n,
        "x_rescaling": {"lo": data.x_range[0], "hi": data.x_range[1],
                        "map": "x_unit = (x - lo) / (hi - lo)"},
        "draws": pooled.n_draws,
        "acceptance": [{
            "stage1": _rate_summary(r.acceptance["stage1"]),
            "stage1_per_parameter": dict(zip(names, r.acceptance["stage1"])),
            "stage2": _rate_summary(r.acceptance["stage2"]),
            "stage2_per_block": list(r.acceptance["stage2"]),
            "n_blocks": r.diagnostics["n_blocks"],
            "carry_stage1": dict(zip(r.diagnostics["carry_names"], r.acceptance["carry1"])),
            "carry_stage2": dict(zip(r.diagnostics["carry_names"], r.acceptance["carry2"])),
        } for r in results],
        "ess": {"min": float(np.min(pooled.ess)), "median": float(np.median(pooled.ess)),
                "per_parameter": dict(zip(names, pooled.ess))},
        "vertex_basis_condition": geom.poly.condition,
        "zero_width_bin_rejections": int(sum(r.diagnostics["zero_width_bin"] for r in results)),
    }
    if args.record_runtime:
        summary["runtime_seconds"] = runtime
    _write_json(out / "summary.json", summary)
    if progress is not None:
        progress(f"done=fit runtime_s={runtime:.2f} out={out}")
    return EXIT_OK


def cmd_simulate(args):
    if args.n < 10:
        raise InputError("n must be at least 10")
    if args.seed < 0:
        raise InputError("seed must be non-negative")
    spec = DesignSpec(args.design, n=args.n)
    levels = args.levels if args.levels is not None else DEFAULT_LEVELS
    try:
        ModelConfig(levels)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    data, truth = generate(spec, rng)
    out = _out_dir(args.out)
    with open(out / "data.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y"])
        for x, y in zip(data.x, data.y):
            w.writerow([_fmt(x), _fmt(y)])
    q = truth(data.x, np.asarray(levels))
    with open(out / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "tau", "q_true"])
        for i, x in enumerate(data.x):
            for t, tau in enumerate(levels):
                w.writerow([_fmt(x), _fmt(tau), _fmt(q[i, t])])
    _write_json(out / "metadata.json", {"design": spec.id, "n": spec.n, "seed": args.seed,
                                        "levels": list(levels), "re_family": spec.re_family})
    if not args.quiet:
        stderr_progress(f"done=simulate design={spec.id} n={spec.n} out={out}")
    return EXIT_OK


def cmd_study(args):
    if args.replicates < 1:
        raise InputError("replicates must be at least 1")
    if args.workers < 1:
        raise InputError("workers must be at least 1")
    spec = DesignSpec(args.design)
    cfg = resolve_config(args, {"re_family": spec.re_family})
    progress = _progress(args)
    report = run_study(spec, args.replicates, cfg.mcmc_config(), levels=cfg.levels, seed=cfg.seed,
                       K=cfg.K, R=cfg.R, re_family=cfg.re_family, workers=args.workers,
                       progress=progress)
    out = _out_dir(args.out)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.to_text())
    if args.dump_replicates:
        (out / "replicates.csv").write_text(report.replicate_csv())
    if not args.quiet:
        sys.stderr.write(report.to_text(include_runtime=True))
    if report.replicates == 0:
        raise ArithmeticError("every replicate failed: " + "; ".join(e for _, e in report.failures))
    return EXIT_OK


def cmd_vertices(args):
    knots = parse_knots(args.knots)
    V = closed_form_vertices(knots)
    header = ["x", "x2", "x3"] + [f"tp{k + 1}" for k in range(knots.K)]
    fh = sys.stdout if args.out in (None, "-") else open(args.out, "w", newline="")
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in V:
            w.writerow([_fmt(v) for v in row])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_model_flags(p):
    p.add_argument("--config", help="JSON file with FitConfig fields; flags override it")
    p.add_argument("--levels", type=parse_levels, help="comma-separated quantile levels")
    p.add_argument("--knots", type=int, help="number of interior spline knots K")
    p.add_argument("--sd-knots", type=int, help="number of interior knots R of the sd spline")
    p.add_argument("--re-family", choices=RE_FAMILIES, help="random-effect distribution")
    p.add_argument("--iters1", type=int, help="stage-1 single-site sweeps")
    p.add_argument("--iters2", type=int, help="stage-2 block iterations")
    p.add_argument("--thin", type=int, help="keep every thin-th stage-2 draw")
    p.add_argument("--burnin", type=int, help="stage-2 burn-in iterations")
    p.add_argument("--seed", type=int, help="master random seed")
    p.add_argument("--grid", type=int, help="number of output grid points")


def build_parser():
    parser = argparse.ArgumentParser(prog="pqps", description="Non-crossing Bayesian quantile splines.")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit quantile curves to an x,y CSV")
    p.add_argument("data", help="CSV with header and columns x,y")
    _add_model_flags(p)
    p.add_argument("--chains", type=int, help="independent chains whose draws are pooled")
    p.add_argument("--out", default="pqps_fit", help="output directory")
    p.add_argument("--record-runtime", action="store_true",
                   help="store the wall-clock runtime in summary.json (makes it non-reproducible)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="draw a data set from a simulation design")
    p.add_argument("--design", type=int, choices=DESIGN_IDS, required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--levels", type=parse_levels)
    p.add_argument("--out", default="pqps_sim", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("study", help="replicated simulation study")
    p.add_argument("--design", type=int, choices=DESIGN_IDS, required=True)
    p.add_argument("--replicates", type=int, default=20)
    p.add_argument("--workers", type=int, default=1, help="concurrent replicate processes")
    _add_model_flags(p)
    p.add_argument("--dump-replicates", action="store_true", help="also write replicates.csv")
    p.add_argument("--out", default="pqps_study", help="output directory")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("vertices", help="print the enclosing polytope vertices")
    p.add_argument("--knots", required=True,
                   help="K (evenly spaced interior knots) or a comma-separated knot list in (0, 1)")
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_vertices)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad usage, which is our input-error code too
        return int(exc.code or 0)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
