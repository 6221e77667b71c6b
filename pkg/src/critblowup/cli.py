"""Command-line entry point: ``critblowup <command> [--config FILE] [--out DIR] ...``.

Every command reads an optional JSON config, validates it, runs the
computation and writes deterministic JSON/CSV/SVG artifacts.  Wall-clock
information goes only to the sidecar ``run.log``.

Exit codes: 0 success, 1 validation failure, 2 numerical failure,
3 acceptance-criterion failure.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import acceptance, dynamics, green, heatpot, profiles, quadrature, simulate
from .plotting import Series, line_chart

logger = logging.getLogger("critblowup")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_CRITERION = 0, 1, 2, 3

COMMANDS = ("constants", "phi0", "ode", "green", "simulate", "verify")

DEFAULTS: dict[str, dict] = {
    "constants": {"n": 5, "k": 0, "domain": {"kind": "ball"}, "q": None, "gram": True},
    "phi0": {"n": 5, "t0": 100.0, "time_factors": [2, 10, 100, 1000], "domain": {"kind": "ball"}, "q": None},
    "ode": {
        "n": 5,
        "d": 1.0,
        "t0": 10.0,
        "t_factor": 1000.0,
        "samples": 200,
        "forcing": "none",
        "amplitude": 1.0,
        "sigma": 0.5,
        "domain": {"kind": "ball"},
        "q": None,
    },
    "green": {
        "domain": {"n": 5, "kind": "ball"},
        "points": None,
        "count": 20,
        "max_radius": 0.4,
        "n_sources": 1536,
        "n_boundary": 6144,
        "inflation": 2.5,
    },
    "simulate": {},
    "verify": {"criteria": None},
}


class ValidationError(ValueError):
    pass


class NumericalFailure(ArithmeticError):
    pass


@dataclass
class RunConfig:
    """A validated parameter block for one command, plus run-level options."""

    command: str
    params: dict
    seed: int = 0
    cache: str | None = None
    out: str = "."
    extras: dict = field(default_factory=dict)

    @classmethod
    def build(cls, command: str, overrides: dict | None = None, **run) -> "RunConfig":
        if command not in COMMANDS:
            raise ValidationError(f"unknown command {command!r}")
        params = json.loads(json.dumps(DEFAULTS[command]))
        for key, value in (overrides or {}).items():
            if command != "simulate" and key not in params:
                raise ValidationError(f"unknown {command} parameter {key!r}")
            params[key] = value
        cfg = cls(command, params, **run)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        p = self.params
        n = p.get("n", (p.get("domain") or {}).get("n"))
        if self.command in ("constants", "phi0", "ode", "green"):
            if not isinstance(n, int) or n < 5:
                raise ValidationError(f"dimension n >= 5 required, got {n!r}")
        if self.command == "constants":
            k = p["k"]
            if not isinstance(k, int) or k < 0 or k == 1:
                raise ValidationError("k must be 0 (single bubble) or >= 2")
            if k and p["domain"].get("kind", "ball") != "ball":
                raise ValidationError("towers are only combined with the ball domain")
        if self.command in ("phi0", "ode"):
            if not p["t0"] > 0:
                raise ValidationError("t0 must be positive")
        if self.command == "phi0" and any(f <= 1 for f in p["time_factors"]):
            raise ValidationError("time factors must exceed 1")
        if self.command == "ode":
            if p["t_factor"] <= 1:
                raise ValidationError("t_factor must exceed 1")
            if p["forcing"] not in ("none", "model"):
                raise ValidationError("forcing must be 'none' or 'model'")
            if p["samples"] < 3:
                raise ValidationError("need at least 3 samples")
        if self.command == "green":
            if p["count"] < 1 or not 0 < p["max_radius"] < 1:
                raise ValidationError("green needs count >= 1 and 0 < max_radius < 1")
        if self.command == "verify" and p["criteria"] is not None:
            bad = [c for c in p["criteria"] if c not in acceptance.CRITERIA]
            if bad:
                raise ValidationError(f"unknown criteria {bad}")
        if self.command == "simulate":
            try:
                simulate.DemoConfig.from_dict(p)
            except (TypeError, simulate.SimulationError) as exc:
                raise ValidationError(str(exc)) from exc

    def content_hash(self) -> str:
        key = {"command": self.command, "params": self.params, "seed": self.seed}
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# helpers


def _domain(cfg: RunConfig, n: int) -> green.DomainSpec:
    d = dict(cfg.params.get("domain") or {})
    d.setdefault("n", n)
    if d["n"] != n:
        raise ValidationError("domain dimension does not match n")
    try:
        return green.DomainSpec.from_dict(d)
    except green.GreenError as exc:
        raise ValidationError(str(exc)) from exc


def _point(cfg: RunConfig, dom: green.DomainSpec):
    q = cfg.params.get("q")
    q = dom.center_array if q is None else np.asarray(q, dtype=float)
    if q.shape != (dom.n,) or not dom.contains(q):
        raise ValidationError("q must be a point inside the domain")
    return q


def _green_values(cfg: RunConfig, dom: green.DomainSpec, q) -> tuple[float, np.ndarray]:
    if dom.kind == "ball":
        return green.regular_part(dom, q), np.asarray(green.grad_regular_part(dom, q))
    solver = green.GreenSolver(dom, cache_dir=cfg.cache, seed=cfg.seed)
    return green.regular_part(solver, q), np.asarray(green.grad_regular_part(solver, q))


def _constants_for(cfg: RunConfig, n: int) -> tuple[dynamics.BlowupConstants, float]:
    """Single-bubble constants for the configured domain and point; also returns D."""
    dom = _domain(cfg, n)
    q = _point(cfg, dom)
    H, g = _green_values(cfg, dom, q)
    bubble = profiles.BubbleProfile(n)
    D = quadrature._as_tower(bubble).D
    try:
        const = dynamics.BlowupConstants(
            n,
            quadrature.const_c1(bubble),
            quadrature.const_c2(bubble),
            quadrature.const_A_exact(D, n),
            float(H),
            tuple(float(v) for v in g),
            dynamics.translation_coefficient(n),
        )
    except dynamics.DynamicsError as exc:
        raise NumericalFailure(str(exc)) from exc
    return const, D


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


def _json(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# --------------------------------------------------------------------------
# commands


def cmd_constants(cfg: RunConfig) -> dict:
    """Profile fit, quadrature constants, b and c_n; writes constants.json and gram.csv."""
    out = Path(cfg.out)
    p = cfg.params
    n, k = p["n"], p["k"]
    cached = Path(cfg.cache) / f"constants-{cfg.content_hash()}.json" if cfg.cache else None
    if cached is not None and cached.exists():
        data = json.loads(cached.read_text())
        _write(out, "constants.json", data["report"])
        _write(out, "gram.csv", data["gram"])
        return json.loads(data["report"])
    tower = profiles.TowerProfile.build(n, k)
    dom = _domain(cfg, n)
    q = _point(cfg, dom)
    H, g = _green_values(cfg, dom, q)
    c1 = quadrature.const_c1(tower)
    c2 = quadrature.const_c2(tower)
    A = quadrature.const_A_exact(tower.D, n)
    report = {
        "n": n,
        "k": k,
        "alpha_n": profiles.alpha_n(n),
        "zeta_k": tower.zeta_k,
        "kappa": tower.kappa,
        "D": tower.D,
        "E": tower.E,
        "d_k": tower.d_k,
        "c1": c1,
        "c2": c2,
        "A": A,
        "H_qq": H,
        "gradH": g,
        "q": q,
        "domain": dom.to_dict(),
    }
    gram_csv = quadrature.gram_matrix(tower).to_csv() if p["gram"] else ""
    if p["gram"]:
        _write(out, "gram.csv", gram_csv)
    try:
        const = dynamics.BlowupConstants(n, c1, c2, A, float(H), tuple(float(v) for v in g), dynamics.translation_coefficient(n))
    except dynamics.DynamicsError as exc:
        # keep the partial report: the sign of c1 is itself a result
        report["error"] = str(exc)
        _write(out, "constants.json", _json(report))
        raise NumericalFailure(f"blow-up constants undefined: {exc}") from exc
    report.update(
        B=const.B,
        c_n=const.c_n,
        b=const.b,
        b_residual=dynamics.b_residual(const.b, float(H), n),
        mu0_rate=const.mu0_rate,
        translation_coef=const.translation_coef,
        drift=const.drift,
    )
    text = _json(report)
    _write(out, "constants.json", text)
    if cached is not None:
        _write(cached.parent, cached.name, json.dumps({"report": text, "gram": gram_csv}))
    return json.loads(text)


def cmd_phi0(cfg: RunConfig) -> dict:
    """Phi^0 at the concentration point along the self-similar trajectory."""
    p = cfg.params
    n, t0 = p["n"], float(p["t0"])
    const, D = _constants_for(cfg, n)
    q = _point(cfg, _domain(cfg, n))
    spec = heatpot.HeatPotentialSpec(n, t0, dynamics.ParamTrajectory.self_similar(const, t0, q), "dilation", D=D)
    times = [t0 * float(f) for f in p["time_factors"]]
    vals = [heatpot.potential(spec, q, t) for t in times]
    limit = heatpot.limit_value(const)
    scale = heatpot.limit_scale(const, D)
    lines = ["t,phi0,limit"] + [f"{float(t)!r},{float(v)!r},{float(limit)!r}" for t, v in zip(times, vals)]
    out = Path(cfg.out)
    _write(out, "phi0.csv", "\n".join(lines) + "\n")
    svg = line_chart(
        [Series("Phi0(q,t)", np.array(times), np.array(vals)), Series("limit", np.array(times), np.full(len(times), limit))],
        title=f"Phi0 at the concentration point, n={n}",
        xlabel="t",
        ylabel="Phi0",
        xlog=True,
    )
    _write(out, "phi0.svg", svg)
    summary = {
        "n": n,
        "limit": limit,
        "cancelling_scale": scale,
        "final": vals[-1],
        "final_gap_over_scale": abs(vals[-1] - limit) / scale,
        "constants": const.to_dict(),
    }
    _write(out, "phi0.json", _json(summary))
    return summary


def cmd_ode(cfg: RunConfig) -> dict:
    """Reduced parameter system on [t0, t_factor t0]; writes ode.csv, ode.json, ode.svg."""
    p = cfg.params
    n, t0 = p["n"], float(p["t0"])
    const, _ = _constants_for(cfg, n)
    q = _point(cfg, _domain(cfg, n))
    forcings = None
    if p["forcing"] == "model":
        forcings = {r: dynamics.model_forcing(const, r, p["amplitude"], p["sigma"]) for r in range(3 * n)}
    try:
        sol = dynamics.integrate_reduced_system(const, forcings, (t0, p["t_factor"] * t0), d=float(p["d"]), q=q, samples=int(p["samples"]))
    except dynamics.StepSizeError as exc:
        raise NumericalFailure(str(exc)) from exc
    out = Path(cfg.out)
    _write(out, "ode.csv", sol.to_csv())
    summary = {"n": n, "expected_lambda_slope": -(n - 3) / (n - 4)}
    if np.all(sol.lam != 0):
        summary["lambda_slope"] = dynamics.fit_loglog_slope(sol.times, sol.lam)
    drift = np.linalg.norm(sol.xi - q, axis=1)
    if np.all(drift > 0):
        summary["xi_slope"] = dynamics.fit_loglog_slope(sol.times, drift)
        summary["expected_xi_slope"] = -2 / (n - 4)
    _write(out, "ode.json", _json(summary))
    series = [Series("|lambda|", sol.times, np.abs(sol.lam))]
    if np.any(drift > 0):
        series.append(Series("|xi - q|", sol.times, drift))
    _write(out, "ode.svg", line_chart(series, title=f"Reduced system, n={n}", xlabel="t", ylabel="size", xlog=True, ylog=True))
    return summary


def cmd_green(cfg: RunConfig) -> dict:
    """Collocation H(q,q) at the centre and at random points, compared with the image formula for balls."""
    p = cfg.params
    d = dict(p["domain"])
    try:
        dom = green.DomainSpec.from_dict(d)
    except (green.GreenError, KeyError) as exc:
        raise ValidationError(str(exc)) from exc
    n = dom.n
    solver = green.GreenSolver(dom, n_sources=p["n_sources"], n_boundary=p["n_boundary"], inflation=p["inflation"], seed=cfg.seed, cache_dir=cfg.cache)
    if p["points"] is not None:
        pts = [np.asarray(v, dtype=float) for v in p["points"]]
    else:
        rng = np.random.default_rng(cfg.seed)
        pts = [dom.center_array]
        for _ in range(p["count"]):
            v = rng.normal(size=n)
            pts.append(dom.center_array + v / np.linalg.norm(v) * p["max_radius"] * dom.radius * rng.random() ** (1 / n))
    rows = ["q,H_collocation,H_exact,relative_error"]
    errors = []
    values = []
    for q in pts:
        try:
            h = green.regular_part(solver, q)
        except green.GreenError as exc:
            raise ValidationError(str(exc)) from exc
        values.append(h)
        if dom.kind == "ball":
            ex = green.regular_part(dom, q)
            err = abs(h / ex - 1)
            errors.append(err)
            rows.append(f"\"{' '.join(repr(float(v)) for v in q)}\",{h!r},{ex!r},{err!r}")
        else:
            rows.append(f"\"{' '.join(repr(float(v)) for v in q)}\",{h!r},,")
    out = Path(cfg.out)
    _write(out, "green.csv", "\n".join(rows) + "\n")
    summary = {
        "domain": dom.to_dict(),
        "points": len(pts),
        "min_H": min(values),
        "condition_estimate": solver.cond_estimate,
        "H_first_point": values[0],
    }
    if errors:
        summary["max_relative_error"] = max(errors)
        summary["H_first_point_exact"] = green.regular_part(dom, pts[0])
    _write(out, "green.json", _json(summary))
    if min(values) <= 0:
        raise NumericalFailure("H(q,q) is not positive at every tested point")
    return summary


def cmd_simulate(cfg: RunConfig) -> dict:
    """Radial blow-up demo; writes simulate.csv, simulate.json, simulate.svg."""
    demo = simulate.DemoConfig.from_dict(cfg.params)
    try:
        res = simulate.run_blowup_demo(demo)
    except simulate.SimulationError as exc:
        raise NumericalFailure(str(exc)) from exc
    out = Path(cfg.out)
    _write(out, "simulate.csv", res.to_csv())
    summary = dict(res.summary(), config=demo.to_dict(), expected_slope=-1 / (demo.n - 4))
    _write(out, "simulate.json", _json(summary))
    ok = np.isfinite(res.mu)
    _write(
        out,
        "simulate.svg",
        line_chart([Series("fitted mu", res.times[ok], res.mu[ok])], title=f"Radial demo, n={demo.n}", xlabel="t", ylabel="mu", xlog=True, ylog=True),
    )
    return summary


def cmd_verify(cfg: RunConfig) -> dict:
    """Run the acceptance criteria; prints a table and writes verify.json."""
    checks = acceptance.run(cfg.params["criteria"], log=logger.info)
    print(acceptance.table(checks))
    failed = [c for c in checks if c.gating and not c.passed]
    summary = {
        "checks": [c.to_dict() for c in checks],
        "failed": len(failed),
        "passed": sum(1 for c in checks if c.gating and c.passed),
        "informational": sum(1 for c in checks if not c.gating),
    }
    _write(Path(cfg.out), "verify.json", _json(summary))
    return summary


HANDLERS = {
    "constants": cmd_constants,
    "phi0": cmd_phi0,
    "ode": cmd_ode,
    "green": cmd_green,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
}


# --------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="critblowup", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON file with the command's parameter block")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=JSON", help="override one parameter, e.g. --set n=6")
    ap.add_argument("--out", default=None, help="output directory (env CRITBLOWUP_OUT)")
    ap.add_argument("--cache", default=None, help="cache directory (env CRITBLOWUP_CACHE)")
    ap.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread limit")
    ap.add_argument("--seed", type=int, default=0, help="seed for sampled points")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _load_overrides(args) -> dict:
    over: dict = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config: {exc}") from exc
        if not isinstance(data, dict):
            raise ValidationError("config must be a JSON object")
        # accept either a bare block or {"<command>": {...}}
        over.update(data.get(args.command, data) if args.command in data else data)
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects KEY=JSON, got {item!r}")
        try:
            over[key] = json.loads(raw)
        except json.JSONDecodeError:
            over[key] = raw
    return over


def _limit_threads(count: int | None):
    if count is None:
        return contextlib.nullcontext()
    if count < 1:
        raise ValidationError("--threads must be positive")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        os.environ["OMP_NUM_THREADS"] = str(count)
        return contextlib.nullcontext()
    return threadpool_limits(limits=count)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    out = args.out or os.environ.get("CRITBLOWUP_OUT") or "."
    cache = args.cache or os.environ.get("CRITBLOWUP_CACHE")
    Path(out).mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(Path(out) / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    start = time.perf_counter()
    try:
        cfg = RunConfig.build(args.command, _load_overrides(args), seed=args.seed, cache=cache, out=out)
        logger.info("command %s config %s", cfg.command, cfg.content_hash())
        with _limit_threads(args.threads):
            result = HANDLERS[cfg.command](cfg)
    except ValidationError as exc:
        logger.error("validation: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ArithmeticError, np.linalg.LinAlgError, simulate.FitInvalid) as exc:
        logger.error("numerical: %s", exc)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        # module precondition errors (ProfileError, DynamicsError, ...) are validation failures
        logger.error("validation: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    finally:
        logger.info("elapsed %.2fs", time.perf_counter() - start)
        root.removeHandler(handler)
        handler.close()
    if args.command == "verify":
        return EXIT_CRITERION if result["failed"] else EXIT_OK
    print(_json(result), end="")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
