"""Batch front-end: config-driven campaigns over the measurement modules.

One config file describes one experiment kind; `run` fans jobs out over a
worker pool, merges their rows deterministically, and writes a long-format
CSV, the canonical config echo, any field/solution binaries, and a manifest
with content digests.  Exit codes: 0 all jobs succeeded, 2 some jobs failed
but the campaign completed, 1 configuration or IO error.

Config grammar (line oriented)::

    # comment
    [experiment]
    kind = corrector
    d = 2
    sizes = [8, 16, 32]

    [field]
    kind = random
    p0 = 4.0

Sections `[experiment]` and `[field]`, `key = value` pairs, arrays in
brackets, strings optionally double-quoted, `inf` for infinite exponents.
Unknown keys, type mismatches, and constraint violations are rejected with
the offending key and line.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import __version__
from .exponents import derive_exponents, is_inf, profile_of_field
from .fields import (FieldSpec, MatrixField, _atomic_write, make_checkerboard,
                     make_constant, make_radial_power, sample_random,
                     write_field)
from .solver import (Mesh, energy, solve_corrector, solve_dirichlet,
                     write_solution)
from . import cutoff as cutoff_mod
from . import homogenize as hom
from . import regularity as reg


class ConfigError(Exception):
    """Invalid experiment configuration (bad key, type, or constraint)."""


KINDS = ("exponents", "solve", "cutoff", "harnack", "bound2d", "corrector",
         "sweep")

BOUNDARIES = {
    "x1": lambda x: x[:, 0],
    "2+x1": lambda x: 2.0 + x[:, 0],
    "one": lambda x: np.ones(x.shape[0]),
}

FIELD_KINDS = ("random", "constant", "checkerboard", "radial")

CSV_COLUMNS = ("experiment", "digest", "d", "p", "q", "n", "L", "seed",
               "key", "value", "flag")


@dataclass(frozen=True)
class FieldConfig:
    """Coefficient-field recipe shared by all jobs of a campaign."""

    kind: str = "random"
    p0: float = 4.0
    q0: float = 4.0
    block: int = 1
    seed: int = 0
    value: float = 1.0       # constant field: a = value * Id
    low: float = 1.0         # checkerboard phases
    high: float = 4.0
    alpha: float = -0.5      # radial power |x|^alpha


@dataclass(frozen=True)
class ExperimentConfig:
    """One validated campaign: kind, geometry, exponent targets, jobs."""

    kind: str = ""
    d: int = 2
    p: float = 4.0           # math.inf allowed
    q: float = 4.0
    ns: tuple = (64,)        # mesh sizes (box jobs)
    seeds: tuple = (0,)
    sizes: tuple = (8, 16, 32)   # torus sides (corrector jobs)
    alphas: tuple = (-0.5, 0.0, 0.5)  # sweep exponents
    boundary: str = "x1"
    box: float = 2.0
    rho: float = 0.5
    sigma: float = 1.0
    gamma: float = 1.0
    radius: float = 0.8
    direction: int = 0
    threads: int = 1
    out: str = ""
    field: FieldConfig = dc_field(default_factory=FieldConfig)


_EXPERIMENT_TYPES = {
    "kind": "str", "d": "int", "p": "ext", "q": "ext", "ns": "list_int",
    "seeds": "list_int", "sizes": "list_int", "alphas": "list_float",
    "boundary": "str", "box": "float", "rho": "float", "sigma": "float",
    "gamma": "float", "radius": "float", "direction": "int", "threads": "int",
    "out": "str",
}

_FIELD_TYPES = {
    "kind": "str", "p0": "ext", "q0": "ext", "block": "int", "seed": "int",
    "value": "float", "low": "float", "high": "float", "alpha": "float",
}

_SCHEMA = {"experiment": _EXPERIMENT_TYPES, "field": _FIELD_TYPES}


# ---------------------------------------------------------------------------
# parsing and emission


def _coerce(raw: str, typ: str, where: str):
    if typ.startswith("list_"):
        if not (raw.startswith("[") and raw.endswith("]")):
            raise ConfigError(f"{where}: expected an array like [1, 2, 3]")
        inner = raw[1:-1].strip()
        items = [s.strip() for s in inner.split(",")] if inner else []
        if not items:
            raise ConfigError(f"{where}: array must not be empty")
        return tuple(_coerce(s, typ[5:], where) for s in items)
    if typ == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: {raw!r} is not an integer") from None
    if typ in ("float", "ext"):
        if typ == "ext" and raw == "inf":
            return math.inf
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: {raw!r} is not a number") from None
    if typ == "str":
        if len(raw) >= 2 and raw[0] == raw[-1] == '"':
            return raw[1:-1]
        return raw
    raise AssertionError(typ)


def parse_config(text: str) -> ExperimentConfig:
    """Parse and fully validate a config; errors name the key and line."""
    data = {"experiment": {}, "field": {}}
    lines = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}: malformed section header {raw.strip()!r}")
            name = line[1:-1].strip()
            if name not in _SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{name}]")
            section = name
            continue
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, raw_val = line.partition("=")
        key, raw_val = key.strip(), raw_val.strip()
        if key not in _SCHEMA[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        if key in data[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        data[section][key] = _coerce(raw_val, _SCHEMA[section][key],
                                     f"line {lineno}: {key}")
        lines[(section, key)] = lineno
    config = ExperimentConfig(field=FieldConfig(**data["field"]),
                              **data["experiment"])
    return validate_config(config, lines)


def validate_config(config: ExperimentConfig, lines=None) -> ExperimentConfig:
    """Constraint checks; returns the (normalized) config or raises ConfigError."""

    def bad(section, key, msg):
        loc = ""
        if lines and (section, key) in lines:
            loc = f" (line {lines[(section, key)]})"
        raise ConfigError(f"[{section}] {key}{loc}: {msg}")

    if config.kind == "bound":          # alias of the subcommand name
        config = replace(config, kind="bound2d")
    if config.kind and config.kind not in KINDS:
        bad("experiment", "kind", f"unknown kind {config.kind!r}; "
            f"one of {', '.join(KINDS)}")
    if config.d < 2:
        bad("experiment", "d", "dimension must be >= 2")
    if config.kind and config.kind != "exponents" and config.d > 3:
        bad("experiment", "d", f"meshed experiments support d in {{2, 3}}, got {config.d}")
    for key in ("p", "q"):
        v = getattr(config, key)
        if not v > 1:
            bad("experiment", key, f"must be > 1 (or inf), got {v}")
    for key in ("ns", "sizes"):
        if any(v <= 0 for v in getattr(config, key)):
            bad("experiment", key, "entries must be positive")
    if config.boundary not in BOUNDARIES:
        bad("experiment", "boundary", f"unknown boundary {config.boundary!r}; "
            f"one of {', '.join(sorted(BOUNDARIES))}")
    if config.box <= 0:
        bad("experiment", "box", "box side must be positive")
    if not 0 <= config.rho < config.sigma:
        bad("experiment", "rho", f"need 0 <= rho < sigma, got rho={config.rho} "
            f"sigma={config.sigma}")
    if config.gamma <= 0:
        bad("experiment", "gamma", "gamma must be positive")
    if config.radius <= 0:
        bad("experiment", "radius", "radius must be positive")
    if not 0 <= config.direction < config.d:
        bad("experiment", "direction", f"direction must lie in [0, {config.d})")
    if config.threads < 1:
        bad("experiment", "threads", "thread count must be >= 1")
    fc = config.field
    if fc.kind not in FIELD_KINDS:
        bad("field", "kind", f"unknown field kind {fc.kind!r}; "
            f"one of {', '.join(FIELD_KINDS)}")
    if not (fc.p0 > 0 and fc.q0 > 0):
        bad("field", "p0", "tail indices p0, q0 must be positive")
    if fc.block < 1:
        bad("field", "block", "block side must be >= 1")
    if config.kind == "corrector" and fc.kind == "random":
        for size in config.sizes:
            if size % fc.block:
                bad("field", "block", f"block {fc.block} does not divide torus size {size}")
    return config


_EMIT_ORDER = ("kind", "d", "p", "q", "ns", "seeds", "sizes", "alphas",
               "boundary", "box", "rho", "sigma", "gamma", "radius",
               "direction", "threads", "out")
_FIELD_EMIT_ORDER = ("kind", "p0", "q0", "block", "seed", "value", "low",
                     "high", "alpha")


def _emit_value(v) -> str:
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, bool):
        raise AssertionError("no boolean config keys")
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, tuple):
        return "[" + ", ".join(_emit_value(x) for x in v) + "]"
    raise AssertionError(type(v))


def emit_config(config: ExperimentConfig) -> str:
    """Canonical text form; parse_config(emit_config(c)) == c."""
    out = ["[experiment]"]
    out += [f"{k} = {_emit_value(getattr(config, k))}" for k in _EMIT_ORDER]
    out.append("")
    out.append("[field]")
    out += [f"{k} = {_emit_value(getattr(config.field, k))}"
            for k in _FIELD_EMIT_ORDER]
    return "\n".join(out) + "\n"


def config_digest(config: ExperimentConfig) -> str:
    """Content hash of the canonical config text (first 16 hex digits)."""
    return hashlib.sha256(emit_config(config).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# rows


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if is_inf(v):
        return "inf"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (int, np.integer)):
        return str(v)
    if v is None:
        return ""
    try:                       # Fractions and numpy scalars
        return repr(float(v))
    except (TypeError, ValueError):
        return str(v)


def _row(key, value, flag="", n="", L="", seed=""):
    return {"n": _fmt(n), "L": _fmt(L), "seed": _fmt(seed), "key": str(key),
            "value": _fmt(value), "flag": str(flag)}


def _pass(ok: bool) -> str:
    return "pass" if ok else "fail"


# ---------------------------------------------------------------------------
# field construction per job


def _build_field(config: ExperimentConfig, n: int, seed: int,
                 mode: str = "box") -> MatrixField:
    fc = config.field
    if fc.kind == "constant":
        return make_constant(config.d, n, fc.value * np.eye(config.d),
                             box=config.box, mode=mode)
    if fc.kind == "checkerboard":
        return make_checkerboard(config.d, n, fc.low, fc.high, box=config.box,
                                 mode=mode)
    if fc.kind == "radial":
        field, _ = make_radial_power(config.d, n, fc.alpha, box=config.box,
                                     mode=mode)
        return field
    spec = FieldSpec(d=config.d, n=n, p0=fc.p0, q0=fc.q0, block=fc.block,
                     seed=seed, box=config.box)
    return sample_random(spec, mode=mode)


# ---------------------------------------------------------------------------
# job builders, one per experiment kind


def _jobs_exponents(config, out_dir, seed_offset):
    del out_dir, seed_offset

    def job():
        exps = derive_exponents(config.d, config.p, config.q)
        rows = [_row(k, getattr(exps, k))
                for k in ("p_prime", "delta", "s", "chi", "p_star", "q_star",
                          "kappa")]
        rows += [_row(k, getattr(exps, k))
                 for k in ("sharp_ok", "classical_ok", "borderline")]
        return rows

    return [((0, 0, 0), {}, job)]


def _solve_once(config, n, seed, mode="box"):
    field = _build_field(config, n, config.field.seed + seed, mode)
    mesh = Mesh(config.d, n, config.box, mode)
    u = solve_dirichlet(field, mesh, BOUNDARIES[config.boundary])
    return field, mesh, u


def _jobs_solve(config, out_dir, seed_offset):
    jobs = []
    n_max, seed0 = max(config.ns), config.seeds[0]
    for n in config.ns:
        for seed in config.seeds:
            def job(n=n, seed=seed):
                field, mesh, u = _solve_once(config, n, seed + seed_offset)
                rows = [
                    _row("residual", u.residual, n=n, seed=seed),
                    _row("iterations", u.meta["iterations"], n=n, seed=seed),
                    _row("sup_abs", float(np.max(np.abs(u.values))), n=n, seed=seed),
                    _row("energy", energy(u, field), n=n, seed=seed),
                ]
                if n == n_max and seed == seed0:
                    stem = os.path.join(out_dir, f"solve_n{n}_seed{seed}")
                    write_field(field, stem + ".dhf")
                    write_solution(u, stem + ".dhs")
                return rows

            jobs.append(((n, 0, seed), {"n": n, "seed": seed}, job))
    return jobs


def _jobs_cutoff(config, out_dir, seed_offset):
    del out_dir
    jobs = []
    for n in config.ns:
        for seed in config.seeds:
            def job(n=n, seed=seed):
                field, _, v = _solve_once(config, n, seed + seed_offset)
                profile = profile_of_field(field)
                sp = cutoff_mod.shell_integrals(v, profile, config.rho, config.sigma)
                rc = cutoff_mod.optimal_radial_cutoff(sp)
                direct = cutoff_mod.direct_cutoff_optimum(v, profile, config.rho,
                                                          config.sigma)
                competitor = cutoff_mod.radial_competitor_energy(v, profile, rc)
                report = cutoff_mod.verify_cutoff_bound(v, profile, config.p,
                                                        config.rho, config.sigma)
                dominated = direct.j_value <= competitor * (1.0 + 1e-9)
                rows = [
                    _row("shell_mass", sp.total(), n=n, seed=seed,
                         flag="merged" if sp.merged else ""),
                    _row("j1d", rc.j_value, n=n, seed=seed,
                         flag="degenerate" if rc.degenerate else ""),
                    _row("j_direct", direct.j_value, n=n, seed=seed,
                         flag=_pass(dominated)),
                    _row("j_radial_competitor", competitor, n=n, seed=seed),
                    _row("cutoff_c_emp", report["c_emp"], n=n, seed=seed,
                         flag=_pass(report["passed"])),
                ]
                return rows

            jobs.append(((n, 0, seed), {"n": n, "seed": seed}, job))
    return jobs


def _jobs_harnack(config, out_dir, seed_offset):
    del out_dir
    jobs = []
    center = np.zeros(config.d)
    for n in config.ns:
        for seed in config.seeds:
            def job(n=n, seed=seed):
                field, mesh, u = _solve_once(config, n, seed + seed_offset)
                profile = profile_of_field(field)
                exps = derive_exponents(config.d, config.p, config.q)
                rows = []
                hq = reg.harnack_quotient(u, center, config.radius)
                rows += [
                    _row("harnack_sup", hq["sup"], n=n, seed=seed),
                    _row("harnack_inf", hq["inf"], n=n, seed=seed),
                    _row("harnack_quotient", hq["quotient"], n=n, seed=seed,
                         flag="floored" if hq["floored"] else ""),
                ]
                lb = reg.local_boundedness_ratio(u, profile, exps, center,
                                                 config.radius, config.gamma)
                rows += [
                    _row("lb_ratio", lb["ratio"], n=n, seed=seed),
                    _row("lambda_region", lb["lambda_region"], n=n, seed=seed),
                    _row("lb_predicted", lb["predicted_scale"], n=n, seed=seed),
                    _row("lb_normalized", lb["normalized"], n=n, seed=seed),
                ]
                wh = reg.weak_harnack_ratio(u, exps, center, config.radius,
                                            config.gamma)
                rows.append(_row("weak_harnack_ratio", wh["ratio"], n=n,
                                 seed=seed,
                                 flag="floored" if wh["floored"] else ""))
                eta = reg.radial_ramp(mesh, config.rho, config.sigma)
                cac = reg.caccioppoli_check(u, profile, eta)
                rows += [
                    _row("caccioppoli_lhs", cac["lhs"], n=n, seed=seed),
                    _row("caccioppoli_bound", cac["bound"], n=n, seed=seed,
                         flag=_pass(cac["passed"])),
                ]
                mp = reg.max_principle_check(u, center, config.radius)
                rows.append(_row("max_principle_sup", mp["sup_ball"], n=n,
                                 seed=seed, flag=_pass(mp["passed"])))
                osc = reg.oscillation_decay(u, center, config.radius)
                rows.append(_row("osc_slope", osc["slope"], n=n, seed=seed))
                return rows

            jobs.append(((n, 0, seed), {"n": n, "seed": seed}, job))
    return jobs


def _jobs_bound2d(config, out_dir, seed_offset):
    del out_dir
    if config.d != 2:
        raise ConfigError("[experiment] d: bound2d requires d = 2")
    jobs = []
    center = np.zeros(2)
    for n in config.ns:
        for seed in config.seeds:
            def job(n=n, seed=seed):
                field, _, u = _solve_once(config, n, seed + seed_offset)
                profile = profile_of_field(field)
                b2 = reg.bound_2d_check(u, profile, field, center, config.radius)
                return [
                    _row("bound2d_lhs", b2["lhs"], n=n, seed=seed),
                    _row("bound2d_rhs", b2["rhs"], n=n, seed=seed),
                    _row("bound2d_c_emp", b2["c_emp"], n=n, seed=seed),
                    _row("lambda_inv_mean", b2["lambda_inv_mean"], n=n, seed=seed),
                ]

            jobs.append(((n, 0, seed), {"n": n, "seed": seed}, job))
    return jobs


def _jobs_corrector(config, out_dir, seed_offset):
    if config.field.kind != "random":
        raise ConfigError("[field] kind: corrector campaigns use random fields")
    jobs = []
    L_max, seed0 = max(config.sizes), config.seeds[0]
    fc = config.field
    for L in config.sizes:
        for seed in config.seeds:
            def job(L=L, seed=seed):
                spec = FieldSpec(d=config.d, n=L, p0=fc.p0, q0=fc.q0,
                                 block=fc.block,
                                 seed=fc.seed + seed + seed_offset, box=float(L))
                field = sample_random(spec, mode="torus")
                mesh = Mesh(config.d, L, float(L), "torus")
                phi = solve_corrector(field, mesh, config.direction)
                stats = hom.corrector_stats(phi, float(L))
                i = config.direction
                rows = [
                    _row(f"linf_e{i}", stats["linf"], L=L, seed=seed),
                    _row(f"l1_e{i}", stats["l1"], L=L, seed=seed),
                    _row("residual", phi.residual, L=L, seed=seed),
                    _row("iterations", phi.meta["iterations"], L=L, seed=seed),
                ]
                if L == L_max and seed == seed0:
                    flux = hom.flux_average(phi, field, i)
                    rows += [_row(f"a_eff_{j}{i}", flux[j], L=L, seed=seed)
                             for j in range(config.d)]
                    eb = hom.energy_bound_check(phi, field, spec, i)
                    rows += [
                        _row("energy_window_max", eb["largest"], L=L, seed=seed,
                             flag=_pass(eb["passed"])),
                        _row("e_mu", eb["e_mu"], L=L, seed=seed),
                    ]
                    exps = derive_exponents(config.d, config.p, config.q)
                    if exps.delta > 0 and not is_inf(exps.p_prime):
                        aud = hom.two_scale_audit(phi, field, exps, L / 4.0,
                                                  config.rho)
                        rows += [
                            _row("audit_lhs", aud["lhs"], L=L, seed=seed),
                            _row("audit_rhs", aud["rhs"], L=L, seed=seed),
                            _row("audit_c_emp", aud["c_emp"], L=L, seed=seed),
                            _row("audit_lambda_sup", aud["lambda_sup"], L=L,
                                 seed=seed),
                        ]
                    else:
                        rows.append(_row("audit_c_emp", math.nan, L=L,
                                         seed=seed, flag="skipped:delta<=0"))
                    stem = os.path.join(out_dir, f"corrector_L{L}_seed{seed}")
                    write_field(field, stem + ".dhf")
                    write_solution(phi, stem + ".dhs")
                return rows

            jobs.append(((L, L, seed), {"L": L, "seed": seed}, job))
    return jobs


def _jobs_sweep(config, out_dir, seed_offset):
    del out_dir, seed_offset
    jobs = []
    for k, alpha in enumerate(config.alphas):
        def job(alpha=alpha):
            table = reg.sharpness_sweep([alpha], config.ns, config.d,
                                        config.box,
                                        BOUNDARIES[config.boundary])
            tag = f"alpha={_fmt(float(alpha))}"
            rows = []
            for entry in table:
                if entry["n"]:
                    rows.append(_row(f"sup({tag})", entry["sup"],
                                     n=entry["n"], flag=entry["status"]))
                else:
                    rows.append(_row(f"verdict({tag})", entry["status"]))
            return rows

        jobs.append(((k, 0, 0), {}, job))
    return jobs


_JOB_BUILDERS = {
    "exponents": _jobs_exponents,
    "solve": _jobs_solve,
    "cutoff": _jobs_cutoff,
    "harnack": _jobs_harnack,
    "bound2d": _jobs_bound2d,
    "corrector": _jobs_corrector,
    "sweep": _jobs_sweep,
}


# ---------------------------------------------------------------------------
# campaign driver


def _resolve_out(config: ExperimentConfig, out_dir) -> str:
    if out_dir:
        return out_dir
    if config.out:
        return config.out
    root = os.environ.get("DHL_OUT")
    if root:
        return os.path.join(root, config.kind)
    raise ConfigError("no output directory: pass --out, set [experiment] out, "
                      "or export DHL_OUT")


def _write_csv(path: str, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    writer.writerows(rows)
    _atomic_write(path, buf.getvalue().encode())


def write_manifest(out_dir: str, kind: str, digest: str, failures: int) -> None:
    """List every file in out_dir (except the manifest itself) with digests."""
    files = []
    for name in sorted(os.listdir(out_dir)):
        path = os.path.join(out_dir, name)
        if name == "manifest.json" or not os.path.isfile(path):
            continue
        with open(path, "rb") as fh:
            blob = fh.read()
        files.append({"path": name, "sha256": hashlib.sha256(blob).hexdigest(),
                      "bytes": len(blob)})
    payload = {"kind": kind, "config_digest": digest, "version": __version__,
               "failures": failures, "files": files}
    _atomic_write(os.path.join(out_dir, "manifest.json"),
                  (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())


def run(config: ExperimentConfig, out_dir: str = None, threads: int = None,
        seed_offset: int = 0) -> int:
    """Execute one campaign; returns the process exit code (0 or 2)."""
    config = validate_config(config)
    if not config.kind:
        raise ConfigError("[experiment] kind: missing")
    out = _resolve_out(config, out_dir)
    os.makedirs(out, exist_ok=True)
    digest = config_digest(config)
    jobs = _JOB_BUILDERS[config.kind](config, out, seed_offset)
    nthreads = threads if threads else config.threads

    def call(item):
        key, meta, fn = item
        try:
            return key, meta, fn(), None
        except Exception as err:          # job isolation: record, keep going
            return key, meta, None, err

    results = {}
    with ThreadPoolExecutor(max_workers=nthreads) as pool:
        for key, meta, rows, err in pool.map(call, jobs):
            results[key] = (meta, rows, err)

    failures = 0
    merged = []
    p_s, q_s = _fmt(float(config.p)), _fmt(float(config.q))
    for key in sorted(results):
        meta, rows, err = results[key]
        if err is not None:
            failures += 1
            rows = [_row("error", f"{type(err).__name__}: {err}", flag="error",
                         n=meta.get("n", ""), L=meta.get("L", ""),
                         seed=meta.get("seed", ""))]
        for row in rows:
            merged.append((config.kind, digest, str(config.d), p_s, q_s,
                           row["n"], row["L"], row["seed"], row["key"],
                           row["value"], row["flag"]))

    _write_csv(os.path.join(out, f"{config.kind}.csv"), merged)
    _atomic_write(os.path.join(out, "config.txt"), emit_config(config).encode())
    write_manifest(out, config.kind, digest, failures)
    return 0 if failures == 0 else 2


# ---------------------------------------------------------------------------
# plot-script emission


_PLOT_HEADER = """\
#!/usr/bin/env python3
# Auto-generated, self-contained plot script; reads its CSV from the same
# directory and writes a PNG next to it.
import csv
import math
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))


def load(name):
    with open(os.path.join(HERE, name), newline="") as fh:
        return list(csv.DictReader(fh))
"""

_SUBLINEARITY_BODY = """
rows = [r for r in load("corrector.csv") if r["key"] == "linf_e{i}"]
by_seed = {{}}
for r in rows:
    by_seed.setdefault(r["seed"], []).append((int(r["L"]), float(r["value"])))
fig, ax = plt.subplots()
for seed, pts in sorted(by_seed.items()):
    pts.sort()
    ax.loglog([p[0] for p in pts], [p[1] for p in pts], "o-",
              label=f"seed {{seed}}")
ax.set_xlabel("L")
ax.set_ylabel("L^-1 sup |phi|")
ax.set_title("corrector sublinearity, direction e_{i}")
ax.legend()
fig.savefig(os.path.join(HERE, "sublinearity_e{i}.png"), dpi=150)
"""

_SCATTER_BODY = """
rows = load("harnack.csv")
pairs = {}
for r in rows:
    if r["key"] in ("lb_ratio", "lambda_region"):
        pairs.setdefault((r["n"], r["seed"]), {})[r["key"]] = float(r["value"])
xs, ys = [], []
for vals in pairs.values():
    if "lb_ratio" in vals and "lambda_region" in vals:
        if math.isfinite(vals["lambda_region"]) and math.isfinite(vals["lb_ratio"]):
            xs.append(vals["lambda_region"])
            ys.append(vals["lb_ratio"])
fig, ax = plt.subplots()
ax.loglog(xs, ys, "o")
ax.set_xlabel("Lambda(B_R)")
ax.set_ylabel("measured sup / mean ratio")
ax.set_title("local boundedness constant vs conditioning")
fig.savefig(os.path.join(HERE, "cemp_vs_lambda.png"), dpi=150)
"""

_HEATMAP_BODY = """
import re
rows = [r for r in load("sweep.csv") if r["key"].startswith("sup(")]
alphas, ns = sorted({float(re.search(r"alpha=([^)]+)", r["key"]).group(1))
                     for r in rows}), sorted({int(r["n"]) for r in rows})
grid = [[float("nan")] * len(ns) for _ in alphas]
for r in rows:
    a = float(re.search(r"alpha=([^)]+)", r["key"]).group(1))
    grid[alphas.index(a)][ns.index(int(r["n"]))] = float(r["value"])
fig, ax = plt.subplots()
im = ax.imshow(grid, aspect="auto", origin="lower")
ax.set_xticks(range(len(ns)), [str(n) for n in ns])
ax.set_yticks(range(len(alphas)), [f"{a:g}" for a in alphas])
ax.set_xlabel("mesh n")
ax.set_ylabel("alpha")
ax.set_title("sharpness sweep: sup |u_h|")
fig.colorbar(im, ax=ax)
fig.savefig(os.path.join(HERE, "sweep_heatmap.png"), dpi=150)
"""


def emit_plots(out_dir: str) -> list:
    """Write standalone plot scripts for the CSVs present in out_dir.

    Returns the list of script paths written (empty when nothing to plot).
    The manifest, if any, is refreshed to keep it complete.
    """
    if not os.path.isdir(out_dir):
        raise ConfigError(f"missing report directory {out_dir!r}")
    written = []

    def emit(name, body):
        path = os.path.join(out_dir, name)
        _atomic_write(path, (_PLOT_HEADER + body).encode())
        written.append(path)

    corr = os.path.join(out_dir, "corrector.csv")
    if os.path.isfile(corr):
        with open(corr, newline="") as fh:
            keys = {row["key"] for row in csv.DictReader(fh)}
        for i in sorted({int(m.group(1)) for k in keys
                         for m in [re.match(r"linf_e(\d+)$", k)] if m}):
            emit(f"plot_sublinearity_e{i}.py", _SUBLINEARITY_BODY.format(i=i))
    if os.path.isfile(os.path.join(out_dir, "harnack.csv")):
        emit("plot_cemp_vs_lambda.py", _SCATTER_BODY)
    if os.path.isfile(os.path.join(out_dir, "sweep.csv")):
        emit("plot_sweep_heatmap.py", _HEATMAP_BODY)

    manifest = os.path.join(out_dir, "manifest.json")
    if written and os.path.isfile(manifest):
        with open(manifest) as fh:
            old = json.load(fh)
        write_manifest(out_dir, old.get("kind", ""), old.get("config_digest", ""),
                       old.get("failures", 0))
    return written


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dhlab",
        description="Batch campaigns for degenerate-elliptic regularity and "
                    "corrector experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        sp_ = sub.add_parser(kind, help=f"run a {kind} campaign")
        sp_.add_argument("--config", required=True, help="config file path")
        sp_.add_argument("--out", default=None, help="output directory")
        sp_.add_argument("--threads", type=int, default=None,
                         help="worker threads (default: config)")
        sp_.add_argument("--seed-offset", type=int, default=0,
                         help="added to every job seed")
    plots = sub.add_parser("plots", help="emit plot scripts for existing reports")
    plots.add_argument("--out", default=None, help="report directory")
    args = parser.parse_args(argv)

    try:
        if args.command == "plots":
            out = args.out or os.environ.get("DHL_OUT")
            if not out:
                raise ConfigError("no report directory: pass --out or export DHL_OUT")
            emit_plots(out)
            return 0
        with open(args.config) as fh:
            text = fh.read()
        config = parse_config(text)
        if config.kind and config.kind != args.command:
            raise ConfigError(f"config kind {config.kind!r} does not match "
                              f"subcommand {args.command!r}")
        if not config.kind:
            config = validate_config(replace(config, kind=args.command))
        return run(config, out_dir=args.out, threads=args.threads,
                   seed_offset=args.seed_offset)
    except (ConfigError, OSError) as err:
        print(f"dhlab: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
