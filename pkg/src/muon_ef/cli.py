"""Operator surface: TOML config parsing, subcommands, and metric emission.

Subcommands
-----------
run      execute one configured run; writes metrics.csv + summary.json
sweep    one run per value of a config axis ([sweep] section)
verify   run oracle suites (identities | compressors | convergence | all)
account  print per-compressor relative communication cost, no optimization

Config file: TOML with sections [model] [objective] [optimizer] [compressors]
[harness] [output] (plus [sweep] / [account] for those subcommands). Unknown
keys are hard errors naming the key. Every key has a default; the parsed
config is echoed back in canonical form next to the outputs for provenance.

Exit codes: 0 success, 2 config error, 3 runtime error, 4 failed verification.
Env: MUON_EF_THREADS caps sweep parallelism.

CSV schema (fixed column order, 17 significant digits, round-trip exact):
    round, f, grad_dual_norm, lyapunov, uplink_bits_cum, downlink_bits_cum,
    grad_layer_<i> for each layer.
JSON summary: terminal RunResult fields plus the seeds that produced them.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .compressors import compressor_from_string, relative_cost
from .errors import ConfigError, MuonEfError
from .harness import RunConfig, RunResult, run, sweep

__all__ = ["main", "load_config", "apply_overrides", "build_run_config", "canonical_echo"]


# ---------------------------------------------------------------------------
# Schema: section -> key -> (config field, default). The RunConfig defaults are
# authoritative; the table only maps names and documents placement.
# ---------------------------------------------------------------------------

_SCHEMA = {
    "model": {
        "shapes": "shapes",
        "norms": "norms",
        "init": "init",
        "init_scale": "init_scale",
    },
    "objective": {
        "kind": "objective",
        "workers": "workers",
        "heterogeneity": "heterogeneity",
        "conditioning": "conditioning",
        "noise_sigma": "noise_sigma",
        "seed": "objective_seed",
        "dataset_size": "dataset_size",
        "dataset_noise": "dataset_noise",
        "batch_size": "batch_size",
    },
    "optimizer": {
        "variant": "variant",
        "schedule": "schedule",
        "source": "source",
        "radius": "radius",
        "stepsize": "stepsize",
        "beta": "beta",
        "eta": "eta",
        "uniform_stepsize": "uniform_stepsize",
        "momentum_source": "momentum_source",
        "g0_policy": "g0_policy",
        "spectral_backend": "spectral_backend",
        "ns_iterations": "ns_iterations",
        "ns_coefficients": "ns_coefficients",
        "smoothness": "smoothness",
    },
    "compressors": {
        "server": "server_compressor",
        "worker": "worker_compressor",
        "value_bits": "value_bits",
        "alpha_d": "alpha_d",
        "alpha_p": "alpha_p",
        "alpha_trials": "alpha_trials",
        "alpha_samples": "alpha_samples",
    },
    "harness": {
        "rounds": "rounds",
        "master_seed": "master_seed",
        "metric_cadence": "metric_cadence",
        "record_lyapunov": "record_lyapunov",
        "grad_thresholds": "grad_thresholds",
        "track_alpha": "track_alpha",
        "message_log": "message_log",
        "sweep_seed_policy": "sweep_seed_policy",
    },
    "output": {"dir": None},
    "sweep": {"axis": None, "values": None},
    "account": {"shapes": None, "compressors": None, "value_bits": None},
}

_TUPLE_FIELDS = {"noise_sigma", "radius", "stepsize", "beta", "grad_thresholds", "ns_coefficients"}


def load_config(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc
    for section, table in doc.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(table, dict):
            raise ConfigError(f"section [{section}] must be a table")
        for key in table:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key `{section}.{key}`")
    return doc


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """--set section.key=value; the value is parsed as a TOML literal, falling
    back to a bare string (so compressor specs need no quoting)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if "." not in key:
            raise ConfigError(f"override key must be section.key, got {key!r}")
        section, name = key.split(".", 1)
        if section not in _SCHEMA or name not in _SCHEMA[section]:
            raise ConfigError(f"unknown config key `{key}`")
        try:
            parsed = tomllib.loads(f"v = {value}")["v"]
        except tomllib.TOMLDecodeError:
            parsed = value
        doc.setdefault(section, {})[name] = parsed
    return doc


def build_run_config(doc: dict) -> RunConfig:
    kwargs = {}
    for section, keys in _SCHEMA.items():
        if section in ("output", "sweep", "account"):
            continue
        table = doc.get(section, {})
        for key, field_name in keys.items():
            if key not in table:
                continue
            value = table[key]
            if field_name == "shapes":
                value = tuple(tuple(int(v) for v in row) for row in value)
            elif field_name == "norms":
                value = tuple(value) if isinstance(value, list) else (str(value),)
            elif field_name in _TUPLE_FIELDS:
                value = tuple(value) if isinstance(value, list) else (value,)
            elif field_name in ("alpha_d", "alpha_p"):
                value = str(value)
            kwargs[field_name] = value
    if "shapes" not in kwargs:
        raise ConfigError("missing required key `model.shapes`")
    if "norms" not in kwargs:
        raise ConfigError("missing required key `model.norms`")
    if len(kwargs["norms"]) == 1 and len(kwargs["shapes"]) > 1:
        kwargs["norms"] = tuple(kwargs["norms"][0] for _ in kwargs["shapes"])
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _toml_literal(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_literal(v) for v in value) + "]"
    raise ConfigError(f"cannot render value {value!r}")


def canonical_echo(cfg: RunConfig) -> str:
    """Canonical TOML text for a resolved run config; re-parses identically."""
    lines = []
    for section, keys in _SCHEMA.items():
        if section in ("output", "sweep", "account"):
            continue
        lines.append(f"[{section}]")
        for key, field_name in keys.items():
            value = getattr(cfg, field_name)
            if field_name == "shapes":
                value = [list(s) for s in value]
            elif isinstance(value, tuple):
                value = list(value)
            lines.append(f"{key} = {_toml_literal(value)}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Metric emission
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_metrics_csv(result: RunResult, path: str) -> None:
    layers = len(result.records[0].grad_layers)
    header = ["round", "f", "grad_dual_norm", "lyapunov", "uplink_bits_cum", "downlink_bits_cum"]
    header += [f"grad_layer_{i}" for i in range(layers)]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for rec in result.records:
            row = [
                str(rec.k), _fmt(rec.f), _fmt(rec.grad_agg), _fmt(rec.lyapunov),
                str(rec.uplink_cum), str(rec.downlink_cum),
            ]
            row += [_fmt(v) for v in rec.grad_layers]
            fh.write(",".join(row) + "\n")


def read_metrics_csv(path: str) -> list[dict]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = []
        for line in fh:
            parts = line.strip().split(",")
            rows.append({k: float(v) for k, v in zip(header, parts)})
    return rows


def write_summary_json(result: RunResult, cfg: RunConfig, path: str, extra=None) -> None:
    payload = result.to_summary_dict()
    payload["min_alpha_observed"] = result.ledger.min_alpha
    payload["config"] = {"master_seed": cfg.master_seed, "objective_seed": cfg.objective_seed}
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, allow_nan=True)
        fh.write("\n")


def write_message_log(result: RunResult, path: str) -> None:
    """Length-prefixed canonical message bytes, for replay and ledger audits."""
    with open(path, "wb") as fh:
        for k, broadcast, uplinks in result.messages:
            for raw in broadcast:
                fh.write(len(raw).to_bytes(4, "little"))
                fh.write(raw)
            for worker_msgs in uplinks:
                for raw in worker_msgs:
                    fh.write(len(raw).to_bytes(4, "little"))
                    fh.write(raw)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    doc = apply_overrides(load_config(args.config), args.set or [])
    cfg = build_run_config(doc)
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, master_seed=args.seed)
    out_dir = args.out or doc.get("output", {}).get("dir", "out")
    os.makedirs(out_dir, exist_ok=True)
    try:
        setup = cfg.prepare()  # construction problems are config errors (exit 2)
    except MuonEfError as exc:
        raise ConfigError(str(exc)) from exc
    result = run(cfg, setup=setup)
    with open(os.path.join(out_dir, "config_echo.toml"), "w") as fh:
        fh.write(canonical_echo(cfg))
    write_metrics_csv(result, os.path.join(out_dir, "metrics.csv"))
    write_summary_json(result, cfg, os.path.join(out_dir, "summary.json"))
    if result.messages is not None:
        write_message_log(result, os.path.join(out_dir, "messages.bin"))
    print(f"run complete: {cfg.rounds} rounds, final grad {result.records[-1].grad_agg:.6g}, "
          f"uplink bits {result.ledger.cumulative_uplink}")
    return 0


def cmd_sweep(args) -> int:
    doc = apply_overrides(load_config(args.config), args.set or [])
    sweep_table = doc.get("sweep", {})
    if "axis" not in sweep_table or "values" not in sweep_table:
        raise ConfigError("sweep needs `sweep.axis` and `sweep.values`")
    cfg = build_run_config(doc)
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, master_seed=args.seed)
    axis = sweep_table["axis"]
    values = sweep_table["values"]
    if axis in ("shapes", "norms"):
        raise ConfigError(f"sweeping `{axis}` is not supported")
    coerced = []
    for v in values:
        if axis in _TUPLE_FIELDS:
            coerced.append(tuple(v) if isinstance(v, list) else (v,))
        else:
            coerced.append(v)
    out_dir = args.out or doc.get("output", {}).get("dir", "out")
    os.makedirs(out_dir, exist_ok=True)
    results = sweep(cfg, axis, coerced)
    summary = []
    for value, res in zip(values, results):
        tag = str(value).replace("/", "_").replace(" ", "")
        sub = os.path.join(out_dir, f"{axis}={tag}")
        os.makedirs(sub, exist_ok=True)
        write_metrics_csv(res, os.path.join(sub, "metrics.csv"))
        write_summary_json(res, cfg, os.path.join(sub, "summary.json"))
        summary.append({"value": value, **res.to_summary_dict()})
    with open(os.path.join(out_dir, "sweep_summary.json"), "w") as fh:
        json.dump({"axis": axis, "points": summary}, fh, indent=2)
        fh.write("\n")
    print(f"sweep complete: {len(results)} runs over `{axis}`")
    return 0


_TABLE7_COMPRESSORS = (
    "identity", "natural",
    "rankk(0.2)", "rankk(0.15)", "rankk(0.15)+natural",
    "rankk(0.1)", "rankk(0.1)+natural", "rankk(0.05)",
    "topk(0.2)", "topk(0.15)", "topk(0.15)+natural",
    "topk(0.1)", "topk(0.1)+natural", "topk(0.05)",
)


def cmd_account(args) -> int:
    doc = apply_overrides(load_config(args.config), args.set or [])
    account = doc.get("account", {})
    shapes = account.get("shapes") or doc.get("model", {}).get("shapes")
    if not shapes:
        raise ConfigError("account needs `account.shapes` or `model.shapes`")
    shapes = [tuple(int(v) for v in row) for row in shapes]
    specs = account.get("compressors", list(_TABLE7_COMPRESSORS))
    value_bits = account.get("value_bits", doc.get("compressors", {}).get("value_bits", 32))
    rows = []
    for spec in specs:
        kind = compressor_from_string(spec)
        rows.append((spec, relative_cost(kind, shapes, value_bits)))
    width = max(len(s) for s, _ in rows)
    print(f"{'compressor':<{width}}  relative_cost")
    for spec, cost in rows:
        print(f"{spec:<{width}}  {cost:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "account.json"), "w") as fh:
            json.dump({s: c for s, c in rows}, fh, indent=2)
            fh.write("\n")
    return 0


def cmd_verify(args) -> int:
    from .verify import VERIFY_SUITES

    names = list(VERIFY_SUITES) if args.suite == "all" else [args.suite]
    rng = np.random.default_rng(args.seed if args.seed is not None else 2024)
    all_reports, extras = [], {}
    for name in names:
        reports, extra = VERIFY_SUITES[name](rng, inject=args.inject_fault)
        all_reports.extend(reports)
        extras.update(extra)
    failed = [r for r in all_reports if not r.passed]
    for rep in all_reports:
        mark = "PASS" if rep.passed else "FAIL"
        print(f"[{mark}] {rep.name}: worst={rep.worst:.3g} tol={rep.tolerance:.3g} "
              f"({rep.samples} samples)")
    payload = {
        "suites": names,
        "checks": [r.to_dict() for r in all_reports],
        "info": extras,
        "failed": len(failed),
    }
    out_dir = args.out or "out"
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "verify_report.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    print(f"{len(all_reports) - len(failed)}/{len(all_reports)} checks passed")
    return 4 if failed else 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="muon-ef", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="TOML config path")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config key (repeatable)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed override")

    p_run = sub.add_parser("run", help="execute one configured run")
    common(p_run)
    p_sweep = sub.add_parser("sweep", help="run a one-axis parameter sweep")
    common(p_sweep)
    p_account = sub.add_parser("account", help="print per-compressor relative cost")
    common(p_account)
    p_verify = sub.add_parser("verify", help="run verification suites")
    p_verify.add_argument("suite", choices=["identities", "compressors", "convergence", "all"])
    p_verify.add_argument("--inject-fault", default=None,
                          choices=["alpha-overclaim", "corrupt-gradient", "halved-smoothness"],
                          help="testing hook: deliberately break one check")
    common(p_verify, needs_config=False)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handlers = {"run": cmd_run, "sweep": cmd_sweep, "account": cmd_account, "verify": cmd_verify}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MuonEfError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
