"""Command-line entry point: ``randquant {design,sweep,correlate,whiteness}``.

Every subcommand reads an optional TOML config and writes CSV to ``--out``
(or the config's ``out``).  Command-line flags override config values.

Exit status is 0 on success, 2 for a usage or config error and 3 when some
design did not converge (results are still written).
"""

from __future__ import annotations

import argparse
import logging
import math
import re
import sys
from dataclasses import fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from randquant import harness
from randquant.design import DesignConfig, save_design
from randquant.errors import InvalidArgument
from randquant.lloyd import save_quantizer
from randquant.source import (
    BivariateGaussianSpec,
    load_density_csv,
    make_truncated_gaussian,
    make_uniform,
)

EXIT_OK, EXIT_CONFIG, EXIT_UNCONVERGED = 0, 2, 3

log = logging.getLogger("randquant")

TOP_KEYS = {"seed", "out", "jobs", "source", "config", "design", "sweep", "correlate", "whiteness"}
SECTION_KEYS = {
    "source": {"kind", "variance", "half_width", "n_points", "path"},
    "config": {f.name for f in fields(DesignConfig)} - {"seed"},
    "design": {"family", "rate", "rate_mode"},
    "sweep": {"rate_mode", "rate_points", "families", "rate_tol", "bundles"},
    "correlate": {"rho", "rate", "rate_mode", "families", "n_samples", "variance",
                  "truncation"},
    "whiteness": {"family", "rate", "rate_mode", "n_samples", "bundle"},
}


class ConfigError(Exception):
    """A config problem, reported as ``file:line: message``."""


# --------------------------------------------------------------------------
# config file handling


def _key_line(text: str, section: str | None, key: str) -> int | None:
    """Line number where ``key`` is assigned inside ``[section]`` (1-based)."""
    current = None
    pattern = re.compile(rf"^\s*(\"?){re.escape(key)}\1\s*=")
    for lineno, line in enumerate(text.splitlines(), start=1):
        header = re.match(r"^\s*\[\[?\s*([^\]]+?)\s*\]\]?", line)
        if header:
            current = header.group(1).split(".")[0]
            if current == section and key == section:
                return lineno
            continue
        if current == section and pattern.match(line):
            return lineno
    return None


class Config:
    """Parsed TOML plus the source text for line-numbered errors."""

    def __init__(self, path: str | None):
        self.path = path or "<defaults>"
        self.text = ""
        self.data: dict = {}
        if path is None:
            return
        try:
            self.text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
        try:
            self.data = tomllib.loads(self.text)
        except tomllib.TOMLDecodeError as exc:
            line = re.search(r"line (\d+)", str(exc))
            where = f"{path}:{line.group(1)}" if line else path
            raise ConfigError(f"{where}: {exc}") from None
        self._check_keys()

    def error(self, section: str | None, key: str, message: str) -> ConfigError:
        line = _key_line(self.text, section, key) if self.text else None
        where = f"{self.path}:{line}" if line else self.path
        return ConfigError(f"{where}: {message}")

    def _check_keys(self):
        for key, value in self.data.items():
            if key not in TOP_KEYS:
                raise self.error(None, key, f"unknown key '{key}'")
            if key in SECTION_KEYS:
                if not isinstance(value, dict):
                    raise self.error(None, key, f"'{key}' must be a table")
                for sub in value:
                    if sub not in SECTION_KEYS[key]:
                        raise self.error(key, sub, f"unknown key '{sub}' in [{key}]")

    def get(self, section: str | None, key: str, default=None, kind=None):
        table = self.data if section is None else self.data.get(section, {})
        if key not in table:
            return default
        value = table[key]
        if kind is not None:
            ok = isinstance(value, kind) and not (kind is not bool and isinstance(value, bool))
            if kind is float:
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
                value = float(value) if ok else value
            if not ok:
                where = f"[{section}] " if section else ""
                raise self.error(section, key, f"{where}'{key}' must be {kind.__name__}, "
                                               f"got {type(value).__name__}")
        return value


# --------------------------------------------------------------------------
# value parsing


def parse_rate(token) -> float:
    """A rate in bits; ``log2(M)`` is accepted for fixed-rate level counts."""
    if isinstance(token, (int, float)) and not isinstance(token, bool):
        return float(token)
    text = str(token).strip()
    m = re.fullmatch(r"log2\(\s*(\d+)\s*\)", text)
    if m:
        return math.log2(int(m.group(1)))
    try:
        return float(text)
    except ValueError:
        raise InvalidArgument(f"cannot read rate {text!r}") from None


def parse_rates(text) -> tuple:
    items = text if isinstance(text, list) else str(text).split(",")
    return tuple(parse_rate(t) for t in items if str(t).strip())


def parse_rho(text) -> tuple:
    """Comma list or inclusive ``start:step:stop`` range."""
    if isinstance(text, list):
        return tuple(float(v) for v in text)
    text = str(text).strip()
    if ":" in text:
        try:
            start, step, stop = (float(v) for v in text.split(":"))
        except ValueError:
            raise InvalidArgument(f"rho range must be start:step:stop, got {text!r}") from None
        if step <= 0 or stop < start:
            raise InvalidArgument(f"bad rho range {text!r}")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return tuple(round(start + i * step, 12) for i in range(n))
    return tuple(float(v) for v in text.split(",") if v.strip())


def _families(value, cfg: Config, section: str):
    if value is None:
        return harness.FAMILIES
    items = value.split(",") if isinstance(value, str) else value
    out = tuple(str(v).strip() for v in items)
    bad = [f for f in out if f not in harness.FAMILIES]
    if bad:
        raise cfg.error(section, "families", f"unknown families {bad}; choose from "
                                             f"{', '.join(harness.FAMILIES)}")
    return out


# --------------------------------------------------------------------------
# building objects from config + flags


def build_source(cfg: Config):
    kind = cfg.get("source", "kind", "truncated-gaussian", str)
    n_points = cfg.get("source", "n_points", 2001, int)
    if kind == "truncated-gaussian":
        return make_truncated_gaussian(cfg.get("source", "variance", 1.0, float),
                                       cfg.get("source", "half_width", 3.0, float), n_points)
    if kind == "uniform":
        return make_uniform(cfg.get("source", "half_width", 0.5, float), n_points)
    if kind == "csv":
        path = cfg.get("source", "path", None, str)
        if path is None:
            raise cfg.error("source", "kind", "[source] kind 'csv' needs a 'path'")
        return load_density_csv(Path(cfg.path).parent / path if cfg.text else path)
    raise cfg.error("source", "kind", f"unknown source kind '{kind}'")


def build_design_config(cfg: Config, seed: int) -> DesignConfig:
    kwargs = {}
    types = {f.name: f.type for f in fields(DesignConfig)}
    for key in cfg.data.get("config", {}):
        kind = {"float": float, "int": int, "bool": bool, "tuple": list}[str(types[key])]
        value = cfg.get("config", key, None, kind)
        kwargs[key] = tuple(float(v) for v in value) if kind is list else value
    try:
        return DesignConfig(seed=seed, **kwargs)
    except InvalidArgument as exc:
        raise cfg.error("config", next(iter(kwargs), "config"), str(exc)) from None


def _seed(args, cfg):
    return args.seed if args.seed is not None else cfg.get(None, "seed", 0, int)


def _out(args, cfg, default):
    return Path(args.out or cfg.get(None, "out", default, str))


def _mode(args, cfg, section):
    mode = args.mode or cfg.get(section, "rate_mode", None, str)
    if mode not in ("fixed", "variable"):
        raise cfg.error(section, "rate_mode", f"rate mode must be 'fixed' or 'variable', got {mode!r}")
    return mode


# --------------------------------------------------------------------------
# subcommands


def cmd_design(args, cfg: Config) -> int:
    seed = _seed(args, cfg)
    source = build_source(cfg)
    family = args.family or cfg.get("design", "family", harness.RANDOMIZED, str)
    if family not in harness.FAMILIES:
        raise cfg.error("design", "family", f"unknown family '{family}'")
    if family == harness.CONVENTIONAL:
        raise cfg.error("design", "family", "the conventional quantizer has no design bundle")
    rate = parse_rate(args.rate if args.rate is not None else cfg.get("design", "rate", 1.0))
    mode = _mode(args, cfg, "design")
    q = harness.design_family(family, source, mode, rate, build_design_config(cfg, seed))
    out = _out(args, cfg, "design.csv")
    if family in (harness.RANDOMIZED, harness.CONSTRAINED_RANDOMIZED):
        save_design(q.payload, out)
    else:
        save_quantizer(q.payload, out)
    print(f"{family}: rate {harness.format_real(q.rate)} bits, "
          f"SNR {harness.format_real(q.row(source).snr_db)} dB -> {out}")
    return EXIT_OK if q.converged else EXIT_UNCONVERGED


def cmd_sweep(args, cfg: Config) -> int:
    seed = _seed(args, cfg)
    mode = _mode(args, cfg, "sweep")
    raw = args.rates if args.rates is not None else cfg.get("sweep", "rate_points", None)
    if raw is None:
        raise cfg.error("sweep", "rate_points", "no rate points given (--rates or [sweep] rate_points)")
    bundles = []
    for entry in cfg.get("sweep", "bundles", [], list):
        try:
            path = Path(entry["path"])
            bundles.append((entry["family"], parse_rate(entry["rate"]),
                            str(Path(cfg.path).parent / path if cfg.text else path)))
        except (KeyError, TypeError):
            raise cfg.error("sweep", "bundles", "each bundle needs family, rate and path") from None
    spec = harness.SweepSpec(
        rate_mode=mode,
        rate_points=parse_rates(raw),
        families=_families(args.families or cfg.get("sweep", "families"), cfg, "sweep"),
        source=build_source(cfg),
        config=build_design_config(cfg, seed),
        seed=seed,
        rate_tol=cfg.get("sweep", "rate_tol", 1e-5, float),
        jobs=args.jobs or cfg.get(None, "jobs", 1, int),
        bundles=tuple(bundles),
    )
    rows = harness.snr_sweep(spec)
    out = _out(args, cfg, "sweep.csv")
    harness.write_csv(out, harness.SWEEP_HEADER, harness.sweep_table(rows))
    return EXIT_OK if all(r.converged for r in rows) else EXIT_UNCONVERGED


def cmd_correlate(args, cfg: Config) -> int:
    seed = _seed(args, cfg)
    mode = _mode(args, cfg, "correlate")
    rhos = parse_rho(args.rho if args.rho is not None else cfg.get("correlate", "rho", "0.3,0.6,0.9"))
    rate = parse_rate(args.rate if args.rate is not None else cfg.get("correlate", "rate", 1.4))
    n = args.samples or cfg.get("correlate", "n_samples", 1_000_000, int)
    variance = cfg.get("correlate", "variance", 1.0, float)
    truncation = cfg.get("correlate", "truncation", 3.0, float)
    families = _families(args.families or cfg.get("correlate", "families"), cfg, "correlate")
    config = build_design_config(cfg, seed)
    source = harness.marginal_source(BivariateGaussianSpec(0.0, variance, truncation))
    rows = []
    converged = True
    for family in families:
        q = harness.design_family(family, source, mode, rate, config)
        converged &= q.converged
        for rho in rhos:
            spec = BivariateGaussianSpec(rho, variance, truncation)
            corr = harness.correlation_experiment(spec, family, rate, n, seed, quantizer=q)
            rows.append((family, rho, q.rate, corr, n))
    rows.sort(key=lambda r: (r[0], r[1]))
    harness.write_csv(_out(args, cfg, "correlate.csv"), harness.CORRELATION_HEADER, rows)
    return EXIT_OK if converged else EXIT_UNCONVERGED


WHITENESS_HEADER = ("family", "rate_bits", "err_src_corr", "error_mean", "error_variance",
                    "bin", "bin_lower", "bin_upper", "fraction")


def cmd_whiteness(args, cfg: Config) -> int:
    seed = _seed(args, cfg)
    source = build_source(cfg)
    family = args.family or cfg.get("whiteness", "family", harness.CONVENTIONAL, str)
    if family not in harness.FAMILIES:
        raise cfg.error("whiteness", "family", f"unknown family '{family}'")
    n = args.samples or cfg.get("whiteness", "n_samples", 1_000_000, int)
    bundle = args.bundle or cfg.get("whiteness", "bundle", None, str)
    if bundle is not None:
        q = harness.load_bundle(bundle, source, family)
    else:
        mode = _mode(args, cfg, "whiteness")
        rate = parse_rate(args.rate if args.rate is not None else cfg.get("whiteness", "rate", 1.4))
        q = harness.design_family(family, source, mode, rate, build_design_config(cfg, seed))
    rep = harness.whiteness_report(q, source, n, seed)
    rows = [(family, q.rate, rep.error_source_correlation, rep.error_mean, rep.error_variance,
             i, rep.bin_edges[i], rep.bin_edges[i + 1], frac)
            for i, frac in enumerate(rep.histogram)]
    harness.write_csv(_out(args, cfg, "whiteness.csv"), WHITENESS_HEADER, rows)
    return EXIT_OK if q.converged else EXIT_UNCONVERGED


# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output CSV path")
    common.add_argument("--mode", choices=("fixed", "variable"), help="rate mode")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="randquant", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("design", parents=[common], help="design one quantizer and save it")
    p.add_argument("--family")
    p.add_argument("--rate", help="target rate in bits (log2(M) accepted)")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("sweep", parents=[common], help="SNR versus rate for every family")
    p.add_argument("--rates", help="comma-separated target rates")
    p.add_argument("--families", help="comma-separated family names")
    p.add_argument("--jobs", type=int, help="worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("correlate", parents=[common], help="bivariate error correlation")
    p.add_argument("--rho", help="comma list or start:step:stop")
    p.add_argument("--rate")
    p.add_argument("--samples", type=int)
    p.add_argument("--families")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("whiteness", parents=[common], help="error statistics of one design")
    p.add_argument("--family")
    p.add_argument("--rate")
    p.add_argument("--samples", type=int)
    p.add_argument("--bundle", help="saved design to load instead of designing")
    p.set_defaults(func=cmd_whiteness)
    return parser


def run_cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = Config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidArgument as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run_cli())
