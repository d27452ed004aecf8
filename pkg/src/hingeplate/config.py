"""Scenario configuration: sectioned ``key = value`` text with TOML value syntax.

The scanner is line based so that duplicate keys can be reported with both
line numbers; individual values are parsed as TOML values. All problems are
collected and raised together.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import copy
import hashlib
import json
import re

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

MODES = ("simulate", "observability", "hum", "local-control", "steer", "equilibria")

# section -> key -> (expected python types, default); a default of REQUIRED must be given
REQUIRED = object()
_NUM = (int, float)

SCHEMA: dict[str, dict[str, tuple]] = {
    "geometry": {
        "kind": ((str,), REQUIRED),
        "d": ((int,), 1),
        "N": ((int, list), REQUIRED),
        "beta": (_NUM, 0.0),
    },
    "nonlinearity": {
        "degree": ((int,), None),
        "coefficients": ((list,), []),
        "tag": ((str,), "general"),
        "R": (_NUM, 0.0),
        "alpha": (_NUM, 0.0),
    },
    "damping": {
        "boxes": ((list,), None),
        "gamma0": (_NUM, 1.0),
        "delta": (_NUM, 0.3),
        "enabled": ((bool,), True),
    },
    "run": {
        "mode": ((str,), None),
        "T": (_NUM, 1.0),
        "dt": (_NUM, 1e-2),
        "tol": (_NUM, 1e-10),
        "picard_tol": (_NUM, 1e-9),
        "max_iter": ((int,), 20),
        "seed": ((int,), 0),
        "data_norm": (_NUM, 1.0),
        "record_every": ((int,), 1),
        "T_values": ((list,), None),
        "gramian": ((str,), "plate"),
        "plate_mode": ((str,), "potential"),
        "potential": (_NUM, 0.0),
        "equilibrium": (_NUM, 0.0),
        "seeds": ((list,), None),
        "random_seeds": ((int,), 0),
        "start": (_NUM, None),
        "end": (_NUM, None),
        "radius_max": (_NUM, 0.1),
        "max_coast": (_NUM, None),
    },
    "output": {
        "directory": ((str,), "out"),
        "formats": ((list,), ["csv", "json"]),
    },
}

MODE_NEEDS = {
    "simulate": ("geometry",),
    "observability": ("geometry", "damping"),
    "hum": ("geometry", "damping"),
    "local-control": ("geometry", "damping"),
    "steer": ("geometry", "damping", "nonlinearity"),
    "equilibria": ("geometry", "nonlinearity"),
}


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class ScenarioConfig:
    sections: dict = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.sections.get(section, {}).get(key, SCHEMA[section][key][1])

    def has(self, section: str) -> bool:
        return section in self.sections

    @property
    def mode(self) -> str | None:
        return self.get("run", "mode")

    def to_dict(self) -> dict:
        out = {}
        for sec, keys in SCHEMA.items():
            if sec in self.sections:
                out[sec] = {k: self.get(sec, k) for k in keys}
        return out

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


_SECTION = re.compile(r"^\[([A-Za-z_][\w-]*)\]$")
_PAIR = re.compile(r"^([A-Za-z_][\w]*)\s*=\s*(.+)$")


def _parse_value(text: str):
    return tomllib.loads(f"v = {text}")["v"]


def _strip_comment(line: str) -> str:
    out, quote = [], None
    for ch in line:
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            break
        out.append(ch)
    return "".join(out).strip()


def parse_config(text: str, overrides: list[str] | None = None, mode: str | None = None) -> ScenarioConfig:
    """Parse and validate; raises ConfigError listing every problem found."""
    errors: list[str] = []
    sections: dict[str, dict] = {}
    seen: dict[tuple[str, str], int] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            current = m.group(1)
            if current not in SCHEMA:
                errors.append(f"line {lineno}: unknown section [{current}]")
            sections.setdefault(current, {})
            continue
        m = _PAIR.match(line)
        if not m:
            errors.append(f"line {lineno}: cannot parse {raw.strip()!r}")
            continue
        if current is None:
            errors.append(f"line {lineno}: key {m.group(1)!r} outside any section")
            continue
        key = m.group(1)
        if (current, key) in seen:
            errors.append(f"duplicate key {current}.{key} on lines {seen[(current, key)]} and {lineno}")
            continue
        seen[(current, key)] = lineno
        try:
            value = _parse_value(m.group(2))
        except tomllib.TOMLDecodeError as exc:
            errors.append(f"line {lineno}: bad value for {key}: {exc}")
            continue
        if current in SCHEMA and key not in SCHEMA[current]:
            errors.append(f"line {lineno}: unknown key {current}.{key}")
            continue
        sections[current][key] = value
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            errors.append(f"override {item!r} must look like section.key=value")
            continue
        path, text_value = item.split("=", 1)
        sec, key = path.strip().split(".", 1)
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            errors.append(f"override: unknown key {sec}.{key}")
            continue
        try:
            value = _parse_value(text_value.strip())
        except tomllib.TOMLDecodeError:
            value = text_value.strip()  # bare words are taken as strings
        sections.setdefault(sec, {})[key] = value
    if mode is not None:
        sections.setdefault("run", {})["mode"] = mode
    cfg = ScenarioConfig(sections)
    errors.extend(validate(cfg))
    if errors:
        raise ConfigError(errors)
    return cfg


def _typecheck(cfg: ScenarioConfig) -> list[str]:
    errors = []
    for sec, values in cfg.sections.items():
        if sec not in SCHEMA:
            continue
        for key, value in values.items():
            types, _ = SCHEMA[sec][key]
            if isinstance(value, bool) and bool not in types:
                errors.append(f"{sec}.{key} must be {'/'.join(t.__name__ for t in types)}, got bool")
            elif not isinstance(value, types):
                errors.append(f"{sec}.{key} must be {'/'.join(t.__name__ for t in types)}, got {type(value).__name__}")
    return errors


def validate(cfg: ScenarioConfig) -> list[str]:
    errors = _typecheck(cfg)
    if errors:
        return errors
    mode = cfg.mode
    if mode is None:
        errors.append("run.mode is required (or pass a subcommand)")
    elif mode not in MODES:
        errors.append(f"run.mode must be one of {MODES}, got {mode!r}")
    else:
        for sec in MODE_NEEDS[mode]:
            if not cfg.has(sec):
                errors.append(f"mode {mode!r} needs a [{sec}] section")
    for sec, keys in SCHEMA.items():
        if not cfg.has(sec):
            continue
        for key, (_, default) in keys.items():
            if default is REQUIRED and key not in cfg.sections[sec]:
                errors.append(f"missing required key {sec}.{key}")
    if cfg.has("geometry"):
        kind = cfg.get("geometry", "kind")
        d = cfg.get("geometry", "d")
        beta = cfg.get("geometry", "beta")
        if kind not in (REQUIRED, "hinged", "torus"):
            errors.append(f"geometry.kind must be 'hinged' or 'torus', got {kind!r}")
        if kind == "torus" and beta is not REQUIRED and beta <= 0:
            errors.append("geometry.beta must be > 0 on the torus (no Poincaré-like inequality holds there)")
        if beta < 0:
            errors.append("geometry.beta must be >= 0")
        if not 1 <= d <= 3:
            errors.append("geometry.d must be 1, 2 or 3")
        n = cfg.get("geometry", "N")
        if n is not REQUIRED:
            ns = n if isinstance(n, list) else [n]
            if isinstance(n, list) and len(n) != d:
                errors.append(f"geometry.N lists {len(n)} sizes for d = {d}")
            if any(not isinstance(k, int) or k < 1 or k > 256 for k in ns):
                errors.append("geometry.N entries must be integers in [1, 256]")
    if cfg.has("nonlinearity"):
        coeffs = cfg.get("nonlinearity", "coefficients")
        if any(isinstance(c, bool) or not isinstance(c, _NUM) for c in coeffs):
            errors.append("nonlinearity.coefficients must be numbers a_1, a_2, ...")
        deg = cfg.get("nonlinearity", "degree")
        if deg is not None and deg != len(coeffs):
            errors.append(f"nonlinearity.degree = {deg} but {len(coeffs)} coefficients given")
        if cfg.get("nonlinearity", "tag") not in ("general", "defocusing", "asymptotic-defocusing"):
            errors.append("nonlinearity.tag must be general, defocusing or asymptotic-defocusing")
    if cfg.has("damping"):
        boxes = cfg.get("damping", "boxes")
        if boxes is None:
            errors.append("missing required key damping.boxes")
        if cfg.get("damping", "gamma0") <= 0:
            errors.append("damping.gamma0 must be > 0")
        if cfg.get("damping", "delta") <= 0:
            errors.append("damping.delta must be > 0")
    if cfg.has("run") or mode:
        T, dt = cfg.get("run", "T"), cfg.get("run", "dt")
        if T <= 0:
            errors.append("run.T must be > 0")
        if dt <= 0:
            errors.append("run.dt must be > 0")
        elif T > 0 and abs(T / dt - round(T / dt)) > 1e-9 * max(1.0, T / dt):
            errors.append(f"run.T / run.dt = {T / dt:g} is not an integer")
        if not 0 < cfg.get("run", "tol") < 1:
            errors.append("run.tol must lie in (0, 1)")
        if cfg.get("run", "data_norm") < 0:
            errors.append("run.data_norm must be >= 0")
        if cfg.get("run", "seed") < 0 or cfg.get("run", "seed") >= 2**64:
            errors.append("run.seed must be an unsigned 64-bit integer")
        if cfg.get("run", "gramian") not in ("plate", "schrodinger"):
            errors.append("run.gramian must be 'plate' or 'schrodinger'")
        if mode == "steer" and cfg.has("geometry") and cfg.get("geometry", "kind") != "torus":
            if cfg.get("run", "start") is not None or cfg.get("run", "end") is not None:
                errors.append("run.start/run.end constants are only admissible on the torus")
    for fmt in cfg.get("output", "formats"):
        if fmt not in ("csv", "json", "png"):
            errors.append(f"output.formats: unknown format {fmt!r}")
    return errors


def with_overrides(cfg: ScenarioConfig, **sections) -> ScenarioConfig:
    new = copy.deepcopy(cfg.sections)
    for sec, values in sections.items():
        new.setdefault(sec, {}).update(values)
    out = ScenarioConfig(new)
    errs = validate(out)
    if errs:
        raise ConfigError(errs)
    return out
