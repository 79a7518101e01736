"""Sectioned key=value run configuration: schema, parsing, and spec assembly.

The file format is INI-like (configparser grammar, case-sensitive keys).  Every
key is declared in the schema below with a kind and a default; unknown sections
or keys are rejected by name.  A parsed config keeps the raw strings so the
fully resolved configuration (defaults expanded) can be re-rendered into the
run manifest and re-run to identical hashes.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from typing import Optional

from . import presets
from .expressions import ExpressionError, compile_expr, parse_interval_union
from .model import ForwardModel, LevyMeasureSpec, ProblemSpec, TerminalData


class ConfigError(ValueError):
    pass


# kind -> (parser, is_optional)
def _parse_float(s): return float(s)
def _parse_int(s): return int(s)


def _parse_bool(s):
    s = s.strip().lower()
    if s in ("true", "yes", "1", "on"):
        return True
    if s in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s):
    return [int(p) for p in s.split(",") if p.strip()]


def _parse_floats(s):
    return [float(p) for p in s.split(",") if p.strip()]


def _parse_points(s):
    pts = []
    for part in s.split(";"):
        part = part.strip()
        if not part:
            continue
        t, x = part.split(",")
        pts.append((float(t), float(x)))
    return pts


def _parse_atoms(s):
    out = []
    for part in s.split(","):
        part = part.strip()
        if not part:
            continue
        mark, mass = part.split(":")
        out.append((float(mark), float(mass)))
    return out


_KINDS = {
    "float": (_parse_float, False), "float?": (_parse_float, True),
    "int": (_parse_int, False), "int?": (_parse_int, True),
    "bool": (_parse_bool, False), "str": (lambda s: s.strip(), False),
    "expr": (lambda s: s.strip(), False), "expr?": (lambda s: s.strip(), True),
    "ints": (_parse_ints, False), "floats": (_parse_floats, False),
    "points": (_parse_points, False), "atoms": (_parse_atoms, False),
}

SCHEMA: dict[str, dict[str, tuple[str, str]]] = {
    "run": {
        "label": ("str", "run"), "seed": ("int", "0"), "t": ("float", "0.0"),
        "x": ("float", "0.0"), "threads": ("int?", ""),
        "stages": ("str", "audit,forward,bsde,ipde,verify"),
    },
    "model": {
        "drift": ("expr", "0"), "sigma": ("expr", "0"), "beta": ("expr?", ""),
        "levy_atoms": ("atoms", ""), "levy_density": ("expr?", ""),
        "levy_support": ("floats", ""), "horizon": ("float", "1.0"),
        "c_beta": ("float?", ""), "k_beta": ("float?", ""), "k_bsigma": ("float?", ""),
    },
    "generator": {
        "preset": ("str", "power"), "q": ("float", "2.0"), "a": ("expr", "1.0"),
        "eta": ("expr", "1.0"), "f0": ("expr", "0"), "gamma": ("expr?", ""),
        "theta": ("expr?", ""), "b_coupling": ("float", "0.0"),
        "ell": ("float", "2.0"), "growth_delta": ("float", "0.0"),
        "lip_z": ("float", "0.0"), "chi": ("float", "0.0"),
    },
    "terminal": {
        "g": ("expr", "0"), "singular_set": ("str", ""), "nu": ("float", "0.0"),
    },
    "forward": {
        "n_paths": ("int", "20000"), "n_steps": ("int", "200"),
        "delta_cut": ("float", "1e-3"), "small_jump_mode": ("str", "drop"),
        "save_bundle": ("bool", "false"),
    },
    "bsde": {
        "basis": ("str", "polynomial"), "degree": ("int", "3"), "n_bins": ("int", "8"),
        "ridge": ("float", "1e-8"), "schedule": ("ints", "10,20,40,80,160,320"),
        "tol": ("float", "1e-3"), "y_update": ("str", "heun"), "dt_max": ("float?", ""),
    },
    "ipde": {
        "x_min": ("float", "-5.0"), "x_max": ("float", "5.0"), "nx": ("int", "201"),
        "nt": ("int", "1000"), "delta": ("float?", ""), "cfl_max": ("float", "0.9"),
        "schedule": ("ints", "10,20,40,80,160,320"), "tol": ("float", "1e-3"),
        "eps_window": ("float", "0.05"), "dt_max": ("float?", ""),
        "y_update": ("str", "heun"), "extrap_mass_cap": ("float", "0.2"),
    },
    "verify": {
        "points": ("points", ""), "mode": ("str", "mc_plus_grid"),
        "rel_tol": ("float", "0.05"), "abs_tol": ("float", "0.0"),
        "grid_error": ("float", "0.0"), "eps_sweep": ("floats", "0.2,0.1,0.05,0.025"),
        "x_regular": ("float?", ""), "x_singular": ("float?", ""),
        "divergence_threshold": ("float", "10.0"), "k_cal": ("float", "1.0"),
        "blowup_x": ("float?", ""), "blowup_window": ("floats", "0.01,0.3"),
        "blowup_q_tol": ("float", "0.05"), "audit_hard": ("bool", "true"),
    },
    "output": {
        "plots": ("bool", "true"), "csv": ("bool", "true"),
    },
}


@dataclass
class RunConfig:
    """Fully resolved configuration: raw strings (for re-rendering) plus parsed values."""

    raw: dict[str, dict[str, str]]
    values: dict[str, dict[str, object]]

    def get(self, section: str, key: str):
        return self.values[section][key]

    def to_ini(self) -> str:
        buf = io.StringIO()
        for section in SCHEMA:
            buf.write(f"[{section}]\n")
            for key in SCHEMA[section]:
                buf.write(f"{key} = {self.raw[section][key]}\n")
            buf.write("\n")
        return buf.getvalue()


def _resolve(raw_in: dict[str, dict[str, str]]) -> RunConfig:
    raw: dict[str, dict[str, str]] = {}
    values: dict[str, dict[str, object]] = {}
    for section, keys in SCHEMA.items():
        raw[section] = {}
        values[section] = {}
        for key, (kind, default) in keys.items():
            text = raw_in.get(section, {}).get(key, default)
            parser, optional = _KINDS[kind]
            text_stripped = text.strip()
            if text_stripped == "":
                if optional or kind in ("atoms", "floats", "points", "ints"):
                    raw[section][key] = ""
                    values[section][key] = None if optional else parser("")
                    continue
                if kind in ("str", "expr"):
                    raw[section][key] = text
                    values[section][key] = text_stripped
                    continue
                raise ConfigError(f"{section}.{key} must not be empty")
            try:
                values[section][key] = parser(text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}") from None
            raw[section][key] = text.strip()
    return RunConfig(raw=raw, values=values)


def load_config(source: str, overrides: Optional[list[str]] = None) -> RunConfig:
    """Parse config text (file contents), apply key=value overrides, validate.

    Unknown sections or keys are rejected with the offending name.
    """
    cp = configparser.ConfigParser(delimiters=("=",), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(source)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    raw_in: dict[str, dict[str, str]] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        raw_in[section] = {}
        for key, value in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            raw_in[section][key] = value
    for ov in overrides or []:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not key=value")
        path, value = ov.split("=", 1)
        if "." not in path:
            raise ConfigError(f"override key {path!r} must be section.key")
        section, key = path.split(".", 1)
        section, key = section.strip(), key.strip()
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        raw_in.setdefault(section, {})[key] = value
    return _resolve(raw_in)


def load_config_source(config_arg: str) -> str:
    """Resolve --config: a path, or preset:NAME for an embedded configuration."""
    if config_arg.startswith("preset:"):
        name = config_arg.split(":", 1)[1]
        if name not in presets.PRESET_CONFIGS:
            raise ConfigError(f"unknown preset {name!r}; have "
                              f"{sorted(presets.PRESET_CONFIGS)}")
        return presets.PRESET_CONFIGS[name]
    try:
        with open(config_arg, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {config_arg!r}: {exc}") from None


# ---------------------------------------------------------------------------
# spec assembly
# ---------------------------------------------------------------------------

def build_spec(cfg: RunConfig) -> ProblemSpec:
    v = cfg.values

    def expr(section, key, variables):
        text = v[section][key]
        if text is None or text == "":
            return None
        try:
            return compile_expr(text, variables)
        except ExpressionError as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from None

    drift = expr("model", "drift", ("x",)) or compile_expr("0", ("x",))
    sigma = expr("model", "sigma", ("x",)) or compile_expr("0", ("x",))
    beta = expr("model", "beta", ("x", "e")) or compile_expr("0", ("x", "e"))

    atoms = v["model"]["levy_atoms"]
    density = expr("model", "levy_density", ("e",))
    if density is not None:
        sup = v["model"]["levy_support"]
        if len(sup) != 2:
            raise ConfigError("model.levy_support needs exactly two endpoints")
        levy = LevyMeasureSpec.from_density(density, [tuple(sup)])
    else:
        levy = LevyMeasureSpec.from_atoms(atoms or [])

    model = ForwardModel(drift=drift, diffusion=sigma, jump_coef=beta, levy=levy,
                         horizon=v["model"]["horizon"], dim=1,
                         lip_drift_diffusion=v["model"]["k_bsigma"],
                         lip_jump=v["model"]["k_beta"],
                         bound_jump=v["model"]["c_beta"])

    gamma = expr("generator", "gamma", ("x", "e"))
    theta = expr("generator", "theta", ("e",))
    if gamma is not None and theta is None:
        raise ConfigError("generator.theta is required when gamma is set (C7)")
    preset = v["generator"]["preset"]
    common = dict(gamma=gamma, theta=theta, ell=v["generator"]["ell"],
                  growth_delta=v["generator"]["growth_delta"])
    a_fn = expr("generator", "a", ("t", "x")) or presets._const(1.0)
    eta_fn = expr("generator", "eta", ("t", "x")) or presets._const(1.0)
    f0_fn = expr("generator", "f0", ("t", "x")) or presets._const(0.0)
    if preset == "power":
        gen = presets.power_generator(v["generator"]["q"], a=a_fn, f0=f0_fn,
                                      b_coupling=v["generator"]["b_coupling"],
                                      mono_chi=v["generator"]["chi"], **common)
    elif preset == "liquidation":
        gen = presets.liquidation_generator(v["generator"]["q"], eta=eta_fn,
                                            f0=f0_fn, **common)
    elif preset == "heat":
        gen = presets.heat_generator()
    else:
        raise ConfigError(f"unknown generator preset {preset!r}; "
                          f"have {sorted(presets.GENERATOR_PRESETS)}")

    try:
        sset = parse_interval_union(v["terminal"]["singular_set"])
    except ExpressionError as exc:
        raise ConfigError(f"terminal.singular_set: {exc}") from None
    g = expr("terminal", "g", ("x",)) or compile_expr("0", ("x",))
    terminal = TerminalData(g=g, singular_set=sset, nu=v["terminal"]["nu"])
    return ProblemSpec(model=model, gen=gen, terminal=terminal,
                       label=v["run"]["label"])
