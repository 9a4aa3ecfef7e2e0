"""Scenario files: plain-text market / utility / grid / MC descriptions.

The format is INI-style key = value with one section per concern:

    [market]       dimensions, constraint level, horizon, initial state
    [rate] [appreciation] [volatility]            coefficient functions
    [eta_drift] [eta_stock_loadings] [eta_noise_loadings]   (when m > 0)
    [zeta_drift] [zeta_noise_loadings]                      (when M > 0)
    [utility] [grid] [mc] [output]

Coefficient sections carry a `kind` (constant / affine / tanh / ou) plus
kind-specific keys.  Vectors are comma lists, matrices use ";" between
rows, all numbers decimal.  Unknown sections or keys are rejected with
the offending line number.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .hjb import Grid, Utility, factor_bounds, minimum_stable_steps
from .market import (DOMAIN_POSITIVE, DOMAIN_REALS, AffineField,
                     ConstantField, MarketSpec, OUDriftField, TanhField)
from .policyeval import McParams


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------

_MARKET_KEYS = {"stocks", "eta_factors", "zeta_factors", "extra_noise",
                "constraint_level", "horizon", "initial_wealth",
                "initial_eta", "initial_zeta", "domain"}
_FIELD_KEYS = {"kind", "value", "base", "wrt_y", "wrt_z", "amplitude",
               "gain_y", "gain_z", "rate", "mean"}
_UTILITY_KEYS = {"family", "delta", "lam", "cap"}
_GRID_KEYS = {"x_nodes", "factor_nodes", "t_steps", "x_lo", "x_hi",
              "max_stored_slices"}
_MC_KEYS = {"steps", "paths", "seed"}
_OUTPUT_KEYS = {"directory", "formats"}

_FIELD_SECTIONS = ("rate", "appreciation", "volatility", "eta_drift",
                   "eta_stock_loadings", "eta_noise_loadings",
                   "zeta_drift", "zeta_noise_loadings")
_SECTIONS = {
    "market": _MARKET_KEYS,
    "utility": _UTILITY_KEYS,
    "grid": _GRID_KEYS,
    "mc": _MC_KEYS,
    "output": _OUTPUT_KEYS,
    **{s: _FIELD_KEYS for s in _FIELD_SECTIONS},
}

_ALLOWED_KINDS = {
    "rate": {"constant", "affine"},
    "appreciation": {"constant", "affine", "tanh"},
    "volatility": {"constant", "tanh"},
    "eta_drift": {"constant", "affine", "ou"},
    "zeta_drift": {"constant", "affine", "ou"},
    "eta_stock_loadings": {"constant", "tanh"},
    "eta_noise_loadings": {"constant", "tanh"},
    "zeta_noise_loadings": {"constant", "tanh"},
}


def _line_of(text: str, section: str, key: Optional[str] = None) -> int:
    in_section = False
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            in_section = stripped[1:-1].strip() == section
            if in_section and key is None:
                return i
        elif in_section and key is not None:
            name = stripped.split("=", 1)[0].split(":", 1)[0].strip()
            if name == key:
                return i
    return 0


def _parse_vector(text: str):
    text = text.strip()
    if not text:
        return np.zeros(0)
    return np.array([float(tok) for tok in text.split(",")], dtype=np.float64)


def _parse_matrix(text: str):
    text = text.strip()
    if not text:
        return np.zeros((0, 0))
    rows = [_parse_vector(row) for row in text.split(";")]
    width = {r.shape[0] for r in rows}
    if len(width) != 1:
        raise ScenarioError("matrix rows have unequal lengths")
    return np.stack(rows)


def _shaped(raw, shape, where):
    """Parse raw text into an array of the requested shape."""
    try:
        if len(shape) == 0:
            return float(raw)
        if len(shape) == 1:
            arr = _parse_vector(raw)
        else:
            arr = _parse_matrix(raw)
            if arr.size == 0:
                arr = arr.reshape(shape)
    except (ValueError, ScenarioError) as exc:
        raise ScenarioError(f"{where}: {exc}") from exc
    arr = np.asarray(arr, dtype=np.float64)
    if arr.size == 0 and int(np.prod(shape)) == 0:
        return arr.reshape(shape)
    if arr.shape != tuple(shape):
        raise ScenarioError(f"{where}: expected shape {tuple(shape)}, "
                            f"got {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

@dataclass
class GridParams:
    x_nodes: int = 101
    factor_nodes: int = 31
    t_steps: Optional[int] = None      # None = stability minimum
    x_lo: Optional[float] = None
    x_hi: Optional[float] = None
    max_stored_slices: int = 401


@dataclass
class OutputParams:
    directory: str = "out"
    formats: tuple = ("csv",)


@dataclass
class ScenarioBundle:
    spec: MarketSpec
    utility: Utility
    grid_params: GridParams
    mc: McParams
    output: OutputParams
    source_text: str = ""

    def build_grid(self, seed: int = 0) -> Grid:
        gp = self.grid_params
        spec = self.spec
        # default wealth box well beyond the [x0/8, 8 x0] reporting range so
        # the far-field boundary stays clear of it
        if spec.domain == DOMAIN_POSITIVE:
            x_lo = np.log(spec.x0 / 33.0) if gp.x_lo is None else gp.x_lo
            x_hi = np.log(spec.x0 * 33.0) if gp.x_hi is None else gp.x_hi
        else:
            x_lo = spec.x0 / 33.0 if gp.x_lo is None else gp.x_lo
            x_hi = spec.x0 * 33.0 if gp.x_hi is None else gp.x_hi
        y_bounds, z_bounds = factor_bounds(spec, seed=seed)
        grid = Grid(x_lo=float(x_lo), x_hi=float(x_hi), x_nodes=gp.x_nodes,
                    y_axes=tuple((lo, hi, gp.factor_nodes)
                                 for lo, hi in y_bounds),
                    z_axes=tuple((lo, hi, gp.factor_nodes)
                                 for lo, hi in z_bounds),
                    t_steps=1, T=spec.T)
        t_steps = gp.t_steps
        if t_steps is None:
            t_steps = minimum_stable_steps(spec, grid)
        return Grid(x_lo=grid.x_lo, x_hi=grid.x_hi, x_nodes=grid.x_nodes,
                    y_axes=grid.y_axes, z_axes=grid.z_axes,
                    t_steps=int(t_steps), T=spec.T)


def _field_from_section(name, sec, shape, dims, text):
    m, M = dims
    kind = sec.get("kind")
    if kind is None:
        raise ScenarioError(
            f"line {_line_of(text, name)}: [{name}] is missing `kind`")
    if kind not in _ALLOWED_KINDS[name]:
        raise ScenarioError(
            f"line {_line_of(text, name, 'kind')}: [{name}] cannot use "
            f"kind {kind!r} (allowed: {sorted(_ALLOWED_KINDS[name])})")

    def need(key):
        if key not in sec:
            raise ScenarioError(
                f"line {_line_of(text, name)}: [{name}] kind {kind} "
                f"needs `{key}`")
        return sec[key]

    where = f"[{name}]"
    if kind == "constant":
        return ConstantField(value=np.asarray(
            _shaped(need("value"), shape, where)))
    if kind == "affine":
        base = np.asarray(_shaped(need("base"), shape, where))
        if len(shape) > 1:
            raise ScenarioError(f"{where}: affine only supports scalar or "
                                f"vector coefficients")
        wy_shape = shape + (m,)
        wz_shape = shape + (M,)
        wy = (_shaped(sec["wrt_y"], wy_shape, where) if "wrt_y" in sec
              else np.zeros(wy_shape))
        wz = (_shaped(sec["wrt_z"], wz_shape, where) if "wrt_z" in sec
              else np.zeros(wz_shape))
        if len(shape) == 0:
            wy = np.atleast_1d(wy).reshape(wy_shape)
            wz = np.atleast_1d(wz).reshape(wz_shape)
        return AffineField(base=np.asarray(base, dtype=np.float64),
                           wrt_y=np.asarray(wy), wrt_z=np.asarray(wz))
    if kind == "tanh":
        base = np.asarray(_shaped(need("base"), shape, where))
        amp = np.asarray(_shaped(need("amplitude"), shape, where))
        gy = (_shaped(sec["gain_y"], (m,), where) if "gain_y" in sec
              else np.zeros(m))
        gz = (_shaped(sec["gain_z"], (M,), where) if "gain_z" in sec
              else np.zeros(M))
        return TanhField(base=base, amplitude=amp,
                         gain_y=np.atleast_1d(gy), gain_z=np.atleast_1d(gz))
    # OU drift
    d = shape[0]
    rate = np.atleast_1d(_shaped(need("rate"), (d,), where))
    mean = np.atleast_1d(_shaped(need("mean"), (d,), where))
    return OUDriftField(rate=rate, mean=mean,
                        target="eta" if name == "eta_drift" else "zeta")


def parse_scenario(text: str) -> ScenarioBundle:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ScenarioError(f"scenario parse error: {exc}") from exc

    for section in cp.sections():
        if section not in _SECTIONS:
            raise ScenarioError(
                f"line {_line_of(text, section)}: unknown section "
                f"[{section}]")
        for key in cp[section]:
            if key not in _SECTIONS[section]:
                raise ScenarioError(
                    f"line {_line_of(text, section, key)}: unknown key "
                    f"`{key}` in [{section}]")

    if "market" not in cp:
        raise ScenarioError("scenario needs a [market] section")
    mk = cp["market"]

    def _int(sec, key, default=None):
        if key not in sec:
            if default is None:
                raise ScenarioError(f"[{sec.name}] is missing `{key}`")
            return default
        return int(sec[key])

    def _float(sec, key, default=None):
        if key not in sec:
            if default is None:
                raise ScenarioError(f"[{sec.name}] is missing `{key}`")
            return default
        return float(sec[key])

    n = _int(mk, "stocks")
    m = _int(mk, "eta_factors", 0)
    M = _int(mk, "zeta_factors", 0)
    N = _int(mk, "extra_noise", 0)
    domain = mk.get("domain", DOMAIN_POSITIVE).strip()
    if domain not in (DOMAIN_REALS, DOMAIN_POSITIVE):
        raise ScenarioError(
            f"line {_line_of(text, 'market', 'domain')}: domain must be "
            f"'{DOMAIN_REALS}' or '{DOMAIN_POSITIVE}'")

    def field_for(name, shape, required):
        if name in cp:
            return _field_from_section(name, cp[name], shape, (m, M), text)
        if not required or int(np.prod(shape)) == 0:
            return ConstantField(value=np.zeros(shape))
        raise ScenarioError(f"scenario needs a [{name}] section")

    spec_kwargs = dict(
        n=n, m=m, M=M, N=N,
        K=_float(mk, "constraint_level"),
        T=_float(mk, "horizon"),
        x0=_float(mk, "initial_wealth"),
        eta0=_shaped(mk.get("initial_eta", ""), (m,), "[market] initial_eta"),
        zeta0=_shaped(mk.get("initial_zeta", ""), (M,),
                      "[market] initial_zeta"),
        domain=domain,
        rate=field_for("rate", (), True),
        appreciation=field_for("appreciation", (n,), True),
        volatility=field_for("volatility", (n, n), True),
    )
    if m:
        spec_kwargs["eta_drift"] = field_for("eta_drift", (m,), True)
        spec_kwargs["eta_stock_loadings"] = field_for(
            "eta_stock_loadings", (m, n), True)
        spec_kwargs["eta_noise_loadings"] = field_for(
            "eta_noise_loadings", (m, N), N > 0)
    if M:
        spec_kwargs["zeta_drift"] = field_for("zeta_drift", (M,), True)
        spec_kwargs["zeta_noise_loadings"] = field_for(
            "zeta_noise_loadings", (M, N), N > 0)
    try:
        spec = MarketSpec(**spec_kwargs)
    except ValueError as exc:
        raise ScenarioError(f"invalid market spec: {exc}") from exc

    if "utility" not in cp:
        raise ScenarioError("scenario needs a [utility] section")
    ut = cp["utility"]
    family = ut.get("family", "").strip()
    try:
        if family == "log":
            utility = Utility.log()
        elif family == "power":
            utility = Utility.power(_float(ut, "delta"))
        elif family == "capped_linear_quadratic":
            utility = Utility.capped_linear_quadratic(
                _float(ut, "lam"), _float(ut, "cap"), domain=domain)
        else:
            raise ScenarioError(
                f"line {_line_of(text, 'utility', 'family')}: unknown "
                f"utility family {family!r}")
        if utility.domain != domain:
            raise ScenarioError(
                f"utility family {family} requires domain "
                f"{utility.domain}, market uses {domain}")
    except ValueError as exc:
        raise ScenarioError(f"invalid utility: {exc}") from exc

    gp = GridParams()
    if "grid" in cp:
        g = cp["grid"]
        gp.x_nodes = _int(g, "x_nodes", gp.x_nodes)
        gp.factor_nodes = _int(g, "factor_nodes", gp.factor_nodes)
        gp.max_stored_slices = _int(g, "max_stored_slices",
                                    gp.max_stored_slices)
        if g.get("t_steps", "auto").strip() != "auto":
            gp.t_steps = _int(g, "t_steps")
        if g.get("x_lo", "auto").strip() != "auto":
            gp.x_lo = _float(g, "x_lo")
        if g.get("x_hi", "auto").strip() != "auto":
            gp.x_hi = _float(g, "x_hi")

    mc = McParams()
    if "mc" in cp:
        s = cp["mc"]
        mc = McParams(steps=_int(s, "steps", mc.steps),
                      paths=_int(s, "paths", mc.paths),
                      seed=_int(s, "seed", mc.seed))

    out = OutputParams()
    if "output" in cp:
        o = cp["output"]
        out.directory = o.get("directory", out.directory).strip()
        fmts = tuple(f.strip() for f in
                     o.get("formats", "csv").split(",") if f.strip())
        bad = [f for f in fmts if f not in ("csv", "binary")]
        if bad:
            raise ScenarioError(
                f"line {_line_of(text, 'output', 'formats')}: unknown "
                f"formats {bad}")
        out.formats = fmts

    return ScenarioBundle(spec=spec, utility=utility, grid_params=gp, mc=mc,
                          output=out, source_text=text)


def load_scenario(path: str) -> ScenarioBundle:
    with open(path, "r") as fh:
        return parse_scenario(fh.read())


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

_MERTON_MARKET = """\
[market]
stocks = 2
eta_factors = 0
zeta_factors = 0
extra_noise = 0
constraint_level = 1.5
horizon = 1.0
initial_wealth = 1.0
domain = positive

[rate]
kind = constant
value = 0.02

[appreciation]
kind = constant
value = 0.10, 0.06

[volatility]
kind = constant
value = 0.20, 0.00; 0.00, 0.25
"""

_MERTON_TAIL = """\
[grid]
x_nodes = 101
t_steps = auto

[mc]
steps = 250
paths = 100000
seed = 20260810

[output]
directory = out
formats = csv
"""

MERTON_LOG = _MERTON_MARKET + """
[utility]
family = log
""" + _MERTON_TAIL

MERTON_POWER = _MERTON_MARKET + """
[utility]
family = power
delta = 0.5
""" + _MERTON_TAIL

FACTOR_SPAN = """\
[market]
stocks = 4
eta_factors = 1
zeta_factors = 0
extra_noise = 0
constraint_level = 1.5
horizon = 1.0
initial_wealth = 1.0
initial_eta = 0.0
domain = positive

[rate]
kind = constant
value = 0.02

[appreciation]
kind = affine
base = 0.08, 0.06, 0.07, 0.05
wrt_y = 0.04; 0.02; 0.03; 0.02

[volatility]
kind = constant
value = 0.20, 0.00, 0.00, 0.00; 0.02, 0.25, 0.00, 0.00; 0.01, 0.03, 0.30, 0.00; 0.02, 0.01, 0.02, 0.35

[eta_drift]
kind = ou
rate = 1.0
mean = 0.0

[eta_stock_loadings]
kind = constant
value = 0.20, 0.10, 0.10, 0.05

[utility]
family = power
delta = 0.5

[grid]
x_nodes = 61
factor_nodes = 31
t_steps = auto

[mc]
steps = 250
paths = 50000
seed = 20260810

[output]
directory = out
formats = csv
"""

MULTI_FACTOR = """\
[market]
stocks = 5
eta_factors = 2
zeta_factors = 0
extra_noise = 0
constraint_level = 1.5
horizon = 1.0
initial_wealth = 1.0
initial_eta = 0.0, 0.0
domain = positive

[rate]
kind = constant
value = 0.02

[appreciation]
kind = affine
base = 0.08, 0.07, 0.06, 0.065, 0.055
wrt_y = 0.04, 0.01; 0.02, 0.02; 0.03, 0.01; 0.01, 0.03; 0.02, 0.02

[volatility]
kind = constant
value = 0.20, 0.00, 0.00, 0.00, 0.00; 0.02, 0.25, 0.00, 0.00, 0.00; 0.01, 0.03, 0.30, 0.00, 0.00; 0.02, 0.01, 0.02, 0.35, 0.00; 0.01, 0.02, 0.01, 0.03, 0.28

[eta_drift]
kind = ou
rate = 1.0, 0.8
mean = 0.0, 0.0

[eta_stock_loadings]
kind = constant
value = 0.20, 0.10, 0.05, 0.05, 0.05; 0.05, 0.15, 0.10, 0.05, 0.02

[utility]
family = log

[grid]
x_nodes = 41
factor_nodes = 13
t_steps = auto

[mc]
steps = 250
paths = 20000
seed = 20260810

[output]
directory = out
formats = csv
"""

PRESETS = {
    "merton_log": MERTON_LOG,
    "merton_power": MERTON_POWER,
    "factor_span": FACTOR_SPAN,
    "multi_factor": MULTI_FACTOR,
}


def preset_bundle(name: str) -> ScenarioBundle:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    return parse_scenario(PRESETS[name])
