"""Scenario configuration: a flat ``key = value`` text format with dotted sections.

Example::

    name = case-ii-torus
    case = case-ii
    pipeline = flow
    geometry.kind = torus
    geometry.n = 2
    geometry.resolution = 64
    f.constant = -0.3
    f.cos = 1,0:1.0
    q0.kind = metric
    u0.kind = zero
    flow.scheme = imex-semi-implicit
    flow.t_max = 200.0

Field specs (``f.*``, ``q0.*``, ``u0.*``) are sums of a constant and term
lists: ``cos`` / ``sin`` take ``k1,...,kn:amp`` entries separated by ``;``
(torus, ``cos(k.x)``), ``poly`` takes ``p:amp`` entries (sphere, ``amp x^p``
with ``x = cos(theta)``).  Missing keys take their defaults, and
:func:`serialize_config` always writes every key, so
``parse_config(serialize_config(c)) == c``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

import numpy as np

from .flow import FlowConfig
from .geometry import SPHERE, TORUS, GridField, constant_field, dilation, make_geometry, pullback
from .operators import make_background

CASES = ("case-i", "case-ii", "case-iii", "sphere-critical", "gexu")
PIPELINES = ("flow", "gexu", "both")
U0_KINDS = ("zero", "terms", "dilation", "random")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# field specs

@dataclass(frozen=True)
class FieldSpec:
    constant: float = 0.0
    cos: tuple = ()
    sin: tuple = ()
    poly: tuple = ()

    def is_zero(self) -> bool:
        return self.constant == 0.0 and not (self.cos or self.sin or self.poly)

    def evaluate(self, geometry) -> GridField:
        values = np.full(geometry.grid_shape, float(self.constant))
        if geometry.kind == TORUS:
            if self.poly:
                raise ConfigError("poly terms are only defined on the zonal sphere")
            coords = geometry.coordinates()
            for terms, fn in ((self.cos, np.cos), (self.sin, np.sin)):
                for ks, amp in terms:
                    if len(ks) > geometry.n:
                        raise ConfigError(f"wave vector {ks} longer than dimension {geometry.n}")
                    phase = sum(k * c for k, c in zip(ks, coords))
                    values = values + amp * fn(phase)
        else:
            if self.cos or self.sin:
                raise ConfigError("cos/sin terms are only defined on the torus")
            for p, amp in self.poly:
                values = values + amp * geometry.nodes**p
        return GridField(geometry, values)


def _parse_terms(text: str, kind: str) -> tuple:
    out = []
    text = text.strip()
    if not text:
        return ()
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        try:
            key, amp = item.split(":")
            if kind == "poly":
                p = int(key)
                if p < 0:
                    raise ValueError
                out.append((p, float(amp)))
            else:
                out.append((tuple(int(k) for k in key.split(",")), float(amp)))
        except ValueError:
            raise ConfigError(f"malformed {kind} term {item!r}") from None
    return tuple(out)


def _format_terms(terms, kind: str) -> str:
    if kind == "poly":
        return ";".join(f"{p}:{amp!r}" for p, amp in terms)
    return ";".join(f"{','.join(str(k) for k in ks)}:{amp!r}" for ks, amp in terms)


def _spec_from(d: dict, prefix: str) -> FieldSpec:
    return FieldSpec(
        constant=_float(d.pop(f"{prefix}.constant", "0.0"), f"{prefix}.constant"),
        cos=_parse_terms(d.pop(f"{prefix}.cos", ""), "cos"),
        sin=_parse_terms(d.pop(f"{prefix}.sin", ""), "sin"),
        poly=_parse_terms(d.pop(f"{prefix}.poly", ""), "poly"),
    )


def _spec_lines(spec: FieldSpec, prefix: str) -> list:
    return [
        f"{prefix}.constant = {spec.constant!r}",
        f"{prefix}.cos = {_format_terms(spec.cos, 'cos')}",
        f"{prefix}.sin = {_format_terms(spec.sin, 'sin')}",
        f"{prefix}.poly = {_format_terms(spec.poly, 'poly')}",
    ]


def _float(text, key):
    try:
        return float(text)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected a number, got {text!r}") from None


def _int(text, key):
    try:
        return int(text)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected an integer, got {text!r}") from None


def _bool(text, key):
    t = str(text).strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


# --------------------------------------------------------------------------
# scenario config

@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    case: str = "case-ii"
    pipeline: str = "flow"
    kind: str = TORUS
    n: int = 2
    resolution: int = 64
    f: FieldSpec = FieldSpec(constant=1.0)
    q0_kind: str = "metric"
    q0: FieldSpec = FieldSpec()
    u0_kind: str = "zero"
    u0: FieldSpec = FieldSpec()
    u0_pole: str = "north"
    u0_r: float = 1.0
    u0_amplitude: float = 0.1
    u0_modes: int = 3
    seed: int = 0
    flow: FlowConfig = FlowConfig()
    rate_fit: bool = False
    coercivity: bool = False
    newton: bool = True
    validation_pole: str = "north"
    validation_r0: float = 1.0
    output_dir: str = ""

    def with_overrides(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)


_FLOW_FIELDS = {f.name: f for f in fields(FlowConfig)}


def _flow_value(name, text):
    default = getattr(FlowConfig(), name)
    key = f"flow.{name}"
    if isinstance(default, bool):
        return _bool(text, key)
    if isinstance(default, int):
        return _int(text, key)
    if isinstance(default, float):
        return _float(text, key)
    if isinstance(default, tuple):
        return tuple(_int(t, key) for t in text.split(",") if t.strip())
    return text


def _flow_text(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> ScenarioConfig:
    """Parse the key-value format; unknown keys are an error."""
    d = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in d:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        d[key] = value.strip()

    flow_kw = {}
    for key in [k for k in d if k.startswith("flow.")]:
        name = key[5:]
        if name not in _FLOW_FIELDS:
            raise ConfigError(f"unknown flow setting {key!r}")
        flow_kw[name] = _flow_value(name, d.pop(key))
    try:
        flow = FlowConfig(**flow_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    cfg = ScenarioConfig(
        name=d.pop("name", "scenario"),
        case=d.pop("case", "case-ii"),
        pipeline=d.pop("pipeline", "flow"),
        kind=d.pop("geometry.kind", TORUS),
        n=_int(d.pop("geometry.n", "2"), "geometry.n"),
        resolution=_int(d.pop("geometry.resolution", "64"), "geometry.resolution"),
        f=_spec_from(d, "f"),
        q0_kind=d.pop("q0.kind", "metric"),
        q0=_spec_from(d, "q0"),
        u0_kind=d.pop("u0.kind", "zero"),
        u0=_spec_from(d, "u0"),
        u0_pole=d.pop("u0.pole", "north"),
        u0_r=_float(d.pop("u0.r", "1.0"), "u0.r"),
        u0_amplitude=_float(d.pop("u0.amplitude", "0.1"), "u0.amplitude"),
        u0_modes=_int(d.pop("u0.modes", "3"), "u0.modes"),
        seed=_int(d.pop("seed", "0"), "seed"),
        flow=flow,
        rate_fit=_bool(d.pop("analysis.rate_fit", "false"), "analysis.rate_fit"),
        coercivity=_bool(d.pop("analysis.coercivity", "false"), "analysis.coercivity"),
        newton=_bool(d.pop("analysis.newton", "true"), "analysis.newton"),
        validation_pole=d.pop("validation.pole", "north"),
        validation_r0=_float(d.pop("validation.r0", "1.0"), "validation.r0"),
        output_dir=d.pop("output.dir", ""),
    )
    if d:
        raise ConfigError(f"unknown keys: {', '.join(sorted(d))}")
    check_config(cfg)
    return cfg


def check_config(cfg: ScenarioConfig):
    if cfg.case not in CASES:
        raise ConfigError(f"unknown case {cfg.case!r}; expected one of {CASES}")
    if cfg.pipeline not in PIPELINES:
        raise ConfigError(f"unknown pipeline {cfg.pipeline!r}")
    if cfg.kind not in (TORUS, SPHERE):
        raise ConfigError(f"unknown geometry kind {cfg.kind!r}")
    if cfg.q0_kind not in ("metric", "synthetic"):
        raise ConfigError(f"q0.kind must be 'metric' or 'synthetic', got {cfg.q0_kind!r}")
    if cfg.u0_kind not in U0_KINDS:
        raise ConfigError(f"u0.kind must be one of {U0_KINDS}")
    if cfg.f.is_zero():
        raise ConfigError("f must not vanish identically")
    if cfg.kind == SPHERE and cfg.q0_kind == "synthetic":
        raise ConfigError("synthetic Q0 is only supported on the torus")
    if cfg.u0_kind == "dilation" and cfg.kind != SPHERE:
        raise ConfigError("dilation initial data requires the zonal sphere")
    if cfg.case == "sphere-critical" and cfg.kind != SPHERE:
        raise ConfigError("case sphere-critical requires the zonal sphere")
    if cfg.pipeline in ("gexu", "both") and cfg.case != "gexu":
        raise ConfigError("the direct minimizer pipeline requires case gexu")


def serialize_config(cfg: ScenarioConfig) -> str:
    lines = [
        f"name = {cfg.name}",
        f"case = {cfg.case}",
        f"pipeline = {cfg.pipeline}",
        f"seed = {cfg.seed}",
        f"geometry.kind = {cfg.kind}",
        f"geometry.n = {cfg.n}",
        f"geometry.resolution = {cfg.resolution}",
        *_spec_lines(cfg.f, "f"),
        f"q0.kind = {cfg.q0_kind}",
        *_spec_lines(cfg.q0, "q0"),
        f"u0.kind = {cfg.u0_kind}",
        *_spec_lines(cfg.u0, "u0"),
        f"u0.pole = {cfg.u0_pole}",
        f"u0.r = {cfg.u0_r!r}",
        f"u0.amplitude = {cfg.u0_amplitude!r}",
        f"u0.modes = {cfg.u0_modes}",
    ]
    for name in _FLOW_FIELDS:
        lines.append(f"flow.{name} = {_flow_text(getattr(cfg.flow, name))}")
    lines += [
        f"analysis.rate_fit = {_flow_text(cfg.rate_fit)}",
        f"analysis.coercivity = {_flow_text(cfg.coercivity)}",
        f"analysis.newton = {_flow_text(cfg.newton)}",
        f"validation.pole = {cfg.validation_pole}",
        f"validation.r0 = {cfg.validation_r0!r}",
        f"output.dir = {cfg.output_dir}",
    ]
    return "\n".join(lines) + "\n"


# keys that do not change the trajectory
_HASH_EXCLUDED = ("name", "output.dir", "analysis.", "validation.", "flow.t_max", "flow.f2_tol",
                  "flow.rhs_tol", "flow.record_stride", "flow.max_steps", "flow.keep_states",
                  "flow.sobolev_orders", "pipeline", "case")


def config_hash(cfg: ScenarioConfig) -> str:
    """SHA-256 over the settings that determine the trajectory."""
    kept = [line for line in serialize_config(cfg).splitlines()
            if not line.split(" = ")[0].startswith(_HASH_EXCLUDED)]
    return hashlib.sha256("\n".join(kept).encode()).hexdigest()


# --------------------------------------------------------------------------
# problem construction

@dataclass
class Problem:
    geometry: object
    background: object
    u0: GridField


def build_problem(cfg: ScenarioConfig, seed: int | None = None) -> Problem:
    """Geometry, background data and (unprojected) initial factor."""
    check_config(cfg)
    try:
        geom = make_geometry(cfg.kind, cfg.n, cfg.resolution)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    f = cfg.f.evaluate(geom)
    Q0 = cfg.q0.evaluate(geom) if cfg.q0_kind == "synthetic" else None
    bg = make_background(f, Q0)
    seed = cfg.seed if seed is None else seed
    if cfg.u0_kind == "zero":
        u0 = constant_field(geom, 0.0)
    elif cfg.u0_kind == "terms":
        u0 = cfg.u0.evaluate(geom)
    elif cfg.u0_kind == "dilation":
        u0 = pullback(constant_field(geom, 0.0), dilation(geom, cfg.u0_pole, cfg.u0_r))
    else:
        u0 = random_field(geom, cfg.u0_amplitude, cfg.u0_modes, seed)
    return Problem(geom, bg, u0)


def random_field(geometry, amplitude: float, modes: int, seed: int) -> GridField:
    """Band-limited random field with ``O(amplitude)`` pointwise size."""
    rng = np.random.default_rng(seed)
    shape = geometry.spectral_shape
    eigs = geometry.laplace_eigs
    if geometry.kind == TORUS:
        N = geometry.resolution
        freqs = np.abs(np.fft.fftfreq(N, d=1.0 / N))
        kmax = np.max(np.meshgrid(*([freqs] * geometry.n), indexing="ij"), axis=0)
        low = (kmax <= modes) & (kmax > 0)
        hat = np.zeros(shape, dtype=complex)
        hat[low] = (rng.normal(size=shape) + 1j * rng.normal(size=shape))[low] / (1.0 + eigs[low])
    else:
        low = (np.arange(shape[0]) <= modes) & (np.arange(shape[0]) > 0)
        hat = np.zeros(shape)
        hat[low] = rng.normal(size=shape)[low] / (1.0 + eigs[low]) ** 0.5
    values = geometry.inverse(hat)
    peak = np.max(np.abs(values))
    if peak > 0:
        values = values * (amplitude / peak)
    return GridField(geometry, values)


# --------------------------------------------------------------------------
# presets

def _torus(name, case, f, q0=None, **kw):
    q0_kind = "synthetic" if q0 is not None else "metric"
    return ScenarioConfig(name=name, case=case, kind=TORUS, n=2, resolution=64, f=f,
                          q0_kind=q0_kind, q0=q0 or FieldSpec(), **kw)


_TORUS_FLOW = FlowConfig(dt=1e-2, dt_max=0.5, t_max=400.0, f2_tol=1e-20, rhs_tol=1e-9, record_stride=5)

PRESETS = {
    "case-i-torus": _torus(
        "case-i-torus", "case-i",
        FieldSpec(constant=0.5, cos=(((1, 0), 1.0),)),
        FieldSpec(constant=0.2),
        u0_kind="terms", u0=FieldSpec(cos=(((0, 1), 0.1),)),
        flow=_TORUS_FLOW,
    ),
    "case-ii-torus": _torus(
        "case-ii-torus", "case-ii",
        FieldSpec(constant=-0.3, cos=(((1, 0), 1.0),)),
        flow=_TORUS_FLOW,
    ),
    "case-iii-neg-f": _torus(
        "case-iii-neg-f", "case-iii",
        FieldSpec(constant=-1.0, cos=(((1, 0), -0.5),)),
        FieldSpec(constant=-1.0),
        u0_kind="terms", u0=FieldSpec(sin=(((0, 1), 0.3),), cos=(((1, 1), 0.2),)),
        flow=replace(_TORUS_FLOW, dt_max=0.05, record_stride=2, keep_states=True),
        rate_fit=True, coercivity=True,
    ),
    "case-iii-sign": _torus(
        "case-iii-sign", "case-iii",
        FieldSpec(constant=-2.0, cos=(((1, 0), 2.1),)),
        FieldSpec(constant=-1.0),
        flow=_TORUS_FLOW, coercivity=True,
    ),
    "sphere-critical-s4": ScenarioConfig(
        name="sphere-critical-s4", case="sphere-critical", kind=SPHERE, n=4, resolution=32,
        f=FieldSpec(constant=6.0 + 0.5 / 5.0, poly=((2, -0.5),)),
        flow=FlowConfig(dt=1e-3, dt_max=0.1, t_max=400.0, f2_tol=1e-20, rhs_tol=1e-9, record_stride=5),
    ),
    "sphere-critical-s2": ScenarioConfig(
        name="sphere-critical-s2", case="sphere-critical", kind=SPHERE, n=2, resolution=32,
        f=FieldSpec(constant=1.0 + 0.5 / 3.0, poly=((2, -0.5),)),
        flow=FlowConfig(dt=1e-2, dt_max=0.5, t_max=400.0, f2_tol=1e-20, rhs_tol=1e-9, record_stride=5),
    ),
    "sphere-violating-s2": ScenarioConfig(
        name="sphere-violating-s2", case="sphere-critical", kind=SPHERE, n=2, resolution=64,
        f=FieldSpec(constant=0.5, poly=((2, 1.5),)),
        flow=FlowConfig(dt=1e-2, dt_max=0.2, t_max=200.0, f2_tol=1e-20, rhs_tol=1e-9, record_stride=5,
                        u_ceiling=12.0),
    ),
    "gexu-torus": _torus(
        "gexu-torus", "gexu",
        FieldSpec(constant=-0.3, cos=(((1, 0), 1.0),)),
        pipeline="both", flow=_TORUS_FLOW,
    ),
}


def get_preset(name: str) -> ScenarioConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}") from None
