"""Run configuration: flat ``key = value`` text with ``#`` comments.

A ``preset`` line loads the defaults of one of the built-in benchmarks;
any other key overrides them regardless of the order of lines.
"""

import os
from dataclasses import dataclass, field

from .errors import ConfigurationError
from .expr import Expression
from .flow import FlowParams
from .mesh import BOUNDARY_PRESETS
from .phase import ModelParams

GEOMETRIES = {
    # name: (x_range, y_range, default nx, default ny)
    "diffuser": ((0.0, 1.0), (0.0, 1.0), 96, 96),
    "bypass": ((0.0, 1.5), (-0.5, 0.5), 144, 96),
}

_EX1 = dict(geometry="diffuser", mu=0.01, alpha0=1000.0, eps1=0.001, eps2=0.1, beta=5.0,
            eta1=1.0, volume_target=0.4, phi0="0.5")
_EX2 = dict(geometry="bypass", alpha0=1000.0, eps1=0.001, beta=500.0, volume_target=0.85)

PRESETS = {
    "diffuser-ac": dict(_EX1, scheme="allen-cahn", use_projection=True, tau=0.005, S0=1.0, S1=0.1,
                        n_phi=10),
    "diffuser-ch": dict(_EX1, scheme="cahn-hilliard", use_projection=False, tau=0.0025, S0=1.0,
                        S1=0.5, n_phi=1),
    "bypass-ac": dict(_EX2, scheme="allen-cahn", use_projection=True, mu=0.01, tau=0.0005,
                      eps2=0.1, S0=1.0, S1=0.5, eta1=90.0, n_phi=10,
                      phi0="min(abs(y-0.3)-0.1, abs(y+0.3)-0.1)"),
    "bypass-ch": dict(_EX2, scheme="cahn-hilliard", use_projection=False, mu=0.01, tau=0.00025,
                      eps2=0.01, S0=1.0, S1=0.15, eta1=4.0, n_phi=10, phi0="0.5"),
}

PRESET_NOTES = {
    "diffuser-ac": "2D diffuser, projected Allen-Cahn flow (mu=0.01, tau=0.005, S0=1, S1=0.1)",
    "diffuser-ch": "2D diffuser, Cahn-Hilliard flow (mu=0.01, tau=0.0025, S0=1, S1=0.5)",
    "bypass-ac": "2D double-pipe bypass, projected Allen-Cahn flow (mu=0.01, tau=0.0005, eta1=90)",
    "bypass-ch": "2D double-pipe bypass, Cahn-Hilliard flow (mu=0.01, tau=0.00025, eta1=4)",
}

_FLOAT = float
_ALIASES = {"kappa1": "eps1", "kappa2": "eps2", "v_target": "volume_target"}
_TYPES = {
    "preset": str, "geometry": str, "nx": int, "ny": int, "mesh_file": str,
    "mu": _FLOAT, "alpha0": _FLOAT, "newton_tol": _FLOAT, "newton_max": int,
    "eps1": _FLOAT, "eps2": _FLOAT, "beta": _FLOAT, "volume_target": _FLOAT, "eta1": _FLOAT,
    "normalize_sensitivity": bool, "S0": _FLOAT, "S1": _FLOAT, "tau": _FLOAT, "scheme": str,
    "n_phi": int, "use_projection": bool, "n_iter": int, "phi0": str, "strict_energy": bool,
    "export_every": int, "outdir": str,
}
KEYS = tuple(_TYPES)

_DEFAULTS = dict(
    geometry="diffuser", nx=None, ny=None, mesh_file=None, mu=0.01, alpha0=1000.0,
    newton_tol=1e-8, newton_max=30, eps1=0.001, eps2=0.1, beta=5.0, volume_target=0.4, eta1=1.0,
    normalize_sensitivity=True, S0=1.0, S1=0.1, tau=0.005, scheme="allen-cahn", n_phi=10,
    use_projection=True, n_iter=100, phi0="0.5", strict_energy=False, export_every=0, outdir="out",
)

_MODEL_KEYS = ("eps1", "eps2", "beta", "volume_target", "alpha0", "eta1", "normalize_sensitivity",
               "S0", "S1", "tau", "scheme", "n_phi", "use_projection")


@dataclass(frozen=True)
class RunConfig:
    """Validated run description; build one with :func:`parse_config` or
    :func:`from_values`."""

    geometry: str
    nx: int
    ny: int
    mesh_file: object
    boundary: object
    flow: FlowParams
    model: ModelParams
    n_iter: int
    phi0: Expression
    outdir: str = "out"
    export_every: int = 0
    strict_energy: bool = False
    preset: object = None
    values: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def n_phi(self):
        return self.model.n_phi

    def with_values(self, **overrides):
        """Copy with some raw keys replaced and everything re-validated."""
        vals = dict(self.values)
        vals.update(overrides)
        return from_values(vals, preset=self.preset)


def _convert(key, raw, line):
    kind = _TYPES[key]
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        return kind(raw)
    except ValueError:
        raise ConfigurationError(f"cannot read {raw!r} as {kind.__name__}", key=key, line=line) from None


def _lines(text):
    if isinstance(text, (bytes, bytearray)):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigurationError(f"config is not valid UTF-8 ({exc.reason})") from None
    for ln, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if body:
            yield ln, body


def parse_config(text, base_dir=None):
    """Parse and validate configuration text (``str`` or UTF-8 ``bytes``).

    Relative ``mesh_file`` paths are resolved against ``base_dir``.
    """
    explicit = {}
    where = {}
    for ln, body in _lines(text):
        if "=" not in body:
            raise ConfigurationError(f"expected 'key = value', got {body!r}", line=ln)
        key, raw = (s.strip() for s in body.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in _TYPES:
            raise ConfigurationError("unknown key", key=key, line=ln)
        if key in explicit:
            raise ConfigurationError("duplicate key", key=key, line=ln)
        if not raw:
            raise ConfigurationError("empty value", key=key, line=ln)
        explicit[key] = _convert(key, raw, ln)
        where[key] = ln
    preset = explicit.pop("preset", None)
    if preset is not None and preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}",
                                 key="preset", line=where["preset"])
    if explicit.get("mesh_file") and base_dir is not None:
        explicit["mesh_file"] = os.path.join(base_dir, explicit["mesh_file"])
    try:
        return from_values(explicit, preset=preset)
    except ConfigurationError as exc:
        if exc.line is None and exc.key in where:
            raise ConfigurationError(str(exc).split(": ", 1)[-1], key=exc.key, line=where[exc.key]) from None
        raise


def from_values(values, preset=None):
    """Build a :class:`RunConfig` from a dict of raw keys on top of the
    defaults (and of ``preset`` when given)."""
    vals = dict(_DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}", key="preset")
        vals.update(PRESETS[preset])
    for k, v in values.items():
        k = _ALIASES.get(k, k)
        if k not in _TYPES or k == "preset":
            raise ConfigurationError("unknown key", key=k)
        vals[k] = v

    geometry = vals["geometry"]
    if geometry not in GEOMETRIES:
        raise ConfigurationError(f"unknown geometry {geometry!r}; choose from {sorted(GEOMETRIES)}",
                                 key="geometry")
    _, _, dnx, dny = GEOMETRIES[geometry]
    vals["nx"] = dnx if vals["nx"] is None else vals["nx"]
    vals["ny"] = dny if vals["ny"] is None else vals["ny"]
    for k in ("nx", "ny"):
        if vals[k] < 2:
            raise ConfigurationError("mesh resolution must be at least 2", key=k)
    if vals["mesh_file"] and not os.path.isfile(vals["mesh_file"]):
        raise ConfigurationError(f"mesh file {vals['mesh_file']!r} does not exist", key="mesh_file")
    if vals["n_iter"] < 0:
        raise ConfigurationError("n_iter must be nonnegative", key="n_iter")
    if vals["export_every"] < 0:
        raise ConfigurationError("export_every must be nonnegative", key="export_every")
    if vals["newton_max"] < 1:
        raise ConfigurationError("newton_max must be at least 1", key="newton_max")

    boundary = BOUNDARY_PRESETS[geometry]()
    flow = FlowParams(mu=vals["mu"], alpha0=vals["alpha0"], newton_tol=vals["newton_tol"],
                      newton_max=vals["newton_max"], boundary=boundary)
    model = ModelParams(**{k: vals[k] for k in _MODEL_KEYS})
    try:
        phi0 = Expression(vals["phi0"])
    except ConfigurationError as exc:
        raise ConfigurationError(str(exc), key="phi0") from None
    return RunConfig(geometry=geometry, nx=vals["nx"], ny=vals["ny"], mesh_file=vals["mesh_file"],
                     boundary=boundary, flow=flow, model=model, n_iter=vals["n_iter"], phi0=phi0,
                     outdir=vals["outdir"], export_every=vals["export_every"],
                     strict_energy=vals["strict_energy"], preset=preset,
                     values={k: v for k, v in vals.items()})


def preset_config(name, **overrides):
    """Configuration of a built-in preset with optional key overrides."""
    return from_values(overrides, preset=name)


def format_config(config):
    """Serialize the raw values of ``config`` back to config text."""
    lines = []
    if config.preset:
        lines.append(f"preset = {config.preset}")
    for k in KEYS:
        if k == "preset":
            continue
        v = config.values.get(k)
        if v is None:
            continue
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


__all__ = ["RunConfig", "parse_config", "from_values", "preset_config", "format_config",
           "PRESETS", "PRESET_NOTES", "GEOMETRIES", "KEYS"]
