"""Run configuration: sectioned key-value files mapped onto typed settings.

A configuration file is a YAML mapping with up to five sections —
``metric``, ``land``, ``integrator``, ``solver``, ``benchmark`` — plus the
top-level keys ``data`` (points file the model is fit to) and ``output_dir``.
Every key is optional except the metric family and its family-specific
parameters; everything else falls back to the library defaults, and the
parsed object exposes the fully resolved settings as a JSON-ready dict so
output files can embed complete provenance.

Error contract: a missing required key raises ``ValidationError`` with
``missing config key: <section>.<key>``; an unrecognized key raises
``unknown config key: <section>.<key>``; type problems name the key the same
way.  Relative paths are resolved against the configuration file's directory.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from typing import Any, Mapping

import yaml

from .bq import IntegrationConfig, RuntimeBudget, SampleBudget
from .data_io import load_mixture_components, load_points
from .errors import ValidationError
from .geodesics import SolverConfig
from .land import FitConfig, Integrator
from .metrics import EuclideanMetric, KernelMetric, Metric, MixtureMetric

__all__ = [
    "BenchmarkConfig",
    "MetricConfig",
    "RunConfig",
    "build_metric",
    "load_config",
    "parse_config",
]

METRIC_FAMILIES = ("kernel", "mixture", "euclidean")
BENCHMARK_METHODS = ("wsabi-l", "wsabi-m", "dcv", "mc")


@dataclass(frozen=True)
class MetricConfig:
    """Declarative metric description; ``build_metric`` turns it into one.

    ``data``/``components`` are file paths.  ``dim`` is only needed for a
    Euclidean metric declared without a data file to infer it from.
    """

    family: str
    sigma: float | None = None
    rho: float | None = None
    data: str | None = None
    components: str | None = None
    dim: int | None = None


@dataclass(frozen=True)
class BenchmarkConfig:
    """Settings shared by the two benchmark protocols.

    ``budgets`` are per-run sample counts for the fixed-budget protocol;
    ``limits`` (seconds) override the default runtime grid of the
    error-vs-runtime protocol; ``truth_samples`` sizes the ground-truth
    Monte Carlo pool; ``pin_blas`` restricts linear algebra to one core
    while benchmark commands run.
    """

    methods: tuple[str, ...] = BENCHMARK_METHODS
    budgets: tuple[int, ...] = (80,)
    repeats: int = 16
    seed: int = 0
    truth_samples: int = 40000
    truth: str | None = None
    workers: int = 1
    pin_blas: bool = False
    limits: tuple[float, ...] | None = None
    max_problems: int | None = None


@dataclass
class RunConfig:
    """Fully resolved run settings plus their plain-dict provenance view."""

    metric: MetricConfig
    land: FitConfig
    integrator: Integrator
    solver: SolverConfig
    benchmark: BenchmarkConfig
    data: str | None
    output_dir: str
    cache: str | None
    resolved: dict


def _fail_type(dotted: str, expected: str, value: Any) -> ValidationError:
    return ValidationError(
        f"config key {dotted} must be {expected}, got {value!r}"
    )


def _as_int(value: Any, dotted: str) -> int:
    if isinstance(value, bool):
        raise _fail_type(dotted, "an integer", value)
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        try:
            return int(value)
        except ValueError:
            raise _fail_type(dotted, "an integer", value) from None
    raise _fail_type(dotted, "an integer", value)


def _as_float(value: Any, dotted: str) -> float:
    if isinstance(value, bool):
        raise _fail_type(dotted, "a number", value)
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        # YAML 1.1 leaves exponent forms like "1e-3" as strings.
        try:
            return float(value)
        except ValueError:
            raise _fail_type(dotted, "a number", value) from None
    raise _fail_type(dotted, "a number", value)


def _as_bool(value: Any, dotted: str) -> bool:
    if isinstance(value, bool):
        return value
    raise _fail_type(dotted, "a boolean", value)


def _as_str(value: Any, dotted: str) -> str:
    if isinstance(value, str):
        return value
    raise _fail_type(dotted, "a string", value)


_COERCERS = {"int": _as_int, "float": _as_float, "bool": _as_bool, "str": _as_str}


def _type_name(field: dataclasses.Field) -> str:
    return field.type if isinstance(field.type, str) else field.type.__name__


def _section(mapping: Mapping, name: str) -> dict:
    value = mapping.get(name)
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ValidationError(f"config section {name} must be a mapping")
    for key in value:
        if not isinstance(key, str):
            raise ValidationError(f"config section {name} has non-string key {key!r}")
    return dict(value)


def _dotted(name: str, key: str) -> str:
    return f"{name}.{key}" if name else key


def _reject_unknown(section: dict, name: str, allowed) -> None:
    for key in section:
        if key not in allowed:
            raise ValidationError(f"unknown config key: {_dotted(name, key)}")


def _coerced_kwargs(section: dict, name: str, cls) -> dict:
    """Coerce a section onto a dataclass' scalar fields, naming bad keys."""
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    _reject_unknown(section, name, fields)
    kwargs = {}
    for key, value in section.items():
        coerce = _COERCERS[_type_name(fields[key])]
        kwargs[key] = coerce(value, f"{name}.{key}")
    return kwargs


def _resolve_path(value: str | None, base_dir: str) -> str | None:
    if value is None:
        return None
    return value if os.path.isabs(value) else os.path.join(base_dir, value)


def _optional_path(section: dict, name: str, key: str, base_dir: str) -> str | None:
    value = section.get(key)
    if value is None:
        return None
    return _resolve_path(_as_str(value, _dotted(name, key)), base_dir)


def _parse_metric(section: dict, base_dir: str, default_data: str | None) -> MetricConfig:
    allowed = ("family", "sigma", "rho", "data", "components", "dim")
    _reject_unknown(section, "metric", allowed)
    if section.get("family") is None:
        raise ValidationError("missing config key: metric.family")
    family = _as_str(section["family"], "metric.family")
    if family not in METRIC_FAMILIES:
        raise ValidationError(
            f"config key metric.family must be one of {METRIC_FAMILIES}, got {family!r}"
        )
    required = {"kernel": ("sigma", "rho"), "mixture": ("rho", "components"), "euclidean": ()}
    for key in required[family]:
        if section.get(key) is None:
            raise ValidationError(f"missing config key: metric.{key}")
    sigma = section.get("sigma")
    rho = section.get("rho")
    dim = section.get("dim")
    return MetricConfig(
        family=family,
        sigma=None if sigma is None else _as_float(sigma, "metric.sigma"),
        rho=None if rho is None else _as_float(rho, "metric.rho"),
        data=_optional_path(section, "metric", "data", base_dir) or default_data,
        components=_optional_path(section, "metric", "components", base_dir),
        dim=None if dim is None else _as_int(dim, "metric.dim"),
    )


def _parse_integrator(section: dict, solver: SolverConfig) -> Integrator:
    budget_keys = ("samples", "rays", "reuse_samples", "reuse_rays")
    int_fields = {f.name: f for f in dataclasses.fields(IntegrationConfig)}
    allowed = ("method", "seconds", *budget_keys, *int_fields)
    _reject_unknown(section, "integrator", allowed)

    method = _as_str(section.get("method", "wsabi-l"), "integrator.method")
    if method not in BENCHMARK_METHODS:
        raise ValidationError(
            f"config key integrator.method must be one of {BENCHMARK_METHODS}, "
            f"got {method!r}"
        )
    if section.get("seconds") is not None:
        budget = RuntimeBudget(_as_float(section["seconds"], "integrator.seconds"))
    else:
        budget = SampleBudget(
            **{
                k: _as_int(section[k], f"integrator.{k}")
                for k in budget_keys
                if section.get(k) is not None
            }
        )
    knob_section = {
        k: v for k, v in section.items() if k in int_fields and v is not None
    }
    knobs = IntegrationConfig(
        **_coerced_kwargs(knob_section, "integrator", IntegrationConfig)
    )
    return Integrator(method=method, budget=budget, config=knobs, solver=solver)


def _parse_benchmark(section: dict, base_dir: str) -> BenchmarkConfig:
    allowed = tuple(f.name for f in dataclasses.fields(BenchmarkConfig))
    _reject_unknown(section, "benchmark", allowed)
    kwargs: dict[str, Any] = {}

    if section.get("methods") is not None:
        methods = section["methods"]
        if not isinstance(methods, (list, tuple)) or not methods:
            raise _fail_type("benchmark.methods", "a non-empty list", methods)
        for m in methods:
            if m not in BENCHMARK_METHODS:
                raise ValidationError(
                    f"config key benchmark.methods must contain only "
                    f"{BENCHMARK_METHODS}, got {m!r}"
                )
        kwargs["methods"] = tuple(methods)
    if section.get("budgets") is not None:
        budgets = section["budgets"]
        if not isinstance(budgets, (list, tuple)) or not budgets:
            raise _fail_type("benchmark.budgets", "a non-empty list", budgets)
        parsed = tuple(_as_int(b, "benchmark.budgets") for b in budgets)
        if any(b < 1 for b in parsed):
            raise ValidationError("config key benchmark.budgets must be positive")
        kwargs["budgets"] = parsed
    if section.get("limits") is not None:
        limits = section["limits"]
        if not isinstance(limits, (list, tuple)) or not limits:
            raise _fail_type("benchmark.limits", "a non-empty list", limits)
        parsed_l = tuple(_as_float(s, "benchmark.limits") for s in limits)
        if any(not s > 0 for s in parsed_l):
            raise ValidationError("config key benchmark.limits must be positive")
        kwargs["limits"] = parsed_l
    for key in ("repeats", "seed", "truth_samples", "workers", "max_problems"):
        if section.get(key) is not None:
            kwargs[key] = _as_int(section[key], f"benchmark.{key}")
    if section.get("pin_blas") is not None:
        kwargs["pin_blas"] = _as_bool(section["pin_blas"], "benchmark.pin_blas")
    kwargs["truth"] = _optional_path(section, "benchmark", "truth", base_dir)

    cfg = BenchmarkConfig(**kwargs)
    for key in ("repeats", "truth_samples", "workers"):
        if getattr(cfg, key) < 1:
            raise ValidationError(f"config key benchmark.{key} must be positive")
    if cfg.max_problems is not None and cfg.max_problems < 1:
        raise ValidationError("config key benchmark.max_problems must be positive")
    return cfg


def _resolved_dict(cfg: RunConfig) -> dict:
    integrator = {
        "method": cfg.integrator.method,
        "seconds": None,
        **dataclasses.asdict(SampleBudget()),
        **dataclasses.asdict(cfg.integrator.config),
    }
    if isinstance(cfg.integrator.budget, RuntimeBudget):
        integrator["seconds"] = cfg.integrator.budget.seconds
    else:
        integrator.update(dataclasses.asdict(cfg.integrator.budget))
    benchmark = dataclasses.asdict(cfg.benchmark)
    benchmark["methods"] = list(cfg.benchmark.methods)
    benchmark["budgets"] = list(cfg.benchmark.budgets)
    benchmark["limits"] = None if cfg.benchmark.limits is None else list(cfg.benchmark.limits)
    return {
        "data": cfg.data,
        "output_dir": cfg.output_dir,
        "metric": dataclasses.asdict(cfg.metric),
        "land": dataclasses.asdict(cfg.land),
        "integrator": integrator,
        "solver": {**dataclasses.asdict(cfg.solver), "cache": cfg.cache},
        "benchmark": benchmark,
    }


def parse_config(mapping: Mapping, base_dir: str = ".") -> RunConfig:
    """Build a ``RunConfig`` from a parsed mapping.

    ``base_dir`` anchors relative paths (the config file's directory when
    loaded from disk).  The result's ``resolved`` dict re-parses to itself,
    so embedding it in an output file preserves full provenance.
    """
    if not isinstance(mapping, Mapping):
        raise ValidationError("config must be a mapping of sections")
    base_dir = os.path.abspath(base_dir)
    top_allowed = ("data", "output_dir", "metric", "land", "integrator", "solver", "benchmark")
    _reject_unknown(dict(mapping), "", top_allowed)

    data = _optional_path(dict(mapping), "", "data", base_dir)
    out = mapping.get("output_dir")
    output_dir = (
        base_dir if out is None else _resolve_path(_as_str(out, "output_dir"), base_dir)
    )

    if mapping.get("metric") is None:
        raise ValidationError("missing config key: metric")
    metric = _parse_metric(_section(mapping, "metric"), base_dir, data)

    land = FitConfig(**_coerced_kwargs(_section(mapping, "land"), "land", FitConfig))

    solver_section = _section(mapping, "solver")
    cache = _optional_path(solver_section, "solver", "cache", base_dir)
    solver_section.pop("cache", None)
    solver = SolverConfig(
        **_coerced_kwargs(solver_section, "solver", SolverConfig)
    )

    integrator = _parse_integrator(_section(mapping, "integrator"), solver)
    benchmark = _parse_benchmark(_section(mapping, "benchmark"), base_dir)

    cfg = RunConfig(
        metric=metric,
        land=land,
        integrator=integrator,
        solver=solver,
        benchmark=benchmark,
        data=data,
        output_dir=output_dir,
        cache=cache,
        resolved={},
    )
    cfg.resolved = _resolved_dict(cfg)
    return cfg


def load_config(path) -> RunConfig:
    """Parse a YAML configuration file into a ``RunConfig``."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ValidationError(f"malformed config file {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ValidationError(f"config file {path} must contain a mapping of sections")
    return parse_config(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def build_metric(cfg: MetricConfig) -> Metric:
    """Construct the metric a ``MetricConfig`` describes, loading its files."""
    if cfg.family == "kernel":
        if cfg.data is None:
            raise ValidationError("missing config key: metric.data")
        return KernelMetric(data=load_points(cfg.data), sigma=cfg.sigma, rho=cfg.rho)
    if cfg.family == "mixture":
        if cfg.components is None:
            raise ValidationError("missing config key: metric.components")
        comps = load_mixture_components(cfg.components)
        return MixtureMetric(
            weights=[c["weight"] for c in comps],
            means=[c["mean"] for c in comps],
            variances=[c["variance"] for c in comps],
            rho=cfg.rho,
        )
    if cfg.family == "euclidean":
        if cfg.dim is not None:
            return EuclideanMetric(cfg.dim)
        if cfg.data is not None:
            return EuclideanMetric(int(load_points(cfg.data).shape[1]))
        raise ValidationError("missing config key: metric.dim")
    raise ValidationError(f"unknown metric family {cfg.family!r}")
