"""Experiment configuration: TOML files, schema validation and resolution of the critical rate."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping

import jsonschema

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .branching import OffspringDistribution, SimulationParams
from .diffusion import StepParams
from .spectral import Domain, critical_beta, first_eigenpair

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT_POS = {"type": "integer", "minimum": 1}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}
_POS_VEC = {"type": "array", "items": _POS, "minItems": 1}

SCHEMA = {
    "type": "object",
    "required": ["model"],
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "required": ["domain", "lower", "upper", "offspring", "beta", "x"],
            "additionalProperties": False,
            "properties": {
                "domain": {"enum": ["interval", "box"]},
                "lower": _VEC,
                "upper": _VEC,
                "diffusion": {"type": "array", "items": _VEC},
                "offspring": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 2},
                "beta": {"oneOf": [{"const": "critical"}, {"type": "number", "minimum": 0}]},
                "x": _VEC,
            },
        },
        "step": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "h": _POS,
                "bridge_correction": {"type": "boolean"},
                "substep_cap": {"type": "integer", "minimum": 0},
                "delta": _POS,
            },
        },
        "run": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
                "threads": _INT_POS,
                "particle_cap": _INT_POS,
                "path_every": _INT_POS,
                "out": {"type": "string"},
            },
        },
        "experiments": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "simulate": {"type": "object", "properties": {
                    "horizon": _POS, "replicas": _INT_POS, "keep_paths": {"type": "boolean"}}},
                "martingale": {"type": "object", "properties": {"times": _POS_VEC, "replicas": _INT_POS}},
                "moments": {"type": "object", "properties": {
                    "count_times": _POS_VEC, "second_moment_times": _POS_VEC, "replicas": _INT_POS}},
                "survival": {"type": "object", "properties": {"times": _POS_VEC, "replicas": _INT_POS}},
                "yaglom": {"type": "object", "properties": {
                    "t": _POS, "f": {"enum": ["phi", "one", "zero"]}, "conditioned": _INT_POS,
                    "max_replicas": _INT_POS}},
                "density": {"type": "object", "properties": {
                    "t": _POS, "min_particles": _INT_POS, "bins": _INT_POS, "batch": _INT_POS,
                    "max_replicas": _INT_POS}},
                "spine": {"type": "object", "properties": {
                    "steps": _INT_POS, "chains": _INT_POS, "burn_in": {"type": "number", "minimum": 0},
                    "thin": _POS, "bins": _INT_POS}},
                "ergodic": {"type": "object", "properties": {
                    "horizon": _POS, "f": {"enum": ["phi", "one", "qv"]}, "batches": _INT_POS}},
                "clt": {"type": "object", "properties": {"n": _POS, "times": _POS_VEC, "replicas": _INT_POS}},
                "dmatrix": {"type": "object", "properties": {
                    "t": _POS, "k": {"type": "integer", "minimum": 2}, "conditioned": _INT_POS,
                    "extinction_factor": {"type": "number", "exclusiveMinimum": 1}, "max_replicas": _INT_POS}},
                "crt": {"type": "object", "properties": {
                    "n": _POS, "k": {"type": "integer", "minimum": 2}, "conditioned": _INT_POS,
                    "excursions": _INT_POS, "dt": _POS,
                    "extinction_factor": {"type": "number", "exclusiveMinimum": 1}, "max_replicas": _INT_POS}},
                "phase": {"type": "object", "properties": {
                    "ratios": _POS_VEC, "times": _POS_VEC, "replicas": _INT_POS}},
            },
        },
        "tolerances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ks_p": _POS, "chi2_p": _POS, "se_multiple": _POS, "ci_level": _POS, "min_sample": _INT_POS,
                "survival_rel": _POS, "variance_rel": _POS, "dmatrix_quantile": _POS, "dmatrix_norm": _POS,
                "dmatrix_min_t": {"type": "number", "minimum": 0}, "phase_stable_rel": _POS,
                "phase_decay_rel": _POS,
            },
        },
    },
}


class ConfigError(ValueError):
    """Invalid configuration; the message lists every schema violation."""


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def reference_dict() -> dict:
    text = resources.files("branchcrt").joinpath("data/reference.toml").read_text()
    return tomllib.loads(text)


@dataclass(frozen=True)
class ExperimentConfig:
    domain: Domain
    offspring: OffspringDistribution
    beta: float
    beta_spec: str | float
    x: tuple[float, ...]
    step: StepParams
    seed: int
    threads: int
    particle_cap: int
    path_every: int
    out: str
    experiments: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)

    @property
    def critical_rate(self) -> float:
        return critical_beta(first_eigenpair(self.domain).lam, self.offspring.m)

    def params(self, horizon: float = math.inf, beta: float | None = None) -> SimulationParams:
        return SimulationParams(self.domain, self.offspring, self.beta if beta is None else float(beta),
                                horizon=horizon, particle_cap=self.particle_cap, step=self.step,
                                seed=self.seed, path_every=self.path_every)

    def experiment(self, name: str) -> dict:
        return dict(self.experiments.get(name, {}))

    def with_overrides(self, seed: int | None = None, threads: int | None = None, out: str | None = None,
                       replicas: int | None = None) -> "ExperimentConfig":
        exps = copy.deepcopy(self.experiments)
        if replicas is not None:
            for block in exps.values():
                for key in ("replicas", "conditioned"):
                    if key in block:
                        block[key] = int(replicas)
        return replace(self, seed=self.seed if seed is None else int(seed),
                       threads=self.threads if threads is None else int(threads),
                       out=self.out if out is None else str(out), experiments=exps)

    def resolved(self) -> dict:
        """Fully resolved configuration embedded in every artifact header (the output directory is left out)."""
        return {
            "model": {
                "domain": self.domain.kind, "lower": list(self.domain.lower), "upper": list(self.domain.upper),
                "diffusion": [list(r) for r in self.domain.diffusion], "offspring": [self.offspring.pmf.get(k, 0.0) for k in range(max(self.offspring.pmf) + 1)],
                "beta": self.beta, "beta_spec": self.beta_spec, "x": list(self.x),
            },
            "step": {"h": self.step.h, "bridge_correction": self.step.bridge_correction,
                     "substep_cap": self.step.substep_cap, "delta": self.step.delta},
            "run": {"seed": self.seed, "threads": self.threads, "particle_cap": self.particle_cap,
                    "path_every": self.path_every},
            "experiments": copy.deepcopy(self.experiments),
            "tolerances": dict(self.tolerances),
        }


def build_config(raw: Mapping, base: Mapping | None = None) -> ExperimentConfig:
    """Validate `raw` (merged over `base`, the reference config by default) and resolve it."""
    merged = _merge(reference_dict() if base is None else dict(base), raw)
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(merged), key=lambda e: list(e.path))
    if errors:
        lines = [f"{'/'.join(map(str, e.path)) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))
    model = merged["model"]
    try:
        d = len(model["lower"])
        if len(model["upper"]) != d or len(model["x"]) != d:
            raise ConfigError("model: lower, upper and x must have the same length")
        if model["domain"] == "interval":
            if d != 1:
                raise ConfigError("model: an interval has one coordinate")
            coef = model.get("diffusion", [[1.0]])[0][0]
            domain = Domain.interval(model["lower"][0], model["upper"][0], coef)
        else:
            domain = Domain.box(list(zip(model["lower"], model["upper"])), model.get("diffusion"))
        _ = domain.coefficients
        if not domain.contains(model["x"])[0]:
            raise ConfigError("model: x must be interior")
        offspring = OffspringDistribution({k: float(p) for k, p in enumerate(model["offspring"])})
        step = StepParams(**merged.get("step", {}))
        lam = first_eigenpair(domain).lam
        beta_spec = model["beta"]
        beta = critical_beta(lam, offspring.m) if beta_spec == "critical" else float(beta_spec)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"model: {exc}") from exc
    run = merged.get("run", {})
    return ExperimentConfig(
        domain=domain, offspring=offspring, beta=float(beta), beta_spec=beta_spec,
        x=tuple(float(v) for v in model["x"]), step=step, seed=int(run.get("seed", 0)),
        threads=int(run.get("threads", 1)), particle_cap=int(run.get("particle_cap", 10**6)),
        path_every=int(run.get("path_every", 10)), out=str(run.get("out", "out")),
        experiments=copy.deepcopy(merged.get("experiments", {})), tolerances=dict(merged.get("tolerances", {})),
    )


def load_config(path: str | Path | None = None) -> ExperimentConfig:
    """The bundled reference config, or a TOML file layered over it."""
    if path is None:
        return build_config({})
    try:
        raw = tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return build_config(raw)


def reference_config() -> ExperimentConfig:
    return load_config(None)


def reference_tolerances() -> dict:
    return dict(reference_dict()["tolerances"])
