"""
Parser for run configuration files

Line-oriented `key = value` text with sections [model] [mc] [solver]
[output] and an optional [verify]. Keys are case-sensitive (T, A, Lambda).
"""
import configparser
import hashlib
import os
from typing import Any, Dict, Optional, Union

import numpy as np
from pydantic import ValidationError

from core.errors import ConfigurationError
from database.artifact_store import ArtifactStore
from families.builtin import FAMILIES, gaussian_density
from models.model_spec import InitialDensity, MCConfig, ModelSpec
from models.paths import ParticleEnsemble
from models.run_config import ModelSection, RunConfig
from utils.logger import get_logger

logger = get_logger(__name__)

SECTIONS = ("model", "mc", "solver", "output", "verify")

# Overrides that never change results and stay out of the provenance hash
NON_PROVENANCE = {("mc", "threads"), ("output", "dir")}


def _first_error_field(exc: ValidationError) -> str:
    err = exc.errors()[0]
    return ".".join(str(part) for part in err["loc"]) or "config"


def read_config_text(path: str) -> str:
    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path}", field="config")
    with open(path, "r") as f:
        return f.read()


def config_hash(text: str, overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> str:
    """sha256 of the config text plus any command-line overrides"""
    digest = hashlib.sha256(text.encode("utf-8"))
    for section, values in sorted((overrides or {}).items()):
        for key, value in sorted(values.items()):
            if value is None or (section, key) in NON_PROVENANCE:
                continue
            digest.update(f"\n[{section}] {key} = {value}".encode("utf-8"))
    return digest.hexdigest()


def parse_run_config(text: str, overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> RunConfig:
    """Config text -> validated RunConfig; any failure is a ConfigurationError naming the field"""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse config: {exc}", field="config") from exc

    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigurationError(f"unknown sections {unknown}", field=unknown[0])
    if not parser.has_section("model"):
        raise ConfigurationError("config needs a [model] section", field="model")

    raw: Dict[str, Dict[str, Any]] = {s: dict(parser.items(s)) for s in parser.sections()}
    for section, values in (overrides or {}).items():
        raw.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        field = _first_error_field(exc)
        raise ConfigurationError(f"invalid config: {exc.errors()[0]['msg']}", field=field) from exc
    logger.info(f"Config: family={cfg.model.family}, n={cfg.model.n}, N={cfg.mc.N}, dt={cfg.mc.dt}, seed={cfg.mc.seed}")
    return cfg


def load_run_config(path: str, overrides: Optional[Dict[str, Dict[str, Any]]] = None):
    """(RunConfig, provenance hash) for a config file"""
    text = read_config_text(path)
    return parse_run_config(text, overrides), config_hash(text, overrides)


def build_model(section: ModelSection) -> ModelSpec:
    """ModelSpec for the configured family"""
    common: Dict[str, Any] = {
        "sigma0": section.sigma0,
        "sigma_amplitude": section.sigma_amplitude,
        "sigma_frequency": section.sigma_frequency,
        "drift_amplitude": section.drift_amplitude,
        "drift_frequency": section.drift_frequency,
        "kappa": section.kappa,
        "Lambda": section.Lambda,
        "eta": section.eta,
    }
    family = FAMILIES[section.family]
    n, T, alpha = section.n, section.T, np.asarray(section.alpha)
    try:
        if section.family == "kolmogorov":
            return family(n, T, alpha, coupling=section.coupling, **common)
        if section.family == "mean_reverting":
            return family(n, T, alpha, theta=section.theta, coupling=section.coupling, **common)
        if section.family == "zero_drift":
            return family(n, T, alpha, **common)
        return family(n, T, alpha, np.asarray(section.A), B=None if section.B is None else np.asarray(section.B),
                      c=None if section.c is None else np.asarray(section.c), **common)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid model: {exc.errors()[0]['msg']}",
                                 field=f"model.{_first_error_field(exc)}") from exc


def build_initial(section: ModelSection, mc: MCConfig) -> Union[InitialDensity, ParticleEnsemble]:
    """Gaussian initial density, or the ensemble stored in init_file"""
    if section.init == "gaussian":
        return gaussian_density(section.init_mean, section.init_var, section.n)
    ens = ArtifactStore.load_ensemble_csv(section.init_file)
    if ens.n != section.n or ens.N != mc.N:
        raise ConfigurationError(
            f"init_file holds {ens.N} particles in dimension {ens.n}, config asks for {mc.N} in {section.n}",
            field="model.init_file",
        )
    return ens


def mc_config(cfg: RunConfig) -> MCConfig:
    m = cfg.mc
    return MCConfig(N=m.N, dt=m.dt, seed=m.seed, threads=m.threads, thin=m.thin)
