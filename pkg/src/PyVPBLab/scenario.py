"""
Experiment configuration: INI sections mapped onto AutoInit objects, with every violation
collected before anything runs.
"""
import configparser
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional

from PyVPBLab.autoinit import AutoInit, ConfigError
from PyVPBLab.collision_core import GUARANTEED_GAMMA, KernelConfig
from PyVPBLab.decay import DataProfile, KGrid, log_uniform_kgrid
from PyVPBLab.nonlinear_1d import NonlinearConfig, desk_ell
from PyVPBLab.velocity_space import VelocityGrid, WeightSpec, build_grid

logger = logging.getLogger(__name__)

ENV_CACHE_DIR = "VPBLAB_CACHE_DIR"
ENV_THREADS = "VPBLAB_THREADS"

MIN_DECAY_ELL0 = 2.5


class KernelSection(KernelConfig):
    R: float = 6.0
    n: int = 16

    def violations(self) -> List[str]:
        problems = super().violations()
        if not self.R > 0:
            problems.append("R must be positive, got {}".format(self.R))
        if self.n < 2:
            problems.append("n must be at least 2, got {}".format(self.n))
        return problems

    def kernel_config(self) -> KernelConfig:
        return KernelConfig(**{name: getattr(self, name) for name in KernelConfig.fields()})

    def grid(self) -> VelocityGrid:
        return build_grid(self.R, self.n)


class WeightSection(AutoInit):
    q: float = 0.0
    lam: float = 0.01
    theta: float = 0.25
    ell0: float = 3.0
    ells: tuple = (0.0, 1.0, 2.0)

    def violations(self) -> List[str]:
        problems = []
        if not 0.0 < self.theta <= 0.25:
            problems.append("theta = {} violates the constraint 0 < theta <= 1/4".format(self.theta))
        if not self.lam > 0:
            problems.append("lam must be positive for experiment runs, got {}".format(self.lam))
        if self.ell0 <= MIN_DECAY_ELL0:
            problems.append("ell0 = {} violates the constraint ell0 > 5/2 of the decay runs".format(self.ell0))
        if any(ell < 0 for ell in self.ells):
            problems.append("ells must be non-negative, got {}".format(self.ells))
        return problems

    def weight_spec(self, gamma: float, tau: float = 0.0) -> WeightSpec:
        return WeightSpec(tau=tau, q=self.q, lam=self.lam, theta=self.theta, gamma=gamma)


class ModalSection(AutoInit):
    k_min: float = 0.02
    k_max: float = 8.0
    n_k: int = 24
    T: float = 200.0
    dt: float = 0.0  # 0 selects the stability bound of each mode
    n_stamps: int = 60
    fit_start: float = 20.0
    fit_end: float = 200.0
    J: float = 2.0
    p: float = 0.0  # 0 derives p = ell0 - J + 1
    eps: float = 0.0  # 0 derives eps from the fitted Lyapunov constant
    width: float = 1.0
    a_shape: str = "linear"
    neutral: bool = True
    lyapunov_k_min: float = 0.05
    lyapunov_k_max: float = 5.0
    lyapunov_n_k: int = 20
    lyapunov_states: int = 10
    lyapunov_T: float = 10.0
    calibration_samples: int = 1000

    def violations(self) -> List[str]:
        problems = []
        if not 0 < self.k_min < self.k_max:
            problems.append("need 0 < k_min < k_max, got {} and {}".format(self.k_min, self.k_max))
        if self.n_k < 2:
            problems.append("n_k must be at least 2, got {}".format(self.n_k))
        if not self.T > 0:
            problems.append("T must be positive, got {}".format(self.T))
        if self.dt < 0:
            problems.append("dt must be non-negative, got {}".format(self.dt))
        if not 0 <= self.fit_start < self.fit_end <= self.T:
            problems.append("fit window [{}, {}] must lie inside [0, T = {}]".format(
                self.fit_start, self.fit_end, self.T))
        if not self.J > 0:
            problems.append("J must be positive, got {}".format(self.J))
        if self.eps < 0:
            problems.append("eps must be non-negative, got {}".format(self.eps))
        if self.a_shape not in ("linear", "constant"):
            problems.append("a_shape must be 'linear' or 'constant', got {!r}".format(self.a_shape))
        if not 0 < self.lyapunov_k_min < self.lyapunov_k_max:
            problems.append("need 0 < lyapunov_k_min < lyapunov_k_max")
        return problems

    def kgrid(self) -> KGrid:
        return log_uniform_kgrid(self.k_min, self.k_max, self.n_k)

    def profile(self) -> DataProfile:
        return DataProfile(width=self.width, a_shape=self.a_shape, neutral=self.neutral)


class NonlinearSection(NonlinearConfig):
    R: float = 4.5
    n: int = 7
    n_theta: int = 4
    n_phi: int = 4

    def violations(self) -> List[str]:
        problems = super().violations()
        if not self.R > 0:
            problems.append("R must be positive, got {}".format(self.R))
        if self.n < 2:
            problems.append("n must be at least 2, got {}".format(self.n))
        return problems

    def grid(self) -> VelocityGrid:
        return build_grid(self.R, self.n)

    def kernel_config(self, kernel: KernelConfig) -> KernelConfig:
        return kernel.replace(n_theta=self.n_theta, n_phi=self.n_phi)

    def solver_config(self) -> NonlinearConfig:
        return NonlinearConfig(**{name: getattr(self, name) for name in NonlinearConfig.fields()})


class OutputSection(AutoInit):
    directory: str = "vpblab-output"
    cache_dir: str = ""  # empty means <directory>/cache
    seed: int = 0
    threads: int = 1

    def violations(self) -> List[str]:
        if self.threads == 0 or self.threads < -1:
            return ["threads must be positive or -1, got {}".format(self.threads)]
        return []

    @property
    def cache_path(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else Path(self.directory) / "cache"


SECTIONS = {
    "kernel": KernelSection,
    "weight": WeightSection,
    "modal": ModalSection,
    "nonlinear": NonlinearSection,
    "output": OutputSection,
}

# Keys of [nonlinear] that default to the values of other sections.
SHARED_NONLINEAR_KEYS = {"gamma": "kernel", "q": "weight", "lam": "weight", "theta": "weight", "ell0": "weight"}


@dataclass
class ExperimentConfig:
    kernel: KernelSection = field(default_factory=KernelSection)
    weight: WeightSection = field(default_factory=WeightSection)
    modal: ModalSection = field(default_factory=ModalSection)
    nonlinear: NonlinearSection = field(default_factory=NonlinearSection)
    output: OutputSection = field(default_factory=OutputSection)
    source: Optional[str] = None

    @property
    def p(self) -> float:
        return self.modal.p if self.modal.p > 0 else self.weight.ell0 - self.modal.J + 1.0

    def as_dict(self) -> Dict[str, Dict]:
        return {name: getattr(self, name).as_dict() for name in SECTIONS}

    def cross_violations(self) -> List[str]:
        problems = []
        if self.p <= 1:
            problems.append("p = ell0 - J + 1 = {} must exceed 1; raise ell0 or lower J".format(self.p))
        if self.modal.p > 0 and abs(self.weight.ell0 - (self.modal.J + self.modal.p - 1.0)) > 1e-9:
            problems.append("ell0 = {} must equal J + p - 1 = {}".format(
                self.weight.ell0, self.modal.J + self.modal.p - 1.0))
        if not self.kernel.gamma < 0:
            problems.append("gamma must be negative")
        return problems

    def warn_outside_guarantees(self):
        gamma = self.kernel.gamma
        if not GUARANTEED_GAMMA[0] <= gamma < GUARANTEED_GAMMA[1]:
            logger.warning("gamma = %g is beyond the guaranteed range [-2, 0); results are exploratory.", gamma)


def _read_ini(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except FileNotFoundError:
        raise ConfigError(["Configuration file not found: {}".format(path)])
    except configparser.Error as e:
        raise ConfigError(["Malformed configuration file {}: {}".format(path, e)])
    return parser


def _build_section(name: str, values: Mapping[str, str], strict: bool, problems: List[str]):
    cls = SECTIONS[name]
    known = cls.fields()
    accepted = {}
    for (key, value) in values.items():
        if key in known:
            accepted[key] = value
        elif strict:
            problems.append("[{}] unknown key: {}".format(name, key))
        else:
            logger.warning("Ignoring unknown key %s in section [%s].", key, name)
    try:
        return cls(**accepted)
    except ConfigError as e:
        problems.extend("[{}] {}".format(name, v) for v in e.violations)
        return None


def config_from_mapping(sections: Mapping[str, Mapping[str, str]], strict: bool = False,
                        source: str = None) -> ExperimentConfig:
    """
    Build and validate a configuration from section -> key -> value strings.
    :raises ConfigError: with every violation found.
    """
    problems = []
    for name in sections:
        if name not in SECTIONS:
            if strict:
                problems.append("unknown section: [{}]".format(name))
            else:
                logger.warning("Ignoring unknown section [%s].", name)
    built = {}
    for name in ("kernel", "weight", "modal", "output"):
        built[name] = _build_section(name, sections.get(name, {}), strict, problems)

    nonlinear_values = dict(sections.get("nonlinear", {}))
    for (key, origin) in SHARED_NONLINEAR_KEYS.items():
        if key not in nonlinear_values and built[origin] is not None:
            nonlinear_values[key] = getattr(built[origin], key)
    if "ell" not in nonlinear_values and built["kernel"] is not None and built["weight"] is not None:
        gamma = built["kernel"].gamma
        if gamma < 0:
            nonlinear_values["ell"] = desk_ell(float(nonlinear_values.get("ell0", built["weight"].ell0)), gamma)
    built["nonlinear"] = _build_section("nonlinear", nonlinear_values, strict, problems)

    if problems:
        raise ConfigError(problems)
    config = ExperimentConfig(source=source, **built)
    problems.extend(config.cross_violations())
    if problems:
        raise ConfigError(problems)
    config.warn_outside_guarantees()
    return config


def parse_config(path, strict: bool = False) -> ExperimentConfig:
    """
    Read an INI experiment file. Missing sections and keys take their defaults.
    :param strict: reject unknown sections and keys instead of ignoring them.
    :raises ConfigError: listing every violation, not only the first.
    """
    parser = _read_ini(path)
    sections = {name: dict(parser.items(name)) for name in parser.sections()}
    config = config_from_mapping(sections, strict, str(path))
    logger.info("Configuration from %s: %s", path, config.as_dict())
    return config


def apply_overrides(config: ExperimentConfig, cache_dir: str = None, threads: int = None, seed: int = None,
                    environ: Mapping[str, str] = None) -> ExperimentConfig:
    """Command line values win over the environment, which wins over the file."""
    environ = os.environ if environ is None else environ
    changes = {}
    if environ.get(ENV_CACHE_DIR):
        changes["cache_dir"] = environ[ENV_CACHE_DIR]
    if environ.get(ENV_THREADS):
        changes["threads"] = environ[ENV_THREADS]
    if cache_dir is not None:
        changes["cache_dir"] = cache_dir
    if threads is not None:
        changes["threads"] = threads
    if seed is not None:
        changes["seed"] = seed
    if changes:
        try:
            config.output = config.output.replace(**changes)
        except ConfigError as e:
            raise ConfigError(["[output] {}".format(v) for v in e.violations])
    return config
