"""Flat ``key = value`` pipeline configuration.

Keys carry a section prefix (``energy.lambda``, ``solver.levels``,
``mop.min_area``, ``train.start_lr``, ``data.height``, ...). Blank lines and
``#`` comments are ignored; unknown keys are errors.
"""
import dataclasses
from dataclasses import dataclass, field

from .dataset_io import WORK_SIZE
from .flow_energy import EnergyConfig
from .flow_solver import SolverConfig
from .mop import MopConfig
from .segnet_micro import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    height: int = WORK_SIZE[0]
    width: int = WORK_SIZE[1]
    root: str = ""
    split: str = ""
    out: str = "out"

    def __post_init__(self):
        if self.height < 3 or self.width < 3:
            raise ValueError(f"working size {self.height}x{self.width} is too small")

    @property
    def size(self):
        return (self.height, self.width)


@dataclass(frozen=True)
class PipelineConfig:
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    mop: MopConfig = field(default_factory=MopConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0


SECTIONS = ("energy", "solver", "mop", "train", "data")
# config spelling -> dataclass field, where they differ
ALIASES = {("energy", "lambda"): "lam"}
REVERSE_ALIASES = {(s, f): k for (s, k), f in ALIASES.items()}


def _coerce(text, default, key):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {text!r}") from None
    return text


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text, base=None):
    """Parse config text on top of ``base`` (defaults when omitted)."""
    base = PipelineConfig() if base is None else base
    updates = {s: {} for s in SECTIONS}
    seed = base.seed
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key == "seed":
            seed = _coerce(value, 0, key)
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        fname = ALIASES.get((section, name), name)
        current = getattr(base, section)
        names = {f.name for f in dataclasses.fields(current)}
        if fname not in names or (section, fname) in REVERSE_ALIASES and fname == name:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        updates[section][fname] = _coerce(value, getattr(current, fname), key)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    parts = {s: dataclasses.replace(getattr(base, s), **updates[s]) for s in SECTIONS}
    return PipelineConfig(seed=seed, **parts)


def load_config(path, base=None):
    with open(path) as f:
        return parse_config(f.read(), base)


def dump_config(cfg):
    lines = [f"seed = {cfg.seed}"]
    for section in SECTIONS:
        part = getattr(cfg, section)
        for f in dataclasses.fields(part):
            key = REVERSE_ALIASES.get((section, f.name), f.name)
            lines.append(f"{section}.{key} = {_format(getattr(part, f.name))}")
    return "\n".join(lines) + "\n"


def override(cfg, **kw):
    """Replace ``data.*`` fields and ``seed`` (used for command-line flags)."""
    seed = kw.pop("seed", None)
    data = {k: v for k, v in kw.items() if v is not None}
    cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, **data))
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg
