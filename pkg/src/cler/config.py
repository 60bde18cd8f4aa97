"""Flat ``key = value`` experiment configuration and named presets."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .methods import CLER_CHOICES, METHODS, MethodConfig
from .model import ArchitectureConfig

PRESETS = {
    # desk-scale benchmark used by the acceptance suite
    "toy-5x2": """
dataset = synthetic
num_classes = 10
num_tasks = 5
per_class = 200
test_per_class = 100
image_size = 16
noise = 0.4
contrast = 0.6
data_seed = 0
backbone = tiny_cnn
widths = 16, 32, 64
arms = finetune, er, er+rotation
buffer_size = 200
batch_size = 10
lr = 0.05
lambda_r = 1.0
crop_padding = 2
seeds = 0-9
""",
    # full-scale hyperparameters; needs CIFAR-100 exported as class folders
    "cifar100-paper": """
dataset = folder
data_root = data/cifar100
num_classes = 100
num_tasks = 10
image_size = 32
normalize_mean = 0.5071, 0.4865, 0.4409
normalize_std = 0.2673, 0.2564, 0.2762
backbone = resnet18_like
nf = 64
arms = finetune, joint_online, joint_offline, er_ace, er_ace+jigsaw
buffer_size = 500, 2000
batch_size = 10
lr = 0.01
crop_padding = 4
joint_offline.epochs = 30
er_ace+jigsaw.lambda_r = 1.5
seeds = 0-9
""",
}

METHOD_KEYS = {f.name for f in fields(MethodConfig)} - {"method", "cler", "buffer_size"}
PROBE_CODES = {"g": "gradient_alignment", "i": "importance", "p": "geometric_median", "r": "recovery"}


@dataclass
class DatasetSpec:
    kind: str = "synthetic"  # synthetic | folder | cache
    num_classes: int = 10
    num_tasks: int = 5
    per_class: int = 200
    test_per_class: Optional[int] = None
    image_size: int = 16
    noise: float = 0.25
    contrast: float = 1.0
    data_seed: int = 0
    data_root: Optional[str] = None
    test_fraction: float = 0.2
    class_order: Optional[tuple] = None
    normalize_mean: Optional[tuple] = None
    normalize_std: Optional[tuple] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProbeSettings:
    enabled: tuple = ()
    batches: int = 10
    drop_fraction: float = 0.3
    retrain_batches: int = 20
    recovery_task: Optional[int] = None  # default: the last task
    recovery_lr: Optional[float] = None  # default: the arm's lr


@dataclass
class ArmSpec:
    method: str
    cler: str
    overrides: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return self.method if self.cler == "none" else f"{self.method}+{self.cler}"


@dataclass
class ExperimentPlan:
    dataset: DatasetSpec
    arms: list
    buffer_sizes: list
    seeds: list
    method_defaults: dict
    architecture: dict
    probes: ProbeSettings
    out_dir: str = "results"

    def cells(self) -> list:
        """Expand into ``(arm, buffer_size, seed, MethodConfig)`` tuples."""
        out = []
        for arm in self.arms:
            values = dict(self.method_defaults)
            values.update(arm.overrides)
            values["method"], values["cler"] = arm.method, arm.cler
            if arm.cler == "none":
                values["lambda_r"] = 0.0
            buffers = self.buffer_sizes if arm.method in ("er", "er_ace") else [0]
            for buf in buffers:
                for seed in self.seeds:
                    cfg = MethodConfig.from_dict({**values, "buffer_size": buf})
                    out.append((arm, buf, seed, cfg))
        return out


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        values[key] = value
    return values


def read_config(source: str) -> dict:
    """Read a config file, or a preset when ``source`` names one."""
    path = Path(source)
    if path.is_file():
        return parse_config_text(path.read_text())
    if source in PRESETS:
        return parse_config_text(PRESETS[source])
    raise ConfigError(f"config {source!r} is neither a file nor a preset ({', '.join(PRESETS)})")


def _list(value: str) -> list:
    return [v.strip() for v in value.split(",") if v.strip()]


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def parse_seeds(value: str) -> list:
    seeds = []
    for part in _list(value):
        span = re.fullmatch(r"(\d+)\s*-\s*(\d+)", part)
        try:
            seeds.extend(range(int(span[1]), int(span[2]) + 1) if span else [int(part)])
        except ValueError:
            raise ConfigError(f"bad seed {part!r}") from None
    if not seeds:
        raise ConfigError("seed list is empty")
    return seeds


def _convert_method_value(key: str, value: str):
    kinds = {f.name: f.type for f in fields(MethodConfig)}
    kind = kinds[key]
    try:
        if key == "augment":
            return _bool(value)
        if "int" in str(kind):
            return None if value.lower() == "none" else int(value)
        if "float" in str(kind):
            return float(value)
    except ValueError as err:
        raise ConfigError(f"{key}: {err}") from None
    return value


def parse_arm(label: str) -> ArmSpec:
    method, _, cler = label.partition("+")
    cler = cler or "none"
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r} in arm {label!r}")
    if cler not in CLER_CHOICES:
        raise ConfigError(f"unknown cler family {cler!r} in arm {label!r}")
    return ArmSpec(method, cler)


def build_plan(values: dict, overrides: Optional[dict] = None) -> ExperimentPlan:
    """Turn raw config values plus command-line overrides into a plan.

    Overrides use the same keys as the file, with ``method`` and ``cler``
    collapsing the arm list to a single arm.
    """
    values = dict(values)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    method_override = overrides.pop("method", None)
    cler_override = overrides.pop("cler", None)
    values.update({k: str(v) for k, v in overrides.items()})
    consumed = set()

    def take(key, default=None):
        consumed.add(key)
        return values.get(key, default)

    ds = DatasetSpec()
    ds.kind = take("dataset", ds.kind)
    if ds.kind not in ("synthetic", "folder", "cache"):
        raise ConfigError(f"unknown dataset kind {ds.kind!r}")
    try:
        for key in ("num_classes", "num_tasks", "per_class", "image_size", "data_seed"):
            if key in values:
                setattr(ds, key, int(take(key)))
        if "test_per_class" in values:
            ds.test_per_class = int(take("test_per_class"))
        for key in ("noise", "contrast", "test_fraction"):
            if key in values:
                setattr(ds, key, float(take(key)))
        ds.data_root = take("data_root")
        if "class_order" in values:
            ds.class_order = tuple(int(c) for c in _list(take("class_order")))
        if "normalize_mean" in values:
            ds.normalize_mean = tuple(float(c) for c in _list(take("normalize_mean")))
        if "normalize_std" in values:
            ds.normalize_std = tuple(float(c) for c in _list(take("normalize_std")))
    except ValueError as err:
        raise ConfigError(f"dataset: {err}") from None
    if ds.kind != "synthetic" and not ds.data_root:
        raise ConfigError(f"dataset kind {ds.kind!r} needs data_root")

    arch = {}
    if "backbone" in values:
        arch["backbone"] = take("backbone")
    try:
        if "widths" in values:
            arch["widths"] = tuple(int(w) for w in _list(take("widths")))
        for key in ("nf", "kernel_size"):
            if key in values:
                arch[key] = int(take(key))
    except ValueError as err:
        raise ConfigError(f"architecture: {err}") from None

    method_defaults = {}
    for key in METHOD_KEYS:
        if key in values:
            method_defaults[key] = _convert_method_value(key, take(key))
    arms = [parse_arm(a) for a in _list(take("arms", "er"))]
    if "method" in values:
        arms = [parse_arm(take("method") + ("+" + values["cler"] if values.get("cler", "none") != "none" else ""))]
        consumed.add("cler")
    if method_override or cler_override:
        if method_override is None:
            if len({a.method for a in arms}) != 1:
                raise ConfigError("--cler needs --method when the config lists several methods")
            method_override = arms[0].method
        arms = [parse_arm(method_override + ("" if cler_override in (None, "none") else "+" + cler_override))]
    arm_labels = {a.label: a for a in arms} | {a.method: None for a in arms}

    for key in list(values):
        prefix, dot, sub = key.rpartition(".")
        if not dot or prefix not in arm_labels:
            continue
        consumed.add(key)
        if sub not in METHOD_KEYS:
            raise ConfigError(f"{key}: {sub!r} is not a method setting")
        targets = [a for a in arms if a.label == prefix or a.method == prefix]
        for arm in targets:
            arm.overrides[sub] = _convert_method_value(sub, values[key])

    try:
        buffer_sizes = [int(b) for b in _list(take("buffer_size", "0"))]
    except ValueError as err:
        raise ConfigError(f"buffer_size: {err}") from None
    seeds = parse_seeds(take("seeds", "0-9"))

    probes = ProbeSettings()
    codes = _list(take("probes", ""))
    unknown = [c for c in codes if c not in PROBE_CODES]
    if unknown:
        raise ConfigError(f"unknown probes {unknown}; expected a subset of g,i,p,r")
    probes.enabled = tuple(codes)
    try:
        if "probe_batches" in values:
            probes.batches = int(take("probe_batches"))
        if "drop_fraction" in values:
            probes.drop_fraction = float(take("drop_fraction"))
        if "retrain_batches" in values:
            probes.retrain_batches = int(take("retrain_batches"))
        if "recovery_task" in values:
            probes.recovery_task = int(take("recovery_task"))
        if "recovery_lr" in values:
            probes.recovery_lr = float(take("recovery_lr"))
    except ValueError as err:
        raise ConfigError(f"probes: {err}") from None

    out_dir = take("out", "results")
    leftover = set(values) - consumed
    if leftover:
        raise ConfigError(f"unknown config keys: {sorted(leftover)}")

    ArchitectureConfig(num_classes=ds.num_classes, image_size=ds.image_size, **arch)
    plan = ExperimentPlan(ds, arms, buffer_sizes, seeds, method_defaults, arch, probes, out_dir)
    plan.cells()  # validates every cell's MethodConfig
    return plan
