"""Run configuration: a flat key=value file with dotted sections.

Example:

    seed = 7
    data.kind = seq_global
    data.n_items = 4096
    stack.input = sequence
    stack.module.0 = conv1d:8:32:4:2:1, relu, conv1d:32:32:3:1:1
    contrastive.delays = 1..4
    schedule.mode = simultaneous

Unknown keys are rejected, every value is type-checked, and errors name
the key and line. Defaults depend on the input kind: patch-grid runs get
K=4/skip=1 (delays 2..5), 16 negatives, and lr 1.5e-4; sequence runs get
delays 1..12, 10 negatives, and lr 2e-4.

The config digest identifies the experiment: it hashes everything except
the schedule section, the seed, and the output directory, so runs that
differ only in schedule or seed can be aggregated side by side.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, fields

from .encoders import LayerSpec, StackConfig
from .data import SyntheticSpec


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        loc = ""
        if key is not None:
            loc += f" (key {key!r}"
            loc += f", line {line})" if line is not None else ")"
        super().__init__(message + loc)
        self.key = key
        self.line = line


@dataclass
class DataConfig:
    source: str = "synthetic"        # synthetic | file
    path: str = ""
    kind: str = "seq_global"
    n_items: int = 1024
    length: int = 64
    height: int = 64
    width: int = 64
    n_classes: int = 8
    embed_dim: int = 8
    noise_sigma: float = 0.5
    coherence: int = 8
    mean_scale: float = 1.0
    train_fraction: float = 0.8

    def synthetic_spec(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec(kind=self.kind, n_items=self.n_items, length=self.length,
                             height=self.height, width=self.width,
                             n_classes=self.n_classes, embed_dim=self.embed_dim,
                             noise_sigma=self.noise_sigma, coherence=self.coherence,
                             mean_scale=self.mean_scale, seed=seed)


@dataclass
class PatchingConfig:
    patch_px: int = 16
    overlap_px: int = 8
    k_max: int = 4
    skip: int = 1


@dataclass
class ContrastiveConfig:
    n_negatives: int = 10
    delays: list[int] = field(default_factory=list)
    loss_window: int = 0


@dataclass
class ContextConfig:
    mode: str = "absent"             # full | blocked | absent
    hidden_dim: int = 0              # 0 = half the top encoder width


@dataclass
class ScheduleConfig:
    mode: str = "simultaneous"       # simultaneous | iterative | cached
    epochs: int = 10
    module_epochs: list[int] = field(default_factory=list)
    batch_size: int = 32
    eval_batches: int = 20


@dataclass
class OptimizerConfig:
    lr: float = 0.0                  # 0 = input-kind default
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ProbeConfig:
    lr: float = 1e-3
    epochs: int = 50


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    data: DataConfig = field(default_factory=DataConfig)
    stack: StackConfig | None = None
    patching: PatchingConfig = field(default_factory=PatchingConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    context: ContextConfig = field(default_factory=ContextConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    @property
    def delays(self) -> list[int]:
        if self.stack.input_kind == "patch_grid":
            return list(range(1 + self.patching.skip,
                              self.patching.k_max + self.patching.skip + 1))
        return list(self.contrastive.delays)

    @property
    def lr(self) -> float:
        if self.optimizer.lr:
            return self.optimizer.lr
        return 1.5e-4 if self.stack.input_kind == "patch_grid" else 2e-4

    @property
    def n_negatives(self) -> int:
        return self.contrastive.n_negatives


_LAYER_RE = re.compile(r"^(conv1d|conv2d):(\d+):(\d+):(\d+):(\d+):(\d+)$")


def _parse_layer(token: str, key: str, line: int) -> LayerSpec:
    token = token.strip()
    if token in ("relu", "mean_pool"):
        return LayerSpec(token)
    m = _LAYER_RE.match(token)
    if not m:
        raise ConfigError(
            f"bad layer {token!r}; expected kind:cin:cout:kernel:stride:pad, "
            f"relu, or mean_pool", key, line)
    kind, cin, cout, k, s, p = m.groups()
    try:
        return LayerSpec(kind, int(cin), int(cout), int(k), int(s), int(p))
    except ValueError as e:
        raise ConfigError(str(e), key, line) from None


def _parse_int_list(text: str, key: str, line: int) -> list[int]:
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        try:
            return list(range(int(lo), int(hi) + 1))
        except ValueError:
            raise ConfigError(f"bad range {text!r}", key, line) from None
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"bad integer list {text!r}", key, line) from None


def _coerce(value: str, target_type, key: str, line: int):
    value = value.strip()
    try:
        if target_type is int:
            return int(value)
        if target_type is float:
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"expected {target_type.__name__}, got {value!r}", key, line) from None


_SECTIONS = {
    "data": DataConfig,
    "patching": PatchingConfig,
    "contrastive": ContrastiveConfig,
    "context": ContextConfig,
    "schedule": ScheduleConfig,
    "optimizer": OptimizerConfig,
    "probe": ProbeConfig,
}

_LIST_KEYS = {"contrastive.delays", "schedule.module_epochs"}


def parse_config_text(text: str, path: str = "<string>") -> RunConfig:
    cfg = RunConfig()
    modules: dict[int, list[LayerSpec]] = {}
    stack_input = "sequence"
    stack_channels = 0
    seen: set[str] = set()

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {line!r}", line=line_no)
        key, value = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ConfigError("duplicate key", key, line_no)
        seen.add(key)

        if key == "seed":
            cfg.seed = _coerce(value, int, key, line_no)
            if cfg.seed < 0:
                raise ConfigError("seed must be >= 0", key, line_no)
        elif key == "out_dir":
            cfg.out_dir = value
        elif key == "stack.input":
            if value not in ("sequence", "patch_grid"):
                raise ConfigError(f"stack.input must be sequence or patch_grid, got {value!r}",
                                  key, line_no)
            stack_input = value
        elif re.fullmatch(r"stack\.module\.\d+", key):
            idx = int(key.rsplit(".", 1)[1])
            modules[idx] = [_parse_layer(tok, key, line_no) for tok in value.split(",")]
        elif key in _LIST_KEYS:
            section, attr = key.split(".", 1)
            setattr(getattr(cfg, section), attr, _parse_int_list(value, key, line_no))
        elif "." in key:
            section, attr = key.split(".", 1)
            if section not in _SECTIONS:
                raise ConfigError("unknown key", key, line_no)
            target = getattr(cfg, section)
            try:
                ftype = {f.name: f.type for f in fields(target)}[attr]
            except KeyError:
                raise ConfigError("unknown key", key, line_no) from None
            ftype = {"int": int, "float": float, "str": str}.get(ftype, str)
            setattr(target, attr, _coerce(value, ftype, key, line_no))
        else:
            raise ConfigError("unknown key", key, line_no)

    if not modules:
        raise ConfigError("no stack.module.N entries found in config")
    indices = sorted(modules)
    if indices != list(range(len(indices))):
        raise ConfigError(f"stack.module indices must be 0..M-1, got {indices}")
    first_conv = next((l for l in modules[0] if l.kind.startswith("conv")), None)
    stack_channels = first_conv.channels_in if first_conv else 0
    cfg.stack = StackConfig([modules[i] for i in indices], stack_input, stack_channels)

    _apply_profile_defaults(cfg, seen)
    _validate(cfg)
    return cfg


def _apply_profile_defaults(cfg: RunConfig, seen: set[str]) -> None:
    grid = cfg.stack.input_kind == "patch_grid"
    if "contrastive.n_negatives" not in seen:
        cfg.contrastive.n_negatives = 16 if grid else 10
    if not grid and "contrastive.delays" not in seen:
        cfg.contrastive.delays = list(range(1, 13))


def _validate(cfg: RunConfig) -> None:
    c = cfg.contrastive
    if c.n_negatives < 1:
        raise ConfigError("must be >= 1", "contrastive.n_negatives")
    if c.loss_window < 0:
        raise ConfigError("must be >= 0", "contrastive.loss_window")
    if cfg.stack.input_kind == "sequence":
        if not c.delays or any(k < 1 for k in c.delays):
            raise ConfigError("sequence runs need positive delays", "contrastive.delays")
    else:
        if cfg.patching.k_max < 1 or cfg.patching.skip < 0:
            raise ConfigError("need k_max >= 1 and skip >= 0", "patching.k_max")
        if c.delays and c.delays != cfg.delays:
            raise ConfigError(
                "patch-grid delays come from patching.k_max/skip; remove "
                "contrastive.delays or make them match", "contrastive.delays")
    if cfg.context.mode not in ("full", "blocked", "absent"):
        raise ConfigError("must be full, blocked, or absent", "context.mode")
    if cfg.context.mode != "absent" and cfg.stack.input_kind != "sequence":
        raise ConfigError("context module requires sequence input", "context.mode")
    if cfg.schedule.mode not in ("simultaneous", "iterative", "cached"):
        raise ConfigError("must be simultaneous, iterative, or cached", "schedule.mode")
    if cfg.schedule.epochs < 1:
        raise ConfigError("must be >= 1", "schedule.epochs")
    if cfg.schedule.module_epochs and any(e < 1 for e in cfg.schedule.module_epochs):
        raise ConfigError("per-module budgets must be >= 1", "schedule.module_epochs")
    if cfg.schedule.batch_size < 1:
        raise ConfigError("must be >= 1", "schedule.batch_size")
    if cfg.optimizer.lr < 0:
        raise ConfigError("must be >= 0 (0 = default)", "optimizer.lr")
    if not 0.0 < cfg.data.train_fraction < 1.0:
        raise ConfigError("must be in (0, 1)", "data.train_fraction")
    if cfg.data.source not in ("synthetic", "file"):
        raise ConfigError("must be synthetic or file", "data.source")
    if cfg.data.source == "file" and not cfg.data.path:
        raise ConfigError("data.source=file needs data.path", "data.path")


def parse_config(path) -> RunConfig:
    with open(path) as f:
        return parse_config_text(f.read(), str(path))


def _layer_token(l: LayerSpec) -> str:
    if l.kind in ("relu", "mean_pool"):
        return l.kind
    return f"{l.kind}:{l.channels_in}:{l.channels_out}:{l.kernel}:{l.stride}:{l.pad}"


def to_flat_lines(cfg: RunConfig, include_schedule: bool = True) -> list[str]:
    """Canonical key=value rendering; the digest hashes the schedule-free form."""
    lines = [f"stack.input = {cfg.stack.input_kind}"]
    for i, specs in enumerate(cfg.stack.modules):
        lines.append(f"stack.module.{i} = " + ", ".join(_layer_token(l) for l in specs))
    for section in ("data", "patching", "contrastive", "context", "optimizer", "probe"):
        obj = getattr(cfg, section)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            lines.append(f"{section}.{f.name} = {v}")
    if include_schedule:
        lines.append(f"seed = {cfg.seed}")
        lines.append(f"out_dir = {cfg.out_dir}")
        for f in fields(cfg.schedule):
            v = getattr(cfg.schedule, f.name)
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            lines.append(f"schedule.{f.name} = {v}")
    return sorted(lines)


def config_digest(cfg: RunConfig) -> str:
    """SHA-256 over the experiment identity (everything but schedule/seed/out_dir)."""
    blob = "\n".join(to_flat_lines(cfg, include_schedule=False)).encode()
    return hashlib.sha256(blob).hexdigest()
