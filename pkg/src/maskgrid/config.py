"""Run configuration: every tunable with a documented default.

Config files are flat ``key=value`` text; CLI flags override file values,
which override defaults. Unknown keys are rejected up front.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    enc_layers: int = 4          # encoder transformer layers
    dec_layers: int = 4          # decoder transformer layers
    width: int = 128             # hidden size
    heads: int = 4               # attention heads
    vocab_text: int = 64         # caption vocabulary
    vocab_image: int = 512       # grid-token vocabulary (MASK id = vocab_image)
    seq_len_text: int = 16       # max caption length
    seq_len_target: int = 64     # grid length n (height*width)
    dropout: float = 0.0         # dropout rate, train mode only
    tie_embeddings: bool = False  # decoder output head reuses the token embedding
    # corpus
    grid_height: int = 8
    grid_width: int = 8
    corpus_train: str = "data/train.txt"
    corpus_val: str = "data/val.txt"
    corpus_test: str = "data/test.txt"
    n_train: int = 20000
    n_val: int = 1000
    n_test: int = 1000
    families: str = "stripes,checker,blocks,two-region"
    # training
    regime: str = "iter_v3"      # fully_nar | iter_v1 | iter_v2 | iter_v3 | ar
    batch_size: int = 32
    total_steps: int = 3000
    peak_lr: float = 3e-4
    warmup_ratio: float = 0.02
    weight_decay: float = 4.5e-2
    clip_norm: float = 4.0
    beta1: float = 0.9
    beta2: float = 0.96
    train_schedule: str = "linear"
    eval_interval: int = 100
    log_interval: int = 50
    checkpoint_interval: int = 1000
    # decoding / benchmarking
    infer_schedule: str = "cosine"
    algorithm: str = "revise"    # freeze | revise | ar
    iterations: int = 16         # T
    candidates: int = 1          # K
    gumbel_temp: float = 0.0
    sampling: str = "greedy"     # greedy | sample
    reranker: str = "self"       # self | oracle
    bench_repeats: int = 5
    bench_warmup: int = 2
    sweep_T: str = "4,8,16,32"
    sweep_steps: int = 1500
    # bookkeeping
    seed: int = 0
    out: str = "runs/out"
    checkpoint: str = ""
    force: bool = False

    def validate(self):
        from .training import REGIMES
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        for key in ("train_schedule", "infer_schedule"):
            v = getattr(self, key)
            if v not in ("linear", "cosine"):
                raise ConfigError(f"{key} must be 'linear' or 'cosine', got {v!r}")
        if self.algorithm not in ("freeze", "revise", "ar"):
            raise ConfigError(f"algorithm must be freeze|revise|ar, got {self.algorithm!r}")
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.grid_height * self.grid_width != self.seq_len_target:
            raise ConfigError(
                f"grid {self.grid_height}x{self.grid_width} != seq_len_target {self.seq_len_target}")
        from .data import FAMILIES
        for fam in self.family_list():
            if fam not in FAMILIES:
                raise ConfigError(f"unknown pattern family {fam!r}; valid: {', '.join(FAMILIES)}")
        if self.iterations < 1 or self.candidates < 1:
            raise ConfigError("iterations and candidates must be >= 1")
        return self

    def family_list(self) -> tuple[str, ...]:
        return tuple(f.strip() for f in self.families.split(",") if f.strip())

    def sweep_T_list(self) -> tuple[int, ...]:
        try:
            return tuple(int(v) for v in self.sweep_T.split(","))
        except ValueError:
            raise ConfigError(f"sweep_T must be comma-separated integers, got {self.sweep_T!r}")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    ftype = {f.name: f for f in fields(RunConfig)}[name].type
    if ftype in ("int", int):
        return int(raw)
    if ftype in ("float", float):
        return float(raw)
    if ftype in ("bool", bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"{name}: expected boolean, got {raw!r}")
    return raw


def parse_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def resolve_config(file_values: dict | None = None, flag_values: dict | None = None) -> RunConfig:
    """Precedence: flags > file > defaults."""
    merged = {}
    for src in (file_values or {}, flag_values or {}):
        for k, v in src.items():
            if v is None:
                continue
            if k not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = v
    cfg = RunConfig(**merged)
    return cfg.validate()
