"""Run configuration: every knob has a default, values load from a flat
``key = value`` text file (with ``include`` support), and command-line
overrides win. The effective config is persisted next to outputs so any
run can be re-derived."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError


@dataclass
class PathsSection:
    data_dir: str = "out/data"
    checkpoint: str = "out/model.npz"
    report_dir: str = "out"


@dataclass
class DataSection:
    n_train: int = 2000
    n_val: int = 200
    n_points: int = 1024
    contact_threshold: float = 0.001
    max_retries: int = 25
    approach_spread: float = 0.35


@dataclass
class CodecSection:
    n_action_bins: int = 256
    n_pos_bins: int = 256
    p_drop: float = 0.5
    bounds_margin: float = 0.05
    dropout_granularity: str = "contact"
    meta_prompt_file: str = ""


@dataclass
class ModelSection:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    n_visual_tokens: int = 16
    max_sequence_length: int = 160
    neighborhood_k: int = 32
    encoder_hidden: int = 32
    learning_rate: float = 1e-3
    warmup_steps: int = 1000
    total_steps: int = 4000
    batch_size: int = 16
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 1e-10
    min_lr_ratio: float = 0.0
    loss_on_prompt: bool = False
    dtype: str = "float32"


@dataclass
class EvalSection:
    contact_threshold: float = 0.001
    pos_acc_threshold: float = 0.01
    pos_acc_reference: str = "surface"
    samples_per_link: int = 64
    tau: float = 0.005
    mu: float = 0.5
    pyramid_edges: int = 8
    n_directions: int = 4096
    q1_min: float = 0.0
    pen_max: float = 0.005
    constrain: bool = False
    mode: str = "greedy"
    temperature: float = 1.0
    invalid_rate_ceiling: float = 1.0


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsSection = field(default_factory=PathsSection)
    data: DataSection = field(default_factory=DataSection)
    codec: CodecSection = field(default_factory=CodecSection)
    model: ModelSection = field(default_factory=ModelSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- flat key access ----------------------------------------------------

    def _resolve(self, key: str):
        if "." in key:
            section_name, _, name = key.partition(".")
            section = getattr(self, section_name, None)
            if section is None or not hasattr(section, name):
                raise ConfigError(f"unknown config key {key!r}")
            return section, name
        if not hasattr(self, key) or key in ("paths", "data", "codec",
                                             "model", "eval"):
            raise ConfigError(f"unknown config key {key!r}")
        return self, key

    def set_flat(self, key: str, raw: str) -> None:
        obj, name = self._resolve(key)
        current = getattr(obj, name)
        try:
            if isinstance(current, bool):
                if raw.lower() in ("true", "1", "yes"):
                    value = True
                elif raw.lower() in ("false", "0", "no"):
                    value = False
                else:
                    raise ValueError(raw)
            elif isinstance(current, int):
                value = int(raw)
            elif isinstance(current, float):
                value = float(raw)
            else:
                value = raw
        except ValueError:
            raise ConfigError(f"cannot parse {raw!r} for key {key!r}")
        setattr(obj, name, value)

    def flat_items(self):
        yield "seed", self.seed
        for section_name in ("paths", "data", "codec", "model", "eval"):
            section = getattr(self, section_name)
            for f in fields(section):
                yield f"{section_name}.{f.name}", getattr(section, f.name)

    def to_text(self) -> str:
        lines = ["# effective configuration"]
        for key, value in self.flat_items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    # -- bridges to module-level configs -------------------------------------

    def model_config(self, vocab_size: int):
        from .reasoning.model import ModelConfig

        m = self.model
        return ModelConfig(
            vocab_size=vocab_size, d_model=m.d_model, n_heads=m.n_heads,
            n_layers=m.n_layers, n_visual_tokens=m.n_visual_tokens,
            max_sequence_length=m.max_sequence_length,
            neighborhood_k=m.neighborhood_k,
            encoder_hidden=m.encoder_hidden,
            learning_rate=m.learning_rate, warmup_steps=m.warmup_steps,
            total_steps=m.total_steps, batch_size=m.batch_size,
            grad_clip=m.grad_clip, beta1=m.beta1, beta2=m.beta2,
            adam_eps=m.adam_eps, weight_decay=m.weight_decay,
            min_lr_ratio=m.min_lr_ratio, loss_on_prompt=m.loss_on_prompt,
            dtype=m.dtype)

    def eval_config(self):
        from .evaluation import EvalConfig

        e = self.eval
        return EvalConfig(
            contact_threshold=e.contact_threshold,
            pos_acc_threshold=e.pos_acc_threshold,
            pos_acc_reference=e.pos_acc_reference,
            samples_per_link=e.samples_per_link, tau=e.tau, mu=e.mu,
            pyramid_edges=e.pyramid_edges, n_directions=e.n_directions,
            q1_min=e.q1_min, pen_max=e.pen_max, constrain=e.constrain,
            mode=e.mode, temperature=e.temperature,
            invalid_rate_ceiling=e.invalid_rate_ceiling)

    def dataset_config(self):
        from .synthetic import DatasetConfig

        d = self.data
        return DatasetConfig(
            n_train=d.n_train, n_val=d.n_val, n_points=d.n_points,
            contact_threshold=d.contact_threshold,
            max_retries=d.max_retries,
            approach_spread=d.approach_spread)


def load_config(path: str | None = None, overrides=()) -> RunConfig:
    """Defaults, then the file (with includes), then overrides of the form
    ``key=value``."""
    cfg = RunConfig()
    if path is not None:
        for key, raw in _read_flat_file(path):
            cfg.set_flat(key, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        cfg.set_flat(key.strip(), raw.strip())
    return cfg


def _read_flat_file(path: str, _depth: int = 0):
    if _depth > 8:
        raise ConfigError(f"{path}: include depth exceeded")
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    items = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("include "):
                target = line[len("include "):].strip()
                target = os.path.join(os.path.dirname(path), target)
                items.extend(_read_flat_file(target, _depth + 1))
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key = value")
            key, _, raw = line.partition("=")
            items.append((key.strip(), raw.strip()))
    return items
