"""Run configuration: flat dotted keys, two named presets.

Resolution order is preset, then JSON file, then command-line overrides.
Values are type-checked against the preset defaults.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

from .checkpoint import config_hash

TINY: dict[str, Any] = {
    "seed": 0,
    "threads": 1,
    "data.max_context": 32,
    "data.max_target": 16,
    "data.doc_cap": 24,
    "data.sentence_cap": 100,
    "data.min_freq": 1,
    "data.stopword_top_percent": 1.0,
    "synth.n_docs": 100,
    "synth.vocab_size": 600,
    "synth.key_len": 2,
    "synth.fact_len": 3,
    "synth.n_distractors": 3,
    "synth.n_examples": 2000,
    "synth.key_pool": 30,
    "synth.fact_pool": 40,
    "generator.dim": 32,
    "generator.layers": 2,
    "generator.heads": 2,
    "generator.doc_pos_offset": 64,
    "generator.init_std": 0.02,
    "retriever.dim": 32,
    "retriever.embed_dim": 32,
    "retriever.init_std": 0.1,
    "index.tables": 16,
    "index.bits": 8,
    "index.probe_radius": 1,
    "warm_start.steps": 200,
    "warm_start.lr": 1e-2,
    "warm_start.batch_size": 16,
    "train.K": 4,
    "train.refresh_every": 200,
    "train.batch_size": 16,
    "train.lr_generator": 3e-3,
    "train.lr_retriever": 1e-3,
    "train.max_steps": 2000,
    "train.control_variate": "expected_reward",
    "train.retriever_update": "autodiff",
    "train.retrieval_mode": "lsh",
    "train.eval_every": 100,
    "train.backward_steps": 1000,
    "decode.K": 4,
    "decode.mode": "greedy",
    "decode.sample_topk": 10,
    "decode.temperature": 1.0,
    "decode.max_len": 16,
    "decode.correction": True,
    "decode.num_hypotheses": 16,
    "decode.mmi_mean": "prob",
    "decode.retrieval_mode": "lsh",
}

# Large-scale values kept for documentation and config plumbing; nothing in
# the test suite trains at this size.
PAPER_FAITHFUL: dict[str, Any] = {
    **TINY,
    "data.max_context": 256,
    "data.max_target": 128,
    "data.doc_cap": 100,
    "generator.dim": 1024,
    "generator.layers": 24,
    "generator.heads": 16,
    "generator.doc_pos_offset": 400,
    "retriever.dim": 768,
    "retriever.embed_dim": 768,
    "train.K": 4,
    "train.refresh_every": 200,
    "train.batch_size": 128,
    "train.lr_generator": 1e-6,
    "train.lr_retriever": 1e-6,
    "decode.K": 4,
    "decode.num_hypotheses": 16,
    "decode.sample_topk": 10,
}

PRESETS = {"tiny": TINY, "paper-faithful": PAPER_FAITHFUL}


class ConfigError(ValueError):
    pass


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        try:
            f = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
        if f != int(f):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(f)
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    return str(value)


class RunConfig:
    """Resolved flat configuration."""

    def __init__(self, values: Mapping[str, Any], preset: str = "tiny"):
        self.preset = preset
        self.values = dict(values)

    @classmethod
    def resolve(cls, preset: str = "tiny", path=None, overrides: Mapping[str, Any] | None = None) -> "RunConfig":
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        base = PRESETS[preset]
        values = dict(base)
        layers = []
        if path is not None:
            try:
                data = json.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"cannot read config {path}: {e}") from None
            if not isinstance(data, dict):
                raise ConfigError(f"{path}: expected a flat JSON object")
            layers.append(data)
        layers.append(dict(overrides or {}))
        for layer in layers:
            for k, v in layer.items():
                if k not in base:
                    raise ConfigError(f"unknown config key {k!r}")
                if v is not None:
                    values[k] = _coerce(k, v, base[k])
        cfg = cls(values, preset)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        v = self.values
        for k in ("train.K", "decode.K", "train.refresh_every", "decode.num_hypotheses", "index.tables",
                  "index.bits", "generator.layers", "generator.heads", "train.batch_size", "threads"):
            if v[k] < 1:
                raise ConfigError(f"{k} must be >= 1")
        if v["generator.dim"] % v["generator.heads"]:
            raise ConfigError("generator.dim must be divisible by generator.heads")
        if v["decode.mode"] not in ("greedy", "topk"):
            raise ConfigError("decode.mode must be greedy or topk")
        if v["train.control_variate"] not in ("expected_reward", "zero"):
            raise ConfigError("train.control_variate must be expected_reward or zero")
        if v["train.retriever_update"] not in ("autodiff", "ac"):
            raise ConfigError("train.retriever_update must be autodiff or ac")

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def section(self, prefix: str) -> dict[str, Any]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def to_dict(self) -> dict[str, Any]:
        return dict(sorted(self.values.items()))

    def hash(self) -> str:
        return config_hash(self.values)

    def header(self) -> dict[str, Any]:
        """Provenance stamped on every artifact."""
        return {"config_hash": self.hash(), "seed": self.values["seed"], "preset": self.preset}

    # builders -------------------------------------------------------------

    def synthetic(self):
        from .text import SyntheticConfig

        return SyntheticConfig(**self.section("synth"))

    def generator(self, vocab_size: int):
        from .generator import GeneratorConfig

        g = self.section("generator")
        return GeneratorConfig(vocab_size, dim=g["dim"], layers=g["layers"], heads=g["heads"],
                               doc_pos_offset=g["doc_pos_offset"], doc_cap=self["data.doc_cap"],
                               max_context=self["data.max_context"], max_target=self["data.max_target"],
                               init_std=g["init_std"])

    def backward_generator(self, vocab_size: int):
        """Reversed layout: y conditions, z SEP x is the target."""
        from .generator import GeneratorConfig

        g = self.section("generator")
        return GeneratorConfig(vocab_size, dim=g["dim"], layers=g["layers"], heads=g["heads"],
                               doc_pos_offset=g["doc_pos_offset"], doc_cap=self["data.max_target"] + 1,
                               max_context=self["data.doc_cap"] + self["data.max_context"] + 2,
                               init_std=g["init_std"])

    def retriever(self, vocab_size: int):
        from .retriever import RetrieverConfig

        return RetrieverConfig(vocab_size, **self.section("retriever"))

    def joint(self, **kw):
        from .trainer import JointConfig

        t = self.section("train")
        t.pop("backward_steps")
        return JointConfig(**{**t, "seed": self["seed"], "index_tables": self["index.tables"],
                              "index_bits": self["index.bits"], **kw})

    def decode(self, **kw):
        from .decoder import DecodeConfig

        return DecodeConfig(**{**self.section("decode"), "seed": self["seed"], **kw})
