"""Run configuration: a single JSON document with a stable content hash.

Schema (every key optional; defaults shown by ``RunConfig().to_dict()``)::

    {
      "seed": 0,
      "out_dir": "runs",
      "data":      {"manifest": path, "reports": path,
                    "ground_truth": path | null,
                    "teacher_replies": {"teacher_a": path, "teacher_b": path} | null},
      "split":     {"train": 0.7, "val": 0.15, "test": 0.15},
      "encoding":  EncodingConfig fields,
      "providers": {"kind": "toy" | "file", "d": 512,
                    "slice_embeddings": path, "text_embeddings": path},
      "model":     ModelSpec fields,
      "train":     TrainConfig fields except seed,
      "labels":    {"teachers": "replay" | "http", "workers": 4},
      "eval":      {"ks": [1, 5, 10], "probe_c": 1.0},
      "rag":       {"pool_size": 50, "k": 5, "lam": 0.7, "mmr": true,
                    "generator": "nearest" | "http", "multimodal": false,
                    "best_of": 4, "max_retries": 3}
    }

Relative data paths resolve against the config file's directory. The hash
covers everything except ``out_dir``; secrets never appear in a config
(HTTP endpoints read their credentials from the environment).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..contrastive.model import ModelSpec
from ..contrastive.train import TrainConfig
from ..errors import ConfigError
from ..rag.index import MmrConfig
from ..slices import EncodingConfig

_SECTIONS = ("data", "split", "encoding", "providers", "model", "train", "labels", "eval", "rag")


def _train_defaults() -> dict:
    d = asdict(TrainConfig())
    d.pop("seed")
    d["betas"] = list(d["betas"])
    return d


def _defaults() -> dict:
    return {
        "data": {"manifest": None, "reports": None, "ground_truth": None, "teacher_replies": None},
        "split": {"train": 0.7, "val": 0.15, "test": 0.15},
        "encoding": EncodingConfig().to_dict(),
        "providers": {"kind": "toy", "d": 512, "slice_embeddings": None, "text_embeddings": None},
        "model": ModelSpec().to_dict(),
        "train": _train_defaults(),
        "labels": {"teachers": "replay", "workers": 4},
        "eval": {"ks": [1, 5, 10], "probe_c": 1.0},
        "rag": {"pool_size": 50, "k": 5, "lam": 0.7, "mmr": True, "generator": "nearest",
                "multimodal": False, "best_of": 4, "max_retries": 3},
    }


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    sections: dict = field(default_factory=_defaults)

    # -- construction ---------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict, base_dir=None) -> "RunConfig":
        unknown = set(raw) - set(_SECTIONS) - {"seed", "out_dir"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        sections = _defaults()
        for name in _SECTIONS:
            given = raw.get(name) or {}
            if not isinstance(given, dict):
                raise ConfigError(f"section '{name}' must be an object")
            extra = set(given) - set(sections[name])
            if extra:
                raise ConfigError(f"unknown keys in '{name}': {sorted(extra)}")
            sections[name].update(copy.deepcopy(given))
        cfg = cls(int(raw.get("seed", 0)), str(raw.get("out_dir", "runs")), sections)
        if base_dir is not None:
            cfg._resolve_paths(Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = cls.from_dict(raw, base_dir=path.parent)
        if not Path(cfg.out_dir).is_absolute():
            cfg.out_dir = str(path.parent / cfg.out_dir)
        return cfg

    def _resolve_paths(self, base: Path) -> None:
        data = self.sections["data"]
        for key in ("manifest", "reports", "ground_truth"):
            if data.get(key):
                data[key] = str((base / data[key]).resolve())
        if data.get("teacher_replies"):
            data["teacher_replies"] = {k: str((base / v).resolve())
                                       for k, v in data["teacher_replies"].items()}
        prov = self.sections["providers"]
        for key in ("slice_embeddings", "text_embeddings"):
            if prov.get(key):
                prov[key] = str((base / prov[key]).resolve())

    def validate(self) -> None:
        s = self.sections
        try:
            self.encoding
            self.model_spec
            self.train_config
            self.mmr
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        fr = s["split"]
        if min(fr.values()) <= 0 or abs(sum(fr.values()) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be positive and sum to 1, got {fr}")
        if s["providers"]["kind"] not in ("toy", "file"):
            raise ConfigError("providers.kind must be 'toy' or 'file'")
        if s["labels"]["teachers"] not in ("replay", "http"):
            raise ConfigError("labels.teachers must be 'replay' or 'http'")
        if s["rag"]["generator"] not in ("nearest", "http"):
            raise ConfigError("rag.generator must be 'nearest' or 'http'")
        if s["model"]["max_slices"] < self.encoding.max_slices:
            raise ConfigError("model.max_slices is smaller than the encoding's slice count")

    # -- typed views ----------------------------------------------------
    @property
    def encoding(self) -> EncodingConfig:
        return EncodingConfig.from_dict(self.sections["encoding"])

    @property
    def model_spec(self) -> ModelSpec:
        kw = dict(self.sections["model"])
        if self.sections["providers"]["kind"] == "toy":
            kw["d"] = self.sections["providers"]["d"]
        return ModelSpec(**kw)

    @property
    def train_config(self) -> TrainConfig:
        kw = dict(self.sections["train"])
        kw["betas"] = tuple(kw["betas"])
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in kw.items() if k in names}, seed=self.seed)

    @property
    def mmr(self) -> MmrConfig:
        r = self.sections["rag"]
        return MmrConfig(r["pool_size"], r["k"], r["lam"], r["mmr"])

    def __getitem__(self, name: str) -> dict:
        return self.sections[name]

    # -- identity -------------------------------------------------------
    def to_dict(self) -> dict:
        return {"seed": self.seed, "out_dir": self.out_dir, **copy.deepcopy(self.sections)}

    def canonical(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.hash
