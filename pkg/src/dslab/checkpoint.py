"""JSON checkpoints for transferred feature trunks and full Q-networks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .nn import CHECKPOINT_FORMAT_VERSION, DenseNet


@dataclass
class FeatureCheckpoint:
    trunk: DenseNet
    metadata: dict = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.trunk.output_dim

    @property
    def obs_dim(self) -> int:
        return self.trunk.input_dim

    def to_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "features",
            "feature_dim": self.feature_dim,
            "metadata": self.metadata,
            "trunk": self.trunk.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureCheckpoint":
        if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ContractViolation(f"unsupported checkpoint format {doc.get('format_version')!r}")
        if doc.get("kind") not in ("features", "full_model"):
            raise ContractViolation(f"not a feature checkpoint: kind={doc.get('kind')!r}")
        trunk = DenseNet.from_dict(doc["trunk"])
        return cls(trunk, dict(doc.get("metadata", {})))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "FeatureCheckpoint":
        return cls.from_dict(json.loads(Path(path).read_text()))


def save_full_model(path, trunk: DenseNet, head: np.ndarray, metadata: dict):
    doc = FeatureCheckpoint(trunk, metadata).to_dict()
    doc["kind"] = "full_model"
    doc["head"] = {"shape": list(head.shape), "weight": head.ravel().tolist()}
    Path(path).write_text(json.dumps(doc))


def load_full_model(path):
    """Returns ``(trunk, head, metadata)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != "full_model":
        raise ContractViolation("not a full-model checkpoint")
    ckpt = FeatureCheckpoint.from_dict(doc)
    head = np.asarray(doc["head"]["weight"], dtype=np.float64).reshape(doc["head"]["shape"])
    return ckpt.trunk, head, ckpt.metadata
