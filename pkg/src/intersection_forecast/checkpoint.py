"""Save and restore trained model weights."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .exceptions import MissingCheckpoint, SchemaVersionMismatch, ShapeMismatch
from .model import ModelConfig, ModelKind, build_model

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
WEIGHTS_FILE = "weights.json"
BLOB_DTYPE = "<f4"


class CheckpointManager:
    """Manages checkpoint directories under one root."""

    def __init__(self, checkpoint_dir: str = "./checkpoints"):
        """
        Initialize checkpoint manager.

        Args:
            checkpoint_dir: Directory holding one sub-directory per checkpoint
        """
        self.checkpoint_dir = Path(checkpoint_dir)
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)

    def path_for(self, name: str) -> Path:
        return self.checkpoint_dir / name

    def exists(self, name: str) -> bool:
        return (self.path_for(name) / WEIGHTS_FILE).exists()

    def save(
        self,
        model: nn.Module,
        model_kind: ModelKind,
        model_config: ModelConfig,
        seed: int,
        name: Optional[str] = None,
    ) -> Path:
        """
        Write a checkpoint.

        The manifest lists every parameter with its shape and blob file; each
        blob holds little-endian float32 values in row-major order.

        Args:
            model: Trained model
            model_kind: Kind the model was built as
            model_config: Configuration the model was built with
            seed: Initialization seed
            name: Checkpoint name (defaults to the model kind)

        Returns:
            Checkpoint directory
        """
        kind = ModelKind(model_kind)
        target = self.path_for(name or kind.value)
        blob_dir = target / "blobs"
        blob_dir.mkdir(parents=True, exist_ok=True)

        parameters = []
        for index, (param_name, tensor) in enumerate(model.state_dict().items()):
            values = tensor.detach().cpu().numpy().astype(BLOB_DTYPE)
            blob = f"blobs/p{index:04d}.bin"
            (target / blob).write_bytes(np.ascontiguousarray(values).tobytes())
            parameters.append({"name": param_name, "shape": list(values.shape), "blob": blob})

        manifest = {
            "schema_version": SCHEMA_VERSION,
            "model_kind": kind.value,
            "seed": seed,
            "config": model_config.model_dump(mode="json"),
            "dtype": BLOB_DTYPE,
            "parameters": parameters,
        }
        (target / WEIGHTS_FILE).write_text(json.dumps(manifest, indent=2))
        logger.info(f"Saved {kind.value} checkpoint with {len(parameters)} tensors to {target}")
        return target

    def read_manifest(self, name: str) -> Dict[str, Any]:
        """
        Read and check a checkpoint manifest.

        Raises:
            MissingCheckpoint: If the checkpoint doesn't exist
            SchemaVersionMismatch: If it uses another schema version
        """
        manifest_path = self.path_for(name) / WEIGHTS_FILE
        if not manifest_path.exists():
            raise MissingCheckpoint(f"No checkpoint named {name} in {self.checkpoint_dir}")
        manifest = json.loads(manifest_path.read_text())
        version = manifest.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaVersionMismatch(
                f"Checkpoint schema_version {version}, expected {SCHEMA_VERSION}"
            )
        return manifest

    def load(self, name: str) -> Tuple[nn.Module, ModelKind, ModelConfig]:
        """
        Rebuild a model from a checkpoint.

        Returns:
            (model, model kind, model config)

        Raises:
            MissingCheckpoint: If the checkpoint doesn't exist
            SchemaVersionMismatch: If it uses another schema version
            ShapeMismatch: If a blob disagrees with the recorded or expected shape
        """
        manifest = self.read_manifest(name)
        root = self.path_for(name)
        kind = ModelKind(manifest["model_kind"])
        config = ModelConfig(**manifest["config"])
        model = build_model(kind, config, seed=manifest["seed"])
        expected = model.state_dict()

        state = {}
        for entry in manifest["parameters"]:
            raw = np.frombuffer((root / entry["blob"]).read_bytes(), dtype=manifest["dtype"])
            shape = tuple(entry["shape"])
            reference = expected.get(entry["name"])
            fits = reference is not None and tuple(reference.shape) == shape
            if not fits or raw.size != int(np.prod(shape)):
                raise ShapeMismatch(f"Checkpoint tensor {entry['name']} does not fit the model")
            state[entry["name"]] = torch.from_numpy(raw.reshape(shape).copy()).to(reference.dtype)
        missing = set(expected) - set(state)
        if missing:
            raise ShapeMismatch(f"Checkpoint lacks tensors {sorted(missing)}")

        model.load_state_dict(state)
        model.eval()
        logger.info(f"Loaded {kind.value} checkpoint from {root}")
        return model, kind, config

    def list_checkpoints(self) -> List[Path]:
        """
        List checkpoint directories.

        Returns:
            Checkpoint directories, oldest first
        """
        manifests = self.checkpoint_dir.glob(f"*/{WEIGHTS_FILE}")
        return [p.parent for p in sorted(manifests, key=lambda p: p.stat().st_mtime)]

    def get_latest_checkpoint(self) -> Optional[Path]:
        checkpoints = self.list_checkpoints()
        return checkpoints[-1] if checkpoints else None
