"""Model construction, parameter accounting, and checkpoint serialization.

Every model is built under an explicit seed so that two builds with the same
configuration and seed are bit-identical.  A configuration fingerprint (hash
of the architecture fields, not the seed) travels with each checkpoint;
loading verifies it so weights can never be poured into a different
architecture silently.  Checkpoints are a flat little-endian float64 dump of
the state dict in registration order plus a JSON sidecar.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..errors import ConfigError, IncompatibleCheckpointError, IngestError
from ..fileio import atomic_write_bytes, atomic_write_json
from .residual import ResidualBackbone
from .vit import ViTBackbone
from .xception import XceptionBackbone

_FAMILIES = ("xception", "residual")
_SCALES = ("mini", "full")


@dataclass(frozen=True)
class BackboneConfig:
    """Convolutional backbone selection."""

    family: str
    scale: str = "mini"
    with_se: bool = False
    se_ratio: int = 16

    def __post_init__(self) -> None:
        if self.family not in _FAMILIES:
            raise ConfigError(f"family must be one of {_FAMILIES}, got {self.family!r}")
        if self.scale not in _SCALES:
            raise ConfigError(f"scale must be one of {_SCALES}, got {self.scale!r}")
        if self.se_ratio < 1:
            raise ConfigError(f"se_ratio must be >= 1, got {self.se_ratio}")


@dataclass(frozen=True)
class ViTConfig:
    """Patch transformer geometry."""

    image_size: int
    patch_size: int
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        if min(self.image_size, self.patch_size, self.dim, self.depth, self.heads, self.mlp_ratio) < 1:
            raise ConfigError("all transformer dimensions must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size


@dataclass
class ModelHandle:
    """A built model plus the identity needed to checkpoint and cache it."""

    module: nn.Module
    family: str
    config: object
    fingerprint: str
    feature_dim: int
    seed: int


def count_params(module: nn.Module) -> int:
    """Number of trainable scalars in the module."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def config_fingerprint(kind: str, fields: dict) -> str:
    """Architecture identity hash: the kind tag plus its defining fields.

    Deliberately excludes seeds and training state so checkpoints written by
    one run can initialize another run of the same architecture.
    """
    payload = {"kind": kind, **fields}
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _fingerprint(kind: str, config: BackboneConfig | ViTConfig) -> str:
    return config_fingerprint(kind, asdict(config))


def build_backbone(config: BackboneConfig, seed: int) -> ModelHandle:
    """Construct a convolutional backbone deterministically from a seed."""
    torch.manual_seed(seed)
    se_ratio = config.se_ratio if config.with_se else None
    if config.family == "xception":
        module: nn.Module = XceptionBackbone(scale=config.scale, se_ratio=se_ratio)
    else:
        module = ResidualBackbone(scale=config.scale, se_ratio=se_ratio)
    return ModelHandle(
        module=module,
        family=config.family,
        config=config,
        fingerprint=_fingerprint("backbone", config),
        feature_dim=module.feature_dim,
        seed=seed,
    )


def build_vit(config: ViTConfig, seed: int) -> ModelHandle:
    """Construct a patch transformer deterministically from a seed."""
    torch.manual_seed(seed)
    module = ViTBackbone(
        image_size=config.image_size,
        patch_size=config.patch_size,
        dim=config.dim,
        depth=config.depth,
        heads=config.heads,
        mlp_ratio=config.mlp_ratio,
    )
    return ModelHandle(
        module=module,
        family="vit",
        config=config,
        fingerprint=_fingerprint("vit", config),
        feature_dim=config.dim,
        seed=seed,
    )


def save_checkpoint(handle: ModelHandle, path: Path | str, history: dict | None = None) -> None:
    """Write the state dict as flat little-endian float64 plus a sidecar.

    Normalization running statistics are serialized alongside trainable
    parameters; integer counters survive the float64 round trip exactly.
    """
    path = Path(path)
    state = handle.module.state_dict()
    parts = [t.detach().cpu().to(torch.float64).numpy().ravel() for t in state.values()]
    flat = np.concatenate(parts) if parts else np.zeros(0, dtype=np.float64)
    atomic_write_bytes(path, flat.astype("<f8").tobytes())
    sidecar = {
        "fingerprint": handle.fingerprint,
        "family": handle.family,
        "kind": "vit" if isinstance(handle.config, ViTConfig) else "backbone",
        "config": asdict(handle.config),
        "seed": handle.seed,
        "parameter_count": count_params(handle.module),
        "element_count": int(flat.size),
        "tensor_count": len(state),
        "history": history or {},
    }
    atomic_write_json(path.with_suffix(".json"), sidecar)


def load_checkpoint(handle: ModelHandle, path: Path | str) -> dict:
    """Load weights saved by :func:`save_checkpoint` into ``handle``.

    The sidecar fingerprint must match the handle's architecture fingerprint
    and the payload must hold exactly the expected number of float64 values;
    otherwise ``IncompatibleCheckpointError`` is raised.  Returns the stored
    training-history summary.
    """
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not path.is_file() or not sidecar_path.is_file():
        raise IngestError(f"checkpoint not found: {path}")
    try:
        sidecar = json.loads(sidecar_path.read_text())
        stored_fingerprint = sidecar["fingerprint"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise IngestError(f"malformed checkpoint sidecar {sidecar_path}: {exc}") from exc
    if stored_fingerprint != handle.fingerprint:
        raise IncompatibleCheckpointError(
            f"checkpoint at {path} was saved for a different architecture "
            f"({sidecar.get('family', 'unknown')} fingerprint {stored_fingerprint[:12]}..., "
            f"expected {handle.family} fingerprint {handle.fingerprint[:12]}...)"
        )
    state = handle.module.state_dict()
    expected = sum(t.numel() for t in state.values())
    blob = path.read_bytes()
    if len(blob) != expected * 8:
        raise IncompatibleCheckpointError(
            f"checkpoint payload holds {len(blob)} bytes, expected {expected * 8}"
        )
    flat = np.frombuffer(blob, dtype="<f8")
    offset = 0
    new_state = {}
    for name, tensor in state.items():
        n = tensor.numel()
        chunk = flat[offset : offset + n].reshape(tuple(tensor.shape))
        new_state[name] = torch.from_numpy(chunk.copy()).to(tensor.dtype)
        offset += n
    handle.module.load_state_dict(new_state)
    return sidecar.get("history", {})


def load_checkpoint_model(path: Path | str) -> tuple[ModelHandle, dict]:
    """Rebuild the saved architecture from a checkpoint's sidecar and load it.

    Checkpoints are self-describing: the sidecar records the architecture
    kind and configuration, so no separate model config is needed.  Returns
    the loaded handle together with the full sidecar (which callers may mine
    for extra metadata such as the preprocessing size recorded by training
    tools).  Raises ``IngestError`` for missing/corrupt files and
    ``IncompatibleCheckpointError`` if the payload does not match the
    recorded architecture.
    """
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not path.is_file() or not sidecar_path.is_file():
        raise IngestError(f"checkpoint not found: {path}")
    try:
        sidecar = json.loads(sidecar_path.read_text())
    except json.JSONDecodeError as exc:
        raise IngestError(f"malformed checkpoint sidecar {sidecar_path}: {exc}") from exc
    kind = sidecar.get("kind")
    config_fields = sidecar.get("config")
    if kind not in ("backbone", "vit") or not isinstance(config_fields, dict):
        raise IngestError(
            f"checkpoint sidecar {sidecar_path} does not describe its architecture"
        )
    seed = int(sidecar.get("seed", 0))
    try:
        if kind == "vit":
            handle = build_vit(ViTConfig(**config_fields), seed)
        else:
            handle = build_backbone(BackboneConfig(**config_fields), seed)
    except TypeError as exc:
        raise IngestError(
            f"checkpoint sidecar {sidecar_path} holds unusable architecture fields: {exc}"
        ) from exc
    load_checkpoint(handle, path)
    return handle, sidecar
