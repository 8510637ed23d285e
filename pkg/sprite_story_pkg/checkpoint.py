"""Checkpoint directories: ``manifest.json`` plus one safetensors blob per component.

The manifest indexes every tensor (blob, shape, dtype) and records each blob's
sha256, so loading can name the exact tensor that is missing or damaged.
"""
import os
import json
import hashlib
from typing import Any, Dict, Mapping, Optional, Tuple

import torch
from safetensors.torch import load_file, save_file
from torch import nn

from .errors import CheckpointError

CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


def tensor_digest(tensors: Mapping[str, torch.Tensor]) -> str:
    """sha256 over the sorted keys and raw bytes of a tensor mapping."""
    digest = hashlib.sha256()
    for key in sorted(tensors):
        value = tensors[key].detach().cpu().contiguous()
        digest.update(key.encode("utf-8"))
        digest.update(str(tuple(value.shape)).encode("utf-8"))
        digest.update(value.numpy().tobytes())
    return digest.hexdigest()


def state_checksum(module: nn.Module, prefix: Optional[str] = None) -> str:
    """Checksum of a module's state dict, optionally only keys starting with ``prefix``."""
    state = module.state_dict()
    if prefix is not None:
        state = {k: v for k, v in state.items() if k.startswith(prefix)}
    return tensor_digest(state)


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as blob:
        for chunk in iter(lambda: blob.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_components(
    path: str, components: Mapping[str, Mapping[str, torch.Tensor]], metadata: Dict[str, Any]
) -> Dict[str, Any]:
    """Write each component as ``<name>.safetensors`` and index it in the manifest."""
    os.makedirs(path, exist_ok=True)
    blobs: Dict[str, Dict[str, str]] = {}
    index: Dict[str, Dict[str, Any]] = {}
    for name, tensors in components.items():
        file_name = f"{name}.safetensors"
        blob_path = os.path.join(path, file_name)
        save_file({k: v.detach().cpu().contiguous().clone() for k, v in tensors.items()}, blob_path)
        blobs[name] = {"file": file_name, "sha256": file_sha256(blob_path)}
        for key, value in tensors.items():
            index[f"{name}/{key}"] = {"blob": name, "shape": list(value.shape), "dtype": str(value.dtype)}

    manifest = dict(metadata)
    manifest.update({"format_version": CHECKPOINT_FORMAT_VERSION, "blobs": blobs, "tensors": index})
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as manifest_file:
        json.dump(manifest, manifest_file, indent=2, sort_keys=True)
    return manifest


def read_manifest(path: str) -> Dict[str, Any]:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise CheckpointError(f"No checkpoint manifest at {manifest_path}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as manifest_file:
            manifest = json.load(manifest_file)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint manifest at {manifest_path}: {e}") from e
    for key in ("format_version", "blobs", "tensors"):
        if key not in manifest:
            raise CheckpointError(f"Corrupt checkpoint manifest at {manifest_path}: missing '{key}'")
    if manifest["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format version {manifest['format_version']}")
    return manifest


def load_components(path: str, verify: bool = True) -> Tuple[Dict[str, Any], Dict[str, Dict[str, torch.Tensor]]]:
    """Read the manifest and every blob it lists, checking the tensor index."""
    manifest = read_manifest(path)
    by_blob: Dict[str, list] = {}
    for tensor_name, entry in manifest["tensors"].items():
        by_blob.setdefault(entry["blob"], []).append(tensor_name)

    components: Dict[str, Dict[str, torch.Tensor]] = {}
    for name, blob in manifest["blobs"].items():
        blob_path = os.path.join(path, blob["file"])
        expected = sorted(by_blob.get(name, []))
        if not os.path.exists(blob_path):
            first = expected[0] if expected else name
            raise CheckpointError(f"Missing blob {blob['file']} holding tensor '{first}' ({len(expected)} tensors)")
        if verify and file_sha256(blob_path) != blob["sha256"]:
            raise CheckpointError(f"Blob {blob['file']} does not match its recorded sha256")
        try:
            tensors = load_file(blob_path)
        except Exception as e:
            raise CheckpointError(f"Unreadable blob {blob['file']}: {e}") from e
        for tensor_name in expected:
            key = tensor_name.split("/", 1)[1]
            if key not in tensors:
                raise CheckpointError(f"Tensor '{tensor_name}' missing from blob {blob['file']}")
            if list(tensors[key].shape) != manifest["tensors"][tensor_name]["shape"]:
                raise CheckpointError(f"Tensor '{tensor_name}' has shape {list(tensors[key].shape)}, manifest says "
                                      f"{manifest['tensors'][tensor_name]['shape']}")
        components[name] = tensors
    return manifest, components


def load_module_state(module: nn.Module, tensors: Mapping[str, torch.Tensor], component: str) -> None:
    """Strictly load ``tensors`` into ``module``, naming the first offending tensor."""
    expected = module.state_dict()
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise CheckpointError(f"Checkpoint component '{component}' lacks tensor '{component}/{missing[0]}'")
    unexpected = sorted(set(tensors) - set(expected))
    if unexpected:
        raise CheckpointError(f"Checkpoint component '{component}' has unknown tensor '{component}/{unexpected[0]}'")
    for key, value in tensors.items():
        if value.shape != expected[key].shape:
            raise CheckpointError(
                f"Tensor '{component}/{key}' has shape {tuple(value.shape)}, model expects {tuple(expected[key].shape)}"
            )
    module.load_state_dict({k: v.to(expected[k].device) for k, v in tensors.items()}, strict=True)


def checkpoint_hash(path: str) -> str:
    """Identity of a checkpoint directory: the sha256 of its manifest file."""
    return file_sha256(os.path.join(path, MANIFEST_NAME))
