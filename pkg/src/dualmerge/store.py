"""Bit-exact model and probe serialization.

A stored object is two side files: ``<name>.manifest.json`` describing the
entries and ``<name>.blob`` holding the raw little-endian float32 payload in
row-major order. The manifest pins a CRC32 of the blob so corruption is
detected on load, and loading then saving again reproduces the bytes exactly.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .errors import ArtifactIOError, ContractError, DataFormatError
from .models import ActivationProbe, ModelSpec, ModelState

FORMAT_VERSION = 1


def _pack(named: list[tuple[str, np.ndarray]]) -> tuple[dict, bytes]:
    entries = []
    chunks = []
    offset = 0
    for name, tensor in named:
        data = np.ascontiguousarray(tensor, dtype=np.float32)
        raw = data.astype("<f4", copy=False).tobytes()
        entries.append({
            "name": name,
            "shape": list(data.shape),
            "byte_offset": offset,
            "byte_length": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    if not entries:
        raise ContractError("refusing to store an object with zero tensors")
    blob = b"".join(chunks)
    return {"entries": entries, "checksum": zlib.crc32(blob)}, blob


def _write(path: Path, manifest: dict, blob: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path.with_suffix(path.suffix + ".manifest.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
        with open(path.with_suffix(path.suffix + ".blob"), "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise ArtifactIOError(f"failed to write {path}: {exc}") from exc


def _read(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    manifest_path = path.with_suffix(path.suffix + ".manifest.json")
    blob_path = path.with_suffix(path.suffix + ".blob")
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        blob = blob_path.read_bytes()
    except FileNotFoundError as exc:
        raise ArtifactIOError(f"missing artifact file: {exc.filename}") from exc
    except OSError as exc:
        raise ArtifactIOError(f"failed to read {path}: {exc}") from exc

    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(
            f"{manifest_path}: unsupported format_version "
            f"{manifest.get('format_version')!r}")
    if zlib.crc32(blob) != manifest["checksum"]:
        raise DataFormatError(f"{blob_path}: checksum mismatch")
    entries = manifest["entries"]
    if not entries:
        raise DataFormatError(f"{manifest_path}: manifest has zero entries")

    tensors = {}
    expected = 0
    for entry in entries:
        if entry["byte_offset"] != expected:
            raise DataFormatError(
                f"{manifest_path}: entries are not contiguous and monotone")
        expected += entry["byte_length"]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if entry["byte_length"] != 4 * count:
            raise DataFormatError(
                f"{manifest_path}: entry {entry['name']!r} length/shape mismatch")
        raw = blob[entry["byte_offset"]:entry["byte_offset"] + entry["byte_length"]]
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(
            entry["shape"]).copy()
    if expected != len(blob):
        raise DataFormatError(f"{blob_path}: trailing bytes beyond manifest")
    return manifest, tensors


def save_model(m: ModelState, path: Path) -> None:
    named = sorted(m.params.items())
    named += sorted((f"norm_stats.{k}", v) for k, v in m.norm_stats.items())
    for head in sorted(m.heads):
        named.append((f"heads.{head}.weight", m.heads[head]["weight"]))
        named.append((f"heads.{head}.bias", m.heads[head]["bias"]))
    packed, blob = _pack(named)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "model",
        "spec": m.spec.to_jsonable(),
        "meta": m.meta,
        **packed,
    }
    _write(Path(path), manifest, blob)


def load_model(path: Path) -> ModelState:
    manifest, tensors = _read(Path(path))
    if manifest.get("kind") != "model":
        raise DataFormatError(f"{path}: artifact is not a model")
    spec = ModelSpec.from_jsonable(manifest["spec"])
    params: dict[str, np.ndarray] = {}
    norm_stats: dict[str, np.ndarray] = {}
    heads: dict[str, dict[str, np.ndarray]] = {}
    for name, tensor in tensors.items():
        if name.startswith("norm_stats."):
            norm_stats[name[len("norm_stats."):]] = tensor
        elif name.startswith("heads."):
            _, head, part = name.split(".", 2)
            heads.setdefault(head, {})[part] = tensor
        else:
            params[name] = tensor
    try:
        return ModelState(spec=spec, params=params, heads=heads,
                          norm_stats=norm_stats, meta=manifest.get("meta", {}))
    except ContractError as exc:
        raise DataFormatError(f"{path}: inconsistent model payload: {exc}") from exc


def save_probe(probe: ActivationProbe, path: Path) -> None:
    named = [(f"layers.{i}", act) for i, act in enumerate(probe.layers)]
    packed, blob = _pack(named)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "probe",
        "sample_count": probe.sample_count,
        **packed,
    }
    _write(Path(path), manifest, blob)


def load_probe(path: Path) -> ActivationProbe:
    manifest, tensors = _read(Path(path))
    if manifest.get("kind") != "probe":
        raise DataFormatError(f"{path}: artifact is not a probe")
    layers = tuple(tensors[f"layers.{i}"] for i in range(len(tensors)))
    return ActivationProbe(layers=layers, sample_count=manifest["sample_count"])
