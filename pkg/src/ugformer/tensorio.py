"""Flat binary tensor files (UGT1), PGM previews, JSONL manifests, and
directory checkpoints built from those pieces.

UGT1 layout, all little-endian:
    bytes 0-3   magic  0x55 0x47 0x54 0x31  ("UGT1")
    byte  4     dtype  0 = float32, 1 = uint8
    byte  5     rank
    bytes 6-7   zero padding
    next        rank x uint32 dims
    payload     row-major values
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from typing import Iterable

import numpy as np
import torch

from .config import ModelConfig, TrainConfig
from .errors import (BadMagic, BadSplit, MissingFile, TruncatedFile,
                     UnknownDtype)
from .pipeline import Sample

MAGIC = b"UGT1"
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_DTYPE_TO_CODE = {np.dtype("float32"): 0, np.dtype("uint8"): 1}
VALID_SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------- UGT1 files

def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim:        # ascontiguousarray would promote rank-0 to rank-1
        arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_TO_CODE:
        raise UnknownDtype(f"UGT1 stores float32 or uint8, not {arr.dtype}")
    code = _DTYPE_TO_CODE[arr.dtype]
    header = MAGIC + bytes([code, arr.ndim, 0, 0])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype(_CODE_TO_DTYPE[code], copy=False).tobytes(order="C")


def write_tensor(arr: np.ndarray, path: str | os.PathLike):
    with open(path, "wb") as fh:
        fh.write(tensor_bytes(np.asarray(arr)))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    if not os.path.exists(path):
        raise MissingFile(str(path))
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise TruncatedFile(f"{path}: {len(data)} bytes is too short for a header")
    if data[:4] != MAGIC:
        raise BadMagic(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 8:
        raise TruncatedFile(f"{path}: header cut off")
    code, rank = data[4], data[5]
    if code not in _CODE_TO_DTYPE:
        raise UnknownDtype(f"{path}: dtype code {code}")
    dim_end = 8 + 4 * rank
    if len(data) < dim_end:
        raise TruncatedFile(f"{path}: dim block cut off")
    dims = struct.unpack(f"<{rank}I", data[8:dim_end])
    dtype = _CODE_TO_DTYPE[code]
    expected = dim_end + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) < expected:
        raise TruncatedFile(f"{path}: payload holds {len(data) - dim_end} bytes, "
                            f"expected {expected - dim_end}")
    arr = np.frombuffer(data[dim_end:expected], dtype=dtype).reshape(dims)
    return arr.copy()


# ----------------------------------------------------------------- PGM files

def write_pgm(img01: np.ndarray, path: str | os.PathLike):
    """8-bit binary PGM (P5) from a [0, 1] grayscale image."""
    img01 = np.asarray(img01, dtype=np.float64)
    if img01.ndim == 3 and img01.shape[0] == 1:
        img01 = img01[0]
    pixels = np.clip(img01 * 255.0 + 0.5, 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes(order="C"))


def overlay_mask(img01: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Brighten mask pixels on top of the image for a quick visual check."""
    img = np.asarray(img01, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    return np.clip(0.55 * img + 0.45 * (np.asarray(mask) > 0), 0.0, 1.0)


# ------------------------------------------------------------ JSONL records

def write_jsonl(records: Iterable[dict], path: str | os.PathLike):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path: str | os.PathLike) -> list[dict]:
    if not os.path.exists(path):
        raise MissingFile(str(path))
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


# -------------------------------------------------------------- dataset I/O

def save_dataset(samples: list[Sample], splits: list[str], out_dir: str,
                 extra_meta: dict | None = None) -> str:
    """Write images/masks as UGT1 plus a JSONL manifest; returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("images", "la", "scar"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    records = []
    for i, (sample, split) in enumerate(zip(samples, splits)):
        if split not in VALID_SPLITS:
            raise BadSplit(f"split {split!r} for slice {i}")
        rec = {"id": i, "split": split,
               "image": f"images/img_{i:04d}.ugt",
               "la_mask": None, "scar_mask": None,
               "seed": sample.meta.get("seed"),
               "style": sample.meta.get("style"),
               "height": sample.height, "width": sample.width}
        write_tensor(sample.image.astype(np.float32),
                     os.path.join(out_dir, rec["image"]))
        if sample.la_mask is not None:
            rec["la_mask"] = f"la/la_{i:04d}.ugt"
            write_tensor(sample.la_mask.astype(np.uint8),
                         os.path.join(out_dir, rec["la_mask"]))
        if sample.scar_mask is not None:
            rec["scar_mask"] = f"scar/scar_{i:04d}.ugt"
            write_tensor(sample.scar_mask.astype(np.uint8),
                         os.path.join(out_dir, rec["scar_mask"]))
        records.append(rec)
    manifest = os.path.join(out_dir, "manifest.jsonl")
    write_jsonl(records, manifest)
    if extra_meta is not None:
        with open(os.path.join(out_dir, "synth_run.json"), "w") as fh:
            json.dump(extra_meta, fh, indent=2, sort_keys=True)
    return manifest


def load_dataset(manifest_path: str | os.PathLike) -> dict[str, list[Sample]]:
    """Read a manifest back into per-split Sample lists.

    Rejects unknown split names and image files claimed by two splits.
    """
    records = read_jsonl(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    by_split: dict[str, list[Sample]] = {s: [] for s in VALID_SPLITS}
    owner: dict[str, str] = {}
    for rec in records:
        split = rec.get("split")
        if split not in VALID_SPLITS:
            raise BadSplit(f"record {rec.get('id')}: split {split!r}")
        image_rel = rec["image"]
        if image_rel in owner and owner[image_rel] != split:
            raise BadSplit(f"{image_rel} appears in both "
                           f"{owner[image_rel]!r} and {split!r}")
        owner[image_rel] = split
        image = read_tensor(os.path.join(root, image_rel)).astype(np.float32)
        if image.ndim == 2:
            image = image[None]
        la = scar = None
        if rec.get("la_mask"):
            la = read_tensor(os.path.join(root, rec["la_mask"])).astype(np.uint8)
        if rec.get("scar_mask"):
            scar = read_tensor(os.path.join(root, rec["scar_mask"])).astype(np.uint8)
        meta = {"seed": rec.get("seed"), "style": rec.get("style"),
                "orig_size": (image.shape[-2], image.shape[-1]), "id": rec.get("id")}
        by_split[split].append(Sample(image, la, scar, meta))
    return by_split


# -------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "ugformer-checkpoint-v1"


def save_checkpoint(out_dir: str, model: torch.nn.Module, model_config: ModelConfig,
                    seed: int, train_config: TrainConfig | None = None,
                    extra: dict | None = None):
    """Directory checkpoint: meta.json plus one UGT1 file per tensor.

    Keeps every float parameter and buffer; the integer batch counters that
    batch norm tracks are redundant in inference and are dropped.
    """
    os.makedirs(out_dir, exist_ok=True)
    tdir = os.path.join(out_dir, "tensors")
    os.makedirs(tdir, exist_ok=True)
    entries = []
    for idx, (name, tensor) in enumerate(model.state_dict().items()):
        if not tensor.dtype.is_floating_point:
            continue
        fname = f"t{idx:04d}.ugt"
        write_tensor(tensor.detach().cpu().numpy().astype(np.float32),
                     os.path.join(tdir, fname))
        entries.append({"name": name, "file": f"tensors/{fname}",
                        "shape": list(tensor.shape)})
    meta = {"format": CHECKPOINT_FORMAT, "seed": seed,
            "model_config": dataclasses.asdict(model_config),
            "tensors": entries}
    if train_config is not None:
        meta["train_config"] = dataclasses.asdict(train_config)
    if extra:
        meta.update(extra)
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_checkpoint(ckpt_dir: str) -> tuple[torch.nn.Module, dict]:
    """Rebuild the model a checkpoint describes and load its weights."""
    from .models import build_model

    meta_path = os.path.join(ckpt_dir, "meta.json")
    if not os.path.exists(meta_path):
        raise MissingFile(meta_path)
    with open(meta_path, "r") as fh:
        meta = json.load(fh)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise BadMagic(f"{meta_path}: not a {CHECKPOINT_FORMAT} checkpoint")
    config = ModelConfig(**meta["model_config"])
    model = build_model(config, seed=int(meta.get("seed", 0)))
    state = model.state_dict()
    for entry in meta["tensors"]:
        arr = read_tensor(os.path.join(ckpt_dir, entry["file"]))
        state[entry["name"]] = torch.from_numpy(arr).to(state[entry["name"]].dtype)
    model.load_state_dict(state)
    model.eval()
    return model, meta
