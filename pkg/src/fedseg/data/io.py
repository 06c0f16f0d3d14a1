"""Dataset directory format.

::

    <dir>/manifest.json
    <dir>/images/00017.pgm         8-bit binary PGM (P5)
    <dir>/masks/00017.pbm          union mask, binary PBM (P4)
    <dir>/instances/00017_03.pbm   one file per tooth

The manifest lists ids, instance counts, image size, SHA-256 of every file,
and optional ``assignment`` / ``splits`` blocks.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .generate import Sample


def write_pgm(path: Path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError("PGM writer expects uint8")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(img).tobytes())


def write_pbm(path: Path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P4\n{w} {h}\n".encode())
        f.write(np.packbits(mask, axis=1).tobytes())


def _read_header(data: bytes, n_fields: int):
    fields, pos = [], 0
    while len(fields) < n_fields:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    return fields, pos + 1


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _read_header(data, 4)
    if magic != b"P5" or int(maxval) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(w), int(h)
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def read_pbm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h), pos = _read_header(data, 3)
    if magic != b"P4":
        raise ValueError(f"{path}: not a binary PBM")
    w, h = int(w), int(h)
    row = (w + 7) // 8
    packed = np.frombuffer(data, dtype=np.uint8, count=row * h, offset=pos).reshape(h, row)
    return np.unpackbits(packed, axis=1)[:, :w].astype(bool)


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def export_dataset(samples: list[Sample], out_dir, extra: dict | None = None) -> Path:
    """Write samples plus manifest; returns the manifest path."""
    out = Path(out_dir)
    for sub in ("images", "masks", "instances"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        img_p = out / "images" / f"{s.id:05d}.pgm"
        mask_p = out / "masks" / f"{s.id:05d}.pbm"
        write_pgm(img_p, s.image)
        write_pbm(mask_p, s.union_mask)
        files = {"image": _rel(img_p, out), "mask": _rel(mask_p, out), "instances": []}
        for k, inst in enumerate(s.instances):
            p = out / "instances" / f"{s.id:05d}_{k:02d}.pbm"
            write_pbm(p, inst)
            files["instances"].append(_rel(p, out))
        sha = {name: _sha256(out / rel) for name, rel in (("image", files["image"]), ("mask", files["mask"]))}
        sha["instances"] = [_sha256(out / rel) for rel in files["instances"]]
        entries.append({"id": s.id, "shape": list(s.image.shape), "files": files, "sha256": sha})
    manifest = {"format": "fedseg-dataset", "version": 1, "samples": entries}
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def _rel(p: Path, root: Path) -> str:
    return p.relative_to(root).as_posix()


def import_dataset(root, verify: bool = True) -> tuple[list[Sample], dict]:
    """Read a dataset directory; returns (samples, manifest)."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    samples = []
    for e in manifest["samples"]:
        files = e["files"]
        if verify:
            if _sha256(root / files["image"]) != e["sha256"]["image"]:
                raise IOError(f"{root / files['image']}: checksum mismatch")
        image = read_pgm(root / files["image"])
        instances = [read_pbm(root / rel) for rel in files["instances"]]
        samples.append(Sample(int(e["id"]), image, instances))
    return samples, manifest


def manifest_digest(path) -> str:
    """Content hash of a manifest file (git-style ``sha256:<hex>``)."""
    return "sha256:" + _sha256(Path(path))
