"""8-bit PGM files, patch directories and CSV manifests."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ganaug.data import Label, Patch, PatchPool, Source
from ganaug.errors import InvalidInputError

MANIFEST_FIELDS = ("id", "label", "source", "path")


def to_bytes(pixels: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, pixels: np.ndarray) -> None:
    """Binary P5 PGM, maxval 255; value v in [0, 1] is stored as round(v*255)."""
    data = to_bytes(pixels)
    if data.ndim != 2:
        raise InvalidInputError("PGM images must be 2-D")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InvalidInputError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise InvalidInputError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise InvalidInputError(f"{path}: only 8-bit PGM is supported")
    pos += 1
    body = raw[pos : pos + w * h]
    if len(body) != w * h:
        raise InvalidInputError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float32) / 255.0


def tile_grid(images: np.ndarray, rows: int = 8, cols: int = 8) -> np.ndarray:
    """Tile up to rows*cols square images (N, S, S) into one mosaic, blanks at the end."""
    images = np.asarray(images)
    n, s = images.shape[0], images.shape[-1]
    grid = np.zeros((rows * s, cols * s), dtype=np.float32)
    for i in range(min(n, rows * cols)):
        r, c = divmod(i, cols)
        grid[r * s : (r + 1) * s, c * s : (c + 1) * s] = images[i].reshape(s, s)
    return grid


def save_patch_directory(pool: PatchPool, root) -> Path:
    """Write ``<root>/mass/<id>.pgm``, ``<root>/normal/<id>.pgm`` and ``manifest.csv``."""
    root = Path(root)
    for label in Label:
        (root / label.value).mkdir(parents=True, exist_ok=True)
    rows = []
    for p in pool:
        rel = f"{p.label.value}/{p.id}.pgm"
        write_pgm(root / rel, p.pixels)
        rows.append({"id": p.id, "label": p.label.value, "source": p.source.value, "path": rel})
    write_manifest(root / "manifest.csv", rows)
    return root


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def load_patch_directory(root) -> PatchPool:
    """Load a patch directory, via its manifest when present.

    Without a manifest, every ``mass/*.pgm`` and ``normal/*.pgm`` is read
    as a real patch whose id is the file stem.
    """
    root = Path(root)
    if not root.is_dir():
        raise InvalidInputError(f"patch directory {root} does not exist")
    manifest = root / "manifest.csv"
    patches = []
    if manifest.exists():
        with open(manifest, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
                raise InvalidInputError(f"{manifest}: header must be {','.join(MANIFEST_FIELDS)}")
            for row in reader:
                px = read_pgm(root / row["path"])
                patches.append(Patch(px, Label(row["label"]), Source(row["source"]), row["id"]))
    else:
        for label in Label:
            for f in sorted((root / label.value).glob("*.pgm")):
                patches.append(Patch(read_pgm(f), label, Source.REAL, f.stem))
    return PatchPool(patches)
