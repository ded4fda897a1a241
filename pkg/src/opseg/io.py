"""On-disk formats: PGM slices, volume directories, checkpoints, canonical JSON.

Every write goes through a temporary sibling and ``os.replace`` so an
interrupted run never leaves a truncated file behind.
"""
from __future__ import annotations

import contextlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .preprocess import Volume

FORMAT = "opseg/1"
CKPT_MAGIC = b"OPSG1"
MAX_CLASS = 9


class FormatError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, canonical_json(obj) + "\n")


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from None


@contextlib.contextmanager
def atomic_dir(path):
    """Yield a temporary directory that replaces ``path`` on success.

    On failure the temporary tree is removed and ``path`` is left as it was.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        yield tmp
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


# -- PGM ------------------------------------------------------------------------------------


def encode_pgm(pixels: np.ndarray, maxval: int) -> bytes:
    if pixels.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {pixels.shape}")
    h, w = pixels.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    return header + np.ascontiguousarray(pixels, dtype=dtype).tobytes()


def _header_tokens(data: bytes, name: str):
    """Parse the four P5 header tokens; returns (tokens, raster offset)."""
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < 4:
        while pos < n and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"{name}: truncated PGM header at byte {start}")
        tokens.append((data[start:pos], start))
    if pos >= n or not data[pos:pos + 1].isspace():
        raise FormatError(f"{name}: missing whitespace after maxval at byte {pos}")
    return tokens, pos + 1


def decode_pgm(data: bytes, name: str = "<pgm>") -> tuple[np.ndarray, int]:
    """Raw integer samples and maxval of a binary (P5) PGM."""
    tokens, offset = _header_tokens(data, name)
    (magic, _), *rest = tokens
    if magic != b"P5":
        raise FormatError(f"{name}: bad magic {magic!r} at byte 0, expected b'P5'")
    values = []
    for label, (tok, at) in zip(("width", "height", "maxval"), rest):
        if not tok.isdigit() or int(tok) <= 0:
            raise FormatError(f"{name}: invalid {label} {tok!r} at byte {at}")
        values.append(int(tok))
    w, h, maxval = values
    if maxval > 65535:
        raise FormatError(f"{name}: maxval {maxval} exceeds 65535 at byte {rest[2][1]}")
    size = 2 if maxval > 255 else 1
    need = w * h * size
    have = len(data) - offset
    if have < need:
        raise FormatError(f"{name}: raster truncated at byte {len(data)}, expected {need} bytes from byte {offset}")
    raw = np.frombuffer(data, dtype=">u2" if size == 2 else "u1", count=w * h, offset=offset)
    pix = raw.reshape(h, w).astype(np.int64)
    over = np.flatnonzero(pix > maxval)
    if over.size:
        i = int(over[0])
        raise FormatError(f"{name}: sample {pix.flat[i]} exceeds maxval {maxval} at byte {offset + i * size}")
    return pix, maxval


def read_pgm(path) -> tuple[np.ndarray, int]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"{path}: file not found") from None
    return decode_pgm(data, str(path))


def image_to_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.size and (img.min() < 0 or img.max() > 1 or not np.isfinite(img).all()):
        raise ValueError("image pixels must lie in [0, 1]")
    return encode_pgm(np.rint(img * 65535).astype(np.uint16), 65535)


def mask_to_pgm(mask: np.ndarray) -> bytes:
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() > MAX_CLASS):
        raise ValueError(f"mask values must lie in 0..{MAX_CLASS}")
    return encode_pgm(mask.astype(np.uint8), 255)


def read_image(path) -> np.ndarray:
    pix, maxval = read_pgm(path)
    return pix / float(maxval)


def read_mask(path) -> np.ndarray:
    pix, maxval = read_pgm(path)
    if maxval > 255:
        raise FormatError(f"{path}: masks must be 8-bit PGM, got maxval {maxval}")
    over = np.flatnonzero(pix > MAX_CLASS)
    if over.size:
        data = Path(path).read_bytes()
        _, offset = _header_tokens(data, str(path))
        i = int(over[0])
        raise FormatError(f"{path}: mask value {pix.flat[i]} > {MAX_CLASS} at byte {offset + i}")
    return pix.astype(np.uint8)


def quantize_image(img: np.ndarray) -> np.ndarray:
    """The value an image reads back as after a 16-bit save."""
    return np.rint(np.asarray(img, dtype=np.float64) * 65535) / 65535.0


# -- volumes --------------------------------------------------------------------------------


def save_volume(vol: Volume, dir_path) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    slices = [f"slice_{i:04d}.pgm" for i in range(len(vol.slices))]
    masks = [] if vol.masks is None else [f"mask_{i:04d}.pgm" for i in range(len(vol.masks))]
    for name, img in zip(slices, vol.slices):
        atomic_write_bytes(d / name, image_to_pgm(img))
    for name, m in zip(masks, vol.masks or []):
        atomic_write_bytes(d / name, mask_to_pgm(m))
    meta = {
        "format": FORMAT,
        "subject_id": vol.subject_id,
        "scanner_id": vol.scanner_id,
        "modality": vol.modality,
        "slices": slices,
        "masks": masks,
    }
    write_json(d / "meta.json", meta)


def load_volume(dir_path) -> Volume:
    d = Path(dir_path)
    meta_path = d / "meta.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"{meta_path}: file not found")
    meta = read_json(meta_path)
    if meta.get("format") != FORMAT:
        raise FormatError(f"{meta_path}: unsupported format {meta.get('format')!r}, expected {FORMAT!r}")
    for key in ("subject_id", "scanner_id", "modality", "slices"):
        if key not in meta:
            raise FormatError(f"{meta_path}: missing key {key!r}")
    slices = [read_image(d / name) for name in meta["slices"]]
    names = meta.get("masks") or []
    masks = [read_mask(d / name) for name in names] if names else None
    if not slices:
        raise FormatError(f"{meta_path}: volume has no slices")
    return Volume(meta["subject_id"], meta["scanner_id"], meta["modality"], slices, masks)


def volume_dirs(root) -> list[Path]:
    """Volume directories under ``root`` (or ``root`` itself), sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: data directory not found")
    if (root / "meta.json").is_file():
        return [root]
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "meta.json").is_file())
    if not dirs:
        raise FileNotFoundError(f"{root}: no volumes (directories with meta.json) found")
    return dirs


def load_dataset(root) -> list[Volume]:
    return [load_volume(p) for p in volume_dirs(root)]


# -- checkpoints ----------------------------------------------------------------------------


def encode_checkpoint(config: dict, params) -> bytes:
    arrays = [np.asarray(p.data if hasattr(p, "data") else p, dtype="<f8") for p in params]
    count = int(sum(a.size for a in arrays))
    header = CKPT_MAGIC + b"\n" + canonical_json(config).encode("utf-8") + b"\n" + str(count).encode() + b"\n"
    return header + b"".join(np.ascontiguousarray(a).tobytes() for a in arrays)


def decode_checkpoint(data: bytes, name: str = "<checkpoint>") -> tuple[dict, np.ndarray]:
    if not data.startswith(CKPT_MAGIC + b"\n"):
        raise FormatError(f"{name}: bad magic at byte 0, expected {CKPT_MAGIC!r}")
    pos = len(CKPT_MAGIC) + 1
    end = data.find(b"\n", pos)
    if end < 0:
        raise FormatError(f"{name}: unterminated config header at byte {pos}")
    try:
        config = json.loads(data[pos:end])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{name}: invalid config JSON at byte {pos + exc.pos}") from None
    pos = end + 1
    end = data.find(b"\n", pos)
    if end < 0 or not data[pos:end].isdigit():
        raise FormatError(f"{name}: invalid parameter count at byte {pos}")
    count = int(data[pos:end])
    blob = data[end + 1:]
    if len(blob) != 8 * count:
        raise FormatError(f"{name}: expected {8 * count} parameter bytes from byte {end + 1}, found {len(blob)}")
    return config, np.frombuffer(blob, dtype="<f8").astype(np.float64)


def save_checkpoint(path, net) -> None:
    atomic_write_bytes(path, encode_checkpoint(net.config(), net.parameters()))


def load_checkpoint(path):
    """Rebuild the network stored at ``path``."""
    from .segnet import build_segnet_from_config

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: checkpoint not found")
    config, flat = decode_checkpoint(path.read_bytes(), str(path))
    net = build_segnet_from_config(config)
    params = net.parameters()
    total = sum(p.data.size for p in params)
    if total != flat.size:
        raise FormatError(f"{path}: checkpoint holds {flat.size} parameters, architecture needs {total}")
    at = 0
    for p in params:
        p.data[...] = flat[at:at + p.data.size].reshape(p.data.shape)
        at += p.data.size
    return net
