"""Binary and text file formats.

All integers are little-endian u32, all reals little-endian float64.

* ``FRID`` image: magic, channels, height, width, then uint8 pixels (C, H, W).
* ``FRMC`` checkpoint: magic, version, array count, then per array the
  name length, UTF-8 name, rank, dims and float64 data.
* ``FREM`` embeddings: magic, count, dim, then per sample identity,
  camera and ``dim`` floats.
* ``FRDM`` distance matrix: magic, rows, cols, row-major floats.
* Manifest: CSV with header ``path,identity,camera,split``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .evaluation import EmbeddingSet
from .model import ModelConfig, PreprocessConfig, ReIDModel
from .synth import SPLITS, Sample, ValidationError

CHECKPOINT_VERSION = 1
MANIFEST_HEADER = ["path", "identity", "camera", "split"]


class FormatError(ValueError):
    pass


def atomic_write(path: str | Path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {self.what}: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def magic(self, expected: bytes) -> None:
        got = self.take(4)
        if got != expected:
            raise FormatError(f"bad magic for {self.what}: expected {expected!r}, got {got!r}")

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes in {self.what}")


# --- images -------------------------------------------------------------------

def encode_image(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.dtype != np.uint8:
        raise FormatError(f"expected a (C, H, W) uint8 image, got {image.shape} {image.dtype}")
    return b"FRID" + struct.pack("<3I", *image.shape) + np.ascontiguousarray(image).tobytes()


def decode_image(data: bytes) -> np.ndarray:
    r = _Reader(data, "FRID image")
    r.magic(b"FRID")
    c, h, w = r.u32(3)
    pixels = np.frombuffer(r.take(c * h * w), dtype=np.uint8).reshape(c, h, w).copy()
    r.finish()
    return pixels


def write_image(path: str | Path, image: np.ndarray) -> None:
    atomic_write(path, encode_image(image))


def read_image(path: str | Path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


# --- manifest -------------------------------------------------------------------

def write_dataset(directory: str | Path, samples: list[Sample]) -> Path:
    """Write one FRID file per sample plus ``manifest.csv``; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for i, s in enumerate(samples):
        rel = f"images/{i:06d}.frid"
        write_image(directory / rel, s.image)
        writer.writerow([rel, s.identity, s.camera, s.split])
    manifest = directory / "manifest.csv"
    atomic_write(manifest, buf.getvalue().encode())
    return manifest


def read_manifest(path: str | Path, with_lines: bool = False):
    """Parse a manifest and its images; errors name the offending row.

    With ``with_lines`` the CSV line number of each sample is returned too.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != MANIFEST_HEADER:
        raise ValidationError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
    samples, lines = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise ValidationError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        rel, ident, cam, split = (c.strip() for c in row)
        try:
            ident_i, cam_i = int(ident), int(cam)
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: identity and camera must be integers") from None
        if ident_i < 0 or cam_i < 0:
            raise ValidationError(f"{path}:{lineno}: identity and camera must be nonnegative")
        if split not in SPLITS:
            raise ValidationError(f"{path}:{lineno}: split {split!r} not in {SPLITS}")
        img_path = path.parent / rel
        try:
            image = read_image(img_path)
        except FileNotFoundError:
            raise ValidationError(f"{path}:{lineno}: image file {rel} not found") from None
        except FormatError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
        samples.append(Sample(image, ident_i, cam_i, split))
        lines.append(lineno)
    return (samples, lines) if with_lines else samples


# --- checkpoints ------------------------------------------------------------------

_CONFIG_INT = ("num_classes", "in_channels", "kernel_size", "stride", "num_regions", "reduced_dim")
_CONFIG_FLOAT = ("gem_p_init", "gem_eps", "bn_momentum", "bn_var_floor")


def _model_arrays(model: ReIDModel) -> dict[str, np.ndarray]:
    cfg = model.config
    arrays = {f"param.{k}": v for k, v in model.params.items()}
    arrays.update({f"buffer.{k}": v for k, v in model.buffers.items()})
    for name in _CONFIG_INT + _CONFIG_FLOAT:
        arrays[f"config.{name}"] = np.array(float(getattr(cfg, name)))
    arrays["config.block_channels"] = np.array(cfg.block_channels, dtype=np.float64)
    arrays["config.channel_mean"] = np.array(cfg.preprocess.channel_mean, dtype=np.float64)
    arrays["config.channel_std"] = np.array(cfg.preprocess.channel_std, dtype=np.float64)
    return arrays


def encode_checkpoint(model: ReIDModel) -> bytes:
    arrays = _model_arrays(model)
    out = [b"FRMC", struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_checkpoint(data: bytes) -> ReIDModel:
    r = _Reader(data, "FRMC checkpoint")
    r.magic(b"FRMC")
    version, count = r.u32(2)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    arrays = {}
    for _ in range(count):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        dims = () if rank == 0 else tuple(np.atleast_1d(r.u32(rank)))
        size = int(np.prod(dims)) if dims else 1
        arrays[name] = r.f64(size).reshape(dims)
    r.finish()
    try:
        cfg = ModelConfig(
            **{k: int(arrays[f"config.{k}"]) for k in _CONFIG_INT},
            **{k: float(arrays[f"config.{k}"]) for k in _CONFIG_FLOAT},
            block_channels=tuple(int(c) for c in arrays["config.block_channels"]),
            clip_lo=float(arrays["buffer.clip_lo"]),
            clip_hi=float(arrays["buffer.clip_hi"]),
            preprocess=PreprocessConfig(
                tuple(float(v) for v in arrays["config.channel_mean"]),
                tuple(float(v) for v in arrays["config.channel_std"]),
            ),
        )
    except KeyError as exc:
        raise FormatError(f"checkpoint lacks entry {exc}") from None
    params = {k[len("param.") :]: v.copy() for k, v in arrays.items() if k.startswith("param.")}
    buffers = {k[len("buffer.") :]: v.copy() for k, v in arrays.items() if k.startswith("buffer.")}
    reference = ReIDModel.initialize(cfg, np.random.default_rng(0))
    if set(params) != set(reference.params) or any(params[k].shape != reference.params[k].shape for k in params):
        raise FormatError("checkpoint parameters do not match the stored architecture")
    # Restore the canonical parameter order.
    params = {k: params[k] for k in reference.params}
    return ReIDModel(cfg, params, buffers)


def save_checkpoint(model: ReIDModel, path: str | Path) -> None:
    atomic_write(path, encode_checkpoint(model))


def load_checkpoint(path: str | Path) -> ReIDModel:
    return decode_checkpoint(Path(path).read_bytes())


# --- embeddings and distance matrices --------------------------------------------

def encode_embeddings(emb: EmbeddingSet) -> bytes:
    n, d = emb.features.shape
    out = [b"FREM", struct.pack("<II", n, d)]
    for i in range(n):
        out.append(struct.pack("<II", int(emb.identities[i]), int(emb.cameras[i])))
        out.append(emb.features[i].astype("<f8").tobytes())
    return b"".join(out)


def decode_embeddings(data: bytes, mode: str = "single") -> EmbeddingSet:
    r = _Reader(data, "FREM embeddings")
    r.magic(b"FREM")
    n, d = r.u32(2)
    ids, cams = np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64)
    feats = np.zeros((n, d))
    for i in range(n):
        ids[i], cams[i] = r.u32(2)
        feats[i] = r.f64(d)
    r.finish()
    return EmbeddingSet(feats, ids, cams, mode)


def write_embeddings(path: str | Path, emb: EmbeddingSet) -> None:
    atomic_write(path, encode_embeddings(emb))


def read_embeddings(path: str | Path) -> EmbeddingSet:
    return decode_embeddings(Path(path).read_bytes())


def encode_matrix(matrix: np.ndarray) -> bytes:
    m = np.asarray(matrix, dtype="<f8")
    if m.ndim != 2:
        raise FormatError(f"expected a 2-D matrix, got shape {m.shape}")
    return b"FRDM" + struct.pack("<II", *m.shape) + np.ascontiguousarray(m).tobytes()


def decode_matrix(data: bytes) -> np.ndarray:
    r = _Reader(data, "FRDM matrix")
    r.magic(b"FRDM")
    rows, cols = r.u32(2)
    m = r.f64(rows * cols).reshape(rows, cols)
    r.finish()
    return m


def write_matrix(path: str | Path, matrix: np.ndarray) -> None:
    atomic_write(path, encode_matrix(matrix))


def read_matrix(path: str | Path) -> np.ndarray:
    return decode_matrix(Path(path).read_bytes())
