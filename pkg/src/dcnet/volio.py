"""Binary containers, diffusion-cube extraction, model serialization and
map export.

Container layout (all little-endian, offsets in bytes):

    0   magic       4s   "DCB1" for signal/score volumes, "ROI1" for masks
    4   version     u16  currently 1
    6   dims        3*u32
    18  channels K  u32
    22  b_value     f64
    30  gradients   K*3 f64
    ..  payload     N1*N2*N3*K float32 for volumes (channel-fastest,
                    C order), N1*N2*N3 uint8 for masks (K = 1)

Model files: "MDL1", u32 header length, a UTF-8 JSON header (config echo,
parameter count, seed, sha-256 fingerprint of the payload, free-form
training metadata), then the flat float64 parameter vector in canonical
layout order.  All writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .network import NetworkConfig, NetworkParams, param_count, param_layout
from .sh import GradientScheme, fit_sh_many, num_coeffs

MAGIC_VOLUME = b"DCB1"
MAGIC_MASK = b"ROI1"
MAGIC_MODEL = b"MDL1"
_HEADER = struct.Struct("<4sHIIIId")
FORMAT_VERSION = 1


def _atomic_write(path, write_fn):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            write_fn(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class Volume:
    data: np.ndarray  # (N1, N2, N3, K) float64 in memory, float32 on disk
    b_value: float
    directions: np.ndarray  # (K, 3)

    @property
    def scheme(self) -> GradientScheme:
        return GradientScheme(self.directions, self.b_value)


def write_volume(path, data: np.ndarray, b_value: float, directions: np.ndarray):
    data = np.asarray(data)
    if data.ndim != 4:
        raise ValueError("volume data must be (N1, N2, N3, K)")
    directions = np.asarray(directions, dtype=np.float64).reshape(data.shape[3], 3)

    def emit(fh):
        fh.write(_HEADER.pack(MAGIC_VOLUME, FORMAT_VERSION, *data.shape[:3], data.shape[3], float(b_value)))
        fh.write(directions.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())

    _atomic_write(path, emit)


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    magic, version, n1, n2, n3, k, b_value = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC_VOLUME:
        raise ValueError(f"{path}: not a volume container (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    off = _HEADER.size
    directions = np.frombuffer(raw, dtype="<f8", count=k * 3, offset=off).reshape(k, 3).copy()
    off += k * 3 * 8
    expected = n1 * n2 * n3 * k
    payload = np.frombuffer(raw, dtype="<f4", count=-1, offset=off)
    if payload.size != expected:
        raise ValueError(f"{path}: payload length {payload.size} does not match header ({expected})")
    data = payload.astype(np.float64).reshape(n1, n2, n3, k)
    return Volume(data, b_value, directions)


def write_mask(path, mask: np.ndarray):
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValueError("mask must be (N1, N2, N3)")

    def emit(fh):
        fh.write(_HEADER.pack(MAGIC_MASK, FORMAT_VERSION, *mask.shape, 1, 0.0))
        fh.write(np.zeros((1, 3), dtype="<f8").tobytes())
        fh.write((mask != 0).astype(np.uint8).tobytes())

    _atomic_write(path, emit)


def read_mask(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, version, n1, n2, n3, k, _ = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC_MASK:
        raise ValueError(f"{path}: not a mask container (magic {magic!r})")
    if version != FORMAT_VERSION or k != 1:
        raise ValueError(f"{path}: malformed mask header")
    off = _HEADER.size + 24
    payload = np.frombuffer(raw, dtype=np.uint8, count=-1, offset=off)
    if payload.size != n1 * n2 * n3:
        raise ValueError(f"{path}: payload length does not match header")
    return payload.reshape(n1, n2, n3) != 0


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------


def write_model(path, params: NetworkParams, seed: int, training_meta: dict | None = None):
    payload = np.ascontiguousarray(params.flat, dtype="<f8").tobytes()
    header = {
        "config": asdict(params.config),
        "param_count": param_count(params.config).total,
        "seed": seed,
        "fingerprint": hashlib.sha256(payload).hexdigest(),
        "training": training_meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()

    def emit(fh):
        fh.write(MAGIC_MODEL)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)

    _atomic_write(path, emit)


def read_model(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC_MODEL:
        raise ValueError(f"{path}: not a model file")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8 : 8 + hlen].decode())
    config = NetworkConfig(**header["config"])
    flat = np.frombuffer(raw, dtype="<f8", offset=8 + hlen).copy()
    expected = param_layout(config)[1]
    if flat.size != expected or header["param_count"] != expected:
        raise ValueError(f"{path}: parameter count mismatch")
    if hashlib.sha256(flat.tobytes()).hexdigest() != header["fingerprint"]:
        raise ValueError(f"{path}: fingerprint mismatch")
    return NetworkParams(config, flat), header


# ---------------------------------------------------------------------------
# cohort manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubjectEntry:
    subject_id: str
    label: int
    volume: str
    mask: str


@dataclass
class CohortManifest:
    root: Path
    subjects: list
    provenance: dict = field(default_factory=dict)

    def volume_path(self, entry: SubjectEntry) -> Path:
        return self.root / entry.volume

    def mask_path(self, entry: SubjectEntry) -> Path:
        return self.root / entry.mask


def write_manifest(path, manifest: CohortManifest):
    doc = {
        "format": "dcnet-cohort-1",
        "provenance": manifest.provenance,
        "subjects": [asdict(s) for s in manifest.subjects],
    }

    def emit(fh):
        fh.write(json.dumps(doc, indent=2, sort_keys=True).encode())

    _atomic_write(path, emit)


def read_manifest(path) -> CohortManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format") != "dcnet-cohort-1":
        raise ValueError(f"{path}: not a cohort manifest")
    subjects = [SubjectEntry(**s) for s in doc["subjects"]]
    return CohortManifest(path.parent, subjects, doc.get("provenance", {}))


# ---------------------------------------------------------------------------
# diffusion-cube extraction and SH fitting over volumes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CubeSet:
    centers: np.ndarray  # (N, 3) voxel coordinates, lexicographic order
    cubes: np.ndarray    # (N, M, M, M, K)

    def __len__(self):
        return self.centers.shape[0]


def extract_dcs(volume: Volume | np.ndarray, mask: np.ndarray, radius: int = 1) -> CubeSet:
    """All cubes whose full (2 radius + 1)^3 neighbourhood lies inside the mask."""
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float64)
    mask = np.asarray(mask) != 0
    if data.shape[:3] != mask.shape:
        raise ValueError("volume and mask dimensions disagree")
    m = 2 * radius + 1
    if any(s < m for s in mask.shape):
        raise ValueError(f"radius {radius} too large for volume {mask.shape}")
    windows = sliding_window_view(mask, (m, m, m))
    inner = windows.all(axis=(3, 4, 5))
    centers = np.argwhere(inner) + radius  # argwhere is lexicographic
    cube_view = sliding_window_view(data, (m, m, m), axis=(0, 1, 2))
    cubes = cube_view[inner].transpose(0, 2, 3, 4, 1)  # window dims after channel axis
    return CubeSet(centers, np.ascontiguousarray(cubes))


def dcs_to_sh(cubes: np.ndarray, scheme: GradientScheme, n_max: int = 6, reg: float = 0.006) -> np.ndarray:
    """Voxelwise SH fit of (N, M, M, M, K) cubes; returns (N, M, M, M, P)."""
    cubes = np.asarray(cubes, dtype=np.float64)
    n, m = cubes.shape[0], cubes.shape[1]
    coeffs = fit_sh_many(cubes.reshape(-1, scheme.k), scheme, n_max, reg)
    return coeffs.reshape(n, m, m, m, num_coeffs(n_max))


def fit_sh_volume(volume: Volume, mask: np.ndarray, n_max: int = 6, reg: float = 0.006) -> np.ndarray:
    """SH coefficients at every masked voxel; zeros elsewhere."""
    mask = np.asarray(mask) != 0
    coeffs = np.zeros(volume.data.shape[:3] + (num_coeffs(n_max),))
    coeffs[mask] = fit_sh_many(volume.data[mask], volume.scheme, n_max, reg)
    return coeffs


# ---------------------------------------------------------------------------
# score-map export
# ---------------------------------------------------------------------------


def write_pgm(path, image: np.ndarray):
    """8-bit binary PGM; values are expected in [0, 255]."""
    image = np.asarray(image)

    def emit(fh):
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(image.astype(np.uint8).tobytes())

    _atomic_write(path, emit)


def export_psic(path, scores: np.ndarray, mask: np.ndarray):
    """Write a one-channel score container plus PGM slices.

    ``scores`` holds per-voxel values in [0, 1] (zero outside the mask);
    one grayscale image is written per axial (constant third index) slice
    intersecting the mask, named ``<stem>_z<index>.pgm``.  Returns the
    written paths.
    """
    path = Path(path)
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(mask) != 0
    if scores.shape != mask.shape:
        raise ValueError("scores and mask dimensions disagree")
    if scores.min() < 0 or scores.max() > 1:
        raise ValueError("scores must lie in [0, 1]")
    clean = np.where(mask, scores, 0.0)
    write_volume(path, clean[..., None], 0.0, np.zeros((1, 3)))
    written = [path]
    stem = path.parent / path.stem
    for z in range(mask.shape[2]):
        if not mask[:, :, z].any():
            continue
        img = np.rint(clean[:, :, z] * 255.0)
        slice_path = Path(f"{stem}_z{z:03d}.pgm")
        write_pgm(slice_path, img)
        written.append(slice_path)
    return written
