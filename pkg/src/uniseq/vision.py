"""Image ingestion, patch grids, the k-means patch codebook and the patch embedder.

Two separate paths leave an image: raw patch vectors go through the trainable
embedder into the encoder, while the frozen codebook turns the same patches
into discrete vision tokens used as prediction targets.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError, ImageParseError, ImageSizeError, ShapeError
from .numerics import Tensor, concat, gelu, matmul, reshape, take
from .tokenization import UnifiedVocabulary

NORM_MEAN = 0.5
NORM_STD = 0.5


@dataclass(eq=False)
class Image:
    """Normalised pixels, shape (H, W, C) with values in [-1, 1]."""

    pixels: np.ndarray

    @classmethod
    def from_unit(cls, values: np.ndarray) -> "Image":
        """Build from values in [0, 1], shape (H, W) or (H, W, C)."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ImageParseError(f"unsupported image array shape {arr.shape}")
        if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
            raise ImageParseError("pixel values must lie in [0, 1]")
        return cls((arr - NORM_MEAN) / NORM_STD)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def _read_header(data: bytes) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise ImageParseError("truncated header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise ImageParseError("truncated header comment")
            pos = end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(data[start:pos])
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageParseError("missing whitespace after header")
    return tokens, pos + 1


def decode_pnm(data: bytes) -> Image:
    """Decode binary PGM (P5) or PPM (P6) with 8-bit samples."""
    tokens, offset = _read_header(data)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageParseError(f"unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageParseError("non-integer header field") from exc
    if width < 1 or height < 1:
        raise ImageParseError("image dimensions must be positive")
    if not 1 <= maxval <= 255:
        raise ImageParseError(f"unsupported max value {maxval}")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    raw = data[offset:offset + need]
    if len(raw) < need:
        raise ImageParseError(f"truncated pixel data: expected {need} bytes, got {len(raw)}")
    values = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
    if values.max(initial=0) > maxval:
        raise ImageParseError("sample exceeds declared max value")
    return Image.from_unit((values / maxval).reshape(height, width, channels))


def load_image(path: str | Path) -> Image:
    return decode_pnm(Path(path).read_bytes())


def encode_pnm(samples: np.ndarray) -> bytes:
    """Encode uint8 samples (H, W) or (H, W, 1|3) as P5/P6."""
    arr = np.asarray(samples, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    magic = b"P5" if arr.shape[2] == 1 else b"P6"
    head = magic + f"\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode()
    return head + arr.tobytes()


def save_image(path: str | Path, samples: np.ndarray) -> None:
    from .io_utils import atomic_write_bytes
    atomic_write_bytes(path, encode_pnm(samples))


# ----------------------------------------------------------------------------
# patches
# ----------------------------------------------------------------------------

@dataclass(eq=False)
class PatchGrid:
    rows: int
    cols: int
    patch_size: int
    channels: int
    patches: np.ndarray          # (rows*cols, P*P*C), raster order
    kept: np.ndarray = None      # strictly increasing raster indices

    def __post_init__(self):
        if self.kept is None:
            self.kept = np.arange(self.rows * self.cols)

    @property
    def vectors(self) -> np.ndarray:
        """Patch vectors that survived subsampling, in raster order."""
        return self.patches[self.kept]

    def __len__(self) -> int:
        return len(self.kept)


def patchify(image: Image, patch_size: int) -> PatchGrid:
    """Centre-crop to a multiple of ``patch_size`` and cut non-overlapping patches."""
    p = patch_size
    if p < 1:
        raise ValueError("patch size must be at least 1")
    h, w, c = image.pixels.shape
    if h < p or w < p:
        raise ImageSizeError(f"image {h}x{w} smaller than patch size {p}")
    rows, cols = h // p, w // p
    top, left = (h - rows * p) // 2, (w - cols * p) // 2
    crop = image.pixels[top:top + rows * p, left:left + cols * p]
    patches = (crop.reshape(rows, p, cols, p, c)
               .transpose(0, 2, 1, 3, 4)
               .reshape(rows * cols, p * p * c))
    return PatchGrid(rows, cols, p, c, np.ascontiguousarray(patches))


def subsample_patches(grid: PatchGrid, max_count: int, seed: int) -> PatchGrid:
    if max_count < 1:
        raise ValueError("max_count must be at least 1")
    if len(grid) <= max_count:
        return grid
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(grid.kept, size=max_count, replace=False))
    return PatchGrid(grid.rows, grid.cols, grid.patch_size, grid.channels, grid.patches, chosen)


# ----------------------------------------------------------------------------
# codebook
# ----------------------------------------------------------------------------

CODEBOOK_MAGIC = b"UVQC"
CODEBOOK_VERSION = 1


@dataclass(eq=False)
class Codebook:
    centroids: np.ndarray
    frozen: bool = True
    distortion_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        c = np.array(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ShapeError("codebook must be a non-empty K x D matrix")
        if not np.isfinite(c).all():
            raise DataError("codebook centroids must be finite")
        if self.frozen:
            c.flags.writeable = False
        self.centroids = c

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def dumps(self) -> bytes:
        head = CODEBOOK_MAGIC + struct.pack("<III", CODEBOOK_VERSION, self.size, self.dim)
        return head + self.centroids.astype("<f8").tobytes()

    @classmethod
    def loads(cls, data: bytes) -> "Codebook":
        if data[:4] != CODEBOOK_MAGIC:
            raise DataError("not a codebook file (bad magic)")
        if len(data) < 16:
            raise DataError("truncated codebook header")
        version, k, d = struct.unpack("<III", data[4:16])
        if version != CODEBOOK_VERSION:
            raise DataError(f"unsupported codebook version {version}")
        body = data[16:]
        if len(body) != 8 * k * d:
            raise DataError("codebook payload length does not match header")
        return cls(np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(k, d))

    def save(self, path: str | Path) -> None:
        from .io_utils import atomic_write_bytes
        atomic_write_bytes(path, self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "Codebook":
        return cls.loads(Path(path).read_bytes())


def squared_distances(x: np.ndarray, centroids: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = np.empty((x.shape[0], centroids.shape[0]))
    for start in range(0, x.shape[0], chunk):
        diff = x[start:start + chunk, None, :] - centroids[None, :, :]
        out[start:start + chunk] = (diff * diff).sum(axis=-1)
    return out


def nearest_centroid(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of nearest centroid (lowest index on ties) and its squared distance."""
    d = squared_distances(x, centroids)
    idx = d.argmin(axis=1)
    return idx, d[np.arange(len(idx)), idx]


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = squared_distances(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            pick = rng.choice(n, p=closest / total)
        else:
            pick = rng.integers(n)
        centers.append(x[pick])
        closest = np.minimum(closest, squared_distances(x, x[pick][None])[:, 0])
    return np.array(centers)


def train_codebook(vectors: np.ndarray, k: int, iterations: int, seed: int) -> Codebook:
    """Lloyd's k-means with k-means++ seeding; the result is frozen."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError("train_codebook needs at least one input vector")
    if k < 1:
        raise ValueError("codebook size must be at least 1")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    assign, dist = nearest_centroid(x, centroids)
    history = [float(dist.sum())]
    for _ in range(iterations):
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
        counts = np.bincount(assign, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # empty cluster: move it onto the point currently worst served
            _, dist = nearest_centroid(x, centroids)
            centroids[j] = x[int(dist.argmax())]
        assign, dist = nearest_centroid(x, centroids)
        history.append(float(dist.sum()))
    return Codebook(centroids, frozen=True, distortion_history=history)


def quantize(grid: PatchGrid | np.ndarray, codebook: Codebook,
             vocab: UnifiedVocabulary) -> list[int]:
    """Vision token ids of the kept patches (nearest centroid, ties to lowest index)."""
    x = grid.vectors if isinstance(grid, PatchGrid) else np.atleast_2d(np.asarray(grid, dtype=np.float64))
    if x.shape[1] != codebook.dim:
        raise ShapeError(f"patch length {x.shape[1]} does not match codebook dim {codebook.dim}")
    if codebook.size > vocab.num_vision:
        raise ShapeError(f"codebook has {codebook.size} codes but vocabulary only {vocab.num_vision}")
    idx, _ = nearest_centroid(x, codebook.centroids)
    return [vocab.vision_offset + int(i) for i in idx]


# ----------------------------------------------------------------------------
# trainable patch embedder
# ----------------------------------------------------------------------------

def neighbourhood_index(patch_size: int) -> np.ndarray:
    """(P*P, 9) indices of each pixel's 3x3 neighbourhood; P*P marks zero padding."""
    p = patch_size
    idx = np.full((p * p, 9), p * p, dtype=np.int64)
    for r in range(p):
        for c in range(p):
            k = 0
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < p and 0 <= cc < p:
                        idx[r * p + c, k] = rr * p + cc
                    k += 1
    return idx


def embedder_shapes(patch_size: int, channels: int, hidden: int, d_model: int) -> dict[str, tuple]:
    p2 = patch_size * patch_size
    return {
        "embedder.conv1.w": (9 * channels, hidden),
        "embedder.conv1.b": (hidden,),
        "embedder.conv2.w": (9 * hidden, hidden),
        "embedder.conv2.b": (hidden,),
        "embedder.proj.w": (p2 * hidden, d_model),
        "embedder.proj.b": (d_model,),
    }


def embed_patches(patches: PatchGrid | np.ndarray, params: Mapping[str, Tensor],
                  patch_size: int, channels: int) -> Tensor:
    """Two 3x3 convolution layers over each patch's pixel grid, then a linear projection.

    Returns a ``(num_patches, d_model)`` tensor that participates in backward.
    """
    x = patches.vectors if isinstance(patches, PatchGrid) else np.asarray(patches, dtype=np.float64)
    p2 = patch_size * patch_size
    if x.ndim != 2 or x.shape[1] != p2 * channels:
        raise ShapeError(f"patch vectors of shape {x.shape} do not match P={patch_size}, C={channels}")
    w1 = params["embedder.conv1.w"]
    if w1.shape[0] != 9 * channels:
        raise ShapeError("embedder parameters were built for a different channel count")
    n = x.shape[0]
    nb = neighbourhood_index(patch_size)
    pixels = np.concatenate([x.reshape(n, p2, channels), np.zeros((n, 1, channels))], axis=1)
    cols = pixels[:, nb, :].reshape(n, p2, 9 * channels)
    h = gelu(matmul(Tensor(cols), w1) + params["embedder.conv1.b"])
    hidden = h.shape[-1]
    padded = concat([h, Tensor(np.zeros((n, 1, hidden)))], axis=1)
    neigh = reshape(take(padded, nb, axis=1), (n, p2, 9 * hidden))
    h = gelu(matmul(neigh, params["embedder.conv2.w"]) + params["embedder.conv2.b"])
    flat = reshape(h, (n, p2 * hidden))
    return matmul(flat, params["embedder.proj.w"]) + params["embedder.proj.b"]
