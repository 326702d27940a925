"""k-means codebook over speech feature frames and frame quantization.

Frames come from any upstream feature extractor (or the synthetic
generator) at a declared frame rate; fitting uses Lloyd's algorithm with
k-means++ seeding. Quantization maps each frame to its nearest centroid
by squared Euclidean distance, ties broken toward the lowest index, so a
fitted codebook defines a pure function from frames to discrete tokens.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from speechdex import backend
from speechdex.errors import CodebookError, IntegrityError

log = logging.getLogger(__name__)

_CODEBOOK_FORMAT = "speechdex-codebook-v1"


@dataclass
class Codebook:
    """k centroid rows defining the audio-token vocabulary."""

    centroids: np.ndarray  # [k, dim] float32
    frame_rate_hz: float = 25.0
    seed: int = 0
    fit_history: list[float] | None = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if self.k < 2:
            raise CodebookError(f"codebook needs k >= 2, got {self.k}")
        if not np.all(np.isfinite(self.centroids)):
            raise CodebookError("codebook centroids must be finite")


@dataclass
class FrameSequence:
    """One utterance's feature frames."""

    frames: np.ndarray  # [L, dim]
    source_id: str = ""
    language: str = ""

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise CodebookError(f"frame sequence must be [L>=1, dim], got {self.frames.shape}")


def _pairwise_sq(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x - c[None, :]
    return np.einsum("nd,nd->n", diff, diff)


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[rng.integers(n)]
    d2 = _pairwise_sq(x, centroids[0])
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = x[idx]
        d2 = np.minimum(d2, _pairwise_sq(x, centroids[j]))
    return centroids


def fit_codebook(frames: np.ndarray, k: int, max_iters: int = 25,
                 seed: int = 0, frame_rate_hz: float = 25.0) -> Codebook:
    """Fit k centroids with Lloyd's algorithm (k-means++ init, fixed seed).

    Deterministic for a fixed seed and frame order. Stops when assignments
    stop changing or after max_iters. Empty clusters are re-seeded to the
    point farthest from its current centroid. The per-iteration distortion
    trace (non-increasing) is kept on the returned Codebook.fit_history.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2:
        raise CodebookError(f"frames must be 2-D [n, dim], got {x.shape}")
    n, dim = x.shape
    if n < k:
        raise CodebookError(f"insufficient data: {n} frames for k={k}")
    if max_iters < 1:
        raise CodebookError(f"max_iters must be >= 1, got {max_iters}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(x, k, rng)

    history: list[float] = []
    assignment = None
    for _ in range(max_iters):
        idx, d2 = backend.assign_nearest(x, centroids)
        distortion_now = float(d2.mean())
        if history and distortion_now > history[-1] + 1e-12 * max(1.0, history[-1]):
            raise AssertionError(
                f"Lloyd distortion increased: {history[-1]} -> {distortion_now}")
        history.append(distortion_now)
        if assignment is not None and np.array_equal(idx, assignment):
            break
        assignment = idx

        sums = np.zeros((k, dim), dtype=np.float64)
        np.add.at(sums, idx, x)
        counts = np.bincount(idx, minlength=k)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]

        empties = np.flatnonzero(~nonempty)
        if empties.size:
            d2_repair = d2.copy()
            for e in empties:
                far = int(np.argmax(d2_repair))
                if d2_repair[far] <= 0.0:
                    log.warning("cluster %d empty and no separated point to re-seed from", e)
                    break
                centroids[e] = x[far]
                d2_repair[far] = 0.0

    cb32 = centroids.astype(np.float32)
    dup = len({row.tobytes() for row in cb32}) < k
    if dup:
        log.warning("codebook contains identical centroids (collapsed clusters)")
    return Codebook(cb32, frame_rate_hz=frame_rate_hz, seed=seed, fit_history=history)


def quantize(seq: FrameSequence, cb: Codebook) -> list[int]:
    """Audio tokens in [0, k): nearest centroid per frame, lowest index on ties."""
    if seq.frames.shape[1] != cb.dim:
        raise CodebookError(
            f"frame dim {seq.frames.shape[1]} does not match codebook dim {cb.dim}")
    idx, _ = backend.assign_nearest(seq.frames, cb.centroids)
    return [int(i) for i in idx]


def distortion(frames: np.ndarray, cb: Codebook) -> float:
    """Mean squared distance from each frame to its assigned centroid."""
    x = np.ascontiguousarray(frames, dtype=np.float32)
    if x.shape[1] != cb.dim:
        raise CodebookError(f"frame dim {x.shape[1]} does not match codebook dim {cb.dim}")
    _, d2 = backend.assign_nearest(x, cb.centroids)
    return float(d2.mean())


# ---------------------------------------------------------------------------
# codebook file: one JSON header line, then little-endian float32 centroids
# ---------------------------------------------------------------------------

def save_codebook(cb: Codebook, path: str) -> None:
    header = {
        "format": _CODEBOOK_FORMAT,
        "k": cb.k,
        "dim": cb.dim,
        "frame_rate_hz": cb.frame_rate_hz,
        "seed": cb.seed,
    }
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        f.write(np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_codebook(path: str) -> Codebook:
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"bad codebook header in {path}: {exc}") from exc
        if header.get("format") != _CODEBOOK_FORMAT:
            raise IntegrityError(f"{path} is not a codebook file")
        blob = f.read()
    k, dim = header["k"], header["dim"]
    expected = k * dim * 4
    if len(blob) != expected:
        raise IntegrityError(
            f"codebook block is {len(blob)} bytes, expected {expected} for k={k} dim={dim}")
    centroids = np.frombuffer(blob, dtype="<f4").reshape(k, dim)
    return Codebook(centroids.copy(), frame_rate_hz=header["frame_rate_hz"], seed=header["seed"])
