"""White-box watermarks for flattened parameter vectors.

A watermark is a bit string embedded through a fixed random projection
matrix: training adds a sigmoid cross-entropy penalty that pushes each
projection toward the sign demanded by its bit, and extraction thresholds
the projections at zero. Projection matrices are regenerable from their
seed, so keys ship as (seed, rows, cols) triples rather than dense arrays.
"""

import functools
from dataclasses import dataclass

import numpy as np

from . import nn
from .seeding import derive_seed


def random_bits(length: int, seed: int) -> np.ndarray:
    """Seeded uniform bit vector of the given length."""
    if length < 0:
        raise ValueError("length must be non-negative")
    return np.random.default_rng(seed).integers(0, 2, size=length, dtype=np.uint8)


def bits_to_hex(bits: np.ndarray) -> str:
    """Pack bits (big-endian within bytes) into a hex string."""
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes().hex()


def hex_to_bits(text: str, length: int) -> np.ndarray:
    unpacked = np.unpackbits(np.frombuffer(bytes.fromhex(text), dtype=np.uint8))
    if len(unpacked) < length:
        raise ValueError(f"hex string holds {len(unpacked)} bits, need {length}")
    return unpacked[:length].astype(np.uint8)


def split_watermark(bits: np.ndarray, layer_sizes) -> list[np.ndarray]:
    """Divide a watermark across layers in proportion to layer size.

    Layer k receives floor(size_k / total_size * len(bits)) bits; the last
    layer absorbs the remainder so no bit is dropped.
    """
    bits = np.asarray(bits, dtype=np.uint8)
    layer_sizes = list(layer_sizes)
    if not layer_sizes:
        raise ValueError("layer_sizes must be non-empty")
    if any(s <= 0 for s in layer_sizes):
        raise ValueError("layer sizes must be positive")
    if len(bits) < len(layer_sizes):
        raise ValueError(f"{len(bits)} bits cannot cover {len(layer_sizes)} layers")
    total = sum(layer_sizes)
    counts = [len(bits) * s // total for s in layer_sizes[:-1]]
    counts.append(len(bits) - sum(counts))
    segments = []
    offset = 0
    for c in counts:
        segments.append(bits[offset : offset + c])
        offset += c
    return segments


def gen_embedding_matrix(rows: int, cols: int, seed: int) -> np.ndarray:
    """Seeded standard-normal projection matrix, one column per bit."""
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix dims must be positive, got {rows}x{cols}")
    return np.random.default_rng(seed).standard_normal((rows, cols))


@functools.lru_cache(maxsize=512)
def cached_embedding_matrix(rows: int, cols: int, seed: int) -> np.ndarray:
    """Read-only cached variant for hot training loops; regeneration from the
    seed every SGD step would dominate the run time."""
    matrix = gen_embedding_matrix(rows, cols, seed)
    matrix.flags.writeable = False
    return matrix


def extract_bits(params_flat: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Read bits as the sign of each projection; ties at exactly zero give 0."""
    params_flat = np.asarray(params_flat, dtype=np.float64)
    if params_flat.shape != (matrix.shape[0],):
        raise ValueError(
            f"parameter vector length {params_flat.shape} does not match matrix rows {matrix.shape[0]}"
        )
    return (matrix.T @ params_flat > 0.0).astype(np.uint8)


def detection_rate(expected: np.ndarray, extracted: np.ndarray) -> float:
    """1 minus the normalized Hamming distance between bit vectors."""
    expected = np.asarray(expected, dtype=np.uint8)
    extracted = np.asarray(extracted, dtype=np.uint8)
    if expected.shape != extracted.shape or expected.ndim != 1 or len(expected) == 0:
        raise ValueError("bit vectors must be 1-d, non-empty, and of equal length")
    return float((expected == extracted).mean())


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def embedding_loss_and_grad(params_flat, matrix, bits) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy between sigmoid(projections) and the bits,
    with its exact gradient in parameter space.

    The loss is overflow-safe for arbitrarily large projections. Gradient:
    matrix @ (sigmoid(proj) - bits) / len(bits).
    """
    params_flat = np.asarray(params_flat, dtype=np.float64)
    bits = np.asarray(bits, dtype=np.float64)
    if bits.ndim != 1 or len(bits) == 0:
        raise ValueError("bits must be a non-empty 1-d vector")
    if matrix.shape != (len(params_flat), len(bits)):
        raise ValueError(
            f"matrix shape {matrix.shape} does not match {len(params_flat)} params x {len(bits)} bits"
        )
    proj = matrix.T @ params_flat
    # log(sigmoid(p)) = -softplus(-p); log(1 - sigmoid(p)) = -softplus(p)
    softplus = np.logaddexp(0.0, proj)
    per_bit = bits * (softplus - proj) + (1.0 - bits) * softplus
    loss = float(per_bit.mean())
    grad = matrix @ (_sigmoid(proj) - bits) / len(bits)
    return loss, grad


@dataclass(frozen=True)
class PrivateWatermarkSpec:
    """A client's head watermark: the bits, the head layers they target, and
    the per-layer projection matrix seeds (matrices regenerate on demand)."""

    bits: np.ndarray
    target_layers: tuple
    layer_sizes: tuple
    matrix_seeds: tuple

    def __post_init__(self):
        if not (len(self.target_layers) == len(self.layer_sizes) == len(self.matrix_seeds)):
            raise ValueError("target_layers, layer_sizes and matrix_seeds must align")

    @property
    def segments(self) -> list[np.ndarray]:
        return split_watermark(self.bits, self.layer_sizes)

    def matrix(self, position: int) -> np.ndarray:
        cols = len(self.segments[position])
        return cached_embedding_matrix(self.layer_sizes[position], cols, self.matrix_seeds[position])


def make_private_spec(bits, target_layers, layer_sizes, key_seed: int) -> PrivateWatermarkSpec:
    """Build a head watermark spec, deriving one matrix seed per target layer."""
    bits = np.asarray(bits, dtype=np.uint8)
    target_layers = tuple(int(t) for t in target_layers)
    layer_sizes = tuple(int(s) for s in layer_sizes)
    split_watermark(bits, layer_sizes)  # validates the split up front
    seeds = tuple(derive_seed(key_seed, pos) for pos in range(len(target_layers)))
    return PrivateWatermarkSpec(bits, target_layers, layer_sizes, seeds)


def private_embedding_loss_and_grads(model, spec: PrivateWatermarkSpec):
    """Total embedding loss over all target layers plus per-layer flat grads."""
    total = 0.0
    flat_grads = {}
    for pos, layer_id in enumerate(spec.target_layers):
        segment = spec.segments[pos]
        if len(segment) == 0:
            continue
        flat = nn.layer_flat(model, layer_id)
        loss, grad = embedding_loss_and_grad(flat, spec.matrix(pos), segment)
        total += loss
        flat_grads[layer_id] = grad
    return total, flat_grads


def extract_private_bits(model, spec: PrivateWatermarkSpec) -> np.ndarray:
    """Extract and concatenate all segments of a head watermark."""
    pieces = []
    for pos, layer_id in enumerate(spec.target_layers):
        segment = spec.segments[pos]
        if len(segment) == 0:
            continue
        flat = nn.layer_flat(model, layer_id)
        pieces.append(extract_bits(flat, spec.matrix(pos)))
    return np.concatenate(pieces) if pieces else np.array([], dtype=np.uint8)


def private_detection_rate(model, spec: PrivateWatermarkSpec) -> float:
    return detection_rate(spec.bits, extract_private_bits(model, spec))
