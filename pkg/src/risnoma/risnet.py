"""Permutation-shared network mapping the 8 x N channel feature to N
RIS phase shifts.

Every layer applies the same transformation to every RIS element's
feature column (a shared-weight 1x1 convolution over elements), plus a
global branch whose output is averaged over all elements and broadcast
back.  The layer output is the concatenation (feature; local; global),
so hidden widths are 8 + local_dim + global_dim regardless of N: the
parameter count is independent of the number of RIS elements, and the
map is permutation equivariant in the element axis.

The final layer maps each column to one nonnegative phase through a
rectifier (phases act modulo 2*pi through cos/sin, so nonnegativity
does not restrict the reachable configurations).  An optional identity
head is available behind ``identity_head`` and is off by default.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import gradengine as ge
from .errors import ConfigurationError, FormatError

INPUT_DIM = 8


@dataclass(frozen=True)
class RisnetConfig:
    layers: int = 8
    local_dim: int = 16
    global_dim: int = 16
    identity_head: bool = False

    def __post_init__(self):
        if self.layers < 2:
            raise ConfigurationError(f"network needs at least 2 layers, got {self.layers}")
        if self.local_dim < 1 or self.global_dim < 1:
            raise ConfigurationError("local_dim and global_dim must be >= 1")

    def width(self, i: int) -> int:
        """Input width of layer i (1-based)."""
        return INPUT_DIM if i == 1 else INPUT_DIM + self.local_dim + self.global_dim


def _block_shapes(config: RisnetConfig):
    """Canonical block order: per hidden layer local weight/bias then
    global weight/bias, then the final weight and bias."""
    for i in range(1, config.layers):
        b = config.width(i)
        yield f"local_w{i}", (config.local_dim, b)
        yield f"local_b{i}", (config.local_dim, 1)
        yield f"global_w{i}", (config.global_dim, b)
        yield f"global_b{i}", (config.global_dim, 1)
    yield "final_w", (1, config.width(config.layers))
    yield "final_b", (1, 1)


@dataclass
class RisnetParams:
    """All trainable weights and biases, kept in canonical block order."""

    config: RisnetConfig
    blocks: list = field(default_factory=list)

    def block_names(self) -> list[str]:
        return [name for name, _ in _block_shapes(self.config)]

    def copy(self) -> "RisnetParams":
        return RisnetParams(self.config, [b.copy() for b in self.blocks])

    def validate(self):
        shapes = list(_block_shapes(self.config))
        if len(self.blocks) != len(shapes):
            raise ConfigurationError(
                f"expected {len(shapes)} parameter blocks, got {len(self.blocks)}"
            )
        for arr, (name, shape) in zip(self.blocks, shapes):
            if arr.shape != shape:
                raise ConfigurationError(f"block {name}: expected shape {shape}, got {arr.shape}")


def param_count(config: RisnetConfig) -> int:
    """Total number of trainable scalars (independent of N)."""
    return sum(int(np.prod(shape)) for _, shape in _block_shapes(config))


def init_params(config: RisnetConfig, seed: int) -> RisnetParams:
    """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero
    biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    blocks = []
    for name, shape in _block_shapes(config):
        if "_b" in name:
            blocks.append(np.zeros(shape))
        else:
            fan_out, fan_in = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            blocks.append(rng.uniform(-bound, bound, size=shape))
    return RisnetParams(config, blocks)


def forward_graph(
    tape: ge.Tape,
    config: RisnetConfig,
    block_tensors: list[ge.Tensor],
    gamma_block: ge.Tensor,
    n: int,
) -> ge.Tensor:
    """Differentiable forward pass over a horizontal stack of features.

    ``gamma_block`` has shape (8, n*batch): the feature matrices of a
    batch laid side by side.  The global branch averages within each
    sample's own block of n columns.  Returns the phase row (1, n*batch).
    """
    rows, cols = gamma_block.shape
    if rows != INPUT_DIM or cols % n:
        raise ConfigurationError(
            f"feature stack must be ({INPUT_DIM}, k*{n}), got {gamma_block.shape}"
        )
    feat = gamma_block
    for i in range(config.layers - 1):
        lw, lb, gw, gb = block_tensors[4 * i: 4 * i + 4]
        local = ge.relu(ge.add_colvec(ge.matmul(lw, feat), lb))
        shared = ge.relu(ge.add_colvec(ge.matmul(gw, feat), gb))
        shared = ge.repeat_cols(ge.mean_col_blocks(shared, n), n)
        feat = ge.concat_rows([gamma_block, local, shared])
    pre = ge.add_colvec(ge.matmul(block_tensors[-2], feat), block_tensors[-1])
    return pre if config.identity_head else ge.relu(pre)


def forward(params: RisnetParams, gamma) -> np.ndarray:
    """Phase vector (length N) for a single 8 x N feature matrix."""
    gamma = np.asarray(getattr(gamma, "gamma", gamma), dtype=np.float64)
    if gamma.ndim != 2 or gamma.shape[0] != INPUT_DIM:
        raise ConfigurationError(f"feature matrix must be {INPUT_DIM} x N, got {gamma.shape}")
    params.validate()
    tape = ge.Tape()
    blocks = [tape.constant(b) for b in params.blocks]
    out = forward_graph(tape, params.config, blocks, tape.constant(gamma), gamma.shape[1])
    return out.data[0].copy()


@dataclass(frozen=True)
class RisConfiguration:
    """N phase shifts; the RIS applies diag(cos f + j sin f)."""

    phases: np.ndarray

    @property
    def n(self) -> int:
        return self.phases.shape[0]

    @property
    def diagonal(self) -> np.ndarray:
        return np.cos(self.phases) + 1j * np.sin(self.phases)

    def matrix(self) -> np.ndarray:
        return np.diag(self.diagonal)


def phases_to_phi(phases) -> RisConfiguration:
    """Wrap a real phase vector; diagonal entries have unit modulus by
    construction."""
    arr = np.asarray(phases, dtype=np.float64).reshape(-1)
    return RisConfiguration(arr)


# ---------------------------------------------------------------------------
# checkpoint file format (RNCK)
# ---------------------------------------------------------------------------

_MAGIC = b"RNCK"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


def write_checkpoint(params: RisnetParams, path):
    """Write the binary checkpoint format; the round trip is bitwise exact."""
    params.validate()
    path = str(path)
    cfg = params.config
    blob = bytearray()
    blob += _HEADER.pack(_MAGIC, _VERSION, cfg.layers, cfg.local_dim, cfg.global_dim, INPUT_DIM)
    for arr in params.blocks:
        blob += arr.astype("<f8", copy=False).tobytes(order="C")
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path) -> RisnetParams:
    path = str(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header at byte {len(raw)}")
    magic, version, layers, local_dim, global_dim, input_dim = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    if input_dim != INPUT_DIM:
        raise FormatError(f"{path}: unsupported input dimension {input_dim} at byte 20")
    try:
        config = RisnetConfig(layers=layers, local_dim=local_dim, global_dim=global_dim)
    except ConfigurationError as exc:
        raise FormatError(f"{path}: invalid header: {exc}") from exc
    expected = _HEADER.size + 8 * param_count(config)
    if len(raw) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes, found {len(raw)} "
            f"(payload mismatch at byte {min(len(raw), expected)})"
        )
    offset = _HEADER.size
    blocks = []
    for _, shape in _block_shapes(config):
        count = int(np.prod(shape))
        blocks.append(
            np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        )
        offset += 8 * count
    return RisnetParams(config, blocks)
