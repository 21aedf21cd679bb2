"""Channel realizations, composite channels through the RIS, feature
extraction, synthetic data generation, and dataset file I/O.

Conventions: channel vectors are stored as column vectors (1-D complex
arrays).  The composite downlink channel of user k under a phase
configuration is ``h_k^H = h_rk^H diag(e^{jf}) H + h_dk^H``.  Because
``H`` has full column rank, the direct channel can be pulled through
``H`` via its pseudo-inverse (``j_k^H = h_dk^H H^+``), which maps every
direct-channel coefficient onto a RIS element and makes a per-element
feature stack possible.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, FormatError

#: relative singular-value cutoff below which a matrix counts as rank deficient
RANK_CUTOFF = 1e-12
#: condition-number limit for the pseudo-inverse
CONDITION_LIMIT = 1e10

FEATURE_ROWS = 8


@dataclass(frozen=True)
class ChannelSample:
    """One realization of the five links: BS->RIS matrix ``H`` (N x M),
    direct channels ``h_d1``/``h_d2`` (length M) and RIS->user channels
    ``h_r1``/``h_r2`` (length N)."""

    H: np.ndarray
    h_d1: np.ndarray
    h_d2: np.ndarray
    h_r1: np.ndarray
    h_r2: np.ndarray

    @property
    def m(self) -> int:
        return self.H.shape[1]

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def validate(self):
        n, m = self.H.shape
        for name, vec, size in (
            ("h_d1", self.h_d1, m),
            ("h_d2", self.h_d2, m),
            ("h_r1", self.h_r1, n),
            ("h_r2", self.h_r2, n),
        ):
            if vec.shape != (size,):
                raise ConfigurationError(f"{name}: expected shape ({size},), got {vec.shape}")
        if not all(np.all(np.isfinite(v))
                   for v in (self.H, self.h_d1, self.h_d2, self.h_r1, self.h_r2)):
            raise DegenerateInputError("channel sample contains non-finite entries")
        _check_full_column_rank(self.H)


@dataclass(frozen=True)
class CompositeChannel:
    """Effective downlink channels after the RIS, one per user."""

    h1: np.ndarray
    h2: np.ndarray


@dataclass(frozen=True)
class ChannelFeature:
    """The 8 x N real feature matrix, one column per RIS element.

    Row order: |h_r1|, arg(h_r1), |j_1|, arg(j_1), |h_r2|, arg(h_r2),
    |j_2|, arg(j_2).  Phases lie in (-pi, pi] with -pi normalized to +pi.
    """

    gamma: np.ndarray

    @property
    def n(self) -> int:
        return self.gamma.shape[1]


@dataclass(frozen=True)
class Dataset:
    """A shared BS->RIS matrix plus per-sample user links.

    ``H`` is stored once: the BS and the RIS do not move, so every
    sample shares it.  Per-sample arrays are stacked with the sample
    index on axis 0.
    """

    H: np.ndarray
    h_d1: np.ndarray
    h_d2: np.ndarray
    h_r1: np.ndarray
    h_r2: np.ndarray
    seed: int

    @property
    def m(self) -> int:
        return self.H.shape[1]

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def size(self) -> int:
        return self.h_d1.shape[0]

    def sample(self, i: int) -> ChannelSample:
        return ChannelSample(self.H, self.h_d1[i], self.h_d2[i], self.h_r1[i], self.h_r2[i])


def _check_full_column_rank(H: np.ndarray):
    s = np.linalg.svd(H, compute_uv=False)
    if s[-1] <= RANK_CUTOFF * s[0]:
        ratio = s[-1] / s[0] if s[0] > 0 else 0.0
        raise DegenerateInputError(
            f"matrix is rank deficient: smallest/largest singular value ratio {ratio:.3e}"
        )


def principal_angle(z: np.ndarray) -> np.ndarray:
    """Argument in (-pi, pi]; a value of exactly -pi maps to +pi."""
    a = np.angle(z)
    return np.where(a <= -np.pi, a + 2.0 * np.pi, a)


def pseudo_inverse(H: np.ndarray) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of a tall full-column-rank matrix."""
    n, m = H.shape
    if n < m:
        raise ConfigurationError(f"pseudo_inverse expects N >= M, got shape {H.shape}")
    u, s, vh = np.linalg.svd(H, full_matrices=False)
    if s[-1] <= RANK_CUTOFF * s[0] or s[0] / s[-1] > CONDITION_LIMIT:
        ratio = s[-1] / s[0] if s[0] > 0 else 0.0
        raise DegenerateInputError(
            f"pseudo-inverse of ill-conditioned matrix: singular value ratio {ratio:.3e}"
        )
    return (vh.conj().T * (1.0 / s)) @ u.conj().T


def compose_channel(sample: ChannelSample, phi) -> CompositeChannel:
    """Composite channels ``h_k^H = h_rk^H diag(e^{jf}) H + h_dk^H``.

    ``phi`` is a RisConfiguration or a plain array of N phases.
    """
    phases = np.asarray(getattr(phi, "phases", phi), dtype=np.float64)
    if phases.shape != (sample.n,):
        raise ConfigurationError(
            f"phase vector shape {phases.shape} does not match N={sample.n}"
        )
    u = np.cos(phases) + 1j * np.sin(phases)
    hh = sample.H.conj().T
    h1 = hh @ (np.conj(u) * sample.h_r1) + sample.h_d1
    h2 = hh @ (np.conj(u) * sample.h_r2) + sample.h_d2
    return CompositeChannel(h1, h2)


def equivalent_direct(sample: ChannelSample) -> tuple[np.ndarray, np.ndarray]:
    """Map the direct channels through H: ``j_k^H = h_dk^H H^+``.

    Returns the column vectors ``j_1``/``j_2`` (length N), which satisfy
    ``(h_rk^H Phi + j_k^H) H = h_k^H`` for every phase configuration.
    """
    pinv_h = pseudo_inverse(sample.H).conj().T
    return pinv_h @ sample.h_d1, pinv_h @ sample.h_d2


def _feature_rows(h_r1, j1, h_r2, j2) -> np.ndarray:
    return np.stack([
        np.abs(h_r1), principal_angle(h_r1),
        np.abs(j1), principal_angle(j1),
        np.abs(h_r2), principal_angle(h_r2),
        np.abs(j2), principal_angle(j2),
    ])


def extract_features(sample: ChannelSample) -> ChannelFeature:
    """Stack per-element magnitudes and phases into the 8 x N feature matrix."""
    j1, j2 = equivalent_direct(sample)
    return ChannelFeature(_feature_rows(sample.h_r1, j1, sample.h_r2, j2))


def dataset_features(dataset: Dataset) -> np.ndarray:
    """Features of every sample, shape (S, 8, N).

    Computes the shared pseudo-inverse once; column i equals
    ``extract_features(dataset.sample(i)).gamma`` exactly.
    """
    pinv_h = pseudo_inverse(dataset.H).conj().T
    out = np.empty((dataset.size, FEATURE_ROWS, dataset.n))
    for i in range(dataset.size):
        out[i] = _feature_rows(
            dataset.h_r1[i], pinv_h @ dataset.h_d1[i],
            dataset.h_r2[i], pinv_h @ dataset.h_d2[i],
        )
    return out


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeometryConfig:
    """Scene parameters for the synthetic channel generator.

    Link gains follow a distance power law ``ref_gain * d**-pathloss_exponent``.
    The BS->RIS matrix mixes a planar-array line-of-sight component with
    Rayleigh scattering at ratio ``k_bs_ris``; RIS->user links are Rician
    with a per-sample direction; BS->user links are Rayleigh only (no
    line of sight) and carry an extra ``direct_attenuation`` factor.

    Per sample, users sit in a sector of the RIS's field of view:
    the shared direction (in sine space) is drawn uniformly from
    ``sector_center +- sector_width/2`` and each user deviates from it
    by up to ``angle_spread``.  The default width 2.0 covers the whole
    range.
    """

    m_antennas: int = 9
    n_elements: int = 64
    pathloss_exponent: float = 2.5
    ref_gain: float = 2.0e4
    d_bs_ris: float = 30.0
    d_ris_user1: float = 5.0
    d_ris_user2: float = 22.0
    d_bs_user1: float = 32.0
    d_bs_user2: float = 48.0
    k_bs_ris: float = 10.0
    k_ris_user: float = 4.0
    angle_spread: float = 0.15
    sector_center: float = 0.0
    sector_width: float = 2.0
    direct_attenuation: float = 1.0e-3

    def __post_init__(self):
        if self.m_antennas < 1 or self.n_elements < 1:
            raise ConfigurationError("geometry needs m_antennas >= 1 and n_elements >= 1")
        if self.n_elements < self.m_antennas:
            raise ConfigurationError(
                f"n_elements ({self.n_elements}) must be >= m_antennas "
                f"({self.m_antennas}) for the pseudo-inverse feature map"
            )
        for name in ("ref_gain", "d_bs_ris", "d_ris_user1", "d_ris_user2",
                     "d_bs_user1", "d_bs_user2", "direct_attenuation"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"geometry.{name} must be positive")

    def _gain(self, d: float) -> float:
        return self.ref_gain * d ** (-self.pathloss_exponent)

    @property
    def gain_bs_ris(self) -> float:
        return self._gain(self.d_bs_ris)

    def gain_ris_user(self, user: int) -> float:
        return self._gain(self.d_ris_user1 if user == 1 else self.d_ris_user2)

    def gain_bs_user(self, user: int) -> float:
        d = self.d_bs_user1 if user == 1 else self.d_bs_user2
        return self._gain(d) * self.direct_attenuation


def _grid_shape(n: int) -> tuple[int, int]:
    rows = int(np.floor(np.sqrt(n)))
    while n % rows:
        rows -= 1
    return rows, n // rows


def _planar_steering(n: int, s1: float, s2: float) -> np.ndarray:
    """Half-wavelength planar-array response flattened to length n."""
    rows, cols = _grid_shape(n)
    iy = np.repeat(np.arange(rows), cols)
    iz = np.tile(np.arange(cols), rows)
    return np.exp(1j * np.pi * (iy * s1 + iz * s2))


def _linear_steering(m: int, s: float) -> np.ndarray:
    return np.exp(1j * np.pi * np.arange(m) * s)


def _cn(rng, *shape) -> np.ndarray:
    """Unit-variance circularly symmetric complex Gaussian draws."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def _rician_mix(k: float) -> tuple[float, float]:
    if np.isinf(k):
        return 1.0, 0.0
    return np.sqrt(k / (k + 1.0)), np.sqrt(1.0 / (k + 1.0))


def generate_synthetic_dataset(geometry: GeometryConfig, sample_count: int, seed: int) -> Dataset:
    """Draw one BS->RIS matrix and ``sample_count`` user-link realizations.

    Deterministic per seed.  If the drawn H is rank deficient the
    scattered component is redrawn; after 10 failed attempts a
    degenerate-input error is raised (this happens when the Rician
    factor is infinite: the line-of-sight component alone is rank 1).
    """
    if sample_count < 1:
        raise ConfigurationError(f"sample_count must be >= 1, got {sample_count}")
    m, n = geometry.m_antennas, geometry.n_elements
    rng = np.random.default_rng(seed)

    los_w, nlos_w = _rician_mix(geometry.k_bs_ris)
    a_ris = _planar_steering(n, rng.uniform(-1, 1), rng.uniform(-1, 1))
    a_bs = _linear_steering(m, rng.uniform(-1, 1))
    los = np.outer(a_ris, a_bs.conj())
    scale = np.sqrt(geometry.gain_bs_ris)
    H = None
    for attempt in range(10):
        candidate = scale * (los_w * los + nlos_w * _cn(rng, n, m))
        s = np.linalg.svd(candidate, compute_uv=False)
        if s[-1] > RANK_CUTOFF * s[0]:
            H = candidate
            break
    if H is None:
        raise DegenerateInputError(
            "BS->RIS matrix is rank deficient after 10 draws; "
            "geometry has no usable scattered component"
        )

    ur_los, ur_nlos = _rician_mix(geometry.k_ris_user)
    g_r = [np.sqrt(geometry.gain_ris_user(k)) for k in (1, 2)]
    g_d = [np.sqrt(geometry.gain_bs_user(k)) for k in (1, 2)]
    h_d = [np.empty((sample_count, m), dtype=np.complex128) for _ in range(2)]
    h_r = [np.empty((sample_count, n), dtype=np.complex128) for _ in range(2)]
    spread = geometry.angle_spread
    half_sector = geometry.sector_width / 2.0
    center = geometry.sector_center
    for i in range(sample_count):
        base1 = center + rng.uniform(-half_sector, half_sector)
        base2 = center + rng.uniform(-half_sector, half_sector)
        for k in range(2):
            s1 = np.clip(base1 + rng.uniform(-spread, spread), -1, 1)
            s2 = np.clip(base2 + rng.uniform(-spread, spread), -1, 1)
            h_d[k][i] = g_d[k] * _cn(rng, m)
            h_r[k][i] = g_r[k] * (ur_los * _planar_steering(n, s1, s2) + ur_nlos * _cn(rng, n))

    return Dataset(H, h_d[0], h_d[1], h_r[0], h_r[1], seed)


# ---------------------------------------------------------------------------
# dataset file format (RNDS)
# ---------------------------------------------------------------------------

_MAGIC = b"RNDS"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIIQ")


def write_dataset(dataset: Dataset, path):
    """Write the binary dataset format; the round trip is bitwise exact."""
    path = str(path)
    m, n, s = dataset.m, dataset.n, dataset.size
    blob = bytearray()
    blob += _HEADER.pack(_MAGIC, _VERSION, m, n, s, dataset.seed)
    blob += dataset.H.astype("<c16", copy=False).tobytes(order="C")
    for i in range(s):
        for arr in (dataset.h_d1[i], dataset.h_d2[i], dataset.h_r1[i], dataset.h_r2[i]):
            blob += arr.astype("<c16", copy=False).tobytes(order="C")
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_dataset(path) -> Dataset:
    path = str(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header at byte {len(raw)}")
    magic, version, m, n, s, seed = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    if m < 1:
        raise FormatError(f"{path}: M must be >= 1, got {m} (byte 8)")
    if n < 1:
        raise FormatError(f"{path}: N must be >= 1, got {n} (byte 12)")
    if s < 1:
        raise FormatError(f"{path}: sample count must be >= 1, got {s} (byte 16)")
    expected = _HEADER.size + 16 * (n * m + s * (2 * m + 2 * n))
    if len(raw) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes, found {len(raw)} "
            f"(payload mismatch at byte {min(len(raw), expected)})"
        )
    offset = _HEADER.size
    H = np.frombuffer(raw, dtype="<c16", count=n * m, offset=offset).reshape(n, m).copy()
    offset += 16 * n * m
    record = np.frombuffer(raw, dtype="<c16", count=s * (2 * m + 2 * n), offset=offset)
    record = record.reshape(s, 2 * m + 2 * n)
    h_d1 = record[:, :m].copy()
    h_d2 = record[:, m:2 * m].copy()
    h_r1 = record[:, 2 * m:2 * m + n].copy()
    h_r2 = record[:, 2 * m + n:].copy()
    return Dataset(H, h_d1, h_d2, h_r1, h_r2, seed)
