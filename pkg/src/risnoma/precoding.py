"""Quasi-degradation test, closed-form two-user NOMA precoders, and
SINR/rate/power metrics.

User 1 is the strong user: it decodes and subtracts user 2's signal
before decoding its own (SIC), so its own SINR ``s1`` is interference
free, while user 2 treats user 1's signal as noise.  A channel pair is
quasi-degraded when

    Q = (1 + rho1)/cos^2(psi) - rho1 cos^2(psi) / (1 + rho2 sin^2(psi))^2
        <= ||h1||^2 / ||h2||^2,

with ``cos^2(psi)`` the squared correlation coefficient of the two
channels and ``rho_k`` the dimensionless SINR targets.  Under that
condition the power-minimal precoders have a closed form and both rate
constraints are active at the optimum.

The closed form is applied to noise-normalized channels ``h_k /
sigma``: the scaled targets ``sigma^2 * rho_k`` appear only in the
``r_k / ||h_k||^2`` ratios while the combination coefficients use the
dimensionless ``rho_k``.  This is the unique reading for which the
constraint-activeness identities ``s1 = rho1`` and ``s22 = rho2`` hold
for every noise power.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .channel import ChannelSample, compose_channel
from .errors import ConfigurationError, DegenerateInputError, NotQuasiDegraded


@dataclass(frozen=True)
class SinrTargets:
    """Per-user rate requirements (bits per channel use) and noise power."""

    rate_target_1: float = 1.0
    rate_target_2: float = 1.0
    noise_power: float = 1.0

    def __post_init__(self):
        if self.rate_target_1 <= 0 or self.rate_target_2 <= 0:
            raise ConfigurationError("rate targets must be positive")
        if self.noise_power <= 0:
            raise ConfigurationError("noise power must be positive")

    @property
    def sinr_target_1(self) -> float:
        """rho_1 = 2^rate_1 - 1 (dimensionless)."""
        return 2.0 ** self.rate_target_1 - 1.0

    @property
    def sinr_target_2(self) -> float:
        return 2.0 ** self.rate_target_2 - 1.0

    @property
    def scaled_target_1(self) -> float:
        """r_1 = sigma^2 * rho_1 (units of power)."""
        return self.noise_power * self.sinr_target_1

    @property
    def scaled_target_2(self) -> float:
        return self.noise_power * self.sinr_target_2


@dataclass(frozen=True)
class QdReport:
    q_value: float
    gain_ratio: float
    cos_sq_psi: float
    is_qd: bool


@dataclass(frozen=True)
class PrecodingSolution:
    w1: np.ndarray
    w2: np.ndarray
    power: float
    s21: float
    s1: float
    s22: float
    r1_achieved: float
    r2_achieved: float


class UserOrdering(NamedTuple):
    h_strong: np.ndarray
    h_weak: np.ndarray
    swapped: bool


def cos_sq_psi(h1: np.ndarray, h2: np.ndarray) -> float:
    """Squared correlation coefficient |h1^H h2|^2 / (||h1||^2 ||h2||^2).

    1 iff the channels are collinear, 0 iff orthogonal; invariant under
    independent nonzero complex scaling of either argument.
    """
    n1 = float(np.real(np.vdot(h1, h1)))
    n2 = float(np.real(np.vdot(h2, h2)))
    if n1 <= 0.0 or n2 <= 0.0:
        raise DegenerateInputError("cos_sq_psi: zero-norm channel")
    value = abs(np.vdot(h1, h2)) ** 2 / (n1 * n2)
    return min(value, 1.0)


def quasi_degradation(h1: np.ndarray, h2: np.ndarray, targets: SinrTargets) -> QdReport:
    """Quasi-degradation test for an ordered pair (||h1|| >= ||h2||).

    Orthogonal channels give Q = +inf and are never quasi-degraded.
    Q and the gain ratio are invariant under a common unitary rotation
    and under common positive scaling of both channels.
    """
    n1 = float(np.real(np.vdot(h1, h1)))
    n2 = float(np.real(np.vdot(h2, h2)))
    if n1 <= 0.0 or n2 <= 0.0:
        raise DegenerateInputError("quasi_degradation: zero-norm channel")
    c2 = cos_sq_psi(h1, h2)
    gain_ratio = n1 / n2
    if c2 == 0.0:
        return QdReport(np.inf, gain_ratio, 0.0, False)
    rho1, rho2 = targets.sinr_target_1, targets.sinr_target_2
    q = (1.0 + rho1) / c2 - rho1 * c2 / (1.0 + rho2 * (1.0 - c2)) ** 2
    return QdReport(q, gain_ratio, c2, q <= gain_ratio)


def sinr_metrics(h1, h2, w1, w2, noise_power: float) -> tuple[float, float, float]:
    """(s21, s1, s22): user 2's SINR at user 1, user 1's own SNR after
    SIC, and user 2's SINR at user 2."""
    if noise_power <= 0:
        raise ConfigurationError("noise power must be positive")
    p11 = abs(np.vdot(h1, w1)) ** 2
    p12 = abs(np.vdot(h1, w2)) ** 2
    p21 = abs(np.vdot(h2, w1)) ** 2
    p22 = abs(np.vdot(h2, w2)) ** 2
    s21 = p12 / (p11 + noise_power)
    s1 = p11 / noise_power
    s22 = p22 / (p21 + noise_power)
    return s21, s1, s22


def achievable_rates(s21: float, s1: float, s22: float) -> tuple[float, float]:
    """R1 = log2(1 + s1); R2 = min over both decoders of user 2's rate."""
    r1 = np.log2(1.0 + s1)
    r2 = min(np.log2(1.0 + s21), np.log2(1.0 + s22))
    return float(r1), float(r2)


def closed_form_power(n1: float, n2: float, c2: float, targets: SinrTargets) -> float:
    """Transmit power of the closed-form precoders from the channel
    gains ``n_k = ||h_k||^2`` and ``c2 = cos^2(psi)`` alone.

    Computed without materializing the precoders:
    ||w1||^2 = alpha1^2 ((1+rho2)^2 - rho2 (rho2+2) c2) and
    ||w2||^2 = alpha2^2.  Evaluated for any channel pair, quasi-degraded
    or not (training-mode convention).
    """
    rho1, rho2 = targets.sinr_target_1, targets.sinr_target_2
    r1, r2 = targets.scaled_target_1, targets.scaled_target_2
    sin2 = 1.0 - c2
    shrink = 1.0 / (1.0 + rho2 * sin2) ** 2
    a1_sq = (r1 / n1) * shrink
    a2_sq = r2 / n2 + (r1 / n1) * rho2 * c2 * shrink
    w1_sq = a1_sq * ((1.0 + rho2) ** 2 - rho2 * (rho2 + 2.0) * c2)
    return w1_sq + a2_sq


def optimal_precoding(
    h1: np.ndarray,
    h2: np.ndarray,
    targets: SinrTargets,
    require_qd: bool = True,
) -> PrecodingSolution:
    """Closed-form power-minimal precoders for an ordered channel pair.

    In strict mode (default) the channel must be quasi-degraded, else
    :class:`NotQuasiDegraded` is raised carrying the report.  With
    ``require_qd=False`` the closed form is evaluated regardless, which
    is the convention used inside the training objective.
    """
    report = quasi_degradation(h1, h2, targets)
    if require_qd and not report.is_qd:
        raise NotQuasiDegraded(
            f"channel is not quasi-degraded: Q={report.q_value:.6g} > "
            f"gain ratio {report.gain_ratio:.6g}", report,
        )
    n1 = float(np.real(np.vdot(h1, h1)))
    n2 = float(np.real(np.vdot(h2, h2)))
    e1 = h1 / np.sqrt(n1)
    e2 = h2 / np.sqrt(n2)
    c = np.vdot(e2, e1)  # e2^H e1
    rho2 = targets.sinr_target_2
    r1, r2 = targets.scaled_target_1, targets.scaled_target_2
    sin2 = 1.0 - report.cos_sq_psi
    shrink = 1.0 / (1.0 + rho2 * sin2) ** 2
    a1 = np.sqrt((r1 / n1) * shrink)
    a2 = np.sqrt(r2 / n2 + (r1 / n1) * rho2 * report.cos_sq_psi * shrink)
    w1 = a1 * ((1.0 + rho2) * e1 - rho2 * c * e2)
    w2 = a2 * e2
    power = float(np.real(np.vdot(w1, w1)) + np.real(np.vdot(w2, w2)))
    s21, s1, s22 = sinr_metrics(h1, h2, w1, w2, targets.noise_power)
    r1_ach, r2_ach = achievable_rates(s21, s1, s22)
    return PrecodingSolution(w1, w2, power, s21, s1, s22, r1_ach, r2_ach)


def order_users(sample: ChannelSample, phi) -> UserOrdering:
    """Composite channels ordered so the first has the larger gain.

    Ties keep the dataset label order (user 1 first).  The swap decision
    is piecewise constant in the phases; during training, gradients flow
    through the selected branch only.
    """
    composite = compose_channel(sample, phi)
    n1 = float(np.real(np.vdot(composite.h1, composite.h1)))
    n2 = float(np.real(np.vdot(composite.h2, composite.h2)))
    if n2 > n1:
        return UserOrdering(composite.h2, composite.h1, True)
    return UserOrdering(composite.h1, composite.h2, False)
