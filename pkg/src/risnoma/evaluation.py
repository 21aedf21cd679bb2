"""Test-set evaluation and the random-phase baseline.

Both paths share the measurement protocol: configure the RIS, compose
the channels, order the users by gain, run the quasi-degradation test,
and evaluate the closed-form power (computed for every sample, also the
non-quasi-degraded ones).  The report carries two power aggregates
because non-quasi-degraded samples have no feasibility guarantee:
``mean_power_qd_only`` averages over quasi-degraded samples only, while
``mean_power_all_penalized`` includes every sample's closed-form power.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .channel import ChannelSample, Dataset, dataset_features
from .errors import ConfigurationError, FormatError
from .precoding import SinrTargets, optimal_precoding, quasi_degradation, order_users
from .risnet import RisnetParams, forward, phases_to_phi


class EvalRecord(NamedTuple):
    sample_index: int
    power: float
    is_qd: bool
    swapped: bool
    inference_us: float


@dataclass
class EvalReport:
    records: list
    mean_power_qd_only: float
    mean_power_all: float
    qd_percentage: float
    trial_count: int

    @property
    def mean_inference_us(self) -> float:
        if not self.records:
            return 0.0
        return float(np.mean([r.inference_us for r in self.records]))


class BaselineResult(NamedTuple):
    power: float
    phases: np.ndarray
    is_qd: bool
    penalty: float


def _assess(sample: ChannelSample, phases, targets: SinrTargets, qd_cap: float):
    """(power, is_qd, swapped, penalty) of one phase configuration."""
    ordering = order_users(sample, phases)
    report = quasi_degradation(ordering.h_strong, ordering.h_weak, targets)
    solution = optimal_precoding(ordering.h_strong, ordering.h_weak, targets, require_qd=False)
    gap = min(report.q_value, qd_cap) - report.gain_ratio
    penalty = float(np.log1p(max(gap, 0.0)))
    return solution.power, report.is_qd, ordering.swapped, penalty


def random_phase_baseline(
    sample: ChannelSample,
    trial_count: int,
    targets: SinrTargets,
    seed,
    qd_cap: float = 1e6,
) -> BaselineResult:
    """Best of ``trial_count`` uniform random phase configurations.

    Returns the lowest-power trial whose composite channel passes the
    quasi-degradation test.  If no trial passes, returns the trial with
    the smallest penalty term, flagged ``is_qd=False``.  Trials are
    drawn sequentially from one seeded stream, so best-of-K over the
    same seed is non-increasing in K.
    """
    if trial_count < 1:
        raise ConfigurationError(f"trial_count must be >= 1, got {trial_count}")
    if sample.n < 1:
        raise ConfigurationError("baseline needs at least one RIS element")
    rng = np.random.default_rng(seed)
    best = None
    fallback = None
    for _ in range(trial_count):
        phases = rng.uniform(0.0, 2.0 * np.pi, sample.n)
        power, is_qd, _, penalty = _assess(sample, phases, targets, qd_cap)
        if is_qd and (best is None or power < best.power):
            best = BaselineResult(power, phases, True, penalty)
        if fallback is None or penalty < fallback.penalty:
            fallback = BaselineResult(power, phases, False, penalty)
    return best if best is not None else fallback


def evaluate(
    params: RisnetParams,
    dataset: Dataset,
    targets: SinrTargets,
    qd_cap: float = 1e6,
    threads: int = 1,
) -> EvalReport:
    """Run the network over every sample and aggregate power/QD stats.

    Deterministic and side-effect free.  ``threads`` only parallelizes
    independent per-sample work; results are reduced in sample order and
    do not depend on the worker count.
    """
    if dataset.size < 1:
        raise ConfigurationError("dataset is empty")
    gammas = dataset_features(dataset)

    def one(i: int) -> EvalRecord:
        start = time.perf_counter()
        phases = forward(params, gammas[i])
        elapsed_us = (time.perf_counter() - start) * 1e6
        power, is_qd, swapped, _ = _assess(
            dataset.sample(i), phases_to_phi(phases), targets, qd_cap)
        return EvalRecord(i, power, is_qd, swapped, elapsed_us)

    records = _map_indexed(one, dataset.size, threads)
    return _aggregate(records, trial_count=1)


def baseline_report(
    dataset: Dataset,
    trial_count: int,
    targets: SinrTargets,
    seed: int,
    qd_cap: float = 1e6,
    threads: int = 1,
) -> EvalReport:
    """Per-sample best-of-``trial_count`` random baseline over a dataset.

    Sample i draws from an independent substream keyed (seed, i), so
    reports are reproducible and per-sample work is order independent.
    """
    if dataset.size < 1:
        raise ConfigurationError("dataset is empty")

    def one(i: int) -> EvalRecord:
        start = time.perf_counter()
        best = random_phase_baseline(dataset.sample(i), trial_count, targets,
                                     seed=(seed, i), qd_cap=qd_cap)
        elapsed_us = (time.perf_counter() - start) * 1e6
        ordering = order_users(dataset.sample(i), best.phases)
        return EvalRecord(i, best.power, best.is_qd, ordering.swapped, elapsed_us)

    records = _map_indexed(one, dataset.size, threads)
    return _aggregate(records, trial_count=trial_count)


def _map_indexed(fn, count: int, threads: int) -> list:
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, range(count)))
    return [fn(i) for i in range(count)]


def _aggregate(records, trial_count: int) -> EvalReport:
    powers = np.array([r.power for r in records])
    qd = np.array([r.is_qd for r in records], dtype=bool)
    mean_qd_only = float(powers[qd].mean()) if qd.any() else float("nan")
    return EvalReport(
        records=list(records),
        mean_power_qd_only=mean_qd_only,
        mean_power_all=float(powers.mean()),
        qd_percentage=100.0 * float(qd.mean()),
        trial_count=trial_count,
    )


# ---------------------------------------------------------------------------
# report CSV
# ---------------------------------------------------------------------------

_HEADER = "sample_index,power_w,is_qd,swapped,inference_us"


def write_report(report: EvalReport, path):
    """Per-sample CSV plus '#'-prefixed summary footer lines."""
    path = str(path)
    lines = [_HEADER]
    for r in report.records:
        lines.append(
            f"{r.sample_index},{r.power:.17g},{int(r.is_qd)},{int(r.swapped)},"
            f"{r.inference_us:.17g}"
        )
    lines.append(f"# mean_power_qd_only={report.mean_power_qd_only:.17g}")
    lines.append(f"# mean_power_all_penalized={report.mean_power_all:.17g}")
    lines.append(f"# qd_percentage={report.qd_percentage:.17g}")
    lines.append(f"# trial_count={report.trial_count}")
    tmp = path + ".tmp"
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_report(path) -> EvalReport:
    """Parse a report written by :func:`write_report`."""
    path = str(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != _HEADER:
        raise FormatError(f"{path}: missing report header")
    records = []
    footer = {}
    for ln in lines[1:]:
        if ln.startswith("#"):
            key, _, value = ln.lstrip("# ").partition("=")
            footer[key] = value
            continue
        cells = ln.split(",")
        if len(cells) != 5:
            raise FormatError(f"{path}: malformed record line {ln!r}")
        records.append(EvalRecord(int(cells[0]), float(cells[1]),
                                  bool(int(cells[2])), bool(int(cells[3])),
                                  float(cells[4])))
    try:
        return EvalReport(
            records=records,
            mean_power_qd_only=float(footer["mean_power_qd_only"]),
            mean_power_all=float(footer["mean_power_all_penalized"]),
            qd_percentage=float(footer["qd_percentage"]),
            trial_count=int(footer["trial_count"]),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing footer entry {exc}") from exc
