"""Unsupervised objective, batch loss, Adam optimizer, and the training
loop.

The per-sample objective is

    L = log(1 + ReLU(Q - ||h1||^2/||h2||^2)) + epsilon * P,

natural logarithm: the first term penalizes channels the current phase
configuration fails to make quasi-degraded, the second is the
closed-form transmit power, which is evaluated whether or not the
channel is quasi-degraded (the penalty drives it there).  Gradients are
taken by building the whole pipeline - phase network, channel
composition, quasi-degradation quantities, power - as one graph on the
gradient engine and minimizing with Adam (descent on L).

Q is clamped to a finite cap and cos^2(psi) floored at a tiny constant
before dividing, so forward values and gradients stay finite even for
near-orthogonal composites.  Both clamps are piecewise-constant
selections: outside the clamped region the computed values are exact,
inside it the gradient is zero.

A whole batch is evaluated as one graph, samples laid side by side, so
the arithmetic per sample is identical to the single-sample path and
results do not depend on any worker count.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import gradengine as ge
from . import risnet
from .channel import ChannelSample, Dataset, dataset_features, extract_features
from .errors import ConfigurationError, TrainingError
from .precoding import SinrTargets

#: floor applied to cos^2(psi) before taking its reciprocal
COS_SQ_FLOOR = 1e-18


@dataclass(frozen=True)
class TrainingConfig:
    epsilon: float = 0.1
    learning_rate: float = 5e-6
    batch_size: int = 512
    iterations: int = 25000
    seed: int = 0
    rate_target_1: float = 1.0
    rate_target_2: float = 1.0
    noise_power: float = 1.0
    reorder_users: bool = True
    qd_cap: float = 1e6
    checkpoint_every: int = 500
    checkpoint_path: str | None = None
    metrics_path: str | None = None
    net: risnet.RisnetConfig = field(default_factory=risnet.RisnetConfig)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.qd_cap <= 0:
            raise ConfigurationError("qd_cap must be positive")
        if self.checkpoint_every < 1:
            raise ConfigurationError("checkpoint_every must be >= 1")

    @property
    def targets(self) -> SinrTargets:
        return SinrTargets(self.rate_target_1, self.rate_target_2, self.noise_power)


@dataclass
class TrainingHistory:
    """Per-iteration mean loss, mean closed-form power, and the fraction
    of the batch that is quasi-degraded under the current phases."""

    iterations: list = field(default_factory=list)
    mean_loss: list = field(default_factory=list)
    mean_power: list = field(default_factory=list)
    qd_fraction: list = field(default_factory=list)

    def append(self, iteration, loss, power, qd):
        self.iterations.append(iteration)
        self.mean_loss.append(loss)
        self.mean_power.append(power)
        self.qd_fraction.append(qd)

    def __len__(self):
        return len(self.iterations)


# ---------------------------------------------------------------------------
# batched objective graph
# ---------------------------------------------------------------------------

@dataclass
class BatchConstants:
    """Numpy inputs of one batch: real/imaginary parts of the user links
    (rows are samples) and of the shared BS->RIS matrix, plus the
    feature stack (8, n*batch)."""

    gamma_block: np.ndarray
    hr_re: tuple
    hr_im: tuple
    hdh_re: tuple
    hdh_im: tuple
    h_re: np.ndarray
    h_im: np.ndarray
    n: int
    batch: int


def batch_constants(H, h_d1, h_d2, h_r1, h_r2, gammas) -> BatchConstants:
    """Stack per-sample arrays for the batched graph.

    ``h_d*``/``h_r*`` have the sample index on axis 0; ``gammas`` is
    (batch, 8, n).  The direct rows enter as ``h_dk^H`` (conjugated).
    """
    b, n = h_r1.shape
    gamma_block = np.ascontiguousarray(gammas.transpose(1, 0, 2).reshape(risnet.INPUT_DIM, b * n))
    return BatchConstants(
        gamma_block=gamma_block,
        hr_re=(np.ascontiguousarray(h_r1.real), np.ascontiguousarray(h_r2.real)),
        hr_im=(np.ascontiguousarray(h_r1.imag), np.ascontiguousarray(h_r2.imag)),
        hdh_re=(np.ascontiguousarray(h_d1.real), np.ascontiguousarray(h_d2.real)),
        hdh_im=(np.ascontiguousarray(-h_d1.imag), np.ascontiguousarray(-h_d2.imag)),
        h_re=np.ascontiguousarray(H.real),
        h_im=np.ascontiguousarray(H.imag),
        n=n,
        batch=b,
    )


@dataclass
class ObjectiveNodes:
    """Graph nodes of the batched objective plus numpy diagnostics."""

    loss: ge.Tensor
    penalty: ge.Tensor
    power: ge.Tensor
    qd: np.ndarray
    swapped: np.ndarray


def _select(m_const: ge.Tensor, m_other: ge.Tensor, a: ge.Tensor, b: ge.Tensor) -> ge.Tensor:
    """Piecewise-constant select: m*a + (1-m)*b with 0/1 masks."""
    return ge.add(ge.mul(m_const, a), ge.mul(m_other, b))


def objective_graph(
    tape: ge.Tape,
    phases: ge.Tensor,
    consts: BatchConstants,
    targets: SinrTargets,
    epsilon: float,
    reorder_users: bool = True,
    qd_cap: float = 1e6,
) -> ObjectiveNodes:
    """Build the batched objective from a (batch, n) phase matrix.

    Row s of ``phases`` holds sample s's phase shifts.  Returns the mean
    loss as a scalar node together with the per-sample penalty and power
    columns.
    """
    b, n = consts.batch, consts.n
    if phases.shape != (b, n):
        raise ConfigurationError(f"phases: expected shape ({b}, {n}), got {phases.shape}")
    rho1, rho2 = targets.sinr_target_1, targets.sinr_target_2
    r1, r2 = targets.scaled_target_1, targets.scaled_target_2

    u_cos = ge.cos(phases)
    u_sin = ge.sin(phases)
    h_re_c = tape.constant(consts.h_re)
    h_im_c = tape.constant(consts.h_im)
    ones_m = tape.constant(np.ones((consts.h_re.shape[1], 1)))

    def row_sum(x):
        return ge.matmul(x, ones_m)

    rows = []
    for k in (0, 1):
        a = tape.constant(consts.hr_re[k])
        bb = tape.constant(consts.hr_im[k])
        # conj(h_rk) * e^{jf}, elementwise over RIS elements
        z_re = ge.add(ge.mul(a, u_cos), ge.mul(bb, u_sin))
        z_im = ge.sub(ge.mul(a, u_sin), ge.mul(bb, u_cos))
        # composite row h_k^H = z H + h_dk^H
        re = ge.add(ge.sub(ge.matmul(z_re, h_re_c), ge.matmul(z_im, h_im_c)),
                    tape.constant(consts.hdh_re[k]))
        im = ge.add(ge.add(ge.matmul(z_re, h_im_c), ge.matmul(z_im, h_re_c)),
                    tape.constant(consts.hdh_im[k]))
        rows.append((re, im))

    (re1, im1), (re2, im2) = rows
    n1 = ge.add(row_sum(ge.square(re1)), row_sum(ge.square(im1)))
    n2 = ge.add(row_sum(ge.square(re2)), row_sum(ge.square(im2)))
    p_re = ge.add(row_sum(ge.mul(re1, re2)), row_sum(ge.mul(im1, im2)))
    p_im = ge.sub(row_sum(ge.mul(im1, re2)), row_sum(ge.mul(re1, im2)))
    ip_sq = ge.add(ge.square(p_re), ge.square(p_im))

    if reorder_users:
        keep = (n1.data >= n2.data).astype(np.float64)
    else:
        keep = np.ones((b, 1))
    m_keep = tape.constant(keep)
    m_swap = tape.constant(1.0 - keep)
    n_strong = _select(m_keep, m_swap, n1, n2)
    n_weak = _select(m_keep, m_swap, n2, n1)

    c2_raw = ge.mul(ip_sq, ge.reciprocal(ge.mul(n_strong, n_weak)))
    above = (c2_raw.data >= COS_SQ_FLOOR).astype(np.float64)
    c2 = _select(tape.constant(above), tape.constant(1.0 - above),
                 c2_raw, tape.constant(np.full((b, 1), COS_SQ_FLOOR)))

    def full(v):
        return tape.constant(np.full((b, 1), float(v)))

    one = full(1.0)
    ratio = ge.mul(n_strong, ge.reciprocal(n_weak))
    sin2 = ge.sub(one, c2)
    den = ge.add(one, ge.mul(full(rho2), sin2))
    shrink = ge.reciprocal(ge.square(den))
    q = ge.sub(ge.mul(full(1.0 + rho1), ge.reciprocal(c2)),
               ge.mul(full(rho1), ge.mul(c2, shrink)))
    below_cap = (q.data <= qd_cap).astype(np.float64)
    q_capped = _select(tape.constant(below_cap), tape.constant(1.0 - below_cap),
                       q, full(qd_cap))
    penalty = ge.log(ge.add(one, ge.relu(ge.sub(q_capped, ratio))))

    a1_sq = ge.mul(full(r1), ge.mul(ge.reciprocal(n_strong), shrink))
    a2_sq = ge.add(ge.mul(full(r2), ge.reciprocal(n_weak)),
                   ge.mul(ge.mul(full(r1 * rho2), ge.reciprocal(n_strong)),
                          ge.mul(c2, shrink)))
    w1_sq = ge.mul(a1_sq, ge.sub(full((1.0 + rho2) ** 2), ge.mul(full(rho2 * (rho2 + 2.0)), c2)))
    power = ge.add(w1_sq, a2_sq)

    loss_rows = ge.add(penalty, ge.mul(full(epsilon), power))
    loss = ge.mean_cols(ge.transpose(loss_rows))

    qd = _qd_flags(n_strong.data[:, 0], n_weak.data[:, 0], ip_sq.data[:, 0], rho1, rho2)
    return ObjectiveNodes(loss, penalty, power, qd, keep[:, 0] == 0.0)


def _qd_flags(ns, nw, ip_sq, rho1, rho2) -> np.ndarray:
    """Quasi-degradation booleans via the same formula as the metrics path."""
    c2 = np.minimum(ip_sq / (ns * nw), 1.0)
    out = np.zeros(ns.shape, dtype=bool)
    pos = c2 > 0.0
    q = np.full(ns.shape, np.inf)
    q[pos] = (1.0 + rho1) / c2[pos] - rho1 * c2[pos] / (1.0 + rho2 * (1.0 - c2[pos])) ** 2
    out[pos] = q[pos] <= (ns[pos] / nw[pos])
    return out


def phase_rows(tape: ge.Tape, row: ge.Tensor, n: int, batch: int) -> ge.Tensor:
    """Rearrange the network's (1, n*batch) output into (batch, n)."""
    if row.shape != (1, n * batch):
        raise ConfigurationError(f"expected shape (1, {n * batch}), got {row.shape}")
    col = ge.transpose(row)
    parts = [ge.transpose(ge.slice_rows(col, s * n, (s + 1) * n)) for s in range(batch)]
    return parts[0] if batch == 1 else ge.concat_rows(parts)


def training_graph(
    tape: ge.Tape,
    config: TrainingConfig,
    param_tensors: list,
    consts: BatchConstants,
) -> ObjectiveNodes:
    """Network forward plus objective as one graph."""
    gamma = tape.constant(consts.gamma_block)
    out_row = risnet.forward_graph(tape, config.net, param_tensors, gamma, consts.n)
    phases = phase_rows(tape, out_row, consts.n, consts.batch)
    return objective_graph(
        tape, phases, consts, config.targets, config.epsilon,
        reorder_users=config.reorder_users, qd_cap=config.qd_cap,
    )


def _constants_from_samples(samples: Sequence[ChannelSample]) -> BatchConstants:
    if not samples:
        raise ConfigurationError("batch must not be empty")
    H = samples[0].H
    for s in samples[1:]:
        if s.H is not H and not np.array_equal(s.H, H):
            raise ConfigurationError("all samples in a batch must share the same H")
    gammas = np.stack([extract_features(s).gamma for s in samples])
    return batch_constants(
        H,
        np.stack([s.h_d1 for s in samples]),
        np.stack([s.h_d2 for s in samples]),
        np.stack([s.h_r1 for s in samples]),
        np.stack([s.h_r2 for s in samples]),
        gammas,
    )


def sample_objective(
    sample: ChannelSample,
    phi,
    targets: SinrTargets,
    epsilon: float,
    reorder_users: bool = True,
    qd_cap: float = 1e6,
) -> float:
    """Objective value of one sample under a given phase configuration."""
    phases = np.asarray(getattr(phi, "phases", phi), dtype=np.float64).reshape(1, -1)
    consts = _constants_from_samples([sample])
    tape = ge.Tape()
    nodes = objective_graph(
        tape, tape.constant(phases), consts, targets, epsilon,
        reorder_users=reorder_users, qd_cap=qd_cap,
    )
    return nodes.loss.item()


def batch_loss(
    params: risnet.RisnetParams,
    samples: Sequence[ChannelSample],
    targets: SinrTargets,
    epsilon: float,
    reorder_users: bool = True,
    qd_cap: float = 1e6,
) -> float:
    """Mean objective over a batch, phases produced by the network."""
    consts = _constants_from_samples(samples)
    config = TrainingConfig(
        epsilon=epsilon,
        rate_target_1=targets.rate_target_1,
        rate_target_2=targets.rate_target_2,
        noise_power=targets.noise_power,
        reorder_users=reorder_users,
        qd_cap=qd_cap,
        net=params.config,
    )
    tape = ge.Tape()
    tensors = [tape.constant(b) for b in params.blocks]
    return training_graph(tape, config, tensors, consts).loss.item()


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second-moment accumulators mirroring the parameter blocks."""

    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: risnet.RisnetParams) -> "AdamState":
        return cls([np.zeros(b.shape) for b in params.blocks],
                   [np.zeros(b.shape) for b in params.blocks])


def adam_step(
    params: risnet.RisnetParams,
    grads: Sequence[np.ndarray],
    state: AdamState,
    learning_rate: float,
) -> tuple[risnet.RisnetParams, AdamState]:
    """One bias-corrected Adam update; pure (returns new params/state)."""
    if len(grads) != len(params.blocks):
        raise ConfigurationError(
            f"expected {len(params.blocks)} gradient blocks, got {len(grads)}"
        )
    names = params.block_names()
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_blocks, new_m, new_v = [], [], []
    for theta, g, m, v, name in zip(params.blocks, grads, state.m, state.v, names):
        if g.shape != theta.shape:
            raise ConfigurationError(
                f"gradient block {name}: expected shape {theta.shape}, got {g.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block {name}")
        m2 = state.beta1 * m + (1.0 - state.beta1) * g
        v2 = state.beta2 * v + (1.0 - state.beta2) * np.square(g)
        update = (m2 / c1) / (np.sqrt(v2 / c2) + state.eps)
        new_blocks.append(theta - learning_rate * update)
        new_m.append(m2)
        new_v.append(v2)
    return (
        risnet.RisnetParams(params.config, new_blocks),
        AdamState(new_m, new_v, t, state.beta1, state.beta2, state.eps),
    )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class _MetricsWriter:
    """Streams the metrics CSV to a temp file; renamed on success,
    removed on error so no partial CSV is left behind."""

    def __init__(self, path):
        self.path = str(path) if path else None
        self.tmp = self.path + ".tmp" if self.path else None
        self.fh = None
        if self.tmp:
            self.fh = open(self.tmp, "w", encoding="utf-8")
            self.fh.write("iteration,mean_loss,mean_power,qd_fraction\n")

    def row(self, iteration, loss, power, qd):
        if self.fh:
            self.fh.write(f"{iteration},{loss:.17g},{power:.17g},{qd:.17g}\n")

    def finish(self):
        if self.fh:
            self.fh.close()
            os.replace(self.tmp, self.path)
            self.fh = None

    def abort(self):
        if self.fh:
            self.fh.close()
            os.unlink(self.tmp)
            self.fh = None


def train(dataset: Dataset, config: TrainingConfig) -> tuple[risnet.RisnetParams, TrainingHistory]:
    """Run the training loop of the unsupervised objective.

    Batches are drawn uniformly with replacement from the dataset; the
    whole trajectory is a deterministic function of (dataset, config).
    Periodic checkpoints go to ``<checkpoint_path>.partial``; the final
    parameters are written to ``checkpoint_path`` itself and the partial
    file is removed on success (kept if training fails mid-way).
    """
    if dataset.size < 1:
        raise ConfigurationError("dataset is empty")
    params = risnet.init_params(config.net, config.seed)
    state = AdamState.zeros(params)
    history = TrainingHistory()

    gammas = dataset_features(dataset)
    batch_rng = np.random.default_rng((config.seed, 1))
    partial = config.checkpoint_path + ".partial" if config.checkpoint_path else None
    metrics = _MetricsWriter(config.metrics_path)
    try:
        for it in range(config.iterations):
            idx = batch_rng.integers(0, dataset.size, size=config.batch_size)
            consts = batch_constants(
                dataset.H,
                dataset.h_d1[idx], dataset.h_d2[idx],
                dataset.h_r1[idx], dataset.h_r2[idx],
                gammas[idx],
            )
            tape = ge.Tape()
            tensors = [tape.tensor(b, tracked=True) for b in params.blocks]
            nodes = training_graph(tape, config, tensors, consts)
            grad_map = ge.backward(tape, nodes.loss)
            grads = [grad_map[t] for t in tensors]
            try:
                params, state = adam_step(params, grads, state, config.learning_rate)
            except TrainingError as exc:
                raise TrainingError(f"iteration {it}: {exc}") from exc
            history.append(it, nodes.loss.item(),
                           float(nodes.power.data.mean()), float(nodes.qd.mean()))
            metrics.row(it, history.mean_loss[-1], history.mean_power[-1],
                        history.qd_fraction[-1])
            if partial and (it + 1) % config.checkpoint_every == 0:
                risnet.write_checkpoint(params, partial)
    except BaseException:
        if partial:
            risnet.write_checkpoint(params, partial)
        metrics.abort()
        raise
    metrics.finish()
    if config.checkpoint_path:
        risnet.write_checkpoint(params, config.checkpoint_path)
        if partial and os.path.exists(partial):
            os.unlink(partial)
    return params, history
