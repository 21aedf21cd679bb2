"""Joint two-user NOMA precoding and RIS phase optimization.

Closed-form power-minimal precoding under quasi-degraded channels, a
permutation-shared phase network trained unsupervised against the
power-plus-penalty objective, a from-scratch reverse-mode gradient
engine, synthetic channel generation, and binary dataset/checkpoint
formats with a CLI on top.
"""

# Keep BLAS single threaded unless the user says otherwise: all dense
# kernels here are small, and results must not depend on scheduling.
import os as _os

for _var in ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "OMP_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")
del _os, _var

from . import channel, errors, evaluation, gradengine, precoding, risnet, training
from .channel import (
    ChannelFeature,
    ChannelSample,
    CompositeChannel,
    Dataset,
    GeometryConfig,
    compose_channel,
    equivalent_direct,
    extract_features,
    generate_synthetic_dataset,
    pseudo_inverse,
    read_dataset,
    write_dataset,
)
from .evaluation import EvalReport, baseline_report, evaluate, random_phase_baseline, write_report
from .precoding import (
    PrecodingSolution,
    QdReport,
    SinrTargets,
    achievable_rates,
    cos_sq_psi,
    optimal_precoding,
    order_users,
    quasi_degradation,
    sinr_metrics,
)
from .risnet import (
    RisConfiguration,
    RisnetConfig,
    RisnetParams,
    forward,
    init_params,
    param_count,
    phases_to_phi,
    read_checkpoint,
    write_checkpoint,
)
from .training import AdamState, TrainingConfig, TrainingHistory, adam_step, batch_loss, sample_objective, train

__version__ = "0.1.0"
