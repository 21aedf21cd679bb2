"""Command-line entry point: data generation, training, evaluation,
baselines, and artifact inspection.

Configuration is a flat UTF-8 ``key = value`` file with ``#`` comments.
Every key can also be set through an environment variable
(``RISNOMA_<KEY>`` with dots replaced by underscores, uppercase) and
through subcommand flags; precedence is flags > environment > file >
defaults.

Exit codes: 0 success, 2 usage/configuration error, 3 file-format
error, 4 numerical or training error.
"""

import argparse
import os
import sys
from dataclasses import dataclass

from .channel import GeometryConfig, generate_synthetic_dataset, read_dataset, write_dataset
from .errors import (
    ConfigurationError,
    DegenerateInputError,
    FormatError,
    NotQuasiDegraded,
    RisnomaError,
    TrainingError,
    UsageError,
)
from .evaluation import baseline_report, evaluate, write_report
from .precoding import SinrTargets
from .risnet import RisnetConfig, param_count, read_checkpoint
from .training import TrainingConfig, train

ENV_PREFIX = "RISNOMA_"


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


@dataclass(frozen=True)
class _Key:
    name: str
    type: type
    default: object
    help: str


# every configuration key, its type, and its documented default
CONFIG_KEYS = [
    _Key("geometry.m", int, 9, "BS antennas"),
    _Key("geometry.n", int, 64, "RIS elements"),
    _Key("geometry.pathloss_exponent", float, 2.5, "distance power-law exponent"),
    _Key("geometry.ref_gain", float, 2.0e4, "reference gain at unit distance"),
    _Key("geometry.d_bs_ris", float, 30.0, "BS to RIS distance"),
    _Key("geometry.d_ris_user1", float, 5.0, "RIS to user 1 distance"),
    _Key("geometry.d_ris_user2", float, 22.0, "RIS to user 2 distance"),
    _Key("geometry.d_bs_user1", float, 32.0, "BS to user 1 distance"),
    _Key("geometry.d_bs_user2", float, 48.0, "BS to user 2 distance"),
    _Key("geometry.k_bs_ris", float, 10.0, "Rician factor of the BS-RIS link"),
    _Key("geometry.k_ris_user", float, 4.0, "Rician factor of RIS-user links"),
    _Key("geometry.angle_spread", float, 0.15, "per-user direction spread"),
    _Key("geometry.sector_center", float, 0.0, "center of the user sector (sine space)"),
    _Key("geometry.sector_width", float, 2.0, "width of the user sector (2.0 = full)"),
    _Key("geometry.direct_attenuation", float, 1.0e-3, "extra loss on BS-user links"),
    _Key("network.layers", int, 8, "network depth"),
    _Key("network.local_dim", int, 16, "per-element feature width"),
    _Key("network.global_dim", int, 16, "array-wide feature width"),
    _Key("network.identity_head", bool, False, "disable the final rectifier"),
    _Key("training.epsilon", float, 0.1, "power weight in the objective"),
    _Key("training.learning_rate", float, 5e-6, "Adam step size"),
    _Key("training.batch_size", int, 512, "samples per iteration"),
    _Key("training.iterations", int, 25000, "training iterations"),
    _Key("training.seed", int, 0, "training seed"),
    _Key("training.reorder_users", bool, True, "order users by gain per sample"),
    _Key("training.qd_cap", float, 1e6, "finite cap on Q inside the penalty"),
    _Key("training.checkpoint_every", int, 500, "periodic checkpoint cadence"),
    _Key("targets.rate1", float, 1.0, "rate target of the strong user (bits)"),
    _Key("targets.rate2", float, 1.0, "rate target of the weak user (bits)"),
    _Key("targets.noise_power", float, 1.0, "noise power sigma^2 (linear)"),
    _Key("data.samples", int, 10240, "gen-data sample count"),
    _Key("data.seed", int, 1, "gen-data seed"),
    _Key("baseline.trials", int, 1000, "random phase draws per sample"),
    _Key("paths.dataset", str, "", "dataset file"),
    _Key("paths.checkpoint", str, "", "checkpoint file"),
    _Key("paths.metrics", str, "", "training metrics CSV"),
    _Key("paths.report", str, "", "evaluation report CSV"),
]
_KEY_MAP = {k.name: k for k in CONFIG_KEYS}


def env_var_name(key: str) -> str:
    return ENV_PREFIX + key.upper().replace(".", "_")


def parse_config_file(path: str) -> dict:
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        values[key.strip()] = value.strip()
    return values


def _convert(key: _Key, text: str):
    try:
        if key.type is bool:
            return _parse_bool(text)
        return key.type(text)
    except (ValueError, UsageError) as exc:
        raise UsageError(f"config key {key.name}: {exc}") from exc


class RunConfig:
    """Merged view of defaults, config file, environment, and flags."""

    def __init__(self, values: dict):
        self.values = values

    @classmethod
    def load(cls, config_path=None, environ=None, overrides=None) -> "RunConfig":
        environ = os.environ if environ is None else environ
        values = {k.name: k.default for k in CONFIG_KEYS}
        if config_path:
            for key, text in parse_config_file(config_path).items():
                if key not in _KEY_MAP:
                    raise UsageError(f"unknown config key {key!r}")
                values[key] = _convert(_KEY_MAP[key], text)
        for key in CONFIG_KEYS:
            text = environ.get(env_var_name(key.name))
            if text is not None:
                values[key.name] = _convert(key, text)
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        return cls(values)

    def __getitem__(self, key):
        return self.values[key]

    def geometry(self) -> GeometryConfig:
        g = self.values
        return GeometryConfig(
            m_antennas=g["geometry.m"],
            n_elements=g["geometry.n"],
            pathloss_exponent=g["geometry.pathloss_exponent"],
            ref_gain=g["geometry.ref_gain"],
            d_bs_ris=g["geometry.d_bs_ris"],
            d_ris_user1=g["geometry.d_ris_user1"],
            d_ris_user2=g["geometry.d_ris_user2"],
            d_bs_user1=g["geometry.d_bs_user1"],
            d_bs_user2=g["geometry.d_bs_user2"],
            k_bs_ris=g["geometry.k_bs_ris"],
            k_ris_user=g["geometry.k_ris_user"],
            angle_spread=g["geometry.angle_spread"],
            sector_center=g["geometry.sector_center"],
            sector_width=g["geometry.sector_width"],
            direct_attenuation=g["geometry.direct_attenuation"],
        )

    def network(self) -> RisnetConfig:
        return RisnetConfig(
            layers=self.values["network.layers"],
            local_dim=self.values["network.local_dim"],
            global_dim=self.values["network.global_dim"],
            identity_head=self.values["network.identity_head"],
        )

    def targets(self) -> SinrTargets:
        return SinrTargets(
            rate_target_1=self.values["targets.rate1"],
            rate_target_2=self.values["targets.rate2"],
            noise_power=self.values["targets.noise_power"],
        )

    def training(self, checkpoint_path=None, metrics_path=None) -> TrainingConfig:
        v = self.values
        return TrainingConfig(
            epsilon=v["training.epsilon"],
            learning_rate=v["training.learning_rate"],
            batch_size=v["training.batch_size"],
            iterations=v["training.iterations"],
            seed=v["training.seed"],
            rate_target_1=v["targets.rate1"],
            rate_target_2=v["targets.rate2"],
            noise_power=v["targets.noise_power"],
            reorder_users=v["training.reorder_users"],
            qd_cap=v["training.qd_cap"],
            checkpoint_every=v["training.checkpoint_every"],
            checkpoint_path=checkpoint_path,
            metrics_path=metrics_path,
            net=self.network(),
        )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _require(value, flag, key):
    if value:
        return value
    raise UsageError(f"missing {flag} (or config key {key})")


def cmd_gen_data(args) -> int:
    cfg = RunConfig.load(args.config, overrides={
        "data.samples": args.samples,
        "data.seed": args.seed,
        "paths.dataset": args.out,
    })
    out = _require(cfg["paths.dataset"], "--out", "paths.dataset")
    dataset = generate_synthetic_dataset(cfg.geometry(), cfg["data.samples"], cfg["data.seed"])
    write_dataset(dataset, out)
    print(f"M={dataset.m} N={dataset.n} samples={dataset.size} path={out}")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, overrides={
        "training.epsilon": args.epsilon,
        "training.learning_rate": args.lr,
        "training.iterations": args.iterations,
        "training.batch_size": args.batch,
        "training.seed": args.seed,
        "paths.dataset": args.dataset,
        "paths.checkpoint": args.out_checkpoint,
        "paths.metrics": args.out_metrics,
    })
    dataset_path = _require(cfg["paths.dataset"], "--dataset", "paths.dataset")
    checkpoint = _require(cfg["paths.checkpoint"], "--out-checkpoint", "paths.checkpoint")
    metrics = cfg["paths.metrics"] or None
    dataset = read_dataset(dataset_path)
    config = cfg.training(checkpoint_path=checkpoint, metrics_path=metrics)
    params, history = train(dataset, config)
    if len(history):
        print(f"iterations={len(history)} final_loss={history.mean_loss[-1]:.6g} "
              f"final_power={history.mean_power[-1]:.6g} "
              f"final_qd={history.qd_fraction[-1]:.4f}")
    else:
        print("iterations=0 checkpoint equals initialization")
    return 0


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config, overrides={
        "paths.dataset": args.dataset,
        "paths.checkpoint": args.checkpoint,
        "paths.report": args.out_report,
    })
    checkpoint = _require(cfg["paths.checkpoint"], "--checkpoint", "paths.checkpoint")
    dataset_path = _require(cfg["paths.dataset"], "--dataset", "paths.dataset")
    report_path = _require(cfg["paths.report"], "--out-report", "paths.report")
    params = read_checkpoint(checkpoint)
    dataset = read_dataset(dataset_path)
    report = evaluate(params, dataset, cfg.targets(),
                      qd_cap=cfg["training.qd_cap"], threads=args.threads)
    write_report(report, report_path)
    print(f"power={report.mean_power_qd_only:.6g} qd={report.qd_percentage:.4g}%")
    return 0


def cmd_baseline(args) -> int:
    cfg = RunConfig.load(args.config, overrides={
        "paths.dataset": args.dataset,
        "paths.report": args.out_report,
        "baseline.trials": args.trials,
        "data.seed": args.seed,
    })
    dataset_path = _require(cfg["paths.dataset"], "--dataset", "paths.dataset")
    report_path = _require(cfg["paths.report"], "--out-report", "paths.report")
    dataset = read_dataset(dataset_path)
    report = baseline_report(dataset, cfg["baseline.trials"], cfg.targets(),
                             seed=cfg["data.seed"], qd_cap=cfg["training.qd_cap"],
                             threads=args.threads)
    write_report(report, report_path)
    print(f"power={report.mean_power_qd_only:.6g} qd={report.qd_percentage:.4g}% "
          f"trials={report.trial_count}")
    return 0


def cmd_inspect(args) -> int:
    if bool(args.checkpoint) == bool(args.dataset):
        raise UsageError("inspect needs exactly one of --checkpoint or --dataset")
    if args.checkpoint:
        params = read_checkpoint(args.checkpoint)
        cfg = params.config
        print(f"format=RNCK version=1 layers={cfg.layers} local_dim={cfg.local_dim} "
              f"global_dim={cfg.global_dim} input_dim=8 params={param_count(cfg)}")
    else:
        dataset = read_dataset(args.dataset)
        print(f"format=RNDS version=1 M={dataset.m} N={dataset.n} "
              f"samples={dataset.size} seed={dataset.seed}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="risnoma",
        description="Joint two-user NOMA precoding and RIS phase optimization.",
        epilog=("Config keys can be overridden with environment variables named "
                "RISNOMA_<KEY> (uppercase, dots become underscores)."),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--threads", type=int, default=0,
                       help="worker threads for per-sample work (0 = auto); "
                            "never changes numerical results")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", help="output dataset path")
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the phase network")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--out-checkpoint")
    p.add_argument("--out-metrics")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--out-report")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("baseline", help="best-of-K random phase baseline")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-report")
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("inspect", help="print header metadata of an artifact")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.set_defaults(fn=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        if args.threads < 0:
            parser.error(f"--threads must be >= 0, got {args.threads}")
    else:
        args.threads = min(os.cpu_count() or 1, 8)
    try:
        return args.fn(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 3
    except (DegenerateInputError, NotQuasiDegraded, TrainingError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
