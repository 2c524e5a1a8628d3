"""Command-line surface tying the package together.

Five subcommands cover the artifact lifecycle: ``train`` runs the epoch
loop with checkpointing and a metrics CSV, ``calibrate`` freezes gate
thresholds into a checkpoint, ``eval`` reports dynamic-inference metrics
as JSON, ``flops-report`` dumps the per-instance cost distribution, and
``export-similarity`` writes one batch's saliency/feature similarity
matrices for inspection.

Exit codes: 0 on success, 1 on usage errors, 2 on data/config/checkpoint
errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import config as cf
from . import data as dt
from . import inference as inf
from . import losses as ls
from . import network as nw
from . import training as tr
from .autograd import Tensor, no_grad

_USAGE = """\
usage: manidp <subcommand> [options]

subcommands:
  train              train a network (checkpoint + metrics CSV under --out)
  eval               evaluate a checkpoint with calibrated gates, print JSON
  calibrate          freeze gate thresholds into a checkpoint
  flops-report       write the per-instance FLOPs distribution CSV
  export-similarity  write one batch's saliency/feature similarity matrices

common options:
  --config PATH      key=value config file (defaults apply when omitted)
  --checkpoint PATH  checkpoint to train into / load from
  --data-dir PATH    dataset root (falls back to $MANIDP_DATA, then ./data)
  --eta FLOAT        pruning rate override
  --seed INT         seed override
  --out DIR          output directory override

run `manidp <subcommand> --help` for the full flag list.
"""

CHECKPOINT_NAME = "checkpoint.mdpk"
METRICS_NAME = "metrics.csv"

# calibration results ride along inside checkpoints under these record names
_CALIB_XI = "calib/xi"
_CALIB_ETA = "calib/eta"
_CALIB_SIZE = "calib/size"


# -- shared plumbing --------------------------------------------------------------


def _read_config(path: Optional[str]) -> cf.RunConfig:
    if path is None:
        return cf.RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise cf.ConfigError(f"cannot read config {path}: {exc}") from exc
    return cf.parse_config(text)


def _load_splits(config: cf.RunConfig, data_dir: Optional[str]) -> Tuple[dt.Dataset, dt.Dataset]:
    root = dt.resolve_data_dir(data_dir or config.data_dir)
    if config.dataset == "digits":
        paths = dt.ensure_digits_idx(root)
        train, stats = dt.load_idx(paths["train_images"], paths["train_labels"], split="train")
        test, _ = dt.load_idx(paths["test_images"], paths["test_labels"], split="test", stats=stats)
        return train, test
    if config.dataset == "mnist":
        return dt.load_mnist_dir(root)
    return dt.load_cifar10_dir(root)


def _effective_train(config: cf.RunConfig, args: argparse.Namespace) -> tr.TrainConfig:
    """Apply the mode and any flag overrides to the config's TrainConfig."""
    train = config.train
    if config.mode in ("vanilla", "static-baseline"):
        train = dataclasses.replace(
            train, eta=0.0, warmup_epochs=0, lambda_prime=0.0, gamma=0.0
        )
    train = dataclasses.replace(train, adaptive_lambda=config.adaptive)
    if getattr(args, "eta", None) is not None:
        train = dataclasses.replace(train, eta=args.eta)
    if getattr(args, "seed", None) is not None:
        train = dataclasses.replace(train, seed=args.seed)
    return train


def _out_dir(config: cf.RunConfig, args: argparse.Namespace) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stored_thresholds(loaded: tr.LoadedCheckpoint) -> Optional[inf.CalibratedThresholds]:
    if _CALIB_XI not in loaded.extra:
        return None
    xi = tuple(float(v) for v in np.asarray(loaded.extra[_CALIB_XI]).ravel())
    eta = float(loaded.extra.get(_CALIB_ETA, 0.0))
    size = int(float(loaded.extra.get(_CALIB_SIZE, 0.0)))
    return inf.CalibratedThresholds(xi=xi, eta=eta, calibration_size=size)


def _thresholds_for(
    loaded: tr.LoadedCheckpoint,
    train_split: dt.Dataset,
    eta_flag: Optional[float],
    default_eta: float,
) -> inf.CalibratedThresholds:
    """Stored thresholds when present and no --eta override, else calibrate."""
    if eta_flag is None:
        stored = _stored_thresholds(loaded)
        if stored is not None:
            return stored
    eta = default_eta if eta_flag is None else eta_flag
    return inf.calibrate_thresholds(loaded.net, train_split, eta)


# -- train -----------------------------------------------------------------------


def _group_lasso_penalty(net: nw.Network, weight: float) -> Tensor:
    total = ls.group_lasso(net.stem_weight)
    for layer in net.layers:
        total = total + ls.group_lasso(layer.weight)
    return total * weight


def cmd_train(args: argparse.Namespace) -> int:
    config = _read_config(args.config)
    train_cfg = _effective_train(config, args)
    train_split, _ = _load_splits(config, args.data_dir)
    out = _out_dir(config, args)
    checkpoint_path = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT_NAME
    metrics_path = out / METRICS_NAME

    extra = {}
    if checkpoint_path.exists():
        loaded = tr.load_checkpoint(str(checkpoint_path))
        net, optimizer, state = loaded.net, loaded.optimizer, loaded.state
        start_epoch = loaded.epoch + 1
        extra = loaded.extra
        print(f"resuming from {checkpoint_path} at epoch {start_epoch}")
    else:
        probe = train_split.images[: min(64, len(train_split))]
        net = nw.build_network(config.network_spec(), seed=train_cfg.seed, scale_probe=probe)
        optimizer = tr.OptimizerState.for_parameters(net.parameters())
        state = ls.ComplexityState(
            C=ls.initial_complexity(net.num_classes),
            lambda_prime=train_cfg.lambda_prime,
            gamma=train_cfg.gamma,
            adaptive=train_cfg.adaptive_lambda,
        )
        start_epoch = 0

    enabled, pad, flip = config.augmentation()
    augment = dt.make_augment(pad, flip) if enabled else None
    penalty_weight = config.group_lasso_weight if config.mode == "static-baseline" else 0.0

    for epoch in range(start_epoch, train_cfg.epochs):
        metrics = tr.train_epoch(
            net,
            train_split,
            train_cfg,
            state,
            optimizer,
            epoch,
            augment=augment,
            penalty=(
                (lambda n: _group_lasso_penalty(n, penalty_weight)) if penalty_weight else None
            ),
        )
        tr.append_metrics_csv(str(metrics_path), metrics, write_header=epoch == 0)
        last = epoch == train_cfg.epochs - 1
        every = config.checkpoint_every
        if last or (every > 0 and (epoch + 1) % every == 0):
            tr.save_checkpoint(str(checkpoint_path), net, optimizer, state, epoch, extra=extra)
        print(
            f"epoch {epoch:3d}  ce={metrics.ce:.4f}  active={metrics.active_fraction:.3f}  "
            f"eta_t={metrics.eta_t:.2f}",
            flush=True,
        )
    print(f"checkpoint: {checkpoint_path}")
    print(f"metrics: {metrics_path}")
    return 0


# -- calibrate ---------------------------------------------------------------------


def cmd_calibrate(args: argparse.Namespace) -> int:
    config = _read_config(args.config)
    loaded = tr.load_checkpoint(args.checkpoint)
    train_split, _ = _load_splits(config, args.data_dir)
    eta = args.eta if args.eta is not None else config.train.eta
    thresholds = inf.calibrate_thresholds(loaded.net, train_split, eta)
    extra = dict(loaded.extra)
    extra[_CALIB_XI] = np.asarray(thresholds.xi, dtype=np.float64)
    extra[_CALIB_ETA] = np.float64(thresholds.eta)
    extra[_CALIB_SIZE] = np.float64(thresholds.calibration_size)
    tr.save_checkpoint(
        args.checkpoint, loaded.net, loaded.optimizer, loaded.state, loaded.epoch, extra=extra
    )
    print(
        json.dumps(
            {
                "xi": list(thresholds.xi),
                "eta": thresholds.eta,
                "calibration_size": thresholds.calibration_size,
            }
        )
    )
    return 0


# -- eval ----------------------------------------------------------------------------


def cmd_eval(args: argparse.Namespace) -> int:
    config = _read_config(args.config)
    loaded = tr.load_checkpoint(args.checkpoint)
    train_split, test_split = _load_splits(config, args.data_dir)
    thresholds = _thresholds_for(loaded, train_split, args.eta, config.train.eta)
    metrics = inf.evaluate(loaded.net, test_split, thresholds)
    metrics["eta"] = thresholds.eta
    document = json.dumps(metrics)
    print(document)
    if args.out:
        out = _out_dir(config, args)
        (out / "metrics.json").write_text(document + "\n", encoding="utf-8")
    return 0


# -- flops-report ---------------------------------------------------------------------


def cmd_flops_report(args: argparse.Namespace) -> int:
    config = _read_config(args.config)
    loaded = tr.load_checkpoint(args.checkpoint)
    train_split, test_split = _load_splits(config, args.data_dir)
    thresholds = _thresholds_for(loaded, train_split, args.eta, config.train.eta)
    dist = inf.flops_distribution(loaded.net, test_split, thresholds, bins=args.bins)
    out = _out_dir(config, args)
    path = out / "flops_report.csv"
    inf.save_flops_csv(dist, path)
    occupied = int((dist.counts > 0).sum())
    print(
        json.dumps(
            {
                "csv": str(path),
                "instances": int(dist.flops.shape[0]),
                "mean_flops": float(dist.flops.mean()),
                "occupied_bins": occupied,
                "bins": args.bins,
            }
        )
    )
    return 0


# -- export-similarity ------------------------------------------------------------------


def cmd_export_similarity(args: argparse.Namespace) -> int:
    config = _read_config(args.config)
    loaded = tr.load_checkpoint(args.checkpoint)
    _, test_split = _load_splits(config, args.data_dir)
    batch_size = min(config.train.batch_size, len(test_split))
    if batch_size < 2:
        raise dt.DataError("similarity matrices need at least 2 instances")
    seed = args.seed if args.seed is not None else config.train.seed
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(test_split), size=batch_size, replace=False)
    x = Tensor(test_split.images[idx])

    eta = args.eta if args.eta is not None else config.train.eta
    rule = nw.UNGATED if eta == 0.0 else tr._inline_threshold_rule(eta)
    with no_grad():
        _, trace = nw.network_forward(loaded.net, x, rule)

    out = _out_dir(config, args)
    written: List[str] = []
    for layer, (saliency, pooled) in enumerate(zip(trace.saliencies, trace.pooled_features)):
        t_matrix = ls.saliency_similarity(saliency).data
        r_matrix = ls.feature_similarity(pooled).data
        t_path = out / f"similarity_T_layer{layer}.csv"
        r_path = out / f"similarity_R_layer{layer}.csv"
        np.savetxt(t_path, t_matrix, delimiter=",", fmt="%.8f")
        np.savetxt(r_path, r_matrix, delimiter=",", fmt="%.8f")
        written.extend([str(t_path), str(r_path)])
    print(json.dumps({"batch_size": batch_size, "eta": eta, "files": written}))
    return 0


# -- parser / entry -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="manidp",
        description="Train and inspect dynamically pruned networks.",
    )
    sub = parser.add_subparsers(dest="subcommand", metavar="subcommand")

    def common(p: argparse.ArgumentParser, checkpoint_required: bool) -> None:
        p.add_argument("--config", metavar="PATH", help="key=value config file")
        p.add_argument(
            "--checkpoint",
            metavar="PATH",
            required=checkpoint_required,
            help="checkpoint file" + ("" if checkpoint_required else " (default: <out>/checkpoint.mdpk)"),
        )
        p.add_argument(
            "--data-dir",
            metavar="PATH",
            help="dataset root (falls back to $MANIDP_DATA, then ./data)",
        )
        p.add_argument("--eta", type=float, metavar="FLOAT", help="pruning rate override")
        p.add_argument("--seed", type=int, metavar="INT", help="seed override")
        p.add_argument("--out", metavar="DIR", help="output directory override")

    p_train = sub.add_parser("train", help="train a network")
    common(p_train, checkpoint_required=False)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval, checkpoint_required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_cal = sub.add_parser("calibrate", help="freeze gate thresholds into a checkpoint")
    common(p_cal, checkpoint_required=True)
    p_cal.set_defaults(func=cmd_calibrate)

    p_flops = sub.add_parser("flops-report", help="per-instance FLOPs distribution CSV")
    common(p_flops, checkpoint_required=True)
    p_flops.add_argument("--bins", type=int, default=20, metavar="INT", help="histogram bins")
    p_flops.set_defaults(func=cmd_flops_report)

    p_sim = sub.add_parser(
        "export-similarity", help="write one batch's similarity matrices as CSVs"
    )
    common(p_sim, checkpoint_required=True)
    p_sim.set_defaults(func=cmd_export_similarity)

    return parser


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        sys.stderr.write(_USAGE)
        return 1
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems and 0 for --help
        return 0 if exc.code in (0, None) else 1
    if getattr(args, "func", None) is None:
        sys.stderr.write(_USAGE)
        return 1
    try:
        return args.func(args)
    except (ValueError, dt.DataError, OSError) as exc:
        # ConfigError/CheckpointError subclass ValueError; OSError covers
        # unreadable dataset and output paths
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
