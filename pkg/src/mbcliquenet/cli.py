"""Command line: train, eval, export, inspect, bench-k and grad-check."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .binary import binary_conv2d, pack_bits, sign_binarize
from .clique import PRESETS, MBCliqueNet, NetworkConfig, count_parameters, parse_key_values
from .data import DatasetError, load_cifar_dir, load_mnist_dir, synthetic_dataset
from .gradcheck import run_all
from .modelio import ArchiveError, DeployOnlyError, compression_report, load_for_training, \
    load_model, save_model
from .training import OptimizerState, TrainConfig, cross_entropy, evaluate, fit, period_boundaries

log = logging.getLogger("mbcliquenet")

METRIC_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "test_loss", "test_acc")
TRAIN_KEYS = ("batch_size", "momentum", "weight_decay", "lr_max", "lr_min", "restart_periods",
              "total_epochs", "flip", "crop_padding", "decay_bn_and_mfilter", "clip_ste")
RUN_KEYS = ("preset", "dataset", "augment", "seed")


class CliError(Exception):
    """A user-facing failure; the message is printed and the exit code is 1."""


# ----------------------------------------------------------------- config

def _flag(value) -> bool:
    text = str(value).strip().lower()
    if text in ("on", "true", "1", "yes"):
        return True
    if text in ("off", "false", "0", "no"):
        return False
    raise CliError(f"expected on/off, got {value!r}")


def _resolve(args) -> tuple[NetworkConfig, TrainConfig, dict]:
    """Merge preset, config file and flags (later wins) into the effective configuration."""
    values: dict = {}
    if args.config:
        try:
            values.update(parse_key_values(Path(args.config).read_text()))
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
    preset_name = args.preset or values.pop("preset", None) or "tiny"
    values.pop("preset", None)
    if preset_name not in PRESETS:
        raise CliError(f"unknown preset {preset_name!r}; choose from {', '.join(sorted(PRESETS))}")
    net_values = dict(PRESETS[preset_name])
    net_values.update({k: v for k, v in values.items() if k not in TRAIN_KEYS + RUN_KEYS})
    if getattr(args, "k", None) is not None:
        net_values["k"] = args.k
    if getattr(args, "binarize_bottlenecks", None) is not None:
        net_values["binarize_bottlenecks"] = args.binarize_bottlenecks
    run = {
        "preset": preset_name,
        "dataset": getattr(args, "dataset", None) or values.get("dataset", "synthetic"),
        "seed": args.seed if args.seed is not None else int(values.get("seed", 0)),
    }
    if run["dataset"] == "mnist":
        net_values.update(in_channels=1, image_size=28)
    elif run["dataset"] == "cifar":
        net_values.update(in_channels=3, image_size=32)
    try:
        net = NetworkConfig.from_mapping(net_values)
    except ValueError as exc:
        raise CliError(f"bad network config: {exc}") from exc
    tv = {k: values[k] for k in TRAIN_KEYS if k in values}
    for key in ("batch_size", "lr_max", "lr_min", "epochs"):
        v = getattr(args, key, None)
        if v is not None:
            tv["total_epochs" if key == "epochs" else key] = v
    try:
        train = TrainConfig(
            batch_size=int(tv.get("batch_size", 128)),
            momentum=float(tv.get("momentum", 0.9)),
            weight_decay=float(tv.get("weight_decay", 0.0005)),
            lr_max=float(tv.get("lr_max", 0.1)),
            lr_min=float(tv.get("lr_min", 0.0001)),
            restart_periods=[int(p) for p in str(tv.get("restart_periods", "2,4,8,16,32,64,128"))
                             .split(",") if p.strip()],
            total_epochs=int(tv.get("total_epochs", 254)),
            rng_seed=run["seed"],
            flip=_flag(tv.get("flip", "on")),
            crop_padding=int(tv.get("crop_padding", 4)),
            decay_bn_and_mfilter=_flag(tv.get("decay_bn_and_mfilter", "off")),
            clip_ste=_flag(tv.get("clip_ste", "off")),
        )
    except ValueError as exc:
        raise CliError(f"bad training config: {exc}") from exc
    # digits are not mirror-symmetric, so MNIST trains without augmentation by default
    run["augment"] = _flag(values.get("augment", "off" if run["dataset"] == "mnist" else "on"))
    if getattr(args, "augment", None) is not None:
        run["augment"] = args.augment
    return net, train, run


def _config_text(net: NetworkConfig, train: TrainConfig, run: dict) -> str:
    onoff = {True: "on", False: "off"}
    lines = [f"preset = {run['preset']}", f"dataset = {run['dataset']}", f"seed = {run['seed']}",
             f"augment = {onoff[run['augment']]}"]
    for key in TRAIN_KEYS:
        v = getattr(train, key)
        if isinstance(v, bool):
            v = onoff[v]
        elif isinstance(v, list):
            v = ",".join(str(p) for p in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n" + net.to_text()


# ------------------------------------------------------------------- data

def _load_data(run: dict, net: NetworkConfig, args, stats=None):
    kind = run["dataset"]
    if kind == "synthetic":
        c, s = net.in_channels, net.image_size
        n_train, n_test = args.synthetic_samples, max(args.synthetic_samples // 4, 2)
        full = synthetic_dataset(n_train + n_test, c, s, s, net.num_classes, seed=run["seed"])
        train, test = full.subset(slice(0, n_train)), full.subset(slice(n_train, None))
    elif kind in ("mnist", "cifar"):
        if not args.data_dir:
            raise CliError(f"--data-dir is required for --dataset {kind}")
        d = Path(args.data_dir)
        if not d.is_dir():
            raise CliError(f"data directory {d} does not exist")
        if kind == "mnist":
            train, test = load_mnist_dir(d, "train"), load_mnist_dir(d, "test")
        else:
            train = load_cifar_dir(d, "train", stats)
            test = load_cifar_dir(d, "test", (train.channel_mean, train.channel_std))
    else:
        raise CliError(f"unknown dataset {kind!r}")
    if args.limit_train:
        train = train.subset(slice(0, args.limit_train))
    if args.limit_test:
        test = test.subset(slice(0, args.limit_test))
    want = (net.in_channels, net.image_size, net.image_size)
    if train.images.shape[1:] != want:
        raise CliError(f"dataset images are {train.images.shape[1:]}, network expects {want}")
    return train, test


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path: Path, header, rows, mode="w"):
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _ledger_rows(config: NetworkConfig):
    return list(count_parameters(config).items())


# --------------------------------------------------------------- commands

def cmd_train(args) -> int:
    net_cfg, train_cfg, run = _resolve(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start_epoch, opt, stats = 0, None, None
    if args.resume:
        loaded = load_for_training(args.resume)
        net, opt = loaded.net, loaded.optimizer
        net_cfg = net.config
        start_epoch = int(loaded.meta.get("epoch", 0))
        if loaded.channel_mean is not None:
            stats = (loaded.channel_mean, loaded.channel_std)
    else:
        net = MBCliqueNet(net_cfg, seed=run["seed"])
    (out / "config.txt").write_text(_config_text(net_cfg, train_cfg, run))
    train, test = _load_data(run, net_cfg, args, stats)
    _write_csv(out / "ledger.csv", ("category", "count"), _ledger_rows(net_cfg))
    epochs = train_cfg.total_epochs
    if start_epoch >= epochs:
        raise CliError(f"archive is at epoch {start_epoch}, nothing to do for --epochs {epochs}")
    mode = "a" if args.resume and (out / "metrics.csv").exists() else "w"
    if mode == "w":
        _write_csv(out / "metrics.csv", METRIC_COLUMNS, [])
        _write_csv(out / "timing.csv", ("epoch", "wall_seconds"), [])
    boundaries = set(period_boundaries(train_cfg))
    meta = {"dataset": run["dataset"], "seed": run["seed"]}

    def save(name, epoch, opt_state):
        save_model(net, out / name, "train", opt_state, meta=dict(meta, epoch=epoch),
                   channel_mean=train.channel_mean, channel_std=train.channel_std)

    def on_epoch(row, opt_state):
        _write_csv(out / "metrics.csv", None, [[row[c] for c in METRIC_COLUMNS]], "a")
        _write_csv(out / "timing.csv", None, [[row["epoch"], row["wall_seconds"]]], "a")
        print(" ".join(f"{c}={_fmt(row[c])}" for c in METRIC_COLUMNS), flush=True)
        if row["epoch"] in boundaries:
            save(f"checkpoint-epoch{row['epoch']:04d}.mbcq", row["epoch"], opt_state)

    opt = opt or OptimizerState()
    fit(net, train, train_cfg, test, epochs=epochs, opt=opt, start_epoch=start_epoch,
        augment_data=run["augment"], on_epoch=on_epoch)
    save("model.mbcq", epochs, opt)
    report = compression_report(net)
    (out / "compression.csv").write_text(report.to_csv())
    return 0


def cmd_eval(args) -> int:
    loaded = load_model(args.model)
    net = loaded.net
    run = {"dataset": args.dataset, "seed": args.seed or 0}
    stats = None
    if loaded.channel_mean is not None:
        stats = (loaded.channel_mean, loaded.channel_std)
    _, test = _load_data(run, net.config, args, stats)
    m = evaluate(net, test)
    print(f"accuracy={m['accuracy']!r} loss={m['loss']!r} samples={test.n} mode={loaded.mode}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "eval.csv", ("archive", "mode", "samples", "accuracy", "loss"),
                   [[args.model, loaded.mode, test.n, m["accuracy"], m["loss"]]])
    return 0


def cmd_export(args) -> int:
    loaded = load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "deploy.mbcq"
    stats = save_model(loaded.net, target, "deploy", meta=loaded.meta,
                       channel_mean=loaded.channel_mean, channel_std=loaded.channel_std)
    report = compression_report(target)
    (out / "compression.csv").write_text(report.to_csv())
    print(report.to_text(), end="")
    print(f"wrote {target} ({stats.total_bytes} bytes)")
    return 0


def cmd_inspect(args) -> int:
    if args.model:
        config = load_model(args.model).net.config
    else:
        config, _, _ = _resolve(args)
    rows = _ledger_rows(config)
    for key, value in rows:
        print(f"{key:<22}{value:>12}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "ledger.csv", ("category", "count"), rows)
    return 0


def _median_time(fn, repeats: int) -> float:
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def step_time(config: NetworkConfig, batch: int, repeats: int, seed: int) -> float:
    """Median seconds of one training forward + backward."""
    net = MBCliqueNet(config, seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, config.in_channels, config.image_size, config.image_size))
    y = rng.integers(0, config.num_classes, batch)

    def step():
        _, g = cross_entropy(net.forward(x, training=True), y)
        net.backward(g)

    return _median_time(step, repeats)


def conv_benchmark(config: NetworkConfig, batch: int, repeats: int, seed: int) -> list[dict]:
    """binary_conv2d against the dense path on each block's binarized 3x3 shape."""
    rng = np.random.default_rng(seed)
    rows = []
    size = config.image_size
    for b, blk in enumerate(config.blocks):
        shape = (blk.filters, blk.bottleneck, blk.kernel, blk.kernel)
        bank = sign_binarize(rng.standard_normal(shape))
        packed = pack_bits(bank)
        x64 = rng.standard_normal((batch, blk.bottleneck, size, size))
        x32 = x64.astype(np.float32)
        pad = blk.kernel // 2
        dense64 = _median_time(lambda: T.conv2d(x64, bank, 1, pad), repeats)
        dense32 = _median_time(lambda: T.conv2d(x32, bank.astype(np.float32), 1, pad), repeats)
        fast = _median_time(lambda: binary_conv2d(x64, packed, shape, 1, pad), repeats)
        ref = T.conv2d(x64, bank, 1, pad)
        err = float(np.abs(binary_conv2d(x64, packed, shape, 1, pad) - ref).max()
                    / max(np.abs(ref).max(), 1e-30))
        rows.append(dict(block=b, shape="x".join(map(str, shape)), input=f"{batch}x{blk.bottleneck}x{size}x{size}",
                         dense_f64_s=dense64, dense_f32_s=dense32, binary_s=fast,
                         speedup_vs_f64=dense64 / fast, speedup_vs_f32=dense32 / fast, rel_error=err))
        size //= 2
    return rows


def cmd_bench_k(args) -> int:
    base, _, run = _resolve(args)
    rows = []
    for k in (2, 4, 8):
        cfg = base.with_k(k)
        total = count_parameters(cfg)["total"]
        t = step_time(cfg, args.batch_size or 8, args.repeats, run["seed"]) if args.repeats else float("nan")
        rows.append((k, total, t))
    t2, t4, t8 = (r[1] for r in rows)
    print(f"{'k':>3} {'parameters':>12} {'step_seconds':>13}")
    for k, total, t in rows:
        print(f"{k:>3} {total:>12} {t:>13.4f}")
    # totals follow C + D/k; then t2 - t4 = 2 * (t4 - t8)
    print(f"difference identity: t2-t4={t2 - t4} 2*(t4-t8)={2 * (t4 - t8)} residual={t2 - t4 - 2 * (t4 - t8)}")
    counts = [count_parameters(base.with_k(k)) for k in (2, 4, 8)]
    no_m = [c["total"] - c["m_filters"] for c in counts]
    print(f"without M-filters: residual={no_m[0] - no_m[1] - 2 * (no_m[1] - no_m[2])}")
    conv_cfg = NetworkConfig.from_mapping(dict(PRESETS["cifar"]))
    conv_rows = conv_benchmark(conv_cfg, args.conv_batch, max(args.repeats, 1), run["seed"])
    print("binary_conv2d on cifar-preset 3x3 shapes:")
    for r in conv_rows:
        print(f"  block {r['block']} {r['shape']} on {r['input']}: dense f64 {r['dense_f64_s']:.4f}s "
              f"dense f32 {r['dense_f32_s']:.4f}s binary {r['binary_s']:.4f}s "
              f"(x{r['speedup_vs_f64']:.2f} vs f64, x{r['speedup_vs_f32']:.2f} vs f32) rel err {r['rel_error']:.2e}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "bench_k.csv", ("k", "parameters", "step_seconds"), rows)
        keys = list(conv_rows[0])
        _write_csv(out / "bench_conv.csv", keys, [[r[k] for k in keys] for r in conv_rows])
    return 0


def cmd_grad_check(args) -> int:
    results = run_all(args.seed or 0)
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{r.suite:<11} {r.name:<28} max_rel_error={r.max_rel_error:.3e} "
              f"threshold={r.threshold:.0e} {status}")
    return 1 if failed else 0


# ----------------------------------------------------------------- parser

def _common(p, model=False, network=True):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    p.add_argument("--out", default=None, help="output directory")
    if network:
        p.add_argument("--preset", choices=sorted(PRESETS), default=None)
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--k", type=int, default=None, help="modulation factor for every block")
        p.add_argument("--binarize-bottlenecks", type=_flag, default=None, metavar="on|off")
    if model:
        p.add_argument("--model", required=True, help="archive path")


def _data_args(p):
    p.add_argument("--dataset", choices=("synthetic", "mnist", "cifar"), default=None)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--limit-train", type=int, default=None, help="use only the first N training samples")
    p.add_argument("--limit-test", type=int, default=None, help="use only the first N test samples")
    p.add_argument("--synthetic-samples", type=int, default=256)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbcliquenet",
                                     description="Modulated binary CliqueNet training and tooling")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train", help="train a network, writing metrics and archives")
    _common(p)
    _data_args(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr-max", type=float, default=None)
    p.add_argument("--lr-min", type=float, default=None)
    p.add_argument("--augment", type=_flag, default=None, metavar="on|off")
    p.add_argument("--resume", default=None, help="train archive to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test accuracy of an archive")
    _common(p, model=True, network=False)
    _data_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="train archive -> deploy archive and compression report")
    _common(p, model=True, network=False)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("inspect", help="parameter ledger of a preset, config or archive")
    _common(p)
    p.add_argument("--model", default=None)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench-k", help="parameter counts and step timing for k = 2, 4, 8")
    _common(p)
    p.add_argument("--batch-size", type=int, default=None, help="batch for step timing (default 8)")
    p.add_argument("--repeats", type=int, default=3, help="timed repeats (0 skips step timing)")
    p.add_argument("--conv-batch", type=int, default=8)
    p.set_defaults(func=cmd_bench_k)

    p = sub.add_parser("grad-check", help="finite-difference gradient suites")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "export" and not args.out:
        parser.error("export needs --out")
    if args.command == "train" and not args.out:
        parser.error("train needs --out")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (CliError, DatasetError, ArchiveError, DeployOnlyError, ValueError, OSError) as exc:
        print(f"mbcliquenet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
