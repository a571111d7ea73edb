"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from .featurestore import (
    FeatureStore,
    StoreError,
    SyntheticSpec,
    generate_synthetic,
    import_delimited,
    read_store,
    store_stats,
    write_store,
)
from .model import ConfigError, ModelConfig
from .probes import (
    ProbeConfig,
    ProbeError,
    ProbeResult,
    extract_representations,
    ft_probe,
    knn_probe,
    linear_probe,
    lowshot_subsample,
    mlp_probe,
    write_probe_report,
)
from .trainer import CheckpointError, TrainConfig, TrainingError, load_checkpoint, train

log = logging.getLogger("scale.cli")

SECTIONS = {"synth": SyntheticSpec, "model": ModelConfig, "train": TrainConfig, "probe": ProbeConfig}
SWEEP_AXES = {"mask": ("model", "mask_ratio"), "layers": ("model", "layers"),
              "hidden": ("model", "d_h"), "views": ("model", "K")}
SWEEP_HEADER_TAIL = "final_total,probe,feature,accuracy"


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


# ------------------------------------------------------------------ run config


@dataclass
class RunConfig:
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    explicit: set[str] = field(default_factory=set)

    def replace(self, section: str, **changes) -> RunConfig:
        new = dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})
        new.explicit = self.explicit | {f"{section}.{k}" for k in changes}
        return new

    def lines(self) -> list[str]:
        out = []
        for section in SECTIONS:
            cfg = getattr(self, section)
            out += [f"{section}.{f.name}={format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
        return out


def format_value(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_scalar(raw: str, like):
    raw = raw.strip()
    if isinstance(like, bool):
        low = raw.lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def parse_field(section: str, name: str, raw: str):
    cls = SECTIONS[section]
    default = {f.name: f.default for f in fields(cls)}[name]
    if isinstance(default, tuple):
        items = [s for s in raw.split(",") if s.strip()]
        return tuple(_parse_scalar(s, default[0]) for s in items)
    return _parse_scalar(raw, default)


def _split_key(key: str) -> tuple[str, str]:
    section, _, name = key.strip().partition(".")
    if section not in SECTIONS or name not in {f.name for f in fields(SECTIONS[section])}:
        raise UsageError(f"unknown config key {key.strip()!r}")
    return section, name


def apply_assignments(cfg: RunConfig, assignments, source: str = "override") -> RunConfig:
    for where, text in assignments:
        key, sep, raw = text.partition("=")
        if not sep:
            raise UsageError(f"{source} {where}: expected key=value, got {text!r}")
        section, name = _split_key(key)
        try:
            value = parse_field(section, name, raw)
        except ValueError as exc:
            raise UsageError(f"{source} {where}: bad value for {key.strip()}: {exc}") from None
        cfg = cfg.replace(section, **{name: value})
    return cfg


def load_run_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
        items = []
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if line:
                items.append((f"{path}:{n}", line))
        cfg = apply_assignments(cfg, items, "config")
    return apply_assignments(cfg, [(repr(o), o) for o in overrides])


def validate_run_config(cfg: RunConfig) -> None:
    for section in SECTIONS:
        try:
            getattr(cfg, section).validate()
        except (ValueError, ConfigError) as exc:
            raise UsageError(f"invalid {section} config: {exc}") from None


def echo_config(cfg: RunConfig, out) -> None:
    print("# effective config", file=out)
    for line in cfg.lines():
        print(line, file=out)


# ------------------------------------------------------------------ helpers


def _read(path) -> FeatureStore:
    return read_store(path)


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise UsageError(f"--dims must look like HxWxT, got {text!r}")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"--dims must be integers, got {text!r}") from None
    if min(dims) < 1:
        raise UsageError("--dims entries must be positive")
    return dims  # type: ignore[return-value]


def _train_overrides(args) -> list[str]:
    out = []
    for flag, key in (("epochs", "train.epochs"), ("batch_size", "train.batch_size"), ("seed", "train.seed"),
                      ("views", "model.K"), ("mask_ratio", "model.mask_ratio"), ("layers", "model.layers"),
                      ("hidden", "model.d_h"), ("set_loss", "train.use_set"), ("mcm_loss", "train.use_mcm")):
        value = getattr(args, flag, None)
        if value is not None:
            out.append(f"{key}={value}")
    return out + list(args.set or [])


def _fit_d_in(cfg: RunConfig, store: FeatureStore) -> RunConfig:
    if "model.d_in" not in cfg.explicit:
        cfg = cfg.replace("model", d_in=store.feature_dim)
        cfg.explicit.discard("model.d_in")
    if cfg.model.d_in != store.feature_dim:
        raise UsageError(f"model.d_in={cfg.model.d_in} but the store holds {store.feature_dim}-dim features")
    return cfg


def _needs_checkpoint(probe: ProbeConfig) -> bool:
    if probe.kind == "knn":
        return probe.feature != "mean-raw"
    if probe.kind == "linear":
        return probe.linear_mode == "scale"
    if probe.kind == "ft":
        return probe.ft_init == "checkpoint"
    return False


def run_probe(probe: ProbeConfig, train_store: FeatureStore, eval_store: FeatureStore,
              model_config: ModelConfig, params) -> ProbeResult:
    if probe.lowshot < 1.0:
        train_store = lowshot_subsample(train_store, probe.lowshot, probe.seed)
    if probe.kind == "ft":
        return ft_probe(train_store, eval_store, model_config, params, probe)
    use = params if _needs_checkpoint(probe) else None
    train_r = extract_representations(train_store, use, model_config)
    eval_r = extract_representations(eval_store, use, model_config)
    if probe.kind == "knn":
        return knn_probe(train_r, eval_r, probe.feature, probe.k, probe.knn_weighting, probe.knn_tau)
    if probe.kind == "linear":
        return linear_probe(train_r, eval_r, probe.linear_mode, probe)
    return mlp_probe(train_r, eval_r, probe)


# ------------------------------------------------------------------ commands


def cmd_synth(args, out) -> int:
    cfg = load_run_config(args.config, args.set or [])
    validate_run_config(cfg)
    echo_config(cfg, out)
    train_store, eval_store = generate_synthetic(cfg.synth)
    n1 = write_store(train_store, args.out_train)
    n2 = write_store(eval_store, args.out_eval)
    print(f"wrote {args.out_train} ({len(train_store)} videos, {n1} bytes)", file=out)
    print(f"wrote {args.out_eval} ({len(eval_store)} videos, {n2} bytes)", file=out)
    return 0


def cmd_import(args, out) -> int:
    dims = _parse_dims(args.dims)
    if args.dim < 1:
        raise UsageError("--dim must be positive")
    videos = import_delimited(args.csv, dims, args.dim)
    n = write_store(videos, args.out, feature_dim=args.dim)
    print(f"wrote {args.out} ({len(videos)} videos, {n} bytes)", file=out)
    return 0


def cmd_train(args, out) -> int:
    cfg = load_run_config(args.config, _train_overrides(args))
    validate_run_config(cfg)
    store = _read(args.store)
    cfg = _fit_d_in(cfg, store)
    validate_run_config(cfg)
    echo_config(cfg, out)
    result = train(store, cfg.train, cfg.model, checkpoint_path=args.out_ckpt, log_path=args.log)
    last = result.log[-1]
    print(f"trained {len(result.log)} epochs; final total={last.total:.6f}; checkpoint {args.out_ckpt}", file=out)
    return 0


def _probe_overrides(args) -> list[str]:
    out = []
    for flag, key in (("kind", "probe.kind"), ("feature", "probe.feature"), ("k", "probe.k"),
                      ("lowshot", "probe.lowshot"), ("init", "probe.ft_init"), ("mode", "probe.linear_mode")):
        value = getattr(args, flag, None)
        if value is not None:
            out.append(f"{key}={value}")
    return out + list(args.set or [])


def cmd_probe(args, out) -> int:
    cfg = load_run_config(args.config, _probe_overrides(args))
    validate_run_config(cfg)
    if _needs_checkpoint(cfg.probe) and not args.ckpt:
        raise UsageError(f"probe kind {cfg.probe.kind!r} with these settings needs --ckpt")
    train_store, eval_store = _read(args.train_store), _read(args.eval_store)
    params = None
    model_config = cfg.model
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        params, model_config = ckpt.params, ckpt.model_config
        cfg = dataclasses.replace(cfg, model=model_config)
    else:
        cfg = _fit_d_in(cfg, train_store)
        model_config = cfg.model
    echo_config(cfg, out)
    result = run_probe(cfg.probe, train_store, eval_store, model_config, params)
    if args.report:
        write_probe_report([result], args.report)
    print(f"{result.kind} ({result.feature}) accuracy={result.accuracy:.4f}", file=out)
    return 0


def _parse_axes(args) -> list[tuple[str, list]]:
    axes, values = args.axis or [], args.values or []
    if not axes:
        raise UsageError("sweep needs at least one --axis")
    if len(axes) != len(values):
        raise UsageError("give one --values list per --axis")
    parsed = []
    for axis, raw in zip(axes, values):
        if axis not in SWEEP_AXES:
            raise UsageError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
        section, name = SWEEP_AXES[axis]
        items = [s for s in raw.split(",") if s.strip()]
        if not items:
            raise UsageError(f"--values for {axis} is empty")
        try:
            parsed.append((axis, [parse_field(section, name, s) for s in items]))
        except ValueError as exc:
            raise UsageError(f"bad --values for {axis}: {exc}") from None
    return parsed


def sweep_rows(cfg: RunConfig, axes, train_store: FeatureStore, eval_store: FeatureStore) -> list[str]:
    header = ",".join([a for a, _ in axes] + [SWEEP_HEADER_TAIL])
    rows = [header]
    for combo in itertools.product(*[vals for _, vals in axes]):
        point = cfg
        for (axis, _), value in zip(axes, combo):
            section, name = SWEEP_AXES[axis]
            point = point.replace(section, **{name: value})
        validate_run_config(point)
        log.info("sweep point %s", dict(zip([a for a, _ in axes], combo)))
        result = train(train_store, point.train, point.model)
        probe = run_probe(point.probe, train_store, eval_store, point.model, result.checkpoint.params)
        cells = [format_value(v) for v in combo]
        cells += [repr(result.log[-1].total), probe.kind, probe.feature, repr(probe.accuracy)]
        rows.append(",".join(cells))
    return rows


def cmd_sweep(args, out) -> int:
    axes = _parse_axes(args)
    cfg = load_run_config(args.config, args.set or [])
    validate_run_config(cfg)
    if bool(args.train_store) != bool(args.eval_store):
        raise UsageError("give both --train-store and --eval-store, or neither to use synthetic stores")
    if args.train_store:
        train_store, eval_store = _read(args.train_store), _read(args.eval_store)
    else:
        train_store, eval_store = generate_synthetic(cfg.synth)
    cfg = _fit_d_in(cfg, train_store)
    echo_config(cfg, out)
    rows = sweep_rows(cfg, axes, train_store, eval_store)
    text = "\n".join(rows) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    out.write(text)
    return 0


def cmd_inspect(args, out) -> int:
    stats = store_stats(_read(args.store))
    print(f"videos={stats['videos']}", file=out)
    print(f"clips={stats['clips']}", file=out)
    print(f"feature_dim={stats['feature_dim']}", file=out)
    hist = stats["label_histogram"]
    if hist is None:
        print("labels=unlabeled", file=out)
    else:
        print("labels=" + ",".join(f"{k}:{v}" for k, v in sorted(hist.items())), file=out)
    return 0


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scale", description="Set-level contrastive pretraining on stored clip features.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return sp

    s = with_config(sub.add_parser("synth", help="write synthetic train/eval stores"))
    s.add_argument("--out-train", required=True)
    s.add_argument("--out-eval", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("import", help="convert delimited text to a store")
    s.add_argument("--csv", required=True)
    s.add_argument("--dims", required=True, help="HxWxT of every video")
    s.add_argument("--dim", required=True, type=int, help="feature dimension")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_import)

    s = with_config(sub.add_parser("train", help="self-supervised training"))
    s.add_argument("--store", required=True)
    s.add_argument("--out-ckpt", required=True)
    s.add_argument("--log", help="per-epoch loss log path")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--views", type=int, help="clips per view (K)")
    s.add_argument("--mask-ratio", type=float)
    s.add_argument("--layers", type=int)
    s.add_argument("--hidden", type=int)
    s.add_argument("--set-loss", choices=("on", "off"))
    s.add_argument("--mcm-loss", choices=("on", "off"))
    s.set_defaults(func=cmd_train)

    s = with_config(sub.add_parser("probe", help="evaluate representations"))
    s.add_argument("--kind", choices=("knn", "linear", "mlp", "ft"))
    s.add_argument("--train-store", required=True)
    s.add_argument("--eval-store", required=True)
    s.add_argument("--ckpt")
    s.add_argument("--feature", choices=("cls", "mean-raw", "mean-refined"))
    s.add_argument("--mode", choices=("scale", "baseline"), help="linear probe input")
    s.add_argument("--k", type=int)
    s.add_argument("--lowshot", type=float)
    s.add_argument("--init", choices=("checkpoint", "random"), help="ft probe starting point")
    s.add_argument("--report")
    s.set_defaults(func=cmd_probe)

    s = with_config(sub.add_parser("sweep", help="ablation sweep; repeat --axis/--values for a grid"))
    s.add_argument("--axis", action="append", help="one of " + ", ".join(sorted(SWEEP_AXES)))
    s.add_argument("--values", action="append", help="comma-separated values for the preceding --axis")
    s.add_argument("--train-store")
    s.add_argument("--eval-store")
    s.add_argument("--report")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("inspect", help="print store statistics")
    s.add_argument("--store", required=True)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"scale: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, out)
    except UsageError as exc:
        print(f"scale: error: {exc}", file=sys.stderr)
        return 2
    except (StoreError, CheckpointError, TrainingError, ProbeError, ValueError, OSError) as exc:
        print(f"scale: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
