"""Command-line entry point: gen-data, train, eval, bench.

Configuration resolves as defaults <- config file <- flags before any work
starts, and the resolved key=value form is echoed into every output
artifact. All randomness flows from --seed through tagged hashing.

Exit codes: 0 success, 2 usage/config, 3 file or state, 4 contract violation.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .bench import run_bench, write_report
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import codec_text_dump
from .errors import (
    BenchError,
    ConfigError,
    DecodeError,
    MicroVlaError,
    ShapeError,
    StateError,
)
from .policy import Model, PolicyConfig, init_model
from .trainer import (
    TrainConfig,
    evaluate,
    fit_codec,
    run_training,
    write_metrics_csv,
)
from .world import (
    TaskConfig,
    derive_seed,
    gen_dataset,
    load_split,
    read_manifest,
    save_split,
    write_manifest,
)


@dataclass
class RunConfig:
    """Fully resolved run configuration; one flat key=value namespace."""

    seed: int = 0
    # model
    model_dim: int = 48
    n_layers: int = 2
    n_heads: int = 4
    mlp_hidden: int = 96
    text_vocab_size: int = 8
    action_bins: int = 64
    action_dims: int = 7
    max_seq_len: int = 32
    mask_mode: str = "joint"
    joint_full_bidirectional: bool = False
    gelu_exact: bool = False
    # encoder
    patch_size: int = 4
    enc_feat_a: int = 24
    enc_feat_b: int = 24
    # task
    grid_size: int = 16
    palette_size: int = 6
    n_objects: int = 3
    object_size: int = 2
    grip_radius: float = 6.0
    # data
    train_episodes: int = 4096
    val_episodes: int = 256
    # training
    batch_size: int = 16
    steps: int = 1500
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    eval_every: int = 50
    timing: bool = True
    # codec
    quantile_lo: float = 0.01
    quantile_hi: float = 0.99
    # bench
    repeats: int = 50
    warmup: int = 10
    allow_noisy: bool = False
    bench_dtype: str = "float64"

    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                out[f.name] = str(v).lower()
            elif isinstance(v, float):
                out[f.name] = repr(v)
            else:
                out[f.name] = str(v)
        return out

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(
            model_dim=self.model_dim,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            mlp_hidden=self.mlp_hidden,
            text_vocab_size=self.text_vocab_size,
            action_bins=self.action_bins,
            action_dims=self.action_dims,
            max_seq_len=self.max_seq_len,
            mask_mode=self.mask_mode,
            joint_full_bidirectional=self.joint_full_bidirectional,
            gelu_exact=self.gelu_exact,
            seed=derive_seed(self.seed, "model-init") % (2**63),
        )

    def task_config(self) -> TaskConfig:
        return TaskConfig(
            grid_size=self.grid_size,
            palette_size=self.palette_size,
            n_objects=self.n_objects,
            object_size=self.object_size,
            grip_radius=self.grip_radius,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            mode=self.mask_mode,
            batch_size=self.batch_size,
            steps=self.steps,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            grad_clip=self.grad_clip,
            eval_every=self.eval_every,
            seed=derive_seed(self.seed, "train") % (2**63),
            timing=self.timing,
        )


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _coerce(field_type, key: str, raw: str):
    try:
        if field_type is bool:
            return _parse_bool(raw)
        return field_type(raw)
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def load_run_config(config_path: str | None,
                    overrides: dict[str, object]) -> RunConfig:
    """defaults <- config file <- explicit flags."""
    values: dict[str, object] = {}
    by_name = {f.name: f.type for f in fields(RunConfig)}
    types = {"int": int, "float": float, "bool": bool, "str": str}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {config_path}")
        for ln, line in enumerate(path.read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            key = key.strip()
            if not sep or key not in by_name:
                raise ConfigError(f"{config_path}:{ln}: unknown key {key!r}")
            values[key] = _coerce(types[by_name[key]], key, raw.strip())
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    return RunConfig(**values)


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="key=value config file")
    types = {"int": int, "float": float, "str": str}
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            parser.add_argument(flag, type=_parse_bool, default=None,
                                metavar="true|false")
        else:
            parser.add_argument(flag, type=types[f.type], default=None)


def _resolve(args) -> RunConfig:
    overrides = {
        f.name: getattr(args, f.name, None) for f in fields(RunConfig)
    }
    return load_run_config(args.config, overrides)


def _dataset_paths(data_dir: Path) -> dict[str, Path]:
    return {
        "train": data_dir / "train.bin",
        "val": data_dir / "val.bin",
        "manifest": data_dir / "manifest.txt",
    }


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    task = cfg.task_config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base_seed = derive_seed(cfg.seed, "dataset")
    paths = _dataset_paths(out)
    counts = {}
    for split, n in (("train", cfg.train_episodes), ("val", cfg.val_episodes)):
        episodes = gen_dataset(base_seed, n, split, task)
        save_split(paths[split], episodes)
        counts[split] = n
    info = {f"config.{k}": v for k, v in cfg.to_kv().items()}
    info.update({
        "train_count": str(counts["train"]),
        "val_count": str(counts["val"]),
        "base_seed": str(base_seed),
        "palette": ",".join(name for name, _ in _palette(cfg.palette_size)),
    })
    write_manifest(paths["manifest"], info)
    print(f"wrote {counts['train']} train / {counts['val']} val episodes "
          f"to {out}")
    return 0


def _palette(size: int):
    from .world import PALETTE

    return PALETTE[:size]


def _load_data(data_dir: str):
    paths = _dataset_paths(Path(data_dir))
    for key in ("train", "val", "manifest"):
        if not paths[key].exists():
            raise FileNotFoundError(f"missing dataset file: {paths[key]}")
    manifest = read_manifest(paths["manifest"])
    return load_split(paths["train"]), load_split(paths["val"]), manifest


def cmd_train(args) -> int:
    cfg = _resolve(args)
    if args.mode:
        cfg.mask_mode = args.mode
    train_eps, val_eps, _ = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = init_model(cfg.policy_config(), cfg.patch_size,
                       cfg.enc_feat_a, cfg.enc_feat_b)
    codec = fit_codec(model.config, train_eps,
                      quantile_lo=cfg.quantile_lo, quantile_hi=cfg.quantile_hi)
    tcfg = cfg.train_config()

    def progress(row):
        print(f"step {row.step:6d}  loss {row.train_loss:.4f}  "
              f"acc {row.action_token_accuracy:.3f}  "
              f"val_acc {row.val_accuracy:.3f}")

    result = run_training(model, train_eps, val_eps, tcfg, codec=codec,
                          progress=progress if args.verbose else None)
    echo = cfg.to_kv()
    write_metrics_csv(out / "metrics.csv", result.rows, echo)
    save_checkpoint(out / "checkpoint.ckpt", model, codec=result.codec,
                    extra_config=echo)
    (out / "codec.txt").write_text(codec_text_dump(result.codec))
    final = result.final
    print(f"final: val_accuracy={final.val_accuracy:.4f} "
          f"val_loss={final.val_loss:.4f} ({cfg.mask_mode} mode, "
          f"{tcfg.steps} steps)")
    return 0


def _load_model_for(args, cfg: RunConfig):
    """Model + codec from a checkpoint, or random-init from flags."""
    if args.checkpoint:
        model, codec, _ = load_checkpoint(args.checkpoint)
        for key in ("model_dim", "n_layers", "n_heads", "mlp_hidden",
                    "action_bins", "action_dims"):
            flag = getattr(args, key, None)
            if flag is not None and flag != getattr(model.config, key):
                raise StateError(
                    f"--{key.replace('_', '-')}={flag} conflicts with "
                    f"checkpoint value {getattr(model.config, key)}"
                )
        if codec is None:
            raise StateError(f"{args.checkpoint} carries no fitted codec")
        return model, codec
    model = init_model(cfg.policy_config(), cfg.patch_size,
                       cfg.enc_feat_a, cfg.enc_feat_b)
    sample = gen_dataset(derive_seed(cfg.seed, "codec-fit"), 256, "train",
                         cfg.task_config())
    codec = fit_codec(model.config, sample, quantile_lo=cfg.quantile_lo,
                      quantile_hi=cfg.quantile_hi)
    return model, codec


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    if not args.checkpoint:
        raise FileNotFoundError("eval requires --checkpoint")
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    model, codec, run_kv = load_checkpoint(args.checkpoint)
    if codec is None:
        raise StateError(f"{args.checkpoint} carries no fitted codec")
    train_eps, val_eps, _ = _load_data(args.data)
    episodes = train_eps if args.split == "train" else val_eps
    if not episodes:
        raise StateError(f"empty {args.split} split")
    stats = evaluate(model, codec, episodes)
    lines = [
        f"split={args.split}",
        f"episodes={len(episodes)}",
        f"loss={stats.loss!r}",
        f"token_accuracy={stats.token_accuracy!r}",
        f"vector_accuracy={stats.vector_accuracy!r}",
        f"l2_error={stats.l2_error!r}",
    ]
    for key in sorted(run_kv):
        lines.append(f"config.{key}={run_kv[key]}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / f"eval-{args.split}.txt").write_text(text)
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve(args)
    if not args.checkpoint and not args.random_init:
        raise ConfigError("bench needs --checkpoint or --random-init")
    model, codec = _load_model_for(args, cfg)
    if cfg.bench_dtype not in ("float64", "float32"):
        raise ConfigError(f"bench_dtype must be float64/float32, "
                          f"got {cfg.bench_dtype}")
    if cfg.bench_dtype == "float32":
        model = model.astype(np.float32)
    episode = gen_dataset(derive_seed(cfg.seed, "bench-episode"), 1, "val",
                          cfg.task_config())[0]
    report = run_bench(model, codec, episode, repeats=cfg.repeats,
                       warmup=cfg.warmup, allow_noisy=cfg.allow_noisy,
                       timing=cfg.timing, config_echo=cfg.to_kv())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "bench.txt", out / "bench.kv", report)
    print((out / "bench.txt").read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microvla",
        description="Toy vision-language-action policy: data generation, "
                    "training, evaluation and decode benchmarking. "
                    "EVLA_TOY_THREADS caps worker threads (default 1).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate train/val splits")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a policy")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=["causal", "joint"],
                   help="decoding regime to train")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--out", help="optional output directory")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="benchmark the decode paths")
    _add_config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, OSError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (BenchError, DecodeError, ShapeError, MicroVlaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
