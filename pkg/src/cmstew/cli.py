"""Command-line front door: ``cmstew {rank,train,eval,synth,verify,sweep}``.

Every command reads one flat JSON config (``--config``) with ``--set KEY=VALUE``
overrides, writes only under the output directory and appends its records to
``<out>/metrics.jsonl``. Exit codes: 0 success, 1 verification failure,
2 invalid configuration, 3 training diverged, 4 data or file error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import torch

from . import plots
from .data import DatasetError, SyntheticSpec, generate_synthetic, load_dataset, save_dataset, standardize
from .models import (CheckpointError, ClassifierConfig, DecoderConfig, EncoderConfig, ModalityRecord,
                     SourceModel, WeakModel, load_checkpoint, rank_modalities, save_checkpoint)
from .numerics import ConfigError
from .objectives import DccaConfig
from .training import (EpochReport, MetricsStream, TrainConfig, TrainingDiverged, evaluate,
                       train_source, train_weak)

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4
PATH_KEYS = ("manifest", "out_dir")


@dataclass
class RunConfig:
    manifest: str | None = None
    out_dir: str = "runs"
    run_id: str = "run"
    strong_modality: str | None = None
    weak_modality: str | None = None
    modalities: list[str] | None = None
    standardize: bool = True
    # training
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 20
    alpha: float = 1.0
    beta: float = 1.0
    dropout_rate: float = 0.3
    seed: int = 0
    ablation: str = "none"
    mask_zero_frames: bool = False
    # DCCA
    r1: float = 1e-3
    r2: float = 1e-3
    eigen_floor: float = 1e-12
    # architecture
    gru_layers: int = 2
    gru_hidden: int | None = None
    latent_dim: int = 100
    transformer_layers: int = 2
    heads: int = 2
    ffn_hidden: int = 400
    classifier_hidden: int = 300
    decoder_gru_layers: int = 2
    decoder_gru_hidden: int | None = None
    # synthetic data
    synthetic: dict = field(default_factory=dict)

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    def train_config(self, task: str, **overrides) -> TrainConfig:
        values = dict(task=task, lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                      patience=self.patience, alpha=self.alpha, beta=self.beta,
                      dropout_rate=self.dropout_rate, seed=self.seed, ablation=self.ablation,
                      mask_zero_frames=self.mask_zero_frames,
                      dcca=DccaConfig(self.r1, self.r2, self.eigen_floor, self.latent_dim))
        values.update(overrides)
        return TrainConfig(**values)

    def encoder(self, input_dim: int) -> EncoderConfig:
        return EncoderConfig(input_dim, self.gru_layers, self.gru_hidden, self.latent_dim,
                             self.transformer_layers, self.heads, (self.ffn_hidden, self.latent_dim),
                             self.dropout_rate)

    def classifier(self) -> ClassifierConfig:
        return ClassifierConfig(self.latent_dim, self.classifier_hidden, self.dropout_rate)

    def decoder(self, output_dim: int) -> DecoderConfig:
        return DecoderConfig(output_dim, self.latent_dim, self.decoder_gru_layers,
                             self.decoder_gru_hidden, self.dropout_rate)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path: str | None, overrides: list[str], seed: int | None,
                    out: str | None) -> RunConfig:
    """Config file values, then ``--set`` pairs, then ``--seed`` / ``--out``.

    Paths in the file are relative to the file; paths given on the command
    line are relative to the working directory.
    """
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        base = Path(path).resolve().parent
        for key in PATH_KEYS:
            if isinstance(raw.get(key), str):
                raw[key] = str(base / raw[key])
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        raw[key.strip()] = _parse_value(value)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out_dir"] = out
    unknown = set(raw) - RunConfig.keys()
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**raw)


# -- helpers -------------------------------------------------------------------

def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stream(cfg: RunConfig) -> MetricsStream:
    return MetricsStream(_out(cfg) / "metrics.jsonl", cfg.run_id)


def _dataset(cfg: RunConfig, modalities: list[str] | None):
    if cfg.manifest is None:
        raise ConfigError("no dataset manifest configured (set 'manifest')")
    ds = load_dataset(cfg.manifest, modalities)
    return standardize(ds) if cfg.standardize else ds


def _require_modality(name: str | None, role: str, available) -> str:
    if name is None:
        raise ConfigError(f"{role} is not configured")
    if name not in available:
        raise ConfigError(f"unknown modality {name!r}; available: {sorted(available)}")
    return name


def _manifest_modalities(cfg: RunConfig) -> dict[str, int]:
    if cfg.manifest is None:
        raise ConfigError("no dataset manifest configured (set 'manifest')")
    try:
        return json.loads(Path(cfg.manifest).read_text())["modalities"]
    except FileNotFoundError:
        raise DatasetError(f"manifest not found: {cfg.manifest}") from None


def _write_history(history: list[EpochReport], path: Path) -> Path:
    names = [f.name for f in fields(EpochReport) if f.name != "seconds"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for rep in history:
            writer.writerow(["" if getattr(rep, n) is None else getattr(rep, n) for n in names])
    return path


def _emit(stream: MetricsStream, stage: str, summary: dict) -> None:
    stream.write(stage, summary)
    print(json.dumps({"run_id": stream.run_id, "stage": stage, **summary}, sort_keys=True))


def _best(history: list[EpochReport], metric: str) -> tuple[int, dict]:
    dev = [r for r in history if r.split == "dev" and getattr(r, metric) is not None]
    if not dev:
        return -1, {}
    best = max(dev, key=lambda r: getattr(r, metric))  # first maximum, as in early stopping
    return best.epoch, {k: getattr(best, k) for k in ("acc", "f1", "ccc") if getattr(best, k) is not None}


def _source_checkpoint(path: str | None) -> SourceModel:
    if path is None:
        raise ConfigError("stage 'weak' needs --source-checkpoint (train --stage source first)")
    if not Path(path).exists():
        raise ConfigError(f"source checkpoint not found: {path} (train --stage source first)")
    model = load_checkpoint(path)
    if not isinstance(model, SourceModel):
        raise ConfigError(f"{path} is a {model.kind} checkpoint, expected a source model")
    return model.freeze()


# -- commands --------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> int:
    values = dict(cfg.synthetic)
    if args.spec:
        values.update(json.loads(Path(args.spec).read_text()))
    values.setdefault("seed", cfg.seed)
    unknown = set(values) - set(SyntheticSpec.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
    spec = SyntheticSpec(**values)
    out = _out(cfg)
    manifest = save_dataset(generate_synthetic(spec), out)
    (out / "synthetic_spec.json").write_text(spec.to_json() + "\n")
    print(manifest)
    return EXIT_OK


def cmd_rank(cfg: RunConfig, args) -> int:
    available = _manifest_modalities(cfg)
    names = args.modalities or cfg.modalities or sorted(available)
    if len(names) < 2:
        raise ConfigError("ranking needs at least two modalities")
    for name in names:
        _require_modality(name, "modality", available)
    ds = _dataset(cfg, names)
    tc = cfg.train_config(ds.task)
    stream, records = _stream(cfg), []
    for name in names:
        model, history = train_source(ds, tc, name, cfg.encoder(ds.modalities[name]), stream,
                                      stage=f"rank.{name}", classifier_cfg=cfg.classifier())
        score = evaluate(model, ds.split("dev"), ds.task, name)[tc.selection_metric]
        records.append(ModalityRecord(name, ds.modalities[name], score))
    ranked = rank_modalities(records)
    out = _out(cfg)
    with open(out / "rank.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "modality", "feature_dim", tc.selection_metric])
        for i, rec in enumerate(ranked, 1):
            writer.writerow([i, rec.name, rec.feature_dim, f"{rec.score:.6f}"])
            print(f"{i}. {rec.name:<16} dim {rec.feature_dim:<5} dev {tc.selection_metric} {rec.score:.4f}")
    plots.bar_chart([r.name for r in ranked], [r.score for r in ranked], f"dev {tc.selection_metric}",
                    out / "rank.png", title="uni-modal ranking")
    _emit(stream, "rank", {"order": [r.name for r in ranked],
                           "scores": {r.name: r.score for r in ranked}})
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    if args.ablation is not None:
        cfg = replace(cfg, ablation=args.ablation.replace("-", "_"))
    out, stream = _out(cfg), _stream(cfg)
    if args.stage == "source":
        modality = args.modality or cfg.strong_modality
        _require_modality(modality, "strong_modality", _manifest_modalities(cfg))
        ds = _dataset(cfg, [modality])
        tc = cfg.train_config(ds.task)
        model, history = train_source(ds, tc, modality, cfg.encoder(ds.modalities[modality]),
                                      stream, stage="source", classifier_cfg=cfg.classifier())
    else:
        source = _source_checkpoint(args.source_checkpoint)
        available = _manifest_modalities(cfg)
        weak = _require_modality(cfg.weak_modality, "weak_modality", available)
        strong = _require_modality(source.modality or cfg.strong_modality, "strong_modality", available)
        if source.encoder.cfg.latent_dim != cfg.latent_dim:
            raise ConfigError(f"source latent width {source.encoder.cfg.latent_dim} != "
                              f"configured latent_dim {cfg.latent_dim}")
        ds = _dataset(cfg, sorted({weak, strong}))
        tc = cfg.train_config(ds.task)
        if source.task != ds.task:
            raise ConfigError(f"source checkpoint is {source.task}, dataset is {ds.task}")
        model, history = train_weak(ds, source, tc, weak, strong, cfg.encoder(ds.modalities[weak]),
                                    cfg.decoder(ds.modalities[strong]), stream, stage="weak",
                                    classifier_cfg=cfg.classifier())
        modality = weak
    stem = f"{cfg.run_id}.{args.stage}"
    ckpt = save_checkpoint(model, out / f"{stem}.ckpt")
    _write_history(history, out / f"{stem}.history.csv")
    plots.learning_curves([asdict(r) for r in history], tc.selection_metric, out / f"{stem}.curves.png",
                          title=f"{args.stage} ({modality})")
    best_epoch, scores = _best(history, tc.selection_metric)
    summary = {"modality": modality, "task": ds.task, "seed": tc.seed, "best_epoch": best_epoch,
               "dev": scores, "epochs_run": len(history) // 2, "checkpoint": ckpt.name}
    if args.stage == "weak":
        summary.update(alpha=tc.alpha, beta=tc.beta, ablation=tc.ablation)
    _emit(stream, f"{args.stage}.summary", summary)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    if not Path(args.checkpoint).exists():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    modality = model.modality or (cfg.weak_modality if isinstance(model, WeakModel) else cfg.strong_modality)
    _require_modality(modality, "checkpoint modality", _manifest_modalities(cfg))
    ds = _dataset(cfg, [modality])
    if args.split not in ds.splits:
        raise ConfigError(f"unknown split {args.split!r}; available: {sorted(ds.splits)}")
    if model.task != ds.task:
        raise ConfigError(f"checkpoint task {model.task} does not match dataset task {ds.task}")
    scores = evaluate(model, ds.split(args.split), ds.task, modality)
    _emit(_stream(cfg), "eval", {"checkpoint": Path(args.checkpoint).name, "kind": model.kind,
                                 "modality": modality, "split": args.split, **scores})
    return EXIT_OK


def _grid(specs: list[str]) -> list[dict]:
    axes = {}
    for spec in specs:
        key, sep, values = spec.partition("=")
        if not sep or not values:
            raise ConfigError(f"--grid expects KEY=V1,V2,..., got {spec!r}")
        if key not in RunConfig.keys():
            raise ConfigError(f"unknown sweep key {key!r}")
        axes[key] = [_parse_value(v) for v in values.split(",")]
    if not axes:
        raise ConfigError("sweep needs at least one --grid axis")
    return [dict(zip(axes, combo)) for combo in itertools.product(*axes.values())]


def cmd_sweep(cfg: RunConfig, args) -> int:
    points = _grid(args.grid)
    source = _source_checkpoint(args.source_checkpoint)
    available = _manifest_modalities(cfg)
    weak = _require_modality(cfg.weak_modality, "weak_modality", available)
    strong = _require_modality(source.modality or cfg.strong_modality, "strong_modality", available)
    ds = _dataset(cfg, sorted({weak, strong}))
    stream, out, rows = _stream(cfg), _out(cfg), []
    for point in points:
        pc = replace(cfg, **point)
        tc = pc.train_config(ds.task)
        label = ",".join(f"{k}={v}" for k, v in point.items())
        model, history = train_weak(ds, source, tc, weak, strong, pc.encoder(ds.modalities[weak]),
                                    pc.decoder(ds.modalities[strong]), stream, stage=f"sweep.{label}",
                                    classifier_cfg=pc.classifier())
        best_epoch, scores = _best(history, tc.selection_metric)
        rows.append({**point, "best_epoch": best_epoch, tc.selection_metric: scores.get(tc.selection_metric)})
        print(f"{label}: dev {tc.selection_metric} {rows[-1][tc.selection_metric]:.4f} (epoch {best_epoch})")
    metric = cfg.train_config(ds.task).selection_metric
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    labels = [",".join(f"{k}={r[k]}" for k in points[0]) for r in rows]
    plots.bar_chart(labels, [r[metric] for r in rows], f"dev {metric}", out / "sweep.png",
                    title="loss-weight sweep")
    _emit(stream, "sweep", {"points": rows})
    return EXIT_OK


def cmd_verify(cfg: RunConfig, args) -> int:
    from . import verify

    oracles = json.loads(Path(args.oracles).read_text()) if args.oracles else None
    if oracles is not None:
        unknown = set(oracles) - set(verify.ORACLE_VALUES)
        if unknown:
            raise ConfigError(f"unknown oracle values: {sorted(unknown)}")

    def show(check):
        status = "PASS" if check.passed else "FAIL"
        print(f"{status}  {check.name:<30} {check.detail}", flush=True)

    results = verify.run_suite(args.level, oracles, progress=show)
    failed = [c.name for c in results if not c.passed]
    if args.level == "full":
        print("\nacceptance criteria")
        for num, title, status in verify.acceptance_table(results):
            print(f"  {num}. {title:<32} {status}")
    if cfg.out_dir and args.write:
        with open(_out(cfg) / f"verify-{args.level}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["check", "passed", "detail"])
            for c in results:
                writer.writerow([c.name, int(c.passed), c.detail])
    if failed:
        print(f"\n{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_VERIFY
    print(f"\nall {len(results)} checks passed")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; VALUE is parsed as JSON when possible")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cmstew", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rank", parents=[common], help="rank modalities by uni-modal dev score")
    p.add_argument("modalities", nargs="*", help="modalities to rank (default: config or all)")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("train", parents=[common], help="train a source or weak model")
    p.add_argument("--stage", choices=("source", "weak"), required=True)
    p.add_argument("--modality", help="modality for --stage source (default: strong_modality)")
    p.add_argument("--source-checkpoint", help="frozen source model for --stage weak")
    p.add_argument("--ablation", choices=("none", "no-lfa", "no-decoder"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="dev")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic two-view dataset")
    p.add_argument("--spec", help="JSON file with synthetic spec fields")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("verify", parents=[common], help="run the self-check suites")
    p.add_argument("--level", choices=("fast", "full"), default="fast")
    p.add_argument("--oracles", help="JSON file overriding stored oracle values")
    p.add_argument("--write", action="store_true", help="also write verify-<level>.csv")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", parents=[common], help="grid over loss weights for the weak model")
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                   help="one sweep axis, e.g. alpha=0,0.5,1")
    p.add_argument("--source-checkpoint")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("CMSTEW_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        cfg = load_run_config(args.config, args.overrides, args.seed, args.out)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"cmstew: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"cmstew: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DatasetError, CheckpointError, OSError) as exc:
        print(f"cmstew: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
