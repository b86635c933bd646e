"""Command-line entry point: ``pvnas <verb> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import datapipe as dp
from . import distill as kd
from . import evaluation as ev
from . import searchspace as ss
from .netbuilder import ConfigError, NetworkSpec, build_discrete, load_checkpoint, save_checkpoint
from .searchengine import SearchConfig, SearchDivergence, config_dict, run_search

log = logging.getLogger("pvnas")

CONFIG_VERSION = 1
DATA_ROOT_ENV = "PVNAS_DATA_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Flat run configuration; every field can come from a JSON file or a flag."""
    version: int = CONFIG_VERSION
    seed: int = 0
    data_root: str | None = None
    out_dir: str = "runs"
    # data
    image_size: int = dp.IMAGE_SIZE
    interpolation: str = "bilinear"
    threshold: float = dp.THRESHOLD
    train_ratio: float = 0.75
    search_ratio: float = 0.5
    augment: bool = True
    # network
    init_channels: int = 64
    num_nodes: int = 4
    max_skip: int = ss.DEFAULT_MAX_SKIP
    literal_table2: bool = False
    genotype: str | None = None
    # search
    search_channels: int = 16
    search_epochs: int = 50
    search_batch_size: int = 32
    search_order: str = "first"
    search_w_lr: float = 0.025
    search_a_lr: float = 3e-4
    early_stop_patience: int = 2
    # training
    epochs: int = 200
    batch_size: int = 32
    lr: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 7e-3
    grad_clip: float = 0.0
    # distillation
    teacher: str | None = None
    teacher_width: float | None = None
    attention_weight: float = 1000.0
    feature_weight: float = 0.05
    logit_weight: float = 1.0
    p: float = 2.0
    temperature: float = 1.0
    normalize_attention: bool = True
    use_attention: bool = True
    use_feature: bool = True
    use_logit: bool = True
    use_task: bool = True
    drop_branches: list[int] = field(default_factory=list)

    def validate(self) -> "RunConfig":
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"config version {self.version} unsupported (expected {CONFIG_VERSION})")
        positive = ("image_size", "init_channels", "num_nodes", "search_channels", "search_batch_size", "batch_size")
        for k in positive:
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1")
        for k in ("search_epochs", "epochs", "max_skip", "lr", "weight_decay", "grad_clip", "search_w_lr",
                  "search_a_lr", "momentum"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0")
        if self.interpolation not in dp.INTERPOLATION:
            raise ConfigError(f"interpolation must be one of {sorted(dp.INTERPOLATION)}")
        if self.search_order not in ("first", "second"):
            raise ConfigError("search_order must be 'first' or 'second'")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        for k in ("genotype", "teacher"):
            v = getattr(self, k)
            if v is not None and not Path(v).is_file():
                raise ConfigError(f"{k} file not found: {v}")
        self.plan()
        return self

    def plan(self) -> kd.DistillPlan:
        return kd.DistillPlan(attention_weight=self.attention_weight, feature_weight=self.feature_weight,
                              logit_weight=self.logit_weight, p=self.p, temperature=self.temperature,
                              normalize_attention=self.normalize_attention, use_attention=self.use_attention,
                              use_feature=self.use_feature, use_logit=self.use_logit, use_task=self.use_task,
                              dropped_branches=tuple(self.drop_branches))

    def spec(self, channels: int | None = None) -> NetworkSpec:
        return NetworkSpec(init_channels=channels or self.init_channels, input_size=self.image_size,
                           num_nodes=self.num_nodes, literal_table2=self.literal_table2)

    def schedule(self) -> kd.TrainSchedule:
        return kd.TrainSchedule(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
                                weight_decay=self.weight_decay, grad_clip=self.grad_clip, seed=self.seed)

    def search_config(self) -> SearchConfig:
        return SearchConfig(max_epochs=self.search_epochs, batch_size=self.search_batch_size,
                            init_channels=self.search_channels, w_lr=self.search_w_lr, a_lr=self.search_a_lr,
                            max_skip=self.max_skip, order=self.search_order,
                            early_stop_patience=self.early_stop_patience, seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """defaults < config file < flags."""
    base = RunConfig().to_dict()
    if os.environ.get(DATA_ROOT_ENV):
        base["data_root"] = os.environ[DATA_ROOT_ENV]
    if getattr(args, "config", None):
        RunConfig.load(args.config)          # rejects unknown keys / bad JSON
        base.update(json.loads(Path(args.config).read_text()))
    names = {f.name for f in dataclasses.fields(RunConfig)}
    for k, v in vars(args).items():
        if k in names and v is not None:
            base[k] = v
    return RunConfig.from_dict(base).validate()


# ---------------------------------------------------------------- data


def _require_data_root(cfg: RunConfig) -> Path:
    if not cfg.data_root:
        raise ConfigError(f"no dataset given: pass --data-root or set {DATA_ROOT_ENV}")
    root = Path(cfg.data_root)
    if not root.is_dir():
        raise ConfigError(f"dataset path does not exist: {root}")
    return root


def _split_path(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir) / "split.json"


def load_splits(cfg: RunConfig) -> dict[str, list[dp.Sample]]:
    """Load the dataset and reuse ``<out>/split.json`` if present, else create it."""
    samples = dp.load_dataset(_require_data_root(cfg), cfg.image_size, cfg.interpolation, cfg.threshold)
    path = _split_path(cfg)
    if path.exists():
        return dp.load_split(samples, path)
    split = dp.split_dataset(samples, dp.SplitPlan(cfg.train_ratio, cfg.search_ratio, cfg.seed))
    path.parent.mkdir(parents=True, exist_ok=True)
    dp.save_split(split, path)
    return split


def _datasets(cfg: RunConfig, split, augment: bool):
    mean, std = dp.channel_stats(split["train"])
    aug = dp.AugmentConfig() if augment else None
    train = dp.SampleDataset(split["train"], mean, std, augment=aug, seed=cfg.seed)
    test = dp.SampleDataset(split["test"], mean, std)
    return train, test, {"mean": mean.tolist(), "std": std.tolist()}


def _dataset_for(cfg: RunConfig, meta: dict, which: str):
    split = load_splits(cfg)
    mean, std = np.asarray(meta["mean"], np.float32), np.asarray(meta["std"], np.float32)
    return dp.SampleDataset(split[which], mean, std)


def _strata_summary(samples) -> dict[str, int]:
    return {f"{'defective' if k[0] else 'functional'}/{k[1]}": v
            for k, v in sorted(dp.strata_counts(samples).items())}


# ---------------------------------------------------------------- commands


def cmd_import(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    root = _require_data_root(cfg)
    samples = dp.load_dataset(root, cfg.image_size, cfg.interpolation, cfg.threshold)
    split = dp.split_dataset(samples, dp.SplitPlan(cfg.train_ratio, cfg.search_ratio, cfg.seed))
    out.mkdir(parents=True, exist_ok=True)
    dp.write_manifest(out / dp.MANIFEST_NAME, [
        {"path": str((root / s.sample_id).resolve()), "probability": s.defect_probability,
         "cell_type": s.cell_type} for s in samples])
    dp.save_split(split, _split_path(cfg))
    summary = {"total": len(samples), "all": _strata_summary(samples),
               **{k: {"n": len(v), **_strata_summary(v)} for k, v in split.items()}}
    (out / "import.json").write_text(json.dumps(summary, indent=2) + "\n")
    cfg.save(out / "import.config.json")
    print(f"imported {len(samples)} samples from {root} "
          f"({sum(s.label for s in samples)} defective); manifest {out / dp.MANIFEST_NAME}")
    for k, v in split.items():
        print(f"  {k:<13}{len(v):6d}  {_strata_summary(v)}")
    return EXIT_OK


def cmd_search(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    split = load_splits(cfg)
    mean, std = dp.channel_stats(split["search_train"])
    train = dp.SampleDataset(split["search_train"], mean, std)
    val = dp.SampleDataset(split["search_val"], mean, std)
    scfg = cfg.search_config()
    torch.manual_seed(cfg.seed)
    geno, state = run_search(train, val, scfg, cfg.spec(cfg.search_channels), log_path=out / "search_history.jsonl",
                             snapshot_dir=out / "genotypes")
    path = geno.save(out / "genotype.json")
    (out / "search_config.json").write_text(json.dumps(config_dict(scfg), indent=2) + "\n")
    cfg.save(out / "search.config.json")
    stopped = " (early stop)" if state.history and state.history[-1]["early_stop"] else ""
    print(f"search finished after {state.epoch} epoch(s){stopped}; genotype written to {path}")
    print(geno.dumps())
    return EXIT_OK


def _teacher_width(cfg: RunConfig) -> float:
    return cfg.teacher_width if cfg.teacher_width is not None else cfg.init_channels / 64


def _load_genotype(cfg: RunConfig) -> ss.NetworkGenotype:
    path = Path(cfg.genotype) if cfg.genotype else Path(cfg.out_dir) / "genotype.json"
    if not path.is_file():
        raise ConfigError(f"no genotype: pass --genotype or run search first ({path} missing)")
    g = ss.NetworkGenotype.load(path)
    report = ss.validate_genotype(g, cfg.max_skip)
    if report:
        raise ConfigError(f"{path}: invalid genotype: " + "; ".join(report))
    return g


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mode = args.mode
    split = load_splits(cfg)
    train, test, norm = _datasets(cfg, split, cfg.augment)
    sched = cfg.schedule()
    plan = cfg.plan()
    meta = {"mode": mode, "seed": cfg.seed, "image_size": cfg.image_size, **norm}
    torch.manual_seed(cfg.seed)
    if mode == "teacher":
        width = _teacher_width(cfg)
        teacher = kd.build_teacher(plan, width)
        teacher, hist = kd.train_teacher(teacher, train, sched, test, out / "teacher_log.jsonl")
        path = out / "teacher.pt"
        kd.save_teacher(path, teacher, plan, width, meta)
    else:
        network = build_discrete(cfg.spec(), _load_genotype(cfg))
        if mode == "scratch":
            network, hist = kd.train_scratch(network, train, sched, test, out / "scratch_log.jsonl")
        else:
            tpath = cfg.teacher or out / "teacher.pt"
            if not Path(tpath).is_file():
                raise ConfigError(f"distillation needs a trained teacher: pass --teacher or run 'train teacher' "
                                  f"({tpath} missing)")
            teacher, _ = kd.load_teacher(tpath)
            student = kd.attach_branches(network, plan, teacher)
            log.info("distilling over branches %s plus main head", plan.active_branches)
            student, hist = kd.distill_train(student, teacher, train, plan, sched, test, out / "distill_log.jsonl")
            meta["plan"] = plan.to_dict()
        path = out / f"{mode}.pt"
        save_checkpoint(path, network, meta)
    cfg.save(out / f"train_{mode}.config.json")
    last = hist[-1] if hist else {}
    val = last.get("val", {})
    print(f"{mode}: {len(hist)} epoch(s), checkpoint {path}"
          + (f", test accuracy {val['accuracy']:.2f}%" if val else ""))
    return EXIT_OK


def _load_model(path):
    """Student checkpoint -> discrete network; teacher checkpoint -> its backbone."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if isinstance(blob, dict) and blob.get("kind") == "teacher":
        teacher, blob = kd.load_teacher(path)
        return teacher.backbone, blob["metadata"]
    if not isinstance(blob, dict) or "spec" not in blob:
        raise ConfigError(f"{path}: not a checkpoint written by this tool")
    return load_checkpoint(path)


def _checkpoint(args) -> Path:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return path


def cmd_evaluate(cfg: RunConfig, args) -> int:
    model, meta = _load_model(_checkpoint(args))
    cfg.image_size = meta.get("image_size", cfg.image_size)
    data = _dataset_for(cfg, meta, args.split)
    report = ev.evaluate(model, data, group_by_cell_type=True)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.checkpoint).stem
    (out / f"eval_{stem}_{args.split}.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    cfg.save(out / f"eval_{stem}.config.json")
    print(report.table())
    for flag in report.flags:
        print(f"flag: {flag}")
    return EXIT_OK


def cmd_profile(cfg: RunConfig, args) -> int:
    if args.checkpoint:
        model, meta = _load_model(_checkpoint(args))
        size = meta.get("image_size", cfg.image_size)
    else:
        model = build_discrete(cfg.spec(), _load_genotype(cfg))
        size = cfg.image_size
    rep = ev.profile(model, (3, size, size), repetitions=args.repetitions, warmup=args.warmup)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "profile.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    cfg.save(out / "profile.config.json")
    print(rep.table())
    return EXIT_OK


def cmd_cam(cfg: RunConfig, args) -> int:
    model, meta = _load_model(_checkpoint(args))
    cfg.image_size = meta.get("image_size", cfg.image_size)
    data = _dataset_for(cfg, meta, args.split)
    if args.sample is not None:
        ids = [s.sample_id for s in data.samples]
        if args.sample not in ids:
            raise ConfigError(f"sample {args.sample!r} not in the {args.split} split")
        idx = [ids.index(args.sample)]
    elif args.index is not None:
        if not 0 <= args.index < len(data):
            raise ConfigError(f"index {args.index} outside the {args.split} split (size {len(data)})")
        idx = [args.index]
    else:
        idx = [i for i, y in enumerate(data.labels) if y == 1][:args.count]
    layer = None
    if not hasattr(model, "normal_cell_indices"):
        layer = model.features[model.stage_ends[-1]]     # last conv stage, before its pool
    out = Path(cfg.out_dir) / "cam"
    for i in idx:
        x, _ = data[i]
        heat = ev.grad_cam(model, x, args.target_class, layer)
        name = Path(data.samples[i].sample_id).stem
        path = ev.save_cam(out / f"{name}_cam.png", data.samples[i].image, heat)
        print(path)
    cfg.save(Path(cfg.out_dir) / "cam.config.json")
    return EXIT_OK


def cmd_genotype(cfg: RunConfig, args) -> int:
    path = Path(args.file)
    if not path.is_file():
        raise ConfigError(f"genotype file not found: {path}")
    try:
        g = ss.NetworkGenotype.load(path)
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"{path}: {e}") from e
    if args.action == "show":
        print(g.dumps().rstrip())
        for cell in (g.normal, g.reduction):
            print(f"{cell.kind}: {cell.skip_count()} skip-connect(s)")
        return EXIT_OK
    report = ss.validate_genotype(g, cfg.max_skip)
    for line in report:
        print(line)
    print("valid" if not report else f"{len(report)} violation(s)")
    return EXIT_OK if not report else EXIT_CONFIG


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run")
    g.add_argument("--config", help="JSON run config; flags override its values")
    g.add_argument("--seed", type=int)
    g.add_argument("--data-root", dest="data_root", help=f"dataset directory (default: ${DATA_ROOT_ENV})")
    g.add_argument("--out", dest="out_dir", help="output directory for artifacts")
    g.add_argument("--proxy-size", "--image-size", dest="image_size", type=int,
                   help="resize images to this side length")
    g.add_argument("--max-skip", dest="max_skip", type=int)
    g.add_argument("--literal-table2", dest="literal_table2", action="store_const", const=True,
                   help="use two identical kernel-3 dilated convolutions")
    g.add_argument("--init-channels", dest="init_channels", type=int)
    g.add_argument("--genotype", help="genotype JSON file")
    g.add_argument("-q", "--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pvnas", description="Architecture search and distillation for EL cell defect images.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("import", help="load a dataset, binarize labels and write the stratified split")
    p.add_argument("root", nargs="?", help="dataset root (overrides --data-root)")
    _common(p)
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("search", help="bilevel architecture search")
    _common(p)
    p.add_argument("--max-epochs", "--epochs", dest="search_epochs", type=int)
    p.add_argument("--batch-size", dest="search_batch_size", type=int)
    p.add_argument("--search-channels", dest="search_channels", type=int)
    p.add_argument("--order", dest="search_order", choices=("first", "second"))
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train", help="train the teacher, or the student from scratch or by distillation")
    p.add_argument("mode", choices=("teacher", "scratch", "distill"))
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    p.add_argument("--teacher", help="teacher checkpoint (default: <out>/teacher.pt)")
    p.add_argument("--teacher-width", dest="teacher_width", type=float)
    for term in kd.LOSS_TERMS:
        p.add_argument(f"--no-{term}", dest=f"use_{term}", action="store_const", const=False,
                       help=f"disable the {term} loss")
    p.add_argument("--drop-branch", dest="drop_branches", type=int, action="append", metavar="K",
                   help="disable branch K (1-4); repeatable")
    p.add_argument("--raw-attention", dest="normalize_attention", action="store_const", const=False,
                   help="compare unnormalized attention maps")
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.set_defaults(func=cmd_train)

    for verb, func, helptext in (("evaluate", cmd_evaluate, "metrics on a split, with mono/poly breakdown"),
                                 ("cam", cmd_cam, "Grad-CAM overlays")):
        p = sub.add_parser(verb, help=helptext)
        p.add_argument("checkpoint")
        _common(p)
        p.add_argument("--split", default="test", choices=("train", "test", "search_train", "search_val"))
        p.set_defaults(func=func)
    p.add_argument("--index", type=int, help="sample index within the split")
    p.add_argument("--sample", help="sample id (manifest path)")
    p.add_argument("--count", type=int, default=4, help="number of defective samples when none is named")
    p.add_argument("--target-class", dest="target_class", type=int, choices=(0, 1))

    p = sub.add_parser("profile", help="parameters, FLOPs, latency and memory")
    p.add_argument("checkpoint", nargs="?")
    _common(p)
    p.add_argument("--repetitions", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("genotype", help="show or validate a genotype file")
    p.add_argument("action", choices=("show", "validate"))
    p.add_argument("file")
    _common(p)
    p.set_defaults(func=cmd_genotype)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:      # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if getattr(args, "root", None):
        args.data_root = args.root
    try:
        cfg = resolve_config(args)
        torch.manual_seed(cfg.seed)
        return args.func(cfg, args)
    except (ConfigError, dp.DatasetError, ss.GenotypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SearchDivergence, kd.DistillDivergence) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:      # noqa: BLE001 - report, do not dump a traceback
        log.debug("unhandled", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
