"""
Command line: python -m app.cli <command> [flags]

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure. Errors are reported as one JSON line on stderr.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Type, TypeVar

from pydantic import BaseModel, ValidationError

from app.core.config import settings
from app.core.errors import ConfigError, DataError, ThermalDiffError, UsageError
from app.core.log_config import setup_logging, setup_torch
from app.data.io import save_png, write_dataset
from app.data.synth import split_generate
from app.metrics.report import format_attention, format_matrix, format_pretraining
from app.schemas.configs import DataSource, ExperimentConfig, SynthSceneSpec, TrainConfig
from app.schemas.reports import MetricsReport
from app.services.checkpoint import load_checkpoint
from app.services.evaluation import generate, write_evaluation
from app.services.experiments import run_attention, run_daynight, run_pretraining
from app.services.grids import save_image_grid
from app.services.trainer import finetune, resolve_pairs, train

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)

COMMANDS = (
    "synth-data", "train", "finetune", "sample", "evaluate",
    "ablate-daynight", "ablate-attention", "ablate-pretraining",
)


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="thermaldiff", description="Conditional diffusion RGB-to-thermal translation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="Output directory (default under $THERMALDIFF_OUTPUT_ROOT)")
        p.add_argument("--ckpt", help="Checkpoint file")
        p.add_argument("--data", help="Dataset root, or a split directory such as data/test")
        p.add_argument("--image-size", type=int, dest="image_size")
        p.add_argument("--variant", choices=["I", "II"])
        p.add_argument("--tag", choices=["day", "night", "all"])
        p.add_argument("--steps", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--spec", help="SynthSceneSpec JSON (synth-data)")
        p.add_argument("--n", type=int, help="Scene count (synth-data, ablations) or pair cap (sample, evaluate)")
        p.add_argument("--log-level", dest="log_level")
    return parser


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _read_model(cls: Type[M], path: str) -> M:
    try:
        text = Path(path).read_text()
    except FileNotFoundError as e:
        raise UsageError(f"config file not found: {path}") from e
    try:
        return cls.model_validate_json(text)
    except ValidationError as e:
        raise ConfigError(f"invalid {cls.__name__} in {path}: {e}") from e


def _out_dir(args: argparse.Namespace, default_name: str) -> Path:
    return Path(args.out) if args.out else Path(settings.THERMALDIFF_OUTPUT_ROOT) / default_name


def _data_source(path: str, default_split: str, tag: Optional[str]) -> DataSource:
    """`data/` means data/<default_split>; `data/test` names the split directly."""
    p = Path(path)
    if (p / "rgb").is_dir() and p.name in ("train", "val", "test"):
        return DataSource(root=str(p.parent), split=p.name, tag=tag or "all")
    if not p.is_dir():
        raise DataError(f"dataset directory not found: {path}")
    return DataSource(root=str(p), split=default_split, tag=tag or "all")


def _write_json(path: Path, model: BaseModel) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model.model_dump_json(indent=2))


def _emit(payload: Dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _train_config(args: argparse.Namespace, default_name: str) -> TrainConfig:
    if args.config:
        cfg = _read_model(TrainConfig, args.config)
    elif args.data:
        cfg = TrainConfig(run_name=default_name, data=_data_source(args.data, "train", args.tag))
    else:
        raise UsageError(f"{default_name} needs --config or --data")

    update = {}
    if args.data and args.config:
        update["data"] = _data_source(args.data, "train", args.tag)
    elif args.tag:
        update["data"] = cfg.data.model_copy(update={"tag": args.tag})
    if args.seed is not None:
        update["seed"] = args.seed
    if args.steps is not None:
        update["steps"] = args.steps
    if args.batch is not None:
        update["batch_size"] = args.batch
    if args.image_size is not None:
        update["image_size"] = args.image_size
    if args.variant is not None:
        update["variant"] = args.variant
        update["model"] = None
    if args.out or not cfg.out_dir:
        update["out_dir"] = str(_out_dir(args, cfg.run_name))
    try:
        return TrainConfig.model_validate({**cfg.model_dump(), **update})
    except ValidationError as e:
        raise ConfigError(f"invalid training config: {e}") from e


def _experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    exp = _read_model(ExperimentConfig, args.config) if args.config else ExperimentConfig()
    update = {}
    for flag, field in (
        ("image_size", "image_size"), ("variant", "variant"), ("steps", "steps"),
        ("batch", "batch_size"), ("seed", "seed"), ("n", "n_train"),
    ):
        if getattr(args, flag) is not None:
            update[field] = getattr(args, flag)
    try:
        return ExperimentConfig.model_validate({**exp.model_dump(), **update})
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config: {e}") from e


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

class SynthDataConfig(BaseModel):
    spec: SynthSceneSpec
    n: int


def cmd_synth_data(args: argparse.Namespace) -> int:
    spec = _read_model(SynthSceneSpec, args.spec or args.config) if (args.spec or args.config) else SynthSceneSpec()
    update = {}
    if args.seed is not None:
        update["seed"] = args.seed
    if args.image_size is not None:
        update["image_size"] = args.image_size
    if args.tag is not None:
        update["mode"] = {"day": "day", "night": "night", "all": "mixed"}[args.tag]
    spec = SynthSceneSpec.model_validate({**spec.model_dump(), **update})
    n = args.n if args.n is not None else 200
    if n < 1:
        raise UsageError(f"--n must be >= 1, got {n}")

    out = _out_dir(args, "synth-data")
    written = {}
    for split, (pairs, oracle) in split_generate(spec, n).items():
        write_dataset(pairs, str(out), split, oracle)
        written[split] = len(pairs)
    _write_json(out / "config.json", SynthDataConfig(spec=spec, n=n))
    _emit({"out": str(out), "splits": written})
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _train_config(args, "train")
    ckpt = train(cfg)
    _emit({"checkpoint": ckpt.path, "step": ckpt.manifest.step, "metrics": ckpt.manifest.metrics})
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    if not args.ckpt:
        raise UsageError("finetune needs --ckpt")
    base = load_checkpoint(args.ckpt)
    cfg = _train_config(args, "finetune")
    ckpt = finetune(base, cfg)
    _emit({"checkpoint": ckpt.path, "step": ckpt.manifest.step, "base_config_hash": ckpt.manifest.base_config_hash})
    return 0


class SampleConfig(BaseModel):
    ckpt: str
    data: DataSource
    seed: int
    n: Optional[int] = None
    use_ema: bool = True


def _sample_config(args: argparse.Namespace, command: str) -> SampleConfig:
    if not args.ckpt or not args.data:
        raise UsageError(f"{command} needs --ckpt and --data")
    return SampleConfig(
        ckpt=args.ckpt,
        data=_data_source(args.data, "test", args.tag),
        seed=args.seed if args.seed is not None else 0,
        n=args.n,
    )


def cmd_sample(args: argparse.Namespace) -> int:
    req = _sample_config(args, "sample")
    ckpt = load_checkpoint(req.ckpt)
    model_cfg = ckpt.manifest.model
    pairs, _ = resolve_pairs(req.data, model_cfg.image_size, model_cfg.in_channels_target)
    pairs = sorted(pairs, key=lambda p: p.id)[:req.n] if req.n else sorted(pairs, key=lambda p: p.id)
    if not pairs:
        raise DataError("no pairs to sample")

    out = _out_dir(args, "sample")
    (out / "generated").mkdir(parents=True, exist_ok=True)
    generated = generate(ckpt, pairs, req.seed, req.use_ema)
    for pair, img in zip(pairs, generated):
        save_png(img, out / "generated" / f"{pair.id}.png")
    save_image_grid([[p.source, p.target, g] for p, g in zip(pairs, generated)], str(out / "grid.png"))
    _write_json(out / "config.json", req)
    _emit({"out": str(out), "images": len(generated)})
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    req = _sample_config(args, "evaluate")
    ckpt = load_checkpoint(req.ckpt)
    model_cfg = ckpt.manifest.model
    pairs, _ = resolve_pairs(req.data, model_cfg.image_size, model_cfg.in_channels_target)
    out = _out_dir(args, "evaluate")
    _write_json(out / "config.json", req)
    report_path = write_evaluation(ckpt, pairs, str(out), req.n, req.seed, req.use_ema)
    report = MetricsReport.model_validate_json(report_path.read_text())
    table = (out / "report.txt").read_text()
    logger.info(f"📝 Report written to {report_path}\n{table}")
    _emit({"out": str(out), "report": str(report_path), "n_images": report.n_images, **report.headline()})
    return 0


def _run_experiment(args: argparse.Namespace, name: str, runner: Callable, formatter: Callable) -> int:
    exp = _experiment_config(args)
    out = _out_dir(args, name)
    _write_json(out / "config.json", exp)
    report = runner(exp, out)
    _write_json(out / "report.json", report)
    text = formatter(report)
    (out / "report.txt").write_text(text)
    logger.info(f"📝 {name} report\n{text}")
    _emit({"out": str(out), "report": str(out / "report.json")})
    return 0


def cmd_ablate_daynight(args: argparse.Namespace) -> int:
    return _run_experiment(args, "ablate-daynight", run_daynight, format_matrix)


def cmd_ablate_attention(args: argparse.Namespace) -> int:
    return _run_experiment(args, "ablate-attention", run_attention, format_attention)


def cmd_ablate_pretraining(args: argparse.Namespace) -> int:
    return _run_experiment(args, "ablate-pretraining", run_pretraining, format_pretraining)


HANDLERS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "ablate-daynight": cmd_ablate_daynight,
    "ablate-attention": cmd_ablate_attention,
    "ablate-pretraining": cmd_ablate_pretraining,
}


def _exit_code(e: BaseException) -> int:
    if isinstance(e, ThermalDiffError):
        return e.exit_code
    if isinstance(e, (FileNotFoundError, IsADirectoryError)):
        return DataError.exit_code
    return 1


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, run one command, and map failures to exit codes."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        setup_logging(args.log_level, stream="stderr")
        setup_torch()
        return HANDLERS[args.command](args)
    except SystemExit as e:
        return int(e.code or 0)
    except Exception as e:
        code = _exit_code(e)
        if code == 1 and not isinstance(e, (ThermalDiffError, ValidationError)):
            logger.exception("Unexpected failure")
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e), "exit_code": code}) + "\n")
        return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
