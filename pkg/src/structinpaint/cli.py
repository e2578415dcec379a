"""Command-line entry point: train, inpaint, refine, eval, ablate.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from .losses import LossWeights
from .metrics import context_ablation, evaluate
from .nets import (
    CeConfig,
    CheckpointError,
    FeatureNetConfig,
    FeatureNetParams,
    ce_forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .refine import RefineConfig, RefineError, refine_multiscale
from .train import NumericalAbort, ResumeError, TrainConfig, curriculum

log = logging.getLogger("structinpaint")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass(frozen=True)
class Preset:
    ce: CeConfig
    featnet: FeatureNetConfig
    weights: LossWeights
    resize_to: int
    phase1_steps: int
    phase2_steps: int
    batch_size: int
    refine: RefineConfig


PRESETS = {
    "desk": Preset(CeConfig.desk(), FeatureNetConfig.desk(), LossWeights.desk(), 40, 200, 40, 16, RefineConfig()),
    "paper": Preset(CeConfig.paper(), FeatureNetConfig.paper(), LossWeights.paper(), 350, 50, 10, 16,
                    RefineConfig.paper()),
}

# key -> (type, default, help)
OPTIONS = {
    "preset": (str, "desk", "geometry/schedule bundle: desk or paper"),
    "data": (str, None, "dataset: synth:KIND[+KIND...][:COUNT], a manifest file, an image directory or an image (default: none)"),
    "steps": (int, None, "phase-1 (structural loss) steps (default: from preset)"),
    "phase2_steps": (int, None, "phase-2 (adversarial) steps; 0 trains no discriminator (default: from preset)"),
    "seed": (int, 0, "random seed for init, data order and synthetic images"),
    "checkpoint": (str, "checkpoint.sinp", "checkpoint path (written by train, read otherwise)"),
    "in": (str, None, "input image for inpaint/refine (default: none)"),
    "out": (str, None, "output image for inpaint/refine (default: none)"),
    "k": (str, None, "comma-separated context extents for ablate (default: 2,4,...,max)"),
    "report_dir": (str, None, "directory for CSV/text reports (default: checkpoint directory)"),
    "batch_size": (int, None, "training batch size (default: from preset)"),
    "gamma": (float, 0.01, "adversarial weight in phase 2"),
    "lr_generator": (float, 2e-4, "context-encoder learning rate"),
    "lr_discriminator": (float, 2e-5, "discriminator learning rate"),
    "checkpoint_every": (int, 0, "checkpoint cadence in steps (0: only at the end)"),
    "resume": (bool, False, "resume training from --checkpoint"),
    "iterations": (int, None, "refinement alternations per scale (default: from preset)"),
    "scales": (int, None, "refinement pyramid levels (default: from preset)"),
    "count": (int, 64, "number of synthetic images when COUNT is not in --data"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="structinpaint", description="Structural inpainting at desk scale.")
    parser.add_argument("command", choices=["train", "inpaint", "refine", "eval", "ablate"])
    parser.add_argument("--config", default=None, help="flat key=value file; flags override its values")
    for key, (typ, default, help_) in OPTIONS.items():
        flag = "--" + key.replace("_", "-")
        if default is not None and "default" not in help_:
            help_ = f"{help_} (default: {default})"
        if typ is bool:
            parser.add_argument(flag, dest=key, action="store_true", default=None, help=help_)
        else:
            parser.add_argument(flag, dest=key, type=typ, default=None, help=help_)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return parser


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def resolve_options(argv) -> tuple[str, dict]:
    args = build_parser().parse_args(argv)
    opts = {k: spec[1] for k, spec in OPTIONS.items()}
    if args.config:
        for key, value in read_config_file(args.config).items():
            typ = OPTIONS[key][0]
            try:
                opts[key] = value.lower() in ("1", "true", "yes") if typ is bool else typ(value)
            except ValueError:
                raise ConfigError(f"config key {key}: cannot parse {value!r}") from None
    for key in OPTIONS:
        value = getattr(args, key)
        if value is not None:
            opts[key] = value
    if opts["preset"] not in PRESETS:
        raise ConfigError(f"unknown preset {opts['preset']!r}; choose from {sorted(PRESETS)}")
    opts["verbose"] = args.verbose
    return args.command, opts


# data ---------------------------------------------------------------------------

def _is_image(path: Path) -> bool:
    return path.suffix.lower() in (".png", ".ppm")


def load_images(source: str | None, size: int, seed: int, count: int) -> list[np.ndarray]:
    """Images at their stored resolution (synthetic ones drawn at ``size``)."""
    if not source:
        raise DataError("no dataset given (--data)")
    if source.startswith("synth:"):
        parts = source.split(":")[1:]
        kinds = parts[0].split("+") if parts and parts[0] else ["stripes"]
        if len(parts) > 1:
            try:
                count = int(parts[1])
            except ValueError:
                raise DataError(f"bad synthetic image count in {source!r}") from None
        bad = [k for k in kinds if k not in D.SYNTH_KINDS]
        if bad:
            raise DataError(f"unknown synthetic kinds {bad}; choose from {D.SYNTH_KINDS}")
        return D.synth_dataset(kinds, count, size, seed)
    path = Path(source)
    if not path.exists():
        raise DataError(f"dataset path {source} does not exist")
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if _is_image(p))
    elif _is_image(path):
        files = [path]
    else:
        files = D.read_manifest(path)
    if not files:
        raise DataError(f"no images found in {source}")
    images = []
    for f in files:
        try:
            images.append(D.load_image(f))
        except (OSError, D.ImageFormatError) as exc:
            raise DataError(str(exc)) from None
    return images


def _training_images(opts, preset: Preset) -> list[np.ndarray]:
    m = preset.ce.input_size
    images = load_images(opts["data"], preset.resize_to, opts["seed"], opts["count"])
    out = []
    for img in images:
        if min(img.shape[:2]) != preset.resize_to:
            img = D.resize_smaller_dim(img, preset.resize_to)
        if min(img.shape[:2]) < m:
            raise DataError(f"image of size {img.shape[:2]} is smaller than the {m}-pixel input")
        out.append(img)
    return out


def _eval_images(opts, preset: Preset) -> list[np.ndarray]:
    m = preset.ce.input_size
    seed = opts["seed"] + 1000 if (opts["data"] or "").startswith("synth:") else opts["seed"]
    return [D.fit_square(img, m) for img in load_images(opts["data"], m, seed, opts["count"])]


# commands -----------------------------------------------------------------------

def _report_dir(opts) -> Path:
    d = Path(opts["report_dir"]) if opts["report_dir"] else Path(opts["checkpoint"]).resolve().parent
    d.mkdir(parents=True, exist_ok=True)
    return d


def featnet_path(checkpoint) -> Path:
    p = Path(checkpoint)
    return p.with_name(p.name + ".featnet")


def cmd_train(opts) -> int:
    preset = PRESETS[opts["preset"]]
    images = _training_images(opts, preset)
    spec = D.MaskSpec.from_config(preset.ce)
    dataset = D.Dataset(images, spec, seed=opts["seed"])
    try:
        config = TrainConfig(
            phase1_steps=preset.phase1_steps if opts["steps"] is None else opts["steps"],
            phase2_steps=preset.phase2_steps if opts["phase2_steps"] is None else opts["phase2_steps"],
            lr_generator=opts["lr_generator"], lr_discriminator=opts["lr_discriminator"], gamma=opts["gamma"],
            batch_size=opts["batch_size"] or preset.batch_size, seed=opts["seed"],
            checkpoint_every=opts["checkpoint_every"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    fpath = featnet_path(opts["checkpoint"])
    if opts["resume"] and fpath.exists():
        featnet = load_checkpoint(fpath, expect_config=preset.featnet).params
    else:
        featnet = init_params(preset.featnet, opts["seed"] + 2, mean=dataset.channel_mean())
    save_checkpoint(fpath, featnet)
    result = curriculum(dataset, preset.ce, featnet, preset.weights, config, opts["checkpoint"],
                        resume=opts["resume"])
    rdir = _report_dir(opts)
    result.trace.write_csv(rdir / "train_trace.csv")
    if result.trace.disc_rows:
        result.trace.write_disc_csv(rdir / "disc_trace.csv")
    for w in result.trace.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"trained {result.step} steps -> {opts['checkpoint']}")
    return EXIT_OK


def _load_ce(opts, preset: Preset):
    path = Path(opts["checkpoint"])
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    try:
        return load_checkpoint(path, expect_config=preset.ce).params
    except CheckpointError as exc:
        raise ConfigError(f"cannot use checkpoint {path}: {exc}") from None


def _inpaint(opts, preset: Preset):
    ce = _load_ce(opts, preset)
    if not opts["in"] or not opts["out"]:
        raise ConfigError("--in and --out are required")
    try:
        img = D.load_image(opts["in"])
    except (OSError, D.ImageFormatError) as exc:
        raise DataError(str(exc)) from None
    m = preset.ce.input_size
    if img.shape[:2] != (m, m):
        raise ConfigError(f"input image is {img.shape[0]}x{img.shape[1]}, checkpoint expects {m}x{m}")
    spec = D.MaskSpec.from_config(preset.ce)
    sample = D.mask_center(img, spec)
    y = ce_forward(ce, sample.masked).data
    return img, y, spec


def cmd_inpaint(opts) -> int:
    preset = PRESETS[opts["preset"]]
    img, y, spec = _inpaint(opts, preset)
    D.write_image(opts["out"], D.paste_hole(img, y, spec))
    return EXIT_OK


def _featnet_for_refine(opts, preset: Preset, img, spec) -> FeatureNetParams:
    fpath = featnet_path(opts["checkpoint"])
    if fpath.exists():
        try:
            return load_checkpoint(fpath, expect_config=preset.featnet).params
        except CheckpointError as exc:
            raise ConfigError(f"cannot use feature weights {fpath}: {exc}") from None
    return init_params(preset.featnet, opts["seed"] + 2, mean=D.context_fill(img, spec))


def cmd_refine(opts) -> int:
    preset = PRESETS[opts["preset"]]
    img, y, spec = _inpaint(opts, preset)
    base = preset.refine
    try:
        config = RefineConfig(base.alpha, base.alpha_prime, base.beta, base.patch_radius, base.layers,
                              opts["scales"] or base.scales,
                              base.iterations if opts["iterations"] is None else opts["iterations"],
                              seed=opts["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    featnet = _featnet_for_refine(opts, preset, img, spec)
    known = D.paste_hole(img, y, spec)
    result = refine_multiscale(known, y, featnet, config, spec=spec)
    D.write_image(opts["out"], result.image)
    if result.trace:
        result.write_csv(_report_dir(opts) / "refine_trace.csv")
    return EXIT_OK


def cmd_eval(opts) -> int:
    preset = PRESETS[opts["preset"]]
    ce = _load_ce(opts, preset)
    report = evaluate(ce, _eval_images(opts, preset), quantize=True)
    rdir = _report_dir(opts)
    report.write_csv(rdir / "eval.csv")
    text = report.to_text()
    (rdir / "eval.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_ablate(opts) -> int:
    preset = PRESETS[opts["preset"]]
    ce = _load_ce(opts, preset)
    spec = D.MaskSpec.from_config(preset.ce)
    if opts["k"]:
        try:
            ks = [int(v) for v in opts["k"].split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"--k expects comma-separated integers, got {opts['k']!r}") from None
    else:
        ks = sorted({2, 4, 8, spec.max_context} & set(range(1, spec.max_context + 1)))
    bad = [k for k in ks if not 0 < k <= spec.max_context]
    if bad or not ks:
        raise ConfigError(f"context extents {bad or ks} outside (0, {spec.max_context}]")
    table = context_ablation(ce, _eval_images(opts, preset), ks, spec, quantize=True)
    rdir = _report_dir(opts)
    table.write_csv(rdir / "ablation.csv")
    text = table.to_text()
    (rdir / "ablation.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "inpaint": cmd_inpaint, "refine": cmd_refine, "eval": cmd_eval,
            "ablate": cmd_ablate}


def main(argv=None) -> int:
    try:
        command, opts = resolve_options(argv)
        logging.basicConfig(level=logging.INFO if opts["verbose"] else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[command](opts)
    except (ConfigError, ResumeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RefineError as exc:
        print(f"refinement failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
