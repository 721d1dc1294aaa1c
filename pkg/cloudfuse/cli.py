"""
Command-line entry point: `cloudfuse <command> [options]`.

Every command writes its outputs under `--out` together with a `run_manifest.json`
recording the command, config digest, seed, inputs and the SHA-256 of every output.
Failures print one line, `cloudfuse: error category=<name> code=<n> message="<text>"`,
on stderr and exit with the code from `EXIT_CODE_DESCRIPTIONS`.
"""
import argparse
import json
import logging
import os
import sys
import time
from collections import OrderedDict
from dataclasses import MISSING, asdict, dataclass, field, fields
from typing import List, Optional

from . import netpbm
from .config import config_digest, load_config
from .const import RUN_MANIFEST_NAME, THREADS_ENV
from .data import cloud_samples, load_manifest
from .detect import (
    CalibratedDetector,
    CalibrationParams,
    FineTuneConfig,
    FineTunedDetector,
    ThresholdDetector,
    calibrate,
    finetune,
)
from .errors import EXIT_CODE_DESCRIPTIONS, CheckpointError, CloudFuseError, ConfigError, \
    UsageError
from .evaluate import CURVE_CSV, render_error_map, run_benchmark, size_sweep, write_curve, \
    write_report
from .fusion import TrainConfig, export_quality, train_fusion, write_loss_log
from .nn import load_checkpoint, save_checkpoint
from .synth import SceneRecipe, generate_dataset
from .util import _getLogger, sha256_file


log = _getLogger("cli")

CALIBRATION_NAME = "calibration.json"
FINETUNED_CHECKPOINT = "finetuned.ftz"
FINETUNE_CONFIG_NAME = "finetune.json"
FINETUNE_LOSS_LOG = "finetune_loss_log.csv"
CURVE_EPOCHS = 30
DETECTORS = ("threshold", "calibrated", "finetuned")

# Keys excluded when comparing two runs byte for byte.
TIMING_FIELDS = ("wall_clock_seconds",)


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seed: Optional[int]
    inputs: List[str] = field(default_factory=list)
    outputs: List[dict] = field(default_factory=list)
    wall_clock_seconds: float = 0.0

    def collect_outputs(self, out_dir):
        """
        Hash every file under `out_dir` except the run manifest itself.
        """
        outputs = []
        for root, _, files in os.walk(out_dir):
            for name in files:
                path = os.path.join(root, name)
                rel = os.path.relpath(path, out_dir).replace(os.sep, "/")
                if rel == RUN_MANIFEST_NAME:
                    continue
                outputs.append(dict(path=rel, sha256=sha256_file(path)))
        self.outputs = sorted(outputs, key=lambda o: o["path"])
        return self.outputs

    def write(self, out_dir):
        path = os.path.join(out_dir, RUN_MANIFEST_NAME)
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")
        return path


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError("%s: %s" % (self.prog, message))


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """
    Options that fall back to a config dataclass document that default in their help
    text, so don't append argparse's own "(default: None)".
    """

    def _get_help_string(self, action):
        if action.default is None and "default:" in (action.help or ""):
            return action.help
        return super(_HelpFormatter, self)._get_help_string(action)


def _field_default(cls, name):
    for f in fields(cls):
        if f.name == name:
            return f.default if f.default_factory is MISSING else f.default_factory()
    raise KeyError(name)


def _config_option(parser, flag, cls, name, help, **kwargs):
    parser.add_argument(
        flag, dest=name, default=None,
        help="%s (default: %s)" % (help, _field_default(cls, name)), **kwargs
    )


def _common(parser, seed_required=False):
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $%s or 1)" % THREADS_ENV)
    if seed_required:
        parser.add_argument("--seed", type=int, required=True, help="random seed")
    parser.add_argument("-v", "--verbose", action="store_true", help="log debug detail")
    parser.add_argument("-q", "--quiet", action="store_true", help="log warnings only")


def _data(parser, flag="--data", help="dataset manifest.json"):
    parser.add_argument(flag, required=True, help=help)


def _checkpoint(parser):
    parser.add_argument("--checkpoint", default=os.path.join("train", "best.ftz"),
                        help="fusion checkpoint holding the quality network")


def build_parser():
    parser = _ArgumentParser(
        prog="cloudfuse",
        description="Weakly-supervised multi-image fusion and bootstrapped cloud detection.",
        formatter_class=_HelpFormatter,
    )
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    def command(name, help):
        return commands.add_parser(name, help=help, description=help,
                                   formatter_class=_HelpFormatter)

    sub = command("gen-data", "generate a synthetic dataset")
    _common(sub)
    _config_option(sub, "--seed", SceneRecipe, "seed", "random seed", type=int)
    sub.add_argument("--locations", type=int, default=8, help="number of locations")
    _config_option(sub, "--k", SceneRecipe, "k", "images per location", type=int)
    _config_option(sub, "--size", SceneRecipe, "size", "image side in pixels", type=int)
    _config_option(sub, "--classes", SceneRecipe, "n_classes", "land-cover classes", type=int)
    _config_option(sub, "--coverage-min", SceneRecipe, "coverage_min", "minimum cloud coverage",
                   type=float)
    _config_option(sub, "--coverage-max", SceneRecipe, "coverage_max", "maximum cloud coverage",
                   type=float)
    _config_option(sub, "--zoom", SceneRecipe, "zoom", "tile zoom level", type=int)

    sub = command("train-fusion", "train the quality and segmentation networks end to end")
    _common(sub, seed_required=True)
    _data(sub)
    sub.add_argument("--preset", choices=("desk", "full"), default="desk",
                     help="training scale preset")
    _config_option(sub, "--epochs", TrainConfig, "epochs", "training epochs", type=int)
    _config_option(sub, "--lr", TrainConfig, "lr", "Adam learning rate", type=float)
    _config_option(sub, "--batch-size", TrainConfig, "batch_size", "locations per batch",
                   type=int)
    _config_option(sub, "--crop", TrainConfig, "crop", "random crop side", type=int)
    _config_option(sub, "--k", TrainConfig, "k", "images sampled per location", type=int)
    _config_option(sub, "--classes", TrainConfig, "n_classes", "land-cover classes", type=int)
    _config_option(sub, "--lookahead", TrainConfig, "lookahead", "wrap Adam in Lookahead",
                   action="store_const", const=True)
    _config_option(sub, "--rectify", TrainConfig, "rectify", "RAdam variance rectification",
                   action="store_const", const=True)

    sub = command("fuse", "fuse every stack and write quality masks and segmentation")
    _common(sub)
    _data(sub)
    _checkpoint(sub)

    sub = command("export-quality", "write the per-image quality masks of every stack")
    _common(sub)
    _data(sub)
    _checkpoint(sub)

    sub = command("calibrate", "fit the calibrated cloud detector on labelled images")
    _common(sub)
    _data(sub)
    _checkpoint(sub)
    sub.add_argument("--seed", type=int, default=0, help="pixel subsampling seed")
    sub.add_argument("--limit", type=int, default=None,
                     help="use only the first N images (default: all)")
    sub.add_argument("--max-points", type=int, default=10 ** 6, help="pixels used in the fit")

    sub = command("finetune", "fine-tune the quality network's last layers for detection")
    _common(sub, seed_required=True)
    _data(sub)
    _checkpoint(sub)
    sub.add_argument("--limit", type=int, default=None,
                     help="use only the first N images (default: all)")
    _config_option(sub, "--epochs", FineTuneConfig, "epochs", "fine-tune epochs", type=int)
    _config_option(sub, "--lr", FineTuneConfig, "lr", "Adam learning rate", type=float)
    _config_option(sub, "--batch-size", FineTuneConfig, "batch_size", "images per batch",
                   type=int)
    _config_option(sub, "--max-steps", FineTuneConfig, "max_steps", "stop after N steps",
                   type=int)
    _config_option(sub, "--output-is-cloud", FineTuneConfig, "output_is_cloud",
                   "read the network output as P(cloud)", action="store_const", const=True)

    sub = command("detect", "write cloud masks for every image of a dataset")
    _common(sub)
    _data(sub)
    _checkpoint(sub)
    sub.add_argument("--method", choices=DETECTORS, default="threshold", help="detector")
    sub.add_argument("--tau", type=float, default=0.5, help="threshold detector cut-off")
    sub.add_argument("--calibration", default=None,
                     help="calibration.json for the calibrated detector (default: none)")
    sub.add_argument("--finetuned", default=None,
                     help="finetuned.ftz for the fine-tuned detector (default: none)")
    sub.add_argument("--truth", action="store_true",
                     help="also write error maps against the dataset's cloud masks")

    sub = command("evaluate", "benchmark the cloud detectors on a labelled dataset")
    _common(sub)
    _data(sub)
    _checkpoint(sub)
    sub.add_argument("--methods", nargs="+", choices=DETECTORS, default=list(DETECTORS),
                     help="detectors to evaluate")
    sub.add_argument("--tau", type=float, default=0.5, help="threshold detector cut-off")
    sub.add_argument("--calibration", default=None,
                     help="calibration.json for the calibrated detector (default: none)")
    sub.add_argument("--finetuned", default=None,
                     help="finetuned.ftz for the fine-tuned detector (default: none)")

    sub = command("curve", "cloud detection accuracy against fine-tune training size")
    _common(sub, seed_required=True)
    _data(sub, help="training pool manifest.json")
    _data(sub, flag="--test", help="test manifest.json")
    _checkpoint(sub)
    sub.add_argument("--sizes", type=int, nargs="+", default=[4, 16, 64],
                     help="training sizes")
    sub.add_argument("--epochs", type=int, default=None,
                     help="fine-tune epochs per size (default: %d)" % CURVE_EPOCHS)
    return parser


def resolve_threads(value):
    if value is not None:
        threads = value
    else:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            threads = int(raw)
        except ValueError:
            raise ConfigError({"threads": "%s=%r is not an integer" % (THREADS_ENV, raw)})
    if threads < 1:
        raise ConfigError({"threads": "must be >= 1"})
    return threads


def _overrides(args, cls):
    names = set(f.name for f in fields(cls))
    return dict((k, v) for k, v in vars(args).items() if k in names and v is not None)


def _quality_net(path):
    nets = load_checkpoint(path)
    if "quality" not in nets:
        raise CheckpointError(path, "holds no quality network")
    return nets


def _labelled_samples(args):
    samples = cloud_samples(load_manifest(args.data).stacks())
    if args.limit is not None:
        samples = samples[:args.limit]
    return samples


def _finetuned_detector(path):
    if path is None:
        raise ConfigError({"finetuned": "needed for the fine-tuned detector"})
    net = _quality_net(path)["quality"]
    output_is_cloud = False
    config_path = os.path.join(os.path.dirname(path), FINETUNE_CONFIG_NAME)
    if os.path.exists(config_path):
        with open(config_path) as f:
            output_is_cloud = bool(json.load(f).get("output_is_cloud", False))
    return FineTunedDetector(net, output_is_cloud=output_is_cloud)


def _calibrated_detector(net, path):
    if path is None:
        raise ConfigError({"calibration": "needed for the calibrated detector"})
    return CalibratedDetector(net, CalibrationParams.load(path))


def _detector(args, net, name):
    if name == "threshold":
        return ThresholdDetector(net, args.tau)
    if name == "calibrated":
        return _calibrated_detector(net, args.calibration)
    return _finetuned_detector(args.finetuned)


def cmd_gen_data(args, manifest):
    recipe = load_config(SceneRecipe, args.config, _overrides(args, SceneRecipe))
    manifest.seed = recipe.seed
    manifest.config_digest = config_digest(recipe)
    generate_dataset(recipe, args.locations, args.out, threads=args.threads)


def cmd_train_fusion(args, manifest):
    base = TrainConfig.full().to_dict() if args.preset == "full" else None
    config = load_config(TrainConfig, args.config, _overrides(args, TrainConfig), base=base)
    manifest.config_digest = config_digest(config)
    manifest.inputs.append(args.data)
    result = train_fusion(load_manifest(args.data), config, out_dir=args.out)
    log.info("Final mean loss %.5f", result.losses[-1][1])


def cmd_fuse(args, manifest, with_segmentation=True):
    manifest.inputs.extend([args.data, args.checkpoint])
    nets = _quality_net(args.checkpoint)
    seg_net = nets.get("seg") if with_segmentation else None
    if with_segmentation and seg_net is None:
        raise CheckpointError(args.checkpoint, "holds no segmentation network")
    for stack in load_manifest(args.data).stacks():
        export_quality(stack, nets["quality"], os.path.join(args.out, stack.location_id),
                       seg_net=seg_net)


def cmd_export_quality(args, manifest):
    cmd_fuse(args, manifest, with_segmentation=False)


def cmd_calibrate(args, manifest):
    if args.seed < 0:
        raise ConfigError({"seed": "must be >= 0"})
    manifest.inputs.extend([args.data, args.checkpoint])
    manifest.seed = args.seed
    net = _quality_net(args.checkpoint)["quality"]
    params = calibrate(net, _labelled_samples(args), max_points=args.max_points, seed=args.seed)
    manifest.config_digest = config_digest(dict(max_points=args.max_points, limit=args.limit))
    params.save(os.path.join(args.out, CALIBRATION_NAME))


def cmd_finetune(args, manifest):
    config = load_config(FineTuneConfig, args.config, _overrides(args, FineTuneConfig))
    manifest.config_digest = config_digest(config)
    manifest.inputs.extend([args.data, args.checkpoint])
    net = _quality_net(args.checkpoint)["quality"]
    result = finetune(net, _labelled_samples(args), config)
    save_checkpoint(os.path.join(args.out, FINETUNED_CHECKPOINT), result.net)
    write_loss_log(os.path.join(args.out, FINETUNE_LOSS_LOG), result.losses)
    with open(os.path.join(args.out, FINETUNE_CONFIG_NAME), "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_detect(args, manifest):
    manifest.inputs.extend([args.data, args.checkpoint])
    manifest.config_digest = config_digest(dict(method=args.method, tau=args.tau))
    net = _quality_net(args.checkpoint)["quality"]
    detector = _detector(args, net, args.method)
    for stack in load_manifest(args.data).stacks():
        out_dir = os.path.join(args.out, stack.location_id)
        os.makedirs(out_dir, exist_ok=True)
        predicted = detector.predict(stack.images)
        for j, mask in enumerate(predicted):
            netpbm.write(os.path.join(out_dir, "cloud_%d.pgm" % j), mask * 255)
            if args.truth and stack.cloud_masks is not None:
                netpbm.write(os.path.join(out_dir, "error_%d.ppm" % j),
                             render_error_map(mask, stack.cloud_masks[j]))


def cmd_evaluate(args, manifest):
    manifest.inputs.extend([args.data, args.checkpoint])
    digest = config_digest(dict(methods=args.methods, tau=args.tau,
                                calibration=args.calibration, finetuned=args.finetuned))
    manifest.config_digest = digest
    net = _quality_net(args.checkpoint)["quality"]
    detectors = OrderedDict(
        (name, lambda name=name: _detector(args, net, name)) for name in args.methods
    )
    report = run_benchmark(load_manifest(args.data), detectors, config_digest=digest,
                           threads=args.threads)
    write_report(report, args.out)


def cmd_curve(args, manifest):
    config = load_config(FineTuneConfig, args.config, dict(epochs=args.epochs, seed=args.seed),
                         base=dict(epochs=CURVE_EPOCHS))
    manifest.config_digest = config_digest(dict(config=asdict(config), sizes=args.sizes))
    manifest.inputs.extend([args.data, args.test, args.checkpoint])
    net = _quality_net(args.checkpoint)["quality"]
    train_samples = cloud_samples(load_manifest(args.data).stacks())
    points = size_sweep(net, train_samples, load_manifest(args.test).stacks(), args.sizes,
                        config, threads=args.threads)
    write_curve(os.path.join(args.out, CURVE_CSV), points)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-fusion": cmd_train_fusion,
    "fuse": cmd_fuse,
    "export-quality": cmd_export_quality,
    "calibrate": cmd_calibrate,
    "finetune": cmd_finetune,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "curve": cmd_curve,
}


def configure_logging(args):
    level = logging.INFO
    if getattr(args, "verbose", False):
        level = logging.DEBUG
    elif getattr(args, "quiet", False):
        level = logging.WARNING
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def run(args):
    args.threads = resolve_threads(args.threads)
    manifest = RunManifest(command=args.command, config_digest="",
                           seed=getattr(args, "seed", None))
    started = time.monotonic()
    os.makedirs(args.out, exist_ok=True)
    log.info("cloudfuse %s -> %s", args.command, args.out)
    COMMANDS[args.command](args, manifest)
    manifest.wall_clock_seconds = round(time.monotonic() - started, 3)
    manifest.collect_outputs(args.out)
    return manifest.write(args.out)


def format_error(code, exc):
    message = str(exc).replace("\n", " ").replace('"', "'")
    return 'cloudfuse: error category=%s code=%d message="%s"' % (
        EXIT_CODE_DESCRIPTIONS.category(code), code, message
    )


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args)
        run(args)
    except (CloudFuseError, OSError) as exc:
        code = EXIT_CODE_DESCRIPTIONS.for_exception(exc)
        sys.stderr.write(format_error(code, exc) + "\n")
        return code
    except Exception as exc:
        log.debug("Unexpected failure", exc_info=True)
        sys.stderr.write(format_error(1, "%s: %s" % (type(exc).__name__, exc)) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
