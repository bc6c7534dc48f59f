"""Command-line pipeline driver.

Subcommands: train-vit, train-mae, attack, calibrate, detect, evaluate.
Every command is driven by a flat config file (see config.py) plus a
few overriding flags, derives all randomness from the config seed, and
writes its artifacts under the output directory, so reruns with the
same config reproduce the same files.

Exit codes: 0 success, 2 configuration problems, 3 bad input data,
4 missing or corrupt state, 5 evaluation failures.
"""

import argparse
import json
import os
import sys

import torch

from . import attacks, checkpoint, data, experiment
from .config import Config
from .detectors import (DetectorConfig, calibrate_threshold, pair_scores,
                        select_layer)
from .errors import (ConfigurationError, DimensionError, EvaluationError,
                     InputError, StateError)
from .mae import MAEConfig, train_mae
from .vit import ModelConfig, TrainSpec, accuracy, train_classifier

CALIBRATION_FORMAT = "vitsentry-calibration"

EXIT_CODES = (
    (ConfigurationError, 2),
    ((InputError, DimensionError), 3),
    (StateError, 4),
    (EvaluationError, 5),
)


def _say(message):
    print(message, flush=True)


def _out_dir(config):
    path = config.get_str("out.dir", "runs")
    os.makedirs(path, exist_ok=True)
    return path


def _resolve(config, key, default_name):
    path = config.raw(key) or default_name
    if not os.path.isabs(path):
        path = os.path.join(_out_dir(config), path)
    return path


def _require(path, key):
    if not os.path.exists(path):
        raise ConfigurationError(f"{key} points at {path!r}, which does not exist")
    return path


def _splits(config):
    kind = config.get_str("data.kind", "synthetic")
    sizes = {name: config.get_int(f"data.{name}", default)
             for name, default in (("train", 4000), ("val", 512),
                                   ("calibration", 1000), ("test", 512))}
    seed = config.get_int("seed", 0)
    if kind == "synthetic":
        total = sum(sizes.values())
        pool = data.make_synthetic(
            total,
            num_classes=config.get_int("data.classes", 10),
            image_size=config.get_int("data.image_size", 32),
            channels=config.get_int("data.channels", 3),
            seed=seed,
            noise=config.get_float("data.noise", 0.02))
    elif kind == "npz":
        pool = data.load_npz(_require(config.get_str("data.path"), "data.path"))
    elif kind == "manifest":
        pool = data.load_manifest(_require(config.get_str("data.path"), "data.path"))
    else:
        raise ConfigurationError(f"unknown data.kind {kind!r}")
    order = ("train", "val", "calibration", "test")
    parts = data.split(pool, [sizes[name] for name in order], seed=seed + 1)
    return dict(zip(order, parts))


def _model_config(config):
    return ModelConfig(
        image_size=config.get_int("data.image_size", 32),
        channels=config.get_int("data.channels", 3),
        patch_size=config.get_int("model.patch_size", 4),
        embed_dim=config.get_int("model.embed_dim", 64),
        depth=config.get_int("model.depth", 6),
        num_heads=config.get_int("model.heads", 4),
        mlp_hidden_dim=config.get_int("model.mlp_dim", 256),
        num_classes=config.get_int("data.classes", 10))


def _mae_config(config):
    return MAEConfig(
        image_size=config.get_int("data.image_size", 32),
        channels=config.get_int("data.channels", 3),
        patch_size=config.get_int("mae.patch_size", 4),
        encoder_dim=config.get_int("mae.encoder_dim", 64),
        encoder_depth=config.get_int("mae.encoder_depth", 4),
        encoder_heads=config.get_int("mae.encoder_heads", 4),
        encoder_mlp_dim=config.get_int("mae.encoder_mlp_dim", 256),
        decoder_dim=config.get_int("mae.decoder_dim", 64),
        decoder_depth=config.get_int("mae.decoder_depth", 2),
        decoder_heads=config.get_int("mae.decoder_heads", 4),
        decoder_mlp_dim=config.get_int("mae.decoder_mlp_dim", 256))


def _load_model(config):
    path = _require(_resolve(config, "model.checkpoint", "vit.npz"), "model.checkpoint")
    return checkpoint.load_classifier(path)


def _load_mae(config):
    path = _require(_resolve(config, "mae.checkpoint", "mae.npz"), "mae.checkpoint")
    return checkpoint.load_autoencoder(path)


def _coerce(value):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    if value.lower() in ("true", "false"):
        return value.lower() == "true"
    return value


def _attack_config(config, name):
    params = {key: _coerce(value)
              for key, value in config.section(f"attack.{name}").items()}
    return attacks.config_from_name(name, **params)


def _detector_settings(config):
    return {
        "ratio": config.get_float("detector.ratio", 0.5),
        "strategy": config.get_str("detector.strategy", "random"),
        "recovery_mode": config.get_str("detector.recovery", "half"),
    }


def _select_layer(config, model, mae, splits):
    fixed = config.get_int("detector.layer", -1)
    if fixed >= 0:
        return fixed
    settings = _detector_settings(config)
    fgsm_cfg = _attack_config(config, "fgsm")
    n = min(config.get_int("detector.selection_samples", 256), len(splits["val"]))
    subset = splits["val"].subset(torch.arange(n))
    return select_layer(model, mae, subset.images, subset.labels, fgsm_cfg,
                        generator=torch.Generator().manual_seed(
                            config.get_int("seed", 0) + 10),
                        **settings)


def cmd_train_vit(config):
    splits = _splits(config)
    spec = TrainSpec(
        epochs=config.get_int("train.epochs", 30),
        batch_size=config.get_int("train.batch_size", 128),
        lr=config.get_float("train.lr", 1e-3),
        weight_decay=config.get_float("train.weight_decay", 0.0),
        noise_std=config.get_float("train.noise_std", 0.0),
        seed=config.get_int("seed", 0) + 1)
    model, history = train_classifier(
        splits["train"].images, splits["train"].labels,
        _model_config(config), spec, log=_say)
    test_acc = accuracy(model, splits["test"].images, splits["test"].labels)
    path = _resolve(config, "model.checkpoint", "vit.npz")
    checkpoint.save_checkpoint(path, model)
    with open(path + ".log.json", "w") as fh:
        json.dump({"history": history, "test_accuracy": test_acc,
                   "config": config.text}, fh, indent=2)
    _say(f"test accuracy {test_acc:.4f}")
    _say(f"checkpoint written to {path}")
    return path


def cmd_train_mae(config):
    splits = _splits(config)
    spec = TrainSpec(
        epochs=config.get_int("mae.epochs", 60),
        batch_size=config.get_int("mae.batch_size", 128),
        lr=config.get_float("mae.lr", 1.5e-3),
        weight_decay=config.get_float("mae.weight_decay", 0.0),
        seed=config.get_int("seed", 0) + 2)
    model, history = train_mae(
        splits["train"].images, _mae_config(config), spec,
        ratio=config.get_float("mae.ratio", 0.5), log=_say)
    path = _resolve(config, "mae.checkpoint", "mae.npz")
    checkpoint.save_checkpoint(path, model)
    with open(path + ".log.json", "w") as fh:
        json.dump({"history": history, "config": config.text}, fh, indent=2)
    _say(f"checkpoint written to {path}")
    return path


def _attack_inputs(config, splits):
    n = min(config.get_int("attack.samples", 256), len(splits["test"]))
    subset = splits["test"].subset(torch.arange(n))
    return subset.images, subset.labels


def cmd_attack(config):
    model = _load_model(config)
    name = config.get_str("attack.name", "pgd")
    cfg = _attack_config(config, name)
    mae = _load_mae(config) if name == "adaptive_cw" else None
    surrogate = None
    if name == "transfer":
        surrogate = checkpoint.load_classifier(
            _require(_resolve(config, "surrogate.checkpoint", "surrogate.npz"),
                     "surrogate.checkpoint"))
    splits = _splits(config)
    x, y = _attack_inputs(config, splits)
    gen = torch.Generator().manual_seed(config.get_int("seed", 0) + 12)
    batch = attacks.generate(model, x, y, cfg, mae=mae, surrogate=surrogate,
                             generator=gen)
    path = _resolve(config, "attack.out", f"adv_{name}.npz")
    attacks.save_batch(path, batch)
    rate = float(batch.success.float().mean()) if len(batch) else 0.0
    _say(f"{name}: {int(batch.success.sum())}/{len(batch)} successful "
         f"(rate {rate:.3f}), max linf {float(batch.linf.max()):.5f}")
    _say(f"archive written to {path}")
    return path


def cmd_calibrate(config):
    model = _load_model(config)
    mae = _load_mae(config)
    splits = _splits(config)
    settings = _detector_settings(config)
    layer = _select_layer(config, model, mae, splits)
    _say(f"selected layer {layer}")
    calib = splits["calibration"]
    d_attn, d_cls = pair_scores(
        model, mae, calib.images,
        generator=torch.Generator().manual_seed(config.get_int("seed", 0) + 11),
        **settings)
    scores = {"attention": d_attn[:, layer], "cls": d_cls[:, layer]}
    entries = []
    for feature in ("attention", "cls"):
        for target in (0.01, 0.05):
            threshold = calibrate_threshold(scores[feature], target)
            entries.append({
                "feature": feature,
                "layer": layer,
                "ratio": settings["ratio"],
                "strategy": settings["strategy"],
                "recovery_mode": settings["recovery_mode"],
                "tau": threshold.tau,
                "target_fpr": threshold.target_fpr,
                "calibration_size": threshold.calibration_size,
            })
    artifact = {"format": CALIBRATION_FORMAT, "version": 1,
                "selected_layer": layer, "entries": entries,
                "config": config.text}
    path = _resolve(config, "detector.calibration", "calibration.json")
    experiment._atomic_text(path, json.dumps(artifact, indent=2, sort_keys=True) + "\n")
    _say(f"calibration written to {path}")
    return path


def _load_calibration(config):
    path = _require(_resolve(config, "detector.calibration", "calibration.json"),
                    "detector.calibration")
    try:
        with open(path) as fh:
            artifact = json.load(fh)
    except (OSError, ValueError) as exc:
        raise StateError(f"cannot read calibration artifact {path!r}: {exc}") from exc
    if artifact.get("format") != CALIBRATION_FORMAT:
        raise StateError(f"{path!r} is not a calibration artifact")
    return artifact


def _entry(artifact, feature, target_fpr):
    for entry in artifact["entries"]:
        if entry["feature"] == feature and entry["target_fpr"] == target_fpr:
            return entry
    raise StateError(f"calibration artifact has no entry for {feature} at FPR {target_fpr}")


def cmd_detect(config):
    from .detectors import Threshold, joint_detect
    model = _load_model(config)
    mae = _load_mae(config)
    artifact = _load_calibration(config)
    target = config.get_float("detector.target_fpr", 0.05)
    entry_attn = _entry(artifact, "attention", target)
    entry_cls = _entry(artifact, "cls", target)
    archive = _require(_resolve(config, "detect.input", "adv_pgd.npz"), "detect.input")
    batch, _ = attacks.load_batch(archive)

    def as_config(entry):
        return DetectorConfig(feature=entry["feature"], layer=entry["layer"],
                              recovery_mode=entry["recovery_mode"],
                              ratio=entry["ratio"], strategy=entry["strategy"])

    def as_threshold(entry):
        return Threshold(tau=entry["tau"], target_fpr=entry["target_fpr"],
                         calibration_size=entry["calibration_size"])

    config_attn, config_cls = as_config(entry_attn), as_config(entry_cls)
    thresholds = (as_threshold(entry_attn), as_threshold(entry_cls))
    gen = torch.Generator().manual_seed(config.get_int("seed", 0) + 13)
    path = _resolve(config, "detect.out", "verdicts.jsonl")
    flagged = 0
    with open(path, "w") as fh:
        for i in range(len(batch)):
            verdict = joint_detect(batch.adversarials[i], model, mae,
                                   config_attn, config_cls, thresholds,
                                   generator=gen)
            flagged += int(verdict.adversarial)
            fh.write(json.dumps({
                "id": i,
                "d_attn": verdict.d_attn,
                "d_cls": verdict.d_cls,
                "adversarial": verdict.adversarial,
                "triggered_by": list(verdict.triggered_by),
            }, sort_keys=True) + "\n")
    _say(f"flagged {flagged}/{len(batch)} samples at target FPR {target}")
    _say(f"verdicts written to {path}")
    return path


def cmd_evaluate(config):
    model = _load_model(config)
    mae = _load_mae(config)
    splits = _splits(config)
    surrogate = None
    grid = config.get_list("attack.grid", ("fgsm", "pgd"))
    if "transfer" in grid:
        surrogate = checkpoint.load_classifier(
            _require(_resolve(config, "surrogate.checkpoint", "surrogate.npz"),
                     "surrogate.checkpoint"))
    configs = [_attack_config(config, name) for name in grid]
    layer_key = config.get_int("detector.layer", -1)
    if layer_key >= 0:
        layer = layer_key
    else:
        cal_path = _resolve(config, "detector.calibration", "calibration.json")
        if os.path.exists(cal_path):
            layer = int(_load_calibration(config)["selected_layer"])
        else:
            layer = _select_layer(config, model, mae, splits)
    _say(f"evaluating {len(configs)} attacks at layer {layer}")
    x, y = _attack_inputs(config, splits)
    settings = _detector_settings(config)
    eval_dir = os.path.join(_out_dir(config), "eval")
    experiment.run_experiment(
        model, mae, x, y, configs, layer, eval_dir,
        surrogate=surrogate,
        seed=config.get_int("seed", 0),
        config_echo=config.text,
        primary_feature=config.get_str("detector.feature", "attention"),
        render_plots=config.get_bool("eval.render", False),
        save_archives=config.get_bool("eval.save_archives", False),
        log=_say, **settings)
    path = os.path.join(eval_dir, "report.json")
    _say(f"report written to {path}")
    return path


COMMANDS = {
    "train-vit": cmd_train_vit,
    "train-mae": cmd_train_mae,
    "attack": cmd_attack,
    "calibrate": cmd_calibrate,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vitsentry",
        description="Train, attack, and detect: the full detection pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="flat key = value file")
        cmd.add_argument("--seed", type=int, default=None, help="override the config seed")
        cmd.add_argument("--workers", type=int, default=None,
                         help="torch intra-op thread budget")
        cmd.add_argument("--out", default=None, help="override out.dir")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = Config.load(args.config)
        if args.seed is not None:
            config.set("seed", args.seed)
        if args.out is not None:
            config.set("out.dir", args.out)
        if args.workers is not None:
            config.set("workers", args.workers)
        workers = config.get_int("workers", 0)
        if workers > 0:
            torch.set_num_threads(workers)
        COMMANDS[args.command](config)
    except Exception as exc:                       # noqa: BLE001 - map to exit codes
        for errtype, code in EXIT_CODES:
            if isinstance(exc, errtype):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
